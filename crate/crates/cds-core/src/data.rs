//! Synthetic two-domain datasets with controllable shift, the few-source-
//! labels split protocol, and the sealed ground-truth side channel.
//!
//! Ground-truth labels of the unlabeled splits never appear on the samples
//! that training code sees: they are moved into [`SealedLabels`] at assembly
//! time, and the only way back out is [`DatasetSplit::eval_ground_truth`],
//! which evaluation code alone may call.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CdsError, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// One raw input with its within-domain identity. `label` is present only on
/// samples the training stage is allowed to see labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: Option<usize>,
    pub domain: Domain,
    pub index: usize,
}

/// Affine domain shift applied to target draws: x ↦ scale·R(angle)·x +
/// translation, rotation in the first two coordinates, plus isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub rotation_angle: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl ShiftSpec {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            rotation_angle: 0.0,
            translation: vec![0.0; input_dim],
            scale: 1.0,
            noise_sigma: 0.0,
        }
    }
}

/// Radius of the circle the class means sit on.
const MEAN_RADIUS: f64 = 4.0;

fn draw_cluster_point(mean: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .map(|&m| {
            let z: f64 = rng.sample(StandardNormal);
            m + sigma * z
        })
        .collect()
}

fn apply_shift(x: &[f64], shift: &ShiftSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, s) = (
        math::cos(shift.rotation_angle),
        math::sin(shift.rotation_angle),
    );
    let mut out = x.to_vec();
    out[0] = c * x[0] - s * x[1];
    out[1] = s * x[0] + c * x[1];
    for o in out.iter_mut() {
        *o *= shift.scale;
    }
    for (o, t) in out.iter_mut().zip(&shift.translation) {
        *o += t;
    }
    if shift.noise_sigma > 0.0 {
        for o in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *o += shift.noise_sigma * z;
        }
    }
    out
}

/// Generates balanced source and target samples. Source classes are isotropic
/// Gaussian clusters with means on a circle of radius 4 in the first two
/// coordinates; target samples come from the same class-conditional draws
/// mapped through `shift`. Deterministic given `seed` (source and target use
/// separate seed streams).
pub fn generate_two_domain(
    num_classes: usize,
    per_class_count: usize,
    input_dim: usize,
    cluster_sigma: f64,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if num_classes < 2 {
        return Err(CdsError::InvalidConfig(String::from(
            "need at least 2 classes",
        )));
    }
    if per_class_count < 2 {
        return Err(CdsError::InvalidConfig(String::from(
            "need at least 2 samples per class",
        )));
    }
    if input_dim < 2 {
        return Err(CdsError::InvalidConfig(String::from(
            "input dimension must be at least 2",
        )));
    }
    if shift.scale <= 0.0 {
        return Err(CdsError::InvalidConfig(String::from(
            "shift scale must be positive",
        )));
    }
    if shift.noise_sigma < 0.0 || cluster_sigma < 0.0 {
        return Err(CdsError::InvalidConfig(String::from(
            "noise levels must be non-negative",
        )));
    }
    if shift.translation.len() > input_dim {
        return Err(CdsError::InvalidConfig(String::from(
            "translation has more coordinates than the input",
        )));
    }

    let mut means = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let angle = core::f64::consts::TAU * c as f64 / num_classes as f64;
        let mut mean = vec![0.0; input_dim];
        mean[0] = MEAN_RADIUS * math::cos(angle);
        mean[1] = MEAN_RADIUS * math::sin(angle);
        means.push(mean);
    }

    let mut rng_src = ChaCha8Rng::seed_from_u64(seed);
    rng_src.set_stream(1);
    let mut rng_tgt = ChaCha8Rng::seed_from_u64(seed);
    rng_tgt.set_stream(2);

    let mut source = Vec::with_capacity(num_classes * per_class_count);
    let mut target = Vec::with_capacity(num_classes * per_class_count);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class_count {
            let idx = source.len();
            source.push(Sample {
                x: draw_cluster_point(mean, cluster_sigma, &mut rng_src),
                label: Some(c),
                domain: Domain::Source,
                index: idx,
            });
        }
        for _ in 0..per_class_count {
            let raw = draw_cluster_point(mean, cluster_sigma, &mut rng_tgt);
            let idx = target.len();
            target.push(Sample {
                x: apply_shift(&raw, shift, &mut rng_tgt),
                label: Some(c),
                domain: Domain::Target,
                index: idx,
            });
        }
    }
    Ok((source, target))
}

/// How many source labels to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelBudget {
    /// Exactly this many labeled samples per class.
    Shots(usize),
    /// ⌈fraction·class_count⌉ per class, with an at-least-one floor.
    Fraction(f64),
}

/// The source side of a split: D_s keeps labels, D_su has them stripped and
/// moved into the sealed channel.
#[derive(Debug, Clone)]
pub struct SourceSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    /// Ground-truth labels of `unlabeled`, position-aligned (None when the
    /// truth is genuinely unknown, e.g. externally supplied data). Consumed
    /// by [`DatasetSplit::assemble`]; not readable by training code from
    /// there on.
    sealed_unlabeled_labels: Vec<Option<usize>>,
}

impl SourceSplit {
    /// Builds a source split from an explicit selection: `labeled` keeps its
    /// labels, `rest` has any labels stripped into the sealed channel. Used
    /// when a split manifest arrives from disk.
    pub fn from_selection(labeled: Vec<Sample>, rest: Vec<Sample>) -> Result<Self> {
        if labeled.iter().any(|s| s.label.is_none()) {
            return Err(CdsError::InvalidConfig(String::from(
                "labeled source sample missing its label",
            )));
        }
        if labeled
            .iter()
            .chain(&rest)
            .any(|s| s.domain != Domain::Source)
        {
            return Err(CdsError::InvalidConfig(String::from(
                "source split holds non-source samples",
            )));
        }
        let sealed = rest.iter().map(|s| s.label).collect();
        let unlabeled = rest
            .into_iter()
            .map(|s| Sample {
                label: None,
                ..s
            })
            .collect();
        Ok(Self {
            labeled,
            unlabeled,
            sealed_unlabeled_labels: sealed,
        })
    }

    pub fn sealed_labels(&self) -> &[Option<usize>] {
        &self.sealed_unlabeled_labels
    }
}

/// Per class, picks the labeled subset uniformly without replacement; the
/// remainder goes to D_su with labels stripped. All input samples must be
/// labeled source samples.
pub fn split_few_shot(source: &[Sample], budget: LabelBudget, seed: u64) -> Result<SourceSplit> {
    if source.is_empty() {
        return Err(CdsError::EmptyDomain("source"));
    }
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (pos, s) in source.iter().enumerate() {
        if s.domain != Domain::Source {
            return Err(CdsError::InvalidConfig(String::from(
                "split_few_shot expects source-domain samples",
            )));
        }
        let label = s.label.ok_or_else(|| {
            CdsError::InvalidConfig(String::from("source sample missing its label"))
        })?;
        if label >= by_class.len() {
            by_class.resize(label + 1, Vec::new());
        }
        by_class[label].push(pos);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(CdsError::InvalidConfig(String::from(
            "class ids must be contiguous with every class present",
        )));
    }

    let smallest = by_class.iter().map(Vec::len).min().unwrap();
    match budget {
        LabelBudget::Shots(0) => {
            return Err(CdsError::InvalidConfig(String::from(
                "shots per class must be at least 1",
            )))
        }
        LabelBudget::Shots(k) if k > smallest => {
            return Err(CdsError::InvalidConfig(alloc::format!(
                "{k} shots exceed the smallest class size {smallest}"
            )))
        }
        LabelBudget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
            return Err(CdsError::InvalidConfig(String::from(
                "label fraction must be in (0, 1]",
            )))
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut sealed = Vec::new();
    for members in &by_class {
        let take = match budget {
            LabelBudget::Shots(k) => k,
            // Round up, never below one labeled example per class.
            LabelBudget::Fraction(f) => (libm::ceil(f * members.len() as f64) as usize).max(1),
        };
        let chosen = rand::seq::index::sample(&mut rng, members.len(), take.min(members.len()));
        let mut mask = vec![false; members.len()];
        for c in chosen.iter() {
            mask[c] = true;
        }
        for (m, &pos) in mask.iter().zip(members) {
            let s = &source[pos];
            if *m {
                labeled.push(s.clone());
            } else {
                sealed.push(s.label);
                unlabeled.push(Sample {
                    label: None,
                    ..s.clone()
                });
            }
        }
    }
    labeled.sort_by_key(|s| s.index);
    // unlabeled and sealed stay position-aligned under one sort order.
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    order.sort_by_key(|&i| unlabeled[i].index);
    let unlabeled_sorted: Vec<Sample> = order.iter().map(|&i| unlabeled[i].clone()).collect();
    let sealed_sorted: Vec<Option<usize>> = order.iter().map(|&i| sealed[i]).collect();

    Ok(SourceSplit {
        labeled,
        unlabeled: unlabeled_sorted,
        sealed_unlabeled_labels: sealed_sorted,
    })
}

/// Ground truth for the unlabeled splits. The fields are private; evaluation
/// reaches them through [`DatasetSplit::eval_ground_truth`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SealedLabels {
    source: Vec<Option<usize>>,
    target: Vec<Option<usize>>,
}

/// Read-only view of the sealed ground truth, by within-domain index.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub source_labels: &'a [Option<usize>],
    pub target_labels: &'a [Option<usize>],
}

/// The three data sources. Training sees labels only on `labeled_source`;
/// ground truth for everything else lives in the sealed channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    labeled_source: Vec<Sample>,
    unlabeled_source: Vec<Sample>,
    unlabeled_target: Vec<Sample>,
    num_classes: usize,
    /// Raw inputs by within-domain index, for bank init and batching.
    source_inputs: Vec<Vec<f64>>,
    target_inputs: Vec<Vec<f64>>,
    sealed: SealedLabels,
}

impl DatasetSplit {
    /// Builds a split from a few-shot source split and fully labeled target
    /// samples. Target labels are stripped into the sealed channel. Validates
    /// index contiguity and that every class has a labeled source example.
    pub fn assemble(
        source_split: SourceSplit,
        target: Vec<Sample>,
        num_classes: usize,
    ) -> Result<Self> {
        if target.is_empty() {
            return Err(CdsError::EmptyDomain("target"));
        }
        if source_split.labeled.is_empty() {
            return Err(CdsError::EmptyDomain("labeled source"));
        }

        let n_src = source_split.labeled.len() + source_split.unlabeled.len();
        let mut source_inputs = vec![Vec::new(); n_src];
        let mut seen = vec![false; n_src];
        let mut sealed_source = vec![None; n_src];
        let mut class_covered = vec![false; num_classes];
        for s in &source_split.labeled {
            let label = s.label.ok_or_else(|| {
                CdsError::InvalidConfig(String::from("labeled source sample missing label"))
            })?;
            if label >= num_classes {
                return Err(CdsError::InvalidConfig(alloc::format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            class_covered[label] = true;
            Self::place(&mut source_inputs, &mut seen, s)?;
            sealed_source[s.index] = Some(label);
        }
        for (s, &gt) in source_split
            .unlabeled
            .iter()
            .zip(&source_split.sealed_unlabeled_labels)
        {
            Self::place(&mut source_inputs, &mut seen, s)?;
            sealed_source[s.index] = gt;
        }
        if !seen.iter().all(|&s| s) {
            return Err(CdsError::InvalidConfig(String::from(
                "source indices are not contiguous from 0",
            )));
        }
        if !class_covered.iter().all(|&c| c) {
            return Err(CdsError::InvalidConfig(String::from(
                "every class needs at least one labeled source example",
            )));
        }

        let n_tgt = target.len();
        let mut target_inputs = vec![Vec::new(); n_tgt];
        let mut seen_t = vec![false; n_tgt];
        let mut sealed_target = vec![None; n_tgt];
        let mut unlabeled_target = Vec::with_capacity(n_tgt);
        for s in &target {
            Self::place(&mut target_inputs, &mut seen_t, s)?;
            sealed_target[s.index] = s.label;
            unlabeled_target.push(Sample {
                label: None,
                ..s.clone()
            });
        }
        if !seen_t.iter().all(|&s| s) {
            return Err(CdsError::InvalidConfig(String::from(
                "target indices are not contiguous from 0",
            )));
        }
        unlabeled_target.sort_by_key(|s| s.index);

        let dim = source_inputs[0].len();
        if source_inputs.iter().any(|x| x.len() != dim)
            || target_inputs.iter().any(|x| x.len() != dim)
        {
            return Err(CdsError::InvalidConfig(String::from(
                "all samples must share one input dimension",
            )));
        }

        Ok(Self {
            labeled_source: source_split.labeled,
            unlabeled_source: source_split.unlabeled,
            unlabeled_target,
            num_classes,
            source_inputs,
            target_inputs,
            sealed: SealedLabels {
                source: sealed_source,
                target: sealed_target,
            },
        })
    }

    fn place(inputs: &mut [Vec<f64>], seen: &mut [bool], s: &Sample) -> Result<()> {
        if s.index >= inputs.len() {
            return Err(CdsError::IndexOutOfRange {
                index: s.index,
                len: inputs.len(),
            });
        }
        if seen[s.index] {
            return Err(CdsError::InvalidConfig(alloc::format!(
                "duplicate index {} within a domain",
                s.index
            )));
        }
        seen[s.index] = true;
        inputs[s.index] = s.x.clone();
        Ok(())
    }

    pub fn labeled_source(&self) -> &[Sample] {
        &self.labeled_source
    }

    pub fn unlabeled_source(&self) -> &[Sample] {
        &self.unlabeled_source
    }

    pub fn unlabeled_target(&self) -> &[Sample] {
        &self.unlabeled_target
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn n_source(&self) -> usize {
        self.source_inputs.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.source_inputs[0].len()
    }

    /// Raw source input by within-domain index (label-free view).
    pub fn source_input(&self, index: usize) -> &[f64] {
        &self.source_inputs[index]
    }

    /// Raw target input by within-domain index (label-free view).
    pub fn target_input(&self, index: usize) -> &[f64] {
        &self.target_inputs[index]
    }

    /// Opens the sealed side channel. Evaluation only: training code must
    /// never call this, which the test suite enforces.
    pub fn eval_ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth {
            source_labels: &self.sealed.source,
            target_labels: &self.sealed.target,
        }
    }

    /// A copy with every label removed, including the sealed channel. Used to
    /// verify that stage-1 training is label-independent.
    pub fn with_all_labels_stripped(&self) -> Self {
        let strip = |samples: &[Sample]| {
            samples
                .iter()
                .map(|s| Sample {
                    label: None,
                    ..s.clone()
                })
                .collect::<Vec<_>>()
        };
        Self {
            labeled_source: strip(&self.labeled_source),
            unlabeled_source: strip(&self.unlabeled_source),
            unlabeled_target: strip(&self.unlabeled_target),
            num_classes: self.num_classes,
            source_inputs: self.source_inputs.clone(),
            target_inputs: self.target_inputs.clone(),
            sealed: SealedLabels::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_shift() -> ShiftSpec {
        ShiftSpec {
            rotation_angle: 30f64.to_radians(),
            translation: vec![2.0, 0.0],
            scale: 1.0,
            noise_sigma: 0.1,
        }
    }

    #[test]
    fn generator_counts_and_balance() {
        let (src, tgt) = generate_two_domain(3, 50, 2, 0.5, &default_shift(), 7).unwrap();
        assert_eq!(src.len(), 150);
        assert_eq!(tgt.len(), 150);
        for c in 0..3 {
            assert_eq!(src.iter().filter(|s| s.label == Some(c)).count(), 50);
            assert_eq!(tgt.iter().filter(|s| s.label == Some(c)).count(), 50);
        }
        for (i, s) in src.iter().enumerate() {
            assert_eq!(s.index, i);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_two_domain(3, 10, 4, 0.5, &default_shift(), 42).unwrap();
        let b = generate_two_domain(3, 10, 4, 0.5, &default_shift(), 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_two_domain(3, 10, 4, 0.5, &default_shift(), 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn identity_shift_keeps_class_means() {
        // With zero noise and identity shift, per-class target means agree
        // with source means up to sampling error of the Gaussian draws.
        let shift = ShiftSpec::identity(2);
        let (src, tgt) = generate_two_domain(3, 400, 2, 0.1, &shift, 5).unwrap();
        for c in 0..3 {
            let mean = |set: &[Sample]| {
                let members: Vec<&Sample> = set.iter().filter(|s| s.label == Some(c)).collect();
                let n = members.len() as f64;
                let mut m = vec![0.0; 2];
                for s in members {
                    m[0] += s.x[0] / n;
                    m[1] += s.x[1] / n;
                }
                m
            };
            let (ms, mt) = (mean(&src), mean(&tgt));
            assert!((ms[0] - mt[0]).abs() < 0.05, "class {c}: {ms:?} vs {mt:?}");
            assert!((ms[1] - mt[1]).abs() < 0.05);
        }
    }

    #[test]
    fn generator_rejects_bad_config() {
        let s = ShiftSpec::identity(2);
        assert!(generate_two_domain(1, 10, 2, 0.5, &s, 0).is_err());
        assert!(generate_two_domain(3, 1, 2, 0.5, &s, 0).is_err());
        assert!(generate_two_domain(3, 10, 1, 0.5, &s, 0).is_err());
    }

    #[test]
    fn one_shot_split_counts() {
        let (src, _) = generate_two_domain(3, 50, 2, 0.5, &default_shift(), 9).unwrap();
        let split = split_few_shot(&src, LabelBudget::Shots(1), 13).unwrap();
        assert_eq!(split.labeled.len(), 3);
        assert_eq!(split.unlabeled.len(), 147);
        assert!(split.unlabeled.iter().all(|s| s.label.is_none()));
        for c in 0..3 {
            assert_eq!(
                split.labeled.iter().filter(|s| s.label == Some(c)).count(),
                1
            );
        }
    }

    #[test]
    fn full_fraction_leaves_no_unlabeled() {
        let (src, _) = generate_two_domain(2, 5, 2, 0.5, &default_shift(), 9).unwrap();
        let split = split_few_shot(&src, LabelBudget::Fraction(1.0), 13).unwrap();
        assert_eq!(split.labeled.len(), 10);
        assert!(split.unlabeled.is_empty());
    }

    #[test]
    fn fraction_rounds_up_with_floor() {
        // fraction 0.03 on a class of 20: ⌈0.6⌉ = 1 labeled per class.
        let (src, _) = generate_two_domain(2, 20, 2, 0.5, &default_shift(), 9).unwrap();
        let split = split_few_shot(&src, LabelBudget::Fraction(0.03), 13).unwrap();
        assert_eq!(split.labeled.len(), 2);
        assert_eq!(split.unlabeled.len(), 38);
    }

    #[test]
    fn split_rejects_oversized_shots() {
        let (src, _) = generate_two_domain(3, 4, 2, 0.5, &default_shift(), 9).unwrap();
        assert!(matches!(
            split_few_shot(&src, LabelBudget::Shots(5), 0),
            Err(CdsError::InvalidConfig(_))
        ));
    }

    #[test]
    fn split_partitions_exactly() {
        let (src, _) = generate_two_domain(4, 9, 3, 0.5, &default_shift(), 21).unwrap();
        let split = split_few_shot(&src, LabelBudget::Shots(3), 2).unwrap();
        assert_eq!(split.labeled.len() + split.unlabeled.len(), src.len());
        let mut all: Vec<usize> = split
            .labeled
            .iter()
            .chain(&split.unlabeled)
            .map(|s| s.index)
            .collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..src.len()).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn assemble_seals_ground_truth() {
        let (src, tgt) = generate_two_domain(3, 10, 2, 0.5, &default_shift(), 3).unwrap();
        let truth: Vec<Option<usize>> = tgt.iter().map(|s| s.label).collect();
        let split = split_few_shot(&src, LabelBudget::Shots(2), 1).unwrap();
        let ds = DatasetSplit::assemble(split, tgt, 3).unwrap();
        assert!(ds.unlabeled_target().iter().all(|s| s.label.is_none()));
        assert!(ds.unlabeled_source().iter().all(|s| s.label.is_none()));
        let gt = ds.eval_ground_truth();
        assert_eq!(gt.target_labels, truth.as_slice());
        // Sealed source labels agree with the generator on every index.
        for (i, l) in gt.source_labels.iter().enumerate() {
            assert_eq!(*l, Some(i / 10));
        }
    }

    #[test]
    fn stripped_split_has_no_labels_anywhere() {
        let (src, tgt) = generate_two_domain(2, 6, 2, 0.5, &default_shift(), 3).unwrap();
        let split = split_few_shot(&src, LabelBudget::Shots(1), 1).unwrap();
        let ds = DatasetSplit::assemble(split, tgt, 2).unwrap();
        let bare = ds.with_all_labels_stripped();
        assert!(bare.labeled_source().iter().all(|s| s.label.is_none()));
        let gt = bare.eval_ground_truth();
        assert!(gt.source_labels.is_empty());
        assert!(gt.target_labels.is_empty());
        // Inputs are untouched.
        assert_eq!(bare.source_input(3), ds.source_input(3));
    }
}
