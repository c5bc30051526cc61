//! Stage-2 adaptation: a linear classifier on top of the (optionally frozen)
//! encoder, trained with cross entropy on the few labeled source samples,
//! entropy minimization on the unlabeled target as the in-scope adaptation
//! objective, and λ-weighted entropy minimization on the unlabeled source.
//!
//! Training reads labels only from the labeled source split. The sealed
//! ground truth feeds the per-epoch accuracy columns and nothing else.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetSplit;
use crate::encoder::{
    encoder_backward, encoder_forward, sgd_step, sgd_update_block, EncoderModel, Mat, ParamGrads,
    SgdOptimizer,
};
use crate::error::{CdsError, Result};
use crate::math;
use crate::numerics::{entropy, softmax_temp, Distribution, FeatureVector, ScoreVector};

/// What the adaptation objective applies to the unlabeled target split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaMode {
    /// Supervised cross entropy on labeled source only.
    SourceOnly,
    /// Source cross entropy plus weighted prediction-entropy minimization on
    /// the target.
    TargetEntmin,
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Weight of the unlabeled-source entropy term.
    pub lambda: f64,
    pub da_mode: DaMode,
    /// Weight of the target entropy term under [`DaMode::TargetEntmin`].
    pub target_entropy_weight: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            da_mode: DaMode::TargetEntmin,
            target_entropy_weight: 0.1,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 100,
            batch: 32,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(CdsError::InvalidConfig(String::from(
                "lambda must be non-negative",
            )));
        }
        if self.target_entropy_weight < 0.0 {
            return Err(CdsError::InvalidConfig(String::from(
                "target entropy weight must be non-negative",
            )));
        }
        if self.lr <= 0.0 {
            return Err(CdsError::InvalidConfig(String::from(
                "learning rate must be positive",
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CdsError::InvalidConfig(String::from(
                "momentum must be in [0, 1)",
            )));
        }
        if self.batch == 0 {
            return Err(CdsError::InvalidConfig(String::from(
                "batch size must be positive",
            )));
        }
        Ok(())
    }
}

/// The linear classifier C(·) on normalized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    /// Fan-based uniform init from the adapt seed.
    pub fn init(num_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = math::sqrt(6.0 / (num_classes + dim) as f64);
        let mut weight = Mat::zeros(num_classes, dim);
        for w in weight.data.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        Self {
            weight,
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows
    }
}

/// softmax(W f + b) at temperature 1.
pub fn classifier_forward(head: &ClassifierHead, f: &FeatureVector) -> Result<Distribution> {
    if f.dim() != head.weight.cols {
        return Err(CdsError::DimensionMismatch {
            expected: head.weight.cols,
            got: f.dim(),
        });
    }
    let logits = head.weight.affine(f.as_slice(), &head.bias);
    softmax_temp(&ScoreVector::new(logits)?, 1.0)
}

/// Gradients for the head, shaped like it.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl HeadGrads {
    fn zeros_like(head: &ClassifierHead) -> Self {
        Self {
            weight: Mat::zeros(head.weight.rows, head.weight.cols),
            bias: vec![0.0; head.bias.len()],
        }
    }
}

/// Everything adapt_loss produces: component values and gradients for the
/// head and (unless frozen) the encoder.
#[derive(Debug, Clone)]
pub struct AdaptLossReport {
    pub total: f64,
    /// Source cross entropy plus any weighted target entropy.
    pub da: f64,
    /// Mean prediction entropy on the unlabeled source batch (unweighted).
    pub su: f64,
    pub head_grads: HeadGrads,
    pub encoder_grads: Option<ParamGrads>,
}

/// d(−log q_y)/d logits = q − onehot(y)
fn ce_logit_grad(q: &Distribution, y: usize) -> Vec<f64> {
    q.probs()
        .iter()
        .enumerate()
        .map(|(c, &p)| p - if c == y { 1.0 } else { 0.0 })
        .collect()
}

/// dH(q)/d logits_c = −q_c (log q_c + H)
fn entropy_logit_grad(q: &Distribution) -> Vec<f64> {
    let h = entropy(q);
    q.probs()
        .iter()
        .map(|&p| if p > 0.0 { -p * (math::ln(p) + h) } else { 0.0 })
        .collect()
}

struct BatchAccumulator<'a> {
    model: &'a EncoderModel,
    head: &'a ClassifierHead,
    freeze_encoder: bool,
    head_grads: HeadGrads,
    encoder_grads: Option<ParamGrads>,
}

impl<'a> BatchAccumulator<'a> {
    fn new(model: &'a EncoderModel, head: &'a ClassifierHead, freeze_encoder: bool) -> Self {
        Self {
            model,
            head,
            freeze_encoder,
            head_grads: HeadGrads::zeros_like(head),
            encoder_grads: (!freeze_encoder).then(|| ParamGrads::zeros_like(model)),
        }
    }

    /// Adds `scale` times the given logit-space gradient for input `x`.
    fn add(&mut self, x: &[f64], logit_grad: &[f64], scale: f64) -> Result<()> {
        let (f, cache) = encoder_forward(self.model, x)?;
        let dim = f.dim();
        for (c, &g) in logit_grad.iter().enumerate() {
            let g = g * scale;
            self.head_grads.bias[c] += g;
            let row = &mut self.head_grads.weight.data[c * dim..(c + 1) * dim];
            for (w, &fi) in row.iter_mut().zip(f.as_slice()) {
                *w += g * fi;
            }
        }
        if !self.freeze_encoder {
            // df = Wᵀ (scaled logit grad)
            let scaled: Vec<f64> = logit_grad.iter().map(|g| g * scale).collect();
            let df = self.head.weight.transpose_vec(&scaled);
            let (g, _) = encoder_backward(self.model, &cache, &df)?;
            self.encoder_grads.as_mut().unwrap().accumulate(&g);
        }
        Ok(())
    }
}

/// One evaluation of the stage-2 objective on explicit batches:
/// total = mean CE(labeled) [+ w·mean H(target)] + λ·mean H(unlabeled source).
/// Empty unlabeled batches contribute zero.
pub fn adapt_loss(
    model: &EncoderModel,
    head: &ClassifierHead,
    labeled: &[(&[f64], usize)],
    unlabeled_source: &[&[f64]],
    unlabeled_target: &[&[f64]],
    cfg: &AdaptConfig,
) -> Result<AdaptLossReport> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(CdsError::EmptyBatch("labeled source"));
    }
    let mut acc = BatchAccumulator::new(model, head, cfg.freeze_encoder);

    let mut ce_sum = 0.0;
    let inv_l = 1.0 / labeled.len() as f64;
    for &(x, y) in labeled {
        if y >= head.num_classes() {
            return Err(CdsError::IndexOutOfRange {
                index: y,
                len: head.num_classes(),
            });
        }
        let (f, _) = encoder_forward(model, x)?;
        let q = classifier_forward(head, &f)?;
        ce_sum += crate::numerics::cross_entropy_at(&q, y)?;
        acc.add(x, &ce_logit_grad(&q, y), inv_l)?;
    }
    let ce = ce_sum * inv_l;

    let mut h_target = 0.0;
    if cfg.da_mode == DaMode::TargetEntmin && !unlabeled_target.is_empty() {
        let inv_t = 1.0 / unlabeled_target.len() as f64;
        for &x in unlabeled_target {
            let (f, _) = encoder_forward(model, x)?;
            let q = classifier_forward(head, &f)?;
            h_target += entropy(&q) * inv_t;
            acc.add(x, &entropy_logit_grad(&q), cfg.target_entropy_weight * inv_t)?;
        }
    }

    let mut h_su = 0.0;
    if !unlabeled_source.is_empty() {
        let inv_s = 1.0 / unlabeled_source.len() as f64;
        for &x in unlabeled_source {
            let (f, _) = encoder_forward(model, x)?;
            let q = classifier_forward(head, &f)?;
            h_su += entropy(&q) * inv_s;
            acc.add(x, &entropy_logit_grad(&q), cfg.lambda * inv_s)?;
        }
    }

    let da = match cfg.da_mode {
        DaMode::SourceOnly => ce,
        DaMode::TargetEntmin => ce + cfg.target_entropy_weight * h_target,
    };
    Ok(AdaptLossReport {
        total: da + cfg.lambda * h_su,
        da,
        su: h_su,
        head_grads: acc.head_grads,
        encoder_grads: acc.encoder_grads,
    })
}

/// Per-epoch record of stage 2. Accuracy columns come from the sealed ground
/// truth and are evaluation-only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptEpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_da: f64,
    pub loss_su: f64,
    pub src_unlabeled_acc: f64,
    pub target_acc: f64,
    pub val_acc: f64,
}

/// Stage-2 output: the (possibly fine-tuned) encoder, the trained head, the
/// epoch log, and the early-stopping summary.
#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub model: EncoderModel,
    pub head: ClassifierHead,
    pub logs: Vec<AdaptEpochLog>,
    pub best_epoch: usize,
    pub best_target_acc: f64,
}

/// Classifier accuracy over raw inputs against explicit labels (skips
/// samples without ground truth).
fn classify_accuracy(
    model: &EncoderModel,
    head: &ClassifierHead,
    inputs: &[&[f64]],
    labels: &[Option<usize>],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (&x, l) in inputs.iter().zip(labels) {
        let Some(y) = l else { continue };
        let (f, _) = encoder_forward(model, x)?;
        let q = classifier_forward(head, &f)?;
        let probs = q.probs();
        let mut best = 0;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = c;
            }
        }
        if best == *y {
            hits += 1;
        }
        total += 1;
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

/// How many labeled samples per class the validation holdout takes.
const VALIDATION_SHOTS: usize = 3;

/// Splits labeled-source positions into (train, validation). Classes need
/// more than `VALIDATION_SHOTS` labeled samples to afford a holdout; when any
/// class is too small the validation set falls back to the training set
/// itself (the recorded 1-shot limitation).
fn validation_holdout(
    split: &DatasetSplit,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let labeled = split.labeled_source();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); split.num_classes()];
    for (pos, s) in labeled.iter().enumerate() {
        by_class[s.label.unwrap()].push(pos);
    }
    if by_class.iter().any(|m| m.len() <= VALIDATION_SHOTS) {
        let all: Vec<usize> = (0..labeled.len()).collect();
        return (all.clone(), all);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for members in &by_class {
        let picks = rand::seq::index::sample(rng, members.len(), VALIDATION_SHOTS);
        let mut is_val = vec![false; members.len()];
        for p in picks.iter() {
            is_val[p] = true;
        }
        for (flag, &pos) in is_val.iter().zip(members) {
            if *flag {
                val.push(pos);
            } else {
                train.push(pos);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Stage-2 epoch loop mirroring pretraining's batching: independent seeded
/// shuffles per split, full-size batches with cyclic wrap-around, one
/// combined optimizer step per batch. Early stopping follows the best
/// validation accuracy; the reported target accuracy is taken at that epoch.
pub fn run_adapt(
    model: EncoderModel,
    split: &DatasetSplit,
    cfg: &AdaptConfig,
) -> Result<AdaptOutput> {
    cfg.validate()?;
    let mut model = model;
    let num_classes = split.num_classes();
    if num_classes < 2 {
        return Err(CdsError::InvalidConfig(String::from(
            "adaptation needs at least two classes",
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(5);
    let mut head = ClassifierHead::init(num_classes, model.output_dim(), &mut init_rng);

    let mut holdout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    holdout_rng.set_stream(6);
    let (train_pos, val_pos) = validation_holdout(split, &mut holdout_rng);

    let labeled_all = split.labeled_source();
    let train_set: Vec<(&[f64], usize)> = train_pos
        .iter()
        .map(|&p| (labeled_all[p].x.as_slice(), labeled_all[p].label.unwrap()))
        .collect();
    let val_inputs: Vec<&[f64]> = val_pos.iter().map(|&p| labeled_all[p].x.as_slice()).collect();
    let val_labels: Vec<Option<usize>> = val_pos
        .iter()
        .map(|&p| labeled_all[p].label)
        .collect();

    let su_inputs: Vec<&[f64]> = split
        .unlabeled_source()
        .iter()
        .map(|s| s.x.as_slice())
        .collect();
    let tu_inputs: Vec<&[f64]> = split
        .unlabeled_target()
        .iter()
        .map(|s| s.x.as_slice())
        .collect();

    // Evaluation-only label views from the sealed channel.
    let gt = split.eval_ground_truth();
    let su_labels: Vec<Option<usize>> = split
        .unlabeled_source()
        .iter()
        .map(|s| gt.source_labels.get(s.index).copied().flatten())
        .collect();
    let tu_labels: Vec<Option<usize>> = split
        .unlabeled_target()
        .iter()
        .map(|s| gt.target_labels.get(s.index).copied().flatten())
        .collect();

    let mut opt = SgdOptimizer::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut head_vel = HeadGrads::zeros_like(&head);

    let n_l = train_set.len();
    let n_su = su_inputs.len();
    let n_tu = tu_inputs.len();
    let b_l = cfg.batch.min(n_l);
    let b_su = cfg.batch.min(n_su);
    let b_tu = cfg.batch.min(n_tu);

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_target = 0.0f64;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(48 + epoch as u64);
        let mut l_order: Vec<usize> = (0..n_l).collect();
        l_order.shuffle(&mut rng);
        let mut su_order: Vec<usize> = (0..n_su).collect();
        su_order.shuffle(&mut rng);
        let mut tu_order: Vec<usize> = (0..n_tu).collect();
        tu_order.shuffle(&mut rng);

        let mut steps = n_l.div_ceil(b_l);
        if n_su > 0 {
            steps = steps.max(n_su.div_ceil(b_su));
        }
        if n_tu > 0 {
            steps = steps.max(n_tu.div_ceil(b_tu));
        }

        let mut sum_total = 0.0;
        let mut sum_da = 0.0;
        let mut sum_su = 0.0;
        for step in 0..steps {
            let labeled_batch: Vec<(&[f64], usize)> = (0..b_l)
                .map(|t| train_set[l_order[(step * b_l + t) % n_l]])
                .collect();
            let su_batch: Vec<&[f64]> = (0..b_su)
                .map(|t| su_inputs[su_order[(step * b_su + t) % n_su]])
                .collect();
            let tu_batch: Vec<&[f64]> = (0..b_tu)
                .map(|t| tu_inputs[tu_order[(step * b_tu + t) % n_tu]])
                .collect();

            let report = adapt_loss(&model, &head, &labeled_batch, &su_batch, &tu_batch, cfg)?;
            sum_total += report.total;
            sum_da += report.da;
            sum_su += report.su;

            sgd_update_block(
                &mut head.weight,
                &mut head.bias,
                &mut head_vel.weight,
                &mut head_vel.bias,
                &report.head_grads.weight,
                &report.head_grads.bias,
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            if let Some(ref g) = report.encoder_grads {
                sgd_step(&mut model, &mut opt, g)?;
            }
        }

        let inv = 1.0 / steps as f64;
        let src_unlabeled_acc = classify_accuracy(&model, &head, &su_inputs, &su_labels)?;
        let target_acc = classify_accuracy(&model, &head, &tu_inputs, &tu_labels)?;
        let val_acc = classify_accuracy(&model, &head, &val_inputs, &val_labels)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_target = target_acc;
        }
        logs.push(AdaptEpochLog {
            epoch,
            loss_total: sum_total * inv,
            loss_da: sum_da * inv,
            loss_su: sum_su * inv,
            src_unlabeled_acc,
            target_acc,
            val_acc,
        });
    }

    if cfg.epochs == 0 {
        // No training happened; report the initial head's target accuracy.
        best_target = classify_accuracy(&model, &head, &tu_inputs, &tu_labels)?;
    }

    Ok(AdaptOutput {
        model,
        head,
        logs,
        best_epoch,
        best_target_acc: best_target,
    })
}
