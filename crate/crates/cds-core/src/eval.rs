//! Feature-quality measurement on frozen features: weighted kNN transfer
//! accuracy, a linear probe, cross-domain retrieval precision, and a
//! domain-confusion score. Everything here is read-only and deterministic,
//! with ties broken by lowest class id and lowest sample index.
//!
//! This is the only module allowed to consume the sealed ground-truth labels.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encoder_forward, EncoderModel, Mat};
use crate::error::{CdsError, Result};
use crate::math;
use crate::numerics::{dot, FeatureVector};

/// Defaults reuse the pretraining temperature; the protocol's own constants
/// are not restated in the published setting.
pub const DEFAULT_KNN_K: usize = 20;
pub const DEFAULT_KNN_TAU: f64 = 0.05;

/// Full-batch gradient-descent settings for the linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop when the loss improves by less than this between iterations.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            max_iters: 5000,
            tol: 1e-7,
        }
    }
}

/// The aggregate feature-quality report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub knn_accuracy: f64,
    pub linear_accuracy: f64,
    pub retrieval_precision_at_k: f64,
    pub confusion_loss: f64,
    pub k: usize,
    pub retrieval_k: usize,
    pub tau_knn: f64,
    pub seed: u64,
}

/// Top-k neighbor selection by similarity, ties to the lower index. Keeps a
/// small insertion-sorted buffer rather than sorting the full score list.
fn top_k_neighbors(sims: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(sims.len());
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &s) in sims.iter().enumerate() {
        let pos = best.partition_point(|&j| {
            sims[j] > s || (sims[j] == s && j < i)
        });
        if pos < k {
            best.insert(pos, i);
            best.truncate(k);
        }
    }
    best
}

/// Weighted k-nearest-neighbor classification: class score is the sum of
/// exp(similarity/τ) over the k closest reference features of that class.
pub fn weighted_knn(
    ref_feats: &[FeatureVector],
    ref_labels: &[usize],
    queries: &[FeatureVector],
    k: usize,
    tau_knn: f64,
) -> Result<Vec<usize>> {
    if ref_feats.is_empty() {
        return Err(CdsError::EmptyReference("knn reference"));
    }
    if ref_feats.len() != ref_labels.len() {
        return Err(CdsError::DimensionMismatch {
            expected: ref_feats.len(),
            got: ref_labels.len(),
        });
    }
    if k == 0 {
        return Err(CdsError::InvalidConfig(alloc::string::String::from(
            "k must be at least 1",
        )));
    }
    if tau_knn <= 0.0 {
        return Err(CdsError::InvalidTemperature { tau: tau_knn });
    }
    let num_classes = ref_labels.iter().max().unwrap() + 1;
    let mut predictions = Vec::with_capacity(queries.len());
    for q in queries {
        let sims: Vec<f64> = ref_feats
            .iter()
            .map(|r| dot(r.as_slice(), q.as_slice()))
            .collect();
        let mut class_scores = vec![0.0f64; num_classes];
        for n in top_k_neighbors(&sims, k) {
            class_scores[ref_labels[n]] += math::exp(sims[n] / tau_knn);
        }
        // Argmax with ties to the lowest class id.
        let mut best = 0;
        for (c, &s) in class_scores.iter().enumerate() {
            if s > class_scores[best] {
                best = c;
            }
        }
        predictions.push(best);
    }
    Ok(predictions)
}

/// Fraction of predictions equal to the reference labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / predictions.len() as f64
}

/// A trained softmax linear classifier on frozen features.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, f: &FeatureVector) -> usize {
        let logits = self.weight.affine(f.as_slice(), &self.bias);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }

    /// Mean cross entropy of the true labels under the softmax predictions.
    pub fn mean_ce(&self, feats: &[FeatureVector], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (f, &y) in feats.iter().zip(labels) {
            let logits = self.weight.affine(f.as_slice(), &self.bias);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max
                + math::ln(logits.iter().map(|&l| math::exp(l - max)).sum::<f64>());
            total += log_z - logits[y];
        }
        total / feats.len() as f64
    }
}

/// Full-batch gradient descent on the softmax cross entropy from a zero init
/// (the objective is convex, so the start point is immaterial). Runs until
/// the loss improves by less than `tol` or `max_iters` is reached.
pub fn train_linear(
    feats: &[FeatureVector],
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearModel> {
    if feats.is_empty() {
        return Err(CdsError::EmptyReference("probe training set"));
    }
    if feats.len() != labels.len() {
        return Err(CdsError::DimensionMismatch {
            expected: feats.len(),
            got: labels.len(),
        });
    }
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(CdsError::InvalidConfig(alloc::string::String::from(
            "label outside the class range",
        )));
    }
    let dim = feats[0].dim();
    let n = feats.len() as f64;
    let mut model = LinearModel {
        weight: Mat::zeros(num_classes, dim),
        bias: vec![0.0; num_classes],
    };
    let mut prev_loss = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let mut grad_w = Mat::zeros(num_classes, dim);
        let mut grad_b = vec![0.0; num_classes];
        let mut loss = 0.0;
        for (f, &y) in feats.iter().zip(labels) {
            let logits = model.weight.affine(f.as_slice(), &model.bias);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
            let z: f64 = exps.iter().sum();
            loss += (math::ln(z) + max) - logits[y];
            for c in 0..num_classes {
                let p = exps[c] / z;
                let coeff = (p - if c == y { 1.0 } else { 0.0 }) / n;
                grad_b[c] += coeff;
                let row = &mut grad_w.data[c * dim..(c + 1) * dim];
                for (g, &x) in row.iter_mut().zip(f.as_slice()) {
                    *g += coeff * x;
                }
            }
        }
        loss /= n;
        for (w, g) in model.weight.data.iter_mut().zip(&grad_w.data) {
            *w -= cfg.lr * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&grad_b) {
            *b -= cfg.lr * g;
        }
        if (prev_loss - loss).abs() < cfg.tol {
            break;
        }
        prev_loss = loss;
    }
    Ok(model)
}

/// Accuracy of a linear classifier trained on reference features and labels,
/// evaluated on the queries.
pub fn linear_probe(
    ref_feats: &[FeatureVector],
    ref_labels: &[usize],
    queries: &[FeatureVector],
    query_labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(CdsError::EmptyReference("probe query set"));
    }
    let model = train_linear(ref_feats, ref_labels, num_classes, cfg)?;
    let preds: Vec<usize> = queries.iter().map(|q| model.predict(q)).collect();
    Ok(accuracy(&preds, query_labels))
}

/// Mean over queries and ranks of [top-k cross-domain neighbor has the
/// query's class].
pub fn retrieval_precision(
    ref_feats: &[FeatureVector],
    ref_labels: &[usize],
    queries: &[FeatureVector],
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if ref_feats.is_empty() {
        return Err(CdsError::EmptyReference("retrieval reference"));
    }
    if queries.is_empty() {
        return Err(CdsError::EmptyReference("retrieval query set"));
    }
    let dump = retrieval_dump(ref_feats, ref_labels, queries, query_labels, k)?;
    let matches = dump.iter().filter(|r| r.matches).count();
    Ok(matches as f64 / dump.len() as f64)
}

/// One retrieved neighbor for one query, for inspection dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRow {
    pub query_index: usize,
    pub rank: usize,
    pub neighbor_index: usize,
    pub similarity: f64,
    pub matches: bool,
}

/// The per-query neighbor table behind [`retrieval_precision`].
pub fn retrieval_dump(
    ref_feats: &[FeatureVector],
    ref_labels: &[usize],
    queries: &[FeatureVector],
    query_labels: &[usize],
    k: usize,
) -> Result<Vec<RetrievalRow>> {
    if ref_feats.len() != ref_labels.len() {
        return Err(CdsError::DimensionMismatch {
            expected: ref_feats.len(),
            got: ref_labels.len(),
        });
    }
    if queries.len() != query_labels.len() {
        return Err(CdsError::DimensionMismatch {
            expected: queries.len(),
            got: query_labels.len(),
        });
    }
    let mut rows = Vec::with_capacity(queries.len() * k.min(ref_feats.len()));
    for (qi, (q, &ql)) in queries.iter().zip(query_labels).enumerate() {
        let sims: Vec<f64> = ref_feats
            .iter()
            .map(|r| dot(r.as_slice(), q.as_slice()))
            .collect();
        for (rank, n) in top_k_neighbors(&sims, k).into_iter().enumerate() {
            rows.push(RetrievalRow {
                query_index: qi,
                rank,
                neighbor_index: n,
                similarity: sims[n],
                matches: ref_labels[n] == ql,
            });
        }
    }
    Ok(rows)
}

/// Held-out binary cross entropy of a linear source-vs-target domain
/// classifier on frozen features. Higher means more domain-aligned features;
/// the ceiling is ln 2, enforced by clamping at the uniform-predictor
/// baseline (a trained classifier that loses to "always predict 1/2" on the
/// held-out split reports exactly ln 2).
pub fn confusion_loss(
    source_feats: &[FeatureVector],
    target_feats: &[FeatureVector],
    probe: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if source_feats.is_empty() || target_feats.is_empty() {
        return Err(CdsError::EmptyReference("confusion feature set"));
    }
    let mut feats: Vec<FeatureVector> = Vec::with_capacity(source_feats.len() + target_feats.len());
    let mut labels = Vec::with_capacity(feats.capacity());
    feats.extend_from_slice(source_feats);
    labels.extend(core::iter::repeat_n(0usize, source_feats.len()));
    feats.extend_from_slice(target_feats);
    labels.extend(core::iter::repeat_n(1usize, target_feats.len()));

    // Seeded 80/20 split with at least one held-out sample.
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    order.shuffle(&mut rng);
    let held = (feats.len() / 5).max(1);
    let (held_idx, train_idx) = order.split_at(held);
    let train_feats: Vec<FeatureVector> = train_idx.iter().map(|&i| feats[i].clone()).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let held_feats: Vec<FeatureVector> = held_idx.iter().map(|&i| feats[i].clone()).collect();
    let held_labels: Vec<usize> = held_idx.iter().map(|&i| labels[i]).collect();
    if train_labels.iter().all(|&l| l == 0) || train_labels.iter().all(|&l| l == 1) {
        return Err(CdsError::InvalidConfig(alloc::string::String::from(
            "degenerate domain split: one domain missing from training fold",
        )));
    }

    let model = train_linear(&train_feats, &train_labels, 2, probe)?;
    let ce = model.mean_ce(&held_feats, &held_labels);
    Ok(ce.min(core::f64::consts::LN_2))
}

/// Encodes a set of raw inputs with a frozen model.
pub fn extract_features<'a, I>(model: &EncoderModel, inputs: I) -> Result<Vec<FeatureVector>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    inputs
        .into_iter()
        .map(|x| encoder_forward(model, x).map(|(f, _)| f))
        .collect()
}
