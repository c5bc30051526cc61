//! The two self-supervised objectives and their sum, each returning value and
//! analytic gradient with respect to the batch features. Bank rows are cached
//! constants: gradients never flow into them.
//!
//! For a batch feature f with identity i and similarity distribution
//! p = softmax(V·f/τ) over its own domain's bank V:
//!
//!   in-domain term   −log p_i         grad (Σ_k p_k v_k − v_i) / (τ·B)
//!   cross-domain term H(q)            grad Σ_k −q_k(log q_k + H)·w_k / (τ·B)
//!
//! with q the distribution over the opposite bank W and B the combined batch
//! size |B^s| + |B^t|.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Domain;
use crate::error::{CdsError, Result};
use crate::math;
use crate::memory::{bank_similarities, MemoryBank};
use crate::numerics::{cross_entropy_at, entropy, softmax_temp, FeatureVector};

/// One batch member: a fresh feature with its bank identity and domain.
#[derive(Debug, Clone)]
pub struct BatchFeature {
    pub feature: FeatureVector,
    pub index: usize,
    pub domain: Domain,
}

/// Loss value with per-feature gradients and per-sample diagnostic terms
/// (cross entropies or entropies, in batch order).
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    pub per_sample: Vec<f64>,
}

impl LossReport {
    fn zeros(batch: &[BatchFeature]) -> Self {
        Self {
            value: 0.0,
            grads: batch.iter().map(|b| vec![0.0; b.feature.dim()]).collect(),
            per_sample: vec![0.0; batch.len()],
        }
    }

    /// Elementwise sum of two reports over the same batch.
    pub fn combine(mut self, other: &LossReport) -> Self {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        self.value += other.value;
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in g.iter_mut().zip(o) {
                *a += b;
            }
        }
        for (a, b) in self.per_sample.iter_mut().zip(&other.per_sample) {
            *a += b;
        }
        self
    }
}

fn own_bank<'a>(
    domain: Domain,
    source_bank: &'a MemoryBank,
    target_bank: &'a MemoryBank,
) -> &'a MemoryBank {
    match domain {
        Domain::Source => source_bank,
        Domain::Target => target_bank,
    }
}

fn opposite_bank<'a>(
    domain: Domain,
    source_bank: &'a MemoryBank,
    target_bank: &'a MemoryBank,
) -> &'a MemoryBank {
    match domain {
        Domain::Source => target_bank,
        Domain::Target => source_bank,
    }
}

/// In-domain instance discrimination: each feature is classified as its own
/// identity against its domain's bank, averaged over the combined batch.
pub fn in_domain_loss(
    batch: &[BatchFeature],
    source_bank: &MemoryBank,
    target_bank: &MemoryBank,
    tau: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(CdsError::EmptyBatch("in-domain"));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let mut report = LossReport::zeros(batch);
    for (b, item) in batch.iter().enumerate() {
        let bank = own_bank(item.domain, source_bank, target_bank);
        if item.index >= bank.len() {
            return Err(CdsError::IndexOutOfRange {
                index: item.index,
                len: bank.len(),
            });
        }
        let scores = bank_similarities(bank, &item.feature)?;
        let p = softmax_temp(&scores, tau)?;
        let term = cross_entropy_at(&p, item.index)?;
        report.per_sample[b] = term;
        report.value += term * inv_batch;

        // (Σ_k p_k v_k − v_i) / (τ·B)
        let grad = &mut report.grads[b];
        for (k, &pk) in p.probs().iter().enumerate() {
            let row = bank.row(k);
            for (g, &v) in grad.iter_mut().zip(row) {
                *g += pk * v;
            }
        }
        let own_row = bank.row(item.index);
        let scale = inv_batch / tau;
        for (g, &v) in grad.iter_mut().zip(own_row) {
            *g = (*g - v) * scale;
        }
    }
    Ok(report)
}

/// Across-domain matching: the entropy of each feature's similarity
/// distribution over the opposite domain's bank, averaged over the batch.
pub fn cross_domain_loss(
    batch: &[BatchFeature],
    source_bank: &MemoryBank,
    target_bank: &MemoryBank,
    tau: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(CdsError::EmptyBatch("cross-domain"));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let mut report = LossReport::zeros(batch);
    for (b, item) in batch.iter().enumerate() {
        let bank = opposite_bank(item.domain, source_bank, target_bank);
        if bank.is_empty() {
            return Err(CdsError::EmptyDomain(bank.tag().as_str()));
        }
        let scores = bank_similarities(bank, &item.feature)?;
        let q = softmax_temp(&scores, tau)?;
        let h = entropy(&q);
        report.per_sample[b] = h;
        report.value += h * inv_batch;

        // Σ_k −q_k(log q_k + H)·w_k / (τ·B); zero-probability entries
        // contribute nothing (0·log 0 = 0 limit).
        let grad = &mut report.grads[b];
        let scale = inv_batch / tau;
        for (k, &qk) in q.probs().iter().enumerate() {
            if qk == 0.0 {
                continue;
            }
            let coeff = -qk * (math::ln(qk) + h) * scale;
            let row = bank.row(k);
            for (g, &w) in grad.iter_mut().zip(row) {
                *g += coeff * w;
            }
        }
    }
    Ok(report)
}

/// The combined objective: elementwise sum of the in-domain and cross-domain
/// reports over one batch.
pub fn cds_loss(
    batch: &[BatchFeature],
    source_bank: &MemoryBank,
    target_bank: &MemoryBank,
    tau: f64,
) -> Result<LossReport> {
    let wins = in_domain_loss(batch, source_bank, target_bank, tau)?;
    let cdm = cross_domain_loss(batch, source_bank, target_bank, tau)?;
    Ok(wins.combine(&cdm))
}

/// Instance discrimination over a single bank spanning both domains, ignoring
/// the domain split. Baseline only; batch indices must be union indices
/// (target sample j at `n_source + j`).
pub fn union_id_loss(
    batch: &[BatchFeature],
    union_bank: &MemoryBank,
    tau: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(CdsError::EmptyBatch("union-id"));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let mut report = LossReport::zeros(batch);
    for (b, item) in batch.iter().enumerate() {
        if item.index >= union_bank.len() {
            return Err(CdsError::IndexOutOfRange {
                index: item.index,
                len: union_bank.len(),
            });
        }
        let scores = bank_similarities(union_bank, &item.feature)?;
        let p = softmax_temp(&scores, tau)?;
        let term = cross_entropy_at(&p, item.index)?;
        report.per_sample[b] = term;
        report.value += term * inv_batch;
        let grad = &mut report.grads[b];
        for (k, &pk) in p.probs().iter().enumerate() {
            let row = union_bank.row(k);
            for (g, &v) in grad.iter_mut().zip(row) {
                *g += pk * v;
            }
        }
        let own_row = union_bank.row(item.index);
        let scale = inv_batch / tau;
        for (g, &v) in grad.iter_mut().zip(own_row) {
            *g = (*g - v) * scale;
        }
    }
    Ok(report)
}
