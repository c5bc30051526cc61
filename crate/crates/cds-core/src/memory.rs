//! Per-domain memory banks: one cached unit-norm feature row per sample,
//! initialized from a full forward pass and refreshed with momentum after
//! each batch.

use alloc::vec::Vec;

use crate::data::DatasetSplit;
use crate::encoder::{encoder_forward, EncoderModel};
use crate::error::{CdsError, Result};
use crate::numerics::{dot, l2_norm, l2_normalize, FeatureVector, ScoreVector};

/// Which sample population a bank caches. `Union` is used only by the
/// instance-discrimination baseline that ignores the domain split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankTag {
    Source,
    Target,
    Union,
}

impl BankTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BankTag::Source => "source",
            BankTag::Target => "target",
            BankTag::Union => "union",
        }
    }
}

/// N×d matrix of cached features; row index is the sample identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    tag: BankTag,
    dim: usize,
    rows: Vec<f64>,
}

impl MemoryBank {
    pub fn from_features(tag: BankTag, features: Vec<FeatureVector>) -> Result<Self> {
        if features.is_empty() {
            return Err(CdsError::EmptyDomain(tag.as_str()));
        }
        let dim = features[0].dim();
        let mut rows = Vec::with_capacity(features.len() * dim);
        for f in &features {
            if f.dim() != dim {
                return Err(CdsError::DimensionMismatch {
                    expected: dim,
                    got: f.dim(),
                });
            }
            rows.extend_from_slice(f.as_slice());
        }
        Ok(Self { tag, dim, rows })
    }

    /// Rebuilds a bank from raw rows, verifying each is unit-norm within 1e-9.
    /// Used when loading a persisted snapshot.
    pub fn from_raw_rows(tag: BankTag, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.is_empty() || rows.len() % dim != 0 {
            return Err(CdsError::InvalidConfig(alloc::format!(
                "bank data of length {} is not a multiple of dim {dim}",
                rows.len()
            )));
        }
        for r in rows.chunks(dim) {
            let norm = l2_norm(r);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(CdsError::NormTooSmall { norm });
            }
        }
        Ok(Self { tag, dim, rows })
    }

    pub fn tag(&self) -> BankTag {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index * self.dim..(index + 1) * self.dim]
    }
}

/// Fills both banks with a forward pass over every sample, row i holding the
/// feature of sample i in dataset order.
pub fn init_banks(model: &EncoderModel, split: &DatasetSplit) -> Result<(MemoryBank, MemoryBank)> {
    if split.n_source() == 0 {
        return Err(CdsError::EmptyDomain("source"));
    }
    if split.n_target() == 0 {
        return Err(CdsError::EmptyDomain("target"));
    }
    let mut src = Vec::with_capacity(split.n_source());
    for i in 0..split.n_source() {
        let (f, _) = encoder_forward(model, split.source_input(i))?;
        src.push(f);
    }
    let mut tgt = Vec::with_capacity(split.n_target());
    for j in 0..split.n_target() {
        let (f, _) = encoder_forward(model, split.target_input(j))?;
        tgt.push(f);
    }
    Ok((
        MemoryBank::from_features(BankTag::Source, src)?,
        MemoryBank::from_features(BankTag::Target, tgt)?,
    ))
}

/// Single bank over all source samples followed by all target samples, for
/// the domain-agnostic instance-discrimination baseline. The union index of
/// target sample j is `n_source + j`.
pub fn init_union_bank(model: &EncoderModel, split: &DatasetSplit) -> Result<MemoryBank> {
    if split.n_source() == 0 {
        return Err(CdsError::EmptyDomain("source"));
    }
    if split.n_target() == 0 {
        return Err(CdsError::EmptyDomain("target"));
    }
    let mut all = Vec::with_capacity(split.n_source() + split.n_target());
    for i in 0..split.n_source() {
        let (f, _) = encoder_forward(model, split.source_input(i))?;
        all.push(f);
    }
    for j in 0..split.n_target() {
        let (f, _) = encoder_forward(model, split.target_input(j))?;
        all.push(f);
    }
    MemoryBank::from_features(BankTag::Union, all)
}

/// Cosine similarities of `f` against every bank row.
pub fn bank_similarities(bank: &MemoryBank, f: &FeatureVector) -> Result<ScoreVector> {
    if f.dim() != bank.dim {
        return Err(CdsError::DimensionMismatch {
            expected: bank.dim,
            got: f.dim(),
        });
    }
    let scores: Vec<f64> = (0..bank.len())
        .map(|k| dot(bank.row(k), f.as_slice()))
        .collect();
    ScoreVector::new(scores)
}

/// Momentum refresh of one row: row ← (1−η)·row + η·f, renormalized when
/// `renormalize` is set so the row stays a valid cosine reference. The
/// endpoints bypass the blend so that η = 0 is a bitwise no-op and η = 1 is a
/// bitwise replacement.
pub fn bank_update(
    bank: &mut MemoryBank,
    index: usize,
    f: &FeatureVector,
    eta: f64,
    renormalize: bool,
) -> Result<()> {
    if index >= bank.len() {
        return Err(CdsError::IndexOutOfRange {
            index,
            len: bank.len(),
        });
    }
    if f.dim() != bank.dim {
        return Err(CdsError::DimensionMismatch {
            expected: bank.dim,
            got: f.dim(),
        });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(CdsError::InvalidConfig(alloc::format!(
            "bank momentum must be in [0, 1], got {eta}"
        )));
    }
    if eta == 0.0 {
        return Ok(());
    }
    let dim = bank.dim;
    let row = &mut bank.rows[index * dim..(index + 1) * dim];
    if eta == 1.0 {
        row.copy_from_slice(f.as_slice());
        return Ok(());
    }
    let blended: Vec<f64> = row
        .iter()
        .zip(f.as_slice())
        .map(|(&v, &fi)| (1.0 - eta) * v + eta * fi)
        .collect();
    if renormalize {
        let normalized = l2_normalize(&blended)?;
        row.copy_from_slice(normalized.as_slice());
    } else {
        row.copy_from_slice(&blended);
    }
    Ok(())
}
