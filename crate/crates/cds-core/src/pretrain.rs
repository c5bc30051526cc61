//! Stage-1 training: initialize banks, walk paired source/target batches,
//! step the encoder on the combined objective, refresh the banks, and log
//! per-epoch diagnostics. No label is readable anywhere in this module.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplit, Domain};
use crate::encoder::{
    encoder_backward, encoder_forward, sgd_step, EncoderModel, ForwardCache, ParamGrads,
    SgdOptimizer,
};
use crate::error::{CdsError, Result};
use crate::losses::{in_domain_loss, union_id_loss, BatchFeature, LossReport};
use crate::memory::{bank_update, init_banks, init_union_bank, BankTag, MemoryBank};

/// Which self-supervised objective drives the epoch loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// In-domain instance discrimination plus across-domain matching.
    FullCds,
    /// In-domain instance discrimination alone.
    InDomainOnly,
    /// Instance discrimination over the union of both domains with one
    /// shared bank (no domain split); ablation baseline.
    UnionId,
}

/// Stage-1 hyperparameters. Defaults follow the published setting: τ = 0.05,
/// η = 0.5, SGD momentum 0.9 at learning rate 0.003 with weight decay 5e-4,
/// batches of 32 per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub eta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Feature dimension d. 16 suits low-dimensional synthetic clusters;
    /// 512 matches the published large-scale setting.
    pub feature_dim: usize,
    /// Hidden layer widths of the MLP encoder.
    pub hidden: Vec<usize>,
    pub objective: Objective,
    /// Renormalize bank rows after the momentum blend so dot products stay
    /// cosines. Disable only for ablation.
    pub renormalize_banks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            eta: 0.5,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_source: 32,
            batch_target: 32,
            epochs: 30,
            seed: 0,
            feature_dim: 16,
            hidden: alloc::vec![64, 64],
            objective: Objective::FullCds,
            renormalize_banks: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, split: &DatasetSplit) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(CdsError::InvalidTemperature { tau: self.tau });
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(CdsError::InvalidConfig(String::from(
                "eta must be in [0, 1]",
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
        if self.weight_decay < 0.0 {
            return Err(CdsError::InvalidConfig(String::from(
                "weight decay must be non-negative",
            )));
        }
        if self.feature_dim == 0 {
            return Err(CdsError::InvalidConfig(String::from(
                "feature dimension must be positive",
            )));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(CdsError::InvalidConfig(String::from(
                "batch sizes must be positive",
            )));
        }
        if self.batch_source > split.n_source() {
            return Err(CdsError::InvalidConfig(alloc::format!(
                "source batch {} exceeds domain size {}",
                self.batch_source,
                split.n_source()
            )));
        }
        if self.batch_target > split.n_target() {
            return Err(CdsError::InvalidConfig(alloc::format!(
                "target batch {} exceeds domain size {}",
                self.batch_target,
                split.n_target()
            )));
        }
        Ok(())
    }

    /// Fresh encoder from this config's seed.
    pub fn init_model(&self, input_dim: usize) -> EncoderModel {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(4);
        EncoderModel::init(input_dim, &self.hidden, self.feature_dim, &mut rng)
    }
}

/// Per-epoch means of the loss components, plus optional evaluation output
/// and wall time. `loss_cds` is always `loss_wins + loss_cdm`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_wins: f64,
    pub loss_cdm: f64,
    pub loss_cds: f64,
    pub knn_acc: Option<f64>,
    pub seconds: f64,
}

/// Optional instrumentation for the epoch loop. The eval hook sees a frozen
/// model snapshot between epochs; the clock supplies wall time in seconds
/// (absent under `no_std`).
#[derive(Default)]
pub struct PretrainHooks<'a> {
    pub eval: Option<&'a mut dyn FnMut(usize, &EncoderModel) -> f64>,
    pub clock: Option<&'a dyn Fn() -> f64>,
}

/// Result of stage-1 training. For the union-bank baseline the shared bank is
/// split back into its source and target halves. `velocity` is the final
/// optimizer momentum state, needed for an exact resume.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: EncoderModel,
    pub source_bank: MemoryBank,
    pub target_bank: MemoryBank,
    pub velocity: Vec<crate::encoder::LayerGrads>,
    pub logs: Vec<EpochLog>,
}

enum BankState {
    PerDomain(MemoryBank, MemoryBank),
    Union(MemoryBank),
}

impl BankState {
    fn init(objective: Objective, model: &EncoderModel, split: &DatasetSplit) -> Result<Self> {
        match objective {
            Objective::FullCds | Objective::InDomainOnly => {
                let (s, t) = init_banks(model, split)?;
                Ok(BankState::PerDomain(s, t))
            }
            Objective::UnionId => Ok(BankState::Union(init_union_bank(model, split)?)),
        }
    }

    fn from_parts(objective: Objective, source: MemoryBank, target: MemoryBank) -> Result<Self> {
        match objective {
            Objective::FullCds | Objective::InDomainOnly => {
                Ok(BankState::PerDomain(source, target))
            }
            Objective::UnionId => {
                let dim = source.dim();
                let mut rows = Vec::with_capacity((source.len() + target.len()) * dim);
                for k in 0..source.len() {
                    rows.extend_from_slice(source.row(k));
                }
                for k in 0..target.len() {
                    rows.extend_from_slice(target.row(k));
                }
                Ok(BankState::Union(MemoryBank::from_raw_rows(
                    BankTag::Union,
                    dim,
                    rows,
                )?))
            }
        }
    }

    fn finish(self, n_source: usize) -> Result<(MemoryBank, MemoryBank)> {
        match self {
            BankState::PerDomain(s, t) => Ok((s, t)),
            BankState::Union(u) => {
                let dim = u.dim();
                let mut src = Vec::with_capacity(n_source * dim);
                let mut tgt = Vec::with_capacity((u.len() - n_source) * dim);
                for k in 0..u.len() {
                    if k < n_source {
                        src.extend_from_slice(u.row(k));
                    } else {
                        tgt.extend_from_slice(u.row(k));
                    }
                }
                Ok((
                    MemoryBank::from_raw_rows(BankTag::Source, dim, src)?,
                    MemoryBank::from_raw_rows(BankTag::Target, dim, tgt)?,
                ))
            }
        }
    }
}

/// (in-domain component, cross-domain component, combined report)
fn batch_loss(
    objective: Objective,
    batch: &[BatchFeature],
    banks: &BankState,
    n_source: usize,
    tau: f64,
) -> Result<(f64, f64, LossReport)> {
    match (objective, banks) {
        (Objective::FullCds, BankState::PerDomain(s, t)) => {
            // Same combination as `cds_loss`, unbundled so both component
            // values reach the epoch log.
            let wins = in_domain_loss(batch, s, t, tau)?;
            let cdm = crate::losses::cross_domain_loss(batch, s, t, tau)?;
            let (w, c) = (wins.value, cdm.value);
            Ok((w, c, wins.combine(&cdm)))
        }
        (Objective::InDomainOnly, BankState::PerDomain(s, t)) => {
            let wins = in_domain_loss(batch, s, t, tau)?;
            let w = wins.value;
            Ok((w, 0.0, wins))
        }
        (Objective::UnionId, BankState::Union(u)) => {
            // Union identities: target sample j lives at row n_source + j.
            let mut union_batch = batch.to_vec();
            for item in union_batch.iter_mut() {
                if item.domain == Domain::Target {
                    item.index += n_source;
                }
            }
            let report = union_id_loss(&union_batch, u, tau)?;
            let w = report.value;
            Ok((w, 0.0, report))
        }
        _ => unreachable!("bank state always matches the objective"),
    }
}

fn update_banks(
    banks: &mut BankState,
    batch: &[BatchFeature],
    n_source: usize,
    eta: f64,
    renormalize: bool,
) -> Result<()> {
    // Source rows first, then target rows, each in batch order.
    for pass in [Domain::Source, Domain::Target] {
        for item in batch.iter().filter(|b| b.domain == pass) {
            match banks {
                BankState::PerDomain(s, t) => {
                    let bank = match pass {
                        Domain::Source => &mut *s,
                        Domain::Target => &mut *t,
                    };
                    bank_update(bank, item.index, &item.feature, eta, renormalize)?;
                }
                BankState::Union(u) => {
                    let idx = match pass {
                        Domain::Source => item.index,
                        Domain::Target => item.index + n_source,
                    };
                    bank_update(u, idx, &item.feature, eta, renormalize)?;
                }
            }
        }
    }
    Ok(())
}

/// Runs stage 1 from a fresh seeded model and freshly initialized banks.
pub fn run_pretrain(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    hooks: PretrainHooks<'_>,
) -> Result<PretrainOutput> {
    cfg.validate(split)?;
    let model = cfg.init_model(split.input_dim());
    let banks = BankState::init(cfg.objective, &model, split)?;
    let opt = SgdOptimizer::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay);
    train_loop(model, banks, opt, 0, cfg, split, hooks)
}

/// Continues stage 1 from a persisted model and banks. Epoch shuffles derive
/// from (seed, epoch) rather than a continuous stream, so with the same
/// config — and the optimizer velocity carried over — running epochs [0, k)
/// then resuming [k, n) reproduces an uninterrupted n-epoch run bitwise.
/// Passing `velocity: None` restarts momentum from zero.
pub fn resume_pretrain(
    model: EncoderModel,
    source_bank: MemoryBank,
    target_bank: MemoryBank,
    velocity: Option<Vec<crate::encoder::LayerGrads>>,
    start_epoch: usize,
    cfg: &TrainConfig,
    split: &DatasetSplit,
    hooks: PretrainHooks<'_>,
) -> Result<PretrainOutput> {
    cfg.validate(split)?;
    if source_bank.len() != split.n_source() || target_bank.len() != split.n_target() {
        return Err(CdsError::InvalidConfig(String::from(
            "bank sizes do not match the dataset",
        )));
    }
    if source_bank.dim() != cfg.feature_dim || target_bank.dim() != cfg.feature_dim {
        return Err(CdsError::DimensionMismatch {
            expected: cfg.feature_dim,
            got: source_bank.dim(),
        });
    }
    let banks = BankState::from_parts(cfg.objective, source_bank, target_bank)?;
    let mut opt = SgdOptimizer::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay);
    if let Some(v) = velocity {
        opt.set_velocity(v)?;
    }
    train_loop(model, banks, opt, start_epoch, cfg, split, hooks)
}

fn train_loop(
    mut model: EncoderModel,
    mut banks: BankState,
    mut opt: SgdOptimizer,
    start_epoch: usize,
    cfg: &TrainConfig,
    split: &DatasetSplit,
    mut hooks: PretrainHooks<'_>,
) -> Result<PretrainOutput> {
    let n_src = split.n_source();
    let n_tgt = split.n_target();
    let mut logs = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let t0 = hooks.clock.map(|c| c()).unwrap_or(0.0);

        // Independent seeded shuffles per domain, derived from (seed, epoch)
        // so a resumed run replays the same order.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(16 + epoch as u64);
        let mut src_order: Vec<usize> = (0..n_src).collect();
        src_order.shuffle(&mut rng);
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        tgt_order.shuffle(&mut rng);

        // Every batch is full size; whichever domain exhausts first wraps
        // around its epoch permutation.
        let steps = n_src
            .div_ceil(cfg.batch_source)
            .max(n_tgt.div_ceil(cfg.batch_target));

        let mut sum_wins = 0.0;
        let mut sum_cdm = 0.0;
        let mut sum_cds = 0.0;
        for step in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch_source + cfg.batch_target);
            let mut caches: Vec<ForwardCache> = Vec::with_capacity(batch.capacity());
            for t in 0..cfg.batch_source {
                let idx = src_order[(step * cfg.batch_source + t) % n_src];
                let (f, cache) = encoder_forward(&model, split.source_input(idx))?;
                batch.push(BatchFeature {
                    feature: f,
                    index: idx,
                    domain: Domain::Source,
                });
                caches.push(cache);
            }
            for t in 0..cfg.batch_target {
                let idx = tgt_order[(step * cfg.batch_target + t) % n_tgt];
                let (f, cache) = encoder_forward(&model, split.target_input(idx))?;
                batch.push(BatchFeature {
                    feature: f,
                    index: idx,
                    domain: Domain::Target,
                });
                caches.push(cache);
            }

            let (wins, cdm, report) = batch_loss(cfg.objective, &batch, &banks, n_src, cfg.tau)?;
            sum_wins += wins;
            sum_cdm += cdm;
            sum_cds += report.value;

            let mut grads = ParamGrads::zeros_like(&model);
            for (cache, grad) in caches.iter().zip(&report.grads) {
                let (g, _) = encoder_backward(&model, cache, grad)?;
                grads.accumulate(&g);
            }
            sgd_step(&mut model, &mut opt, &grads)?;

            update_banks(&mut banks, &batch, n_src, cfg.eta, cfg.renormalize_banks)?;
        }

        let inv = 1.0 / steps as f64;
        let knn_acc = hooks.eval.as_mut().map(|hook| hook(epoch, &model));
        let t1 = hooks.clock.map(|c| c()).unwrap_or(0.0);
        logs.push(EpochLog {
            epoch,
            loss_wins: sum_wins * inv,
            loss_cdm: sum_cdm * inv,
            loss_cds: sum_cds * inv,
            knn_acc,
            seconds: t1 - t0,
        });
    }

    let (source_bank, target_bank) = banks.finish(n_src)?;
    Ok(PretrainOutput {
        model,
        source_bank,
        target_bank,
        velocity: opt.velocity().to_vec(),
        logs,
    })
}
