//! The experiment configuration document. One JSON file drives every
//! subcommand; unknown keys are rejected up front so typos cannot silently
//! fall back to defaults.

use serde::{Deserialize, Serialize};

use cds_core::adapt::{AdaptConfig, DaMode};
use cds_core::data::{LabelBudget, ShiftSpec};
use cds_core::eval::ProbeConfig;
use cds_core::pretrain::{Objective, TrainConfig};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed list for the pipeline command; single-run commands use the
    /// per-section seeds.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.budget()?;
        if self.seeds.is_empty() {
            return Err(AppError::Config("seed list must not be empty".into()));
        }
        Ok(())
    }

    /// One-line JSON echo embedded in every output artifact.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Replaces every seed in the document (the `--seed-override` flag).
    pub fn override_seeds(&mut self, seed: u64) {
        self.seeds = vec![seed];
        if let DataConfig::Generator(g) = &mut self.data {
            g.seed = seed;
        }
        self.split.seed = seed;
        self.train.seed = seed;
        self.adapt.seed = seed;
        self.eval.seed = seed;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    /// Synthetic two-domain generator.
    Generator(GeneratorConfig),
    /// Pre-extracted data from dataset CSVs plus a split manifest.
    Csv(CsvDataConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "d3")]
    pub num_classes: usize,
    #[serde(default = "d50")]
    pub per_class_count: usize,
    #[serde(default = "d2")]
    pub input_dim: usize,
    #[serde(default = "half")]
    pub cluster_sigma: f64,
    #[serde(default)]
    pub shift: ShiftSection,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

fn d3() -> usize {
    3
}
fn d50() -> usize {
    50
}
fn d2() -> usize {
    2
}
fn half() -> f64 {
    0.5
}

/// The default shift is the benchmark gap: 30° rotation, translation [2, 0],
/// unit scale, noise 0.1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    #[serde(default = "thirty_degrees")]
    pub rotation_angle: f64,
    #[serde(default = "two_zero")]
    pub translation: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "tenth")]
    pub noise_sigma: f64,
}

fn thirty_degrees() -> f64 {
    30f64.to_radians()
}
fn two_zero() -> Vec<f64> {
    vec![2.0, 0.0]
}
fn one() -> f64 {
    1.0
}
fn tenth() -> f64 {
    0.1
}

impl Default for ShiftSection {
    fn default() -> Self {
        Self {
            rotation_angle: thirty_degrees(),
            translation: two_zero(),
            scale: one(),
            noise_sigma: tenth(),
        }
    }
}

impl ShiftSection {
    pub fn to_spec(&self) -> ShiftSpec {
        ShiftSpec {
            rotation_angle: self.rotation_angle,
            translation: self.translation.clone(),
            scale: self.scale,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataConfig {
    pub source: String,
    pub target: String,
    /// JSON manifest of labeled source indices per class.
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_fraction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            shots_per_class: Some(1),
            label_fraction: None,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn budget(&self) -> Result<LabelBudget> {
        match (self.shots_per_class, self.label_fraction) {
            (Some(_), Some(_)) => Err(AppError::Config(
                "set shots_per_class or label_fraction, not both".into(),
            )),
            (Some(k), None) => Ok(LabelBudget::Shots(k)),
            (None, Some(f)) => Ok(LabelBudget::Fraction(f)),
            (None, None) => Ok(LabelBudget::Shots(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    FullCds,
    InDomainOnly,
    UnionId,
}

impl From<ObjectiveName> for Objective {
    fn from(o: ObjectiveName) -> Self {
        match o {
            ObjectiveName::FullCds => Objective::FullCds,
            ObjectiveName::InDomainOnly => Objective::InDomainOnly,
            ObjectiveName::UnionId => Objective::UnionId,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "tau_default")]
    pub tau: f64,
    #[serde(default = "eta_default")]
    pub eta: f64,
    #[serde(default = "lr_default")]
    pub lr: f64,
    #[serde(default = "momentum_default")]
    pub momentum: f64,
    #[serde(default = "wd_default")]
    pub weight_decay: f64,
    #[serde(default = "batch_default")]
    pub batch_source: usize,
    #[serde(default = "batch_default")]
    pub batch_target: usize,
    #[serde(default = "epochs_default")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "dim_default")]
    pub feature_dim: usize,
    #[serde(default = "hidden_default")]
    pub hidden: Vec<usize>,
    #[serde(default = "objective_default")]
    pub objective: ObjectiveName,
    #[serde(default = "yes")]
    pub renormalize_banks: bool,
    /// Compute the per-epoch target kNN accuracy column (needs ground-truth
    /// labels on the data).
    #[serde(default)]
    pub knn_hook: bool,
}

fn tau_default() -> f64 {
    0.05
}
fn eta_default() -> f64 {
    0.5
}
fn lr_default() -> f64 {
    0.003
}
fn momentum_default() -> f64 {
    0.9
}
fn wd_default() -> f64 {
    5e-4
}
fn batch_default() -> usize {
    32
}
fn epochs_default() -> usize {
    30
}
fn dim_default() -> usize {
    16
}
fn hidden_default() -> Vec<usize> {
    vec![64, 64]
}
fn objective_default() -> ObjectiveName {
    ObjectiveName::FullCds
}
fn yes() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainSection {
    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            tau: self.tau,
            eta: self.eta,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_source: self.batch_source,
            batch_target: self.batch_target,
            epochs: self.epochs,
            seed: self.seed,
            feature_dim: self.feature_dim,
            hidden: self.hidden.clone(),
            objective: self.objective.into(),
            renormalize_banks: self.renormalize_banks,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DaModeName {
    SourceOnly,
    TargetEntmin,
}

impl From<DaModeName> for DaMode {
    fn from(m: DaModeName) -> Self {
        match m {
            DaModeName::SourceOnly => DaMode::SourceOnly,
            DaModeName::TargetEntmin => DaMode::TargetEntmin,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    #[serde(default = "lambda_default")]
    pub lambda: f64,
    #[serde(default = "da_mode_default")]
    pub da_mode: DaModeName,
    #[serde(default = "tew_default")]
    pub target_entropy_weight: f64,
    #[serde(default = "lr_default")]
    pub lr: f64,
    #[serde(default = "momentum_default")]
    pub momentum: f64,
    #[serde(default = "wd_default")]
    pub weight_decay: f64,
    #[serde(default = "adapt_epochs_default")]
    pub epochs: usize,
    #[serde(default = "batch_default")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Pretrained encoder to start from; a fresh seeded model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
}

fn lambda_default() -> f64 {
    0.1
}
fn da_mode_default() -> DaModeName {
    DaModeName::TargetEntmin
}
fn tew_default() -> f64 {
    0.1
}
fn adapt_epochs_default() -> usize {
    100
}

impl Default for AdaptSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl AdaptSection {
    pub fn to_core(&self) -> AdaptConfig {
        AdaptConfig {
            lambda: self.lambda,
            da_mode: self.da_mode.into(),
            target_entropy_weight: self.target_entropy_weight,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            freeze_encoder: self.freeze_encoder,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "k_default")]
    pub k: usize,
    #[serde(default = "tau_default")]
    pub tau_knn: f64,
    #[serde(default = "retrieval_k_default")]
    pub retrieval_k: usize,
    #[serde(default = "probe_lr_default")]
    pub probe_lr: f64,
    #[serde(default = "probe_iters_default")]
    pub probe_max_iters: usize,
    #[serde(default = "probe_tol_default")]
    pub probe_tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Also write the per-query retrieval table.
    #[serde(default)]
    pub dump_retrieval: bool,
    /// Encoder to evaluate; required unless raw feature CSVs are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
    /// Pre-extracted labeled features, bypassing the encoder entirely.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_features: Option<String>,
}

fn k_default() -> usize {
    20
}
fn retrieval_k_default() -> usize {
    5
}
fn probe_lr_default() -> f64 {
    0.5
}
fn probe_iters_default() -> usize {
    5000
}
fn probe_tol_default() -> f64 {
    1e-7
}

impl Default for EvalSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl EvalSection {
    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            max_iters: self.probe_max_iters,
            tol: self.probe_tol,
        }
    }
}
