//! On-disk formats: dataset/feature CSVs, bank snapshots, model and optimizer
//! JSON, metric CSVs, and report JSON. Floats are written with Rust's
//! shortest-round-trip formatting (at most 17 significant digits), so every
//! save/load cycle is bit-exact. CSV files are UTF-8 with LF line endings;
//! lines starting with `#` carry metadata such as the config echo and are
//! skipped by the parsers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cds_core::adapt::{AdaptEpochLog, ClassifierHead};
use cds_core::data::Domain;
use cds_core::encoder::{Activation, EncoderModel, Layer, LayerGrads, Mat};
use cds_core::eval::{EvalReport, RetrievalRow};
use cds_core::memory::{BankTag, MemoryBank};
use cds_core::numerics::FeatureVector;
use cds_core::pretrain::EpochLog;

use crate::error::{AppError, Result};

fn fmt_f64(x: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{x}")
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(AppError::io(parent))?;
    }
    fs::write(path, content).map_err(AppError::io(path))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(AppError::io(path))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> AppError {
    AppError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Dataset / feature CSV
// ---------------------------------------------------------------------------

/// One parsed row of a dataset or feature CSV. `label` is `None` when the
/// file stores −1.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub domain: Domain,
    pub index: usize,
    pub label: Option<usize>,
    pub values: Vec<f64>,
}

/// Writes rows under the pinned header `domain,index,label,dim0..dim{d-1}`,
/// prefixed with the config echo.
pub fn save_feature_csv(path: &Path, rows: &[CsvRow], config_echo: &str) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::new();
    out.push_str(&format!("# config: {config_echo}\n"));
    out.push_str("domain,index,label");
    for d in 0..dim {
        out.push_str(&format!(",dim{d}"));
    }
    out.push('\n');
    for r in rows {
        let domain = match r.domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        let label = r.label.map_or(-1i64, |l| l as i64);
        out.push_str(&format!("{domain},{},{label}", r.index));
        for v in &r.values {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Parses a dataset/feature CSV, reporting the offending line on error and
/// rejecting dimension changes across rows.
pub fn load_feature_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    let mut dim: Option<usize> = None;
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if !line.starts_with("domain,index,label") {
                return Err(parse_err(path, lineno, "missing dataset header"));
            }
            saw_header = true;
            continue;
        }
        let mut parts = line.split(',');
        let domain = match parts.next() {
            Some("source") => Domain::Source,
            Some("target") => Domain::Target,
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("bad domain tag {:?}", other.unwrap_or("")),
                ))
            }
        };
        let index: usize = parts
            .next()
            .ok_or_else(|| parse_err(path, lineno, "missing index"))?
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad index: {e}")))?;
        let label_raw: i64 = parts
            .next()
            .ok_or_else(|| parse_err(path, lineno, "missing label"))?
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad label: {e}")))?;
        let label = if label_raw < 0 {
            None
        } else {
            Some(label_raw as usize)
        };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|e| parse_err(path, lineno, format!("bad float {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, lineno, "non-finite value"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("row has {} columns, expected {}", values.len(), d),
                ))
            }
            _ => {}
        }
        rows.push(CsvRow {
            domain,
            index,
            label,
            values,
        });
    }
    if !saw_header {
        return Err(parse_err(path, 1, "empty file without header"));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Split manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    /// Labeled source indices per class id (stringified for JSON keys).
    pub labeled_indices: BTreeMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn save_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

pub fn load_split_manifest(path: &Path) -> Result<SplitManifest> {
    serde_json::from_str(&read_file(path)?).map_err(|e| parse_err(path, 1, e.to_string()))
}

// ---------------------------------------------------------------------------
// Model JSON
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    in_dim: usize,
    out_dim: usize,
    activation: String,
    /// Row-major, out_dim × in_dim.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    output_dim: usize,
    layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

pub fn save_model_json(path: &Path, model: &EncoderModel, config_echo: &str) -> Result<()> {
    let doc = ModelDoc {
        output_dim: model.output_dim(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerDoc {
                in_dim: l.weight.cols,
                out_dim: l.weight.rows,
                activation: match l.activation {
                    Activation::Relu => "relu".into(),
                    Activation::Identity => "identity".into(),
                },
                weight: l.weight.data.clone(),
                bias: l.bias.clone(),
            })
            .collect(),
        config: Some(serde_json::from_str(config_echo).unwrap_or(serde_json::Value::Null)),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

pub fn load_model_json(path: &Path) -> Result<EncoderModel> {
    let doc: ModelDoc =
        serde_json::from_str(&read_file(path)?).map_err(|e| parse_err(path, 1, e.to_string()))?;
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.iter().enumerate() {
        if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
            return Err(parse_err(path, 1, format!("layer {i} shape mismatch")));
        }
        let activation = match l.activation.as_str() {
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            other => {
                return Err(parse_err(path, 1, format!("unknown activation {other:?}")));
            }
        };
        layers.push(Layer {
            weight: Mat {
                rows: l.out_dim,
                cols: l.in_dim,
                data: l.weight.clone(),
            },
            bias: l.bias.clone(),
            activation,
        });
    }
    let model = EncoderModel::from_layers(layers)?;
    if model.output_dim() != doc.output_dim {
        return Err(parse_err(path, 1, "output_dim disagrees with layers"));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Optimizer JSON (momentum buffers, needed for exact resume)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct VelocityDoc {
    weight: Vec<f64>,
    rows: usize,
    cols: usize,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerDoc {
    velocity: Vec<VelocityDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

pub fn save_optimizer_json(path: &Path, velocity: &[LayerGrads], config_echo: &str) -> Result<()> {
    let doc = OptimizerDoc {
        velocity: velocity
            .iter()
            .map(|v| VelocityDoc {
                weight: v.weight.data.clone(),
                rows: v.weight.rows,
                cols: v.weight.cols,
                bias: v.bias.clone(),
            })
            .collect(),
        config: Some(serde_json::from_str(config_echo).unwrap_or(serde_json::Value::Null)),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

pub fn load_optimizer_json(path: &Path) -> Result<Vec<LayerGrads>> {
    let doc: OptimizerDoc =
        serde_json::from_str(&read_file(path)?).map_err(|e| parse_err(path, 1, e.to_string()))?;
    doc.velocity
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v.weight.len() != v.rows * v.cols {
                return Err(parse_err(path, 1, format!("velocity {i} shape mismatch")));
            }
            Ok(LayerGrads {
                weight: Mat {
                    rows: v.rows,
                    cols: v.cols,
                    data: v.weight,
                },
                bias: v.bias,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Bank CSV
// ---------------------------------------------------------------------------

pub fn save_bank_csv(path: &Path, bank: &MemoryBank, config_echo: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config: {config_echo}\n"));
    out.push_str(&format!(
        "# domain_tag={} n={} d={}\n",
        bank.tag().as_str(),
        bank.len(),
        bank.dim()
    ));
    for d in 0..bank.dim() {
        if d > 0 {
            out.push(',');
        }
        out.push_str(&format!("dim{d}"));
    }
    out.push('\n');
    for k in 0..bank.len() {
        let row = bank.row(k);
        for (d, v) in row.iter().enumerate() {
            if d > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_bank_csv(path: &Path) -> Result<MemoryBank> {
    let text = read_file(path)?;
    let mut tag = None;
    let mut n = None;
    let mut dim = None;
    let mut rows: Vec<f64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(meta) = line.strip_prefix("# domain_tag=") {
            for piece in format!("domain_tag={meta}").split_whitespace() {
                match piece.split_once('=') {
                    Some(("domain_tag", t)) => {
                        tag = Some(match t {
                            "source" => BankTag::Source,
                            "target" => BankTag::Target,
                            "union" => BankTag::Union,
                            other => {
                                return Err(parse_err(
                                    path,
                                    lineno,
                                    format!("unknown bank tag {other:?}"),
                                ))
                            }
                        });
                    }
                    Some(("n", v)) => {
                        n = Some(v.parse::<usize>().map_err(|e| {
                            parse_err(path, lineno, format!("bad n: {e}"))
                        })?)
                    }
                    Some(("d", v)) => {
                        dim = Some(v.parse::<usize>().map_err(|e| {
                            parse_err(path, lineno, format!("bad d: {e}"))
                        })?)
                    }
                    _ => return Err(parse_err(path, lineno, "malformed bank metadata")),
                }
            }
            continue;
        }
        if line.starts_with('#') || line.is_empty() || line.starts_with("dim0") {
            continue;
        }
        for p in line.split(',') {
            rows.push(
                p.parse::<f64>()
                    .map_err(|e| parse_err(path, lineno, format!("bad float {p:?}: {e}")))?,
            );
        }
    }
    let tag = tag.ok_or_else(|| parse_err(path, 1, "missing bank metadata line"))?;
    let dim = dim.ok_or_else(|| parse_err(path, 1, "missing d in bank metadata"))?;
    let bank = MemoryBank::from_raw_rows(tag, dim, rows)?;
    if let Some(n) = n {
        if bank.len() != n {
            return Err(parse_err(
                path,
                1,
                format!("bank has {} rows, metadata says {n}", bank.len()),
            ));
        }
    }
    Ok(bank)
}

// ---------------------------------------------------------------------------
// Metric CSVs
// ---------------------------------------------------------------------------

pub fn save_pretrain_epochs_csv(path: &Path, logs: &[EpochLog], config_echo: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config: {config_echo}\n"));
    out.push_str("epoch,loss_wins,loss_cdm,loss_cds,knn_acc,seconds\n");
    for l in logs {
        let knn = l.knn_acc.map(fmt_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch,
            fmt_f64(l.loss_wins),
            fmt_f64(l.loss_cdm),
            fmt_f64(l.loss_cds),
            knn,
            fmt_f64(l.seconds)
        ));
    }
    write_file(path, &out)
}

pub fn save_adapt_epochs_csv(path: &Path, logs: &[AdaptEpochLog], config_echo: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config: {config_echo}\n"));
    out.push_str("epoch,loss_total,loss_da,loss_su,src_unlabeled_acc,target_acc\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch,
            fmt_f64(l.loss_total),
            fmt_f64(l.loss_da),
            fmt_f64(l.loss_su),
            fmt_f64(l.src_unlabeled_acc),
            fmt_f64(l.target_acc)
        ));
    }
    write_file(path, &out)
}

pub fn save_retrieval_dump_csv(path: &Path, rows: &[RetrievalRow]) -> Result<()> {
    let mut out = String::from("query_index,rank,neighbor_index,similarity,match\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.query_index,
            r.rank,
            r.neighbor_index,
            fmt_f64(r.similarity),
            u8::from(r.matches)
        ));
    }
    write_file(path, &out)
}

// ---------------------------------------------------------------------------
// Report JSON
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReportDoc {
    pub knn_accuracy: f64,
    pub linear_accuracy: f64,
    pub retrieval_precision_at_k: f64,
    pub confusion_loss: f64,
    pub k: usize,
    pub retrieval_k: usize,
    pub tau_knn: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn save_eval_report_json(path: &Path, report: &EvalReport, config_echo: &str) -> Result<()> {
    let doc = EvalReportDoc {
        knn_accuracy: report.knn_accuracy,
        linear_accuracy: report.linear_accuracy,
        retrieval_precision_at_k: report.retrieval_precision_at_k,
        confusion_loss: report.confusion_loss,
        k: report.k,
        retrieval_k: report.retrieval_k,
        tau_knn: report.tau_knn,
        seed: report.seed,
        config: Some(serde_json::from_str(config_echo).unwrap_or(serde_json::Value::Null)),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptSummaryDoc {
    pub best_target_acc: f64,
    pub best_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn save_adapt_summary_json(
    path: &Path,
    best_target_acc: f64,
    best_epoch: usize,
    config_echo: &str,
) -> Result<()> {
    let doc = AdaptSummaryDoc {
        best_target_acc,
        best_epoch,
        config: Some(serde_json::from_str(config_echo).unwrap_or(serde_json::Value::Null)),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

/// Head weights ride the same layer document as the encoder.
pub fn save_head_json(path: &Path, head: &ClassifierHead, config_echo: &str) -> Result<()> {
    let doc = ModelDoc {
        output_dim: head.weight.rows,
        layers: vec![LayerDoc {
            in_dim: head.weight.cols,
            out_dim: head.weight.rows,
            activation: "identity".into(),
            weight: head.weight.data.clone(),
            bias: head.bias.clone(),
        }],
        config: Some(serde_json::from_str(config_echo).unwrap_or(serde_json::Value::Null)),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

pub fn load_head_json(path: &Path) -> Result<ClassifierHead> {
    let model = load_model_json(path)?;
    let layer = &model.layers()[0];
    Ok(ClassifierHead {
        weight: layer.weight.clone(),
        bias: layer.bias.clone(),
    })
}

// ---------------------------------------------------------------------------
// Pipeline table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRow {
    pub arm: String,
    /// Seed as a string so the median rows can use "median".
    pub seed: String,
    pub knn_acc: f64,
    pub linear_acc: f64,
    pub retrieval_precision: f64,
    pub confusion_loss: f64,
    pub adapt_target_acc: f64,
}

pub fn save_pipeline_csv(path: &Path, rows: &[PipelineRow], config_echo: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config: {config_echo}\n"));
    out.push_str("arm,seed,knn_acc,linear_acc,retrieval_precision,confusion_loss,adapt_target_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.arm,
            r.seed,
            fmt_f64(r.knn_acc),
            fmt_f64(r.linear_acc),
            fmt_f64(r.retrieval_precision),
            fmt_f64(r.confusion_loss),
            fmt_f64(r.adapt_target_acc)
        ));
    }
    write_file(path, &out)
}

pub fn load_pipeline_csv(path: &Path) -> Result<Vec<PipelineRow>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with('#') || line.is_empty() || line.starts_with("arm,") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(parse_err(path, lineno, "expected 7 columns"));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| parse_err(path, lineno, format!("bad float {s:?}: {e}")))
        };
        rows.push(PipelineRow {
            arm: parts[0].into(),
            seed: parts[1].into(),
            knn_acc: f(parts[2])?,
            linear_acc: f(parts[3])?,
            retrieval_precision: f(parts[4])?,
            confusion_loss: f(parts[5])?,
            adapt_target_acc: f(parts[6])?,
        });
    }
    Ok(rows)
}

/// Loaded feature rows as unit vectors with their labels, for eval-by-CSV.
pub fn rows_to_features(rows: &[CsvRow]) -> Result<(Vec<FeatureVector>, Vec<usize>)> {
    let mut feats = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for r in rows {
        let label = r.label.ok_or_else(|| {
            AppError::Config(format!(
                "feature row {} in domain {:?} has no label; evaluation needs labeled features",
                r.index, r.domain
            ))
        })?;
        feats.push(cds_core::numerics::l2_normalize(&r.values).map_err(AppError::from)?);
        labels.push(label);
    }
    Ok((feats, labels))
}
