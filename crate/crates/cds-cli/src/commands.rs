//! Implementations behind the subcommands. Each command is deterministic
//! given its config: identical re-runs produce identical output files, with
//! wall-clock timing confined to the pretrain CSV's `seconds` column and the
//! stderr log stream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cds_core::data::{
    generate_two_domain, split_few_shot, DatasetSplit, Domain, Sample, SourceSplit,
};
use cds_core::encoder::EncoderModel;
use cds_core::eval::{
    accuracy, confusion_loss, extract_features, linear_probe, retrieval_dump,
    retrieval_precision, weighted_knn, EvalReport,
};
use cds_core::numerics::FeatureVector;
use cds_core::pretrain::{
    resume_pretrain, run_pretrain, Objective, PretrainHooks, PretrainOutput,
};

use crate::config::{DataConfig, EvalSection, ExperimentConfig};
use crate::error::{AppError, Result};
use crate::formats::{
    load_bank_csv, load_feature_csv, load_model_json, load_optimizer_json, load_split_manifest,
    rows_to_features, save_adapt_epochs_csv, save_adapt_summary_json, save_bank_csv,
    save_eval_report_json, save_feature_csv, save_head_json, save_model_json,
    save_optimizer_json, save_pipeline_csv, save_pretrain_epochs_csv, save_retrieval_dump_csv,
    save_split_manifest, CsvRow, PipelineRow, SplitManifest,
};

/// Builds the in-memory dataset from either the generator or CSV files.
pub fn build_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    match &cfg.data {
        DataConfig::Generator(g) => {
            let (source, target) = generate_two_domain(
                g.num_classes,
                g.per_class_count,
                g.input_dim,
                g.cluster_sigma,
                &g.shift.to_spec(),
                g.seed,
            )?;
            let fs = split_few_shot(&source, cfg.split.budget()?, cfg.split.seed)?;
            Ok(DatasetSplit::assemble(fs, target, g.num_classes)?)
        }
        DataConfig::Csv(paths) => {
            let src_rows = load_feature_csv(Path::new(&paths.source))?;
            let tgt_rows = load_feature_csv(Path::new(&paths.target))?;
            let manifest = load_split_manifest(Path::new(&paths.split))?;
            split_from_files(&src_rows, &tgt_rows, &manifest)
        }
    }
}

fn split_from_files(
    src_rows: &[CsvRow],
    tgt_rows: &[CsvRow],
    manifest: &SplitManifest,
) -> Result<DatasetSplit> {
    let num_classes = manifest.labeled_indices.len();
    for c in 0..num_classes {
        if !manifest.labeled_indices.contains_key(&c.to_string()) {
            return Err(AppError::Config(format!(
                "split manifest classes must be contiguous; missing class {c}"
            )));
        }
    }
    let mut labeled_of: BTreeMap<usize, usize> = BTreeMap::new();
    for (class, indices) in &manifest.labeled_indices {
        let class: usize = class
            .parse()
            .map_err(|_| AppError::Config(format!("bad class id {class:?} in manifest")))?;
        for &i in indices {
            labeled_of.insert(i, class);
        }
    }

    let to_sample = |r: &CsvRow, domain: Domain| Sample {
        x: r.values.clone(),
        label: r.label,
        domain,
        index: r.index,
    };

    let mut labeled = Vec::new();
    let mut rest = Vec::new();
    for r in src_rows {
        if r.domain != Domain::Source {
            return Err(AppError::Config(format!(
                "source file contains a target-tagged row (index {})",
                r.index
            )));
        }
        let s = to_sample(r, Domain::Source);
        if let Some(&class) = labeled_of.get(&r.index) {
            match s.label {
                Some(l) if l == class => labeled.push(s),
                Some(l) => {
                    return Err(AppError::Config(format!(
                        "index {} is class {l} in the CSV but {class} in the manifest",
                        r.index
                    )))
                }
                None => {
                    return Err(AppError::Config(format!(
                        "manifest marks index {} labeled but the CSV has no label",
                        r.index
                    )))
                }
            }
        } else {
            rest.push(s);
        }
    }
    let target: Vec<Sample> = tgt_rows
        .iter()
        .map(|r| {
            if r.domain != Domain::Target {
                return Err(AppError::Config(format!(
                    "target file contains a source-tagged row (index {})",
                    r.index
                )));
            }
            Ok(to_sample(r, Domain::Target))
        })
        .collect::<Result<_>>()?;
    let fs = SourceSplit::from_selection(labeled, rest)?;
    Ok(DatasetSplit::assemble(fs, target, num_classes)?)
}

/// Fully labeled views for evaluation, from the sealed channel.
fn ground_truth(split: &DatasetSplit) -> Result<(Vec<usize>, Vec<usize>)> {
    let gt = split.eval_ground_truth();
    let src: Option<Vec<usize>> = gt.source_labels.iter().copied().collect();
    let tgt: Option<Vec<usize>> = gt.target_labels.iter().copied().collect();
    match (src, tgt) {
        (Some(s), Some(t)) => Ok((s, t)),
        _ => Err(AppError::Config(
            "evaluation needs ground-truth labels for every sample; the loaded data has gaps"
                .into(),
        )),
    }
}

fn split_features(
    model: &EncoderModel,
    split: &DatasetSplit,
) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    let src = extract_features(model, (0..split.n_source()).map(|i| split.source_input(i)))?;
    let tgt = extract_features(model, (0..split.n_target()).map(|j| split.target_input(j)))?;
    Ok((src, tgt))
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let DataConfig::Generator(g) = &cfg.data else {
        return Err(AppError::Config(
            "gen-data needs a generator data section".into(),
        ));
    };
    let (source, target) = generate_two_domain(
        g.num_classes,
        g.per_class_count,
        g.input_dim,
        g.cluster_sigma,
        &g.shift.to_spec(),
        g.seed,
    )?;
    let fs = split_few_shot(&source, cfg.split.budget()?, cfg.split.seed)?;

    let echo = cfg.echo();
    let rows = |samples: &[Sample]| -> Vec<CsvRow> {
        samples
            .iter()
            .map(|s| CsvRow {
                domain: s.domain,
                index: s.index,
                label: s.label,
                values: s.x.clone(),
            })
            .collect()
    };
    save_feature_csv(&out.join("source.csv"), &rows(&source), &echo)?;
    save_feature_csv(&out.join("target.csv"), &rows(&target), &echo)?;

    let mut labeled_indices: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for c in 0..g.num_classes {
        labeled_indices.insert(c.to_string(), Vec::new());
    }
    for s in &fs.labeled {
        labeled_indices
            .get_mut(&s.label.unwrap().to_string())
            .unwrap()
            .push(s.index);
    }
    save_split_manifest(
        &out.join("split.json"),
        &SplitManifest {
            labeled_indices,
            config: Some(serde_json::from_str(&echo).unwrap_or(serde_json::Value::Null)),
        },
    )?;
    log::info!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        out.display()
    );
    Ok(())
}

/// Paths for continuing a previous pretraining run.
#[derive(Debug, Clone, Default)]
pub struct ResumeArgs {
    pub model: Option<PathBuf>,
    pub source_bank: Option<PathBuf>,
    pub target_bank: Option<PathBuf>,
    pub optimizer: Option<PathBuf>,
    pub epoch: usize,
}

impl ResumeArgs {
    pub fn is_set(&self) -> bool {
        self.model.is_some()
    }
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path, resume: &ResumeArgs) -> Result<()> {
    let split = build_split(cfg)?;
    let tc = cfg.train.to_core();
    let echo = cfg.echo();

    // Optional per-epoch target kNN through the eval hook.
    let hook_data = if cfg.train.knn_hook {
        let (src_labels, tgt_labels) = ground_truth(&split)?;
        Some((split.clone(), src_labels, tgt_labels, cfg.eval.clone()))
    } else {
        None
    };
    let mut hook_fn = hook_data.map(|(hook_split, src_labels, tgt_labels, eval)| {
        move |_epoch: usize, model: &EncoderModel| -> f64 {
            let Ok((s, t)) = split_features(model, &hook_split) else {
                return f64::NAN;
            };
            match weighted_knn(&s, &src_labels, &t, eval.k, eval.tau_knn) {
                Ok(preds) => accuracy(&preds, &tgt_labels),
                Err(_) => f64::NAN,
            }
        }
    });

    let t0 = Instant::now();
    let clock = move || t0.elapsed().as_secs_f64();
    let hooks = PretrainHooks {
        eval: hook_fn
            .as_mut()
            .map(|f| f as &mut dyn FnMut(usize, &EncoderModel) -> f64),
        clock: Some(&clock),
    };

    let output: PretrainOutput = if resume.is_set() {
        let model = load_model_json(resume.model.as_ref().unwrap())?;
        let (Some(sb), Some(tb)) = (&resume.source_bank, &resume.target_bank) else {
            return Err(AppError::Config(
                "resuming needs --resume-source-bank and --resume-target-bank".into(),
            ));
        };
        let source_bank = load_bank_csv(sb)?;
        let target_bank = load_bank_csv(tb)?;
        let velocity = resume
            .optimizer
            .as_ref()
            .map(|p| load_optimizer_json(p))
            .transpose()?;
        resume_pretrain(
            model,
            source_bank,
            target_bank,
            velocity,
            resume.epoch,
            &tc,
            &split,
            hooks,
        )?
    } else {
        run_pretrain(&tc, &split, hooks)?
    };

    save_model_json(&out.join("model.json"), &output.model, &echo)?;
    save_bank_csv(&out.join("source_bank.csv"), &output.source_bank, &echo)?;
    save_bank_csv(&out.join("target_bank.csv"), &output.target_bank, &echo)?;
    save_optimizer_json(&out.join("optimizer.json"), &output.velocity, &echo)?;
    save_pretrain_epochs_csv(&out.join("pretrain_epochs.csv"), &output.logs, &echo)?;
    if let Some(last) = output.logs.last() {
        log::info!(
            "pretrained {} epochs, final combined loss {:.4}",
            output.logs.len(),
            last.loss_cds
        );
    }
    Ok(())
}

pub fn cmd_adapt(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let split = build_split(cfg)?;
    let echo = cfg.echo();
    let model = match &cfg.adapt.model_path {
        Some(p) => load_model_json(Path::new(p))?,
        None => cfg.train.to_core().init_model(split.input_dim()),
    };
    let ac = cfg.adapt.to_core();
    let output = cds_core::adapt::run_adapt(model, &split, &ac)?;
    save_model_json(&out.join("adapted_model.json"), &output.model, &echo)?;
    save_head_json(&out.join("head.json"), &output.head, &echo)?;
    save_adapt_epochs_csv(&out.join("adapt_epochs.csv"), &output.logs, &echo)?;
    save_adapt_summary_json(
        &out.join("summary.json"),
        output.best_target_acc,
        output.best_epoch,
        &echo,
    )?;
    log::info!(
        "adapted for {} epochs; best target accuracy {:.4} at epoch {}",
        output.logs.len(),
        output.best_target_acc,
        output.best_epoch
    );
    Ok(())
}

/// Runs the four feature-quality measurements on explicit feature sets.
pub fn evaluate_features(
    src_feats: &[FeatureVector],
    src_labels: &[usize],
    tgt_feats: &[FeatureVector],
    tgt_labels: &[usize],
    num_classes: usize,
    eval: &EvalSection,
) -> Result<EvalReport> {
    let probe = eval.probe();
    let preds = weighted_knn(src_feats, src_labels, tgt_feats, eval.k, eval.tau_knn)?;
    let knn_accuracy = accuracy(&preds, tgt_labels);
    let linear_accuracy = linear_probe(
        src_feats,
        src_labels,
        tgt_feats,
        tgt_labels,
        num_classes,
        &probe,
    )?;
    let retrieval_precision_at_k =
        retrieval_precision(src_feats, src_labels, tgt_feats, tgt_labels, eval.retrieval_k)?;
    let confusion = confusion_loss(src_feats, tgt_feats, &probe, eval.seed)?;
    Ok(EvalReport {
        knn_accuracy,
        linear_accuracy,
        retrieval_precision_at_k,
        confusion_loss: confusion,
        k: eval.k,
        retrieval_k: eval.retrieval_k,
        tau_knn: eval.tau_knn,
        seed: eval.seed,
    })
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let echo = cfg.echo();
    let (src_feats, src_labels, tgt_feats, tgt_labels) =
        match (&cfg.eval.source_features, &cfg.eval.target_features) {
            (Some(s), Some(t)) => {
                let src_rows = load_feature_csv(Path::new(s))?;
                let tgt_rows = load_feature_csv(Path::new(t))?;
                let (sf, sl) = rows_to_features(&src_rows)?;
                let (tf, tl) = rows_to_features(&tgt_rows)?;
                (sf, sl, tf, tl)
            }
            (None, None) => {
                let Some(model_path) = &cfg.eval.model_path else {
                    return Err(AppError::Config(
                        "eval needs either eval.model_path or both feature CSV paths".into(),
                    ));
                };
                let split = build_split(cfg)?;
                let model = load_model_json(Path::new(model_path))?;
                let (sf, tf) = split_features(&model, &split)?;
                let (sl, tl) = ground_truth(&split)?;
                (sf, sl, tf, tl)
            }
            _ => {
                return Err(AppError::Config(
                    "set both eval.source_features and eval.target_features, or neither".into(),
                ))
            }
        };
    let num_classes = src_labels
        .iter()
        .chain(&tgt_labels)
        .max()
        .map_or(0, |m| m + 1);
    let report = evaluate_features(
        &src_feats,
        &src_labels,
        &tgt_feats,
        &tgt_labels,
        num_classes,
        &cfg.eval,
    )?;
    save_eval_report_json(&out.join("eval_report.json"), &report, &echo)?;
    if cfg.eval.dump_retrieval {
        let rows = retrieval_dump(
            &src_feats,
            &src_labels,
            &tgt_feats,
            &tgt_labels,
            cfg.eval.retrieval_k,
        )?;
        save_retrieval_dump_csv(&out.join("retrieval_dump.csv"), &rows)?;
    }
    log::info!(
        "eval: knn {:.4}, linear {:.4}, retrieval {:.4}, confusion {:.4}",
        report.knn_accuracy,
        report.linear_accuracy,
        report.retrieval_precision_at_k,
        report.confusion_loss
    );
    Ok(())
}

/// The four ablation arms: no pretraining, domain-agnostic instance
/// discrimination over a single shared bank, in-domain discrimination alone,
/// and the full combined objective.
const ARMS: [(&str, Option<Objective>); 4] = [
    ("no_pretrain", None),
    ("union_id", Some(Objective::UnionId)),
    ("in_domain_id", Some(Objective::InDomainOnly)),
    ("full_cds", Some(Objective::FullCds)),
];

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if !matches!(cfg.data, DataConfig::Generator(_)) {
        return Err(AppError::Config(
            "pipeline needs a generator data section so each seed can regenerate its task".into(),
        ));
    }
    let echo = cfg.echo();
    let mut rows: Vec<PipelineRow> = Vec::new();

    for &seed in &cfg.seeds {
        // One fully seeded experiment per entry: data, split, training, and
        // adaptation all keyed to the same seed.
        let mut run_cfg = cfg.clone();
        run_cfg.override_seeds(seed);
        let split = build_split(&run_cfg)?;
        let (src_labels, tgt_labels) = ground_truth(&split)?;

        for (arm, objective) in ARMS {
            let arm_dir = out.join(format!("arm_{arm}")).join(format!("seed_{seed}"));
            let tc = {
                let mut tc = run_cfg.train.to_core();
                if let Some(obj) = objective {
                    tc.objective = obj;
                }
                tc
            };
            let model = match objective {
                None => tc.init_model(split.input_dim()),
                Some(_) => run_pretrain(&tc, &split, PretrainHooks::default())?.model,
            };
            save_model_json(&arm_dir.join("model.json"), &model, &echo)?;

            // Stage-1 frozen-feature quality.
            let (sf, tf) = split_features(&model, &split)?;
            let mut eval_section = run_cfg.eval.clone();
            eval_section.seed = seed;
            let report = evaluate_features(
                &sf,
                &src_labels,
                &tf,
                &tgt_labels,
                split.num_classes(),
                &eval_section,
            )?;
            save_eval_report_json(&arm_dir.join("eval_report.json"), &report, &echo)?;

            // Identical adaptation on top of each arm.
            let ac = run_cfg.adapt.to_core();
            let adapted = cds_core::adapt::run_adapt(model, &split, &ac)?;
            save_adapt_summary_json(
                &arm_dir.join("summary.json"),
                adapted.best_target_acc,
                adapted.best_epoch,
                &echo,
            )?;

            rows.push(PipelineRow {
                arm: arm.into(),
                seed: seed.to_string(),
                knn_acc: report.knn_accuracy,
                linear_acc: report.linear_accuracy,
                retrieval_precision: report.retrieval_precision_at_k,
                confusion_loss: report.confusion_loss,
                adapt_target_acc: adapted.best_target_acc,
            });
            log::info!(
                "seed {seed} arm {arm}: knn {:.4}, adapt target {:.4}",
                report.knn_accuracy,
                adapted.best_target_acc
            );
        }
    }

    for (arm, _) in ARMS {
        let of = |f: fn(&PipelineRow) -> f64| -> f64 {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm && r.seed != "median")
                .map(f)
                .collect();
            median(&vals)
        };
        rows.push(PipelineRow {
            arm: arm.into(),
            seed: "median".into(),
            knn_acc: of(|r| r.knn_acc),
            linear_acc: of(|r| r.linear_acc),
            retrieval_precision: of(|r| r.retrieval_precision),
            confusion_loss: of(|r| r.confusion_loss),
            adapt_target_acc: of(|r| r.adapt_target_acc),
        });
    }

    save_pipeline_csv(&out.join("pipeline_table.csv"), &rows, &echo)?;
    Ok(())
}
