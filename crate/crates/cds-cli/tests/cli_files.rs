//! File-level behavior of the commands: artifacts exist with the right
//! shapes, reruns are exact, resume continues, and the binary maps errors to
//! its documented exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use cds_cli::commands::{
    cmd_adapt, cmd_eval, cmd_gen_data, cmd_pipeline, cmd_pretrain, ResumeArgs,
};
use cds_cli::config::ExperimentConfig;
use cds_cli::error::AppError;
use cds_cli::formats::{load_feature_csv, load_model_json, load_pipeline_csv};
use tempfile::tempdir;

fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
        "seeds": [0, 1],
        "data": {"generator": {"num_classes": 3, "per_class_count": 12, "seed": 7}},
        "split": {"shots_per_class": 1, "seed": 3},
        "train": {"tau": 0.5, "epochs": 4, "batch_source": 8, "batch_target": 8,
                  "feature_dim": 8, "hidden": [16, 16], "seed": 5},
        "adapt": {"epochs": 5, "batch": 8, "seed": 2},
        "eval": {"k": 5, "retrieval_k": 3, "probe_max_iters": 300}
    }"#,
    )
    .unwrap()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn gen_data_writes_consistent_files() {
    let cfg = small_config();
    let dir = tempdir().unwrap();
    cmd_gen_data(&cfg, dir.path()).unwrap();

    let src = load_feature_csv(&dir.path().join("source.csv")).unwrap();
    let tgt = load_feature_csv(&dir.path().join("target.csv")).unwrap();
    assert_eq!(src.len(), 36);
    assert_eq!(tgt.len(), 36);
    assert!(src.iter().all(|r| r.label.is_some()));

    let manifest = read(&dir.path().join("split.json"));
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    let labeled = parsed["labeled_indices"].as_object().unwrap();
    assert_eq!(labeled.len(), 3);
    for (_, v) in labeled {
        assert_eq!(v.as_array().unwrap().len(), 1);
    }
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let cfg = small_config();
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    cmd_gen_data(&cfg, a.path()).unwrap();
    cmd_gen_data(&cfg, b.path()).unwrap();
    for name in ["source.csv", "target.csv", "split.json"] {
        assert_eq!(read(&a.path().join(name)), read(&b.path().join(name)), "{name}");
    }
}

#[test]
fn gen_data_rejects_oversized_shots() {
    let mut cfg = small_config();
    cfg.split.shots_per_class = Some(100);
    let dir = tempdir().unwrap();
    let err = cmd_gen_data(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn pretrain_zero_epochs_writes_the_initial_model() {
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    let dir = tempdir().unwrap();
    cmd_pretrain(&cfg, dir.path(), &ResumeArgs::default()).unwrap();
    let written = load_model_json(&dir.path().join("model.json")).unwrap();
    let split = cds_cli::commands::build_split(&cfg).unwrap();
    let fresh = cfg.train.to_core().init_model(split.input_dim());
    assert_eq!(written, fresh);
    // Epoch CSV holds only the header and the config echo.
    let csv = read(&dir.path().join("pretrain_epochs.csv"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn pretrain_resume_reproduces_uninterrupted_run() {
    let cfg = small_config();
    let full_dir = tempdir().unwrap();
    cmd_pretrain(&cfg, full_dir.path(), &ResumeArgs::default()).unwrap();

    let mut half_cfg = small_config();
    half_cfg.train.epochs = 2;
    let half_dir = tempdir().unwrap();
    cmd_pretrain(&half_cfg, half_dir.path(), &ResumeArgs::default()).unwrap();

    let resumed_dir = tempdir().unwrap();
    let resume = ResumeArgs {
        model: Some(half_dir.path().join("model.json")),
        source_bank: Some(half_dir.path().join("source_bank.csv")),
        target_bank: Some(half_dir.path().join("target_bank.csv")),
        optimizer: Some(half_dir.path().join("optimizer.json")),
        epoch: 2,
    };
    cmd_pretrain(&cfg, resumed_dir.path(), &resume).unwrap();

    // Model, banks, and optimizer state all land bitwise where the
    // uninterrupted run put them.
    for name in ["model.json", "source_bank.csv", "target_bank.csv", "optimizer.json"] {
        assert_eq!(
            read(&full_dir.path().join(name)),
            read(&resumed_dir.path().join(name)),
            "{name}"
        );
    }
}

#[test]
fn pretrain_from_csv_data_matches_generator_data() {
    // gen-data then pretrain-from-CSV equals pretrain straight from the
    // generator config: the CSV round trip is lossless.
    let cfg = small_config();
    let data_dir = tempdir().unwrap();
    cmd_gen_data(&cfg, data_dir.path()).unwrap();

    let from_gen = tempdir().unwrap();
    cmd_pretrain(&cfg, from_gen.path(), &ResumeArgs::default()).unwrap();

    let mut csv_cfg = small_config();
    csv_cfg.data = cds_cli::config::DataConfig::Csv(cds_cli::config::CsvDataConfig {
        source: data_dir.path().join("source.csv").display().to_string(),
        target: data_dir.path().join("target.csv").display().to_string(),
        split: data_dir.path().join("split.json").display().to_string(),
    });
    let from_csv = tempdir().unwrap();
    cmd_pretrain(&csv_cfg, from_csv.path(), &ResumeArgs::default()).unwrap();

    // Identical weights (the embedded config echoes differ by design).
    assert_eq!(
        load_model_json(&from_gen.path().join("model.json")).unwrap(),
        load_model_json(&from_csv.path().join("model.json")).unwrap()
    );
}

#[test]
fn pretrain_missing_data_file_is_io_error() {
    let mut cfg = small_config();
    cfg.data = cds_cli::config::DataConfig::Csv(cds_cli::config::CsvDataConfig {
        source: "/nonexistent/source.csv".into(),
        target: "/nonexistent/target.csv".into(),
        split: "/nonexistent/split.json".into(),
    });
    let dir = tempdir().unwrap();
    let err = cmd_pretrain(&cfg, dir.path(), &ResumeArgs::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(err, AppError::Io { .. }));
}

#[test]
fn adapt_writes_summary_and_epochs() {
    let cfg = small_config();
    let pre = tempdir().unwrap();
    cmd_pretrain(&cfg, pre.path(), &ResumeArgs::default()).unwrap();

    let mut acfg = small_config();
    acfg.adapt.model_path = Some(pre.path().join("model.json").display().to_string());
    let dir = tempdir().unwrap();
    cmd_adapt(&acfg, dir.path()).unwrap();

    let summary: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("summary.json"))).unwrap();
    let acc = summary["best_target_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(summary["best_epoch"].as_u64().unwrap() < 5);
    assert!(summary["config"].is_object());

    let epochs = read(&dir.path().join("adapt_epochs.csv"));
    assert!(epochs.starts_with("# config: "));
    assert_eq!(epochs.lines().count(), 2 + 5);
    assert!(dir.path().join("head.json").exists());
    assert!(dir.path().join("adapted_model.json").exists());
}

#[test]
fn eval_via_model_writes_report() {
    let cfg = small_config();
    let pre = tempdir().unwrap();
    cmd_pretrain(&cfg, pre.path(), &ResumeArgs::default()).unwrap();

    let mut ecfg = small_config();
    ecfg.eval.model_path = Some(pre.path().join("model.json").display().to_string());
    ecfg.eval.dump_retrieval = true;
    let dir = tempdir().unwrap();
    cmd_eval(&ecfg, dir.path()).unwrap();

    let report: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("eval_report.json"))).unwrap();
    for field in [
        "knn_accuracy",
        "linear_accuracy",
        "retrieval_precision_at_k",
    ] {
        let v = report[field].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{field}={v}");
    }
    let conf = report["confusion_loss"].as_f64().unwrap();
    assert!((0.0..=core::f64::consts::LN_2 + 1e-3).contains(&conf));

    let dump = read(&dir.path().join("retrieval_dump.csv"));
    assert!(dump.starts_with("query_index,rank,neighbor_index,similarity,match\n"));
    // 36 queries × retrieval_k 3 rows.
    assert_eq!(dump.lines().count(), 1 + 36 * 3);
}

#[test]
fn eval_via_feature_csvs_matches_eval_via_model() {
    let cfg = small_config();
    let pre = tempdir().unwrap();
    cmd_pretrain(&cfg, pre.path(), &ResumeArgs::default()).unwrap();

    // Model-driven report.
    let mut mcfg = small_config();
    mcfg.eval.model_path = Some(pre.path().join("model.json").display().to_string());
    let mdir = tempdir().unwrap();
    cmd_eval(&mcfg, mdir.path()).unwrap();

    // Export features by hand, then evaluate the CSVs.
    let split = cds_cli::commands::build_split(&cfg).unwrap();
    let model = load_model_json(&pre.path().join("model.json")).unwrap();
    let gt = split.eval_ground_truth();
    let mut src_rows = Vec::new();
    for i in 0..split.n_source() {
        let (f, _) = cds_core::encoder::encoder_forward(&model, split.source_input(i)).unwrap();
        src_rows.push(cds_cli::formats::CsvRow {
            domain: cds_core::data::Domain::Source,
            index: i,
            label: gt.source_labels[i],
            values: f.as_slice().to_vec(),
        });
    }
    let mut tgt_rows = Vec::new();
    for j in 0..split.n_target() {
        let (f, _) = cds_core::encoder::encoder_forward(&model, split.target_input(j)).unwrap();
        tgt_rows.push(cds_cli::formats::CsvRow {
            domain: cds_core::data::Domain::Target,
            index: j,
            label: gt.target_labels[j],
            values: f.as_slice().to_vec(),
        });
    }
    let fdir = tempdir().unwrap();
    cds_cli::formats::save_feature_csv(&fdir.path().join("sf.csv"), &src_rows, "{}").unwrap();
    cds_cli::formats::save_feature_csv(&fdir.path().join("tf.csv"), &tgt_rows, "{}").unwrap();

    let mut fcfg = small_config();
    fcfg.eval.source_features = Some(fdir.path().join("sf.csv").display().to_string());
    fcfg.eval.target_features = Some(fdir.path().join("tf.csv").display().to_string());
    let fdir_out = tempdir().unwrap();
    cmd_eval(&fcfg, fdir_out.path()).unwrap();

    let m: serde_json::Value =
        serde_json::from_str(&read(&mdir.path().join("eval_report.json"))).unwrap();
    let f: serde_json::Value =
        serde_json::from_str(&read(&fdir_out.path().join("eval_report.json"))).unwrap();
    for field in [
        "knn_accuracy",
        "linear_accuracy",
        "retrieval_precision_at_k",
        "confusion_loss",
    ] {
        assert_eq!(m[field], f[field], "{field}");
    }
}

#[test]
fn pipeline_table_has_the_documented_shape() {
    let cfg = small_config();
    let dir = tempdir().unwrap();
    cmd_pipeline(&cfg, dir.path()).unwrap();
    let rows = load_pipeline_csv(&dir.path().join("pipeline_table.csv")).unwrap();
    // 4 arms × 2 seeds + 4 median rows.
    assert_eq!(rows.len(), 4 * 2 + 4);
    for arm in ["no_pretrain", "union_id", "in_domain_id", "full_cds"] {
        assert_eq!(rows.iter().filter(|r| r.arm == arm).count(), 3);
        assert_eq!(
            rows.iter()
                .filter(|r| r.arm == arm && r.seed == "median")
                .count(),
            1
        );
        for seed in ["0", "1"] {
            assert!(dir
                .path()
                .join(format!("arm_{arm}/seed_{seed}/eval_report.json"))
                .exists());
        }
    }
}

#[test]
fn full_objective_collapses_to_in_domain_when_matching_is_degenerate() {
    // One sample per domain: every similarity distribution in either
    // direction has a single entry, so the matching entropy is constantly
    // zero with zero gradients and the full objective trains exactly like
    // in-domain discrimination alone.
    use cds_core::data::{DatasetSplit, Domain, Sample, SourceSplit};
    use cds_core::pretrain::{run_pretrain, Objective, PretrainHooks, TrainConfig};

    let source = vec![Sample {
        x: vec![1.5, 0.25],
        label: Some(0),
        domain: Domain::Source,
        index: 0,
    }];
    let target = vec![Sample {
        x: vec![0.5, -0.25],
        label: Some(0),
        domain: Domain::Target,
        index: 0,
    }];
    let fs = SourceSplit::from_selection(source, vec![]).unwrap();
    let split = DatasetSplit::assemble(fs, target, 1).unwrap();

    let base = TrainConfig {
        epochs: 3,
        batch_source: 1,
        batch_target: 1,
        feature_dim: 4,
        hidden: vec![8],
        ..TrainConfig::default()
    };
    let full = run_pretrain(
        &TrainConfig {
            objective: Objective::FullCds,
            ..base.clone()
        },
        &split,
        PretrainHooks::default(),
    )
    .unwrap();
    let wins_only = run_pretrain(
        &TrainConfig {
            objective: Objective::InDomainOnly,
            ..base
        },
        &split,
        PretrainHooks::default(),
    )
    .unwrap();
    assert_eq!(full.model, wins_only.model);
    assert_eq!(full.source_bank, wins_only.source_bank);
    assert!(full.logs.iter().all(|l| l.loss_cdm == 0.0));
}

#[test]
fn binary_maps_errors_to_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cds");
    let dir = tempdir().unwrap();

    // Missing config file: exit 3.
    let out = Command::new(bin)
        .args(["gen-data", "--config", "/nonexistent.json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Unknown config key: exit 2.
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"data": {"generator": {}}, "bogus": 1}"#).unwrap();
    let out = Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Valid run: exit 0.
    let good = dir.path().join("good.json");
    fs::write(
        &good,
        r#"{"data": {"generator": {"num_classes": 2, "per_class_count": 3}}}"#,
    )
    .unwrap();
    let out = Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
}

#[test]
fn seed_override_changes_outputs() {
    let bin = env!("CARGO_BIN_EXE_cds");
    let dir = tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(
        &cfg_path,
        r#"{"data": {"generator": {"num_classes": 2, "per_class_count": 3}}}"#,
    )
    .unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (out, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let status = Command::new(bin)
            .args(["gen-data", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(out)
            .args(["--seed-override", seed])
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(read(&a.join("source.csv")), read(&b.join("source.csv")));
    assert_ne!(read(&a.join("source.csv")), read(&c.join("source.csv")));
}
