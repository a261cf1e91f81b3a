use std::path::Path;
use std::process::Command;

use dwf_cli::commands::{
    cmd_init_stats, cmd_lasso_verify, cmd_prune, cmd_sweep, cmd_train, pareto_flags, RunOptions,
};
use dwf_cli::config::{DataSource, ExperimentConfig, PruneMethod, TrainMethod};
use dwf_core::model::{Activation, LossKind, MlpSpec};
use dwf_core::optimizer::LrSchedule;

fn toy() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = MlpSpec::new(vec![5, 12, 3], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
    cfg.data.source = DataSource::Blobs {
        train: 200,
        test: 100,
        features: 5,
        classes: 3,
        spread: 3.0,
    };
    cfg.data.val_fraction = 0.2;
    cfg.train.epochs = Some(5);
    cfg.train.batch_size = 32;
    cfg.train.schedule = LrSchedule::Cosine {
        eta0: 0.1,
        total_steps: None,
    };
    cfg
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out: dir.to_path_buf(),
        data_dir: None,
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = toy();
    let (da, sa) = cmd_train(&cfg, &opts(a.path())).unwrap();
    let (db, _) = cmd_train(&cfg, &opts(b.path())).unwrap();
    for f in ["config.json", "trace.csv", "trace.json", "model.json", "sparse_model.json", "report.json", "manifest.json"] {
        assert!(da.join(f).is_file(), "{f}");
        assert_eq!(read(&da.join(f)), read(&db.join(f)), "{f}");
    }
    // Without a penalty nothing reaches exact zero.
    assert_eq!(sa.report.compression_ratio, 1.0);
    assert!(sa.test_acc > 0.6, "{}", sa.test_acc);
    let csv = String::from_utf8(read(&da.join("trace.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn vanilla_l1_train_runs_unfactorized() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.train.method = TrainMethod::VanillaL1;
    cfg.train.lambda = 1e-3;
    let (_, s) = cmd_train(&cfg, &opts(dir.path())).unwrap();
    assert!(s.report.misalignment_total.is_none());
    assert!(s.test_acc > 0.9);
}

#[test]
fn sweep_covers_the_grid_and_flags_the_front() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.sweep.lambda_min = 1e-4;
    cfg.sweep.lambda_max = 1e-1;
    cfg.sweep.count = 2;
    cfg.sweep.depths = vec![2, 3];
    let (path, rows) = cmd_sweep(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(rows.len(), 4);
    let keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.depth, r.lambda_index)).collect();
    assert_eq!(keys, [(2, 0), (2, 1), (3, 0), (3, 1)]);
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.test_acc, r.cr)).collect();
    let ok: Vec<bool> = rows.iter().map(|r| r.status == "ok").collect();
    assert_eq!(rows.iter().map(|r| r.pareto).collect::<Vec<_>>(), pareto_flags(&points, &ok));
    assert!(rows.iter().any(|r| r.pareto));
    let csv = String::from_utf8(read(&path.join("sweep.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for r in &rows {
        assert!(path.join(format!("traces/d{}_l{:02}.csv", r.depth, r.lambda_index)).is_file());
    }
    // A stronger penalty never leaves more weights on these tiny problems.
    for d in [0, 2] {
        assert!(rows[d + 1].cr >= rows[d].cr);
    }
}

#[test]
fn prune_produces_one_row_per_method_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.prune.compression_ratios = Some(vec![2.0, 8.0]);
    cfg.prune.finetune_epochs = 2;
    cfg.prune.snip_batch = 32;
    cfg.prune.synflow_iterations = 10;
    let (path, rows) = cmd_prune(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(rows.len(), 5 * 2);
    let total = cfg.model.param_count() as f64;
    for r in &rows {
        assert_eq!(r.status, "ok", "{r:?}");
        let kept = (total / r.cr_target).round();
        // Training keeps masked entries at zero; surviving entries may also vanish.
        assert!(r.cr_achieved >= total / kept - 1e-9, "{r:?}");
    }
    assert!(path.join("prune.csv").is_file());
    assert!(path.join("masks/synflow_cr01.bin").is_file());
    assert!(path.join("traces/dense.csv").is_file());
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods[0], PruneMethod::Gmp.name());
}

#[test]
fn lasso_verify_small_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.lasso.seeds = 3;
    let (path, summary, rows) = cmd_lasso_verify(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(rows.len(), 3 * 4);
    assert_eq!(summary.converged, rows.len());
    assert!(summary.max_gap <= 1e-4, "{}", summary.max_gap);
    assert!(summary.max_misalignment_penalized <= 1e-6);
    assert!(path.join("lasso.csv").is_file());
}

#[test]
fn init_stats_report_matches_the_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.init_stats.scheme = dwf_core::init::InitScheme::VarMatch;
    cfg.init_stats.depth = 2;
    let (_, s) = cmd_init_stats(&cfg, &opts(dir.path())).unwrap();
    let target = cfg.init_stats.sigma_w.powi(2);
    assert!((s.variance / target - 1.0).abs() < 0.1);
    assert!((s.kurtosis / 9.0 - 1.0).abs() < 0.2);
    cfg.init_stats.n = 100;
    assert!(cmd_init_stats(&cfg, &opts(dir.path())).is_err());
}

fn dwf(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dwf"))
        .args(args)
        .args(["--out", dir.to_str().unwrap()])
        .env_remove("DWF_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn error_kind(out: &std::process::Output) -> String {
    let doc: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    doc["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");

    std::fs::write(&cfg_path, r#"{"schema_version": 1, "train": {"learning_rate": 1}}"#).unwrap();
    let out = dwf(&["train", "--config", cfg_path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");

    std::fs::write(&cfg_path, r#"{"schema_version": 1, "train": {"depth": 3, "lambda": -1}}"#).unwrap();
    let out = dwf(&["train", "--config", cfg_path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // Default configuration reads IDX files; no directory anywhere.
    let out = dwf(&["train"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_kind(&out), "io");

    let empty = tempfile::tempdir().unwrap();
    let out = dwf(&["train", "--data-dir", empty.path().to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(4));

    // Unknown flag value is a usage error.
    let out = dwf(&["train", "--profile", "huge"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_diverges_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.train.schedule = LrSchedule::Constant { eta0: 1e6 };
    cfg.train.lambda = 0.0;
    let cfg_path = dir.path().join("diverge.json");
    std::fs::write(&cfg_path, cfg.canonical_json()).unwrap();
    let out = dwf(&["train", "--config", cfg_path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn binary_success_prints_the_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("toy.json");
    std::fs::write(&cfg_path, toy().canonical_json()).unwrap();
    let out = dwf(&["train", "--config", cfg_path.to_str().unwrap(), "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = String::from_utf8(out.stdout).unwrap();
    let run = Path::new(run.trim());
    assert!(run.join("manifest.json").is_file());
    let saved: ExperimentConfig = serde_json::from_slice(&read(&run.join("config.json"))).unwrap();
    assert_eq!(saved.seed, 7);
}
