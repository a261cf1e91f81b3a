//! Subcommand implementations. Each returns the run directory it wrote.

use std::path::{Path, PathBuf};

use serde::Serialize;

use dwf_core::data::{load_mnist_dir, synth_blobs, synth_sparse_regression, train_val_split, Dataset, Split};
use dwf_core::factorization::{misalignment, quasi_norm_values};
use dwf_core::init::sample_factors;
use dwf_core::metrics::{
    compression_ratio, format_f64, lasso_cd, lasso_lambda_max, lasso_objective, ser_f64, sparsity_report, FactorizedLassoConfig,
    SparsityReport,
};
use dwf_core::model::{save_checkpoint, save_dense, DenseMlp};
use dwf_core::ndcore::stats::{kurtosis, ks_normal_pvalue, ks_normal_statistic, variance};
use dwf_core::ndcore::{derive_seed, SeededRng};
use dwf_core::model::{FactorizedMlp, MlpSpec};
use dwf_core::optimizer::{
    dense_init, train, train_dense, train_vanilla_l1, DenseRegularizer, EpochTrace, TrainConfig, TrainError,
};
use dwf_core::pruning::{
    magnitude_prune_and_finetune, posthoc_prune_curve, prune_at_init_and_train, write_mask, AtInitMethod,
    PruneMask, PruneTarget,
};
use dwf_core::{DwfError, Result};

use crate::config::{DataSource, ExperimentConfig, PruneMethod, TrainMethod};
use crate::error::CliResult;
use crate::output::{csv_bytes, write_traces, RunDir};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub data_dir: Option<PathBuf>,
}

pub const DATA_DIR_ENV: &str = "DWF_DATA_DIR";

/// Training, optional validation and test sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

fn resolve_data_dir(cfg_dir: Option<&Path>, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg_dir.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| DwfError::Io(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
}

pub fn load_splits(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Splits> {
    let (full_train, mut test) = match &cfg.data.source {
        DataSource::Idx { dir } => {
            let dir = resolve_data_dir(dir.as_deref(), opts.data_dir.as_deref())?;
            load_mnist_dir(&dir)?
        }
        &DataSource::Blobs {
            train,
            test,
            features,
            classes,
            spread,
        } => {
            let mut rng = SeededRng::stream(cfg.seed, &[0xB10B]);
            let all = synth_blobs(train + test, features, classes, spread, &mut rng)?;
            let idx: Vec<usize> = (0..train + test).collect();
            (
                all.subset(&idx[..train], Split::Train),
                all.subset(&idx[train..], Split::Test),
            )
        }
    };
    // The split permutation is fixed so every run sees the same validation set.
    let (mut train, val) = train_val_split(&full_train, cfg.data.val_fraction, &mut SeededRng::new(0xDA7A))?;
    if let Some(n) = cfg.data.train_limit {
        train = train.head(n);
    }
    if let Some(n) = cfg.data.test_limit {
        test = test.head(n);
    }
    if train.features() != cfg.model.inputs() {
        return Err(DwfError::Config(format!(
            "data has {} features but the model expects {}",
            train.features(),
            cfg.model.inputs()
        )));
    }
    Ok(Splits {
        train,
        val: (!val.is_empty()).then_some(val),
        test,
    })
}

fn test_accuracy(m: &DenseMlp, test: &Dataset) -> Result<f64> {
    Ok(m.evaluate(&test.inputs, &test.targets)?.1)
}

enum Trained {
    Factorized(FactorizedMlp),
    Dense(DenseMlp),
}

struct Fitted {
    model: Trained,
    sparse: DenseMlp,
    report: SparsityReport,
    traces: Vec<EpochTrace>,
}

fn fit(
    spec: &MlpSpec,
    method: TrainMethod,
    tc: &TrainConfig,
    data: &Splits,
) -> std::result::Result<Fitted, TrainError> {
    match method {
        TrainMethod::Dwf => train(spec, tc, &data.train, data.val.as_ref()).map(|o| Fitted {
            model: Trained::Factorized(o.model),
            sparse: o.sparse,
            report: o.report,
            traces: o.traces,
        }),
        TrainMethod::VanillaL1 => train_vanilla_l1(spec, tc, &data.train, data.val.as_ref()).map(|o| Fitted {
            model: Trained::Dense(o.model),
            sparse: o.sparse,
            report: o.report,
            traces: o.traces,
        }),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub method: TrainMethod,
    pub depth: usize,
    pub lambda: f64,
    pub epochs: usize,
    #[serde(serialize_with = "ser_f64")]
    pub test_acc: f64,
    #[serde(serialize_with = "ser_f64")]
    pub val_acc: f64,
    pub report: SparsityReport,
}

/// Trains one network and writes traces, checkpoints and the sparsity
/// report.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<(PathBuf, TrainSummary)> {
    cfg.validate()?;
    let data = load_splits(cfg, opts)?;
    let tc = cfg.train_config();
    let mut dir = RunDir::create(&opts.out, "train", cfg)?;
    let n_layers = cfg.model.num_layers();
    let out = match fit(&cfg.model, cfg.train.method, &tc, &data) {
        Ok(o) => o,
        Err(e) => {
            write_traces(&mut dir, "trace", &e.traces, n_layers)?;
            dir.finish()?;
            return Err(e.into());
        }
    };
    write_traces(&mut dir, "trace", &out.traces, n_layers)?;
    match &out.model {
        Trained::Factorized(m) => save_checkpoint(m, &dir.path().join("model.json"))?,
        Trained::Dense(m) => save_dense(m, &dir.path().join("model.json"))?,
    }
    dir.register("model.json")?;
    save_dense(&out.sparse, &dir.path().join("sparse_model.json"))?;
    dir.register("sparse_model.json")?;
    let summary = TrainSummary {
        method: cfg.train.method,
        depth: tc.depth,
        lambda: tc.lambda,
        epochs: tc.epochs,
        test_acc: test_accuracy(&out.sparse, &data.test)?,
        val_acc: out.traces.last().map_or(f64::NAN, |t| t.val_acc),
        report: out.report,
    };
    dir.write_json("report.json", &summary)?;
    Ok((dir.finish()?, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub depth: usize,
    pub lambda_index: usize,
    pub lambda: f64,
    pub seed: u64,
    pub status: String,
    #[serde(serialize_with = "ser_f64")]
    pub test_acc: f64,
    #[serde(serialize_with = "ser_f64")]
    pub cr: f64,
    #[serde(serialize_with = "ser_f64")]
    pub l2_collapsed: f64,
    #[serde(serialize_with = "ser_f64")]
    pub misalignment: f64,
    pub epochs_completed: usize,
    pub pareto: bool,
}

/// Marks rows not dominated in (accuracy, compression ratio) by any other
/// successful row.
pub fn pareto_flags(points: &[(f64, f64)], ok: &[bool]) -> Vec<bool> {
    (0..points.len())
        .map(|i| {
            ok[i]
                && !(0..points.len()).any(|j| {
                    let (a, b) = (points[i], points[j]);
                    j != i && ok[j] && b.0 >= a.0 && b.1 >= a.1 && (b.0 > a.0 || b.1 > a.1)
                })
        })
        .collect()
}

struct SweepResult {
    row: SweepRow,
    traces: Vec<EpochTrace>,
}

fn sweep_one(cfg: &ExperimentConfig, data: &Splits, depth: usize, index: usize, lambda: f64) -> SweepResult {
    let seed = derive_seed(cfg.seed, &[depth as u64, index as u64]);
    let base = cfg.train_config();
    let tc = TrainConfig {
        depth: if depth == 1 { base.depth } else { depth },
        lambda,
        seed,
        ..base
    };
    let mut row = SweepRow {
        depth,
        lambda_index: index,
        lambda,
        seed,
        status: "ok".into(),
        test_acc: f64::NAN,
        cr: f64::NAN,
        l2_collapsed: f64::NAN,
        misalignment: f64::NAN,
        epochs_completed: 0,
        pareto: false,
    };
    let traces = match fit(&cfg.model, cfg.train.method, &tc, data) {
        Ok(out) => match test_accuracy(&out.sparse, &data.test) {
            Ok(acc) => {
                row.test_acc = acc;
                row.cr = out.report.compression_ratio;
                row.l2_collapsed = out.report.collapsed_l2;
                row.misalignment = out.report.misalignment_total.unwrap_or(f64::NAN);
                out.traces
            }
            Err(e) => {
                row.status = format!("error: {e}");
                out.traces
            }
        },
        Err(e) => {
            row.status = format!("error: {}", e.error);
            e.traces
        }
    };
    row.epochs_completed = traces.len();
    SweepResult { row, traces }
}

fn run_rows<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Trains one network per `(depth, λ)` pair of the grid. Failed rows are
/// recorded and the sweep continues.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<(PathBuf, Vec<SweepRow>)> {
    cfg.validate()?;
    let grid = cfg.sweep.grid()?;
    if cfg.sweep.depths.is_empty() {
        return Err(DwfError::Config("sweep needs at least one depth".into()).into());
    }
    if cfg.sweep.depths.iter().any(|&d| d < 2) {
        return Err(DwfError::Config("sweep depths must be at least 2".into()).into());
    }
    let data = load_splits(cfg, opts)?;
    // Unfactorized rows are reported with depth 1.
    let depths = match cfg.train.method {
        TrainMethod::Dwf => cfg.sweep.depths.clone(),
        TrainMethod::VanillaL1 => vec![1],
    };
    let jobs: Vec<(usize, usize, f64)> = depths
        .iter()
        .flat_map(|&d| grid.iter().enumerate().map(move |(i, &l)| (d, i, l)))
        .collect();
    let mut results = run_rows(jobs.len(), |j| {
        let (d, i, l) = jobs[j];
        sweep_one(cfg, &data, d, i, l)
    });
    results.sort_by_key(|r| (r.row.depth, r.row.lambda_index));

    let points: Vec<(f64, f64)> = results.iter().map(|r| (r.row.test_acc, r.row.cr)).collect();
    let ok: Vec<bool> = results.iter().map(|r| r.row.status == "ok").collect();
    for (r, flag) in results.iter_mut().zip(pareto_flags(&points, &ok)) {
        r.row.pareto = flag;
    }

    let mut dir = RunDir::create(&opts.out, "sweep", cfg)?;
    let n_layers = cfg.model.num_layers();
    for r in &results {
        write_traces(
            &mut dir,
            &format!("traces/d{}_l{:02}", r.row.depth, r.row.lambda_index),
            &r.traces,
            n_layers,
        )?;
    }
    let rows: Vec<SweepRow> = results.into_iter().map(|r| r.row).collect();
    let header: Vec<String> = [
        "depth",
        "lambda_index",
        "lambda",
        "seed",
        "status",
        "test_acc",
        "cr",
        "l2_collapsed",
        "misalignment",
        "epochs_completed",
        "pareto",
    ]
    .map(String::from)
    .to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.depth.to_string(),
                r.lambda_index.to_string(),
                format_f64(r.lambda),
                r.seed.to_string(),
                r.status.clone(),
                format_f64(r.test_acc),
                format_f64(r.cr),
                format_f64(r.l2_collapsed),
                format_f64(r.misalignment),
                r.epochs_completed.to_string(),
                r.pareto.to_string(),
            ]
        })
        .collect();
    dir.write("sweep.csv", &csv_bytes(&header, &table)?)?;
    dir.write_json("sweep.json", &rows)?;
    Ok((dir.finish()?, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    pub method: String,
    pub cr_index: usize,
    pub cr_target: f64,
    #[serde(serialize_with = "ser_f64")]
    pub cr_achieved: f64,
    #[serde(serialize_with = "ser_f64")]
    pub test_acc: f64,
    /// Weight matrices with no nonzero entry left.
    pub collapsed_layers: usize,
    pub status: String,
}

fn collapsed_weight_layers(m: &DenseMlp) -> usize {
    m.params
        .weights
        .iter()
        .filter(|w| w.as_slice().iter().all(|v| *v == 0.0))
        .count()
}

fn prune_row(method: PruneMethod, cr_index: usize, cr_target: f64) -> PruneRow {
    PruneRow {
        method: method.name().into(),
        cr_index,
        cr_target,
        cr_achieved: f64::NAN,
        test_acc: f64::NAN,
        collapsed_layers: 0,
        status: "ok".into(),
    }
}

fn fill_row(row: &mut PruneRow, m: &DenseMlp, test: &Dataset) -> Result<()> {
    row.cr_achieved = sparsity_report(&m.params, None).compression_ratio;
    row.collapsed_layers = collapsed_weight_layers(m);
    row.test_acc = test_accuracy(m, test)?;
    Ok(())
}

fn save_mask(dir: &mut RunDir, name: &str, mask: &PruneMask) -> CliResult<()> {
    let path = dir.path().join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_mask(mask, &path)?;
    dir.register(name)?;
    Ok(())
}

fn error_status(e: &DwfError) -> String {
    match e {
        DwfError::LayerCollapse { layer } => format!("layer_collapse:{layer}"),
        e => format!("error: {e}"),
    }
}

/// Pruning baselines over a list of compression ratios. Dense training runs
/// once and is shared by the magnitude-based methods.
pub fn cmd_prune(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<(PathBuf, Vec<PruneRow>)> {
    cfg.validate()?;
    let ratios = cfg.prune.ratios()?;
    if ratios.iter().any(|r| !(*r >= 1.0)) || ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(DwfError::Config("compression ratios must be ascending and at least 1".into()).into());
    }
    let data = load_splits(cfg, opts)?;
    let tc = cfg.train_config();
    let n_layers = cfg.model.num_layers();
    let mut dir = RunDir::create(&opts.out, "prune", cfg)?;
    let mut rows = Vec::new();

    let needs_dense = cfg
        .prune
        .methods
        .iter()
        .any(|m| matches!(m, PruneMethod::Gmp | PruneMethod::Posthoc));
    let dense = if needs_dense {
        let out = train_dense(
            dense_init(&cfg.model, &tc)?,
            &tc,
            DenseRegularizer::None,
            None,
            &data.train,
            data.val.as_ref(),
        )?;
        write_traces(&mut dir, "traces/dense", &out.traces, n_layers)?;
        Some(out.model)
    } else {
        None
    };

    for &method in &cfg.prune.methods {
        match method {
            PruneMethod::Posthoc => {
                let trained = dense.as_ref().expect("dense model trained");
                let total = trained.params.total();
                let curve = posthoc_prune_curve(trained, &ratios, &data.test);
                for (i, &cr) in ratios.iter().enumerate() {
                    let mut row = prune_row(method, i, cr);
                    match &curve {
                        Ok(c) => {
                            row.cr_achieved = compression_ratio(total, c[i].kept);
                            row.collapsed_layers = c[i].collapsed_layers;
                            row.test_acc = c[i].accuracy;
                        }
                        Err(e) => row.status = error_status(e),
                    }
                    rows.push(row);
                }
            }
            PruneMethod::Gmp => {
                let trained = dense.as_ref().expect("dense model trained");
                let ft = TrainConfig {
                    epochs: cfg.prune.finetune_epochs,
                    ..tc.clone()
                };
                for (i, &cr) in ratios.iter().enumerate() {
                    let mut row = prune_row(method, i, cr);
                    let target = PruneTarget::CompressionRatio(cr);
                    match magnitude_prune_and_finetune(trained, target, &ft, DenseRegularizer::None, &data.train, data.val.as_ref()) {
                        Ok((mask, m, traces)) => {
                            save_mask(&mut dir, &format!("masks/gmp_cr{i:02}.bin"), &mask)?;
                            write_traces(&mut dir, &format!("traces/gmp_cr{i:02}"), &traces, n_layers)?;
                            fill_row(&mut row, &m, &data.test)?;
                        }
                        Err(e) => row.status = error_status(&e.error),
                    }
                    rows.push(row);
                }
            }
            PruneMethod::Random | PruneMethod::Snip | PruneMethod::Synflow => {
                let at_init = match method {
                    PruneMethod::Random => AtInitMethod::Random,
                    PruneMethod::Snip => AtInitMethod::Snip {
                        batch: cfg.prune.snip_batch,
                    },
                    _ => AtInitMethod::Synflow {
                        iterations: cfg.prune.synflow_iterations,
                    },
                };
                for (i, &cr) in ratios.iter().enumerate() {
                    let mut row = prune_row(method, i, cr);
                    let target = PruneTarget::CompressionRatio(cr);
                    match prune_at_init_and_train(&cfg.model, at_init, target, &tc, DenseRegularizer::None, &data.train, data.val.as_ref()) {
                        Ok((mask, out)) => {
                            save_mask(&mut dir, &format!("masks/{}_cr{i:02}.bin", method.name()), &mask)?;
                            write_traces(&mut dir, &format!("traces/{}_cr{i:02}", method.name()), &out.traces, n_layers)?;
                            fill_row(&mut row, &out.model, &data.test)?;
                        }
                        Err(e) => row.status = error_status(&e.error),
                    }
                    rows.push(row);
                }
            }
        }
    }

    let header: Vec<String> = [
        "method",
        "cr_index",
        "cr_target",
        "cr_achieved",
        "test_acc",
        "collapsed_layers",
        "status",
    ]
    .map(String::from)
    .to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.cr_index.to_string(),
                format_f64(r.cr_target),
                format_f64(r.cr_achieved),
                format_f64(r.test_acc),
                r.collapsed_layers.to_string(),
                r.status.clone(),
            ]
        })
        .collect();
    dir.write("prune.csv", &csv_bytes(&header, &table)?)?;
    dir.write_json("prune.json", &rows)?;
    Ok((dir.finish()?, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LassoRow {
    pub seed: usize,
    pub lambda_fraction: f64,
    pub lambda: f64,
    pub objective_cd: f64,
    pub objective_factorized: f64,
    /// `|obj_f − obj_cd| / (1 + |obj_cd|)`.
    pub gap: f64,
    pub support_match: bool,
    pub misalignment: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LassoSummary {
    pub rows: usize,
    pub converged: usize,
    pub max_gap: f64,
    pub max_gap_unpenalized: f64,
    /// Over converged rows with `λ > 0`; without a penalty the initial factor
    /// imbalance is conserved and misalignment need not vanish.
    pub max_misalignment_penalized: f64,
    pub support_agreement: usize,
}

/// Compares the factorized lasso against coordinate descent over seeded
/// synthetic problems.
pub fn cmd_lasso_verify(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<(PathBuf, LassoSummary, Vec<LassoRow>)> {
    cfg.validate()?;
    let l = &cfg.lasso;
    let eps = cfg.train.eps_tiny;
    let mut rows = Vec::new();
    for seed in 0..l.seeds {
        let mut rng = SeededRng::stream(cfg.seed, &[0x1A55, seed as u64]);
        let (ds, _) = synth_sparse_regression(l.n, l.p, l.k, l.noise_sigma, &mut rng)?;
        let y: Vec<f64> = match &ds.targets {
            dwf_core::data::Targets::Values(v) => v.as_slice().to_vec(),
            _ => unreachable!("regression targets"),
        };
        let lambda_max = lasso_lambda_max(&ds.inputs, &y);
        for &frac in &l.lambda_fractions {
            let lambda = frac * lambda_max;
            let cd = lasso_cd(&ds.inputs, &y, lambda, l.cd_tol, l.cd_max_iter)?;
            let fcfg = FactorizedLassoConfig {
                seed: derive_seed(l.factorized.seed, &[seed as u64]),
                ..l.factorized
            };
            let fit = dwf_core::metrics::factorized_lasso_train(&ds.inputs, &y, lambda, &fcfg)?;
            let obj_cd = lasso_objective(&ds.inputs, &y, &cd, lambda);
            let support = |w: &[f64]| w.iter().map(|v| v.abs() >= eps).collect::<Vec<_>>();
            rows.push(LassoRow {
                seed,
                lambda_fraction: frac,
                lambda,
                objective_cd: obj_cd,
                objective_factorized: fit.objective,
                gap: (fit.objective - obj_cd).abs() / (1.0 + obj_cd.abs()),
                support_match: support(&cd) == support(&fit.coefficients),
                misalignment: misalignment(&fit.factors),
                converged: fit.converged,
                iterations: fit.iterations,
            });
        }
    }
    let conv: Vec<&LassoRow> = rows.iter().filter(|r| r.converged).collect();
    let max_of = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);
    let summary = LassoSummary {
        rows: rows.len(),
        converged: conv.len(),
        max_gap: max_of(&mut conv.iter().map(|r| r.gap)),
        max_gap_unpenalized: max_of(&mut conv.iter().filter(|r| r.lambda == 0.0).map(|r| r.gap)),
        max_misalignment_penalized: max_of(&mut conv.iter().filter(|r| r.lambda > 0.0).map(|r| r.misalignment)),
        support_agreement: rows.iter().filter(|r| r.support_match).count(),
    };

    let mut dir = RunDir::create(&opts.out, "lasso-verify", cfg)?;
    let header: Vec<String> = [
        "seed",
        "lambda_fraction",
        "lambda",
        "objective_cd",
        "objective_factorized",
        "gap",
        "support_match",
        "misalignment",
        "converged",
        "iterations",
    ]
    .map(String::from)
    .to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                format_f64(r.lambda_fraction),
                format_f64(r.lambda),
                format_f64(r.objective_cd),
                format_f64(r.objective_factorized),
                format_f64(r.gap),
                r.support_match.to_string(),
                format_f64(r.misalignment),
                r.converged.to_string(),
                r.iterations.to_string(),
            ]
        })
        .collect();
    dir.write("lasso.csv", &csv_bytes(&header, &table)?)?;
    dir.write_json("lasso.json", &serde_json::json!({ "summary": summary, "rows": rows }))?;
    Ok((dir.finish()?, summary, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitStats {
    pub scheme: dwf_core::init::InitScheme,
    pub depth: usize,
    pub sigma_w: f64,
    pub n: usize,
    pub variance: f64,
    pub kurtosis: f64,
    pub min_abs: f64,
    pub max_abs: f64,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    /// Fraction of collapsed weights below `eps_tiny`.
    pub dead_fraction: f64,
    /// `‖ϖ‖_{2/D}^{2/D} / n`.
    pub mean_quasi_norm: f64,
}

/// Empirical statistics of `n` collapsed weights from one initialization.
pub fn init_stats(cfg: &ExperimentConfig) -> Result<InitStats> {
    let s = &cfg.init_stats;
    if s.n < 10_000 {
        return Err(DwfError::Config(format!("init-stats needs n ≥ 10000, got {}", s.n)));
    }
    if !(s.sigma_w > 0.0) {
        return Err(DwfError::Config(format!("sigma_w must be positive, got {}", s.sigma_w)));
    }
    let mut rng = SeededRng::stream(cfg.seed, &[0x1717]);
    let factors = sample_factors(s.sigma_w, &s.scheme, s.depth, s.n, &mut rng)?;
    let w: Vec<f64> = (0..s.n).map(|j| factors.iter().map(|f| f[j]).product()).collect();
    let abs = w.iter().map(|v| v.abs());
    Ok(InitStats {
        scheme: s.scheme,
        depth: s.depth,
        sigma_w: s.sigma_w,
        n: s.n,
        variance: variance(&w),
        kurtosis: kurtosis(&w),
        min_abs: abs.clone().fold(f64::INFINITY, f64::min),
        max_abs: abs.fold(0.0, f64::max),
        ks_statistic: ks_normal_statistic(&w, 0.0, s.sigma_w),
        ks_pvalue: ks_normal_pvalue(&w, 0.0, s.sigma_w),
        dead_fraction: w.iter().filter(|v| v.abs() < cfg.train.eps_tiny).count() as f64 / s.n as f64,
        mean_quasi_norm: quasi_norm_values(&w, s.depth) / s.n as f64,
    })
}

pub fn cmd_init_stats(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<(PathBuf, InitStats)> {
    cfg.validate()?;
    let stats = init_stats(cfg)?;
    let mut dir = RunDir::create(&opts.out, "init-stats", cfg)?;
    dir.write_json("init_stats.json", &stats)?;
    Ok((dir.finish()?, stats))
}
