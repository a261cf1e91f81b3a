//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dwf_core::init::{InitScheme, VarianceRule};
use dwf_core::metrics::FactorizedLassoConfig;
use dwf_core::model::MlpSpec;
use dwf_core::optimizer::{LrSchedule, TrainConfig, FLOAT32_EPSILON};
use dwf_core::pruning::{SNIP_BATCH, SYNFLOW_ITERATIONS};
use dwf_core::{DwfError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 30 epochs.
    #[default]
    Ci,
    /// 75 epochs.
    Paper,
}

impl Profile {
    pub fn epochs(self) -> usize {
        match self {
            Profile::Ci => 30,
            Profile::Paper => 75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub profile: Profile,
    pub model: MlpSpec,
    pub train: TrainSection,
    pub data: DataSection,
    pub sweep: SweepSection,
    pub prune: PruneSection,
    pub lasso: LassoSection,
    pub init_stats: InitStatsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            profile: Profile::Ci,
            model: MlpSpec::lenet_300_100(),
            train: TrainSection::default(),
            data: DataSection::default(),
            sweep: SweepSection::default(),
            prune: PruneSection::default(),
            lasso: LassoSection::default(),
            init_stats: InitStatsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Factorized weights with an L2 penalty on the factors.
    #[default]
    Dwf,
    /// Plain weights with an L1 subgradient penalty; `depth` is ignored.
    VanillaL1,
}

/// Training hyperparameters; `epochs` falls back to the profile's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: TrainMethod,
    pub depth: usize,
    pub lambda: f64,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub init: InitScheme,
    pub variance_rule: VarianceRule,
    pub eps_tiny: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: TrainMethod::Dwf,
            depth: 3,
            lambda: 0.0,
            epochs: None,
            batch_size: 256,
            momentum: 0.9,
            schedule: LrSchedule::Cosine {
                eta0: 0.15,
                total_steps: None,
            },
            init: InitScheme::default(),
            variance_rule: VarianceRule::Kaiming,
            eps_tiny: FLOAT32_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX files with the standard MNIST names. The directory comes from
    /// `--data-dir`, then this field, then `DWF_DATA_DIR`.
    Idx {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// Gaussian clusters, split into train and test by sample count.
    Blobs {
        train: usize,
        test: usize,
        features: usize,
        classes: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Fraction of the training file held out for validation.
    pub val_fraction: f64,
    /// Use only the first `n` training (after the split) or test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Idx { dir: None },
            val_fraction: 0.1,
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub count: usize,
    pub depths: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambda_min: 1e-6,
            lambda_max: 1e-1,
            count: 12,
            depths: vec![2, 3, 4],
        }
    }
}

impl SweepSection {
    pub fn grid(&self) -> Result<Vec<f64>> {
        log_grid(self.lambda_min, self.lambda_max, self.count)
    }
}

/// `count` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 || !(lo > 0.0) || !(hi > lo) {
        return Err(DwfError::Config(format!(
            "grid needs 0 < lo < hi and at least two points (got {lo}, {hi}, {count})"
        )));
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..count)
        .map(|i| match i {
            0 => lo,
            i if i == count - 1 => hi,
            i => 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    /// Magnitude pruning after dense training, then masked fine-tuning.
    Gmp,
    Random,
    Snip,
    Synflow,
    /// Magnitude pruning after dense training without fine-tuning.
    Posthoc,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Gmp => "gmp",
            PruneMethod::Random => "random",
            PruneMethod::Snip => "snip",
            PruneMethod::Synflow => "synflow",
            PruneMethod::Posthoc => "posthoc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub methods: Vec<PruneMethod>,
    /// Defaults to 15 log-spaced ratios from 10 to 10⁵.
    pub compression_ratios: Option<Vec<f64>>,
    pub finetune_epochs: usize,
    pub synflow_iterations: usize,
    pub snip_batch: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            methods: vec![
                PruneMethod::Gmp,
                PruneMethod::Random,
                PruneMethod::Snip,
                PruneMethod::Synflow,
                PruneMethod::Posthoc,
            ],
            compression_ratios: None,
            finetune_epochs: 10,
            synflow_iterations: SYNFLOW_ITERATIONS,
            snip_batch: SNIP_BATCH,
        }
    }
}

impl PruneSection {
    pub fn ratios(&self) -> Result<Vec<f64>> {
        match &self.compression_ratios {
            Some(r) => Ok(r.clone()),
            None => log_grid(10.0, 1e5, 15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassoSection {
    pub seeds: usize,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub noise_sigma: f64,
    /// Penalties as fractions of `λ_max = 2‖Xᵀy‖_∞`, the smallest value
    /// with an all-zero solution.
    pub lambda_fractions: Vec<f64>,
    pub cd_tol: f64,
    pub cd_max_iter: usize,
    pub factorized: FactorizedLassoConfig,
}

impl Default for LassoSection {
    fn default() -> Self {
        Self {
            seeds: 20,
            n: 50,
            p: 10,
            k: 3,
            noise_sigma: 0.1,
            lambda_fractions: vec![0.0, 0.05, 0.2, 0.5],
            cd_tol: 1e-13,
            cd_max_iter: 1_000_000,
            factorized: FactorizedLassoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitStatsSection {
    pub scheme: InitScheme,
    pub depth: usize,
    pub sigma_w: f64,
    pub n: usize,
}

impl Default for InitStatsSection {
    fn default() -> Self {
        Self {
            scheme: InitScheme::default(),
            depth: 3,
            sigma_w: 0.05,
            n: 100_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| DwfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DwfError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train_config().validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(DwfError::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.data.val_fraction
            )));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.train.epochs.unwrap_or(self.profile.epochs())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            depth: t.depth,
            lambda: t.lambda,
            epochs: self.epochs(),
            batch_size: t.batch_size,
            momentum: t.momentum,
            schedule: t.schedule.clone(),
            init: t.init,
            variance_rule: t.variance_rule,
            seed: self.seed,
            eps_tiny: t.eps_tiny,
        }
    }

    /// Canonical JSON text, the basis of the run directory hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
