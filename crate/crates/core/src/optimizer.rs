//! SGD training of factorized and dense networks.
//!
//! The factorized trainer minimizes the data loss plus `(λ/D) Σ_d ‖ω_d‖²` with
//! heavy-ball momentum, collapses the factors at the end and zeroes collapsed
//! weights below `eps_tiny`. The dense trainer shares the epoch loop and is
//! used for the vanilla-L1 comparison and the pruning baselines.

use serde::{Deserialize, Serialize};

use crate::data::{Batcher, Dataset, Targets};
use crate::error::{DwfError, Result};
use crate::factorization::FactorizedParam;
use crate::init::{InitScheme, VarianceRule};
use crate::metrics::{de_f64, de_f64_vec, ser_f64, ser_f64_vec, sparsity_report, SparsityReport};
use crate::model::{
    accuracy, collapse_model, loss_and_grads_with_logits, DenseMlp, DenseParams, FactorGrads,
    FactorizedMlp, MlpSpec,
};
use crate::ndcore::{derive_seed, DenseMatrix, SeededRng};
use crate::pruning::PruneMask;

/// Single-precision machine epsilon, the default collapse threshold.
pub const FLOAT32_EPSILON: f64 = f32::EPSILON as f64;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        eta0: f64,
    },
    /// Multiplies the rate by `gamma` at each milestone epoch (0-based).
    StepDecay {
        eta0: f64,
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// `½ η₀ (1 + cos(π t / T))` per step. `total_steps` defaults to the
    /// length of the run.
    Cosine {
        eta0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        total_steps: Option<usize>,
    },
    /// Cosine annealing held constant within each epoch:
    /// `½ η₀ (1 + cos(π e / E))` for epoch `e` of `E`.
    CosineEpoch {
        eta0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        total_epochs: Option<usize>,
    },
}

impl LrSchedule {
    pub fn eta0(&self) -> f64 {
        match *self {
            LrSchedule::Constant { eta0 }
            | LrSchedule::StepDecay { eta0, .. }
            | LrSchedule::Cosine { eta0, .. }
            | LrSchedule::CosineEpoch { eta0, .. } => eta0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eta0 = self.eta0();
        if !(eta0 > 0.0) || !eta0.is_finite() {
            return Err(DwfError::Config(format!("eta0 must be positive, got {eta0}")));
        }
        match self {
            LrSchedule::StepDecay {
                milestones, gamma, ..
            } => {
                if !(*gamma > 0.0 && *gamma < 1.0) {
                    return Err(DwfError::Config(format!("gamma must lie in (0, 1), got {gamma}")));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(DwfError::Config("milestones must be strictly increasing".into()));
                }
            }
            LrSchedule::Cosine {
                total_steps: Some(0),
                ..
            } => return Err(DwfError::Config("cosine total_steps must be positive".into())),
            LrSchedule::CosineEpoch {
                total_epochs: Some(0),
                ..
            } => return Err(DwfError::Config("cosine total_epochs must be positive".into())),
            _ => {}
        }
        Ok(())
    }

    /// Fills in the cosine horizon if it was left open.
    pub fn resolved(&self, epochs: usize, steps_per_epoch: usize) -> LrSchedule {
        let total_steps = epochs * steps_per_epoch;
        match self {
            LrSchedule::CosineEpoch {
                eta0,
                total_epochs: None,
            } => LrSchedule::CosineEpoch {
                eta0: *eta0,
                total_epochs: Some(epochs.max(1)),
            },
            LrSchedule::Cosine {
                eta0,
                total_steps: None,
            } => LrSchedule::Cosine {
                eta0: *eta0,
                total_steps: Some(total_steps.max(1)),
            },
            other => other.clone(),
        }
    }
}

/// Learning rate at optimizer step `t`. Steps past the cosine horizon use
/// the final value.
pub fn lr_at(s: &LrSchedule, t: usize, steps_per_epoch: usize) -> f64 {
    match s {
        LrSchedule::Constant { eta0 } => *eta0,
        LrSchedule::StepDecay {
            eta0,
            milestones,
            gamma,
        } => {
            let epoch = t / steps_per_epoch.max(1);
            let passed = milestones.iter().filter(|&&m| m <= epoch).count();
            eta0 * gamma.powi(passed as i32)
        }
        LrSchedule::Cosine { eta0, total_steps } => {
            let horizon = total_steps.unwrap_or(t.max(1)).max(1);
            let t = t.min(horizon) as f64;
            0.5 * eta0 * (1.0 + (std::f64::consts::PI * t / horizon as f64).cos())
        }
        LrSchedule::CosineEpoch { eta0, total_epochs } => {
            let epoch = t / steps_per_epoch.max(1);
            let horizon = total_epochs.unwrap_or(epoch.max(1)).max(1);
            let e = epoch.min(horizon) as f64;
            0.5 * eta0 * (1.0 + (std::f64::consts::PI * e / horizon as f64).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub depth: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub init: InitScheme,
    pub variance_rule: VarianceRule,
    pub seed: u64,
    pub eps_tiny: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            lambda: 0.0,
            epochs: 30,
            batch_size: 256,
            momentum: 0.9,
            schedule: LrSchedule::Cosine {
                eta0: 0.15,
                total_steps: None,
            },
            init: InitScheme::default(),
            variance_rule: VarianceRule::Kaiming,
            seed: 0,
            eps_tiny: FLOAT32_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(DwfError::Config(format!(
                "factorization depth must be at least 2, got {}",
                self.depth
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(DwfError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(DwfError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DwfError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.eps_tiny > 0.0) {
            return Err(DwfError::Config(format!("eps_tiny must be positive, got {}", self.eps_tiny)));
        }
        self.schedule.validate()?;
        self.init.validate()
    }
}

/// Metrics recorded at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    /// 1-based.
    pub epoch: usize,
    /// Rate used for the epoch's first step.
    pub lr: f64,
    /// Running means over the epoch's minibatches, before each update.
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub train_loss: f64,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub train_acc: f64,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub val_acc: f64,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub cr: f64,
    pub l2_collapsed: f64,
    pub misalignment: f64,
    #[serde(serialize_with = "ser_f64_vec", deserialize_with = "de_f64_vec")]
    pub misalignment_per_layer: Vec<f64>,
    #[serde(serialize_with = "ser_f64_vec", deserialize_with = "de_f64_vec")]
    pub cr_per_layer: Vec<f64>,
}

impl EpochTrace {
    fn from_report(
        epoch: usize,
        lr: f64,
        train_loss: f64,
        train_acc: f64,
        val_acc: f64,
        report: &SparsityReport,
    ) -> Self {
        let n_layers = report.layers.len();
        Self {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_acc,
            cr: report.compression_ratio,
            l2_collapsed: report.collapsed_l2,
            misalignment: report.misalignment_total.unwrap_or(0.0),
            misalignment_per_layer: report
                .misalignment_per_layer_normalized
                .clone()
                .unwrap_or_else(|| vec![0.0; n_layers]),
            cr_per_layer: report.layers.iter().map(|l| l.cr).collect(),
        }
    }
}

/// A failed run together with the epochs that completed before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainError {
    pub error: DwfError,
    pub traces: Vec<EpochTrace>,
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} epochs)", self.error, self.traces.len())
    }
}

impl std::error::Error for TrainError {}

impl From<DwfError> for TrainError {
    fn from(error: DwfError) -> Self {
        Self {
            error,
            traces: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: FactorizedMlp,
    /// Collapsed and thresholded parameters of `model`.
    pub sparse: DenseMlp,
    pub report: SparsityReport,
    pub traces: Vec<EpochTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrainOutcome {
    pub model: DenseMlp,
    /// `model` with entries below `eps_tiny` set to zero.
    pub sparse: DenseMlp,
    pub report: SparsityReport,
    pub traces: Vec<EpochTrace>,
}

/// Momentum buffers aligned with a factorized model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    velocity: FactorGrads,
}

impl MomentumState {
    pub fn new(m: &FactorizedMlp) -> Self {
        Self {
            velocity: m
                .params()
                .iter()
                .map(|p| vec![vec![0.0; p.len()]; p.depth()])
                .collect(),
        }
    }
}

/// Updates every factor of `p` from its pre-step value:
/// `v ← μv + g_d + (2λ/D) ω_d`, `ω_d ← ω_d − η v`.
pub fn sgd_update_param(
    p: &mut FactorizedParam,
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    lambda: f64,
    momentum: f64,
) {
    let decay = 2.0 * lambda / p.depth() as f64;
    for ((f, g), v) in p.factors_mut().iter_mut().zip(grads).zip(velocity) {
        for ((w, &gj), vj) in f.iter_mut().zip(g).zip(v.iter_mut()) {
            *vj = momentum * *vj + gj + decay * *w;
            *w -= lr * *vj;
        }
    }
}

pub fn sgd_step(
    m: &mut FactorizedMlp,
    grads: &FactorGrads,
    state: &mut MomentumState,
    lr: f64,
    lambda: f64,
    momentum: f64,
    step: usize,
) -> Result<()> {
    if grads.len() != m.params().len() {
        return Err(DwfError::Shape(format!(
            "{} gradient entries for {} parameters",
            grads.len(),
            m.params().len()
        )));
    }
    for ((p, g), v) in m
        .params_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut())
    {
        sgd_update_param(p, g, v, lr, lambda, momentum);
        if p.factors().iter().any(|f| f.iter().any(|w| !w.is_finite())) {
            return Err(DwfError::Diverged { step });
        }
    }
    Ok(())
}

/// Collapsed parameters with every `|ϖ_j| < eps_tiny` set to exactly zero.
pub fn collapse_and_threshold(m: &FactorizedMlp, eps_tiny: f64) -> DenseMlp {
    let mut d = collapse_model(m);
    threshold_params(&mut d.params, eps_tiny);
    d
}

pub fn threshold_params(params: &mut DenseParams, eps_tiny: f64) {
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            if v.abs() < eps_tiny {
                *v = 0.0;
            }
        }
    }
}

fn mean_accuracy(model: &DenseMlp, ds: Option<&Dataset>) -> Result<f64> {
    match ds {
        Some(ds) if !ds.is_empty() => Ok(model.evaluate(&ds.inputs, &ds.targets)?.1),
        _ => Ok(f64::NAN),
    }
}

/// Shared epoch loop. `step` performs one update on a minibatch and returns
/// the pre-update loss and logits; `snapshot` returns the thresholded model
/// and its report at the end of an epoch.
fn run_epochs(
    cfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    mut step: impl FnMut(&DenseMatrix, &Targets, f64, usize) -> Result<(f64, DenseMatrix)>,
    mut snapshot: impl FnMut() -> (DenseMlp, SparsityReport),
) -> std::result::Result<Vec<EpochTrace>, TrainError> {
    if train.is_empty() {
        return Err(DwfError::Config("training set is empty".into()).into());
    }
    let batcher = Batcher::new(train.len(), cfg.batch_size.min(train.len()))?;
    let steps_per_epoch = batcher.batches_per_epoch();
    let schedule = cfg.schedule.resolved(cfg.epochs, steps_per_epoch);
    let mut shuffle = SeededRng::stream(cfg.seed, &[SHUFFLE_STREAM]);
    let mut traces = Vec::with_capacity(cfg.epochs);
    let mut t = 0;
    for epoch in 1..=cfg.epochs {
        let epoch_lr = lr_at(&schedule, t, steps_per_epoch);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0.0, 0usize);
        for idx in batcher.epoch(&mut shuffle) {
            let x = train.inputs.gather_rows(&idx);
            let y = train.targets.gather(&idx);
            let lr = lr_at(&schedule, t, steps_per_epoch);
            let (loss, logits) = match step(&x, &y, lr, t) {
                Ok(v) => v,
                Err(error) => return Err(TrainError { error, traces }),
            };
            loss_sum += loss * idx.len() as f64;
            if let Targets::Classes(c) = &y {
                hits += accuracy(&logits, c) * idx.len() as f64;
            }
            seen += idx.len();
            t += 1;
        }
        let train_loss = loss_sum / seen as f64;
        if !train_loss.is_finite() {
            return Err(TrainError {
                error: DwfError::Diverged { step: t },
                traces,
            });
        }
        let train_acc = match train.targets {
            Targets::Classes(_) => hits / seen as f64,
            Targets::Values(_) => f64::NAN,
        };
        let (sparse, report) = snapshot();
        let val_acc = match mean_accuracy(&sparse, val) {
            Ok(v) => v,
            Err(error) => return Err(TrainError { error, traces }),
        };
        traces.push(EpochTrace::from_report(
            epoch, epoch_lr, train_loss, train_acc, val_acc, &report,
        ));
        log::debug!(
            "epoch {epoch}: loss {train_loss:.4} acc {train_acc:.4} val {val_acc:.4} cr {:.2}",
            report.compression_ratio
        );
    }
    Ok(traces)
}

/// Initializes a factorized network from `cfg` and trains it.
pub fn train(
    spec: &MlpSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model = FactorizedMlp::init(
        spec.clone(),
        cfg.depth,
        &cfg.init,
        cfg.variance_rule,
        derive_seed(cfg.seed, &[INIT_STREAM]),
    )?;
    train_from(model, cfg, train_set, val_set)
}

/// Trains an existing factorized network with the settings in `cfg`
/// (its `depth`, `init` and `variance_rule` are ignored).
pub fn train_from(
    mut model: FactorizedMlp,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut state = MomentumState::new(&model);
    let model_cell = std::cell::RefCell::new(&mut model);
    let traces = run_epochs(
        cfg,
        train_set,
        val_set,
        |x, y, lr, t| {
            let mut m = model_cell.borrow_mut();
            let (loss, logits, grads) = loss_and_grads_with_logits(&m, x, y)?;
            sgd_step(&mut m, &grads, &mut state, lr, cfg.lambda, cfg.momentum, t)?;
            Ok((loss, logits))
        },
        || {
            let m = model_cell.borrow();
            let sparse = collapse_and_threshold(&m, cfg.eps_tiny);
            let report = sparsity_report(&sparse.params, Some(&m));
            (sparse, report)
        },
    )?;
    let sparse = collapse_and_threshold(&model, cfg.eps_tiny);
    let report = sparsity_report(&sparse.params, Some(&model));
    Ok(TrainOutcome {
        model,
        sparse,
        report,
        traces,
    })
}

/// Penalty added to the dense training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lambda", rename_all = "snake_case")]
pub enum DenseRegularizer {
    None,
    /// `λ‖w‖₁` with subgradient `λ·sign(w)` and `sign(0) = 0`.
    L1(f64),
    /// `λ‖w‖²`.
    L2(f64),
}

/// Kaiming-initialized dense network for the seed in `cfg`.
pub fn dense_init(spec: &MlpSpec, cfg: &TrainConfig) -> Result<DenseMlp> {
    DenseMlp::init_kaiming(spec.clone(), derive_seed(cfg.seed, &[INIT_STREAM]))
}

/// Dense SGD with momentum from `init`. With a mask, dropped entries and
/// their gradients are held at exactly zero throughout.
pub fn train_dense(
    init: DenseMlp,
    cfg: &TrainConfig,
    reg: DenseRegularizer,
    mask: Option<&PruneMask>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> std::result::Result<DenseTrainOutcome, TrainError> {
    cfg.schedule.validate()?;
    if !(0.0..1.0).contains(&cfg.momentum) || cfg.batch_size == 0 || !(cfg.eps_tiny > 0.0) {
        return Err(DwfError::Config("invalid momentum, batch size or eps_tiny".into()).into());
    }
    let mut model = init;
    if let Some(mask) = mask {
        mask.check_aligned(&model.params)?;
        mask.apply(&mut model.params);
    }
    let mut velocity = DenseParams::zeros(&model.spec);
    let model_cell = std::cell::RefCell::new(&mut model);
    let traces = run_epochs(
        cfg,
        train_set,
        val_set,
        |x, y, lr, t| {
            let mut m = model_cell.borrow_mut();
            let (loss, logits, mut grads) = m.loss_and_grads(x, y)?;
            if let Some(mask) = mask {
                mask.apply(&mut grads);
            }
            for ((w, g), v) in m
                .params
                .slices_mut()
                .into_iter()
                .zip(grads.slices())
                .zip(velocity.slices_mut())
            {
                for ((wj, &gj), vj) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    let penalty = match reg {
                        DenseRegularizer::None => 0.0,
                        DenseRegularizer::L1(l) => {
                            if *wj > 0.0 {
                                l
                            } else if *wj < 0.0 {
                                -l
                            } else {
                                0.0
                            }
                        }
                        DenseRegularizer::L2(l) => 2.0 * l * *wj,
                    };
                    *vj = cfg.momentum * *vj + gj + penalty;
                    *wj -= lr * *vj;
                }
            }
            if let Some(mask) = mask {
                mask.apply(&mut m.params);
            }
            if !m.params.all_finite() {
                return Err(DwfError::Diverged { step: t });
            }
            Ok((loss, logits))
        },
        || {
            let m = model_cell.borrow();
            let mut sparse = (*m).clone();
            threshold_params(&mut sparse.params, cfg.eps_tiny);
            let report = sparsity_report(&sparse.params, None);
            (sparse, report)
        },
    )?;
    let mut sparse = model.clone();
    threshold_params(&mut sparse.params, cfg.eps_tiny);
    let report = sparsity_report(&sparse.params, None);
    Ok(DenseTrainOutcome {
        model,
        sparse,
        report,
        traces,
    })
}

/// Unfactorized training with an L1 subgradient penalty `cfg.lambda·‖w‖₁`
/// on every weight and bias.
pub fn train_vanilla_l1(
    spec: &MlpSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> std::result::Result<DenseTrainOutcome, TrainError> {
    let init = dense_init(spec, cfg)?;
    train_dense(init, cfg, DenseRegularizer::L1(cfg.lambda), None, train_set, val_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::factorization::{balanced_factorize, collapse, CollapsedParam};
    use crate::model::{Activation, LossKind};

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let mut x = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { -2.0 } else { 2.0 };
            x.push(center + 0.5 * rng.normal());
            x.push(0.5 * rng.normal());
            y.push(c);
        }
        Dataset::new(
            DenseMatrix::from_vec(n, 2, x).unwrap(),
            Targets::Classes(y),
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn cosine_schedule_points() {
        let s = LrSchedule::Cosine {
            eta0: 0.2,
            total_steps: Some(100),
        };
        assert_eq!(lr_at(&s, 0, 10), 0.2);
        assert!(lr_at(&s, 100, 10).abs() < 1e-15);
        assert!((lr_at(&s, 50, 10) - 0.1).abs() < 1e-15);
        assert!(lr_at(&s, 150, 10).abs() < 1e-15);
    }

    #[test]
    fn per_epoch_cosine_is_flat_within_epochs() {
        let s = LrSchedule::CosineEpoch {
            eta0: 0.2,
            total_epochs: None,
        }
        .resolved(4, 10);
        assert_eq!(lr_at(&s, 0, 10), 0.2);
        assert_eq!(lr_at(&s, 9, 10), 0.2);
        assert!((lr_at(&s, 20, 10) - 0.1).abs() < 1e-15);
        // The last epoch keeps a positive rate.
        let last = lr_at(&s, 39, 10);
        assert!((last - 0.1 * (1.0 + (0.75 * std::f64::consts::PI).cos())).abs() < 1e-15);
        assert!(last > 0.01);
    }

    #[test]
    fn step_and_constant_schedules() {
        let s = LrSchedule::StepDecay {
            eta0: 1.0,
            milestones: vec![2, 4],
            gamma: 0.1,
        };
        assert_eq!(lr_at(&s, 0, 5), 1.0);
        assert_eq!(lr_at(&s, 9, 5), 1.0);
        assert!((lr_at(&s, 10, 5) - 0.1).abs() < 1e-15);
        assert!((lr_at(&s, 20, 5) - 0.01).abs() < 1e-15);
        assert_eq!(lr_at(&LrSchedule::Constant { eta0: 0.3 }, 1000, 5), 0.3);
        let bad = LrSchedule::StepDecay {
            eta0: 1.0,
            milestones: vec![3, 3],
            gamma: 0.5,
        };
        assert!(bad.validate().is_err());
        assert!(LrSchedule::Constant { eta0: 0.0 }.validate().is_err());
    }

    #[test]
    fn plain_sgd_on_a_scalar_quadratic() {
        // ½(ω − 3)² from ω = 0 with η = 0.1: one step lands on 0.3.
        let mut p = FactorizedParam::vector(vec![vec![0.0], vec![1.0]]).unwrap();
        let g = vec![vec![0.0 - 3.0], vec![0.0]];
        let mut v = vec![vec![0.0], vec![0.0]];
        sgd_update_param(&mut p, &g, &mut v, 0.1, 0.0, 0.0);
        assert!((p.factors()[0][0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn balanced_step_descends_the_quasi_norm_objective() {
        // Scalar data loss ½(w − 3)² with penalty λ|w|^(2/D) at balance.
        for depth in 2..=4 {
            for &(w0, lambda) in &[(0.5, 0.1), (2.0, 5.0), (-1.0, 0.3), (3.5, 0.01)] {
                let mut p = balanced_factorize(&CollapsedParam::vector(vec![w0]), depth).unwrap();
                let gw = w0 - 3.0;
                let grads = crate::factorization::factor_gradients(&[gw], &p).unwrap();
                let mut v = vec![vec![0.0]; depth];
                sgd_update_param(&mut p, &grads, &mut v, 1e-3, lambda, 0.0);
                let w1 = collapse(&p).values[0];
                let dj = gw + lambda * (2.0 / depth as f64) * w0.abs().powf(2.0 / depth as f64 - 1.0) * w0.signum();
                assert_eq!((w1 - w0).signum(), -dj.signum(), "depth {depth} w0 {w0}");
            }
        }
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let ds = blobs(64, 1);
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity, LossKind::SoftmaxCrossEntropy).unwrap();
        let cfg = TrainConfig {
            depth: 2,
            epochs: 30,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&spec, &cfg, &ds, Some(&ds)).unwrap();
        assert_eq!(out.traces.last().unwrap().train_acc, 1.0);
        assert_eq!(out.traces.last().unwrap().val_acc, 1.0);
    }

    #[test]
    fn strong_penalty_collapses_the_model() {
        let ds = blobs(64, 2);
        let spec = MlpSpec::new(vec![2, 8, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
        let cfg = TrainConfig {
            depth: 3,
            lambda: 0.5,
            epochs: 40,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&spec, &cfg, &ds, Some(&ds)).unwrap();
        assert!(out.report.compression_ratio > 10.0, "{}", out.report.compression_ratio);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let ds = blobs(40, 3);
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
        let cfg = TrainConfig {
            lambda: 1e-3,
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train(&spec, &cfg, &ds, Some(&ds)).unwrap();
        let b = train(&spec, &cfg, &ds, Some(&ds)).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn full_batch_linear_regression_loss_is_non_increasing() {
        let (ds, _) =
            crate::data::synth_sparse_regression(40, 5, 3, 0.1, &mut SeededRng::new(4)).unwrap();
        let spec = MlpSpec::new(vec![5, 1], Activation::Identity, LossKind::MeanSquaredError).unwrap();
        let cfg = TrainConfig {
            depth: 2,
            epochs: 60,
            batch_size: 40,
            momentum: 0.0,
            schedule: LrSchedule::Constant { eta0: 0.01 },
            init: InitScheme::VarMatch,
            ..TrainConfig::default()
        };
        let out = train(&spec, &cfg, &ds, None).unwrap();
        for w in out.traces.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss * (1.0 + 1e-12));
        }
        assert!(out.traces.last().unwrap().train_loss < out.traces[0].train_loss);
    }

    #[test]
    fn vanilla_l1_without_penalty_matches_plain_dense_training() {
        let ds = blobs(40, 5);
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let l1 = train_vanilla_l1(&spec, &cfg, &ds, None).unwrap();
        let plain = train_dense(
            dense_init(&spec, &cfg).unwrap(),
            &cfg,
            DenseRegularizer::None,
            None,
            &ds,
            None,
        )
        .unwrap();
        assert_eq!(l1.model, plain.model);
        // val_acc is NaN without a validation set, so compare serialized forms.
        let text = serde_json::to_string(&l1.traces).unwrap();
        assert_eq!(text, serde_json::to_string(&plain.traces).unwrap());
        assert!(text.contains(r#""val_acc":"nan""#));
        let back: Vec<EpochTrace> = serde_json::from_str(&text).unwrap();
        assert!(back[0].val_acc.is_nan());
        assert_eq!(back[2].train_loss, l1.traces[2].train_loss);
    }

    #[test]
    fn threshold_examples() {
        let spec = MlpSpec::new(vec![1, 2], Activation::Identity, LossKind::MeanSquaredError).unwrap();
        let mut m = FactorizedMlp::init(spec, 2, &InitScheme::VarMatch, VarianceRule::LeCun, 0).unwrap();
        let vals = [1e-9, 0.5];
        for (j, v) in vals.iter().enumerate() {
            let f = m.params_mut()[0].factors_mut();
            f[0][j] = *v;
            f[1][j] = 1.0;
        }
        let d = collapse_and_threshold(&m, FLOAT32_EPSILON);
        assert_eq!(d.params.weights[0].as_slice(), &[0.0, 0.5]);
        for p in m.params_mut() {
            for f in p.factors_mut() {
                f.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let z = collapse_and_threshold(&m, FLOAT32_EPSILON);
        assert!(sparsity_report(&z.params, Some(&m)).compression_ratio.is_infinite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = blobs(8, 6);
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity, LossKind::SoftmaxCrossEntropy).unwrap();
        for cfg in [
            TrainConfig { depth: 1, ..TrainConfig::default() },
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { eps_tiny: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&spec, &cfg, &ds, None), Err(TrainError { error: DwfError::Config(_), .. })));
        }
        let empty = ds.head(0);
        assert!(train(&spec, &TrainConfig::default(), &empty, None).is_err());
    }

    #[test]
    fn divergence_reports_partial_traces() {
        let ds = blobs(32, 7);
        let spec = MlpSpec::new(vec![2, 16, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
        let cfg = TrainConfig {
            depth: 2,
            epochs: 50,
            batch_size: 8,
            schedule: LrSchedule::Constant { eta0: 1e6 },
            init: InitScheme::VarMatch,
            ..TrainConfig::default()
        };
        let err = train(&spec, &cfg, &ds, None).unwrap_err();
        assert!(matches!(
            err.error,
            DwfError::Diverged { .. } | DwfError::Numeric { .. }
        ));
    }
}
