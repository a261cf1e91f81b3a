//! Pruning baselines: global magnitude, random, SNIP and SynFlow masks,
//! masked retraining and post-hoc magnitude curves.
//!
//! Masks cover every weight and bias, in the canonical parameter order
//! `W_0, b_0, W_1, b_1, …`, and targets count both.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{DwfError, Result};
use crate::model::{DenseMlp, DenseParams};
use crate::ndcore::{matmul, matmul_nt, matmul_tn, DenseMatrix, SeededRng};
use crate::optimizer::{
    dense_init, train_dense, DenseRegularizer, DenseTrainOutcome, EpochTrace, TrainConfig, TrainError,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PruneTarget {
    CompressionRatio(f64),
    Sparsity(f64),
}

impl PruneTarget {
    pub fn compression_ratio(&self) -> f64 {
        match *self {
            PruneTarget::CompressionRatio(cr) => cr,
            PruneTarget::Sparsity(s) => 1.0 / (1.0 - s),
        }
    }

    pub fn sparsity(&self) -> f64 {
        match *self {
            PruneTarget::CompressionRatio(cr) => 1.0 - 1.0 / cr,
            PruneTarget::Sparsity(s) => s,
        }
    }

    /// Number of entries kept out of `total`: `round(total / cr)`.
    pub fn keep_count(&self, total: usize) -> Result<usize> {
        match *self {
            PruneTarget::CompressionRatio(cr) if !(cr >= 1.0) => {
                return Err(DwfError::Config(format!("compression ratio must be at least 1, got {cr}")))
            }
            PruneTarget::Sparsity(s) if !(0.0..1.0).contains(&s) => {
                return Err(DwfError::Config(format!("sparsity must lie in [0, 1), got {s}")))
            }
            _ => {}
        }
        let keep = (total as f64 / self.compression_ratio()).round() as usize;
        if keep == 0 {
            return Err(DwfError::Config(format!(
                "compression ratio {} keeps no parameters out of {total}",
                self.compression_ratio()
            )));
        }
        Ok(keep.min(total))
    }
}

/// Keep (`true`) or drop flags for every entry of a dense parameter set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    /// `(rows, cols)` of each parameter array; biases are `1 × n`.
    pub shapes: Vec<(usize, usize)>,
    pub keep: Vec<Vec<bool>>,
}

fn shapes_of(params: &DenseParams) -> Vec<(usize, usize)> {
    params
        .weights
        .iter()
        .zip(&params.biases)
        .flat_map(|(w, b)| [(w.rows(), w.cols()), (1, b.len())])
        .collect()
}

impl PruneMask {
    pub fn keep_all(params: &DenseParams) -> Self {
        let shapes = shapes_of(params);
        let keep = shapes.iter().map(|&(r, c)| vec![true; r * c]).collect();
        Self { shapes, keep }
    }

    pub fn total(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().flatten().filter(|k| **k).count()
    }

    /// Kept entries of weight matrix `l` (biases excluded).
    pub fn kept_weights(&self, layer: usize) -> usize {
        self.keep[2 * layer].iter().filter(|k| **k).count()
    }

    pub fn check_aligned(&self, params: &DenseParams) -> Result<()> {
        if shapes_of(params) != self.shapes
            || self.keep.iter().zip(&self.shapes).any(|(k, &(r, c))| k.len() != r * c)
        {
            return Err(DwfError::Shape("mask does not match the parameter shapes".into()));
        }
        Ok(())
    }

    /// Zeroes every dropped entry of `params`.
    pub fn apply(&self, params: &mut DenseParams) {
        for (s, k) in params.slices_mut().into_iter().zip(&self.keep) {
            for (v, &keep) in s.iter_mut().zip(k) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }

    /// First weight matrix with nothing kept, if any.
    pub fn collapsed_layer(&self) -> Option<usize> {
        (0..self.shapes.len() / 2).find(|&l| self.kept_weights(l) == 0)
    }
}

/// Keeps the `k` highest scores globally. Among equal scores, lower
/// `(parameter, index)` positions are kept first.
pub fn top_k_mask(scores: &[Vec<f64>], shapes: Vec<(usize, usize)>, k: usize) -> PruneMask {
    let mut order: Vec<(usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(p, s)| (0..s.len()).map(move |j| (p, j)))
        .collect();
    order.sort_unstable_by(|&(pa, ja), &(pb, jb)| {
        scores[pb][jb]
            .total_cmp(&scores[pa][ja])
            .then(pa.cmp(&pb))
            .then(ja.cmp(&jb))
    });
    let mut keep: Vec<Vec<bool>> = scores.iter().map(|s| vec![false; s.len()]).collect();
    for &(p, j) in order.iter().take(k) {
        keep[p][j] = true;
    }
    PruneMask { shapes, keep }
}

fn abs_scores(params: &DenseParams) -> Vec<Vec<f64>> {
    params
        .slices()
        .iter()
        .map(|s| s.iter().map(|v| v.abs()).collect())
        .collect()
}

/// Global magnitude pruning over all weights and biases.
pub fn magnitude_mask(params: &DenseParams, target: PruneTarget) -> Result<PruneMask> {
    let k = target.keep_count(params.total())?;
    Ok(top_k_mask(&abs_scores(params), shapes_of(params), k))
}

/// Keeps a uniformly random subset of the target size.
pub fn random_mask(params: &DenseParams, target: PruneTarget, rng: &mut SeededRng) -> Result<PruneMask> {
    let total = params.total();
    let k = target.keep_count(total)?;
    let mut idx: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut idx);
    let mut flat = vec![false; total];
    for &i in &idx[..k] {
        flat[i] = true;
    }
    let shapes = shapes_of(params);
    let mut keep = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for &(r, c) in &shapes {
        keep.push(flat[at..at + r * c].to_vec());
        at += r * c;
    }
    Ok(PruneMask { shapes, keep })
}

/// Connection sensitivity `|∂L/∂w ⊙ w|` on one batch. Falls back to `|w|`
/// when every score is zero.
pub fn snip_scores(m: &DenseMlp, x: &DenseMatrix, targets: &Targets) -> Result<Vec<Vec<f64>>> {
    let (_, _, grads) = m.loss_and_grads(x, targets)?;
    let scores: Vec<Vec<f64>> = m
        .params
        .slices()
        .iter()
        .zip(grads.slices())
        .map(|(w, g)| w.iter().zip(g).map(|(a, b)| (a * b).abs()).collect())
        .collect();
    if scores.iter().flatten().all(|s| *s == 0.0) {
        log::warn!("all SNIP scores are zero; ranking by magnitude instead");
        return Ok(abs_scores(&m.params));
    }
    Ok(scores)
}

pub fn snip_mask(m: &DenseMlp, x: &DenseMatrix, targets: &Targets, target: PruneTarget) -> Result<PruneMask> {
    let k = target.keep_count(m.params.total())?;
    Ok(top_k_mask(&snip_scores(m, x, targets)?, shapes_of(&m.params), k))
}

/// Synaptic-flow scores `|θ ⊙ ∂R/∂θ|` where `R` is the summed output of the
/// linear network with absolute-valued parameters on an all-ones input.
/// With zero biases, `R = 1ᵀ |W_0| |W_1| ⋯ 1`.
pub fn synflow_scores(params: &DenseParams) -> Result<Vec<Vec<f64>>> {
    let n_layers = params.num_layers();
    let abs_w: Vec<DenseMatrix> = params.weights.iter().map(|w| w.map(f64::abs)).collect();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut a = DenseMatrix::filled(1, abs_w[0].rows(), 1.0);
    for (w, b) in abs_w.iter().zip(&params.biases) {
        let mut z = matmul(&a, w)?;
        for (zj, bj) in z.as_mut_slice().iter_mut().zip(b) {
            *zj += bj.abs();
        }
        inputs.push(std::mem::replace(&mut a, z));
    }
    let mut delta = DenseMatrix::filled(1, a.cols(), 1.0);
    let mut scores = vec![Vec::new(); 2 * n_layers];
    for l in (0..n_layers).rev() {
        let gw = matmul_tn(&inputs[l], &delta)?;
        scores[2 * l] = gw
            .as_slice()
            .iter()
            .zip(abs_w[l].as_slice())
            .map(|(g, w)| g * w)
            .collect();
        scores[2 * l + 1] = delta
            .as_slice()
            .iter()
            .zip(&params.biases[l])
            .map(|(g, b)| g * b.abs())
            .collect();
        if l > 0 {
            delta = matmul_nt(&delta, &abs_w[l])?;
        }
    }
    Ok(scores)
}

/// Iterative SynFlow: at round `i` of `iterations`, rescore the masked
/// network and keep the top `total / cr^(i/iterations)` entries.
pub fn synflow_prune(params: &DenseParams, target: PruneTarget, iterations: usize) -> Result<PruneMask> {
    if iterations == 0 {
        return Err(DwfError::Config("SynFlow needs at least one iteration".into()));
    }
    let total = params.total();
    target.keep_count(total)?;
    let cr = target.compression_ratio();
    let mut mask = PruneMask::keep_all(params);
    let mut current = params.clone();
    for i in 1..=iterations {
        let cr_i = cr.powf(i as f64 / iterations as f64);
        let k = PruneTarget::CompressionRatio(cr_i).keep_count(total)?;
        mask = top_k_mask(&synflow_scores(&current)?, shapes_of(params), k);
        current = params.clone();
        mask.apply(&mut current);
    }
    if let Some(layer) = mask.collapsed_layer() {
        return Err(DwfError::LayerCollapse { layer });
    }
    Ok(mask)
}

/// Dense training from the seed's initialization with `mask` enforced at
/// every step.
pub fn apply_mask_and_train(
    init: DenseMlp,
    mask: &PruneMask,
    cfg: &TrainConfig,
    reg: DenseRegularizer,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> std::result::Result<DenseTrainOutcome, TrainError> {
    train_dense(init, cfg, reg, Some(mask), train_set, val_set)
}

/// SynFlow rounds.
pub const SYNFLOW_ITERATIONS: usize = 100;
/// SNIP scoring batch size.
pub const SNIP_BATCH: usize = 256;

/// Pruning methods that build a mask on the untrained network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AtInitMethod {
    Random,
    /// Scores from one random training batch of this size.
    Snip { batch: usize },
    Synflow { iterations: usize },
}

/// Builds the mask for `method` on the seed's initialization, then trains
/// with it.
pub fn prune_at_init_and_train(
    spec: &crate::model::MlpSpec,
    method: AtInitMethod,
    target: PruneTarget,
    cfg: &TrainConfig,
    reg: DenseRegularizer,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> std::result::Result<(PruneMask, DenseTrainOutcome), TrainError> {
    let init = dense_init(spec, cfg)?;
    let mask = match method {
        AtInitMethod::Random => {
            let mut rng = SeededRng::stream(cfg.seed, &[0x5EED, 1]);
            random_mask(&init.params, target, &mut rng)?
        }
        AtInitMethod::Snip { batch } => {
            let mut rng = SeededRng::stream(cfg.seed, &[0x5EED, 2]);
            let mut idx: Vec<usize> = (0..train_set.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(batch.clamp(1, idx.len().max(1)));
            let batch = train_set.subset(&idx, train_set.split);
            snip_mask(&init, &batch.inputs, &batch.targets, target)?
        }
        AtInitMethod::Synflow { iterations } => synflow_prune(&init.params, target, iterations)?,
    };
    let out = apply_mask_and_train(init, &mask, cfg, reg, train_set, val_set)?;
    Ok((mask, out))
}

/// Global magnitude pruning of a trained network followed by
/// `cfg.epochs` of masked fine-tuning (none when `cfg.epochs == 0`).
pub fn magnitude_prune_and_finetune(
    trained: &DenseMlp,
    target: PruneTarget,
    cfg: &TrainConfig,
    reg: DenseRegularizer,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> std::result::Result<(PruneMask, DenseMlp, Vec<EpochTrace>), TrainError> {
    let mask = magnitude_mask(&trained.params, target)?;
    let mut pruned = trained.clone();
    mask.apply(&mut pruned.params);
    if cfg.epochs == 0 || mask.kept() == mask.total() {
        return Ok((mask, pruned, Vec::new()));
    }
    let out = train_dense(pruned, cfg, reg, Some(&mask), train_set, val_set)?;
    Ok((mask, out.model, out.traces))
}

/// One point of a post-hoc pruning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cr: f64,
    pub kept: usize,
    pub accuracy: f64,
    /// Weight matrices left without any entry.
    pub collapsed_layers: usize,
}

/// Accuracy of `model` on `eval` after magnitude pruning to each ratio,
/// without retraining.
pub fn posthoc_prune_curve(model: &DenseMlp, cr_list: &[f64], eval: &Dataset) -> Result<Vec<CurvePoint>> {
    if cr_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(DwfError::Config("compression ratios must be ascending".into()));
    }
    cr_list
        .iter()
        .map(|&cr| {
            let mask = magnitude_mask(&model.params, PruneTarget::CompressionRatio(cr))?;
            let mut pruned = model.clone();
            mask.apply(&mut pruned.params);
            let (_, accuracy) = pruned.evaluate(&eval.inputs, &eval.targets)?;
            Ok(CurvePoint {
                cr,
                kept: mask.kept(),
                accuracy,
                collapsed_layers: (0..model.params.num_layers()).filter(|&l| mask.kept_weights(l) == 0).count(),
            })
        })
        .collect()
}

const MASK_MAGIC: &[u8; 8] = b"DWFMASK\0";
const MASK_VERSION: u32 = 1;

/// Binary mask file: magic, version, parameter count, then for each
/// parameter its `rows`, `cols` (little-endian `u32`) and an LSB-first bitset.
pub fn write_mask(mask: &PruneMask, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.shapes.len() as u32).to_le_bytes());
    for (&(r, c), k) in mask.shapes.iter().zip(&mask.keep) {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        let mut bytes = vec![0u8; k.len().div_ceil(8)];
        for (i, &b) in k.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<PruneMask> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(at..at + n)
            .ok_or_else(|| DwfError::Length("mask file truncated".into()))?;
        at += n;
        Ok(s)
    };
    if take(8)? != MASK_MAGIC {
        return Err(DwfError::Format("not a mask file".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let version = u32_at(take(4)?);
    if version != MASK_VERSION as usize {
        return Err(DwfError::Format(format!("unsupported mask version {version}")));
    }
    let n = u32_at(take(4)?);
    let mut shapes = Vec::with_capacity(n);
    let mut keep = Vec::with_capacity(n);
    for _ in 0..n {
        let r = u32_at(take(4)?);
        let c = u32_at(take(4)?);
        let bits = take((r * c).div_ceil(8))?;
        keep.push((0..r * c).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect());
        shapes.push((r, c));
    }
    Ok(PruneMask { shapes, keep })
}
