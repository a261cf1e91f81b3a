//! Fully connected networks in dense and factorized form.
//!
//! Weights are stored as `n_in × n_out` matrices so a layer computes
//! `Z = A · W + b` on a row-per-sample batch. Hidden layers apply the configured
//! activation; the last layer is linear and feeds the loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Targets;
use crate::error::{DwfError, Result};
use crate::factorization::{balanced_factorize, factor_gradients_into, CollapsedParam, FactorizedParam};
use crate::init::{init_biases, sample_factor_weights, InitScheme, LayerInitContext, VarianceRule};
use crate::ndcore::{matmul, matmul_nt, matmul_tn, DenseMatrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `a`.
    /// ReLU has derivative 0 at exactly 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// Per-sample sum of squared errors over outputs, averaged over the batch.
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 784-300-100-10 ReLU classifier.
    pub fn lenet_300_100() -> Self {
        Self {
            layer_sizes: vec![784, 300, 100, 10],
            activation: Activation::Relu,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(DwfError::Config(format!(
                "need at least 2 layer sizes, got {}",
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(DwfError::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// `(n_in, n_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                i * o + o
            })
            .sum()
    }
}

/// Weights and biases of a dense network, or anything shaped like them
/// (gradients, masks converted to 0/1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl DenseParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let (weights, biases) = (0..spec.num_layers())
            .map(|l| {
                let (i, o) = spec.layer_shape(l);
                (DenseMatrix::zeros(i, o), vec![0.0; o])
            })
            .unzip();
        Self { weights, biases }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameter arrays in the canonical order `W_0, b_0, W_1, b_1, …`.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    pub fn total(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.slices()
            .iter()
            .map(|s| s.iter().filter(|v| **v != 0.0).count())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer values kept from the forward pass for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l` (`inputs[0]` is the batch).
    pub inputs: Vec<DenseMatrix>,
    /// Pre-activation of every layer; the last entry is the logits.
    pub pre_activations: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMlp {
    pub spec: MlpSpec,
    pub params: DenseParams,
}

fn check_batch(spec: &MlpSpec, x: &DenseMatrix, targets: Option<&Targets>) -> Result<()> {
    if x.cols() != spec.inputs() {
        return Err(DwfError::Shape(format!(
            "input has {} features, network expects {}",
            x.cols(),
            spec.inputs()
        )));
    }
    if let Some(t) = targets {
        if t.len() != x.rows() {
            return Err(DwfError::Shape(format!(
                "{} targets for a batch of {}",
                t.len(),
                x.rows()
            )));
        }
        match t {
            Targets::Classes(c) => {
                if let Some(bad) = c.iter().find(|&&c| c >= spec.outputs()) {
                    return Err(DwfError::Shape(format!(
                        "class {bad} out of range for {} outputs",
                        spec.outputs()
                    )));
                }
            }
            Targets::Values(v) => {
                if v.cols() != spec.outputs() {
                    return Err(DwfError::Shape(format!(
                        "targets have {} columns, network has {} outputs",
                        v.cols(),
                        spec.outputs()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Loss of `logits` and its gradient with respect to them, both averaged over
/// the batch.
pub fn loss_and_logit_grad(
    kind: LossKind,
    logits: &DenseMatrix,
    targets: &Targets,
) -> (f64, DenseMatrix) {
    let b = logits.rows();
    let k = logits.cols();
    let inv_b = 1.0 / b as f64;
    let mut grad = DenseMatrix::zeros(b, k);
    let mut total = 0.0;
    for i in 0..b {
        let z = logits.row(i);
        let g = grad.row_mut(i);
        match (kind, targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Classes(c)) => {
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (gj, &zj) in g.iter_mut().zip(z) {
                    *gj = (zj - m).exp();
                    s += *gj;
                }
                total += s.ln() - (z[c[i]] - m);
                for gj in g.iter_mut() {
                    *gj = *gj / s * inv_b;
                }
                g[c[i]] -= inv_b;
            }
            (LossKind::SoftmaxCrossEntropy, Targets::Values(p)) => {
                // Soft labels: cross-entropy against a target distribution.
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = z.iter().map(|&zj| (zj - m).exp()).sum::<f64>().ln() + m;
                for (j, gj) in g.iter_mut().enumerate() {
                    let pj = p.get(i, j);
                    total -= pj * (z[j] - lse);
                    *gj = ((z[j] - lse).exp() - pj) * inv_b;
                }
            }
            (LossKind::MeanSquaredError, _) => {
                for (j, gj) in g.iter_mut().enumerate() {
                    let y = match targets {
                        Targets::Classes(c) => f64::from(u8::from(c[i] == j)),
                        Targets::Values(v) => v.get(i, j),
                    };
                    let r = z[j] - y;
                    total += r * r;
                    *gj = 2.0 * r * inv_b;
                }
            }
        }
    }
    (total * inv_b, grad)
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(m: &DenseMatrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the class label.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

impl DenseMlp {
    pub fn new(spec: MlpSpec, params: DenseParams) -> Result<Self> {
        spec.validate()?;
        if params.num_layers() != spec.num_layers() || params.biases.len() != spec.num_layers() {
            return Err(DwfError::Shape(format!(
                "{} parameter layers for a {}-layer network",
                params.num_layers(),
                spec.num_layers()
            )));
        }
        for l in 0..spec.num_layers() {
            let (i, o) = spec.layer_shape(l);
            let w = &params.weights[l];
            if w.rows() != i || w.cols() != o || params.biases[l].len() != o {
                return Err(DwfError::Shape(format!(
                    "layer {l} parameters do not match {i}x{o}"
                )));
            }
        }
        Ok(Self { spec, params })
    }

    /// Kaiming-normal weights and zero biases.
    pub fn init_kaiming(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = DenseParams::zeros(&spec);
        for (l, w) in params.weights.iter_mut().enumerate() {
            let mut rng = SeededRng::stream(seed, &[0xD1, l as u64]);
            let sigma = (2.0 / w.rows() as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = sigma * rng.normal();
            }
        }
        Self::new(spec, params)
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        check_batch(&self.spec, x, None)?;
        let n_layers = self.spec.num_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = x.clone();
        for l in 0..n_layers {
            let mut z = matmul(&a, &self.params.weights[l])?;
            let b = &self.params.biases[l];
            for i in 0..z.rows() {
                for (zj, bj) in z.row_mut(i).iter_mut().zip(b) {
                    *zj += bj;
                }
            }
            if !z.all_finite() {
                return Err(DwfError::Numeric { layer: l });
            }
            let next = if l + 1 < n_layers {
                let act = self.spec.activation;
                z.map(|v| act.apply(v))
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        Ok((
            a,
            ForwardCache {
                inputs,
                pre_activations: pre,
            },
        ))
    }

    /// Logits only, evaluated in chunks to bound memory.
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        const CHUNK: usize = 2048;
        check_batch(&self.spec, x, None)?;
        let mut out = Vec::with_capacity(x.rows() * self.spec.outputs());
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let (logits, _) = self.forward(&x.gather_rows(&idx))?;
            out.extend_from_slice(logits.as_slice());
            start = end;
        }
        DenseMatrix::from_vec(x.rows(), self.spec.outputs(), out)
    }

    /// Mean loss and classification accuracy (NaN for regression targets).
    pub fn evaluate(&self, x: &DenseMatrix, targets: &Targets) -> Result<(f64, f64)> {
        check_batch(&self.spec, x, Some(targets))?;
        let logits = self.predict(x)?;
        let (loss, _) = loss_and_logit_grad(self.spec.loss, &logits, targets);
        let acc = targets.classes().map_or(f64::NAN, |c| accuracy(&logits, c));
        Ok((loss, acc))
    }

    /// Mean loss, logits, and gradients with respect to every weight and bias.
    pub fn loss_and_grads(
        &self,
        x: &DenseMatrix,
        targets: &Targets,
    ) -> Result<(f64, DenseMatrix, DenseParams)> {
        check_batch(&self.spec, x, Some(targets))?;
        let (logits, cache) = self.forward(x)?;
        let (loss, mut dz) = loss_and_logit_grad(self.spec.loss, &logits, targets);
        let n_layers = self.spec.num_layers();
        if !loss.is_finite() {
            return Err(DwfError::Numeric {
                layer: n_layers - 1,
            });
        }
        let mut grads = DenseParams::zeros(&self.spec);
        for l in (0..n_layers).rev() {
            grads.weights[l] = matmul_tn(&cache.inputs[l], &dz)?;
            let gb = &mut grads.biases[l];
            for i in 0..dz.rows() {
                for (g, &d) in gb.iter_mut().zip(dz.row(i)) {
                    *g += d;
                }
            }
            if l > 0 {
                let mut da = matmul_nt(&dz, &self.params.weights[l])?;
                let act = self.spec.activation;
                let z = &cache.pre_activations[l - 1];
                let a = &cache.inputs[l];
                for ((d, &zv), &av) in da
                    .as_mut_slice()
                    .iter_mut()
                    .zip(z.as_slice())
                    .zip(a.as_slice())
                {
                    *d *= act.derivative(zv, av);
                }
                dz = da;
            }
        }
        Ok((loss, logits, grads))
    }
}

/// Network whose every weight and bias is a depth-`D` factorized parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedMlp {
    pub spec: MlpSpec,
    depth: usize,
    /// Canonical order `W_0, b_0, W_1, b_1, …`.
    params: Vec<FactorizedParam>,
}

/// Factor gradients aligned with [`FactorizedMlp::params`]: one entry per
/// parameter, each holding `D` arrays.
pub type FactorGrads = Vec<Vec<Vec<f64>>>;

impl FactorizedMlp {
    pub fn new(spec: MlpSpec, depth: usize, params: Vec<FactorizedParam>) -> Result<Self> {
        let m = Self {
            spec,
            depth,
            params,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.depth < 2 {
            return Err(DwfError::Config(format!(
                "factorization depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.params.len() != 2 * self.spec.num_layers() {
            return Err(DwfError::Shape(format!(
                "{} parameters for a {}-layer network",
                self.params.len(),
                self.spec.num_layers()
            )));
        }
        for l in 0..self.spec.num_layers() {
            let (i, o) = self.spec.layer_shape(l);
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            if (w.rows(), w.cols()) != (i, o) || b.len() != o {
                return Err(DwfError::Shape(format!(
                    "layer {l} factors do not match {i}x{o}"
                )));
            }
            for p in [w, b] {
                if p.depth() != self.depth {
                    return Err(DwfError::Shape(format!(
                        "layer {l} has depth {}, network depth is {}",
                        p.depth(),
                        self.depth
                    )));
                }
                if p.factors().iter().any(|f| f.len() != p.len()) {
                    return Err(DwfError::Shape(format!("layer {l} has ragged factors")));
                }
            }
        }
        Ok(())
    }

    /// Fresh network: layer `l` draws its weights from stream `(seed, l, 0)`
    /// and its biases from `(seed, l, 1)`.
    pub fn init(
        spec: MlpSpec,
        depth: usize,
        scheme: &InitScheme,
        rule: VarianceRule,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(2 * spec.num_layers());
        for l in 0..spec.num_layers() {
            let (i, o) = spec.layer_shape(l);
            let ctx = LayerInitContext::new(i, o, rule)?;
            let mut wr = SeededRng::stream(seed, &[l as u64, 0]);
            let mut br = SeededRng::stream(seed, &[l as u64, 1]);
            params.push(FactorizedParam::new(
                i,
                o,
                sample_factor_weights(&ctx, scheme, depth, i * o, &mut wr)?,
            )?);
            params.push(FactorizedParam::vector(init_biases(scheme, depth, o, &mut br)?)?);
        }
        Self::new(spec, depth, params)
    }

    /// Balanced factorization of a dense network.
    pub fn from_dense_balanced(dense: &DenseMlp, depth: usize) -> Result<Self> {
        let mut params = Vec::with_capacity(2 * dense.spec.num_layers());
        for (w, b) in dense.params.weights.iter().zip(&dense.params.biases) {
            let cw = CollapsedParam::new(w.rows(), w.cols(), w.as_slice().to_vec())?;
            params.push(balanced_factorize(&cw, depth)?);
            params.push(balanced_factorize(&CollapsedParam::vector(b.clone()), depth)?);
        }
        Self::new(dense.spec.clone(), depth, params)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn params(&self) -> &[FactorizedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [FactorizedParam] {
        &mut self.params
    }

    pub fn weight(&self, l: usize) -> &FactorizedParam {
        &self.params[2 * l]
    }

    pub fn bias(&self, l: usize) -> &FactorizedParam {
        &self.params[2 * l + 1]
    }

    /// Writes the collapsed parameters into an existing dense parameter set.
    pub fn collapse_into(&self, out: &mut DenseParams) {
        for (p, s) in self.params.iter().zip(out.slices_mut()) {
            p.collapse_into(s);
        }
    }
}

pub fn collapse_model(m: &FactorizedMlp) -> DenseMlp {
    let mut params = DenseParams::zeros(&m.spec);
    m.collapse_into(&mut params);
    DenseMlp {
        spec: m.spec.clone(),
        params,
    }
}

pub fn forward(m: &FactorizedMlp, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
    collapse_model(m).forward(x)
}

/// Data-fit loss (without the factor penalty) and the gradient of every
/// factor of every parameter.
pub fn loss_and_grads(
    m: &FactorizedMlp,
    x: &DenseMatrix,
    targets: &Targets,
) -> Result<(f64, FactorGrads)> {
    let (loss, _, grads) = loss_and_grads_with_logits(m, x, targets)?;
    Ok((loss, grads))
}

pub(crate) fn loss_and_grads_with_logits(
    m: &FactorizedMlp,
    x: &DenseMatrix,
    targets: &Targets,
) -> Result<(f64, DenseMatrix, FactorGrads)> {
    let dense = collapse_model(m);
    let (loss, logits, dense_grads) = dense.loss_and_grads(x, targets)?;
    let grads = m
        .params
        .iter()
        .zip(dense_grads.slices())
        .map(|(p, g)| {
            let mut out = vec![vec![0.0; p.len()]; p.depth()];
            factor_gradients_into(g, p, &mut out);
            out
        })
        .collect();
    Ok((loss, logits, grads))
}

const CHECKPOINT_FORMAT: &str = "dwf-factorized-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: FactorizedMlp,
}

pub fn save_checkpoint(m: &FactorizedMlp, path: &Path) -> Result<()> {
    let doc = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: m.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&doc)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FactorizedMlp> {
    let doc: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
    if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
        return Err(DwfError::Format(format!(
            "unsupported checkpoint {} v{}",
            doc.format, doc.version
        )));
    }
    doc.model.validate()?;
    Ok(doc.model)
}

/// Dense parameters as a flat JSON document.
pub fn save_dense(m: &DenseMlp, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(m)?)?;
    Ok(())
}

pub fn load_dense(path: &Path) -> Result<DenseMlp> {
    let m: DenseMlp = serde_json::from_slice(&std::fs::read(path)?)?;
    DenseMlp::new(m.spec, m.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::grad_check;

    fn small_spec(act: Activation, loss: LossKind) -> MlpSpec {
        MlpSpec::new(vec![4, 5, 3], act, loss).unwrap()
    }

    fn batch(rng: &mut SeededRng, b: usize, n: usize) -> DenseMatrix {
        DenseMatrix::from_vec(b, n, (0..b * n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn lenet_parameter_count() {
        assert_eq!(MlpSpec::lenet_300_100().param_count(), 266_610);
    }

    #[test]
    fn single_weight_forward() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity, LossKind::MeanSquaredError).unwrap();
        let dense = DenseMlp::new(
            spec,
            DenseParams {
                weights: vec![DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap()],
                biases: vec![vec![0.0]],
            },
        )
        .unwrap();
        let m = FactorizedMlp::from_dense_balanced(&dense, 2).unwrap();
        let (z, _) = forward(&m, &DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        assert!((z.as_slice()[0] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn rescaled_factors_give_identical_logits() {
        let spec = small_spec(Activation::Tanh, LossKind::SoftmaxCrossEntropy);
        let m = FactorizedMlp::init(spec, 3, &InitScheme::VarMatch, VarianceRule::Kaiming, 4).unwrap();
        let mut r = m.clone();
        let mut rng = SeededRng::new(9);
        for p in r.params_mut() {
            for j in 0..p.len() {
                let c1 = 0.5 + rng.uniform();
                let c2 = -(0.5 + rng.uniform());
                let f = p.factors_mut();
                f[0][j] *= c1;
                f[1][j] *= c2;
                f[2][j] /= c1 * c2;
            }
        }
        let x = batch(&mut rng, 6, 4);
        let (a, _) = forward(&m, &x).unwrap();
        let (b, _) = forward(&r, &x).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
    }

    #[test]
    fn factorized_forward_matches_explicit_dense_reference() {
        let spec = MlpSpec::new(vec![3, 4, 4, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
        let m = FactorizedMlp::init(spec, 2, &InitScheme::VarMatch, VarianceRule::Kaiming, 1).unwrap();
        let x = batch(&mut SeededRng::new(2), 100, 3);
        let (logits, _) = forward(&m, &x).unwrap();
        for s in 0..x.rows() {
            let mut a = x.row(s).to_vec();
            for l in 0..3 {
                let (w, b) = (m.weight(l), m.bias(l));
                let (ni, no) = (w.rows(), w.cols());
                let f = w.factors();
                let mut z = vec![0.0; no];
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo = b.factors()[0][o] * b.factors()[1][o];
                    for (i, ai) in a.iter().enumerate().take(ni) {
                        *zo += ai * f[0][i * no + o] * f[1][i * no + o];
                    }
                }
                a = if l < 2 { z.iter().map(|v| v.max(0.0)).collect() } else { z };
            }
            for (u, v) in logits.row(s).iter().zip(&a) {
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn collapse_of_all_ones_is_all_ones() {
        let spec = small_spec(Activation::Relu, LossKind::SoftmaxCrossEntropy);
        let mut m = FactorizedMlp::init(spec, 2, &InitScheme::VarMatch, VarianceRule::LeCun, 0).unwrap();
        for p in m.params_mut() {
            for f in p.factors_mut() {
                f.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let d = collapse_model(&m);
        assert!(d.params.slices().iter().all(|s| s.iter().all(|v| *v == 1.0)));
        let again = collapse_model(&FactorizedMlp::from_dense_balanced(&d, 2).unwrap());
        assert_eq!(again, d);
    }

    #[test]
    fn perfect_prediction_has_vanishing_loss() {
        let logits = DenseMatrix::from_rows(&[vec![40.0, 0.0], vec![0.0, 40.0]]).unwrap();
        let (loss, g) =
            loss_and_logit_grad(LossKind::SoftmaxCrossEntropy, &logits, &Targets::Classes(vec![0, 1]));
        assert!(loss <= 1e-6);
        assert!(g.as_slice().iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn softmax_gradient_closed_form() {
        let mut rng = SeededRng::new(3);
        let logits = batch(&mut rng, 5, 4);
        let labels = vec![0, 3, 1, 1, 2];
        let (_, g) =
            loss_and_logit_grad(LossKind::SoftmaxCrossEntropy, &logits, &Targets::Classes(labels.clone()));
        for i in 0..5 {
            let z = logits.row(i);
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                let expect = (z[j].exp() / s - f64::from(u8::from(labels[i] == j))) / 5.0;
                assert!((g.get(i, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn linear_mse_gradient_through_factors() {
        let spec = MlpSpec::new(vec![3, 1], Activation::Identity, LossKind::MeanSquaredError).unwrap();
        let m = FactorizedMlp::init(spec, 2, &InitScheme::VarMatch, VarianceRule::LeCun, 6).unwrap();
        let x = DenseMatrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let y = 0.7;
        let targets = Targets::Values(DenseMatrix::from_vec(1, 1, vec![y]).unwrap());
        let dense = collapse_model(&m);
        let yhat = (0..3)
            .map(|i| x.as_slice()[i] * dense.params.weights[0].as_slice()[i])
            .sum::<f64>()
            + dense.params.biases[0][0];
        let (_, grads) = loss_and_grads(&m, &x, &targets).unwrap();
        let w = m.weight(0).factors();
        for i in 0..3 {
            let gw = 2.0 * (yhat - y) * x.as_slice()[i];
            assert!((grads[0][0][i] - gw * w[1][i]).abs() <= 1e-10);
            assert!((grads[0][1][i] - gw * w[0][i]).abs() <= 1e-10);
        }
    }

    fn flatten(m: &FactorizedMlp) -> Vec<f64> {
        m.params()
            .iter()
            .flat_map(|p| p.factors().iter().flatten().copied())
            .collect()
    }

    fn unflatten(m: &mut FactorizedMlp, x: &[f64]) {
        let mut k = 0;
        for p in m.params_mut() {
            for f in p.factors_mut() {
                let n = f.len();
                f.copy_from_slice(&x[k..k + n]);
                k += n;
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for (act, loss) in [
            (Activation::Tanh, LossKind::SoftmaxCrossEntropy),
            (Activation::Tanh, LossKind::MeanSquaredError),
            (Activation::Relu, LossKind::SoftmaxCrossEntropy),
        ] {
            for depth in 2..=4 {
                let spec = small_spec(act, loss);
                let m = FactorizedMlp::init(spec, depth, &InitScheme::VarMatch, VarianceRule::Kaiming, 13)
                    .unwrap();
                let mut rng = SeededRng::new(depth as u64);
                let x = batch(&mut rng, 8, 4);
                let targets = Targets::Classes((0..8).map(|_| rng.below(3)).collect());
                let (_, grads) = loss_and_grads(&m, &x, &targets).unwrap();
                let analytic: Vec<f64> = grads.iter().flatten().flatten().copied().collect();
                let x0 = flatten(&m);
                let mut probe = m.clone();
                let err = grad_check(
                    |v| {
                        unflatten(&mut probe, v);
                        loss_and_grads(&probe, &x, &targets).unwrap().0
                    },
                    &x0,
                    &analytic,
                    1e-6,
                )
                .unwrap();
                assert!(err <= 1e-4, "{act:?} {loss:?} depth {depth}: {err}");
            }
        }
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let spec = small_spec(Activation::Relu, LossKind::SoftmaxCrossEntropy);
        let mut m = FactorizedMlp::init(spec, 2, &InitScheme::VarMatch, VarianceRule::Kaiming, 1).unwrap();
        m.params_mut()[2].factors_mut()[0][0] = f64::NAN;
        let x = DenseMatrix::filled(2, 4, 1.0);
        let err = loss_and_grads(&m, &x, &Targets::Classes(vec![0, 1])).unwrap_err();
        assert_eq!(err, DwfError::Numeric { layer: 1 });
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(Activation::Relu, LossKind::SoftmaxCrossEntropy);
        let m = FactorizedMlp::init(spec, 3, &InitScheme::default(), VarianceRule::Kaiming, 5).unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
        let d = collapse_model(&m);
        let q = dir.path().join("d.json");
        save_dense(&d, &q).unwrap();
        assert_eq!(load_dense(&q).unwrap(), d);
    }

    #[test]
    fn shape_errors() {
        let spec = small_spec(Activation::Relu, LossKind::SoftmaxCrossEntropy);
        let m = FactorizedMlp::init(spec, 2, &InitScheme::VarMatch, VarianceRule::Kaiming, 1).unwrap();
        assert!(forward(&m, &DenseMatrix::zeros(2, 3)).is_err());
        let x = DenseMatrix::zeros(2, 4);
        assert!(loss_and_grads(&m, &x, &Targets::Classes(vec![0, 7])).is_err());
        assert!(MlpSpec::new(vec![3], Activation::Relu, LossKind::MeanSquaredError).is_err());
    }
}
