//! Sparsity metrics and reference solvers for the lasso.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DwfError, Result};
use crate::factorization::{misalignment, FactorizedParam};
use crate::model::{DenseParams, FactorizedMlp};
use crate::ndcore::{DenseMatrix, SeededRng};

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`
/// so JSON output stays valid and lossless.
pub fn ser_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_f64(*v))
    }
}

pub fn ser_f64_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_finite() {
            seq.serialize_element(x)?;
        } else {
            seq.serialize_element(&format_f64(*x))?;
        }
    }
    seq.end()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Num(f64),
    Text(String),
}

impl NumOrText {
    fn value<E: serde::de::Error>(self) -> std::result::Result<f64, E> {
        match self {
            NumOrText::Num(v) => Ok(v),
            NumOrText::Text(t) => parse_f64(&t).ok_or_else(|| E::custom(format!("not a number: {t:?}"))),
        }
    }
}

/// Inverse of [`ser_f64`].
pub fn de_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    NumOrText::deserialize(d)?.value()
}

pub fn de_f64_vec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Vec::<NumOrText>::deserialize(d)?.into_iter().map(NumOrText::value).collect()
}

/// Parses [`format_f64`] output.
pub fn parse_f64(t: &str) -> Option<f64> {
    match t {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => t.parse().ok(),
    }
}

/// Shortest round-trip text for a float, with `inf`/`-inf`/`nan` spelled out.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

/// `total / nonzero`, infinite when nothing survives.
pub fn compression_ratio(total: usize, nonzero: usize) -> f64 {
    if nonzero == 0 {
        f64::INFINITY
    } else {
        total as f64 / nonzero as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub nonzero: usize,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub cr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub total_params: usize,
    pub nonzero_params: usize,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub compression_ratio: f64,
    pub sparsity: f64,
    pub layers: Vec<LayerSparsity>,
    pub collapsed_l2: f64,
    pub misalignment_total: Option<f64>,
    /// Each layer's misalignment divided by its parameter count.
    pub misalignment_per_layer_normalized: Option<Vec<f64>>,
}

/// Counts over a thresholded dense parameter set. Layer `l` groups `W_l` and
/// `b_l`. Misalignment fields are filled when the factorized source is given.
pub fn sparsity_report(params: &DenseParams, source: Option<&FactorizedMlp>) -> SparsityReport {
    let mut layers = Vec::with_capacity(params.num_layers());
    let mut sq = 0.0;
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let total = w.len() + b.len();
        let nonzero = w
            .as_slice()
            .iter()
            .chain(b)
            .filter(|v| **v != 0.0)
            .count();
        sq += w.as_slice().iter().chain(b).map(|v| v * v).sum::<f64>();
        layers.push(LayerSparsity {
            name: format!("layer{l}"),
            total,
            nonzero,
            cr: compression_ratio(total, nonzero),
        });
    }
    let total_params = layers.iter().map(|l| l.total).sum();
    let nonzero_params = layers.iter().map(|l| l.nonzero).sum();
    let (misalignment_total, misalignment_per_layer_normalized) = match source {
        Some(m) => {
            let per_layer: Vec<(f64, usize)> = (0..m.spec.num_layers())
                .map(|l| {
                    let (w, b) = (m.weight(l), m.bias(l));
                    (misalignment(w) + misalignment(b), w.len() + b.len())
                })
                .collect();
            (
                Some(per_layer.iter().map(|(v, _)| v).sum()),
                Some(per_layer.iter().map(|&(v, n)| v / n as f64).collect()),
            )
        }
        None => (None, None),
    };
    let compression_ratio = compression_ratio(total_params, nonzero_params);
    SparsityReport {
        total_params,
        nonzero_params,
        compression_ratio,
        sparsity: 1.0 - nonzero_params as f64 / total_params as f64,
        layers,
        collapsed_l2: sq.sqrt(),
        misalignment_total,
        misalignment_per_layer_normalized,
    }
}

/// `Σ (y − Xw)² + λ‖w‖₁`.
pub fn lasso_objective(x: &DenseMatrix, y: &[f64], w: &[f64], lambda: f64) -> f64 {
    residual_sum_of_squares(x, y, w) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

fn residual_sum_of_squares(x: &DenseMatrix, y: &[f64], w: &[f64]) -> f64 {
    (0..x.rows())
        .map(|i| {
            let r = y[i] - x.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            r * r
        })
        .sum()
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Smallest λ for which the lasso solution is identically zero.
pub fn lasso_lambda_max(x: &DenseMatrix, y: &[f64]) -> f64 {
    (0..x.cols())
        .map(|j| 2.0 * (0..x.rows()).map(|i| x.get(i, j) * y[i]).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent for `Σ (y − Xw)² + λ‖w‖₁`, starting from zero
/// and stopping once a full sweep moves no coefficient by `tol` or more.
pub fn lasso_cd(
    x: &DenseMatrix,
    y: &[f64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    check_lasso_inputs(x, y, lambda)?;
    let (n, p) = (x.rows(), x.cols());
    let col_sq: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| x.get(i, j).powi(2)).sum())
        .collect();
    let mut w = vec![0.0; p];
    let mut r = y.to_vec();
    let mut last = f64::INFINITY;
    for _ in 0..max_iter {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                w[j] = 0.0;
                continue;
            }
            let old = w[j];
            let rho: f64 = (0..n).map(|i| x.get(i, j) * r[i]).sum::<f64>() + col_sq[j] * old;
            let new = soft_threshold(rho, lambda / 2.0) / col_sq[j];
            let delta = new - old;
            if delta != 0.0 {
                for (i, ri) in r.iter_mut().enumerate() {
                    *ri -= x.get(i, j) * delta;
                }
                w[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
        }
        last = max_delta;
        if max_delta < tol {
            return Ok(w);
        }
    }
    Err(DwfError::NonConvergence {
        iterations: max_iter,
        residual: last,
    })
}

fn check_lasso_inputs(x: &DenseMatrix, y: &[f64], lambda: f64) -> Result<()> {
    if x.rows() != y.len() {
        return Err(DwfError::Shape(format!(
            "{} design rows but {} responses",
            x.rows(),
            y.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(DwfError::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizedLassoConfig {
    /// Standard deviation of the independent normal factor initialization.
    pub init_scale: f64,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once every factor gradient is below this in absolute value.
    pub grad_tol: f64,
}

impl Default for FactorizedLassoConfig {
    fn default() -> Self {
        Self {
            init_scale: 0.1,
            seed: 0,
            max_iter: 2_000_000,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLassoFit {
    pub coefficients: Vec<f64>,
    pub factors: FactorizedParam,
    /// `Σ (y − X(ω₁⊙ω₂))² + λ/2 (‖ω₁‖² + ‖ω₂‖²)` at the final iterate.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Residuals `Xw − y`, objective and factor gradients at `(u, v)`.
fn factorized_lasso_eval(
    x: &DenseMatrix,
    y: &[f64],
    lambda: f64,
    u: &[f64],
    v: &[f64],
    r: &mut [f64],
    gu: &mut [f64],
    gv: &mut [f64],
) -> f64 {
    let p = x.cols();
    let w: Vec<f64> = u.iter().zip(v).map(|(a, b)| a * b).collect();
    mat_vec(x, &w, r);
    let mut gw = vec![0.0; p];
    let mut rss = 0.0;
    for (i, (ri, yi)) in r.iter_mut().zip(y).enumerate() {
        *ri -= yi;
        rss += *ri * *ri;
        for (g, &a) in gw.iter_mut().zip(x.row(i)) {
            *g += 2.0 * *ri * a;
        }
    }
    for j in 0..p {
        gu[j] = gw[j] * v[j] + lambda * u[j];
        gv[j] = gw[j] * u[j] + lambda * v[j];
    }
    let pen: f64 = u.iter().chain(v).map(|a| a * a).sum();
    rss + 0.5 * lambda * pen
}

fn mat_vec(x: &DenseMatrix, w: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = x.row(i).iter().zip(w).map(|(a, b)| a * b).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch gradient descent on the depth-2 factorized lasso
/// `Σ (y − X(ω₁⊙ω₂))² + λ/2 (‖ω₁‖² + ‖ω₂‖²)` with Armijo backtracking.
///
/// Along the negative gradient the objective is a quartic in the step `t`,
/// `F(t) − F(0) = −t‖g‖² + c₂t² + c₃t³ + c₄t⁴`, so the sufficient-decrease
/// test is evaluated from its coefficients rather than from a difference of
/// nearly equal objective values. Factors start from independent normals so
/// that the sign of each product is free to change during optimization.
pub fn factorized_lasso_train(
    x: &DenseMatrix,
    y: &[f64],
    lambda: f64,
    cfg: &FactorizedLassoConfig,
) -> Result<FactorizedLassoFit> {
    check_lasso_inputs(x, y, lambda)?;
    let (n, p) = (x.rows(), x.cols());
    let mut rng = SeededRng::new(cfg.seed);
    let mut u: Vec<f64> = (0..p).map(|_| cfg.init_scale * rng.normal()).collect();
    let mut v: Vec<f64> = (0..p).map(|_| cfg.init_scale * rng.normal()).collect();
    let (mut gu, mut gv) = (vec![0.0; p], vec![0.0; p]);
    let mut r = vec![0.0; n];
    let (mut xa, mut xb) = (vec![0.0; n], vec![0.0; n]);
    let mut f = factorized_lasso_eval(x, y, lambda, &u, &v, &mut r, &mut gu, &mut gv);
    let mut step: f64 = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let gmax = gu.iter().chain(&gv).fold(0.0f64, |m, g| m.max(g.abs()));
        if !gmax.is_finite() || !f.is_finite() {
            return Err(DwfError::Diverged { step: iterations });
        }
        if gmax < cfg.grad_tol {
            converged = true;
            break;
        }
        // w(t) = w − t·a + t²·b
        let a: Vec<f64> = (0..p).map(|j| u[j] * gv[j] + v[j] * gu[j]).collect();
        let b: Vec<f64> = (0..p).map(|j| gu[j] * gv[j]).collect();
        mat_vec(x, &a, &mut xa);
        mat_vec(x, &b, &mut xb);
        let gsq = dot(&gu, &gu) + dot(&gv, &gv);
        let c2 = dot(&xa, &xa) + 2.0 * dot(&r, &xb) + 0.5 * lambda * gsq;
        let c3 = -2.0 * dot(&xa, &xb);
        let c4 = dot(&xb, &xb);
        step *= 2.0;
        while c2 * step + c3 * step * step + c4 * step.powi(3) > 0.5 * gsq {
            step *= 0.5;
            if step < 1e-300 {
                return Err(DwfError::Diverged { step: iterations });
            }
        }
        for j in 0..p {
            u[j] -= step * gu[j];
            v[j] -= step * gv[j];
        }
        f = factorized_lasso_eval(x, y, lambda, &u, &v, &mut r, &mut gu, &mut gv);
        iterations += 1;
    }
    let factors = FactorizedParam::vector(vec![u, v])?;
    let coefficients = crate::factorization::collapse(&factors).values;
    Ok(FactorizedLassoFit {
        coefficients,
        factors,
        objective: f,
        iterations,
        converged,
    })
}
