//! Factorized parameters: storage, collapse, penalties and factor gradients.
//!
//! A parameter `w` of any shape is stored as `D ≥ 2` same-shape factor arrays
//! whose elementwise product is the collapsed value. An L2 penalty on the
//! factors, averaged over `D`, is bounded below by `Σ|w_j|^(2/D)` with equality
//! exactly when every entry's factors share one magnitude.

use serde::{Deserialize, Serialize};

use crate::error::{DwfError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedParam {
    rows: usize,
    cols: usize,
    factors: Vec<Vec<f64>>,
}

/// Elementwise product of a parameter's factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapsedParam {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CollapsedParam {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(DwfError::Shape(format!(
                "{} values for a {rows}x{cols} parameter",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            values,
        }
    }
}

impl FactorizedParam {
    pub fn new(rows: usize, cols: usize, factors: Vec<Vec<f64>>) -> Result<Self> {
        if factors.len() < 2 {
            return Err(DwfError::Config(format!(
                "factorization depth must be at least 2, got {}",
                factors.len()
            )));
        }
        if let Some((d, f)) = factors.iter().enumerate().find(|(_, f)| f.len() != rows * cols) {
            return Err(DwfError::Shape(format!(
                "factor {d} has {} entries, expected {rows}x{cols}",
                f.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            factors,
        })
    }

    /// One-dimensional parameter (biases, regression coefficients).
    pub fn vector(factors: Vec<Vec<f64>>) -> Result<Self> {
        let n = factors.first().map_or(0, Vec::len);
        Self::new(1, n, factors)
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of scalar entries (not counting the factor copies).
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.factors
    }

    /// Writes the collapsed values into `out`.
    pub fn collapse_into(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.factors[0]);
        for f in &self.factors[1..] {
            for (o, &v) in out.iter_mut().zip(f) {
                *o *= v;
            }
        }
    }
}

pub fn collapse(p: &FactorizedParam) -> CollapsedParam {
    let mut values = vec![0.0; p.len()];
    p.collapse_into(&mut values);
    CollapsedParam {
        rows: p.rows,
        cols: p.cols,
        values,
    }
}

/// `D⁻¹ Σ_d ‖ω_d‖²`; the caller applies λ.
pub fn l2_factor_penalty(p: &FactorizedParam) -> f64 {
    let total: f64 = p
        .factors
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>())
        .sum();
    total / p.depth() as f64
}

/// `|w|^(2/D)` with the zero branch made explicit.
#[inline]
fn abs_pow_two_over(w: f64, depth: usize) -> f64 {
    let a = w.abs();
    if a == 0.0 {
        0.0
    } else if depth == 2 {
        a
    } else {
        ((2.0 / depth as f64) * a.ln()).exp()
    }
}

/// `Σ_j |w_j|^(2/D)`.
pub fn quasi_norm(w: &CollapsedParam, depth: usize) -> f64 {
    quasi_norm_values(&w.values, depth)
}

pub fn quasi_norm_values(values: &[f64], depth: usize) -> f64 {
    values.iter().map(|&w| abs_pow_two_over(w, depth)).sum()
}

/// Gap between the factor penalty and the quasi-norm of the collapsed value.
///
/// Accumulated per entry so that balanced entries contribute exactly zero up
/// to rounding of their own terms.
pub fn misalignment(p: &FactorizedParam) -> f64 {
    let depth = p.depth();
    let inv_d = 1.0 / depth as f64;
    (0..p.len())
        .map(|j| {
            let mut sq = 0.0;
            let mut prod = 1.0;
            for f in &p.factors {
                sq += f[j] * f[j];
                prod *= f[j];
            }
            sq * inv_d - abs_pow_two_over(prod, depth)
        })
        .sum()
}

#[inline]
fn root(a: f64, depth: usize) -> f64 {
    match depth {
        2 => a.sqrt(),
        3 => a.cbrt(),
        4 => a.sqrt().sqrt(),
        _ => a.powf(1.0 / depth as f64),
    }
}

/// Minimum-norm factorization: every factor has magnitude `|w_j|^(1/D)` and a
/// negative entry carries its sign on the first factor.
pub fn balanced_factorize(w: &CollapsedParam, depth: usize) -> Result<FactorizedParam> {
    if depth < 2 {
        return Err(DwfError::Config(format!(
            "factorization depth must be at least 2, got {depth}"
        )));
    }
    let magnitudes: Vec<f64> = w.values.iter().map(|v| root(v.abs(), depth)).collect();
    let mut factors = vec![magnitudes; depth];
    for (f, &v) in factors[0].iter_mut().zip(&w.values) {
        if v < 0.0 {
            *f = -*f;
        }
    }
    FactorizedParam::new(w.rows, w.cols, factors)
}

/// Writes `∂L/∂ω_d = grad_w ⊙ ∏_{k≠d} ω_k` into `out` using running prefix and
/// suffix products, so zero factors need no special handling.
pub fn factor_gradients_into(grad_w: &[f64], p: &FactorizedParam, out: &mut [Vec<f64>]) {
    let depth = p.depth();
    debug_assert_eq!(out.len(), depth);
    for j in 0..p.len() {
        let mut prefix = 1.0;
        for d in 0..depth {
            out[d][j] = prefix;
            prefix *= p.factors[d][j];
        }
        let mut suffix = grad_w[j];
        for d in (0..depth).rev() {
            out[d][j] *= suffix;
            suffix *= p.factors[d][j];
        }
    }
}

pub fn factor_gradients(grad_w: &[f64], p: &FactorizedParam) -> Result<Vec<Vec<f64>>> {
    if grad_w.len() != p.len() {
        return Err(DwfError::Shape(format!(
            "gradient has {} entries for a parameter of {}",
            grad_w.len(),
            p.len()
        )));
    }
    let mut out = vec![vec![0.0; p.len()]; p.depth()];
    factor_gradients_into(grad_w, p, &mut out);
    Ok(out)
}
