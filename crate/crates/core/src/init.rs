//! Factor initialization schemes.
//!
//! Every scheme starts from a per-layer base standard deviation `σ_w` and
//! produces `D` factor arrays whose elementwise product plays the role of a
//! conventionally initialized weight.

use serde::{Deserialize, Serialize};

use crate::error::{DwfError, Result};
use crate::ndcore::SeededRng;

/// Lower magnitude bound on collapsed weights for the truncated scheme.
pub const DEFAULT_TRUNCATION_EPS: f64 = 3e-3;

/// Base standard deviation used for every bias, whatever the scheme.
pub const BIAS_SIGMA: f64 = 0.05;

/// Maximum number of proposals per scalar in rejection sampling.
pub const REJECTION_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// `σ² = 1 / n_in`
    LeCun,
    /// `σ² = 2 / n_in`
    Kaiming,
    /// `σ² = 2 / (n_in + n_out)`
    Glorot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInitContext {
    pub n_in: usize,
    pub n_out: usize,
    pub rule: VarianceRule,
}

impl LayerInitContext {
    pub fn new(n_in: usize, n_out: usize, rule: VarianceRule) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(DwfError::Config(format!(
                "layer fan-in and fan-out must be positive, got {n_in} and {n_out}"
            )));
        }
        Ok(Self { n_in, n_out, rule })
    }
}

pub fn base_sigma(ctx: &LayerInitContext) -> f64 {
    let var = match ctx.rule {
        VarianceRule::LeCun => 1.0 / ctx.n_in as f64,
        VarianceRule::Kaiming => 2.0 / ctx.n_in as f64,
        VarianceRule::Glorot => 2.0 / (ctx.n_in + ctx.n_out) as f64,
    };
    var.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Every factor drawn from `N(0, σ_w²)`.
    Standard,
    /// Every factor drawn from `N(0, σ_w^(2/D))`.
    VarMatch,
    /// VarMatch with factor magnitudes truncated to
    /// `(eps^(1/D), min{1, (2σ_w)^(1/D)})`.
    DwfTruncated { eps: f64 },
    /// Balanced factorization of a single `N(0, σ_w²)` draw.
    Root,
    /// Gaussian product factors with the log-gamma series cut at `k_max`.
    GpfTruncated { k_max: usize },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::DwfTruncated {
            eps: DEFAULT_TRUNCATION_EPS,
        }
    }
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitScheme::DwfTruncated { eps } if !(eps > 0.0) => Err(DwfError::Config(format!(
                "truncation eps must be positive, got {eps}"
            ))),
            InitScheme::GpfTruncated { k_max: 0 } => {
                Err(DwfError::Config("GPF series cutoff k_max must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

fn check_depth(depth: usize) -> Result<()> {
    if depth < 2 {
        return Err(DwfError::Config(format!(
            "factorization depth must be at least 2, got {depth}"
        )));
    }
    Ok(())
}

/// Factor arrays for a layer described by `ctx`.
pub fn sample_factor_weights(
    ctx: &LayerInitContext,
    scheme: &InitScheme,
    depth: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<f64>>> {
    sample_factors(base_sigma(ctx), scheme, depth, n, rng)
}

/// Factor arrays for `n` weights with base standard deviation `sigma_w`.
pub fn sample_factors(
    sigma_w: f64,
    scheme: &InitScheme,
    depth: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<f64>>> {
    check_depth(depth)?;
    scheme.validate()?;
    if !(sigma_w > 0.0) || !sigma_w.is_finite() {
        return Err(DwfError::Config(format!(
            "base sigma must be positive and finite, got {sigma_w}"
        )));
    }
    let inv_d = 1.0 / depth as f64;
    match *scheme {
        InitScheme::Standard => Ok((0..depth)
            .map(|_| (0..n).map(|_| sigma_w * rng.normal()).collect())
            .collect()),
        InitScheme::VarMatch => {
            let s = sigma_w.powf(inv_d);
            Ok((0..depth)
                .map(|_| (0..n).map(|_| s * rng.normal()).collect())
                .collect())
        }
        InitScheme::DwfTruncated { eps } => {
            let s = sigma_w.powf(inv_d);
            let lo = eps.powf(inv_d);
            let hi = (2.0 * sigma_w).powf(inv_d).min(1.0);
            if lo >= hi {
                return Err(DwfError::Init(format!(
                    "empty truncation interval: eps {eps} is not below min(1, 2*sigma_w) = {}",
                    (2.0 * sigma_w).min(1.0)
                )));
            }
            let mut factors = Vec::with_capacity(depth);
            for _ in 0..depth {
                let mut f = Vec::with_capacity(n);
                for _ in 0..n {
                    f.push(truncated_normal(rng, s, lo, hi)?);
                }
                factors.push(f);
            }
            Ok(factors)
        }
        InitScheme::Root => {
            let mut factors = vec![vec![0.0; n]; depth];
            for j in 0..n {
                let w = sigma_w * rng.normal();
                let r = w.abs().powf(inv_d);
                factors[0][j] = if w < 0.0 { -r } else { r };
                for f in &mut factors[1..] {
                    f[j] = r;
                }
            }
            Ok(factors)
        }
        InitScheme::GpfTruncated { k_max } => Ok((0..depth)
            .map(|_| (0..n).map(|_| gpf_sample(depth, sigma_w, k_max, rng)).collect())
            .collect()),
    }
}

/// `N(0, s²)` conditioned on `lo < |x| < hi`.
fn truncated_normal(rng: &mut SeededRng, s: f64, lo: f64, hi: f64) -> Result<f64> {
    for _ in 0..REJECTION_CAP {
        let x = s * rng.normal();
        let a = x.abs();
        if a > lo && a < hi {
            return Ok(x);
        }
    }
    Err(DwfError::Init(format!(
        "no draw in ({lo}, {hi}) after {REJECTION_CAP} proposals with sigma {s}"
    )))
}

/// One factor from the Gaussian product factor law with the series cut at
/// `k_max`. The product of `depth` independent draws is approximately
/// `N(0, σ_w²)`.
pub fn gpf_sample(depth: usize, sigma_w: f64, k_max: usize, rng: &mut SeededRng) -> f64 {
    let d = depth as f64;
    let shape = 1.0 / d;
    let mut log_mag = (2.0 * sigma_w * sigma_w).ln() / (2.0 * d) - rng.gamma(shape);
    for k in 1..=k_max {
        let kf = k as f64;
        log_mag -= rng.gamma(shape) / (2.0 * kf + 1.0) - (1.0 + 1.0 / kf).ln() / (2.0 * d);
    }
    rng.rademacher() * log_mag.exp()
}

/// Bias factors: the weight scheme applied with `σ_b = BIAS_SIGMA`.
pub fn init_biases(
    scheme: &InitScheme,
    depth: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<f64>>> {
    sample_factors(BIAS_SIGMA, scheme, depth, n, rng)
}

/// Per-layer activation variances of a bias-free linear chain of equal width
/// driven by standard normal inputs. Entry 0 is the input variance.
pub fn linear_chain_activation_variances(
    width: usize,
    layers: usize,
    samples: usize,
    rule: VarianceRule,
    scheme: &InitScheme,
    depth: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    use crate::factorization::FactorizedParam;
    use crate::ndcore::{matmul, stats, DenseMatrix};

    let ctx = LayerInitContext::new(width, width, rule)?;
    let mut a = DenseMatrix::from_vec(
        samples,
        width,
        (0..samples * width).map(|_| rng.normal()).collect(),
    )?;
    let mut vars = vec![stats::variance(a.as_slice())];
    for _ in 0..layers {
        let factors = sample_factor_weights(&ctx, scheme, depth, width * width, rng)?;
        let p = FactorizedParam::new(width, width, factors)?;
        let mut w = vec![0.0; width * width];
        p.collapse_into(&mut w);
        a = matmul(&a, &DenseMatrix::from_vec(width, width, w)?)?;
        vars.push(stats::variance(a.as_slice()));
    }
    Ok(vars)
}
