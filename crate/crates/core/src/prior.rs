//! Prior densities and the unconstrained parameterization used by the sampler.
//!
//! The prior is a product of independent pieces: Gaussian on every intercept
//! and coefficient, a shape prior on each Weibull `α`, a Wishart on the
//! between-transition precision `Σ_b⁻¹` and a flat density on the clipped
//! Leroux domain `[0, 1 - GAMMA_EPS]`. The density of `B` given the
//! hyperparameters lives in [`crate::gmrf`].
//!
//! Unconstrained layout, for `L` covariates and `K` regions:
//!
//! ```text
//! [log α, β₀, β₁..β_L] × 3 transitions | vec(B) (3K) | logit(γ/(1-ε)) | log τ × 3 | atanh z × 3
//! ```
//!
//! where `z` are the canonical partial correlations of the between-transition
//! correlation matrix: `z₁₂ = ρ₁₂`, `z₁₃ = ρ₁₃`,
//! `z₂₃ = (ρ₂₃ - ρ₁₂ρ₁₃) / sqrt((1-ρ₁₂²)(1-ρ₁₃²))`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma, ln_gamma};

use crate::error::{Error, Result};
use crate::gmrf::{BetweenCov, LerouxMix, RandomEffects, GAMMA_EPS};
use crate::hazard::TransitionParams;
use crate::likelihood::ModelState;
use crate::linalg::{self, Mat3};

/// Default rate of the penalized-complexity shape prior. Arbitrary.
pub const DEFAULT_PC_RATE: f64 = 5.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Prior on each Weibull shape `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapePrior {
    /// `log α ~ N(0, sd²)`.
    LogNormal { sd: f64 },
    /// Penalized-complexity prior shrinking towards the exponential model,
    /// `π(α) = ½ λ exp(-λ d(α)) |d'(α)|` with `d = sqrt(2 KLD)`.
    PcNumeric { rate: f64 },
}

impl Default for ShapePrior {
    fn default() -> Self {
        ShapePrior::LogNormal { sd: 1.0 }
    }
}

impl ShapePrior {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            ShapePrior::LogNormal { sd } => sd,
            ShapePrior::PcNumeric { rate } => rate,
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "shape prior parameter must be positive, got {v}"
            )));
        }
        Ok(())
    }

    /// Log-density in `α`; `-∞` for `α ≤ 0`.
    pub fn log_density(&self, alpha: f64) -> f64 {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return f64::NEG_INFINITY;
        }
        match *self {
            ShapePrior::LogNormal { sd } => {
                let z = alpha.ln() / sd;
                -alpha.ln() - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
            }
            ShapePrior::PcNumeric { rate } => {
                let (d, dd) = pc_distance(alpha);
                if !d.is_finite() || !dd.is_finite() {
                    // Γ(1 + 1/α) overflows for tiny α, where the density underflows.
                    return f64::NEG_INFINITY;
                }
                (0.5 * rate).ln() - rate * d + dd.abs().ln()
            }
        }
    }
}

/// `KL(Weibull(α, 1) ‖ Exponential(1))`.
pub fn weibull_kld(alpha: f64) -> f64 {
    alpha.ln() - EULER_GAMMA * (alpha - 1.0) / alpha - 1.0 + gamma(1.0 + 1.0 / alpha)
}

fn weibull_kld_derivative(alpha: f64) -> f64 {
    let s = 1.0 / alpha;
    s - EULER_GAMMA * s * s - gamma(1.0 + s) * digamma(1.0 + s) * s * s
}

/// `d(α) = sqrt(2 KLD(α))` and its derivative. Near `α = 1` both come from
/// the quadratic expansion `KLD ≈ κ (α-1)² / 2`.
fn pc_distance(alpha: f64) -> (f64, f64) {
    let kappa = (1.0 - EULER_GAMMA).powi(2) + std::f64::consts::PI.powi(2) / 6.0;
    let h = alpha - 1.0;
    if h.abs() < 1e-4 {
        let sign = if h < 0.0 { -1.0 } else { 1.0 };
        return (kappa.sqrt() * h.abs(), sign * kappa.sqrt());
    }
    let kld = weibull_kld(alpha).max(0.0);
    let d = (2.0 * kld).sqrt();
    (d, weibull_kld_derivative(alpha) / d)
}

/// Prior settings. `γ` always has the flat prior on its clipped domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Gaussian precision for every intercept and coefficient.
    pub beta_precision: f64,
    pub wishart_df: f64,
    pub wishart_scale: Mat3<f64>,
    pub shape_prior: ShapePrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta_precision: 0.001,
            wishart_df: 7.0,
            wishart_scale: linalg::identity3(),
            shape_prior: ShapePrior::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_precision > 0.0) || !self.beta_precision.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta_precision must be positive, got {}",
                self.beta_precision
            )));
        }
        if !(self.wishart_df > 2.0) || !self.wishart_df.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "wishart_df must exceed 2, got {}",
                self.wishart_df
            )));
        }
        let r = &self.wishart_scale;
        if (0..3).any(|i| (0..3).any(|j| (r[i][j] - r[j][i]).abs() > 1e-12)) {
            return Err(Error::InvalidArgument(
                "wishart_scale must be symmetric".into(),
            ));
        }
        linalg::cholesky3(r).map_err(|_| {
            Error::InvalidArgument("wishart_scale must be positive definite".into())
        })?;
        self.shape_prior.validate()
    }

    /// `R⁻¹`.
    pub fn wishart_scale_inverse(&self) -> Result<Mat3<f64>> {
        Ok(linalg::symmetrize3(&linalg::inverse3(&self.wishart_scale)?))
    }

    pub fn beta_log_density(&self, beta: f64) -> f64 {
        0.5 * (self.beta_precision.ln() - (2.0 * std::f64::consts::PI).ln())
            - 0.5 * self.beta_precision * beta * beta
    }
}

/// `log Γ₃(a)`.
pub fn ln_multigamma3(a: f64) -> f64 {
    3.0 * 2.0 / 4.0 * std::f64::consts::PI.ln()
        + (0..3).map(|j| ln_gamma(a - 0.5 * j as f64)).sum::<f64>()
}

/// Wishart log-density of a 3×3 matrix `w` with `df` degrees of freedom and
/// scale `r`. Returns `-∞` when `w` is not positive definite.
pub fn wishart_log_density(w: &Mat3<f64>, df: f64, r: &Mat3<f64>) -> Result<f64> {
    let det_w = linalg::det3(w);
    if linalg::cholesky3(w).is_err() || !(det_w > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let r_inv = linalg::inverse3(r)?;
    let p = 3.0;
    Ok(0.5 * (df - p - 1.0) * det_w.ln()
        - 0.5 * linalg::trace3(&linalg::matmul3(&r_inv, w))
        - 0.5 * df * p * std::f64::consts::LN_2
        - 0.5 * df * linalg::det3(r).ln()
        - ln_multigamma3(0.5 * df))
}

/// Sum of the independent prior components. Outside the support the result is
/// `Ok(-∞)`; errors are reserved for numerical failures.
pub fn log_prior(m: &ModelState, c: &PriorConfig) -> Result<f64> {
    let mut total = 0.0;
    for p in &m.params {
        if !(p.shape > 0.0) || !p.shape.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        total += c.shape_prior.log_density(p.shape);
        total += c.beta_log_density(p.intercept);
        total += p
            .coefficients
            .iter()
            .map(|&b| c.beta_log_density(b))
            .sum::<f64>();
    }
    let gamma = m.mix.gamma();
    if !(0.0..=LerouxMix::<f64>::upper()).contains(&gamma) {
        return Ok(f64::NEG_INFINITY);
    }
    total -= (1.0 - GAMMA_EPS).ln();
    if m.between.validate().is_err() {
        return Ok(f64::NEG_INFINITY);
    }
    let w = m.between.precision()?;
    total += wishart_log_density(&w, c.wishart_df, &c.wishart_scale)?;
    if total.is_nan() {
        return Err(Error::NonFinite("log prior".into()));
    }
    Ok(total)
}

/// Length of the unconstrained vector.
pub fn unconstrained_len(n_regions: usize, arity: usize) -> usize {
    3 * (arity + 2) + 3 * n_regions + 7
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Canonical partial correlations of the ρ triple.
pub fn partial_correlations(rho: [f64; 3]) -> Result<[f64; 3]> {
    let [r12, r13, r23] = rho;
    let denom = ((1.0 - r12 * r12) * (1.0 - r13 * r13)).sqrt();
    let z23 = (r23 - r12 * r13) / denom;
    if !(z23.abs() < 1.0) || !(r12.abs() < 1.0) || !(r13.abs() < 1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "correlations {rho:?} do not form a positive definite matrix"
        )));
    }
    Ok([r12, r13, z23])
}

pub fn correlations_from_partial(z: [f64; 3]) -> [f64; 3] {
    let [z12, z13, z23] = z;
    [
        z12,
        z13,
        z23 * ((1.0 - z12 * z12) * (1.0 - z13 * z13)).sqrt() + z12 * z13,
    ]
}

pub fn to_unconstrained(m: &ModelState) -> Result<Vec<f64>> {
    m.validate()?;
    let mut v = Vec::with_capacity(unconstrained_len(m.n_regions(), m.arity()));
    for p in &m.params {
        v.push(p.shape.ln());
        v.push(p.intercept);
        v.extend_from_slice(&p.coefficients);
    }
    v.extend_from_slice(m.effects.as_vec());
    let g = m.mix.gamma() / (1.0 - GAMMA_EPS);
    if g <= 0.0 || g >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "Leroux mixing {} lies on the boundary of its domain and has no finite logit",
            m.mix.gamma()
        )));
    }
    v.push(logit(g));
    v.extend(m.between.tau.iter().map(|t| t.ln()));
    v.extend(
        partial_correlations(m.between.rho)?
            .iter()
            .map(|z| z.atanh()),
    );
    Ok(v)
}

/// Inverse of [`to_unconstrained`], with the log-Jacobian of the map from `v`
/// to `(α, β₀, β, B, γ, Σ_b⁻¹)`, so that `log_prior + log_jacobian` is the
/// prior log-density of `v`.
pub fn from_unconstrained(v: &[f64], n_regions: usize, arity: usize) -> Result<(ModelState, f64)> {
    let n = unconstrained_len(n_regions, arity);
    if v.len() != n {
        return Err(Error::InvalidArgument(format!(
            "unconstrained vector has length {}, expected {n}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("unconstrained vector".into()));
    }
    let mut log_jac = 0.0;
    let mut pos = 0;
    let mut params = Vec::with_capacity(3);
    for _ in 0..3 {
        let log_shape = v[pos];
        log_jac += log_shape;
        params.push(TransitionParams::new(
            log_shape.exp(),
            v[pos + 1],
            v[pos + 2..pos + 2 + arity].to_vec(),
        )?);
        pos += arity + 2;
    }
    let effects = RandomEffects::from_vec(n_regions, v[pos..pos + 3 * n_regions].to_vec())?;
    pos += 3 * n_regions;

    let s = sigmoid(v[pos]);
    let upper = 1.0 - GAMMA_EPS;
    // Keep the image inside the closed domain under rounding.
    let gamma = (upper * s).clamp(0.0, LerouxMix::<f64>::upper());
    log_jac += upper.ln() + log_sigmoid(v[pos]) + log_sigmoid(-v[pos]);
    pos += 1;

    let log_tau = [v[pos], v[pos + 1], v[pos + 2]];
    let tau = log_tau.map(f64::exp);
    pos += 3;
    let w = [v[pos], v[pos + 1], v[pos + 2]];
    let z = w.map(f64::tanh);
    let rho = correlations_from_partial(z);
    let between = BetweenCov::new(tau, rho)?;

    // (log τ, w) -> τ -> σ = τ^(-1/2) -> Σ -> Σ⁻¹, plus the partial-correlation map.
    let det_c = correlation_det(rho);
    if !(det_c > 0.0) {
        return Err(Error::NotPositiveDefinite("correlation matrix".into()));
    }
    let log_det_c = det_c.ln();
    log_jac += 2.0 * log_tau.iter().sum::<f64>() - 4.0 * log_det_c;
    log_jac += z.iter().map(|zk| (1.0 - zk * zk).ln()).sum::<f64>()
        + 0.5 * (1.0 - z[0] * z[0]).ln()
        + 0.5 * (1.0 - z[1] * z[1]).ln();

    let state = ModelState {
        params: [params[0].clone(), params[1].clone(), params[2].clone()],
        effects,
        mix: LerouxMix::new(gamma)?,
        between,
    };
    Ok((state, log_jac))
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn correlation_det(rho: [f64; 3]) -> f64 {
    let [a, b, c] = rho;
    1.0 + 2.0 * a * b * c - a * a - b * b - c * c
}
