//! Sojourn survival, transition/occupation probabilities and cumulative
//! incidences of the illness-death process, and their posterior summaries.
//!
//! States: 1 initial, 2 illness, 3 death. With cumulative hazards `Λ` and
//! the illness-to-death clock reset at illness onset:
//!
//! * `S₁(t) = exp(-Λ_FR(t) - Λ_FD(t))`
//! * `p₁₁(s,t) = S₁(t) / S₁(s)`
//! * `p₂₂(s,t | t₁₂) = exp(-[Λ_RD(t-t₁₂) - Λ_RD(s-t₁₂)])`
//! * `p₁₂(s,t) = ∫ₛᵗ p₁₁(s,u) h_FR(u) p₂₂(u,t | u) du`
//! * `p₁₃(s,t) = ∫ₛᵗ p₁₁(s,u) [h_FD(u) + h_FR(u) (1 - p₂₂(u,t | u))] du`
//! * `p₂₃(s,t | t₁₂) = 1 - p₂₂(s,t | t₁₂)`
//! * `F₁ⱼ(t) = ∫₀ᵗ h₁ⱼ(u) S₁(u) du`

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::Transition;
use crate::likelihood::ModelState;
use crate::quadrature::{integrate, integrate_from_zero, QuadConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure {
    S1,
    P11,
    P12,
    P13,
    P22,
    P23,
    F12,
    F13,
}

impl Measure {
    pub const ALL: [Measure; 8] = [
        Measure::S1,
        Measure::P11,
        Measure::P12,
        Measure::P13,
        Measure::P22,
        Measure::P23,
        Measure::F12,
        Measure::F13,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Measure::S1 => "S1",
            Measure::P11 => "p11",
            Measure::P12 => "p12",
            Measure::P13 => "p13",
            Measure::P22 => "p22",
            Measure::P23 => "p23",
            Measure::F12 => "F12",
            Measure::F13 => "F13",
        }
    }

    /// Measures evaluated from the illness state need the illness onset time.
    pub fn needs_onset(self) -> bool {
        matches!(self, Measure::P22 | Measure::P23)
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown measure `{s}`")))
    }
}

/// Covariates (on the model's centered scale) and region of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile<T = f64> {
    pub covariates: Vec<T>,
    pub region: usize,
}

impl<T: Scalar> Profile<T> {
    pub fn validate<U: Scalar>(&self, m: &ModelState<U>) -> Result<()> {
        if self.covariates.len() != m.arity() {
            return Err(Error::InvalidArgument(format!(
                "profile has {} covariates, model expects {}",
                self.covariates.len(),
                m.arity()
            )));
        }
        if self.region >= m.n_regions() {
            return Err(Error::InvalidArgument(format!(
                "profile region {} outside 1..={}",
                self.region + 1,
                m.n_regions()
            )));
        }
        Ok(())
    }
}

/// A measure requested on an increasing time grid, with its conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeGrid<T = f64> {
    pub measure: Measure,
    pub times: Vec<T>,
    /// Start of the interval for `p_ij(s, t)`; zero gives occupation probabilities.
    pub start: T,
    /// Illness onset time `t₁₂`, required by `p22`/`p23`.
    pub onset: Option<T>,
}

impl<T: Scalar> OutcomeGrid<T> {
    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::InvalidArgument("empty time grid".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "time grid must be increasing".into(),
            ));
        }
        if self.start < T::zero() || self.start > self.times[0] {
            return Err(Error::InvalidArgument(format!(
                "start {} must satisfy 0 <= s <= min(times)",
                self.start
            )));
        }
        match (self.measure.needs_onset(), self.onset) {
            (true, None) => Err(Error::InvalidArgument(format!(
                "{} needs an illness onset time t12",
                self.measure
            ))),
            (true, Some(t12)) if t12 < T::zero() || t12 > self.start => Err(
                Error::InvalidArgument(format!("t12 = {t12} must satisfy 0 <= t12 <= s")),
            ),
            _ => Ok(()),
        }
    }
}

/// Evaluation settings: quadrature tolerance and the allowed slack for
/// probability identities and clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeConfig<T> {
    pub quad: QuadConfig<T>,
    pub identity_tol: T,
    pub check_identities: bool,
}

impl<T: Scalar> Default for OutcomeConfig<T> {
    fn default() -> Self {
        Self {
            quad: QuadConfig::default(),
            identity_tol: T::c(1e-8).max(T::epsilon() * T::c(256.0)),
            check_identities: true,
        }
    }
}

/// Hazard pieces of one profile, evaluated once per call.
struct Intensities<'a, T> {
    m: &'a ModelState<T>,
    eta: [T; 3],
}

impl<'a, T: Scalar> Intensities<'a, T> {
    fn new(m: &'a ModelState<T>, p: &Profile<T>) -> Result<Self> {
        p.validate(m)?;
        let eta = Transition::ALL.map(|tr| m.predictor(tr, &p.covariates, p.region).0);
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("linear predictor".into()));
        }
        Ok(Self { m, eta })
    }

    #[inline]
    fn cum(&self, j: usize, t: T) -> T {
        self.m.params[j].cum_hazard_unchecked(self.eta[j], t)
    }

    #[inline]
    fn hazard(&self, j: usize, t: T) -> T {
        self.m.params[j].hazard_unchecked(self.eta[j], t)
    }

    #[inline]
    fn log_hazard(&self, j: usize, t: T) -> T {
        let p = &self.m.params[j];
        p.shape.ln() + p.intercept + (p.shape - T::one()) * t.ln() + self.eta[j]
    }

    fn shape(&self, j: usize) -> T {
        self.m.params[j].shape
    }

    /// `Λ_FR(t) + Λ_FD(t)`.
    fn cum_initial(&self, t: T) -> T {
        self.cum(0, t) + self.cum(1, t)
    }

    fn p11(&self, s: T, t: T) -> T {
        (self.cum_initial(s) - self.cum_initial(t)).exp()
    }

    fn p22(&self, s: T, t: T, onset: T) -> T {
        (self.cum(2, s - onset) - self.cum(2, t - onset)).exp()
    }

    fn p12(&self, s: T, t: T, quad: &QuadConfig<T>) -> Result<T> {
        let base = self.cum_initial(s);
        let f = |u: T| {
            if u <= T::zero() {
                return T::zero();
            }
            (self.log_hazard(0, u) + base - self.cum_initial(u) - self.cum(2, t - u)).exp()
        };
        if s == T::zero() {
            integrate_from_zero(f, t, self.shape(0), quad)
        } else {
            integrate(f, s, t, quad)
        }
    }

    /// `p₁₃` from its own integral: direct death plus death after illness.
    fn p13_direct(&self, s: T, t: T, quad: &QuadConfig<T>) -> Result<T> {
        let base = self.cum_initial(s);
        let f = |u: T| {
            if u <= T::zero() {
                return T::zero();
            }
            let stay = (base - self.cum_initial(u)).exp();
            let after_illness = -(-self.cum(2, t - u)).exp_m1();
            stay * (self.hazard(1, u) + self.hazard(0, u) * after_illness)
        };
        if s == T::zero() {
            integrate_from_zero(f, t, self.shape(0).min(self.shape(1)), quad)
        } else {
            integrate(f, s, t, quad)
        }
    }

    fn cif(&self, j: usize, t: T, quad: &QuadConfig<T>) -> Result<T> {
        let f = |u: T| {
            if u <= T::zero() {
                return T::zero();
            }
            (self.log_hazard(j, u) - self.cum_initial(u)).exp()
        };
        integrate_from_zero(f, t, self.shape(j), quad)
    }
}

fn check_time<T: Scalar>(name: &str, t: T) -> Result<()> {
    if t < T::zero() || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "{name} must be finite and >= 0, got {t}"
        )));
    }
    Ok(())
}

/// Clamps to [0, 1] when within `tol` of the boundary; errors otherwise.
fn clamp_probability<T: Scalar>(what: &str, v: T, tol: T) -> Result<T> {
    if v.is_nan() {
        return Err(Error::NonFinite(what.to_string()));
    }
    if v < -tol || v > T::one() + tol {
        return Err(Error::Quadrature(format!("{what} = {v} outside [0, 1]")));
    }
    Ok(v.max(T::zero()).min(T::one()))
}

fn check_identity<T: Scalar>(what: &str, sum: T, tol: T) -> Result<()> {
    if (sum - T::one()).abs() > tol {
        return Err(Error::Quadrature(format!(
            "{what} sums to {sum}, off by {}",
            sum - T::one()
        )));
    }
    Ok(())
}

/// `S₁(t)`, the probability of still being in the initial state at `t`.
pub fn sojourn_survival<T: Scalar>(m: &ModelState<T>, p: &Profile<T>, t: T) -> Result<T> {
    check_time("t", t)?;
    let ints = Intensities::new(m, p)?;
    Ok((-ints.cum_initial(t)).exp())
}

/// `p_ij(s, t)` (with `t₁₂` for the illness-state rows).
pub fn transition_probability<T: Scalar>(
    m: &ModelState<T>,
    p: &Profile<T>,
    measure: Measure,
    s: T,
    t: T,
    onset: Option<T>,
    cfg: &OutcomeConfig<T>,
) -> Result<T> {
    check_time("s", s)?;
    check_time("t", t)?;
    if t < s {
        return Err(Error::InvalidArgument(format!(
            "need s <= t, got s={s}, t={t}"
        )));
    }
    let ints = Intensities::new(m, p)?;
    let tol = cfg.identity_tol;
    match measure {
        Measure::S1 => Ok((-ints.cum_initial(t)).exp()),
        Measure::F12 | Measure::F13 => cumulative_incidence(
            m,
            p,
            if measure == Measure::F12 {
                Transition::InitialToIllness
            } else {
                Transition::InitialToDeath
            },
            t,
            cfg,
        ),
        Measure::P11 => Ok(ints.p11(s, t)),
        Measure::P22 | Measure::P23 => {
            let onset = onset.ok_or_else(|| {
                Error::InvalidArgument(format!("{measure} needs an illness onset time t12"))
            })?;
            check_time("t12", onset)?;
            if onset > s {
                return Err(Error::InvalidArgument(format!(
                    "need t12 <= s, got t12={onset}, s={s}"
                )));
            }
            let p22 = ints.p22(s, t, onset);
            if measure == Measure::P22 {
                Ok(p22)
            } else {
                clamp_probability("p23", T::one() - p22, tol)
            }
        }
        Measure::P12 | Measure::P13 => {
            // Each row entry comes from its own integral; the row sum is a check.
            let (p12, p13) = match (measure, cfg.check_identities) {
                (_, true) => (
                    Some(ints.p12(s, t, &cfg.quad)?),
                    Some(ints.p13_direct(s, t, &cfg.quad)?),
                ),
                (Measure::P12, false) => (Some(ints.p12(s, t, &cfg.quad)?), None),
                _ => (None, Some(ints.p13_direct(s, t, &cfg.quad)?)),
            };
            if let (Some(a), Some(b)) = (p12, p13) {
                check_identity("p11 + p12 + p13", ints.p11(s, t) + a + b, tol)?;
            }
            match (measure, p12, p13) {
                (Measure::P12, Some(v), _) => clamp_probability("p12", v, tol),
                (_, _, Some(v)) => clamp_probability("p13", v, tol),
                _ => unreachable!("requested entry is always computed"),
            }
        }
    }
}

/// Cumulative incidence of leaving the initial state through `target`
/// (`InitialToIllness` or `InitialToDeath`) by time `t`.
pub fn cumulative_incidence<T: Scalar>(
    m: &ModelState<T>,
    p: &Profile<T>,
    target: Transition,
    t: T,
    cfg: &OutcomeConfig<T>,
) -> Result<T> {
    check_time("t", t)?;
    if target == Transition::IllnessToDeath {
        return Err(Error::InvalidArgument(
            "cumulative incidence is defined for transitions out of the initial state".into(),
        ));
    }
    let ints = Intensities::new(m, p)?;
    let j = target.index();
    let value = ints.cif(j, t, &cfg.quad)?;
    if cfg.check_identities {
        let other = ints.cif(1 - j, t, &cfg.quad)?;
        let s1 = (-ints.cum_initial(t)).exp();
        check_identity("F12 + F13 + S1", value + other + s1, cfg.identity_tol)?;
    }
    clamp_probability(if j == 0 { "F12" } else { "F13" }, value, cfg.identity_tol)
}

/// Evaluates one grid measure at time `t`.
pub fn evaluate<T: Scalar>(
    m: &ModelState<T>,
    p: &Profile<T>,
    grid: &OutcomeGrid<T>,
    t: T,
    cfg: &OutcomeConfig<T>,
) -> Result<T> {
    transition_probability(m, p, grid.measure, grid.start, t, grid.onset, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// 0-based region.
    pub region: usize,
    pub time: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = q * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Mean, sd, and 2.5%/97.5% quantiles.
pub fn summarize(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    (
        mean,
        sd,
        quantile_sorted(&sorted, 0.025),
        quantile_sorted(&sorted, 0.975),
    )
}

/// Evaluates the grid measure for every draw and summarizes pointwise.
/// Rows are ordered by region, then time.
pub fn posterior_summary<T: Scalar>(
    draws: &[ModelState<T>],
    covariates: &[T],
    regions: &[usize],
    grid: &OutcomeGrid<T>,
    cfg: &OutcomeConfig<T>,
) -> Result<Vec<SummaryRow>> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no posterior draws".into()));
    }
    grid.validate()?;
    let cells: Vec<(usize, T)> = regions
        .iter()
        .flat_map(|&r| grid.times.iter().map(move |&t| (r, t)))
        .collect();
    cells
        .par_iter()
        .map(|&(region, t)| {
            let profile = Profile {
                covariates: covariates.to_vec(),
                region,
            };
            let values = draws
                .iter()
                .map(|m| evaluate(m, &profile, grid, t, cfg).map(Scalar::as_f64))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, sd, q025, q975) = summarize(&values);
            Ok(SummaryRow {
                region,
                time: t.as_f64(),
                mean,
                sd,
                q025,
                q975,
            })
        })
        .collect()
}
