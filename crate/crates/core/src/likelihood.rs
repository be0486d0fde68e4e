//! Right-censored illness-death log-likelihood.
//!
//! Each subject contributes up to three Weibull exposures: time in the
//! initial state (at risk for both initial transitions) and, after illness,
//! time since illness onset (at risk for illness-to-death). The second clock
//! restarts at illness onset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{BetweenCov, LerouxMix, RandomEffects};
use crate::hazard::{LinearPredictor, Transition, TransitionParams};
use crate::scalar::Scalar;

/// How a subject left the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FirstExit<T = f64> {
    Censored,
    Death,
    /// Illness at `t1`, then followed for `sojourn` years on the reset clock,
    /// ending in death (`died = true`) or censoring.
    Illness {
        sojourn: T,
        died: bool,
    },
}

impl<T> FirstExit<T> {
    /// File code: 0 censored, 1 illness, 2 death.
    pub fn code(&self) -> u8 {
        match self {
            FirstExit::Censored => 0,
            FirstExit::Illness { .. } => 1,
            FirstExit::Death => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject<T = f64> {
    /// 0-based region index.
    pub region: usize,
    pub covariates: Vec<T>,
    /// Years from entry to exit from the initial state (or censoring).
    pub t1: T,
    pub exit: FirstExit<T>,
}

impl<T: Scalar> Subject<T> {
    pub fn validate(&self, n_regions: usize, arity: usize) -> Result<()> {
        if self.region >= n_regions {
            return Err(Error::Data(format!(
                "region {} outside 1..={n_regions}",
                self.region + 1
            )));
        }
        if self.covariates.len() != arity {
            return Err(Error::Data(format!(
                "subject has {} covariates, model expects {arity}",
                self.covariates.len()
            )));
        }
        if self.covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite covariate".into()));
        }
        if !(self.t1 > T::zero()) || !self.t1.is_finite() {
            return Err(Error::Data(format!("t1 must be positive, got {}", self.t1)));
        }
        if let FirstExit::Illness { sojourn, .. } = self.exit {
            if !(sojourn > T::zero()) || !sojourn.is_finite() {
                return Err(Error::Data(format!("t2 must be positive, got {sojourn}")));
            }
        }
        Ok(())
    }

    /// `(time at risk, event indicator)` for a transition, if the subject was at risk.
    pub fn exposure(&self, transition: Transition) -> Option<(T, bool)> {
        match transition {
            Transition::InitialToIllness => {
                Some((self.t1, matches!(self.exit, FirstExit::Illness { .. })))
            }
            Transition::InitialToDeath => Some((self.t1, matches!(self.exit, FirstExit::Death))),
            Transition::IllnessToDeath => match self.exit {
                FirstExit::Illness { sojourn, died } => Some((sojourn, died)),
                _ => None,
            },
        }
    }
}

/// Parameters, random effects and hyperparameters of the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T = f64> {
    /// Indexed by [`Transition::index`].
    pub params: [TransitionParams<T>; 3],
    pub effects: RandomEffects<T>,
    pub mix: LerouxMix<T>,
    pub between: BetweenCov<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Exponential null model: `β = 0`, `α = 1`, `B = 0`, `γ = 0.5`, `Σ_b = I`.
    pub fn initial(n_regions: usize, arity: usize) -> Self {
        let p = TransitionParams {
            shape: T::one(),
            intercept: T::zero(),
            coefficients: vec![T::zero(); arity],
        };
        Self {
            params: [p.clone(), p.clone(), p],
            effects: RandomEffects::zeros(n_regions),
            mix: LerouxMix::new(T::c(0.5)).unwrap(),
            between: BetweenCov::identity(),
        }
    }

    pub fn n_regions(&self) -> usize {
        self.effects.n_regions()
    }

    pub fn arity(&self) -> usize {
        self.params[0].arity()
    }

    pub fn param(&self, t: Transition) -> &TransitionParams<T> {
        &self.params[t.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let arity = self.arity();
        for p in &self.params {
            p.validate()?;
            if p.arity() != arity {
                return Err(Error::InvalidArgument(
                    "transitions disagree on covariate count".into(),
                ));
            }
        }
        if self.effects.as_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("random effects".into()));
        }
        LerouxMix::new(self.mix.gamma())?;
        self.between.validate()
    }

    pub fn predictor(&self, t: Transition, covariates: &[T], region: usize) -> LinearPredictor<T> {
        self.params[t.index()].predictor(covariates, self.effects.get(region, t.index()))
    }
}

#[inline]
fn exposure_loglik<T: Scalar>(p: &TransitionParams<T>, eta: T, t: T, event: bool) -> T {
    let cum = p.cum_hazard_unchecked(eta, t);
    if event {
        p.shape.ln() + p.intercept + (p.shape - T::one()) * t.ln() + eta - cum
    } else {
        -cum
    }
}

/// Log-likelihood contribution of one subject.
pub fn subject_loglik<T: Scalar>(s: &Subject<T>, m: &ModelState<T>) -> Result<T> {
    s.validate(m.n_regions(), m.arity())?;
    Ok(subject_loglik_unchecked(s, m))
}

fn subject_loglik_unchecked<T: Scalar>(s: &Subject<T>, m: &ModelState<T>) -> T {
    Transition::ALL
        .iter()
        .filter_map(|&tr| {
            s.exposure(tr).map(|(t, event)| {
                let eta = m.predictor(tr, &s.covariates, s.region).0;
                exposure_loglik(m.param(tr), eta, t, event)
            })
        })
        .sum()
}

fn validate_all<T: Scalar>(data: &[Subject<T>], m: &ModelState<T>) -> Result<()> {
    let (k, l) = (m.n_regions(), m.arity());
    data.iter().enumerate().try_for_each(|(i, s)| {
        s.validate(k, l)
            .map_err(|e| Error::Data(format!("subject {}: {e}", i + 1)))
    })
}

/// Serial sum of subject contributions.
pub fn cohort_loglik<T: Scalar>(data: &[Subject<T>], m: &ModelState<T>) -> Result<T> {
    validate_all(data, m)?;
    let v: T = data.iter().map(|s| subject_loglik_unchecked(s, m)).sum();
    if v.is_nan() {
        return Err(Error::NonFinite("cohort log-likelihood".into()));
    }
    Ok(v)
}

/// Parallel sum over fixed-size chunks; chunk partials are added in order, so
/// the result does not depend on the thread count.
pub fn cohort_loglik_parallel<T: Scalar>(
    data: &[Subject<T>],
    m: &ModelState<T>,
    chunk: usize,
) -> Result<T> {
    validate_all(data, m)?;
    let partials: Vec<T> = data
        .par_chunks(chunk.max(1))
        .map(|c| c.iter().map(|s| subject_loglik_unchecked(s, m)).sum())
        .collect();
    let v: T = partials.into_iter().sum();
    if v.is_nan() {
        return Err(Error::NonFinite("cohort log-likelihood".into()));
    }
    Ok(v)
}

/// Gradient of the cohort log-likelihood. Shape derivatives are with respect
/// to `log α`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikGradient<T> {
    pub log_shape: [T; 3],
    pub intercept: [T; 3],
    pub coefficients: [Vec<T>; 3],
    pub effects: RandomEffects<T>,
}

pub fn cohort_loglik_gradient<T: Scalar>(
    data: &[Subject<T>],
    m: &ModelState<T>,
) -> Result<(T, LogLikGradient<T>)> {
    validate_all(data, m)?;
    let l = m.arity();
    let mut g = LogLikGradient {
        log_shape: [T::zero(); 3],
        intercept: [T::zero(); 3],
        coefficients: [vec![T::zero(); l], vec![T::zero(); l], vec![T::zero(); l]],
        effects: RandomEffects::zeros(m.n_regions()),
    };
    let mut total = T::zero();
    for s in data {
        for tr in Transition::ALL {
            let Some((t, event)) = s.exposure(tr) else {
                continue;
            };
            let j = tr.index();
            let p = m.param(tr);
            let eta = m.predictor(tr, &s.covariates, s.region).0;
            total += exposure_loglik(p, eta, t, event);
            let cum = p.cum_hazard_unchecked(eta, t);
            let d = if event { T::one() } else { T::zero() };
            let resid = d - cum;
            let alpha_log_t = p.shape * t.ln();
            g.log_shape[j] += d * (T::one() + alpha_log_t) - cum * alpha_log_t;
            g.intercept[j] += resid;
            for (gc, &x) in g.coefficients[j].iter_mut().zip(&s.covariates) {
                *gc += resid * x;
            }
            let cur = g.effects.get(s.region, j);
            g.effects.set(s.region, j, cur + resid);
        }
    }
    if total.is_nan() {
        return Err(Error::NonFinite("cohort log-likelihood".into()));
    }
    Ok((total, g))
}

/// Subtracts cohort means from the flagged covariate columns and returns the
/// centering constants (zero for unflagged columns).
pub fn center_covariates<T: Scalar>(data: &mut [Subject<T>], center: &[bool]) -> Vec<T> {
    let mut means = vec![T::zero(); center.len()];
    if data.is_empty() {
        return means;
    }
    let n = T::from_usize(data.len()).unwrap();
    for (c, mean) in means.iter_mut().enumerate() {
        if center[c] {
            *mean = data.iter().map(|s| s.covariates[c]).sum::<T>() / n;
        }
    }
    apply_centering(data, &means);
    means
}

pub fn apply_centering<T: Scalar>(data: &mut [Subject<T>], means: &[T]) {
    for s in data {
        for (x, &m) in s.covariates.iter_mut().zip(means) {
            *x -= m;
        }
    }
}
