//! Weibull proportional-hazards transition intensities.
//!
//! A transition with shape `α`, scale `λ = exp(β₀)` and linear predictor `η`
//! has hazard `αλ t^(α-1) e^η` and cumulative hazard `λ t^α e^η`. Times are in
//! years.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The three transitions of the illness-death process, in `vec(B)` column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    /// Initial state to illness (fracture to refracture).
    InitialToIllness,
    /// Initial state directly to death.
    InitialToDeath,
    /// Illness to death, on the clock reset at illness onset.
    IllnessToDeath,
}

impl Transition {
    pub const ALL: [Transition; 3] = [
        Transition::InitialToIllness,
        Transition::InitialToDeath,
        Transition::IllnessToDeath,
    ];

    pub fn index(self) -> usize {
        match self {
            Transition::InitialToIllness => 0,
            Transition::InitialToDeath => 1,
            Transition::IllnessToDeath => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short label used in files: `FR`, `FD`, `RD`.
    pub fn label(self) -> &'static str {
        match self {
            Transition::InitialToIllness => "FR",
            Transition::InitialToDeath => "FD",
            Transition::IllnessToDeath => "RD",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.label() == label)
    }
}

/// Log hazard-ratio `η = x'β + b`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct LinearPredictor<T>(pub T);

impl<T: Scalar> LinearPredictor<T> {
    pub fn zero() -> Self {
        Self(T::zero())
    }

    /// `x'β + b`; the caller guarantees matching lengths.
    pub fn compute(covariates: &[T], coefficients: &[T], effect: T) -> Self {
        debug_assert_eq!(covariates.len(), coefficients.len());
        let fixed: T = covariates
            .iter()
            .zip(coefficients)
            .map(|(&x, &b)| x * b)
            .sum();
        Self(fixed + effect)
    }

    pub fn value(self) -> T {
        self.0
    }
}

/// Weibull shape, log-scale intercept and regression coefficients of one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams<T = f64> {
    pub shape: T,
    /// `β₀ = log λ`.
    pub intercept: T,
    pub coefficients: Vec<T>,
}

impl<T: Scalar> TransitionParams<T> {
    pub fn new(shape: T, intercept: T, coefficients: Vec<T>) -> Result<Self> {
        let p = Self {
            shape,
            intercept,
            coefficients,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters from the natural scale `λ` rather than its log.
    pub fn from_scale(shape: T, scale: T, coefficients: Vec<T>) -> Result<Self> {
        if !(scale > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Self::new(shape, scale.ln(), coefficients)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > T::zero()) || !self.shape.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Weibull shape must be positive and finite, got {}",
                self.shape
            )));
        }
        if !self.intercept.is_finite() || self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("transition parameters".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> T {
        self.intercept.exp()
    }

    pub fn arity(&self) -> usize {
        self.coefficients.len()
    }

    pub fn predictor(&self, covariates: &[T], effect: T) -> LinearPredictor<T> {
        LinearPredictor::compute(covariates, &self.coefficients, effect)
    }

    /// `log h(t) = log α + β₀ + (α-1) log t + η`.
    pub fn log_hazard(&self, eta: LinearPredictor<T>, t: T) -> Result<T> {
        if !(t > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "hazard needs t > 0, got {t}"
            )));
        }
        let v = self.shape.ln() + self.intercept + (self.shape - T::one()) * t.ln() + eta.0;
        if v.is_nan() {
            return Err(Error::NonFinite("log hazard".into()));
        }
        Ok(v)
    }

    pub fn hazard(&self, eta: LinearPredictor<T>, t: T) -> Result<T> {
        let h = self.log_hazard(eta, t)?.exp();
        if !h.is_finite() {
            return Err(Error::NonFinite("hazard".into()));
        }
        Ok(h)
    }

    /// `Λ(t) = λ t^α e^η`, with `Λ(0) = 0`.
    pub fn cum_hazard(&self, eta: LinearPredictor<T>, t: T) -> Result<T> {
        if t < T::zero() || t.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "cumulative hazard needs t >= 0, got {t}"
            )));
        }
        Ok(self.cum_hazard_unchecked(eta.0, t))
    }

    /// Cumulative hazard for `t >= 0` without argument checks.
    #[inline]
    pub(crate) fn cum_hazard_unchecked(&self, eta: T, t: T) -> T {
        if t == T::zero() {
            return T::zero();
        }
        (self.intercept + eta + self.shape * t.ln()).exp()
    }

    /// Hazard for `t > 0` without argument checks.
    #[inline]
    pub(crate) fn hazard_unchecked(&self, eta: T, t: T) -> T {
        (self.shape.ln() + self.intercept + (self.shape - T::one()) * t.ln() + eta).exp()
    }

    /// Time `t` with `Λ(t) = u`, i.e. `(u e^{-η} / λ)^{1/α}`.
    pub fn inv_cum_hazard(&self, eta: LinearPredictor<T>, u: T) -> Result<T> {
        if u < T::zero() || u.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "inverse cumulative hazard needs u >= 0, got {u}"
            )));
        }
        if u == T::zero() {
            return Ok(T::zero());
        }
        Ok(((u.ln() - eta.0 - self.intercept) / self.shape).exp())
    }
}
