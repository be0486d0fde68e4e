//! Bayesian spatial illness-death models.
//!
//! Three Weibull proportional-hazards transitions (initial to illness,
//! initial to death, illness to death with a clock reset) share region-level
//! random effects drawn from a multivariate Leroux field. The crate covers the
//! model pieces, a Metropolis-within-Gibbs sampler, posterior outcome curves
//! and a cohort simulator.
//!
//! The hazard, field, likelihood, quadrature and outcome code is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below name the common
//! instantiations. Priors, the sampler, the simulator and diagnostics work in
//! `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnostics;
pub mod error;
pub mod gmrf;
pub mod graph;
pub mod hazard;
pub mod likelihood;
pub mod linalg;
pub mod mcmc;
pub mod outcomes;
pub mod prior;
pub mod quadrature;
pub mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use graph::SpatialGraph;
pub use hazard::Transition;
pub use mcmc::{MapConfig, PosteriorDraws, SamplerConfig};
pub use outcomes::Measure;
pub use prior::{PriorConfig, ShapePrior};
pub use scalar::Scalar;
pub use simulate::SimConfig;

pub type TransitionParams = hazard::TransitionParams<f64>;
pub type TransitionParams32 = hazard::TransitionParams<f32>;
pub type RandomEffects = gmrf::RandomEffects<f64>;
pub type RandomEffects32 = gmrf::RandomEffects<f32>;
pub type LerouxMix = gmrf::LerouxMix<f64>;
pub type LerouxMix32 = gmrf::LerouxMix<f32>;
pub type BetweenCov = gmrf::BetweenCov<f64>;
pub type BetweenCov32 = gmrf::BetweenCov<f32>;
pub type Subject = likelihood::Subject<f64>;
pub type Subject32 = likelihood::Subject<f32>;
pub type ModelState = likelihood::ModelState<f64>;
pub type ModelState32 = likelihood::ModelState<f32>;
pub type Profile = outcomes::Profile<f64>;
pub type Profile32 = outcomes::Profile<f32>;
