//! Posterior sampling and MAP estimation.
//!
//! One sweep of the sampler:
//!
//! 1. per transition, a random-walk Metropolis step on `(log α, β₀, β)` with
//!    a proposal shaped by the inverse negative Hessian of its conditional
//!    (refreshed during warmup, frozen afterwards);
//! 2. per region, an independence Metropolis step on its three effects,
//!    proposing from the Laplace approximation of their full conditional;
//! 3. per transition, an exact Gibbs draw along `(β₀ + δ, B[:, j] - δ)`, a
//!    direction in which the likelihood is constant;
//! 4. a Gibbs draw `Σ_b⁻¹ ~ Wishart(ν + K, (R⁻¹ + B'Q_wB)⁻¹)`;
//! 5. a random-walk Metropolis step on `logit(γ / (1 - ε))`.
//!
//! Random-walk scales follow a Robbins–Monro recursion towards the target
//! acceptance during warmup. Chain `c` draws from stream `c` of a ChaCha
//! generator seeded with the configured seed.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, ParameterReport};
use crate::error::{Error, Result};
use crate::gmrf::{self, BetweenCov, LerouxMix, RandomEffects, GAMMA_EPS};
use crate::graph::SpatialGraph;
use crate::hazard::{Transition, TransitionParams};
use crate::likelihood::{self, ModelState, Subject};
use crate::linalg::{self, Mat3, SparseSymMatrix};
use crate::prior::{self, PriorConfig, ShapePrior};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    /// Stored draws per chain after warmup.
    pub n_samples: usize,
    pub seed: u64,
    /// Target acceptance of the random-walk blocks.
    pub target_acceptance: f64,
    /// Iterations per stored draw.
    pub thinning: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 2000,
            n_samples: 2000,
            seed: 1,
            target_acceptance: 0.35,
            thinning: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_samples == 0 || self.thinning == 0 {
            return Err(Error::InvalidArgument(
                "n_chains, n_samples and thinning must be positive".into(),
            ));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_acceptance
            )));
        }
        Ok(())
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Adaptive random-walk Metropolis kernel with proposal `x + s L z`, where
/// `L L'` is the supplied covariance.
#[derive(Debug, Clone)]
pub struct RandomWalk {
    chol: Vec<Vec<f64>>,
    log_scale: f64,
    target: f64,
    adapt_steps: u64,
    accepted: u64,
    proposed: u64,
}

impl RandomWalk {
    pub fn new(cov: &[Vec<f64>], target: f64) -> Result<Self> {
        let d = cov.len().max(1) as f64;
        Ok(Self {
            chol: linalg::cholesky_dense(cov)?,
            log_scale: (2.38 / d.sqrt()).ln(),
            target,
            adapt_steps: 0,
            accepted: 0,
            proposed: 0,
        })
    }

    pub fn set_covariance(&mut self, cov: &[Vec<f64>]) -> Result<()> {
        self.chol = linalg::cholesky_dense(cov)?;
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn reset_counts(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
    }

    /// One Metropolis step. `log_density` returns `-∞` outside the support
    /// and an error on numerical failure.
    pub fn step<R, F>(
        &mut self,
        x: &mut Vec<f64>,
        lp: &mut f64,
        mut log_density: F,
        rng: &mut R,
        adapt: bool,
    ) -> Result<bool>
    where
        R: Rng + ?Sized,
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let d = x.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let s = self.scale();
        let prop: Vec<f64> = (0..d)
            .map(|i| x[i] + s * (0..=i).map(|k| self.chol[i][k] * z[k]).sum::<f64>())
            .collect();
        let lp_new = log_density(&prop)?;
        let log_ratio = lp_new - *lp;
        let accept_prob = if log_ratio.is_nan() {
            0.0
        } else {
            log_ratio.min(0.0).exp()
        };
        let accepted = rng.random::<f64>() < accept_prob;
        self.proposed += 1;
        if accepted {
            *x = prop;
            *lp = lp_new;
            self.accepted += 1;
        }
        if adapt {
            self.adapt_steps += 1;
            self.log_scale += (accept_prob - self.target) / (self.adapt_steps as f64).powf(0.6);
        }
        Ok(accepted)
    }
}

/// Adaptive random-walk Metropolis on an arbitrary log-density. Returns the
/// stored draws of each chain.
pub fn sample_log_density<F>(
    log_density: F,
    init: &[f64],
    cov: &[Vec<f64>],
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<Vec<f64>>>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = chain_rng(cfg.seed, c);
            let mut kernel = RandomWalk::new(cov, cfg.target_acceptance)?;
            let mut x = init.to_vec();
            let mut lp = log_density(&x)?;
            if !lp.is_finite() {
                return Err(Error::Sampler(format!(
                    "log-density {lp} at the initial point"
                )));
            }
            let mut out = Vec::with_capacity(cfg.n_samples);
            for it in 0..cfg.n_warmup + cfg.n_samples * cfg.thinning {
                let warm = it < cfg.n_warmup;
                kernel.step(&mut x, &mut lp, &log_density, &mut rng, warm)?;
                if !warm && (it + 1 - cfg.n_warmup).is_multiple_of(cfg.thinning) {
                    out.push(x.clone());
                }
            }
            Ok(out)
        })
        .collect()
}

/// Bartlett draw from `Wishart(df, scale)` on 3×3 matrices.
pub fn sample_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &Mat3<f64>,
    rng: &mut R,
) -> Result<Mat3<f64>> {
    if !(df > 2.0) {
        return Err(Error::InvalidArgument(format!(
            "Wishart degrees of freedom must exceed 2, got {df}"
        )));
    }
    let l = linalg::cholesky3(scale)?;
    let mut a = [[0.0; 3]; 3];
    for (i, row) in a.iter_mut().enumerate() {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::InvalidArgument(format!("chi-squared: {e}")))?;
        row[i] = chi.sample(rng).sqrt();
        for v in row.iter_mut().take(i) {
            *v = rng.sample(StandardNormal);
        }
    }
    let la = linalg::matmul3(&l, &a);
    Ok(linalg::symmetrize3(&linalg::matmul3(
        &la,
        &linalg::transpose3(&la),
    )))
}

/// `(R⁻¹ + B'Q_wB)⁻¹`, the scale of the conditional Wishart of `Σ_b⁻¹`.
pub fn conditional_wishart_scale(
    b: &RandomEffects,
    q_w: &SparseSymMatrix<f64>,
    c: &PriorConfig,
) -> Result<Mat3<f64>> {
    let s = linalg::add3(&c.wishart_scale_inverse()?, &b.cross_product(q_w));
    Ok(linalg::symmetrize3(&linalg::inverse3(&s)?))
}

/// `log p(D | θ, B) + log p(B | γ, Σ_b) + log p(θ, γ, Σ_b)`. States outside
/// the support give `Ok(-∞)`.
pub fn log_posterior(
    m: &ModelState,
    data: &[Subject],
    g: &SpatialGraph,
    c: &PriorConfig,
) -> Result<f64> {
    let lp = prior::log_prior(m, c)?;
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    if m.n_regions() != g.n_regions() {
        return Err(Error::InvalidArgument(format!(
            "state has {} regions, graph has {}",
            m.n_regions(),
            g.n_regions()
        )));
    }
    let ll = likelihood::cohort_loglik(data, m)?;
    let q_w = gmrf::within_precision(g, m.mix);
    let q_w_log_det = q_w.cholesky()?.log_det();
    let lb = gmrf::log_density_separable(&m.effects, &q_w, q_w_log_det, &m.between.precision()?)?;
    let total = ll + lb + lp;
    if total.is_nan() {
        return Err(Error::NonFinite("log posterior".into()));
    }
    Ok(total)
}

/// Exposures of one transition with the event-side sufficient statistics.
#[derive(Debug, Clone)]
struct Exposures {
    arity: usize,
    region: Vec<usize>,
    x: Vec<f64>,
    log_t: Vec<f64>,
    n_events: f64,
    sum_x_events: Vec<f64>,
    sum_log_t_events: f64,
    events_by_region: Vec<f64>,
}

/// First and second derivatives of one transition's log-likelihood.
struct Derivatives {
    /// With respect to `(log α, β₀, β)`.
    theta: Vec<f64>,
    /// Negative Hessian with respect to `(log α, β₀, β)`.
    neg_hessian: Vec<Vec<f64>>,
}

impl Exposures {
    fn new(data: &[Subject], tr: Transition, n_regions: usize, arity: usize) -> Self {
        let mut e = Exposures {
            arity,
            region: Vec::new(),
            x: Vec::new(),
            log_t: Vec::new(),
            n_events: 0.0,
            sum_x_events: vec![0.0; arity],
            sum_log_t_events: 0.0,
            events_by_region: vec![0.0; n_regions],
        };
        for s in data {
            let Some((t, event)) = s.exposure(tr) else {
                continue;
            };
            e.region.push(s.region);
            e.x.extend_from_slice(&s.covariates);
            e.log_t.push(t.ln());
            if event {
                e.n_events += 1.0;
                e.sum_log_t_events += t.ln();
                e.events_by_region[s.region] += 1.0;
                for (acc, v) in e.sum_x_events.iter_mut().zip(&s.covariates) {
                    *acc += v;
                }
            }
        }
        e
    }

    fn lin(&self, i: usize, theta: &[f64], alpha: f64) -> f64 {
        let x = &self.x[i * self.arity..(i + 1) * self.arity];
        theta[1]
            + alpha * self.log_t[i]
            + x.iter().zip(&theta[2..]).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Per-region `Σ exp(β₀ + x'β + α log t)`, i.e. cumulative hazards
    /// without the random effect.
    fn region_sums(&self, theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let alpha = theta[0].exp();
        for i in 0..self.log_t.len() {
            out[self.region[i]] += self.lin(i, theta, alpha).exp();
        }
    }

    fn loglik(&self, theta: &[f64], effects: &[f64], sums: &[f64]) -> f64 {
        let alpha = theta[0].exp();
        let mut v = self.n_events * (theta[0] + theta[1])
            + self
                .sum_x_events
                .iter()
                .zip(&theta[2..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
            + (alpha - 1.0) * self.sum_log_t_events;
        for ((d, b), s) in self.events_by_region.iter().zip(effects).zip(sums) {
            if *s != 0.0 || *d != 0.0 {
                v += d * b - b.exp() * s;
            }
        }
        v
    }

    fn derivatives(&self, theta: &[f64], effects: &[f64]) -> Derivatives {
        let dim = self.arity + 2;
        let alpha = theta[0].exp();
        let mut gt = vec![0.0; dim];
        let mut h = vec![vec![0.0; dim]; dim];
        let mut gi = vec![0.0; dim];
        for i in 0..self.log_t.len() {
            let k = self.region[i];
            let lam = (self.lin(i, theta, alpha) + effects[k]).exp();
            gi[0] = alpha * self.log_t[i];
            gi[1] = 1.0;
            gi[2..].copy_from_slice(&self.x[i * self.arity..(i + 1) * self.arity]);
            for a in 0..dim {
                gt[a] -= lam * gi[a];
                for b in 0..=a {
                    h[a][b] += lam * gi[a] * gi[b];
                }
            }
            h[0][0] += lam * gi[0];
        }
        gt[0] += self.n_events + alpha * self.sum_log_t_events;
        gt[1] += self.n_events;
        for (g, s) in gt[2..].iter_mut().zip(&self.sum_x_events) {
            *g += s;
        }
        h[0][0] -= alpha * self.sum_log_t_events;
        for a in 0..dim {
            for b in 0..a {
                h[b][a] = h[a][b];
            }
        }
        Derivatives {
            theta: gt,
            neg_hessian: h,
        }
    }
}

/// Log-density of the shape prior as a function of `u = log α`, without the
/// Jacobian, with its first derivative.
fn shape_prior_in_log(p: &ShapePrior, u: f64) -> (f64, f64) {
    let v = p.log_density(u.exp());
    let d = match *p {
        ShapePrior::LogNormal { sd } => -1.0 - u / (sd * sd),
        ShapePrior::PcNumeric { .. } => {
            let h = 1e-6;
            (p.log_density((u + h).exp()) - p.log_density((u - h).exp())) / (2.0 * h)
        }
    };
    (v, d)
}

/// Curvature of the shape prior in `u`, used only to shape proposals.
fn shape_prior_curvature(p: &ShapePrior) -> f64 {
    match *p {
        ShapePrior::LogNormal { sd } => 1.0 / (sd * sd),
        ShapePrior::PcNumeric { .. } => 1.0,
    }
}

/// Cohort reduced to what the sampler needs.
struct Prepared<'a> {
    graph: &'a SpatialGraph,
    prior: PriorConfig,
    exposures: [Exposures; 3],
    n_regions: usize,
    arity: usize,
}

impl<'a> Prepared<'a> {
    fn new(data: &[Subject], g: &'a SpatialGraph, c: &PriorConfig) -> Result<Self> {
        c.validate()?;
        let arity = data.first().map_or(0, |s| s.covariates.len());
        for (i, s) in data.iter().enumerate() {
            s.validate(g.n_regions(), arity)
                .map_err(|e| Error::Data(format!("subject {}: {e}", i + 1)))?;
        }
        let k = g.n_regions();
        Ok(Self {
            graph: g,
            prior: *c,
            exposures: Transition::ALL.map(|tr| Exposures::new(data, tr, k, arity)),
            n_regions: k,
            arity,
        })
    }

    /// Log-prior of one transition's `(log α, β₀, β)` including the `log α`
    /// Jacobian.
    fn theta_log_prior(&self, theta: &[f64]) -> f64 {
        let (v, _) = shape_prior_in_log(&self.prior.shape_prior, theta[0]);
        v + theta[0]
            + theta[1..]
                .iter()
                .map(|&b| self.prior.beta_log_density(b))
                .sum::<f64>()
    }

    /// Conditional log-density of one transition's `(log α, β₀, β)`; fills
    /// `sums` with the matching per-region cumulative hazards.
    fn theta_target(&self, j: usize, theta: &[f64], effects: &[f64], sums: &mut [f64]) -> f64 {
        let e = &self.exposures[j];
        e.region_sums(theta, sums);
        let v = e.loglik(theta, effects, sums) + self.theta_log_prior(theta);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn theta_gradient(&self, j: usize, theta: &[f64], effects: &[f64]) -> Vec<f64> {
        let mut grad = self.exposures[j].derivatives(theta, effects).theta;
        let (_, dprior) = shape_prior_in_log(&self.prior.shape_prior, theta[0]);
        grad[0] += dprior + 1.0;
        for (g, b) in grad.iter_mut().zip(theta).skip(1) {
            *g -= self.prior.beta_precision * b;
        }
        grad
    }

    fn neg_hessian_with_prior(&self, h: &mut [Vec<f64>]) {
        h[0][0] = h[0][0].max(0.0) + shape_prior_curvature(&self.prior.shape_prior);
        for (i, row) in h.iter_mut().enumerate().skip(1) {
            row[i] += self.prior.beta_precision;
        }
    }

    fn proposal_covariance(
        &self,
        j: usize,
        theta: &[f64],
        effects: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let mut h = self.exposures[j].derivatives(theta, effects).neg_hessian;
        self.neg_hessian_with_prior(&mut h);
        let mut ridge = 0.0;
        for _ in 0..30 {
            let mut hr = h.clone();
            for (i, row) in hr.iter_mut().enumerate() {
                row[i] += ridge;
            }
            if let Ok(c) = linalg::inverse_spd_dense(&hr) {
                return Ok(c);
            }
            ridge = if ridge == 0.0 { 1e-6 } else { ridge * 10.0 };
        }
        Err(Error::NotPositiveDefinite(
            "fixed-effect proposal covariance".into(),
        ))
    }

    fn state_from(
        &self,
        theta: &[Vec<f64>; 3],
        effects: &RandomEffects,
        gamma: f64,
        precision: &Mat3<f64>,
    ) -> Result<ModelState> {
        let params = [0, 1, 2].map(|j| TransitionParams {
            shape: theta[j][0].exp(),
            intercept: theta[j][1],
            coefficients: theta[j][2..].to_vec(),
        });
        Ok(ModelState {
            params,
            effects: effects.clone(),
            mix: LerouxMix::new(gamma)?,
            between: BetweenCov::from_precision(precision)?,
        })
    }
}

fn theta_of(p: &TransitionParams) -> Vec<f64> {
    let mut t = vec![p.shape.ln(), p.intercept];
    t.extend_from_slice(&p.coefficients);
    t
}

/// Graph Laplacian `D - W`.
fn laplacian(g: &SpatialGraph) -> SparseSymMatrix<f64> {
    let mut trip: Vec<(usize, usize, f64)> = (0..g.n_regions())
        .map(|k| (k, k, g.degree(k) as f64))
        .collect();
    trip.extend(g.edges().map(|(a, b)| (a, b, -1.0)));
    SparseSymMatrix::from_triplets(g.n_regions(), &trip)
}

/// Post-warmup acceptance rates of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    /// Per transition, for the `(log α, β₀, β)` blocks.
    pub fixed: [f64; 3],
    /// Region-effect independence proposals.
    pub effects: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    /// Post-warmup iteration, starting at 1.
    pub iteration: usize,
    pub log_posterior: f64,
    pub state: ModelState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub chain: usize,
    pub draws: Vec<Draw>,
    pub acceptance: Acceptance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub chains: Vec<ChainDraws>,
    /// Used for reporting names; `x1`, `x2`, ... unless set by the caller.
    pub covariate_names: Vec<String>,
}

/// Reporting-scale value names: per transition `alpha`, `lambda` and one
/// `beta` per covariate, then `gamma`, `tau`, `rho` and every region effect.
pub fn parameter_names(covariates: &[String], n_regions: usize) -> Vec<String> {
    let mut names = Vec::new();
    for tr in Transition::ALL {
        let l = tr.label();
        names.push(format!("alpha_{l}"));
        names.push(format!("lambda_{l}"));
        names.extend(covariates.iter().map(|c| format!("beta_{l}_{c}")));
    }
    names.push("gamma".into());
    names.extend(Transition::ALL.iter().map(|t| format!("tau_{}", t.label())));
    names.extend(gmrf::RHO_PAIRS.iter().map(|&(i, j)| {
        format!(
            "rho_{}_{}",
            Transition::ALL[i].label(),
            Transition::ALL[j].label()
        )
    }));
    for tr in Transition::ALL {
        names.extend((1..=n_regions).map(|k| format!("b_{}_{k}", tr.label())));
    }
    names
}

/// Values matching [`parameter_names`].
pub fn parameter_values(m: &ModelState) -> Vec<f64> {
    let mut v = Vec::new();
    for p in &m.params {
        v.push(p.shape);
        v.push(p.scale());
        v.extend_from_slice(&p.coefficients);
    }
    v.push(m.mix.gamma());
    v.extend_from_slice(&m.between.tau);
    v.extend_from_slice(&m.between.rho);
    v.extend_from_slice(m.effects.as_vec());
    v
}

impl PosteriorDraws {
    pub fn n_regions(&self) -> usize {
        self.states().next().map_or(0, |s| s.n_regions())
    }

    pub fn states(&self) -> impl Iterator<Item = &ModelState> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(|d| &d.state))
    }

    pub fn parameter_names(&self) -> Vec<String> {
        parameter_names(&self.covariate_names, self.n_regions())
    }

    /// `[parameter][chain][draw]`.
    pub fn parameter_chains(&self) -> Vec<Vec<Vec<f64>>> {
        let n_par = self.parameter_names().len();
        let mut out = vec![vec![Vec::new(); self.chains.len()]; n_par];
        for (c, chain) in self.chains.iter().enumerate() {
            for d in &chain.draws {
                for (p, v) in parameter_values(&d.state).into_iter().enumerate() {
                    out[p][c].push(v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub parameters: Vec<ParameterReport>,
    pub acceptance: Vec<Acceptance>,
    pub notes: Vec<String>,
}

impl Diagnostics {
    /// Largest R̂ over the parameters that have one.
    pub fn max_rhat(&self) -> Option<f64> {
        self.parameters
            .iter()
            .filter_map(|p| p.rhat)
            .reduce(f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParameterReport> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Per-parameter summaries, split-R̂, bulk ESS and acceptance rates.
pub fn diagnostics(d: &PosteriorDraws) -> Diagnostics {
    let names = d.parameter_names();
    let chains = d.parameter_chains();
    let parameters: Vec<ParameterReport> = names
        .par_iter()
        .zip(chains.par_iter())
        .map(|(n, c)| diagnostics::report(n, c))
        .collect();
    let mut notes = Vec::new();
    if d.chains.len() < 2 {
        notes.push("single chain: split-R̂ omitted".to_string());
    }
    let degenerate: Vec<&str> = parameters
        .iter()
        .filter(|p| p.degenerate)
        .map(|p| p.name.as_str())
        .collect();
    if !degenerate.is_empty() {
        notes.push(format!(
            "constant draws, ESS undefined: {}",
            degenerate.join(", ")
        ));
    }
    Diagnostics {
        parameters,
        acceptance: d.chains.iter().map(|c| c.acceptance).collect(),
        notes,
    }
}

/// Mutable state of one chain, with cached per-region cumulative hazards.
struct Chain<'m, 'a> {
    model: &'m Prepared<'a>,
    lap: SparseSymMatrix<f64>,
    theta: [Vec<f64>; 3],
    sums: [Vec<f64>; 3],
    effects: RandomEffects,
    precision: Mat3<f64>,
    gamma: f64,
    q_w: SparseSymMatrix<f64>,
    q_w_log_det: f64,
    fixed: Vec<RandomWalk>,
    gamma_kernel: RandomWalk,
    effects_accepted: u64,
    effects_proposed: u64,
    rng: ChaCha8Rng,
}

impl<'m, 'a> Chain<'m, 'a> {
    fn new(
        model: &'m Prepared<'a>,
        init: &ModelState,
        rng: ChaCha8Rng,
        target: f64,
    ) -> Result<Self> {
        let theta = [0, 1, 2].map(|j| theta_of(&init.params[j]));
        let mut sums = [0, 1, 2].map(|_| vec![0.0; model.n_regions]);
        for j in 0..3 {
            model.exposures[j].region_sums(&theta[j], &mut sums[j]);
        }
        let q_w = gmrf::within_precision(model.graph, init.mix);
        let q_w_log_det = q_w.cholesky()?.log_det();
        let fixed = (0..3)
            .map(|j| {
                let cov = model.proposal_covariance(j, &theta[j], init.effects.column(j))?;
                RandomWalk::new(&cov, target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            lap: laplacian(model.graph),
            theta,
            sums,
            effects: init.effects.clone(),
            precision: init.between.precision()?,
            gamma: init.mix.gamma(),
            q_w,
            q_w_log_det,
            fixed,
            gamma_kernel: RandomWalk::new(&[vec![1.0]], target)?,
            effects_accepted: 0,
            effects_proposed: 0,
            rng,
        })
    }

    /// Newton ascent on each transition's conditional, then a jitter of about
    /// two conditional standard deviations so that chains start apart.
    fn initialize_fixed(&mut self) -> Result<()> {
        let model = self.model;
        for j in 0..3 {
            let col = self.effects.column(j);
            let mut sums = vec![0.0; model.n_regions];
            let mut f0 = model.theta_target(j, &self.theta[j], col, &mut sums);
            for _ in 0..100 {
                let Ok(cov) = model.proposal_covariance(j, &self.theta[j], col) else {
                    break;
                };
                let grad = model.theta_gradient(j, &self.theta[j], col);
                let step: Vec<f64> = cov
                    .iter()
                    .map(|row| row.iter().zip(&grad).map(|(a, b)| a * b).sum())
                    .collect();
                let mut t = 1.0;
                let mut moved = false;
                while t > 1e-8 {
                    let cand: Vec<f64> = self.theta[j]
                        .iter()
                        .zip(&step)
                        .map(|(a, s)| a + t * s)
                        .collect();
                    let f1 = model.theta_target(j, &cand, col, &mut sums);
                    if f1 > f0 {
                        self.theta[j] = cand;
                        moved = f1 - f0 > 1e-10;
                        f0 = f1;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            let cov = model.proposal_covariance(j, &self.theta[j], col)?;
            let chol = linalg::cholesky_dense(&cov)?;
            let z: Vec<f64> = (0..cov.len())
                .map(|_| self.rng.sample(StandardNormal))
                .collect();
            let jittered: Vec<f64> = (0..cov.len())
                .map(|i| self.theta[j][i] + 2.0 * (0..=i).map(|k| chol[i][k] * z[k]).sum::<f64>())
                .collect();
            if model.theta_target(j, &jittered, col, &mut sums).is_finite() {
                self.theta[j] = jittered;
            }
            model.exposures[j].region_sums(&self.theta[j], &mut self.sums[j]);
        }
        Ok(())
    }

    fn refresh_proposals(&mut self) -> Result<()> {
        for j in 0..3 {
            let cov = self
                .model
                .proposal_covariance(j, &self.theta[j], self.effects.column(j))?;
            self.fixed[j].set_covariance(&cov)?;
        }
        Ok(())
    }

    fn update_fixed(&mut self, adapt: bool) -> Result<()> {
        let model = self.model;
        for j in 0..3 {
            let col = self.effects.column(j);
            let mut buf = vec![0.0; model.n_regions];
            let mut theta = self.theta[j].clone();
            let mut lp = model.theta_target(j, &theta, col, &mut buf);
            let accepted = self.fixed[j].step(
                &mut theta,
                &mut lp,
                |cand| Ok(model.theta_target(j, cand, col, &mut buf)),
                &mut self.rng,
                adapt,
            )?;
            if accepted {
                self.theta[j] = theta;
                model.exposures[j].region_sums(&self.theta[j], &mut self.sums[j]);
            }
        }
        Ok(())
    }

    /// Independence Metropolis on each region's three effects, proposing from
    /// the Gaussian approximation at the mode of their full conditional.
    fn update_effects(&mut self) -> Result<()> {
        let model = self.model;
        let p = self.precision;
        for k in 0..model.n_regions {
            let mut q_kk = 0.0;
            let mut mu = [0.0; 3];
            for &(l, v) in self.q_w.row(k) {
                if l == k {
                    q_kk = v;
                } else {
                    let b = self.effects.row(l);
                    for j in 0..3 {
                        mu[j] += v * b[j];
                    }
                }
            }
            for m in &mut mu {
                *m /= -q_kk;
            }
            let a: Mat3<f64> = p.map(|row| row.map(|v| q_kk * v));
            let d = [0, 1, 2].map(|j| model.exposures[j].events_by_region[k]);
            let s = [0, 1, 2].map(|j| self.sums[j][k]);
            let f = |b: &[f64; 3]| -> f64 {
                let r = [b[0] - mu[0], b[1] - mu[1], b[2] - mu[2]];
                let mut v = 0.0;
                for j in 0..3 {
                    v += d[j] * b[j] - s[j] * b[j].exp();
                    v -= 0.5 * r[j] * (0..3).map(|i| a[j][i] * r[i]).sum::<f64>();
                }
                v
            };
            let hess = |b: &[f64; 3]| -> Mat3<f64> {
                let mut h = a;
                for j in 0..3 {
                    h[j][j] += s[j] * b[j].exp();
                }
                h
            };

            let mut mode = mu;
            let mut f_mode = f(&mode);
            for _ in 0..50 {
                let r = [mode[0] - mu[0], mode[1] - mu[1], mode[2] - mu[2]];
                let g: [f64; 3] = [0, 1, 2].map(|j| {
                    d[j] - s[j] * mode[j].exp() - (0..3).map(|i| a[j][i] * r[i]).sum::<f64>()
                });
                let h_inv = linalg::inverse3(&hess(&mode))?;
                let step: [f64; 3] = [0, 1, 2].map(|j| (0..3).map(|i| h_inv[j][i] * g[i]).sum());
                let mut t = 1.0;
                let mut moved = false;
                while t > 1e-10 {
                    let cand = [0, 1, 2].map(|j| mode[j] + t * step[j]);
                    let fc = f(&cand);
                    if fc >= f_mode {
                        moved = fc - f_mode > 1e-12;
                        mode = cand;
                        f_mode = fc;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            let h = hess(&mode);
            let l = linalg::cholesky3(&h)?;
            let log_q = |b: &[f64; 3]| -> f64 {
                let r = [b[0] - mode[0], b[1] - mode[1], b[2] - mode[2]];
                -0.5 * (0..3)
                    .map(|i| r[i] * (0..3).map(|j| h[i][j] * r[j]).sum::<f64>())
                    .sum::<f64>()
            };
            // b = mode + L'⁻¹ z has precision L L' = H.
            let z: [f64; 3] = [0, 1, 2].map(|_| self.rng.sample(StandardNormal));
            let mut x = [0.0; 3];
            for i in (0..3).rev() {
                let acc: f64 = (i + 1..3).map(|m| l[m][i] * x[m]).sum();
                x[i] = (z[i] - acc) / l[i][i];
            }
            let prop = [0, 1, 2].map(|j| mode[j] + x[j]);
            let cur = self.effects.row(k);
            let log_ratio = f(&prop) - f(&cur) + log_q(&cur) - log_q(&prop);
            self.effects_proposed += 1;
            let u: f64 = self.rng.random();
            if log_ratio.is_finite() && u.ln() < log_ratio {
                for (j, &v) in prop.iter().enumerate() {
                    self.effects.set(k, j, v);
                }
                self.effects_accepted += 1;
            }
        }
        Ok(())
    }

    /// Exact draw of `δ` in `β₀ + δ`, `B[:, j] - δ`: the likelihood is flat
    /// along this line and `Q_w 1 = (1 - γ) 1`.
    fn update_shift(&mut self) {
        let k = self.model.n_regions as f64;
        let prec = self.model.prior.beta_precision;
        let colsum: [f64; 3] = [0, 1, 2].map(|j| self.effects.column(j).iter().sum());
        for j in 0..3 {
            let p = &self.precision;
            let a = prec + p[j][j] * (1.0 - self.gamma) * k;
            let lin = (1.0 - self.gamma) * (0..3).map(|l| p[j][l] * colsum[l]).sum::<f64>()
                - prec * self.theta[j][1];
            let z: f64 = self.rng.sample(StandardNormal);
            let delta = lin / a + z / a.sqrt();
            self.theta[j][1] += delta;
            for b in self.effects.column_mut(j) {
                *b -= delta;
            }
            for s in &mut self.sums[j] {
                *s *= delta.exp();
            }
        }
    }

    fn update_precision(&mut self) -> Result<()> {
        let c = &self.model.prior;
        let scale = conditional_wishart_scale(&self.effects, &self.q_w, c)?;
        self.precision = sample_wishart(
            c.wishart_df + self.model.n_regions as f64,
            &scale,
            &mut self.rng,
        )?;
        Ok(())
    }

    fn update_gamma(&mut self, adapt: bool) -> Result<()> {
        let graph = self.model.graph;
        let upper = 1.0 - GAMMA_EPS;
        let bb = linalg::trace3(&linalg::matmul3(
            &self.precision,
            &self
                .effects
                .cross_product(&SparseSymMatrix::identity(self.model.n_regions)),
        ));
        let blb = linalg::trace3(&linalg::matmul3(
            &self.precision,
            &self.effects.cross_product(&self.lap),
        ));
        let target = |u: f64| -> Result<(f64, f64)> {
            let gamma = (upper * sigmoid(u)).clamp(0.0, LerouxMix::<f64>::upper());
            let q = gmrf::within_precision(graph, LerouxMix::new(gamma)?);
            let log_det = q.cholesky()?.log_det();
            let v = 1.5 * log_det - 0.5 * ((1.0 - gamma) * bb + gamma * blb)
                + log_sigmoid(u)
                + log_sigmoid(-u);
            Ok((v, log_det))
        };
        let mut x = vec![logit(self.gamma / upper)];
        let (mut lp, _) = target(x[0])?;
        let accepted = self.gamma_kernel.step(
            &mut x,
            &mut lp,
            |v| Ok(target(v[0])?.0),
            &mut self.rng,
            adapt,
        )?;
        if accepted {
            self.gamma = (upper * sigmoid(x[0])).clamp(0.0, LerouxMix::<f64>::upper());
            self.q_w = gmrf::within_precision(graph, LerouxMix::new(self.gamma)?);
            self.q_w_log_det = self.q_w.cholesky()?.log_det();
        }
        Ok(())
    }

    fn sweep(&mut self, adapt: bool) -> Result<()> {
        self.update_fixed(adapt)?;
        self.update_effects()?;
        self.update_shift();
        self.update_precision()?;
        self.update_gamma(adapt)
    }

    fn state(&self) -> Result<ModelState> {
        self.model
            .state_from(&self.theta, &self.effects, self.gamma, &self.precision)
    }

    fn log_posterior(&self, state: &ModelState) -> Result<f64> {
        let ll: f64 = (0..3)
            .map(|j| {
                self.model.exposures[j].loglik(
                    &self.theta[j],
                    self.effects.column(j),
                    &self.sums[j],
                )
            })
            .sum();
        let lb = gmrf::log_density_separable(
            &self.effects,
            &self.q_w,
            self.q_w_log_det,
            &self.precision,
        )?;
        Ok(ll + lb + prior::log_prior(state, &self.model.prior)?)
    }

    fn acceptance(&self) -> Acceptance {
        Acceptance {
            fixed: [0, 1, 2].map(|j| self.fixed[j].acceptance_rate()),
            effects: if self.effects_proposed == 0 {
                0.0
            } else {
                self.effects_accepted as f64 / self.effects_proposed as f64
            },
            gamma: self.gamma_kernel.acceptance_rate(),
        }
    }

    fn check_warmup(&self, chain: usize) -> Result<()> {
        let stuck: Vec<String> = (0..3)
            .filter(|&j| self.fixed[j].accepted() == 0)
            .map(|j| {
                format!(
                    "{} block (scale {:.3e})",
                    Transition::ALL[j].label(),
                    self.fixed[j].scale()
                )
            })
            .chain(
                (self.gamma_kernel.accepted() == 0)
                    .then(|| format!("gamma (scale {:.3e})", self.gamma_kernel.scale())),
            )
            .chain(
                (self.effects_proposed > 0 && self.effects_accepted == 0)
                    .then(|| "region effects".to_string()),
            )
            .collect();
        if stuck.is_empty() {
            Ok(())
        } else {
            Err(Error::Sampler(format!(
                "chain {}: no proposal accepted during warmup for {}",
                chain + 1,
                stuck.join(", ")
            )))
        }
    }

    fn reset_counts(&mut self) {
        for k in &mut self.fixed {
            k.reset_counts();
        }
        self.gamma_kernel.reset_counts();
        self.effects_accepted = 0;
        self.effects_proposed = 0;
    }
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

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn is_refresh_iteration(it: usize) -> bool {
    it == 0 || it == 25 || (it >= 50 && (it / 50).is_power_of_two() && it.is_multiple_of(50))
}

/// Starting point: the exponential null model with each baseline rate set to
/// the crude event rate of its transition.
pub fn initial_state(data: &[Subject], n_regions: usize) -> ModelState {
    let arity = data.first().map_or(0, |s| s.covariates.len());
    let mut m = ModelState::initial(n_regions, arity);
    for tr in Transition::ALL {
        let (events, time) = data
            .iter()
            .filter_map(|s| s.exposure(tr))
            .fold((0.0, 0.0), |(e, t), (dt, ev)| {
                (e + f64::from(u8::from(ev)), t + dt)
            });
        if events > 0.0 && time > 0.0 {
            m.params[tr.index()].intercept = (events / time).ln();
        }
    }
    m
}

fn run_chain(
    model: &Prepared,
    init: &ModelState,
    sc: &SamplerConfig,
    chain: usize,
) -> Result<ChainDraws> {
    let rng = chain_rng(sc.seed, chain);
    let mut ch = Chain::new(model, init, rng, sc.target_acceptance)?;
    ch.initialize_fixed()?;
    for it in 0..sc.n_warmup {
        if is_refresh_iteration(it) {
            ch.refresh_proposals()?;
        }
        ch.sweep(true)?;
    }
    if sc.n_warmup > 0 {
        ch.check_warmup(chain)?;
    }
    ch.reset_counts();
    let mut draws = Vec::with_capacity(sc.n_samples);
    for i in 0..sc.n_samples {
        for _ in 0..sc.thinning {
            ch.sweep(false)?;
        }
        let state = ch.state()?;
        let log_posterior = ch.log_posterior(&state)?;
        if !log_posterior.is_finite() {
            return Err(Error::Sampler(format!(
                "chain {}: log posterior {log_posterior} at draw {}",
                chain + 1,
                i + 1
            )));
        }
        draws.push(Draw {
            iteration: i + 1,
            log_posterior,
            state,
        });
    }
    Ok(ChainDraws {
        chain: chain + 1,
        acceptance: ch.acceptance(),
        draws,
    })
}

/// Runs the configured chains in parallel. Results depend only on the data,
/// the configuration and the seed.
pub fn run(
    data: &[Subject],
    g: &SpatialGraph,
    pc: &PriorConfig,
    sc: &SamplerConfig,
) -> Result<PosteriorDraws> {
    sc.validate()?;
    let model = Prepared::new(data, g, pc)?;
    let init = initial_state(data, g.n_regions());
    let lp = log_posterior(&init, data, g, pc)?;
    if !lp.is_finite() {
        return Err(Error::Sampler(format!(
            "log posterior {lp} at the initial state"
        )));
    }
    let chains = (0..sc.n_chains)
        .into_par_iter()
        .map(|c| run_chain(&model, &init, sc, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        chains,
        covariate_names: (1..=model.arity).map(|i| format!("x{i}")).collect(),
    })
}

/// Minimizes `f` (value and gradient) with L-BFGS, restarting from the best
/// point seen while the largest gradient component exceeds `grad_tol`.
/// Each pass divides the objective by the largest gradient component at its
/// start, so that the first unit step along the gradient stays moderate.
/// Returns the minimizer, the value, the gradient and the iteration count.
pub fn lbfgs_minimize<F>(
    f: F,
    x0: &[f64],
    grad_tol: f64,
    max_iter: u64,
) -> Result<(Vec<f64>, f64, Vec<f64>, u64)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    type Best = Mutex<(Vec<f64>, f64, Vec<f64>)>;
    struct Problem<'f, F> {
        f: &'f F,
        best: &'f Best,
        scale: f64,
    }
    impl<F> Problem<'_, F>
    where
        F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        fn eval(&self, x: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
            let (v, g) = (self.f)(x)?;
            if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("objective".into()).into());
            }
            let mut best = self.best.lock().unwrap();
            if v < best.1 {
                *best = (x.to_vec(), v, g.clone());
            }
            Ok((
                v / self.scale,
                g.into_iter().map(|g| g / self.scale).collect(),
            ))
        }
    }
    impl<F> CostFunction for Problem<'_, F>
    where
        F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        type Param = Vec<f64>;
        type Output = f64;
        fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
            Ok(self.eval(x)?.0)
        }
    }
    impl<F> Gradient for Problem<'_, F>
    where
        F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        type Param = Vec<f64>;
        type Gradient = Vec<f64>;
        fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
            Ok(self.eval(x)?.1)
        }
    }

    let (v0, g0) = f(x0)?;
    if !v0.is_finite() || g0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }
    let best: Best = Mutex::new((x0.to_vec(), v0, g0));
    let mut iterations = 0;
    let mut stalled = 0;
    while stalled < 2 {
        let (x, v, g) = best.lock().unwrap().clone();
        if max_norm(&g) <= grad_tol || iterations >= max_iter {
            return Ok((x, v, g, iterations));
        }
        let scale = max_norm(&g).max(1.0);
        let remaining = max_iter - iterations;
        let problem = Problem {
            f: &f,
            best: &best,
            scale,
        };
        // argmin stops on the Euclidean norm, which bounds the largest
        // component. Line-search failures end a pass; the next restarts from
        // the best point with a fresh curvature history.
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
            .with_tolerance_grad(grad_tol / scale)
            .and_then(|s| s.with_tolerance_cost(0.0))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let outcome = Executor::new(problem, solver)
            .configure(|st| st.param(x.clone()).max_iters(remaining))
            .run()
            .map(|r| r.state().get_iter());
        iterations += outcome.unwrap_or(1).max(1);
        if best.lock().unwrap().1 < v {
            stalled = 0;
        } else {
            stalled += 1;
        }
    }
    let (x, v, g) = best.into_inner().unwrap();
    // Close to the optimum the cost decrease of a step falls below the
    // resolution of the cost itself; finish with Newton steps judged by the
    // gradient.
    let (x, v, g, steps) = newton_polish(&f, x, v, g, grad_tol, 20)?;
    iterations += steps;
    if max_norm(&g) <= grad_tol {
        Ok((x, v, g, iterations))
    } else {
        Err(Error::NoConvergence(format!(
            "largest gradient component {:.3e} above {grad_tol:.1e} after {iterations} iterations",
            max_norm(&g)
        )))
    }
}

fn max_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Newton steps with a finite-difference Hessian of the gradient, accepted
/// when they shrink the largest gradient component without a resolvable
/// increase of the cost.
fn newton_polish<F>(
    f: &F,
    mut x: Vec<f64>,
    mut v: f64,
    mut g: Vec<f64>,
    grad_tol: f64,
    max_steps: u64,
) -> Result<(Vec<f64>, f64, Vec<f64>, u64)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x.len();
    let mut steps = 0;
    while steps < max_steps && max_norm(&g) > grad_tol {
        let mut hess = vec![vec![0.0; n]; n];
        let mut xp = x.clone();
        for i in 0..n {
            let h = 1e-5 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let (_, up) = f(&xp)?;
            xp[i] = x[i] - h;
            let (_, down) = f(&xp)?;
            xp[i] = x[i];
            for r in 0..n {
                hess[r][i] = (up[r] - down[r]) / (2.0 * h);
            }
        }
        for r in 0..n {
            for c in 0..r {
                let m = 0.5 * (hess[r][c] + hess[c][r]);
                hess[r][c] = m;
                hess[c][r] = m;
            }
        }
        let mut ridge = 0.0;
        let inv = loop {
            let mut hr = hess.clone();
            for (i, row) in hr.iter_mut().enumerate() {
                row[i] += ridge;
            }
            if let Ok(inv) = linalg::inverse_spd_dense(&hr) {
                break inv;
            }
            let scale = (0..n).map(|i| hess[i][i].abs()).fold(1e-8, f64::max);
            ridge = if ridge == 0.0 {
                1e-8 * scale
            } else {
                ridge * 10.0
            };
            if ridge > 1e8 * scale {
                return Ok((x, v, g, steps));
            }
        };
        let delta: Vec<f64> = inv
            .iter()
            .map(|row| -row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let slack = 1e-10 * v.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let cand: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
            if let Ok((vc, gc)) = f(&cand) {
                if vc.is_finite() && vc <= v + slack && max_norm(&gc) < max_norm(&g) {
                    x = cand;
                    v = vc;
                    g = gc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        steps += 1;
        if !accepted {
            break;
        }
    }
    Ok((x, v, g, steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub max_iter: u64,
    /// On the largest component of the gradient in the unconstrained space.
    pub grad_tol: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub state: ModelState,
    pub log_posterior: f64,
    pub gradient_max_norm: f64,
    pub iterations: u64,
}

/// `log_posterior` over the unconstrained layout of [`prior::to_unconstrained`]
/// (no Jacobian), with its gradient.
pub fn log_posterior_unconstrained(
    v: &[f64],
    data: &[Subject],
    g: &SpatialGraph,
    c: &PriorConfig,
) -> Result<(f64, Vec<f64>)> {
    let arity = data.first().map_or(0, |s| s.covariates.len());
    let k = g.n_regions();
    let (m, _) = prior::from_unconstrained(v, k, arity)?;
    let lp = log_posterior(&m, data, g, c)?;
    let (_, lg) = likelihood::cohort_loglik_gradient(data, &m)?;
    let mut grad = vec![0.0; v.len()];
    let mut pos = 0;
    for j in 0..3 {
        let p = &m.params[j];
        let (_, dshape) = shape_prior_in_log(&c.shape_prior, p.shape.ln());
        grad[pos] = lg.log_shape[j] + dshape;
        grad[pos + 1] = lg.intercept[j] - c.beta_precision * p.intercept;
        for (i, b) in p.coefficients.iter().enumerate() {
            grad[pos + 2 + i] = lg.coefficients[j][i] - c.beta_precision * b;
        }
        pos += arity + 2;
    }
    let q_w = gmrf::within_precision(g, m.mix);
    let p = m.between.precision()?;
    for j in 0..3 {
        let qb: Vec<Vec<f64>> = (0..3).map(|l| q_w.mul_vec(m.effects.column(l))).collect();
        for kk in 0..k {
            let gmrf_grad: f64 = (0..3).map(|l| qb[l][kk] * p[l][j]).sum();
            grad[pos + j * k + kk] = lg.effects.get(kk, j) - gmrf_grad;
        }
    }
    pos += 3 * k;

    // Only the effects prior and the hyperpriors depend on the last seven
    // coordinates.
    let hyper = |w: &[f64]| -> Result<f64> {
        let (m, _) = prior::from_unconstrained(w, k, arity)?;
        let q_w = gmrf::within_precision(g, m.mix);
        let q_w_log_det = q_w.cholesky()?.log_det();
        Ok(
            gmrf::log_density_separable(&m.effects, &q_w, q_w_log_det, &m.between.precision()?)?
                + prior::log_prior(&m, c)?,
        )
    };
    let mut w = v.to_vec();
    for i in pos..v.len() {
        let h = 1e-5 * (1.0 + v[i].abs());
        w[i] = v[i] + h;
        let up = hyper(&w)?;
        w[i] = v[i] - h;
        let down = hyper(&w)?;
        w[i] = v[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok((lp, grad))
}

/// Posterior mode over all parameters, from [`initial_state`].
pub fn map_estimate(
    data: &[Subject],
    g: &SpatialGraph,
    c: &PriorConfig,
    cfg: &MapConfig,
) -> Result<MapEstimate> {
    map_estimate_from(data, g, c, &initial_state(data, g.n_regions()), cfg)
}

pub fn map_estimate_from(
    data: &[Subject],
    g: &SpatialGraph,
    c: &PriorConfig,
    init: &ModelState,
    cfg: &MapConfig,
) -> Result<MapEstimate> {
    Prepared::new(data, g, c)?;
    let x0 = prior::to_unconstrained(init)?;
    let k = g.n_regions();
    let arity = init.arity();
    let (x, v, grad, iterations) = lbfgs_minimize(
        |x| {
            let (lp, g) = log_posterior_unconstrained(x, data, g, c)?;
            Ok((-lp, g.into_iter().map(|v| -v).collect()))
        },
        &x0,
        cfg.grad_tol,
        cfg.max_iter,
    )?;
    let (state, _) = prior::from_unconstrained(&x, k, arity)?;
    Ok(MapEstimate {
        state,
        log_posterior: -v,
        gradient_max_norm: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        iterations,
    })
}
