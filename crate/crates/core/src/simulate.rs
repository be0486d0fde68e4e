//! Synthetic cohorts from the full generative model.
//!
//! Latent times are drawn by inverting the cumulative hazard at unit
//! exponential variates. Random effects come from stream 0 of the seeded
//! generator and subject `i` uses stream `i + 1`, so cohorts are identical
//! whatever the thread count.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{self, BetweenCov, LerouxMix, RandomEffects};
use crate::graph::SpatialGraph;
use crate::hazard::{LinearPredictor, Transition, TransitionParams};
use crate::likelihood::{FirstExit, Subject};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovariateDist {
    Bernoulli {
        p: f64,
    },
    /// Normal truncated below at `lower`.
    TruncatedNormal {
        mean: f64,
        sd: f64,
        lower: f64,
    },
}

impl CovariateDist {
    fn validate(&self) -> Result<()> {
        match *self {
            CovariateDist::Bernoulli { p } if !(0.0..=1.0).contains(&p) => Err(
                Error::InvalidArgument(format!("Bernoulli probability {p} outside [0, 1]")),
            ),
            CovariateDist::TruncatedNormal { mean, sd, lower }
                if !(sd > 0.0)
                    || !mean.is_finite()
                    || lower.is_nan()
                    || (lower - mean) / sd > 5.0 =>
            {
                Err(Error::InvalidArgument(format!(
                    "unusable truncated normal (mean {mean}, sd {sd}, lower {lower})"
                )))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateDist::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
            CovariateDist::TruncatedNormal { mean, sd, lower } => loop {
                let z: f64 = StandardNormal.sample(rng);
                let x = mean + sd * z;
                if x >= lower {
                    return x;
                }
            },
        }
    }
}

/// One covariate column. Values are emitted raw; the linear predictor uses
/// `value - center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub dist: CovariateDist,
    #[serde(default)]
    pub center: f64,
}

/// Sex (1 = woman) and age at first fracture.
pub fn default_covariates() -> Vec<CovariateSpec> {
    vec![
        CovariateSpec {
            name: "woman".into(),
            dist: CovariateDist::Bernoulli { p: 0.748 },
            center: 0.0,
        },
        CovariateSpec {
            name: "age".into(),
            dist: CovariateDist::TruncatedNormal {
                mean: 83.4,
                sd: 6.0,
                lower: 65.0,
            },
            center: 83.4,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Censoring {
    /// Administrative end of follow-up in years; may be infinite.
    pub horizon: f64,
    /// Rate of independent exponential dropout; 0 disables it.
    pub dropout_rate: f64,
}

impl Default for Censoring {
    fn default() -> Self {
        Self {
            horizon: 9.0,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EffectsSpec {
    /// Draw `B` from the multivariate Leroux field.
    Gmrf {
        gamma: f64,
        between: BetweenCov,
    },
    Fixed {
        effects: RandomEffects,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Indexed by [`Transition::index`].
    pub params: [TransitionParams; 3],
    pub effects: EffectsSpec,
    pub covariates: Vec<CovariateSpec>,
    pub censoring: Censoring,
    pub n_subjects: usize,
    /// Region sampling weights; uniform when `None`.
    pub region_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self, g: &SpatialGraph) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidArgument(
                "n_subjects must be at least 1".into(),
            ));
        }
        if !(self.censoring.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "censoring horizon must be positive, got {}",
                self.censoring.horizon
            )));
        }
        if !(self.censoring.dropout_rate >= 0.0) || !self.censoring.dropout_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be non-negative, got {}",
                self.censoring.dropout_rate
            )));
        }
        for p in &self.params {
            p.validate()?;
            if p.arity() != self.covariates.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} covariates declared but transition has {} coefficients",
                    self.covariates.len(),
                    p.arity()
                )));
            }
        }
        for c in &self.covariates {
            c.dist.validate()?;
        }
        if let Some(w) = &self.region_weights {
            if w.len() != g.n_regions() {
                return Err(Error::InvalidArgument(format!(
                    "{} region weights for {} regions",
                    w.len(),
                    g.n_regions()
                )));
            }
        }
        match &self.effects {
            EffectsSpec::Gmrf { gamma, between } => {
                LerouxMix::new(*gamma)?;
                between.validate()?;
            }
            EffectsSpec::Fixed { effects } => {
                if effects.n_regions() != g.n_regions() {
                    return Err(Error::InvalidArgument(format!(
                        "fixed effects cover {} regions, graph has {}",
                        effects.n_regions(),
                        g.n_regions()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything used to generate a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub params: [TransitionParams; 3],
    pub effects: RandomEffects,
    pub gamma: Option<f64>,
    pub between: Option<BetweenCov>,
    pub covariate_names: Vec<String>,
    pub covariate_centers: Vec<f64>,
    pub seed: u64,
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a cohort with raw covariates, plus the truth record.
pub fn simulate_cohort(c: &SimConfig, g: &SpatialGraph) -> Result<(Vec<Subject>, Truth)> {
    c.validate(g)?;
    let effects = match &c.effects {
        EffectsSpec::Fixed { effects } => effects.clone(),
        EffectsSpec::Gmrf { gamma, between } => {
            let q_w = gmrf::within_precision(g, LerouxMix::new(*gamma)?);
            let q = gmrf::joint_precision(&q_w, between)?;
            gmrf::sample_with_rng(&q, &mut subject_rng(c.seed, 0))?
        }
    };
    let regions = match &c.region_weights {
        Some(w) => Some(
            WeightedIndex::new(w)
                .map_err(|e| Error::InvalidArgument(format!("region weights: {e}")))?,
        ),
        None => None,
    };
    let centers: Vec<f64> = c.covariates.iter().map(|s| s.center).collect();
    let subjects: Vec<Subject> = (0..c.n_subjects)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(c.seed, i as u64 + 1);
            let region = match &regions {
                Some(w) => w.sample(&mut rng),
                None => rng.random_range(0..g.n_regions()),
            };
            let raw: Vec<f64> = c
                .covariates
                .iter()
                .map(|s| s.dist.sample(&mut rng))
                .collect();
            let x: Vec<f64> = raw.iter().zip(&centers).map(|(v, m)| v - m).collect();
            let eta = |tr: Transition| -> LinearPredictor<f64> {
                c.params[tr.index()].predictor(&x, effects.get(region, tr.index()))
            };
            let mut latent = |tr: Transition| -> Result<f64> {
                let e: f64 = Exp1.sample(&mut rng);
                c.params[tr.index()].inv_cum_hazard(eta(tr), e)
            };
            let t_fr = latent(Transition::InitialToIllness)?;
            let t_fd = latent(Transition::InitialToDeath)?;
            let t_rd = latent(Transition::IllnessToDeath)?;
            let dropout = if c.censoring.dropout_rate > 0.0 {
                let e: f64 = Exp1.sample(&mut rng);
                e / c.censoring.dropout_rate
            } else {
                f64::INFINITY
            };
            let censor = c.censoring.horizon.min(dropout);
            let (t1, exit) = if t_fr.min(t_fd) > censor {
                (censor, FirstExit::Censored)
            } else if t_fr < t_fd {
                let remaining = censor - t_fr;
                let exit = if t_rd <= remaining {
                    FirstExit::Illness {
                        sojourn: t_rd,
                        died: true,
                    }
                } else {
                    FirstExit::Illness {
                        sojourn: remaining,
                        died: false,
                    }
                };
                (t_fr, exit)
            } else {
                (t_fd, FirstExit::Death)
            };
            Ok(Subject {
                region,
                covariates: raw,
                t1,
                exit,
            })
        })
        .collect::<Result<_>>()?;
    let truth = Truth {
        params: c.params.clone(),
        effects,
        gamma: match &c.effects {
            EffectsSpec::Gmrf { gamma, .. } => Some(*gamma),
            EffectsSpec::Fixed { .. } => None,
        },
        between: match &c.effects {
            EffectsSpec::Gmrf { between, .. } => Some(*between),
            EffectsSpec::Fixed { .. } => None,
        },
        covariate_names: c.covariates.iter().map(|s| s.name.clone()).collect(),
        covariate_centers: centers,
        seed: c.seed,
    };
    Ok((subjects, truth))
}

/// A frequency with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub estimate: f64,
    pub se: f64,
}

impl Proportion {
    fn new(count: usize, n: usize) -> Self {
        let p = count as f64 / n as f64;
        Self {
            estimate: p,
            se: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }
}

/// Path frequencies at one time, starting in the initial state at time 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalOutcomes {
    pub time: f64,
    /// Still in the initial state; equals `p11`.
    pub s1: Proportion,
    pub p12: Proportion,
    pub p13: Proportion,
    /// Left the initial state by illness.
    pub f12: Proportion,
    /// Left the initial state by death.
    pub f13: Proportion,
}

/// Empirical occupation and first-exit frequencies. Every subject must be
/// observed up to the last grid time.
pub fn empirical_outcomes(data: &[Subject], times: &[f64]) -> Result<Vec<EmpiricalOutcomes>> {
    if data.is_empty() {
        return Err(Error::Data("empty cohort".into()));
    }
    let t_max = times.iter().copied().fold(0.0, f64::max);
    for (i, s) in data.iter().enumerate() {
        let end = match s.exit {
            FirstExit::Censored => Some(s.t1),
            FirstExit::Illness {
                sojourn,
                died: false,
            } => Some(s.t1 + sojourn),
            _ => None,
        };
        if let Some(end) = end {
            if end < t_max {
                return Err(Error::Data(format!(
                    "subject {} is censored at {end} before the last grid time {t_max}",
                    i + 1
                )));
            }
        }
    }
    let n = data.len();
    Ok(times
        .iter()
        .map(|&t| {
            let (mut s1, mut p12, mut p13, mut f12, mut f13) = (0, 0, 0, 0, 0);
            for s in data {
                if t < s.t1 {
                    s1 += 1;
                    continue;
                }
                match s.exit {
                    FirstExit::Death => {
                        f13 += 1;
                        p13 += 1;
                    }
                    FirstExit::Illness { sojourn, .. } => {
                        f12 += 1;
                        if t < s.t1 + sojourn {
                            p12 += 1;
                        } else {
                            p13 += 1;
                        }
                    }
                    FirstExit::Censored => s1 += 1,
                }
            }
            EmpiricalOutcomes {
                time: t,
                s1: Proportion::new(s1, n),
                p12: Proportion::new(p12, n),
                p13: Proportion::new(p13, n),
                f12: Proportion::new(f12, n),
                f13: Proportion::new(f13, n),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_config(n: usize, horizon: f64) -> SimConfig {
        let p = TransitionParams::new(1.0, 0.0, vec![]).unwrap();
        SimConfig {
            params: [p.clone(), p.clone(), p],
            effects: EffectsSpec::Fixed {
                effects: RandomEffects::zeros(1),
            },
            covariates: vec![],
            censoring: Censoring {
                horizon,
                dropout_rate: 0.0,
            },
            n_subjects: n,
            region_weights: None,
            seed: 42,
        }
    }

    fn single_region() -> SpatialGraph {
        SpatialGraph::from_edges(1, &[]).unwrap()
    }

    #[test]
    fn competing_exponentials() {
        let (data, _) =
            simulate_cohort(&unit_config(100_000, f64::INFINITY), &single_region()).unwrap();
        let n = data.len() as f64;
        let mean_exit = data.iter().map(|s| s.t1).sum::<f64>() / n;
        assert!((mean_exit - 0.5).abs() < 0.01, "mean exit {mean_exit}");
        let ill = data
            .iter()
            .filter(|s| matches!(s.exit, FirstExit::Illness { .. }))
            .count() as f64
            / n;
        assert!((ill - 0.5).abs() < 0.005, "illness fraction {ill}");
    }

    #[test]
    fn tiny_horizon_censors_everyone() {
        let (data, _) = simulate_cohort(&unit_config(2000, 1e-4), &single_region()).unwrap();
        let censored = data
            .iter()
            .filter(|s| s.exit == FirstExit::Censored)
            .count();
        assert!(censored as f64 > 0.999 * data.len() as f64 - 1.0);
    }

    #[test]
    fn empirical_table_basics() {
        let (data, _) =
            simulate_cohort(&unit_config(20_000, f64::INFINITY), &single_region()).unwrap();
        let rows = empirical_outcomes(&data, &[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(rows[0].s1.estimate, 1.0);
        assert_eq!(rows[0].p12.estimate + rows[0].p13.estimate, 0.0);
        for r in &rows {
            let total = r.s1.estimate + r.p12.estimate + r.p13.estimate;
            assert!((total - 1.0).abs() < 1e-12);
            let first = r.s1.estimate + r.f12.estimate + r.f13.estimate;
            assert!((first - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn markov_fixture_p12() {
        let mut c = unit_config(100_000, f64::INFINITY);
        c.params[0] = TransitionParams::from_scale(1.0, 0.5, vec![]).unwrap();
        c.params[1] = TransitionParams::from_scale(1.0, 0.5, vec![]).unwrap();
        let (data, _) = simulate_cohort(&c, &single_region()).unwrap();
        let r = empirical_outcomes(&data, &[1.0]).unwrap()[0];
        let expected = 0.5 * (-1f64).exp();
        assert!((r.p12.estimate - expected).abs() < 3.0 * r.p12.se);
    }

    #[test]
    fn censored_data_is_rejected() {
        let (data, _) = simulate_cohort(&unit_config(100, 0.5), &single_region()).unwrap();
        assert!(empirical_outcomes(&data, &[1.0]).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let c = unit_config(500, 2.0);
        let a = simulate_cohort(&c, &single_region()).unwrap();
        let b = simulate_cohort(&c, &single_region()).unwrap();
        assert_eq!(a, b);
    }
}
