//! The TOML run configuration.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Unknown keys anywhere are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use illdeath::gmrf::{BetweenCov, RandomEffects};
use illdeath::hazard::{Transition, TransitionParams};
use illdeath::outcomes::{Measure, OutcomeGrid};
use illdeath::simulate::{Censoring, CovariateDist, CovariateSpec, EffectsSpec, SimConfig};
use illdeath::{PriorConfig, SamplerConfig, SpatialGraph};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Single source of randomness for simulation and sampling.
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub graph: Option<GraphSpec>,
    #[serde(default)]
    pub covariates: Vec<CovariateColumn>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub outcomes: Option<OutcomesSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub cohort: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Either a rook lattice or the number of regions in `paths.adjacency`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub grid: Option<[usize; 2]>,
    pub n_regions: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateColumn {
    pub name: String,
    #[serde(default)]
    pub center: Center,
}

/// `true` centres at the sample mean, a number centres at that value.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Center {
    Mean(bool),
    At(f64),
}

impl Default for Center {
    fn default() -> Self {
        Center::Mean(false)
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub target_acceptance: f64,
    pub thinning: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            n_chains: d.n_chains,
            n_warmup: d.n_warmup,
            n_samples: d.n_samples,
            target_acceptance: d.target_acceptance,
            thinning: d.thinning,
        }
    }
}

impl SamplerSection {
    pub fn with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_chains: self.n_chains,
            n_warmup: self.n_warmup,
            n_samples: self.n_samples,
            seed,
            target_acceptance: self.target_acceptance,
            thinning: self.thinning,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n_subjects: usize,
    /// One entry per transition, labelled `FR`, `FD` or `RD`.
    pub transitions: Vec<TransitionSpec>,
    pub effects: EffectsSection,
    #[serde(default)]
    pub censoring: Censoring,
    pub covariates: Vec<SimCovariate>,
    #[serde(default)]
    pub region_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub transition: String,
    pub shape: f64,
    pub scale: f64,
    /// In the order of `simulate.covariates`.
    #[serde(default)]
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EffectsSection {
    Gmrf {
        gamma: f64,
        tau: [f64; 3],
        rho: [f64; 3],
    },
    /// No spatial variation.
    None,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCovariate {
    pub name: String,
    pub dist: CovariateDist,
    /// Reference value recorded in the truth file.
    #[serde(default)]
    pub center: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomesSection {
    /// Use every `draw_stride`-th stored draw of each chain.
    #[serde(default = "one")]
    pub draw_stride: usize,
    /// 1-based regions; all regions when absent.
    #[serde(default)]
    pub regions: Option<Vec<usize>>,
    pub profiles: Vec<ProfileSpec>,
    pub requests: Vec<RequestSpec>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub name: String,
    /// Raw covariate values keyed by column name.
    pub covariates: toml::Table,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSpec {
    pub measure: String,
    pub times: Vec<f64>,
    #[serde(default)]
    pub start: f64,
    /// Illness onset time, needed by `p22` and `p23`.
    #[serde(default)]
    pub onset: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut c: RunConfig =
            toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        if c.version != VERSION {
            return Err(CliError::config(format!(
                "config version {} is not supported (expected {VERSION})",
                c.version
            )));
        }
        for p in [
            &mut c.paths.cohort,
            &mut c.paths.adjacency,
            &mut c.paths.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let mut seen = BTreeSet::new();
        for col in &c.covariates {
            if !seen.insert(col.name.as_str()) {
                return Err(CliError::config(format!(
                    "covariate `{}` declared twice",
                    col.name
                )));
            }
            if matches!(col.center, Center::At(v) if !v.is_finite()) {
                return Err(CliError::config(format!(
                    "covariate `{}` has a non-finite centre",
                    col.name
                )));
            }
        }
        c.prior.validate()?;
        c.sampler.with_seed(c.seed).validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| e.context(path.display()))
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    /// An existing input path, or a config error naming the key.
    pub fn input(&self, key: &str) -> CliResult<&Path> {
        let p = match key {
            "cohort" => &self.paths.cohort,
            "adjacency" => &self.paths.adjacency,
            _ => unreachable!("unknown path key {key}"),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| CliError::config(format!("paths.{key} is not set")))?;
        if !p.exists() {
            return Err(CliError::config(format!(
                "paths.{key}: {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }

    /// The lattice from `graph.grid`, or the adjacency file.
    pub fn graph(&self) -> CliResult<SpatialGraph> {
        let spec = self
            .graph
            .as_ref()
            .ok_or_else(|| CliError::config("[graph] needs `grid` or `n_regions`"))?;
        match (spec.grid, spec.n_regions) {
            (Some([r, c]), None) => {
                if r == 0 || c == 0 {
                    return Err(CliError::config("graph.grid dimensions must be positive"));
                }
                Ok(SpatialGraph::grid(r, c)?)
            }
            (None, Some(k)) => {
                let path = self.input("adjacency")?;
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                SpatialGraph::load_adjacency(&text, k)
                    .map_err(|e| CliError::from(e).context(path.display()))
            }
            _ => Err(CliError::config(
                "[graph] needs exactly one of `grid` and `n_regions`",
            )),
        }
    }
}

impl SimulateSection {
    pub fn to_sim_config(&self, seed: u64, n_regions: usize) -> CliResult<SimConfig> {
        let mut params: [Option<TransitionParams>; 3] = [None, None, None];
        for t in &self.transitions {
            let tr = Transition::from_label(&t.transition).ok_or_else(|| {
                CliError::config(format!(
                    "unknown transition `{}` (use FR, FD or RD)",
                    t.transition
                ))
            })?;
            if params[tr.index()].is_some() {
                return Err(CliError::config(format!(
                    "transition {} given twice",
                    tr.label()
                )));
            }
            if t.coefficients.len() != self.covariates.len() {
                return Err(CliError::config(format!(
                    "transition {} has {} coefficients for {} covariates",
                    tr.label(),
                    t.coefficients.len(),
                    self.covariates.len()
                )));
            }
            params[tr.index()] = Some(TransitionParams::from_scale(
                t.shape,
                t.scale,
                t.coefficients.clone(),
            )?);
        }
        if params.iter().any(Option::is_none) {
            return Err(CliError::config(
                "simulate.transitions must cover FR, FD and RD",
            ));
        }
        let params = params.map(Option::unwrap);
        let effects = match self.effects {
            EffectsSection::Gmrf { gamma, tau, rho } => EffectsSpec::Gmrf {
                gamma,
                between: BetweenCov::new(tau, rho)?,
            },
            EffectsSection::None => EffectsSpec::Fixed {
                effects: RandomEffects::zeros(n_regions),
            },
        };
        Ok(SimConfig {
            params,
            effects,
            covariates: self
                .covariates
                .iter()
                .map(|c| CovariateSpec {
                    name: c.name.clone(),
                    dist: c.dist,
                    center: c.center,
                })
                .collect(),
            censoring: self.censoring,
            n_subjects: self.n_subjects,
            region_weights: self.region_weights.clone(),
            seed,
        })
    }
}

impl RequestSpec {
    pub fn grid(&self) -> CliResult<OutcomeGrid> {
        let measure: Measure = self.measure.parse()?;
        if measure.needs_onset() && self.onset.is_none() {
            return Err(CliError::config(format!(
                "measure {} is conditioned on the illness onset time; set `onset`",
                measure.label()
            )));
        }
        let grid = OutcomeGrid {
            measure,
            times: self.times.clone(),
            start: self.start,
            onset: self.onset,
        };
        grid.validate()?;
        Ok(grid)
    }
}
