use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use illdeath::diagnostics::{self, Moments};
use illdeath::hazard::Transition;
use illdeath::likelihood::apply_centering;
use illdeath::mcmc::{self, Diagnostics};
use illdeath::outcomes::{self, OutcomeConfig};
use illdeath::simulate::simulate_cohort;
use serde::{Deserialize, Serialize};

use crate::config::{Center, RunConfig};
use crate::error::{CliError, CliResult, Exit};
use crate::{cohort, draws};

/// Above this split-R̂ a fit exits with [`Exit::Convergence`].
pub const RHAT_WARNING: f64 = 1.1;

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Context {
    pub fn new(config: RunConfig, out: Option<PathBuf>, force: bool) -> CliResult<Self> {
        let out = out.or_else(|| config.paths.output.clone()).ok_or_else(|| {
            CliError::config("no output directory: set paths.output or pass --out")
        })?;
        Ok(Self { config, out, force })
    }

    fn target(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.out.join(name);
        if p.exists() && !self.force {
            return Err(CliError::config(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
        Ok(p)
    }

    fn create_out_dir(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn existing(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.out.join(name);
        if !p.exists() {
            return Err(CliError::config(format!(
                "{} not found; run `fit` first",
                p.display()
            )));
        }
        Ok(p)
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::data(e.to_string()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

pub fn simulate(ctx: &Context) -> CliResult<Exit> {
    let c = &ctx.config;
    let sim = c
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::config("the config has no [simulate] section"))?;
    let g = c.graph()?;
    let sc = sim.to_sim_config(c.seed, g.n_regions())?;
    let paths = ["cohort.csv", "truth.json", "adjacency.txt"].map(|n| ctx.target(n));
    let [cohort_path, truth_path, adj_path] = paths;
    let (cohort_path, truth_path, adj_path) = (cohort_path?, truth_path?, adj_path?);
    let (data, truth) = simulate_cohort(&sc, &g)?;
    ctx.create_out_dir()?;
    let names: Vec<String> = sim.covariates.iter().map(|c| c.name.clone()).collect();
    cohort::write(create(&cohort_path)?, &names, &data)?;
    write_json(&truth_path, &truth)?;
    fs::write(&adj_path, g.to_edge_list()).map_err(|e| CliError::io(&adj_path, e))?;
    eprintln!(
        "simulated {} subjects in {} regions into {}",
        data.len(),
        g.n_regions(),
        ctx.out.display()
    );
    Ok(Exit::Ok)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateSummary {
    pub name: String,
    /// Subtracted from the raw column before fitting.
    pub center: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl From<Moments> for Stat {
    fn from(m: Moments) -> Self {
        Self {
            mean: m.mean,
            sd: m.sd,
            q025: m.q025,
            q975: m.q975,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedStat {
    pub name: String,
    #[serde(flatten)]
    pub stat: Stat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionSummary {
    pub transition: String,
    pub alpha: Stat,
    pub lambda: Stat,
    pub beta: Vec<NamedStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionEffect {
    /// 1-based.
    pub region: usize,
    #[serde(rename = "FR")]
    pub fr: f64,
    #[serde(rename = "FD")]
    pub fd: f64,
    #[serde(rename = "RD")]
    pub rd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub n_subjects: usize,
    pub n_regions: usize,
    pub n_chains: usize,
    pub n_draws_per_chain: usize,
    pub seed: u64,
    pub covariates: Vec<CovariateSummary>,
    pub transitions: Vec<TransitionSummary>,
    /// γ, the three precisions and the three correlations.
    pub hyperparameters: Vec<NamedStat>,
    /// Posterior means of the region effects.
    pub region_effects: Vec<RegionEffect>,
    pub max_rhat: Option<f64>,
}

fn summarize(
    diag: &Diagnostics,
    covariates: Vec<CovariateSummary>,
    n_subjects: usize,
    n_regions: usize,
    n_chains: usize,
    n_draws: usize,
    seed: u64,
) -> CliResult<Summary> {
    let stat = |name: &str| -> CliResult<Stat> {
        diag.get(name)
            .map(|r| r.moments.into())
            .ok_or_else(|| CliError::data(format!("no draws for {name}")))
    };
    let mut transitions = Vec::new();
    for tr in Transition::ALL {
        let l = tr.label();
        transitions.push(TransitionSummary {
            transition: l.to_string(),
            alpha: stat(&format!("alpha_{l}"))?,
            lambda: stat(&format!("lambda_{l}"))?,
            beta: covariates
                .iter()
                .map(|c| {
                    Ok(NamedStat {
                        name: c.name.clone(),
                        stat: stat(&format!("beta_{l}_{}", c.name))?,
                    })
                })
                .collect::<CliResult<_>>()?,
        });
    }
    let hyper: Vec<String> = mcmc::parameter_names(&[], 0)
        .into_iter()
        .filter(|n| n == "gamma" || n.starts_with("tau_") || n.starts_with("rho_"))
        .collect();
    let hyperparameters = hyper
        .iter()
        .map(|n| {
            Ok(NamedStat {
                name: n.clone(),
                stat: stat(n)?,
            })
        })
        .collect::<CliResult<_>>()?;
    let mean = |tr: &str, k: usize| stat(&format!("b_{tr}_{k}")).map(|s| s.mean);
    let region_effects = (1..=n_regions)
        .map(|k| {
            Ok(RegionEffect {
                region: k,
                fr: mean("FR", k)?,
                fd: mean("FD", k)?,
                rd: mean("RD", k)?,
            })
        })
        .collect::<CliResult<_>>()?;
    Ok(Summary {
        n_subjects,
        n_regions,
        n_chains,
        n_draws_per_chain: n_draws,
        seed,
        covariates,
        transitions,
        hyperparameters,
        region_effects,
        max_rhat: diag.max_rhat(),
    })
}

pub fn fit(ctx: &Context) -> CliResult<Exit> {
    let c = &ctx.config;
    let g = c.graph()?;
    let cohort_path = c.input("cohort")?;
    let names = c.covariate_names();
    let mut data = cohort::read(open(cohort_path)?, &names, g.n_regions())
        .map_err(|e| e.context(cohort_path.display()))?;
    if data.is_empty() {
        return Err(CliError::data(format!(
            "{}: no subjects",
            cohort_path.display()
        )));
    }
    let n = data.len() as f64;
    let centers: Vec<f64> = c
        .covariates
        .iter()
        .enumerate()
        .map(|(i, col)| match col.center {
            Center::Mean(true) => data.iter().map(|s| s.covariates[i]).sum::<f64>() / n,
            Center::Mean(false) => 0.0,
            Center::At(v) => v,
        })
        .collect();
    apply_centering(&mut data, &centers);
    let targets = ["draws.csv", "summary.json", "diagnostics.json"].map(|f| ctx.target(f));
    let [draws_path, summary_path, diag_path] = targets;
    let (draws_path, summary_path, diag_path) = (draws_path?, summary_path?, diag_path?);

    let sc = c.sampler.with_seed(c.seed);
    eprintln!(
        "fitting {} subjects, {} regions: {} chains x ({} warmup + {} draws)",
        data.len(),
        g.n_regions(),
        sc.n_chains,
        sc.n_warmup,
        sc.n_samples
    );
    let mut posterior = mcmc::run(&data, &g, &c.prior, &sc)?;
    posterior.covariate_names = names.clone();
    let diag = mcmc::diagnostics(&posterior);
    let covariates = names
        .iter()
        .zip(&centers)
        .map(|(name, &center)| CovariateSummary {
            name: name.clone(),
            center,
        })
        .collect();
    let summary = summarize(
        &diag,
        covariates,
        data.len(),
        g.n_regions(),
        sc.n_chains,
        sc.n_samples,
        c.seed,
    )?;
    ctx.create_out_dir()?;
    draws::write(create(&draws_path)?, &posterior)?;
    write_json(&summary_path, &summary)?;
    write_json(&diag_path, &diag)?;
    Ok(convergence_exit(diag.max_rhat()))
}

fn convergence_exit(max_rhat: Option<f64>) -> Exit {
    match max_rhat {
        Some(r) if r > RHAT_WARNING => {
            eprintln!("warning: max split-R̂ {r:.3} exceeds {RHAT_WARNING}");
            Exit::Convergence
        }
        _ => Exit::Ok,
    }
}

fn read_summary(ctx: &Context) -> CliResult<Summary> {
    let path = ctx.existing("summary.json")?;
    serde_json::from_reader(open(&path)?)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_draws(ctx: &Context) -> CliResult<draws::DrawTable> {
    let path = ctx.existing("draws.csv")?;
    draws::read(open(&path)?).map_err(|e| e.context(path.display()))
}

pub fn outcomes(ctx: &Context) -> CliResult<Exit> {
    let c = &ctx.config;
    let req = c
        .outcomes
        .as_ref()
        .ok_or_else(|| CliError::config("the config has no [outcomes] section"))?;
    if req.draw_stride == 0 {
        return Err(CliError::config("outcomes.draw_stride must be at least 1"));
    }
    let grids = req
        .requests
        .iter()
        .map(|r| r.grid())
        .collect::<CliResult<Vec<_>>>()?;
    let summary = read_summary(ctx)?;
    let names: Vec<String> = summary.covariates.iter().map(|c| c.name.clone()).collect();
    let k = summary.n_regions;
    let regions: Vec<usize> = match &req.regions {
        None => (0..k).collect(),
        Some(r) => r
            .iter()
            .map(|&i| {
                if i == 0 || i > k {
                    Err(CliError::config(format!(
                        "outcomes.regions: {i} outside 1..={k}"
                    )))
                } else {
                    Ok(i - 1)
                }
            })
            .collect::<CliResult<_>>()?,
    };
    let mut profiles = Vec::new();
    for p in &req.profiles {
        if let Some(key) = p.covariates.keys().find(|key| !names.contains(key)) {
            return Err(CliError::config(format!(
                "profile `{}`: unknown covariate `{key}`",
                p.name
            )));
        }
        let x = summary
            .covariates
            .iter()
            .map(|cov| {
                let v = p.covariates.get(&cov.name).ok_or_else(|| {
                    CliError::config(format!(
                        "profile `{}` lacks covariate `{}`",
                        p.name, cov.name
                    ))
                })?;
                let raw = v
                    .as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| {
                        CliError::config(format!(
                            "profile `{}`: `{}` is not a number",
                            p.name, cov.name
                        ))
                    })?;
                Ok(raw - cov.center)
            })
            .collect::<CliResult<Vec<f64>>>()?;
        profiles.push((p.name.clone(), x));
    }
    let out_path = ctx.target("outcomes.csv")?;
    let states = read_draws(ctx)?.states(&names, k, req.draw_stride)?;
    let cfg = OutcomeConfig::default();
    let mut w = csv::Writer::from_writer(create(&out_path)?);
    let csv_err = |e: csv::Error| CliError::data(e.to_string());
    w.write_record([
        "region", "profile", "time", "measure", "mean", "sd", "q025", "q975",
    ])
    .map_err(csv_err)?;
    for (name, x) in &profiles {
        for grid in &grids {
            let rows = outcomes::posterior_summary(&states, x, &regions, grid, &cfg)?;
            for r in rows {
                w.write_record([
                    (r.region + 1).to_string(),
                    name.clone(),
                    r.time.to_string(),
                    grid.measure.label().to_string(),
                    r.mean.to_string(),
                    r.sd.to_string(),
                    r.q025.to_string(),
                    r.q975.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&out_path, e))?;
    Ok(Exit::Ok)
}

pub fn diagnose(ctx: &Context, out: &mut dyn Write) -> CliResult<Exit> {
    use std::fmt::Write as _;
    let table = read_draws(ctx)?;
    let chains = table.parameter_chains();
    let mut text = String::new();
    writeln!(
        text,
        "{:<24} {:>12} {:>10} {:>12} {:>12} {:>7} {:>8}",
        "parameter", "mean", "sd", "2.5%", "97.5%", "R-hat", "ESS"
    )
    .expect("write to string");
    let mut max_rhat: Option<f64> = None;
    for (name, c) in table.names.iter().zip(&chains) {
        let r = diagnostics::report(name, c);
        if let Some(v) = r.rhat {
            max_rhat = Some(max_rhat.map_or(v, |m| m.max(v)));
        }
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        writeln!(
            text,
            "{:<24} {:>12.4} {:>10.4} {:>12.4} {:>12.4} {:>7} {:>8}",
            name,
            r.moments.mean,
            r.moments.sd,
            r.moments.q025,
            r.moments.q975,
            opt(r.rhat, 3),
            opt(r.ess_bulk, 0)
        )
        .expect("write to string");
    }
    let n_draws = table.chains.values().next().map_or(0, Vec::len);
    writeln!(
        text,
        "{} chains x {} draws; max R-hat {}",
        table.chains.len(),
        n_draws,
        max_rhat.map_or("-".to_string(), |v| format!("{v:.3}"))
    )
    .expect("write to string");
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            return Err(CliError::data(e.to_string()))
        }
        _ => {}
    }
    Ok(convergence_exit(max_rhat))
}
