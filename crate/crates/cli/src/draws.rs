//! Long-format posterior draws: `chain, iteration, parameter, value`.
//!
//! Each draw is written as `log_posterior` followed by the reporting-scale
//! parameters in sampler order, so a file maps back onto model states.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use illdeath::gmrf::{BetweenCov, LerouxMix, RandomEffects};
use illdeath::hazard::TransitionParams;
use illdeath::likelihood::ModelState;
use illdeath::mcmc::{self, PosteriorDraws};

use crate::error::{CliError, CliResult};

const LOG_POSTERIOR: &str = "log_posterior";

pub fn write<W: Write>(mut out: W, d: &PosteriorDraws) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::data(format!("writing draws: {e}"));
    let names = d.parameter_names();
    writeln!(out, "chain,iteration,parameter,value").map_err(io)?;
    for chain in &d.chains {
        for draw in &chain.draws {
            let (c, it) = (chain.chain, draw.iteration);
            writeln!(out, "{c},{it},{LOG_POSTERIOR},{}", draw.log_posterior).map_err(io)?;
            for (n, v) in names.iter().zip(mcmc::parameter_values(&draw.state)) {
                writeln!(out, "{c},{it},{n},{v}").map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

/// Draws read back from a file, in file order within each chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawTable {
    pub names: Vec<String>,
    /// `chain -> [(iteration, values)]`, values aligned with `names`.
    pub chains: BTreeMap<usize, Vec<(usize, Vec<f64>)>>,
}

pub fn read<R: BufRead>(input: R) -> CliResult<DrawTable> {
    let mut names: Vec<String> = Vec::new();
    let mut chains: BTreeMap<usize, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "chain,iteration,parameter,value" => {}
        _ => {
            return Err(CliError::data(
                "draws file lacks the `chain,iteration,parameter,value` header",
            ))
        }
    }
    // Names are taken from the first draw and enforced on the rest.
    let mut naming = true;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| CliError::data(format!("draws line {line_no}: {e}")))?;
        let fail = |m: &str| CliError::data(format!("draws line {line_no}: {m}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(fail("expected four fields"));
        }
        let chain: usize = f[0].parse().map_err(|_| fail("bad chain"))?;
        let iteration: usize = f[1].parse().map_err(|_| fail("bad iteration"))?;
        let value: f64 = f[3].parse().map_err(|_| fail("bad value"))?;
        let rows = chains.entry(chain).or_default();
        if f[2] == LOG_POSTERIOR {
            if names.is_empty() {
                names.push(LOG_POSTERIOR.to_string());
            } else {
                naming = false;
            }
            if rows.last().is_some_and(|(_, v)| v.len() != names.len()) {
                return Err(fail("previous draw is incomplete"));
            }
            rows.push((iteration, vec![value]));
            continue;
        }
        let Some((it, values)) = rows.last_mut() else {
            return Err(fail("each draw must start with log_posterior"));
        };
        if *it != iteration {
            return Err(fail("each draw must start with log_posterior"));
        }
        if naming {
            names.push(f[2].to_string());
        } else if names.get(values.len()).map(String::as_str) != Some(f[2]) {
            return Err(fail(&format!("unexpected parameter `{}`", f[2])));
        }
        values.push(value);
    }
    if chains.is_empty() {
        return Err(CliError::data("draws file has no draws"));
    }
    if chains
        .values()
        .flatten()
        .any(|(_, v)| v.len() != names.len())
    {
        return Err(CliError::data("draws file ends inside a draw"));
    }
    Ok(DrawTable { names, chains })
}

impl DrawTable {
    /// `[parameter][chain][draw]`, as the diagnostics expect.
    pub fn parameter_chains(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.names.len())
            .map(|p| {
                self.chains
                    .values()
                    .map(|rows| rows.iter().map(|(_, v)| v[p]).collect())
                    .collect()
            })
            .collect()
    }

    /// Model states of every `stride`-th draw per chain.
    pub fn states(
        &self,
        covariates: &[String],
        n_regions: usize,
        stride: usize,
    ) -> CliResult<Vec<ModelState>> {
        let mut expected = vec![LOG_POSTERIOR.to_string()];
        expected.extend(mcmc::parameter_names(covariates, n_regions));
        if expected != self.names {
            return Err(CliError::data(format!(
                "draws do not match the fitted model ({} covariates, {n_regions} regions)",
                covariates.len()
            )));
        }
        let stride = stride.max(1);
        let mut out = Vec::new();
        for rows in self.chains.values() {
            for (_, v) in rows.iter().step_by(stride) {
                out.push(state_from_values(&v[1..], covariates.len(), n_regions)?);
            }
        }
        Ok(out)
    }
}

/// Inverse of [`mcmc::parameter_values`].
pub fn state_from_values(v: &[f64], arity: usize, n_regions: usize) -> CliResult<ModelState> {
    let mut it = v.iter().copied();
    let mut next = || {
        it.next()
            .ok_or_else(|| CliError::data("too few parameter values"))
    };
    let mut params = Vec::with_capacity(3);
    for _ in 0..3 {
        let shape = next()?;
        let scale = next()?;
        let beta = (0..arity)
            .map(|_| next())
            .collect::<CliResult<Vec<f64>>>()?;
        params.push(TransitionParams::from_scale(shape, scale, beta)?);
    }
    let gamma = next()?;
    let tau = [next()?, next()?, next()?];
    let rho = [next()?, next()?, next()?];
    let b = (0..3 * n_regions)
        .map(|_| next())
        .collect::<CliResult<Vec<f64>>>()?;
    let params: [TransitionParams; 3] = params.try_into().expect("three transitions");
    Ok(ModelState {
        params,
        effects: RandomEffects::from_vec(n_regions, b)?,
        mix: LerouxMix::new(gamma)?,
        between: BetweenCov::new(tau, rho)?,
    })
}
