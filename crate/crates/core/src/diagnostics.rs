//! Convergence diagnostics and posterior summaries.
//!
//! R̂ is the rank-normalized split-R̂ (the larger of the bulk and folded
//! versions); bulk ESS uses Geyer's initial monotone sequence on the
//! rank-normalized split chains.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::outcomes::quantile_sorted;

/// Mean, sd and central 95% interval, as in a posterior table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
                q025: f64::NAN,
                q975: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            sd,
            q025: quantile_sorted(&sorted, 0.025),
            q975: quantile_sorted(&sorted, 0.975),
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub name: String,
    #[serde(flatten)]
    pub moments: Moments,
    /// Omitted with fewer than two chains.
    pub rhat: Option<f64>,
    /// Omitted when the draws are constant.
    pub ess_bulk: Option<f64>,
    /// All draws identical: R̂ and ESS are undefined.
    pub degenerate: bool,
}

/// Summarizes one parameter from per-chain draws of equal length.
pub fn report(name: &str, chains: &[Vec<f64>]) -> ParameterReport {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let moments = Moments::of(&pooled);
    let degenerate = pooled.windows(2).all(|w| w[0] == w[1]);
    let rhat = if chains.len() < 2 || degenerate {
        None
    } else {
        Some(split_rhat(chains))
    };
    let ess_bulk = if degenerate { None } else { ess_bulk(chains) };
    ParameterReport {
        name: name.to_string(),
        moments,
        rhat,
        ess_bulk,
        degenerate,
    }
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[n - half..n].to_vec());
    }
    out
}

/// Normal scores of the pooled ranks, ties averaged.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| (0..v.len()).map(move |i| (c, i)))
        .collect();
    idx.sort_by(|a, b| chains[a.0][a.1].total_cmp(&chains[b.0][b.1]));
    let total = idx.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < idx.len() {
        let v = chains[idx[start].0][idx[start].1];
        let mut end = start + 1;
        while end < idx.len() && chains[idx[end].0][idx[end].1] == v {
            end += 1;
        }
        let rank = 0.5 * ((start + 1) + end) as f64;
        let z = normal.inverse_cdf((rank - 0.375) / (total + 0.25));
        for &(c, i) in &idx[start..end] {
            out[c][i] = z;
        }
        start = end;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    let b = n * var(&means);
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Rank-normalized split-R̂. Needs at least two chains of four draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let s = split(chains);
    if s.is_empty() || s[0].len() < 2 {
        return f64::NAN;
    }
    let bulk = rhat_basic(&rank_normalize(&s));
    let med = {
        let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        pooled.sort_by(f64::total_cmp);
        quantile_sorted(&pooled, 0.5)
    };
    let folded: Vec<Vec<f64>> = s
        .iter()
        .map(|c| c.iter().map(|x| (x - med).abs()).collect())
        .collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    bulk.max(tail)
}

/// Effective sample size of the given chains (no splitting or ranking).
pub fn ess(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    if m == 0 {
        return None;
    }
    let n = chains.iter().map(Vec::len).min().unwrap();
    if n < 4 {
        return None;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    // Biased autocovariance at lag t, averaged over chains.
    let acov = |t: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| {
                (0..n - t)
                    .map(|i| (c[i] - mu) * (c[i + t] - mu))
                    .sum::<f64>()
                    / nf
            })
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let mean_var = acov0 * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += var(&means);
    }
    if !(var_plus > 0.0) {
        return None;
    }
    let rho_at = |t: usize| 1.0 - (mean_var - acov(t)) / var_plus;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 1;
    while t + 4 < n && even + odd > 0.0 {
        even = rho_at(t + 1);
        odd = rho_at(t + 2);
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Some(total / tau)
}

/// Bulk ESS: [`ess`] on rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Option<f64> {
    let s = split(chains);
    if s.is_empty() || s[0].len() < 4 {
        return None;
    }
    ess(&rank_normalize(&s))
}
