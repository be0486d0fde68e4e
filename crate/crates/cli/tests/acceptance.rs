//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run alone with `cargo test --release -p illdeath-cli --test acceptance`.
//! Set `ACCEPTANCE_ONLY=1,4` to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use illdeath::gmrf::{self, BetweenCov, LerouxMix, RandomEffects, GAMMA_EPS};
use illdeath::graph::SpatialGraph;
use illdeath::hazard::{Transition, TransitionParams};
use illdeath::likelihood::{apply_centering, ModelState, Subject};
use illdeath::linalg;
use illdeath::mcmc::{self, SamplerConfig};
use illdeath::outcomes::{self, Measure, OutcomeConfig, Profile};
use illdeath::prior::{self, PriorConfig};
use illdeath::simulate::{
    default_covariates, empirical_outcomes, simulate_cohort, Censoring, EffectsSpec, SimConfig,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Weibull shapes and scales of the simulation fixtures (FR, FD, RD), with
/// coefficients on sex and age.
fn fixture_params() -> [TransitionParams; 3] {
    [
        TransitionParams::from_scale(0.9, 0.028, vec![0.021, 0.024]).unwrap(),
        TransitionParams::from_scale(0.8, 0.335, vec![-0.510, 0.070]).unwrap(),
        TransitionParams::from_scale(0.65, 0.593, vec![-0.634, 0.049]).unwrap(),
    ]
}

fn single_region_state(shape: [f64; 3], log_scale: [f64; 3], eta: [f64; 3]) -> ModelState {
    let mut m = ModelState::initial(1, 0);
    for j in 0..3 {
        m.params[j] = TransitionParams::new(shape[j], log_scale[j], vec![]).unwrap();
    }
    m.effects = RandomEffects::from_vec(1, eta.to_vec()).unwrap();
    m
}

fn no_covariates() -> Profile {
    Profile {
        covariates: vec![],
        region: 0,
    }
}

fn unchecked() -> OutcomeConfig<f64> {
    OutcomeConfig {
        check_identities: false,
        ..Default::default()
    }
}

fn probability_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = unchecked();
    let p = no_covariates();
    let mut worst = [0.0f64; 2];
    for _ in 0..100 {
        let shape = [0; 3].map(|_| rng.random_range(0.5..=2.0));
        let log_scale = [0; 3].map(|_| rng.random_range(-3.0..=1.0));
        let eta = [0; 3].map(|_| rng.random_range(-1.0..=1.0));
        let m = single_region_state(shape, log_scale, eta);
        for i in 1..=10 {
            let t = 0.5 * i as f64;
            let tp =
                |meas| outcomes::transition_probability(&m, &p, meas, 0.0, t, None, &cfg).unwrap();
            let occ = tp(Measure::P11) + tp(Measure::P12) + tp(Measure::P13);
            let f12 = outcomes::cumulative_incidence(&m, &p, Transition::InitialToIllness, t, &cfg)
                .unwrap();
            let f13 = outcomes::cumulative_incidence(&m, &p, Transition::InitialToDeath, t, &cfg)
                .unwrap();
            let s1 = outcomes::sojourn_survival(&m, &p, t).unwrap();
            worst[0] = worst[0].max((occ - 1.0).abs());
            worst[1] = worst[1].max((f12 + f13 + s1 - 1.0).abs());
        }
    }
    outcome(
        worst[0] < 1e-8 && worst[1] < 1e-8,
        format!(
            "max |p11+p12+p13-1| = {:.2e}, max |F12+F13+S1-1| = {:.2e}",
            worst[0], worst[1]
        ),
    )
}

fn markov_p12(a: f64, b: f64, c: f64, t: f64) -> f64 {
    let d = a + b - c;
    if d == 0.0 {
        a * t * (-c * t).exp()
    } else {
        a * (-c * t).exp() * (1.0 - (-d * t).exp()) / d
    }
}

fn markov_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut rates: Vec<[f64; 3]> = vec![[0.5, 0.5, 1.0], [0.2, 0.3, 0.5], [1.0, 0.25, 1.25]];
    while rates.len() < 20 {
        rates.push([0; 3].map(|_| rng.random_range(0.05..2.0)));
    }
    let cfg = OutcomeConfig::default();
    let p = no_covariates();
    let mut worst = 0.0f64;
    let mut fixture = f64::NAN;
    for r in &rates {
        let m = single_region_state([1.0; 3], r.map(f64::ln), [0.0; 3]);
        for t in [0.5, 1.0, 2.0, 5.0] {
            let q =
                outcomes::transition_probability(&m, &p, Measure::P12, 0.0, t, None, &cfg).unwrap();
            worst = worst.max((q - markov_p12(r[0], r[1], r[2], t)).abs());
            if *r == [0.5, 0.5, 1.0] && t == 1.0 {
                fixture = q;
            }
        }
    }
    let fixture_ok = (fixture - 0.18394).abs() < 5e-6;
    outcome(
        worst < 1e-8 && fixture_ok,
        format!(
            "20 rate sets, max error {worst:.2e}; degenerate a+b=c fixture p12(0,1) = {fixture:.5}"
        ),
    )
}

fn monte_carlo_oracle() -> Outcome {
    let params = [
        TransitionParams::from_scale(1.3, 0.25, vec![]).unwrap(),
        TransitionParams::from_scale(0.8, 0.15, vec![]).unwrap(),
        TransitionParams::from_scale(0.7, 0.4, vec![]).unwrap(),
    ];
    let g = SpatialGraph::from_edges(1, &[]).unwrap();
    let cfg = SimConfig {
        params: params.clone(),
        effects: EffectsSpec::Fixed {
            effects: RandomEffects::zeros(1),
        },
        covariates: vec![],
        censoring: Censoring {
            horizon: f64::INFINITY,
            dropout_rate: 0.0,
        },
        n_subjects: 1_000_000,
        region_weights: None,
        seed: 303,
    };
    let (data, _) = simulate_cohort(&cfg, &g).unwrap();
    let times = [1.0, 2.0, 3.0, 4.0, 5.0];
    let emp = empirical_outcomes(&data, &times).unwrap();
    let m = ModelState {
        params,
        effects: RandomEffects::zeros(1),
        mix: LerouxMix::new(0.0).unwrap(),
        between: BetweenCov::identity(),
    };
    let oc = OutcomeConfig::default();
    let p = no_covariates();
    let mut worst = 0.0f64;
    for e in &emp {
        let p12 =
            outcomes::transition_probability(&m, &p, Measure::P12, 0.0, e.time, None, &oc).unwrap();
        let f12 = outcomes::cumulative_incidence(&m, &p, Transition::InitialToIllness, e.time, &oc)
            .unwrap();
        worst = worst
            .max((p12 - e.p12.estimate).abs())
            .max((f12 - e.f12.estimate).abs());
    }
    outcome(
        worst < 0.005,
        format!("10^6 paths, max |MC - quadrature| = {worst:.4}"),
    )
}

fn random_graph(rng: &mut ChaCha8Rng) -> SpatialGraph {
    let k = rng.random_range(1..=10);
    let mut edges = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            if rng.random::<f64>() < 0.35 {
                edges.push((a, b));
            }
        }
    }
    SpatialGraph::from_edges(k, &edges).unwrap()
}

fn gmrf_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut density, mut logdet, mut eig_margin) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut cases = 0;
    for case in 0..50 {
        let g = random_graph(&mut rng);
        let k = g.n_regions();
        let gamma = rng.random_range(0.0..1.0 - GAMMA_EPS);
        let tau = [0; 3].map(|_| rng.random_range(0.5..30.0));
        let rho = [0; 3].map(|_| rng.random_range(-0.5..0.5));
        let Ok(cov) = BetweenCov::new(tau, rho) else {
            continue;
        };
        let q_w = gmrf::within_precision(&g, LerouxMix::new(gamma).unwrap());
        let q = gmrf::joint_precision(&q_w, &cov).unwrap();
        let b = gmrf::sample(&q, case).unwrap();

        // Oracle precision rebuilt from the adjacency matrix and the
        // inverted covariance: (Σ⁻¹) ⊗ ((1-γ)I + γ(D-W)).
        let w = g.adjacency_dense();
        let qw_dense = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                1.0 - gamma + gamma * w[i].iter().map(|&v| v as f64).sum::<f64>()
            } else {
                -gamma * w[i][j] as f64
            }
        });
        let sigma = cov.covariance();
        let p_dense = DMatrix::from_fn(3, 3, |i, j| sigma[i][j])
            .try_inverse()
            .unwrap();
        let dense = p_dense.kronecker(&qw_dense);
        let x = DVector::from_column_slice(b.as_vec());
        let l = dense.clone().cholesky().unwrap();
        let ld = 2.0 * l.l().diagonal().map(f64::ln).sum();
        let oracle = -0.5 * (3 * k) as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * ld
            - 0.5 * (x.transpose() * &dense * &x)[(0, 0)];
        density = density.max((gmrf::log_density(&b, &q).unwrap() - oracle).abs());
        cases += 1;

        let p = cov.precision().unwrap();
        let identity = k as f64 * linalg::det3(&p).ln() + 3.0 * q_w.cholesky().unwrap().log_det();
        logdet = logdet.max((q.cholesky().unwrap().log_det() - identity).abs());

        let qd = DMatrix::from_fn(k, k, |i, j| q_w.get(i, j));
        let min = SymmetricEigen::new(qd).eigenvalues.min();
        eig_margin = eig_margin.min(min - (1.0 - gamma));
    }
    outcome(
        cases == 50 && density < 1e-8 && logdet < 1e-8 && eig_margin >= -1e-10,
        format!(
            "{cases} cases, K <= 10: log-density error {density:.1e}, Kronecker log-det error {logdet:.1e}, min eigenvalue - (1-γ) = {eig_margin:.2e}"
        ),
    )
}

fn simulated(g: &SpatialGraph, n: usize, seed: u64) -> Vec<Subject> {
    let cfg = SimConfig {
        params: fixture_params(),
        effects: EffectsSpec::Gmrf {
            gamma: 0.8,
            between: BetweenCov::new([15.0; 3], [0.0; 3]).unwrap(),
        },
        covariates: default_covariates(),
        censoring: Censoring::default(),
        n_subjects: n,
        region_weights: None,
        seed,
    };
    let (mut data, truth) = simulate_cohort(&cfg, g).unwrap();
    apply_centering(&mut data, &truth.covariate_centers);
    data
}

fn gradient_check() -> Outcome {
    let g = SpatialGraph::grid(2, 3).unwrap();
    let data = simulated(&g, 50, 505);
    let c = PriorConfig::default();
    let mut m = ModelState::initial(6, 2);
    m.params = fixture_params();
    m.effects = RandomEffects::from_vec(6, (0..18).map(|i| 0.2 * (i as f64 * 1.3).sin()).collect())
        .unwrap();
    m.mix = LerouxMix::new(0.7).unwrap();
    m.between = BetweenCov::new([12.0, 18.0, 9.0], [0.1, -0.05, 0.2]).unwrap();
    let v = prior::to_unconstrained(&m).unwrap();
    let (_, grad) = mcmc::log_posterior_unconstrained(&v, &data, &g, &c).unwrap();
    let lp = |w: &[f64]| {
        let (s, _) = prior::from_unconstrained(w, 6, 2).unwrap();
        mcmc::log_posterior(&s, &data, &g, &c).unwrap()
    };
    // β₀ and β of each transition, then every region effect; log α excluded.
    let arity = 2;
    let mut coords: Vec<usize> = (0..3)
        .flat_map(|j| (1..2 + arity).map(move |i| j * (2 + arity) + i))
        .collect();
    coords.extend(3 * (2 + arity)..3 * (2 + arity) + 18);
    let mut worst = 0.0f64;
    for &i in &coords {
        let h = 1e-5 * (1.0 + v[i].abs());
        let (mut up, mut down) = (v.clone(), v.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (lp(&up) - lp(&down)) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs() / fd.abs().max(1.0));
    }
    outcome(
        worst < 1e-4,
        format!(
            "{} coordinates on 50 subjects, max relative error {worst:.1e}",
            coords.len()
        ),
    )
}

fn wishart_gibbs() -> Outcome {
    let g = SpatialGraph::grid(3, 3).unwrap();
    let k = g.n_regions();
    let b = RandomEffects::from_vec(
        k,
        (0..3 * k)
            .map(|i| 0.5 * ((i as f64) * 0.83).sin() + 0.1 * (i / k) as f64)
            .collect(),
    )
    .unwrap();
    let q_w = gmrf::within_precision(&g, LerouxMix::new(0.6).unwrap());
    let c = PriorConfig::default();
    let scale = mcmc::conditional_wishart_scale(&b, &q_w, &c).unwrap();
    let q = DMatrix::from_fn(k, k, |i, j| q_w.get(i, j));
    let bm = DMatrix::from_column_slice(k, 3, b.as_vec());
    let r_inv = DMatrix::from_fn(3, 3, |i, j| c.wishart_scale_inverse().unwrap()[i][j]);
    let expected =
        (r_inv + bm.transpose() * q * &bm).try_inverse().unwrap() * (c.wishart_df + k as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let n = 100_000;
    let mut mean = [[0.0; 3]; 3];
    for _ in 0..n {
        let w = mcmc::sample_wishart(c.wishart_df + k as f64, &scale, &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                mean[i][j] += w[i][j] / n as f64;
            }
        }
    }
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max(((mean[i][j] - expected[(i, j)]) / expected[(i, j)]).abs());
        }
    }
    outcome(
        worst < 0.02,
        format!("10^5 draws, max elementwise relative error {worst:.4}"),
    )
}

struct Replicate {
    covered: Vec<bool>,
    gamma_mean: f64,
    max_rhat: f64,
    rho_cover_zero: [bool; 3],
}

fn reported(names: &[String]) -> Vec<String> {
    names
        .iter()
        .filter(|n| !n.starts_with("b_"))
        .cloned()
        .collect()
}

fn fit_replicate(seed: u64, sc: &SamplerConfig) -> Replicate {
    let g = SpatialGraph::grid(5, 5).unwrap();
    let data = simulated(&g, 5000, seed);
    let mut d = mcmc::run(
        &data,
        &g,
        &PriorConfig::default(),
        &SamplerConfig { seed, ..*sc },
    )
    .unwrap();
    d.covariate_names = vec!["woman".into(), "age".into()];
    let diag = mcmc::diagnostics(&d);
    let truth = fixture_params();
    let mut covered = Vec::new();
    for (j, tr) in Transition::ALL.iter().enumerate() {
        let l = tr.label();
        covered.push(
            diag.get(&format!("alpha_{l}"))
                .unwrap()
                .moments
                .covers(truth[j].shape),
        );
        for (i, cov) in ["woman", "age"].iter().enumerate() {
            let r = diag.get(&format!("beta_{l}_{cov}")).unwrap();
            covered.push(r.moments.covers(truth[j].coefficients[i]));
        }
    }
    let max_rhat = reported(&d.parameter_names())
        .iter()
        .filter_map(|n| diag.get(n).and_then(|r| r.rhat))
        .fold(0.0, f64::max);
    let rho =
        ["rho_FR_FD", "rho_FR_RD", "rho_FD_RD"].map(|n| diag.get(n).unwrap().moments.covers(0.0));
    Replicate {
        covered,
        gamma_mean: diag.get("gamma").unwrap().moments.mean,
        max_rhat,
        rho_cover_zero: rho,
    }
}

const COVERAGE_LABELS: [&str; 9] = [
    "alpha_FR",
    "beta_FR_woman",
    "beta_FR_age",
    "alpha_FD",
    "beta_FD_woman",
    "beta_FD_age",
    "alpha_RD",
    "beta_RD_woman",
    "beta_RD_age",
];

fn calibration() -> Outcome {
    let sc = SamplerConfig::default();
    let reps: Vec<Replicate> = (0..20).map(|r| fit_replicate(7000 + r, &sc)).collect();
    let counts: Vec<usize> = (0..COVERAGE_LABELS.len())
        .map(|p| reps.iter().filter(|r| r.covered[p]).count())
        .collect();
    let min_count = *counts.iter().min().unwrap();
    let gamma_mean = reps.iter().map(|r| r.gamma_mean).sum::<f64>() / reps.len() as f64;
    let max_rhat = reps.iter().map(|r| r.max_rhat).fold(0.0, f64::max);
    let cover: Vec<String> = COVERAGE_LABELS
        .iter()
        .zip(&counts)
        .map(|(l, c)| format!("{l} {c}/20"))
        .collect();
    outcome(
        min_count >= 17 && (gamma_mean - 0.8).abs() <= 0.15 && max_rhat < 1.05,
        format!(
            "coverage [{}]; mean posterior γ {gamma_mean:.3} (truth 0.8); max split-R̂ {max_rhat:.3}",
            cover.join(", ")
        ),
    )
}

fn null_correlations() -> Outcome {
    let r = fit_replicate(8080, &SamplerConfig::default());
    outcome(
        r.rho_cover_zero.iter().all(|&c| c),
        format!(
            "95% intervals of rho_FR_FD, rho_FR_RD, rho_FD_RD contain 0: {:?}",
            r.rho_cover_zero
        ),
    )
}

const DETERMINISM_CONFIG: &str = r#"
version = 1
seed = 909
[paths]
cohort = "sim/cohort.csv"
output = "fit"
[graph]
grid = [3, 3]
[[covariates]]
name = "woman"
[[covariates]]
name = "age"
center = true
[sampler]
n_chains = 3
n_warmup = 300
n_samples = 200
[simulate]
n_subjects = 600
[[simulate.covariates]]
name = "woman"
dist = { kind = "bernoulli", p = 0.748 }
[[simulate.covariates]]
name = "age"
dist = { kind = "truncated-normal", mean = 83.4, sd = 6.0, lower = 65.0 }
center = 83.4
[[simulate.transitions]]
transition = "FR"
shape = 0.9
scale = 0.028
coefficients = [0.021, 0.024]
[[simulate.transitions]]
transition = "FD"
shape = 0.8
scale = 0.335
coefficients = [-0.51, 0.07]
[[simulate.transitions]]
transition = "RD"
shape = 0.65
scale = 0.593
coefficients = [-0.634, 0.049]
[simulate.effects]
kind = "gmrf"
gamma = 0.8
tau = [15.0, 15.0, 15.0]
rho = [0.0, 0.0, 0.0]
[outcomes]
draw_stride = 5
[[outcomes.profiles]]
name = "woman-85"
covariates = { woman = 1, age = 85 }
[[outcomes.requests]]
measure = "p12"
times = [1, 2, 3]
[[outcomes.requests]]
measure = "p23"
times = [2, 3]
start = 1.5
onset = 1
"#;

/// Step or file name, with stdout and stderr of a step or the contents of a file.
type Artifact = (String, Vec<u8>, Vec<u8>);

fn run_pipeline(dir: &Path, threads: &str) -> Result<Vec<Artifact>, String> {
    fs::write(dir.join("run.toml"), DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    let steps: [&[&str]; 5] = [
        &["simulate", "--out", "sim"],
        &["fit"],
        &["outcomes"],
        &["diagnose"],
        &["fit", "--out", "seeded", "--seed", "5"],
    ];
    for args in steps {
        let o = Command::new(env!("CARGO_BIN_EXE_illdeath"))
            .current_dir(dir)
            .args(args)
            .args(["--config", "run.toml", "--threads", threads])
            .output()
            .map_err(|e| e.to_string())?;
        if !matches!(o.status.code(), Some(0 | 4)) {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
        }
        outputs.push((args.join(" "), o.stdout, o.stderr));
    }
    for f in [
        "sim/cohort.csv",
        "sim/truth.json",
        "sim/adjacency.txt",
        "fit/draws.csv",
        "fit/summary.json",
        "fit/diagnostics.json",
        "fit/outcomes.csv",
        "seeded/summary.json",
    ] {
        outputs.push((
            f.to_string(),
            fs::read(dir.join(f)).map_err(|e| e.to_string())?,
            vec![],
        ));
    }
    Ok(outputs)
}

fn determinism() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let runs: Result<Vec<_>, String> = dirs
        .iter()
        .zip(["4", "4", "1"])
        .map(|(d, t)| run_pipeline(d.path(), t))
        .collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let mut differing: Vec<String> = Vec::new();
    for other in &runs[1..] {
        for (a, b) in runs[0].iter().zip(other) {
            if a != b && !differing.contains(&a.0) {
                differing.push(a.0.clone());
            }
        }
    }
    let seed_changes = runs[0]
        .iter()
        .find(|o| o.0 == "fit/summary.json")
        .map(|o| &o.1)
        != runs[0]
            .iter()
            .find(|o| o.0 == "seeded/summary.json")
            .map(|o| &o.1);
    outcome(
        differing.is_empty() && seed_changes,
        if differing.is_empty() {
            format!(
                "simulate/fit/outcomes/diagnose rerun 3 times (4, 4, 1 threads): {} artifacts byte-identical; --seed changes the fit: {seed_changes}",
                runs[0].len()
            )
        } else {
            format!("differing outputs: {}", differing.join(", "))
        },
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("probability identities", probability_identities),
        ("Markov closed-form oracle", markov_oracle),
        ("Monte Carlo oracle", monte_carlo_oracle),
        ("GMRF correctness", gmrf_correctness),
        ("gradient check", gradient_check),
        ("Wishart Gibbs", wishart_gibbs),
        ("simulation-based calibration", calibration),
        ("null between-transition correlations", null_correlations),
        ("determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let r = f();
        let secs = start.elapsed().as_secs_f64();
        if !r.pass {
            failed += 1;
        }
        println!(
            "[{}] {id}. {name} ({secs:.1}s): {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
