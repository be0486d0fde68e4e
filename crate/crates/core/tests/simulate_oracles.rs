use illdeath::gmrf::{BetweenCov, RandomEffects};
use illdeath::graph::SpatialGraph;
use illdeath::hazard::{Transition, TransitionParams};
use illdeath::likelihood::{apply_centering, FirstExit};
use illdeath::simulate::{
    default_covariates, simulate_cohort, Censoring, CovariateDist, CovariateSpec, EffectsSpec,
    SimConfig,
};

fn fixture_params() -> [TransitionParams; 3] {
    [
        TransitionParams::from_scale(0.9, 0.028, vec![0.021, 0.024]).unwrap(),
        TransitionParams::from_scale(0.8, 0.335, vec![-0.510, 0.070]).unwrap(),
        TransitionParams::from_scale(0.65, 0.593, vec![-0.634, 0.049]).unwrap(),
    ]
}

#[test]
fn exit_times_pass_kolmogorov_smirnov() {
    // One covariate fixed at its centre, one region with fixed effects: the
    // exit time from the initial state has survival exp(-(λ₁t^α₁ + λ₂t^α₂)).
    let g = SpatialGraph::from_edges(1, &[]).unwrap();
    let params = [
        TransitionParams::from_scale(1.3, 0.4, vec![0.5]).unwrap(),
        TransitionParams::from_scale(0.7, 0.9, vec![-0.2]).unwrap(),
        TransitionParams::from_scale(1.0, 1.0, vec![0.0]).unwrap(),
    ];
    let effects = RandomEffects::from_vec(1, vec![0.2, -0.1, 0.0]).unwrap();
    let cfg = SimConfig {
        params: params.clone(),
        effects: EffectsSpec::Fixed { effects },
        covariates: vec![CovariateSpec {
            name: "x".into(),
            dist: CovariateDist::Bernoulli { p: 1.0 },
            center: 1.0,
        }],
        censoring: Censoring {
            horizon: f64::INFINITY,
            dropout_rate: 0.0,
        },
        n_subjects: 10_000,
        region_weights: None,
        seed: 2024,
    };
    let (data, _) = simulate_cohort(&cfg, &g).unwrap();
    let s1 = |t: f64| {
        let l1 = 0.4 * t.powf(1.3) * 0.2f64.exp();
        let l2 = 0.9 * t.powf(0.7) * (-0.1f64).exp();
        (-(l1 + l2)).exp()
    };
    let mut times: Vec<f64> = data.iter().map(|s| s.t1).collect();
    times.sort_by(f64::total_cmp);
    let n = times.len() as f64;
    let d = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = 1.0 - s1(t);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // Asymptotic critical value at the 1% level.
    let critical = 1.628 / n.sqrt();
    assert!(d < critical, "KS statistic {d} above {critical}");
    assert!(data.iter().all(|s| !matches!(s.exit, FirstExit::Censored)));
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn regional_hazard_ratios_track_field() {
    let g = SpatialGraph::grid(5, 5).unwrap();
    let cfg = SimConfig {
        params: fixture_params(),
        effects: EffectsSpec::Gmrf {
            gamma: 0.8,
            between: BetweenCov::new([15.0, 20.0, 12.0], [0.0; 3]).unwrap(),
        },
        covariates: default_covariates(),
        censoring: Censoring::default(),
        n_subjects: 100_000,
        region_weights: None,
        seed: 99,
    };
    let (mut data, truth) = simulate_cohort(&cfg, &g).unwrap();
    apply_centering(&mut data, &truth.covariate_centers);
    for tr in Transition::ALL {
        let p = &truth.params[tr.index()];
        let mut events = [0.0; 25];
        let mut expected = vec![0.0; 25];
        for s in &data {
            if let Some((t, ev)) = s.exposure(tr) {
                let eta = p.predictor(&s.covariates, 0.0);
                expected[s.region] += p.cum_hazard(eta, t).unwrap();
                if ev {
                    events[s.region] += 1.0;
                }
            }
        }
        let log_hr: Vec<f64> = events
            .iter()
            .zip(&expected)
            .map(|(d, e): (&f64, &f64)| ((d + 0.5) / e).ln())
            .collect();
        let rho = pearson(&ranks(&log_hr), &ranks(truth.effects.column(tr.index())));
        assert!(rho > 0.5, "{}: rank correlation {rho}", tr.label());
    }
}
