use illdeath::gmrf::{BetweenCov, LerouxMix, RandomEffects, GAMMA_EPS};
use illdeath::hazard::TransitionParams;
use illdeath::likelihood::ModelState;
use illdeath::linalg;
use illdeath::mcmc::sample_wishart;
use illdeath::prior::{self, weibull_kld, ShapePrior};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

fn state() -> ModelState {
    let mut m = ModelState::initial(2, 1);
    m.params[0] = TransitionParams::new(0.9, -3.5, vec![0.02]).unwrap();
    m.params[1] = TransitionParams::new(0.8, -1.1, vec![-0.5]).unwrap();
    m.params[2] = TransitionParams::new(0.65, -0.5, vec![0.05]).unwrap();
    m.effects = RandomEffects::from_vec(2, vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.2]).unwrap();
    m.mix = LerouxMix::new(0.7).unwrap();
    m.between = BetweenCov::new([4.0, 9.0, 2.5], [0.3, -0.2, 0.45]).unwrap();
    m
}

/// Image of the unconstrained vector in the coordinates the prior density is
/// written in: `(α, β₀, β)` per transition, `vec(B)`, `γ`, and the upper
/// triangle of `Σ_b⁻¹`.
fn image(v: &[f64]) -> Vec<f64> {
    let (m, _) = prior::from_unconstrained(v, 2, 1).unwrap();
    let mut out = Vec::new();
    for p in &m.params {
        out.push(p.shape);
        out.push(p.intercept);
        out.extend_from_slice(&p.coefficients);
    }
    out.extend_from_slice(m.effects.as_vec());
    out.push(m.mix.gamma());
    let w = m.between.precision().unwrap();
    for (i, row) in w.iter().enumerate() {
        out.extend_from_slice(&row[i..]);
    }
    out
}

#[test]
fn log_jacobian_matches_numerical_determinant() {
    let v = prior::to_unconstrained(&state()).unwrap();
    let (_, log_jac) = prior::from_unconstrained(&v, 2, 1).unwrap();
    let n = v.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for c in 0..n {
        let h = 1e-6;
        let mut up = v.clone();
        let mut down = v.clone();
        up[c] += h;
        down[c] -= h;
        let (fu, fd) = (image(&up), image(&down));
        for r in 0..n {
            jac[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    let det = jac.determinant();
    assert!(
        (det.abs().ln() - log_jac).abs() < 1e-6,
        "{} vs {log_jac}",
        det.abs().ln()
    );
}

#[test]
fn wishart_density_integrates_to_one() {
    // Importance sampling with a Wishart(5, 2I) proposal drawn by an
    // independent route (sums of outer products of Gaussian vectors).
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let q_df = 5usize;
    let q_scale = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
    let r = [[1.0, 0.2, 0.0], [0.2, 1.5, -0.3], [0.0, -0.3, 0.8]];
    let normal = rand_distr::StandardNormal;
    let mut acc = 0.0;
    for _ in 0..n {
        let mut w = [[0.0; 3]; 3];
        for _ in 0..q_df {
            let z: [f64; 3] = std::array::from_fn(|_| {
                let s: f64 = normal.sample(&mut rng);
                s * 2f64.sqrt()
            });
            for i in 0..3 {
                for j in 0..3 {
                    w[i][j] += z[i] * z[j];
                }
            }
        }
        let target = prior::wishart_log_density(&w, 7.0, &r).unwrap();
        let proposal = prior::wishart_log_density(&w, q_df as f64, &q_scale).unwrap();
        acc += (target - proposal).exp();
    }
    let integral = acc / n as f64;
    assert!((integral - 1.0).abs() < 0.05, "integral {integral}");
}

#[test]
fn wishart_sampler_and_density_agree_on_mean_log_det() {
    // E[log det W] = ψ₃(ν/2) + 3 log 2 + log det R under Wishart(ν, R).
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = [[1.0, 0.2, 0.0], [0.2, 1.5, -0.3], [0.0, -0.3, 0.8]];
    let n = 50_000;
    let mean: f64 = (0..n)
        .map(|_| linalg::det3(&sample_wishart(7.0, &r, &mut rng).unwrap()).ln())
        .sum::<f64>()
        / n as f64;
    let psi3: f64 = (0..3)
        .map(|j| statrs::function::gamma::digamma(3.5 - 0.5 * j as f64))
        .sum();
    let expected = psi3 + 3.0 * 2f64.ln() + linalg::det3(&r).ln();
    assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
}

/// `KLD(α) = ∫ f_α log(f_α / f_1)` by the substitutions `x = y^(1/α)`,
/// `y = e^s`, which leave a smooth integrand.
fn kld_by_quadrature(alpha: f64) -> f64 {
    let n = 200_000;
    let (lo, hi) = (-40.0, 60f64.ln());
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let s = lo + (i as f64 + 0.5) * h;
        let y = s.exp();
        let x = (s / alpha).exp();
        // f_α(x) dx = e^{-y} dy; log(f_α/f_1) = log α + (α-1) log x - y + x.
        acc += (-y).exp() * (alpha.ln() + (alpha - 1.0) * s / alpha - y + x) * y * h;
    }
    acc
}

#[test]
fn weibull_kld_matches_quadrature() {
    for alpha in [0.6, 0.8, 0.95, 1.3, 2.0] {
        let q = kld_by_quadrature(alpha);
        assert!(
            (weibull_kld(alpha) - q).abs() < 1e-5,
            "α = {alpha}: {} vs {q}",
            weibull_kld(alpha)
        );
    }
}

#[test]
fn pc_prior_is_a_density() {
    let p = ShapePrior::PcNumeric { rate: 5.0 };
    let n = 400_000;
    let (lo, hi) = (1e-3, 6.0);
    let h = (hi - lo) / n as f64;
    let mass: f64 = (0..n)
        .map(|i| p.log_density(lo + (i as f64 + 0.5) * h).exp() * h)
        .sum();
    assert!((mass - 1.0).abs() < 0.01, "mass {mass}");
    let near = [0.9999, 0.99995, 1.00005, 1.0001].map(|a| p.log_density(a));
    assert!((near[1] - near[2]).abs() < 1e-3);
    assert!((near[0] - near[3]).abs() < 1e-3);
}

#[test]
fn logit_jacobian_histogram() {
    // γ uniform on [0, 1-ε] maps to u with density exp(log_jac) through
    // u = logit(γ / (1-ε)); compare histograms of u with that density.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = Uniform::new(0.0, 1.0 - GAMMA_EPS).unwrap();
    let n = 200_000;
    let edges: Vec<f64> = (0..=12).map(|i| -6.0 + i as f64).collect();
    let mut counts = [0usize; 12];
    for _ in 0..n {
        let g: f64 = dist.sample(&mut rng) / (1.0 - GAMMA_EPS);
        let u = (g / (1.0 - g)).ln();
        if let Some(b) = edges.windows(2).position(|w| w[0] <= u && u < w[1]) {
            counts[b] += 1;
        }
    }
    let base = prior::to_unconstrained(&state()).unwrap();
    let idx = 3 * 3 + 6;
    let density = |u: f64| {
        let mut v = base.clone();
        v[idx] = u;
        let (_, lj) = prior::from_unconstrained(&v, 2, 1).unwrap();
        let mut w = base.clone();
        w[idx] = 0.0;
        let (_, lj0) = prior::from_unconstrained(&w, 2, 1).unwrap();
        // Flat density 1/(1-ε) times the γ Jacobian, which is (1-ε)/4 at u = 0.
        (lj - lj0).exp() / 4.0
    };
    for (b, w) in edges.windows(2).enumerate() {
        let m = 2000;
        let h = (w[1] - w[0]) / m as f64;
        let p: f64 = (0..m)
            .map(|i| density(w[0] + (i as f64 + 0.5) * h) * h)
            .sum();
        let observed = counts[b] as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (observed - p).abs() < 4.0 * se + 1e-4,
            "bin {b}: {observed} vs {p}"
        );
    }
}
