//! Adaptive 15-point Gauss–Legendre quadrature with recursive bisection.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const ORDER: usize = 15;

/// Nodes and weights on [-1, 1], computed once by Newton iteration on P₁₅.
fn rule_f64() -> &'static ([f64; ORDER], [f64; ORDER]) {
    static RULE: OnceLock<([f64; ORDER], [f64; ORDER])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = ORDER;
        let mut nodes = [0.0; ORDER];
        let mut weights = [0.0; ORDER];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig<T> {
    pub abs_tol: T,
    pub max_depth: u32,
}

impl<T: Scalar> Default for QuadConfig<T> {
    fn default() -> Self {
        Self {
            abs_tol: T::c(1e-10).max(T::epsilon() * T::c(64.0)),
            max_depth: 30,
        }
    }
}

fn panel<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T) -> T {
    let (nodes, weights) = rule_f64();
    let half = T::c(0.5) * (b - a);
    let mid = T::c(0.5) * (a + b);
    nodes
        .iter()
        .zip(weights)
        .map(|(&x, &w)| T::c(w) * f(mid + half * T::c(x)))
        .sum::<T>()
        * half
}

struct Panel<T> {
    a: T,
    b: T,
    estimate: T,
    error: T,
    depth: u32,
}

/// Estimates `∫ₐᵇ f` by the two halves and uses the gap to the whole-panel
/// rule as the error.
fn refine<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T, whole: T, depth: u32) -> Result<Panel<T>> {
    let m = T::c(0.5) * (a + b);
    let split = panel(f, a, m) + panel(f, m, b);
    if !split.is_finite() {
        return Err(Error::Quadrature(format!(
            "non-finite integrand on [{a}, {b}]"
        )));
    }
    Ok(Panel {
        a,
        b,
        estimate: split,
        error: (split - whole).abs(),
        depth,
    })
}

/// `∫ₐᵇ f` to absolute tolerance `cfg.abs_tol`.
///
/// The panel with the largest error estimate is bisected until the summed
/// error meets the tolerance, so effort concentrates near singular points.
pub fn integrate<T: Scalar, F: Fn(T) -> T>(f: F, a: T, b: T, cfg: &QuadConfig<T>) -> Result<T> {
    if b == a {
        return Ok(T::zero());
    }
    let whole = panel(&f, a, b);
    let mut panels = vec![refine(&f, a, b, whole, 0)?];
    loop {
        let total_error: T = panels.iter().map(|p| p.error).sum();
        if total_error <= cfg.abs_tol {
            return Ok(panels.iter().map(|p| p.estimate).sum());
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| {
                x.1.error
                    .partial_cmp(&y.1.error)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(i, _)| i)
            .expect("at least one panel");
        let p = panels.swap_remove(worst);
        if p.depth >= cfg.max_depth {
            return Err(Error::Quadrature(format!(
                "error {total_error} above tolerance {} on [{}, {}] at depth {}",
                cfg.abs_tol, p.a, p.b, p.depth
            )));
        }
        let m = T::c(0.5) * (p.a + p.b);
        let left = panel(&f, p.a, m);
        let right = panel(&f, m, p.b);
        panels.push(refine(&f, p.a, m, left, p.depth + 1)?);
        panels.push(refine(&f, m, p.b, right, p.depth + 1)?);
    }
}

/// `∫₀ᵗ f` where `f(u)` may behave like `u^(a-1)` near zero. For `a < 1` the
/// first panel `[0, t/8]` is integrated in `v = u^a`, which removes the
/// singularity; the remainder is integrated directly.
pub fn integrate_from_zero<T: Scalar, F: Fn(T) -> T>(
    f: F,
    t: T,
    a: T,
    cfg: &QuadConfig<T>,
) -> Result<T> {
    if t == T::zero() {
        return Ok(T::zero());
    }
    if a >= T::one() {
        return integrate(f, T::zero(), t, cfg);
    }
    let split = t / T::c(8.0);
    let inv_a = a.recip();
    let first = integrate(
        |v: T| {
            if v <= T::zero() {
                return T::zero();
            }
            let u = v.powf(inv_a);
            if u <= T::zero() {
                return T::zero();
            }
            // du/dv = (1/a) v^(1/a - 1) = u / (a v)
            f(u) * u * inv_a / v
        },
        T::zero(),
        split.powf(a),
        &QuadConfig {
            abs_tol: cfg.abs_tol * T::c(0.5),
            max_depth: cfg.max_depth,
        },
    )?;
    let rest = integrate(
        f,
        split,
        t,
        &QuadConfig {
            abs_tol: cfg.abs_tol * T::c(0.5),
            max_depth: cfg.max_depth,
        },
    )?;
    Ok(first + rest)
}
