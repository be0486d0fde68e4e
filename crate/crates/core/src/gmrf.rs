//! Multivariate Leroux random effects.
//!
//! The `K × 3` effect matrix `B` is vectorized column-major: all regions of
//! the first transition, then the second, then the third. With between-transition
//! covariance `Σ_b` and within precision `Q_w = (1-γ) I + γ (D - W)`,
//! `vec(B) ~ N(0, Σ_b ⊗ Q_w⁻¹)`, so the joint precision is `Σ_b⁻¹ ⊗ Q_w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::linalg::{self, Mat3, SparseSymMatrix};
use crate::scalar::Scalar;

/// Upper bound margin on the Leroux mixing parameter: `γ ∈ [0, 1 - GAMMA_EPS]`.
pub const GAMMA_EPS: f64 = 1e-6;

/// Index pairs for the three correlations, in reporting order
/// `(FR,FD)`, `(FR,RD)`, `(FD,RD)`.
pub const RHO_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects<T = f64> {
    n_regions: usize,
    values: Vec<T>,
}

impl<T: Scalar> RandomEffects<T> {
    pub fn zeros(n_regions: usize) -> Self {
        Self {
            n_regions,
            values: vec![T::zero(); 3 * n_regions],
        }
    }

    /// From `vec(B)` (column-major, length `3K`).
    pub fn from_vec(n_regions: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != 3 * n_regions {
            return Err(Error::InvalidArgument(format!(
                "random effects need {} values, got {}",
                3 * n_regions,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("random effects".into()));
        }
        Ok(Self { n_regions, values })
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    #[inline]
    pub fn get(&self, region: usize, transition: usize) -> T {
        self.values[transition * self.n_regions + region]
    }

    #[inline]
    pub fn set(&mut self, region: usize, transition: usize, v: T) {
        self.values[transition * self.n_regions + region] = v;
    }

    pub fn row(&self, region: usize) -> [T; 3] {
        [0, 1, 2].map(|j| self.get(region, j))
    }

    pub fn column(&self, transition: usize) -> &[T] {
        &self.values[transition * self.n_regions..(transition + 1) * self.n_regions]
    }

    pub fn column_mut(&mut self, transition: usize) -> &mut [T] {
        &mut self.values[transition * self.n_regions..(transition + 1) * self.n_regions]
    }

    /// `vec(B)`.
    pub fn as_vec(&self) -> &[T] {
        &self.values
    }

    /// `B' Q B` for a `K × K` within precision.
    pub fn cross_product(&self, q_w: &SparseSymMatrix<T>) -> Mat3<T> {
        let qb: Vec<Vec<T>> = (0..3).map(|j| q_w.mul_vec(self.column(j))).collect();
        let mut out = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = self
                    .column(i)
                    .iter()
                    .zip(&qb[j])
                    .map(|(&a, &b)| a * b)
                    .sum();
            }
        }
        linalg::symmetrize3(&out)
    }
}

/// Leroux mixing weight `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LerouxMix<T = f64> {
    gamma: T,
}

impl<T: Scalar> LerouxMix<T> {
    pub fn new(gamma: T) -> Result<Self> {
        if !(gamma >= T::zero() && gamma <= Self::upper()) {
            return Err(Error::InvalidArgument(format!(
                "Leroux mixing must lie in [0, 1 - {GAMMA_EPS}], got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn upper() -> T {
        T::one() - T::c(GAMMA_EPS)
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }
}

/// Between-transition covariance in the precision/correlation form:
/// `Σ_ii = 1/τ_i`, `Σ_ij = ρ_ij / sqrt(τ_i τ_j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetweenCov<T = f64> {
    pub tau: [T; 3],
    /// Correlations ordered as [`RHO_PAIRS`].
    pub rho: [T; 3],
}

impl<T: Scalar> BetweenCov<T> {
    pub fn new(tau: [T; 3], rho: [T; 3]) -> Result<Self> {
        let c = Self { tau, rho };
        c.validate()?;
        Ok(c)
    }

    pub fn identity() -> Self {
        Self {
            tau: [T::one(); 3],
            rho: [T::zero(); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.iter().any(|&t| !(t > T::zero()) || !t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "precisions must be positive, got {:?}",
                self.tau
            )));
        }
        if self.rho.iter().any(|&r| !(r.abs() < T::one())) {
            return Err(Error::InvalidArgument(format!(
                "correlations must lie in (-1, 1), got {:?}",
                self.rho
            )));
        }
        let ev = linalg::sym3_eigenvalues(&self.covariance());
        if !(ev[0] > T::zero()) {
            return Err(Error::NotPositiveDefinite(format!(
                "between-transition covariance has smallest eigenvalue {}",
                ev[0]
            )));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Mat3<T> {
        let mut s = [[T::zero(); 3]; 3];
        for i in 0..3 {
            s[i][i] = self.tau[i].recip();
        }
        for (r, &(i, j)) in self.rho.iter().zip(&RHO_PAIRS) {
            let v = *r / (self.tau[i] * self.tau[j]).sqrt();
            s[i][j] = v;
            s[j][i] = v;
        }
        s
    }

    /// `Σ_b⁻¹`.
    pub fn precision(&self) -> Result<Mat3<T>> {
        self.validate()?;
        Ok(linalg::symmetrize3(&linalg::inverse3(&self.covariance())?))
    }

    pub fn from_covariance(s: &Mat3<T>) -> Result<Self> {
        let tau = [0, 1, 2].map(|i| s[i][i].recip());
        let rho = RHO_PAIRS.map(|(i, j)| s[i][j] / (s[i][i] * s[j][j]).sqrt());
        Self::new(tau, rho)
    }

    pub fn from_precision(p: &Mat3<T>) -> Result<Self> {
        Self::from_covariance(&linalg::symmetrize3(&linalg::inverse3(p)?))
    }
}

/// `Q_w = (1-γ) I + γ (D - W)`.
pub fn within_precision<T: Scalar>(g: &SpatialGraph, mix: LerouxMix<T>) -> SparseSymMatrix<T> {
    let gamma = mix.gamma();
    let mut trip = Vec::with_capacity(g.n_regions() + g.n_edges());
    for k in 0..g.n_regions() {
        let d = T::from_usize(g.degree(k)).unwrap();
        trip.push((k, k, T::one() - gamma + gamma * d));
    }
    if gamma != T::zero() {
        for (a, b) in g.edges() {
            trip.push((a, b, -gamma));
        }
    }
    SparseSymMatrix::from_triplets(g.n_regions(), &trip)
}

/// `Σ_b⁻¹ ⊗ Q_w`, ordered to match `vec(B)`.
pub fn joint_precision<T: Scalar>(
    q_w: &SparseSymMatrix<T>,
    cov: &BetweenCov<T>,
) -> Result<SparseSymMatrix<T>> {
    Ok(q_w.kron_left(&cov.precision()?))
}

fn log_2pi<T: Scalar>() -> T {
    (T::c(2.0) * T::PI()).ln()
}

/// Gaussian log-density of `vec(B)` with zero mean and precision `q`.
pub fn log_density<T: Scalar>(b: &RandomEffects<T>, q: &SparseSymMatrix<T>) -> Result<T> {
    let n = q.dim();
    if b.as_vec().len() != n {
        return Err(Error::InvalidArgument(format!(
            "precision is {n}x{n} but effects have {} entries",
            b.as_vec().len()
        )));
    }
    let chol = q.cholesky()?;
    let half = T::c(0.5);
    Ok(
        -half * T::from_usize(n).unwrap() * log_2pi::<T>() + half * chol.log_det()
            - half * q.quad_form(b.as_vec()),
    )
}

/// Same density as [`log_density`] but using the Kronecker structure:
/// `log det = K log det Σ_b⁻¹ + 3 log det Q_w` and `vec(B)'(P ⊗ Q)vec(B) = tr(P B'QB)`.
pub fn log_density_separable<T: Scalar>(
    b: &RandomEffects<T>,
    q_w: &SparseSymMatrix<T>,
    q_w_log_det: T,
    between_precision: &Mat3<T>,
) -> Result<T> {
    let k = b.n_regions();
    let p_log_det = linalg::det3(between_precision);
    if !(p_log_det > T::zero()) {
        return Err(Error::NotPositiveDefinite(
            "between-transition precision".into(),
        ));
    }
    let cross = b.cross_product(q_w);
    let quad = linalg::trace3(&linalg::matmul3(between_precision, &cross));
    let half = T::c(0.5);
    let kf = T::from_usize(k).unwrap();
    Ok(-half * T::c(3.0) * kf * log_2pi::<T>()
        + half * (kf * p_log_det.ln() + T::c(3.0) * q_w_log_det)
        - half * quad)
}

/// One draw of `vec(B) ~ N(0, q⁻¹)`, deterministic in `seed`.
pub fn sample<T: Scalar>(q: &SparseSymMatrix<T>, seed: u64) -> Result<RandomEffects<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(q, &mut rng)
}

pub fn sample_with_rng<T: Scalar, R: Rng + ?Sized>(
    q: &SparseSymMatrix<T>,
    rng: &mut R,
) -> Result<RandomEffects<T>> {
    let n = q.dim();
    if !n.is_multiple_of(3) {
        return Err(Error::InvalidArgument(format!(
            "joint precision dimension {n} is not a multiple of 3"
        )));
    }
    let chol = q.cholesky()?;
    let z: Vec<T> = (0..n)
        .map(|_| T::c(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    RandomEffects::from_vec(n / 3, chol.solve_upper(&z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn path3() -> SpatialGraph {
        SpatialGraph::load_adjacency("1 2\n2 3", 3).unwrap()
    }

    #[test]
    fn within_precision_limits() {
        let g = SpatialGraph::grid(2, 3).unwrap();
        let q0 = within_precision(&g, LerouxMix::new(0.0).unwrap());
        assert_eq!(q0, SparseSymMatrix::identity(6));
        let q1 = within_precision(&g, LerouxMix::new(1.0 - GAMMA_EPS).unwrap());
        for k in 0..6 {
            for l in 0..6 {
                let icar = if k == l {
                    g.degree(k) as f64
                } else if g.is_adjacent(k, l) {
                    -1.0
                } else {
                    0.0
                };
                let tol = GAMMA_EPS * (1.0 + g.degree(k) as f64) + 1e-15;
                assert!((q1.get(k, l) - icar).abs() <= tol);
            }
        }
    }

    #[test]
    fn within_precision_path_graph() {
        let q = within_precision(&path3(), LerouxMix::new(0.5).unwrap());
        let expect = [[1.0, -0.5, 0.0], [-0.5, 1.5, -0.5], [0.0, -0.5, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(q.get(i, j), expect[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn gamma_domain_enforced() {
        assert!(LerouxMix::new(-0.1).is_err());
        assert!(LerouxMix::new(1.0).is_err());
        assert!(LerouxMix::new(1.0 - GAMMA_EPS).is_ok());
    }

    #[test]
    fn joint_precision_examples() {
        let g = path3();
        let q = within_precision(&g, LerouxMix::new(0.3).unwrap());
        let j = joint_precision(&q, &BetweenCov::identity()).unwrap();
        for blk in 0..3 {
            for i in 0..3 {
                for k in 0..3 {
                    assert_eq!(j.get(blk * 3 + i, blk * 3 + k), q.get(i, k));
                }
            }
        }
        assert_eq!(j.get(0, 3), 0.0);

        let single = SparseSymMatrix::identity(1);
        let cov = BetweenCov::new([2.0, 3.0, 0.5], [0.2, -0.1, 0.3]).unwrap();
        let j1 = joint_precision(&single, &cov).unwrap();
        let p = cov.precision().unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_relative_eq!(j1.get(a, b), p[a][b], epsilon = 1e-14);
            }
        }

        let indep = SpatialGraph::load_adjacency("", 2).unwrap();
        let qi = within_precision(&indep, LerouxMix::new(0.0).unwrap());
        let cov = BetweenCov::new([4.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let j2 = joint_precision(&qi, &cov).unwrap();
        let expect = [4.0, 4.0, 1.0, 1.0, 1.0, 1.0];
        for a in 0..6 {
            for b in 0..6 {
                let e = if a == b { expect[a] } else { 0.0 };
                assert_relative_eq!(j2.get(a, b), e, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn between_cov_rejects_non_pd() {
        // pairwise-valid correlations whose matrix is indefinite
        let err = BetweenCov::new([1.0; 3], [0.9, 0.9, -0.9]).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite(_)));
        assert!(BetweenCov::new([1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(BetweenCov::new([1.0; 3], [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn between_cov_round_trip() {
        let cov = BetweenCov::new([14.257, 19.896, 11.743], [-0.044, -0.076, 0.109]).unwrap();
        let back = BetweenCov::from_precision(&cov.precision().unwrap()).unwrap();
        for i in 0..3 {
            assert_relative_eq!(back.tau[i], cov.tau[i], epsilon = 1e-10);
            assert_relative_eq!(back.rho[i], cov.rho[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn log_density_at_zero() {
        let q = SparseSymMatrix::<f64>::identity(1);
        let j = joint_precision(&q, &BetweenCov::identity()).unwrap();
        let b = RandomEffects::zeros(1);
        let lp = log_density(&b, &j).unwrap();
        assert_relative_eq!(
            lp,
            -1.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );

        let g = SpatialGraph::grid(2, 2).unwrap();
        let q = within_precision(&g, LerouxMix::new(0.6).unwrap());
        let cov = BetweenCov::new([2.0, 5.0, 0.7], [0.3, 0.0, -0.2]).unwrap();
        let j = joint_precision(&q, &cov).unwrap();
        let lp = log_density(&RandomEffects::zeros(4), &j).unwrap();
        let expect =
            -6.0 * (2.0 * std::f64::consts::PI).ln() + 0.5 * j.cholesky().unwrap().log_det();
        assert_relative_eq!(lp, expect, epsilon = 1e-12);
    }

    #[test]
    fn separable_matches_joint() {
        let g = SpatialGraph::grid(3, 3).unwrap();
        let q = within_precision(&g, LerouxMix::new(0.8).unwrap());
        let cov = BetweenCov::new([3.0, 1.5, 0.8], [0.4, -0.3, 0.2]).unwrap();
        let j = joint_precision(&q, &cov).unwrap();
        let b = sample(&j, 11).unwrap();
        let joint = log_density(&b, &j).unwrap();
        let sep = log_density_separable(
            &b,
            &q,
            q.cholesky().unwrap().log_det(),
            &cov.precision().unwrap(),
        )
        .unwrap();
        assert_relative_eq!(joint, sep, epsilon = 1e-10);
    }

    #[test]
    fn sample_deterministic_and_rejects_non_pd() {
        let g = path3();
        let q = within_precision(&g, LerouxMix::new(0.5).unwrap());
        let j = joint_precision(&q, &BetweenCov::identity()).unwrap();
        assert_eq!(sample(&j, 7).unwrap(), sample(&j, 7).unwrap());
        assert_ne!(sample(&j, 7).unwrap(), sample(&j, 8).unwrap());
        let bad = SparseSymMatrix::from_triplets(3, &[(0, 0, 1.0), (1, 1, -1.0), (2, 2, 1.0)]);
        assert!(sample(&bad, 1).is_err());
    }
}
