//! Small dense 3×3 helpers and a sparse symmetric matrix with an envelope
//! (profile) Cholesky factorization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Mat3<T> = [[T; 3]; 3];

pub fn identity3<T: Scalar>() -> Mat3<T> {
    let mut m = [[T::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

pub fn matmul3<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose3<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut t = *a;
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

pub fn add3<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = *a;
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] += b[i][j];
        }
    }
    c
}

pub fn trace3<T: Scalar>(a: &Mat3<T>) -> T {
    a[0][0] + a[1][1] + a[2][2]
}

pub fn det3<T: Scalar>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn inverse3<T: Scalar>(a: &Mat3<T>) -> Result<Mat3<T>> {
    let det = det3(a);
    if det == T::zero() || !det.is_finite() {
        return Err(Error::NotPositiveDefinite("singular 3x3 matrix".into()));
    }
    let mut inv = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
        }
    }
    Ok(inv)
}

/// Lower Cholesky factor of a symmetric positive-definite 3×3 matrix.
pub fn cholesky3<T: Scalar>(a: &Mat3<T>) -> Result<Mat3<T>> {
    let mut l = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<T>();
            if i == j {
                if !(s > T::zero()) {
                    return Err(Error::NotPositiveDefinite(format!("3x3 pivot {i} is {s}")));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

pub fn symmetrize3<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let half = T::c(0.5);
    let mut s = *a;
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = half * (a[i][j] + a[j][i]);
        }
    }
    s
}

/// Eigenvalues of a symmetric 3×3 matrix in ascending order (trigonometric method).
pub fn sym3_eigenvalues<T: Scalar>(a: &Mat3<T>) -> [T; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if p1 == T::zero() {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        return d;
    }
    let three = T::c(3.0);
    let two = T::c(2.0);
    let q = trace3(a) / three;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + two * p1;
    let p = (p2 / T::c(6.0)).sqrt();
    let mut b = *a;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (a[i][j] - if i == j { q } else { T::zero() }) / p;
        }
    }
    let r = (det3(&b) / two).max(-T::one()).min(T::one());
    let phi = r.acos() / three;
    let pi = T::PI();
    let e_max = q + two * p * phi.cos();
    let e_min = q + two * p * (phi + two * pi / three).cos();
    let e_mid = three * q - e_max - e_min;
    [e_min, e_mid, e_max]
}

/// Lower Cholesky factor of a small dense symmetric positive-definite matrix.
pub fn cholesky_dense<T: Scalar>(a: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let n = a.len();
    let mut l = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<T>();
            if i == j {
                if !(s > T::zero()) {
                    return Err(Error::NotPositiveDefinite(format!("pivot {i} is {s}")));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Inverse of a small dense symmetric positive-definite matrix.
pub fn inverse_spd_dense<T: Scalar>(a: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let n = a.len();
    let l = cholesky_dense(a)?;
    let mut inv = vec![vec![T::zero(); n]; n];
    for c in 0..n {
        // L y = e_c, then Lᵀ x = y.
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let rhs = if i == c { T::one() } else { T::zero() };
            y[i] = (rhs - (0..i).map(|k| l[i][k] * y[k]).sum::<T>()) / l[i][i];
        }
        for i in (0..n).rev() {
            let s = y[i] - (i + 1..n).map(|k| l[k][i] * inv[k][c]).sum::<T>();
            inv[i][c] = s / l[i][i];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = T::c(0.5) * (inv[i][j] + inv[j][i]);
            inv[i][j] = v;
            inv[j][i] = v;
        }
    }
    Ok(inv)
}

/// Symmetric sparse matrix; both triangles stored, each row sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix<T> {
    n: usize,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> SparseSymMatrix<T> {
    /// Builds from upper- or lower-triangle triplets; off-diagonal entries are
    /// mirrored and duplicates summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        let mut push = |i: usize, j: usize, v: T| {
            let row = &mut rows[i];
            match row.binary_search_by_key(&j, |e| e.0) {
                Ok(pos) => row[pos].1 += v,
                Err(pos) => row.insert(pos, (j, v)),
            }
        };
        for &(i, j, v) in triplets {
            assert!(i < n && j < n, "triplet ({i}, {j}) outside {n}x{n}");
            push(i, j, v);
            if i != j {
                push(j, i, v);
            }
        }
        for row in &mut rows {
            row.retain(|&(_, v)| v != T::zero());
        }
        Self { n, rows }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            rows: (0..n).map(|i| vec![(i, T::one())]).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, i: usize) -> &[(usize, T)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let row = &self.rows[i];
        match row.binary_search_by_key(&j, |e| e.0) {
            Ok(pos) => row[pos].1,
            Err(_) => T::zero(),
        }
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.n]; self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                d[i][j] = v;
            }
        }
        d
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `x' A x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        assert_eq!(x.len(), self.n);
        self.rows
            .iter()
            .zip(x)
            .map(|(row, &xi)| xi * row.iter().map(|&(j, v)| v * x[j]).sum::<T>())
            .sum()
    }

    /// `a ⊗ self`: block `(i, j)` of the result is `a[i][j] * self`.
    pub fn kron_left(&self, a: &Mat3<T>) -> Self {
        let n = self.n;
        let mut rows = Vec::with_capacity(3 * n);
        for a_row in a.iter() {
            for row in &self.rows {
                let mut out = Vec::with_capacity(3 * row.len());
                for (bj, &aij) in a_row.iter().enumerate() {
                    if aij == T::zero() {
                        continue;
                    }
                    out.extend(row.iter().map(|&(j, v)| (bj * n + j, aij * v)));
                }
                rows.push(out);
            }
        }
        Self { n: 3 * n, rows }
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().all(|&(j, v)| (v - self.get(j, i)).abs() <= tol))
    }

    pub fn cholesky(&self) -> Result<EnvelopeCholesky<T>> {
        EnvelopeCholesky::factor(self)
    }
}

/// Lower-triangular factor `L` with `A = L L'`, stored row-wise over each
/// row's envelope `first[i]..=i`.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky<T> {
    n: usize,
    first: Vec<usize>,
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> EnvelopeCholesky<T> {
    pub fn factor(a: &SparseSymMatrix<T>) -> Result<Self> {
        let n = a.dim();
        let first: Vec<usize> = (0..n)
            .map(|i| a.row(i).first().map_or(i, |&(j, _)| j.min(i)))
            .collect();
        let mut rows: Vec<Vec<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let fi = first[i];
            let mut li = vec![T::zero(); i - fi + 1];
            for &(j, v) in a.row(i) {
                if j <= i {
                    li[j - fi] = v;
                }
            }
            for j in fi..=i {
                let start = fi.max(first[j]);
                let mut s = li[j - fi];
                if j < i {
                    let lj = &rows[j];
                    let fj = first[j];
                    for k in start..j {
                        s -= li[k - fi] * lj[k - fj];
                    }
                    li[j - fi] = s / lj[j - fj];
                } else {
                    for k in start..i {
                        s -= li[k - fi] * li[k - fi];
                    }
                    if !(s > T::zero()) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite(format!(
                            "pivot {i} of {n} is {s}"
                        )));
                    }
                    li[i - fi] = s.sqrt();
                }
            }
            rows.push(li);
        }
        Ok(Self { n, first, rows })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn diag(&self, i: usize) -> T {
        self.rows[i][i - self.first[i]]
    }

    pub fn log_det(&self) -> T {
        T::c(2.0) * (0..self.n).map(|i| self.diag(i).ln()).sum::<T>()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.n);
        let mut y = b.to_vec();
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.rows[i];
            let mut s = y[i];
            for k in fi..i {
                s -= row[k - fi] * y[k];
            }
            y[i] = s / row[i - fi];
        }
        y
    }

    /// Solves `L' x = y`.
    pub fn solve_upper(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.n);
        let mut x = y.to_vec();
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.rows[i];
            x[i] /= row[i - fi];
            let xi = x[i];
            for k in fi..i {
                x[k] -= row[k - fi] * xi;
            }
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Stored envelope size; a measure of fill.
    pub fn envelope_len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_spd(n: usize, seed: u64) -> SparseSymMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, n as f64));
            for j in 0..i {
                if rng.random::<f64>() < 0.3 {
                    trip.push((i, j, rng.random::<f64>() - 0.5));
                }
            }
        }
        SparseSymMatrix::from_triplets(n, &trip)
    }

    #[test]
    fn cholesky_reconstructs_and_solves() {
        let a = random_spd(12, 3);
        let chol = a.cholesky().unwrap();
        let dense = nalgebra::DMatrix::from_fn(12, 12, |i, j| a.get(i, j));
        let na = dense.clone().cholesky().unwrap();
        assert_relative_eq!(chol.log_det(), na.determinant().ln(), epsilon = 1e-10);
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x = chol.solve(&b);
        let ax = a.mul_vec(&x);
        for (u, v) in ax.iter().zip(&b) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_pd_rejected() {
        let a = SparseSymMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0), (0, 1, 2.0)]);
        assert!(matches!(a.cholesky(), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn kronecker_layout() {
        let q = SparseSymMatrix::from_triplets(2, &[(0, 0, 2.0), (1, 1, 3.0), (0, 1, -1.0)]);
        let a = [[1.0, 0.5, 0.0], [0.5, 2.0, 0.0], [0.0, 0.0, 4.0]];
        let k = q.kron_left(&a);
        assert_eq!(k.dim(), 6);
        for bi in 0..3 {
            for bj in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(k.get(bi * 2 + i, bj * 2 + j), a[bi][bj] * q.get(i, j));
                    }
                }
            }
        }
        assert!(k.is_symmetric(0.0));
    }

    #[test]
    fn dense_3x3_helpers() {
        let a = [[4.0, 1.0, 0.5], [1.0, 3.0, -0.2], [0.5, -0.2, 2.0]];
        let inv = inverse3(&a).unwrap();
        let prod = matmul3(&a, &inv);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(prod[i][j], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
        let l = cholesky3(&a).unwrap();
        let llt = matmul3(&l, &transpose3(&l));
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(llt[i][j], a[i][j], epsilon = 1e-12);
            }
        }
        let ev = sym3_eigenvalues(&a);
        let na = nalgebra::Matrix3::from_fn(|i, j| a[i][j]).symmetric_eigen();
        let mut expect: Vec<f64> = na.eigenvalues.iter().copied().collect();
        expect.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in ev.iter().zip(&expect) {
            assert_relative_eq!(x, y, epsilon = 1e-10);
        }
        assert_relative_eq!(ev.iter().product::<f64>(), det3(&a), epsilon = 1e-10);
    }

    #[test]
    fn dense_spd_inverse() {
        let a: Vec<Vec<f64>> = vec![
            vec![4.0, 1.0, 0.5, 0.0],
            vec![1.0, 3.0, 0.2, 0.1],
            vec![0.5, 0.2, 2.0, 0.3],
            vec![0.0, 0.1, 0.3, 1.5],
        ];
        let inv = inverse_spd_dense(&a).unwrap();
        let oracle = nalgebra::DMatrix::from_fn(4, 4, |i, j| a[i][j])
            .try_inverse()
            .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((inv[i][j] - oracle[(i, j)]).abs() < 1e-13);
            }
        }
        assert!(cholesky_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    }
}
