//! Dense linear algebra kernels.
//!
//! Row-major matrices, a one-sided Jacobi SVD, rank truncation, and the exact
//! tail identity `‖M − M_k‖_F = sqrt(σ_{k+1}² + … + σ_r²)` that the rank
//! selection and reconstruction layers rely on. Everything here is plain f64
//! and deterministic: identical inputs produce identical bits on every
//! platform.

use crate::error::{Error, Result};

/// Hard cap on Jacobi sweeps before reporting non-convergence.
pub const SVD_MAX_SWEEPS: usize = 60;
/// Relative off-diagonal tolerance for declaring a column pair orthogonal.
pub const SVD_TOL: f64 = 1e-12;
/// Singular values below `RANK_REL_TOL * sigma[0]` count as zero for rank.
pub const RANK_REL_TOL: f64 = 1e-12;

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. Panics if the length is not rows*cols.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix buffer length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Naive matrix product, ikj loop order.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Uniform random matrix in [lo, hi), for tests and verification suites.
    pub fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(lo, hi))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

/// Dense 4-D tensor holding convolution kernels, indexed `[kh][kw][out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    kernel_h: usize,
    kernel_w: usize,
    out_channels: usize,
    in_channels: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(
        kernel_h: usize,
        kernel_w: usize,
        out_channels: usize,
        in_channels: usize,
    ) -> Self {
        Tensor4 {
            kernel_h,
            kernel_w,
            out_channels,
            in_channels,
            data: vec![0.0; kernel_h * kernel_w * out_channels * in_channels],
        }
    }

    pub fn from_fn(
        kernel_h: usize,
        kernel_w: usize,
        out_channels: usize,
        in_channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Tensor4::zeros(kernel_h, kernel_w, out_channels, in_channels);
        for kh in 0..kernel_h {
            for kw in 0..kernel_w {
                for j in 0..out_channels {
                    for i in 0..in_channels {
                        let v = f(kh, kw, j, i);
                        t.set(kh, kw, j, i, v);
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.kernel_h,
            self.kernel_w,
            self.out_channels,
            self.in_channels,
        )
    }

    #[inline]
    fn offset(&self, kh: usize, kw: usize, j: usize, i: usize) -> usize {
        ((kh * self.kernel_w + kw) * self.out_channels + j) * self.in_channels + i
    }

    #[inline]
    pub fn get(&self, kh: usize, kw: usize, j: usize, i: usize) -> f64 {
        self.data[self.offset(kh, kw, j, i)]
    }

    #[inline]
    pub fn set(&mut self, kh: usize, kw: usize, j: usize, i: usize, v: f64) {
        let o = self.offset(kh, kw, j, i);
        self.data[o] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Economy-size singular value decomposition M = U · diag(sigma) · Vᵀ with
/// r = min(rows, cols) retained triplets and sigma sorted descending.
#[derive(Debug, Clone)]
pub struct SVDFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SVDFactors {
    /// Numerical rank: singular values above `RANK_REL_TOL * sigma[0]`.
    pub fn rank(&self) -> usize {
        let s0 = self.sigma.first().copied().unwrap_or(0.0);
        if s0 <= 0.0 {
            return 0;
        }
        self.sigma
            .iter()
            .filter(|&&s| s > RANK_REL_TOL * s0)
            .count()
    }

    pub fn reconstruct(&self) -> Matrix {
        reconstruct_product(&self.u, &self.sigma, &self.v)
    }
}

/// Leading-k slice of an SVD: U_k (J×k), sigma_k, V_k (I×k).
#[derive(Debug, Clone)]
pub struct LowRankFactors {
    pub u_k: Matrix,
    pub sigma_k: Vec<f64>,
    pub v_k: Matrix,
    pub k: usize,
}

impl LowRankFactors {
    pub fn reconstruct(&self) -> Matrix {
        reconstruct_product(&self.u_k, &self.sigma_k, &self.v_k)
    }
}

fn reconstruct_product(u: &Matrix, sigma: &[f64], v: &Matrix) -> Matrix {
    let (rows, cols) = (u.rows(), v.rows());
    let mut out = Matrix::zeros(rows, cols);
    for (t, &s) in sigma.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for r in 0..rows {
            let us = u.get(r, t) * s;
            if us == 0.0 {
                continue;
            }
            for c in 0..cols {
                let val = out.get(r, c) + us * v.get(c, t);
                out.set(r, c, val);
            }
        }
    }
    out
}

/// Frobenius norm: sqrt of the sum of squared entries.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One-sided Jacobi SVD (Hestenes). Deterministic: the sweep order is fixed
/// and the sign of each U column is normalized so its first nonzero entry is
/// nonnegative.
pub fn svd(m: &Matrix) -> Result<SVDFactors> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidInput(
            "svd requires at least one row and one column".into(),
        ));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput(
            "svd input has non-finite entries".into(),
        ));
    }

    let transposed = m.rows() < m.cols();
    let work = if transposed { m.transpose() } else { m.clone() };
    let (tall, wide) = (work.rows(), work.cols());

    // Column-major buffers: column ops dominate the inner loop.
    let mut a = vec![0.0f64; tall * wide];
    for r in 0..tall {
        for c in 0..wide {
            a[c * tall + r] = work.get(r, c);
        }
    }
    let mut v = vec![0.0f64; wide * wide];
    for c in 0..wide {
        v[c * wide + c] = 1.0;
    }

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut max_ratio = 0.0f64;
        for p in 0..wide.saturating_sub(1) {
            for q in p + 1..wide {
                let (mut alpha, mut beta, mut gamma) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..tall {
                    let x = a[p * tall + i];
                    let y = a[q * tall + i];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                if ratio > max_ratio {
                    max_ratio = ratio;
                }
                if ratio <= SVD_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..tall {
                    let x = a[p * tall + i];
                    let y = a[q * tall + i];
                    a[p * tall + i] = c * x - s * y;
                    a[q * tall + i] = s * x + c * y;
                }
                for i in 0..wide {
                    let x = v[p * wide + i];
                    let y = v[q * wide + i];
                    v[p * wide + i] = c * x - s * y;
                    v[q * wide + i] = s * x + c * y;
                }
            }
        }
        if max_ratio <= SVD_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            rows: m.rows(),
            cols: m.cols(),
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    // Column norms are the singular values; sort descending (stable).
    let mut norms: Vec<f64> = (0..wide)
        .map(|c| {
            (0..tall)
                .map(|i| a[c * tall + i] * a[c * tall + i])
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..wide).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let mut u_left = Matrix::zeros(tall, wide);
    let mut v_right = Matrix::zeros(wide, wide);
    let mut sigma = Vec::with_capacity(wide);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..tall {
                u_left.set(i, dst, a[src * tall + i] / s);
            }
        }
        for i in 0..wide {
            v_right.set(i, dst, v[src * wide + i]);
        }
    }
    norms.sort_by(|x, y| y.partial_cmp(x).unwrap());

    // Zero singular values leave empty U columns: fill with an orthonormal
    // complement so the factor invariants hold at any rank.
    for (dst, &s) in sigma.iter().enumerate() {
        if s > 0.0 {
            continue;
        }
        fill_null_column(&mut u_left, dst, &sigma);
    }

    // Sign convention: first nonzero entry of each left-factor column >= 0.
    for c in 0..wide {
        let lead = (0..tall).map(|r| u_left.get(r, c)).find(|&x| x != 0.0);
        if let Some(x) = lead {
            if x < 0.0 {
                for r in 0..tall {
                    let val = -u_left.get(r, c);
                    u_left.set(r, c, val);
                }
                for r in 0..wide {
                    let val = -v_right.get(r, c);
                    v_right.set(r, c, val);
                }
            }
        }
    }

    let factors = if transposed {
        SVDFactors {
            u: v_right,
            sigma,
            v: u_left,
        }
    } else {
        SVDFactors {
            u: u_left,
            sigma,
            v: v_right,
        }
    };
    Ok(factors)
}

/// Replace column `col` of `u` (currently all zeros, sigma[col] == 0) with a
/// unit vector orthogonal to every column carrying a nonzero singular value
/// and to previously filled null columns.
fn fill_null_column(u: &mut Matrix, col: usize, sigma: &[f64]) {
    let tall = u.rows();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for basis in 0..tall {
        let mut cand = vec![0.0f64; tall];
        cand[basis] = 1.0;
        for c in 0..u.cols() {
            if c == col || (sigma[c] == 0.0 && c > col) {
                continue;
            }
            let dot: f64 = (0..tall).map(|r| cand[r] * u.get(r, c)).sum();
            if dot != 0.0 {
                for (r, item) in cand.iter_mut().enumerate() {
                    *item -= dot * u.get(r, c);
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, cand));
        }
        if norm > 0.9 {
            break;
        }
    }
    let (norm, cand) = best.expect("null-space fill found no candidate");
    assert!(norm > 0.0, "degenerate null-space fill");
    for r in 0..tall {
        u.set(r, col, cand[r] / norm);
    }
}

/// Keep the leading k singular triplets. k must not exceed min(rows, cols).
pub fn truncate(f: &SVDFactors, k: usize) -> Result<LowRankFactors> {
    let r = f.sigma.len();
    if k > r {
        return Err(Error::InvalidRank { k, max: r });
    }
    let u_k = Matrix::from_fn(f.u.rows(), k, |row, col| f.u.get(row, col));
    let v_k = Matrix::from_fn(f.v.rows(), k, |row, col| f.v.get(row, col));
    Ok(LowRankFactors {
        u_k,
        sigma_k: f.sigma[..k].to_vec(),
        v_k,
        k,
    })
}

/// Exact Frobenius error of the rank-k truncation: sqrt(σ_{k+1}² + … + σ_r²).
/// The tail is summed smallest-first for accuracy.
pub fn truncation_error(f: &SVDFactors, k: usize) -> Result<f64> {
    let r = f.sigma.len();
    if k > r {
        return Err(Error::InvalidRank { k, max: r });
    }
    let mut acc = 0.0f64;
    for &s in f.sigma[k..].iter().rev() {
        acc += s * s;
    }
    Ok(acc.sqrt())
}

/// Eigenvalues of a symmetric matrix by the cyclic two-sided Jacobi method,
/// sorted descending. Errors if the input is not square-symmetric.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::InvalidInput(
            "eigenvalues need a square matrix".into(),
        ));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite entries".into()));
    }
    let scale = frobenius_norm(m).max(1.0);
    for r in 0..n {
        for c in r + 1..n {
            if (m.get(r, c) - m.get(c, r)).abs() > 1e-8 * scale {
                return Err(Error::InvalidInput("matrix is not symmetric".into()));
            }
        }
    }

    let mut a = m.clone();
    for _ in 0..SVD_MAX_SWEEPS {
        let mut off = 0.0f64;
        for r in 0..n {
            for c in r + 1..n {
                off += a.get(r, c) * a.get(r, c);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // Rotate rows and columns p, q.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Independent Jacobi eigensolver used only as a test oracle for the SVD.
    /// Written against the Gram matrix; shares no code with the shipped
    /// symmetric_eigenvalues.
    fn oracle_gram_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.cols();
        let mut g = vec![vec![0.0f64; n]; n];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for r in 0..m.rows() {
                    acc += m.get(r, a) * m.get(r, b);
                }
                g[a][b] = acc;
            }
        }
        for _ in 0..200 {
            let mut largest = 0.0f64;
            let (mut pi, mut qi) = (0, 1);
            for p in 0..n {
                for q in p + 1..n {
                    if g[p][q].abs() > largest {
                        largest = g[p][q].abs();
                        pi = p;
                        qi = q;
                    }
                }
            }
            if largest < 1e-14 {
                break;
            }
            let (p, q) = (pi, qi);
            let theta = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
            let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for k in 0..n {
                let gkp = g[k][p];
                let gkq = g[k][q];
                g[k][p] = c * gkp - s * gkq;
                g[k][q] = s * gkp + c * gkq;
            }
            for k in 0..n {
                let gpk = g[p][k];
                let gqk = g[q][k];
                g[p][k] = c * gpk - s * gqk;
                g[q][k] = s * gpk + c * gqk;
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| g[i][i]).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eig
    }

    fn assert_orthonormal_columns(m: &Matrix, tol: f64) {
        for a in 0..m.cols() {
            for b in a..m.cols() {
                let dot: f64 = (0..m.rows()).map(|r| m.get(r, a) * m.get(r, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).abs() < tol,
                    "columns {a},{b}: dot {dot} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn svd_identity_2x2() {
        let f = svd(&Matrix::identity(2)).unwrap();
        assert!((f.sigma[0] - 1.0).abs() < 1e-12);
        assert!((f.sigma[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_diagonal_sorted() {
        let m = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]);
        let f = svd(&m).unwrap();
        assert!((f.sigma[0] - 4.0).abs() < 1e-12);
        assert!((f.sigma[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn svd_matches_gram_eigenvalue_oracle() {
        let mut rng = Rng::new(11);
        let m = Matrix::random(6, 4, -1.0, 1.0, &mut rng);
        let f = svd(&m).unwrap();
        let eig = oracle_gram_eigenvalues(&m);
        for (s, e) in f.sigma.iter().zip(&eig) {
            assert!((s * s - e).abs() < 1e-8, "sigma² {} vs eig {}", s * s, e);
        }
    }

    #[test]
    fn svd_factor_invariants_random_shapes() {
        let mut rng = Rng::new(5);
        for &(r, c) in &[(5, 5), (7, 3), (3, 7), (1, 4), (4, 1), (8, 8)] {
            let m = Matrix::random(r, c, -2.0, 2.0, &mut rng);
            let f = svd(&m).unwrap();
            assert_eq!(f.sigma.len(), r.min(c));
            for w in f.sigma.windows(2) {
                assert!(w[0] >= w[1], "sigma not descending: {:?}", f.sigma);
            }
            assert_orthonormal_columns(&f.u, 1e-8);
            assert_orthonormal_columns(&f.v, 1e-8);
            let rec = f.reconstruct();
            let err = frobenius_norm(&m.sub(&rec)) / frobenius_norm(&m).max(1e-300);
            assert!(err < 1e-6, "reconstruction error {err}");
        }
    }

    #[test]
    fn svd_rank_deficient_fills_null_columns() {
        // Rank 1 by construction: repeated column.
        let m = Matrix::from_fn(4, 3, |r, _| (r + 1) as f64);
        let f = svd(&m).unwrap();
        assert_eq!(f.rank(), 1);
        assert_orthonormal_columns(&f.u, 1e-8);
        assert_orthonormal_columns(&f.v, 1e-8);
    }

    #[test]
    fn svd_zero_matrix() {
        let f = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(f.rank(), 0);
        assert!(f.sigma.iter().all(|&s| s == 0.0));
        assert_orthonormal_columns(&f.u, 1e-8);
    }

    #[test]
    fn svd_deterministic_and_sign_convention() {
        let mut rng = Rng::new(9);
        let m = Matrix::random(6, 5, -1.0, 1.0, &mut rng);
        let f1 = svd(&m).unwrap();
        let f2 = svd(&m).unwrap();
        assert_eq!(f1.u.data(), f2.u.data());
        assert_eq!(f1.v.data(), f2.v.data());
        assert_eq!(f1.sigma, f2.sigma);
        for c in 0..f1.u.cols() {
            let lead = (0..f1.u.rows()).map(|r| f1.u.get(r, c)).find(|&x| x != 0.0);
            assert!(
                lead.unwrap_or(0.0) >= 0.0,
                "sign convention broken at column {c}"
            );
        }
    }

    #[test]
    fn svd_row_permutation_covariance() {
        let mut rng = Rng::new(21);
        for &(rows, cols) in &[(6, 4), (4, 6)] {
            let m = Matrix::random(rows, cols, -1.0, 1.0, &mut rng);
            let perm = rng.permutation(rows);
            let pm = Matrix::from_fn(rows, cols, |r, c| m.get(perm[r], c));
            let f = svd(&m).unwrap();
            let pf = svd(&pm).unwrap();
            for (a, b) in f.sigma.iter().zip(&pf.sigma) {
                assert!((a - b).abs() < 1e-9);
            }
            for c in 0..f.u.cols() {
                let expect: Vec<f64> = (0..rows).map(|r| f.u.get(perm[r], c)).collect();
                let got: Vec<f64> = (0..rows).map(|r| pf.u.get(r, c)).collect();
                let same: f64 = expect
                    .iter()
                    .zip(&got)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let flip: f64 = expect
                    .iter()
                    .zip(&got)
                    .map(|(a, b)| (a + b) * (a + b))
                    .sum();
                assert!(
                    same.sqrt() < 1e-8 || flip.sqrt() < 1e-8,
                    "column {c}: neither sign matches ({} / {})",
                    same.sqrt(),
                    flip.sqrt()
                );
            }
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]);
        assert!(svd(&m).is_err());
    }

    #[test]
    fn truncate_full_rank_is_lossless() {
        let mut rng = Rng::new(2);
        let m = Matrix::random(5, 4, -1.0, 1.0, &mut rng);
        let f = svd(&m).unwrap();
        let low = truncate(&f, f.sigma.len()).unwrap();
        let err = frobenius_norm(&m.sub(&low.reconstruct())) / frobenius_norm(&m);
        assert!(err < 1e-6);
    }

    #[test]
    fn truncate_zero_rank_gives_zero_matrix() {
        let mut rng = Rng::new(3);
        let m = Matrix::random(4, 3, -1.0, 1.0, &mut rng);
        let f = svd(&m).unwrap();
        let low = truncate(&f, 0).unwrap();
        assert_eq!(low.k, 0);
        let rec = low.reconstruct();
        assert_eq!(rec.rows(), 4);
        assert_eq!(rec.cols(), 3);
        assert!(rec.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn truncate_keeps_leading_triplet() {
        let m = Matrix::from_vec(2, 2, vec![4.0, 0.0, 0.0, 3.0]);
        let f = svd(&m).unwrap();
        let low = truncate(&f, 1).unwrap();
        let rec = low.reconstruct();
        let expect = Matrix::from_vec(2, 2, vec![4.0, 0.0, 0.0, 0.0]);
        assert!(frobenius_norm(&rec.sub(&expect)) < 1e-10);
    }

    #[test]
    fn truncate_rejects_oversized_rank() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert!(matches!(
            truncate(&f, 4),
            Err(Error::InvalidRank { k: 4, max: 3 })
        ));
    }

    #[test]
    fn truncation_error_identity_cases() {
        let f = svd(&Matrix::identity(2)).unwrap();
        assert!((truncation_error(&f, 1).unwrap() - 1.0).abs() < 1e-12);

        let m = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]);
        let f = svd(&m).unwrap();
        assert!((truncation_error(&f, 1).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_error_matches_direct_residual() {
        let mut rng = Rng::new(17);
        let m = Matrix::random(5, 5, -1.0, 1.0, &mut rng);
        let f = svd(&m).unwrap();
        let low = truncate(&f, 2).unwrap();
        let direct = frobenius_norm(&m.sub(&low.reconstruct()));
        let tail = truncation_error(&f, 2).unwrap();
        assert!(
            (tail - direct).abs() <= 1e-6 * direct.max(1e-12),
            "tail {tail} vs direct {direct}"
        );
    }

    #[test]
    fn truncation_error_monotone_and_zero_at_full_rank() {
        let mut rng = Rng::new(19);
        let m = Matrix::random(6, 4, -1.0, 1.0, &mut rng);
        let f = svd(&m).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=f.sigma.len() {
            let e = truncation_error(&f, k).unwrap();
            assert!(e <= prev + 1e-15);
            prev = e;
        }
        assert!(truncation_error(&f, f.sigma.len()).unwrap() == 0.0);
    }

    #[test]
    fn eckart_young_no_random_competitor_wins() {
        let mut rng = Rng::new(23);
        let m = Matrix::random(8, 6, -1.0, 1.0, &mut rng);
        let f = svd(&m).unwrap();
        for k in 0..=6 {
            let best = truncation_error(&f, k).unwrap();
            for _ in 0..100 {
                let x = Matrix::random(8, k, -2.0, 2.0, &mut rng);
                let y = Matrix::random(6, k, -2.0, 2.0, &mut rng);
                let cand = frobenius_norm(&m.sub(&x.matmul(&y.transpose())));
                assert!(
                    cand >= best - 1e-9,
                    "random rank-{k} pair beat the SVD: {cand} < {best}"
                );
            }
        }
    }

    #[test]
    fn frobenius_norm_cases() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        let m = Matrix::from_vec(1, 2, vec![3.0, 4.0]);
        assert!((frobenius_norm(&m) - 5.0).abs() < 1e-12);

        let mut rng = Rng::new(31);
        let m = Matrix::random(7, 5, -3.0, 3.0, &mut rng);
        // Naive double-loop oracle.
        let mut acc = 0.0;
        for r in 0..7 {
            for c in 0..5 {
                acc += m.get(r, c) * m.get(r, c);
            }
        }
        assert!((frobenius_norm(&m) - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_eigenvalues_known_matrix() {
        let m = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]);
        let eig = symmetric_eigenvalues(&m).unwrap();
        assert!((eig[0] - 3.0).abs() < 1e-10);
        assert!((eig[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn symmetric_eigenvalues_rejects_asymmetric() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 5.0, 0.0, 1.0]);
        assert!(symmetric_eigenvalues(&m).is_err());
    }
}
