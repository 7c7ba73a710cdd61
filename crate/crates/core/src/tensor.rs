// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numerical substrate.
//!
//! Storage is row-major `f32`; every reduction accumulates in `f64` with a
//! fixed loop order so results are reproducible bit-for-bit across runs and
//! thread counts. The symmetric eigensolver works entirely in `f64`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Wraps `data` as a `rows x cols` matrix, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Rounds an `f64` buffer into `f32` storage.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| v as f32).collect())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `(rows, cols)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Sets one entry. Non-finite values are rejected.
    pub fn set(&mut self, r: usize, c: usize, value: f32) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("entry ({r},{c})")));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Matrix product `a * b`.
///
/// Each output entry is accumulated in `f64` over the inner index in
/// ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..a.cols {
            let aik = f64::from(a.data[i * a.cols + k]);
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (slot, &bkj) in acc.iter_mut().zip(brow) {
                *slot += aik * f64::from(bkj);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Matrix::new(a.rows, b.cols, out)
}

/// Row-wise `softmax(a / scale)` with per-row max subtraction.
pub fn softmax_rows(a: &Matrix, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    let mut out = Vec::with_capacity(a.data.len());
    let mut buf = vec![0.0f64; a.cols];
    for r in 0..a.rows {
        for (slot, &v) in buf.iter_mut().zip(a.row(r)) {
            *slot = f64::from(v) / scale;
        }
        softmax_in_place(&mut buf);
        out.extend(buf.iter().map(|&v| v as f32));
    }
    Matrix::new(a.rows, a.cols, out)
}

/// Stable softmax over an `f64` slice.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Cosine similarity with `f64` accumulation, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Inner product of two `f32` slices accumulated in `f64`.
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

/// Indices of the `k` largest scores in descending order; ties go to the smaller index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k: k = {k} exceeds length {}",
            scores.len()
        )));
    }
    let order = |&a: &usize, &b: &usize| -> Ordering {
        scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

/// Eigen-decomposition of a symmetric matrix.
///
/// `vectors` is row-major `n x n`; column `r` is the unit eigenvector paired
/// with `eigenvalues[r]`. Eigenvalues are sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub vectors: Vec<f64>,
    pub sweeps: usize,
}

impl EigenResult {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Column `r` of the eigenvector matrix.
    pub fn vector(&self, r: usize) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.vectors[i * n + r]).collect()
    }

    /// `||C V - V diag(L)||_F` for a row-major `n x n` input.
    pub fn residual(&self, c: &[f64]) -> f64 {
        let n = self.dim();
        let mut total = 0.0;
        for i in 0..n {
            for r in 0..n {
                let mut cv = 0.0;
                for k in 0..n {
                    cv += c[i * n + k] * self.vectors[k * n + r];
                }
                let d = cv - self.vectors[i * n + r] * self.eigenvalues[r];
                total += d * d;
            }
        }
        total.sqrt()
    }
}

/// Convergence threshold on the off-diagonal Frobenius mass relative to `||C||_F`.
pub const JACOBI_TOLERANCE: f64 = 1e-10;
/// Hard cap on cyclic sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition of an `f32` matrix.
pub fn symmetric_eig(c: &Matrix) -> Result<EigenResult> {
    if c.rows != c.cols {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            c.rows, c.cols
        )));
    }
    symmetric_eig_f64(c.rows, &c.to_f64())
}

/// Cyclic Jacobi eigensolver on a row-major `n x n` symmetric `f64` matrix.
pub fn symmetric_eig_f64(n: usize, c: &[f64]) -> Result<EigenResult> {
    if c.len() != n * n {
        return Err(Error::Dimension(format!(
            "expected {} values for a {n}x{n} matrix, got {}",
            n * n,
            c.len()
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let max_abs = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (c[i * n + j] - c[j * n + i]).abs() > 1e-6 * max_abs {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let mut a: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            0.5 * (c[i * n + j] + c[j * n + i])
        })
        .collect();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOLERANCE * norm;

    let off_diagonal = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_diagonal(&a);
        if off <= threshold {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off_diagonal: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                if t == 0.0 {
                    continue;
                }
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| diag[y].total_cmp(&diag[x]).then(x.cmp(&y)));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok(EigenResult {
        eigenvalues,
        vectors,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Matrix::from_rows(&[vec![1.5, -2.0], vec![3.0, 4.25]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 8, 8);
        let b = random_matrix(&mut rng, 8, 8);
        let fast = matmul(&a, &b).unwrap();
        for (got, want) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*got) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        for &p in softmax_rows(&z, 1.0).unwrap().data() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-7);
        }
        let sat = Matrix::from_rows(&[vec![100.0, 1.0]]).unwrap();
        let s = softmax_rows(&sat, 1.0).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.get(0, 1), 0.0, epsilon = 1e-7);
        let r = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let s = softmax_rows(&r, 1.0).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(s.get(0, 1), 0.73106, epsilon = 1e-5);
        assert!(softmax_rows(&r, 0.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.70711, epsilon = 1e-5);
        assert!(cosine(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[5.0, 1.0, 9.0], 2).unwrap(), vec![2, 0]);
        assert_eq!(top_k(&[4.0; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(top_k(&[1.0], 2).is_err());
        assert!(top_k(&[1.0], 0).unwrap().is_empty());
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // coarse values force plenty of ties
        let scores: Vec<f64> = (0..1000).map(|_| f64::from(rng.random_range(0..50u8))).collect();
        let mut full: Vec<usize> = (0..scores.len()).collect();
        full.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        for k in [1, 17, 500, 1000] {
            assert_eq!(top_k(&scores, k).unwrap(), full[..k].to_vec());
        }
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let r = symmetric_eig(&Matrix::identity(4)).unwrap();
        assert!(r.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-12));

        let d = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let r = symmetric_eig(&d).unwrap();
        assert_eq!(r.eigenvalues, vec![3.0, 1.0]);
        assert_abs_diff_eq!(r.vector(0)[1].abs(), 1.0);
        assert_abs_diff_eq!(r.vector(1)[0].abs(), 1.0);
    }

    #[test]
    fn eig_rejects_bad_input() {
        assert!(matches!(symmetric_eig(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
        let asym = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(symmetric_eig(&asym), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn eig_zero_matrix() {
        let r = symmetric_eig(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(r.eigenvalues, vec![0.0; 3]);
        assert_eq!(r.sweeps, 0);
    }

    #[test]
    fn eig_random_symmetric_residual_and_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let mut c = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let x = rng.random_range(-1.0..1.0);
                c[i * n + j] = x;
                c[j * n + i] = x;
            }
        }
        let r = symmetric_eig_f64(n, &c).unwrap();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(r.residual(&c) <= 1e-6 * norm);
        let trace: f64 = (0..n).map(|i| c[i * n + i]).sum();
        let total: f64 = r.eigenvalues.iter().sum();
        assert!((total - trace).abs() <= 1e-6 * trace.abs().max(1.0));
        assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #[test]
        fn eig_reconstructs(seed in 0u64..1000, n in 1usize..=24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = vec![0.0f64; n * n];
            for i in 0..n {
                for j in i..n {
                    let x = rng.random_range(-3.0..3.0);
                    c[i * n + j] = x;
                    c[j * n + i] = x;
                }
            }
            let r = symmetric_eig_f64(n, &c).unwrap();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut err = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let mut rec = 0.0;
                    for k in 0..n {
                        rec += r.vectors[i * n + k] * r.eigenvalues[k] * r.vectors[j * n + k];
                    }
                    err += (rec - c[i * n + j]).powi(2);
                }
            }
            prop_assert!(err.sqrt() <= 1e-5 * norm.max(1e-300));
            for a in 0..n {
                for b in 0..n {
                    let d: f64 = (0..n).map(|k| r.vectors[k * n + a] * r.vectors[k * n + b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((d - want).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn matmul_identity_exact(seed in 0u64..500, r in 1usize..10, c in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, r, c);
            prop_assert_eq!(matmul(&Matrix::identity(r), &a).unwrap(), a);
        }

        #[test]
        fn softmax_shift_invariant(row in proptest::collection::vec(-20.0f32..20.0, 1..12), shift in -50.0f32..50.0) {
            let a = Matrix::new(1, row.len(), row.clone()).unwrap();
            let b = Matrix::new(1, row.len(), row.iter().map(|v| v + shift).collect()).unwrap();
            let sa = softmax_rows(&a, 1.0).unwrap();
            let sb = softmax_rows(&b, 1.0).unwrap();
            let total: f64 = sa.data().iter().map(|&v| f64::from(v)).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            for (x, y) in sa.data().iter().zip(sb.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_scale_invariant(
            u in proptest::collection::vec(0.1f32..5.0, 4),
            v in proptest::collection::vec(-5.0f32..5.0, 4),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let base = cosine(&u, &v).unwrap();
            let su: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            let sv: Vec<f32> = v.iter().map(|x| x * beta).collect();
            prop_assert!((cosine(&su, &sv).unwrap() - base).abs() < 1e-6);
        }
    }
}
