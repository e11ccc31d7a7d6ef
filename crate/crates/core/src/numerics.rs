//! Dense row-major matrices, decompositions and seeded random streams.
//!
//! Everything here is deterministic: the same inputs and the same
//! [`RngStream`] always reproduce the same bits.

use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense matrix of `f64` stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Matrix with i.i.d. N(0, std²) entries.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows, "column length mismatch");
        for (i, &x) in v.iter().enumerate() {
            self.data[i * self.cols + j] = x;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Copy of rows `r0..r1`.
    pub fn row_block(&self, r0: usize, r1: usize) -> Matrix {
        Matrix {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// Copy of columns `c0..c1`.
    pub fn col_block(&self, c0: usize, c1: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, c1 - c0);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.data[i * self.cols + c0..i * self.cols + c1]);
        }
        out
    }

    /// Product `self · other`. Panics on mismatched shapes; see [`matmul`]
    /// for the checked version.
    pub fn dot(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "dot: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * n..(k + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn t_dot(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_dot: row mismatch");
        let n = other.cols;
        let mut out = Matrix::zeros(self.cols, n);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ` without forming the transpose.
    pub fn dot_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "dot_t: column mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec: length mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_matvec: length mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { data, ..*self }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { data, ..*self }
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Checked product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.dot(b))
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pairwise (cascade) summation in index order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Mean and sample standard deviation, both summed pairwise.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0)).sqrt())
}

/// Least-squares line `y ≈ slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn ols_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::config("line fit needs at least two paired points"));
    }
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let syy: Vec<f64> = y.iter().map(|b| (b - my) * (b - my)).collect();
    let (sxy, sxx, syy) = (pairwise_sum(&sxy), pairwise_sum(&sxx), pairwise_sum(&syy));
    if sxx == 0.0 {
        return Err(Error::config("line fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// A `(seed, stream)` pair naming one ChaCha8 keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }

    /// Independent sub-stream, used for per-cell and per-trial draws.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(index.wrapping_add(1))),
        }
    }
}

/// Point uniform on the sphere of the given radius in ℝ^d.
pub fn sample_sphere<R: Rng + ?Sized>(d: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm2(&v);
        if n > 1e-300 {
            return v.into_iter().map(|x| radius * x / n).collect();
        }
    }
}

/// `d × L` matrix whose columns are uniform on the radius-`b` sphere.
pub fn sphere_tokens<R: Rng + ?Sized>(d: usize, len: usize, b: f64, rng: &mut R) -> Matrix {
    let mut x = Matrix::zeros(d, len);
    for t in 0..len {
        x.set_col(t, &sample_sphere(d, b, rng));
    }
    x
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Softmax of one logits column; `-inf` entries are masked and map to 0.
pub fn softmax_column(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|x| x.is_nan()) {
        return Err(Error::numerical("NaN logit"));
    }
    let max = z
        .iter()
        .copied()
        .filter(|x| *x != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateColumn);
    }
    if !max.is_finite() {
        return Err(Error::numerical("non-finite logit"));
    }
    let e: Vec<f64> = z
        .iter()
        .map(|&x| {
            if x == f64::NEG_INFINITY {
                0.0
            } else {
                (x - max).exp()
            }
        })
        .collect();
    let s = pairwise_sum(&e);
    Ok(e.into_iter().map(|x| x / s).collect())
}

// ---------------------------------------------------------------------------
// Orthonormal rows
// ---------------------------------------------------------------------------

/// Orthonormalizes the rows of `m` in place by modified Gram-Schmidt,
/// applied twice. Returns false if a row collapsed.
fn orthonormalize_rows(m: &mut Matrix) -> bool {
    for _pass in 0..2 {
        for i in 0..m.rows {
            for j in 0..i {
                let (head, tail) = m.data.split_at_mut(i * m.cols);
                let rj = &head[j * m.cols..(j + 1) * m.cols];
                let ri = &mut tail[..m.cols];
                let c = dot(ri, rj);
                for (a, b) in ri.iter_mut().zip(rj) {
                    *a -= c * b;
                }
            }
            let n = norm2(m.row(i));
            if n < 1e-12 {
                return false;
            }
            for a in m.row_mut(i) {
                *a /= n;
            }
        }
    }
    true
}

/// `d_m × d` matrix with orthonormal rows, from a Gaussian draw.
pub fn random_projection(d: usize, d_m: usize, rng: &RngStream) -> Result<Matrix> {
    if d_m == 0 || d_m > d {
        return Err(Error::shape(format!(
            "projection needs 1 <= d_m <= d, got d_m={d_m}, d={d}"
        )));
    }
    let mut r = rng.rng();
    loop {
        let mut p = Matrix::gaussian(d_m, d, 1.0, &mut r);
        if orthonormalize_rows(&mut p) {
            return Ok(p);
        }
    }
}

// ---------------------------------------------------------------------------
// SVD (one-sided Jacobi)
// ---------------------------------------------------------------------------

const SVD_MAX_SWEEPS: usize = 100;

/// Thin singular value decomposition `A = U diag(S) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m × k` with orthonormal columns, `k = min(m, n)`.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `n × k` with orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// `U_k diag(S_k) V_kᵀ` using the leading `k` triplets.
    pub fn reconstruct_rank(&self, k: usize) -> Matrix {
        let k = k.min(self.s.len());
        let mut us = self.u.col_block(0, k);
        for i in 0..us.rows {
            for (j, s) in self.s[..k].iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.dot_t(&self.v.col_block(0, k))
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.s.len())
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::numerical("svd input is not finite"));
    }
    if a.rows < a.cols {
        let r = svd(&a.transpose())?;
        return Ok(SvdResult {
            u: r.v,
            s: r.s,
            v: r.u,
        });
    }
    let (m, n) = a.shape();
    // Rows of `w` are the working columns of A; rows of `vt` are columns of V.
    let mut w = a.transpose();
    let mut vt = Matrix::identity(n);
    let tol = f64::EPSILON * m as f64;
    // columns below this squared norm are rounding noise of a rank-deficient A
    let negligible = (f64::EPSILON * a.frobenius_norm()).powi(2);
    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let wi = w.row(i);
                    let wj = w.row(j);
                    (dot(wi, wi), dot(wj, wj), dot(wi, wj))
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() || alpha.min(beta) <= negligible {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, i, j, c, s);
                rotate_rows(&mut vt, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "one-sided Jacobi did not converge in {SVD_MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = (0..n).map(|i| norm2(w.row(i))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));
    let smax = sigma[order[0]];
    let floor = smax * f64::EPSILON * m as f64;

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &idx) in order.iter().enumerate() {
        s.push(sigma[idx]);
        v.set_col(k, vt.row(idx));
        if sigma[idx] > floor && sigma[idx] > 0.0 {
            let col: Vec<f64> = w.row(idx).iter().map(|x| x / sigma[idx]).collect();
            u.set_col(k, &col);
        } else {
            missing.push(k);
        }
    }
    complete_columns(&mut u, &missing);
    Ok(SvdResult { u, s, v })
}

fn rotate_rows(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = m.cols;
    let (head, tail) = m.data.split_at_mut(j * cols);
    let ri = &mut head[i * cols..(i + 1) * cols];
    let rj = &mut tail[..cols];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all
/// other columns.
fn complete_columns(u: &mut Matrix, missing: &[usize]) {
    let m = u.rows;
    for &k in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _pass in 0..2 {
                for j in 0..u.cols {
                    if j == k || missing.contains(&j) && j > k {
                        continue;
                    }
                    let cj = u.col(j);
                    let c = dot(&cand, &cj);
                    for (a, b) in cand.iter_mut().zip(&cj) {
                        *a -= c * b;
                    }
                }
            }
            let nrm = norm2(&cand);
            if best.as_ref().map_or(true, |(bn, _)| nrm > *bn + 1e-12) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, cand) = best.expect("nonempty basis");
        let col: Vec<f64> = cand.iter().map(|x| x / nrm).collect();
        u.set_col(k, &col);
    }
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::shape("eigensolve needs a square matrix"));
    }
    if !a.is_finite() {
        return Err(Error::numerical("eigensolve input is not finite"));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let mut converged = n <= 1 || scale == 0.0;
    for _sweep in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::numerical("Jacobi eigensolve did not converge"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[(x, x)].total_cmp(&m[(y, y)]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_col(k, &v.col(i));
    }
    Ok(SymEigen { values, vectors })
}

// ---------------------------------------------------------------------------
// Spectral norm (power iteration)
// ---------------------------------------------------------------------------

const POWER_MAX_ITERS: usize = 10_000;
/// Consecutive iterations with a Rayleigh-quotient change below a few ulps
/// after which the iteration is treated as converged.
const POWER_STALL_ITERS: usize = 3;

/// Top eigenvalue of a symmetric positive semidefinite operator by power
/// iteration.
///
/// Starts from the normalized all-ones vector and stops once the residual
/// `‖Av − ρv‖` falls below `tol·ρ` or the Rayleigh quotient `ρ` stops
/// moving at machine precision. If the result lies below `floor`, a known
/// lower bound for the top eigenvalue, the start is perturbed with draws
/// from stream 0 and the iteration resumes.
pub fn psd_power_iteration<F>(n: usize, apply: F, floor: f64, tol: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(tol > 0.0) {
        return Err(Error::config("power iteration tolerance must be positive"));
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut perturb = RngStream::new(0, 0).rng();
    let mut perturbations = 0;
    let mut prev = f64::NAN;
    let mut stalled = 0;
    for _ in 0..POWER_MAX_ITERS {
        let w = apply(&v);
        let lambda = dot(&v, &w);
        let resid: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let nw = norm2(&w);
        if (lambda - prev).abs() <= 4.0 * f64::EPSILON * lambda.abs() {
            stalled += 1;
        } else {
            stalled = 0;
        }
        prev = lambda;
        if resid <= tol * lambda.abs() || nw == 0.0 || stalled >= POWER_STALL_ITERS {
            if lambda >= floor {
                return Ok(lambda.max(0.0));
            }
            if perturbations >= 8 {
                return Err(Error::numerical("power iteration stagnated"));
            }
            perturbations += 1;
            for x in v.iter_mut() {
                *x += perturb.sample::<f64, _>(StandardNormal) / (n as f64).sqrt();
            }
            let nv = norm2(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            prev = f64::NAN;
            stalled = 0;
            continue;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(Error::numerical(format!(
        "power iteration exceeded {POWER_MAX_ITERS} iterations"
    )))
}

/// Largest singular value by power iteration on `AᵀA`, using the lower
/// bound `‖A‖_F²/min(m,n)` to detect a start orthogonal to the top vector.
pub fn spectral_norm(a: &Matrix, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::config("spectral_norm tolerance must be positive"));
    }
    if !a.is_finite() {
        return Err(Error::numerical("spectral_norm input is not finite"));
    }
    let fro2 = a.frobenius_norm().powi(2);
    if fro2 == 0.0 {
        return Ok(0.0);
    }
    let floor = fro2 / a.rows.min(a.cols) as f64 * (1.0 - 1e-9);
    let lambda = psd_power_iteration(a.cols, |v| a.t_matvec(&a.matvec(v)), floor, tol)?;
    Ok(lambda.sqrt())
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix; the
/// mean diagonal entry serves as the lower bound.
pub fn psd_top_eigen(a: &Matrix, tol: f64) -> Result<f64> {
    let n = a.rows;
    if a.frobenius_norm() == 0.0 {
        return Ok(0.0);
    }
    let floor = a.data().iter().step_by(n + 1).sum::<f64>() / n as f64 * (1.0 - 1e-9);
    psd_power_iteration(n, |v| a.matvec(v), floor, tol)
}

// ---------------------------------------------------------------------------
// Least squares (Householder QR with column pivoting)
// ---------------------------------------------------------------------------

/// Minimizes `‖A x − b‖₂`. Columns whose pivot falls below `rcond` times the
/// leading pivot are treated as dependent and get a zero coefficient.
pub fn lstsq(a: &Matrix, b: &[f64], rcond: f64) -> Result<Vec<f64>> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::shape("lstsq: right-hand side length mismatch"));
    }
    // Work column-major: rows of `q` are columns of A.
    let mut q = a.transpose();
    let mut rhs = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n).map(|j| dot(q.row(j), q.row(j))).collect();
    let steps = m.min(n);
    let mut diag = Vec::with_capacity(steps);
    for k in 0..steps {
        let p = (k..n)
            .max_by(|&x, &y| norms[x].total_cmp(&norms[y]).then(y.cmp(&x)))
            .expect("nonempty");
        if p != k {
            swap_rows(&mut q, k, p);
            norms.swap(k, p);
            perm.swap(k, p);
        }
        let col = &q.row(k)[k..];
        let alpha = norm2(col);
        if alpha == 0.0 {
            diag.push(0.0);
            continue;
        }
        let sign = if col[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut hv: Vec<f64> = col.to_vec();
        hv[0] += sign * alpha;
        let hn2 = dot(&hv, &hv);
        for j in k..n {
            let r = &mut q.row_mut(j)[k..];
            let c = 2.0 * dot(&hv, r) / hn2;
            for (x, h) in r.iter_mut().zip(&hv) {
                *x -= c * h;
            }
        }
        let c = 2.0 * dot(&hv, &rhs[k..]) / hn2;
        for (x, h) in rhs[k..].iter_mut().zip(&hv) {
            *x -= c * h;
        }
        diag.push(q[(k, k)]);
        for j in k + 1..n {
            norms[j] = q.row(j)[k + 1..].iter().map(|x| x * x).sum();
        }
    }
    let lead = diag.first().map_or(0.0, |d: &f64| d.abs());
    let rank = diag
        .iter()
        .take_while(|d| d.abs() > rcond * lead && d.abs() > 0.0)
        .count();
    let mut z = vec![0.0; n];
    for i in (0..rank).rev() {
        let mut s = rhs[i];
        for j in i + 1..rank {
            s -= q[(j, i)] * z[j];
        }
        z[i] = s / q[(i, i)];
    }
    let mut x = vec![0.0; n];
    for (k, &p) in perm.iter().enumerate() {
        x[p] = z[k];
    }
    Ok(x)
}

fn swap_rows(m: &mut Matrix, i: usize, j: usize) {
    if i == j {
        return;
    }
    let cols = m.cols;
    let (lo, hi) = (i.min(j), i.max(j));
    let (head, tail) = m.data.split_at_mut(hi * cols);
    head[lo * cols..(lo + 1) * cols].swap_with_slice(&mut tail[..cols]);
}
