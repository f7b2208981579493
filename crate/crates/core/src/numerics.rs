//! Dense vector arithmetic, small dense matrices, seedable RNG streams,
//! the capped-simplex projection and a matrix-free conjugate-gradient solver.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(entries: Vec<f64>) -> Self {
        Vector(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                found: self.dim(),
            })
        }
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot: dimension mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        l2_norm_sq(self)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.norm_sq())
    }

    /// `self += a * other`. Panics on dimension mismatch.
    pub fn axpy(&mut self, a: f64, other: &Vector) {
        assert_eq!(self.dim(), other.dim(), "axpy: dimension mismatch");
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.0 {
            *s *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Vector {
        Vector(self.0.iter().map(|v| a * v).collect())
    }

    /// `self - other`. Panics on dimension mismatch.
    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "sub: dimension mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`. Panics on dimension mismatch.
    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "add: dimension mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl<const N: usize> From<[f64; N]> for Vector {
    fn from(v: [f64; N]) -> Self {
        Vector(v.to_vec())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Returns `a * v + w`.
pub fn scale_add(a: f64, v: &Vector, w: &Vector) -> Result<Vector> {
    w.check_dim(v.dim())?;
    Ok(Vector(
        v.0.iter().zip(&w.0).map(|(vi, wi)| a * vi + wi).collect(),
    ))
}

pub fn l2_norm_sq(v: &Vector) -> f64 {
    v.0.iter().map(|x| x * x).sum()
}

/// Componentwise mean of a nonempty list of equal-dimension vectors.
///
/// Computed as `v0 + (1/M) Σ (v_i - v0)`, so the mean of identical vectors is
/// bitwise equal to that vector.
pub fn mean_of_vectors<'a, I>(vs: I) -> Result<Vector>
where
    I: IntoIterator<Item = &'a Vector>,
{
    let mut iter = vs.into_iter();
    let first = iter.next().ok_or(Error::Empty("mean_of_vectors"))?;
    let mut acc = Vector::zeros(first.dim());
    let mut count = 1usize;
    for v in iter {
        v.check_dim(first.dim())?;
        for ((a, vi), fi) in acc.0.iter_mut().zip(&v.0).zip(&first.0) {
            *a += vi - fi;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    Ok(Vector(
        first
            .0
            .iter()
            .zip(&acc.0)
            .map(|(f, a)| f + a * inv)
            .collect(),
    ))
}

/// Euclidean projection of `v` onto `{w : w_i >= floor, Σ w_i = total}`.
pub fn simplex_project(v: &Vector, total: f64, floor: f64) -> Result<Vector> {
    let dim = v.dim();
    if dim == 0 {
        return Err(Error::Empty("simplex_project"));
    }
    if !(total > 0.0) || !(floor >= 0.0) || floor * dim as f64 > total * (1.0 + 1e-12) {
        return Err(Error::InfeasibleSimplex { dim, total, floor });
    }
    // Shift to the standard simplex {u >= 0, Σ u = budget}.
    let budget = (total - floor * dim as f64).max(0.0);
    let shifted: Vec<f64> = v.0.iter().map(|x| x - floor).collect();
    let mut sorted = shifted.clone();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        cumsum += s;
        let candidate = (cumsum - budget) / (k + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out: Vec<f64> = shifted
        .iter()
        .map(|u| (u - theta).max(0.0) + floor)
        .collect();
    // Put any rounding residue on the largest coordinate so the sum is exact to ~1 ulp.
    let residue = total - out.iter().sum::<f64>();
    if let Some((imax, _)) = out.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
        out[imax] += residue;
    }
    Ok(Vector(out))
}

/// Row-major dense matrix used by the synthetic problem generators.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        DenseMatrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(v.dim(), self.cols, "matvec: dimension mismatch");
        Vector(
            self.data
                .chunks_exact(self.cols.max(1))
                .take(self.rows)
                .map(|row| row.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// `selfᵀ v`
    pub fn matvec_t(&self, v: &Vector) -> Vector {
        assert_eq!(v.dim(), self.rows, "matvec_t: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        Vector(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul: dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// `a * self + b * other`
    pub fn combine(&self, a: f64, other: &DenseMatrix, b: f64) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    /// Solves `self · x = b` for symmetric positive-definite `self` by Cholesky.
    pub fn cholesky_solve(&self, b: &Vector) -> Result<Vector> {
        let n = self.rows;
        if self.cols != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.cols,
            });
        }
        b.check_dim(n)?;
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::NonFinite("cholesky: matrix not positive definite"));
                    }
                    l[(i, i)] = libm::sqrt(s);
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        Ok(Vector(x))
    }

    /// Largest singular value by power iteration on `selfᵀ self`.
    pub fn spectral_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let mut v = Vector::filled(self.cols, 1.0 / libm::sqrt(self.cols as f64));
        // Deterministic start can be orthogonal to the top singular vector; perturb it.
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x += 1e-3 * (i as f64 + 1.0);
        }
        let mut sigma_sq = 0.0;
        for _ in 0..500 {
            let w = self.matvec_t(&self.matvec(&v));
            let n = w.norm();
            if n == 0.0 {
                return 0.0;
            }
            let next = w.scaled(1.0 / n);
            let converged = (n - sigma_sq).abs() <= 1e-14 * n;
            sigma_sq = n;
            v = next;
            if converged {
                break;
            }
        }
        libm::sqrt(sigma_sq)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Deterministic random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id selecting an independent keystream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A new stream sharing the seed with a different id.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vector(&mut self, dim: usize, scale: f64) -> Vector {
        Vector((0..dim).map(|_| scale * self.normal()).collect())
    }

    pub fn next_u64(&mut self) -> u64 {
        rand::RngCore::next_u64(&mut self.rng)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vector,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `A x = b` for symmetric positive-definite `A` given only `v -> A v`.
///
/// Stops when `‖r‖ <= tol * ‖b‖`; fails with the final residual after
/// `max_iter` iterations.
pub fn conjugate_gradient<F>(
    mut apply: F,
    b: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let dim = b.dim();
    let b_norm = b.norm();
    let mut x = Vector::zeros(dim);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let target = tol * b_norm;
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs_old = r.norm_sq();
    for k in 0..max_iter {
        let ap = apply(&p)?;
        ap.check_dim(dim)?;
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            return Err(Error::SolverNotConverged {
                iterations: k,
                residual: libm::sqrt(rs_old),
                target,
            });
        }
        let alpha = rs_old / curvature;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rs_new = r.norm_sq();
        if libm::sqrt(rs_new) <= target {
            return Ok(CgSolution {
                x,
                iterations: k + 1,
                residual: libm::sqrt(rs_new),
            });
        }
        let beta = rs_new / rs_old;
        for (pi, ri) in p.as_mut_slice().iter_mut().zip(r.iter()) {
            *pi = ri + beta * *pi;
        }
        rs_old = rs_new;
    }
    Err(Error::SolverNotConverged {
        iterations: max_iter,
        residual: libm::sqrt(rs_old),
        target,
    })
}
