//! Dense vectors and matrices, the handful of kernels the memory layer and
//! the toy encoder need, and the seeded random source shared by every module.
//!
//! Storage is row-major with explicit dimensions and no broadcasting. All
//! training and verification paths run in `f64`.
//!
//! Every matrix-vector product goes through [`Matrix::matvec_into`] or
//! [`Matrix::matvec_t_acc`], which report their multiply-accumulate volume
//! to a per-thread counter (see [`macs`]). The counter is how the compute
//! sparsity of the memory layer is asserted rather than assumed.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense vector of fixed dimension.
///
/// The dimension is set at construction. Elements can be mutated through
/// [`DerefMut`] but the length cannot change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
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

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
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

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A dense row-major matrix.
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Gaussian entries with the given standard deviation.
    pub fn gaussian(rows: usize, cols: usize, stddev: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * stddev).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    /// `m · v`, checked.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::shape("matvec", self.cols, v.len()));
        }
        let mut out = Vector::zeros(self.rows);
        self.matvec_into(v, &mut out);
        Ok(out)
    }

    /// `out = m · v`. Dimensions are the caller's responsibility.
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, v);
        }
        macs::add((self.rows * self.cols) as u64);
    }

    /// `out += mᵀ · coeffs`, i.e. adds `coeffs[i] · row_i` for every row.
    pub fn matvec_t_acc(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&c, row) in coeffs.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            axpy(c, row, out);
        }
        macs::add((self.rows * self.cols) as u64);
    }

    /// Rank-one update `m += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let cols = self.cols;
        for (i, &ui) in u.iter().enumerate() {
            let a = alpha * ui;
            if a != 0.0 {
                axpy(a, v, &mut self.data[i * cols..(i + 1) * cols]);
            }
        }
    }
}

/// Inner product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax: the maximum logit is subtracted before
/// exponentiation.
pub fn softmax_stable(logits: &[f64]) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::shape("softmax_stable", "dim >= 1", 0));
    }
    let mut out = Vector::from(logits);
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place variant of [`softmax_stable`]. A no-op on empty input.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Reverse-mode step of a softmax: given the forward output `p` and the
/// upstream gradient `dp`, returns `dz[i] = p[i] (dp[i] - Σ_j p[j] dp[j])`.
pub fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let inner = dot(p, dp);
    for ((z, &pi), &dpi) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (dpi - inner);
    }
}

/// Indices of the `k` largest entries of `p`, returned in ascending index
/// order. Ties prefer the lower index.
pub fn topk_indices(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::Parameter(format!(
            "top-k requires 1 <= k <= {}, got k = {k}",
            p.len()
        )));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `n` independent draws from `N(0, stddev²)`.
pub fn sample_gaussian(rng: &mut Rng, n: usize, stddev: f64) -> Result<Vector> {
    if n == 0 {
        return Err(Error::Parameter("sample_gaussian needs n >= 1".into()));
    }
    if !(stddev >= 0.0) || !stddev.is_finite() {
        return Err(Error::Parameter(format!(
            "stddev must be finite and non-negative, got {stddev}"
        )));
    }
    Ok((0..n).map(|_| rng.normal() * stddev).collect::<Vec<_>>().into())
}

/// Seeded random source.
///
/// Backed by ChaCha8, whose output stream is fixed by the seed and does not
/// depend on platform or word size. Normal draws use the ziggurat sampler
/// from `rand_distr`.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent generator for a sub-task, e.g. one per worker.
    pub fn fork(&mut self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::from_rng(&mut self.inner);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }

    /// Uniform in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        rand::seq::SliceRandom::shuffle(items, &mut self.inner);
    }
}

/// Per-thread multiply-accumulate counter.
///
/// Matrix kernels add `rows × cols` per call. Elementwise work (softmax,
/// residual adds, normalization) is not counted.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn add(n: u64) {
        COUNT.with(|c| c.set(c.get() + n));
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        COUNT.with(|c| c.get())
    }

    /// Runs `f` and returns its result together with the MACs it performed
    /// on this thread.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = get();
        let out = f();
        (out, get() - before)
    }
}
