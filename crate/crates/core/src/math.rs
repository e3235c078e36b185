//! Dense linear algebra, nonlinearities, softmax, the deterministic RNG
//! and power-iteration spectral norms.
//!
//! Weight matrices follow the transposed convention used throughout the
//! crate: a matrix mapping an `n`-dim activation to an `m`-dim one is stored
//! as `n x m` (rows = fan-in, columns = output units), and the forward map is
//! `y = Wᵀx + b`. This keeps every hot loop row-oriented.

use rand::seq::index;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Standard product `W·x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vector {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `acc += Wᵀx`; `x` has `rows` entries, `acc` has `cols`.
    #[inline]
    pub fn tmul_acc(&self, x: &[f64], acc: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(acc.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            axpy(xr, self.row(r), acc);
        }
    }

    /// `acc += W·y`; `y` has `cols` entries, `acc` has `rows`.
    #[inline]
    pub fn mul_acc(&self, y: &[f64], acc: &mut [f64]) {
        debug_assert_eq!(y.len(), self.cols);
        debug_assert_eq!(acc.len(), self.rows);
        for (r, a) in acc.iter_mut().enumerate() {
            *a += dot(self.row(r), y);
        }
    }

    /// `W += x ⊗ y`.
    #[inline]
    pub fn add_outer(&mut self, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(xr, y, self.row_mut(r));
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of nonzero entries in each column.
    pub fn column_nonzeros(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cols];
        for r in 0..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                if v != 0.0 {
                    counts[c] += 1;
                }
            }
        }
        counts
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `W·x + b` with shape checks.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vector> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::config(format!(
            "affine: W is {}x{}, x has {}, b has {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    let mut out = b.to_vec();
    w.mul_acc(x, &mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Sigmoid,
    Tanh,
    Rectifier,
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Rectifier => x.max(0.0),
            Nonlinearity::Identity => x,
        }
    }

    /// Derivative expressed through the activation value `y = f(x)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Sigmoid => y * (1.0 - y),
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Rectifier => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }

    pub fn apply_in_place(self, v: &mut [f64]) {
        if self != Nonlinearity::Identity {
            v.iter_mut().for_each(|x| *x = self.eval(*x));
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Sigmoid => "sigmoid",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Rectifier => "rectifier",
            Nonlinearity::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" | "logistic" => Some(Nonlinearity::Sigmoid),
            "tanh" => Some(Nonlinearity::Tanh),
            "rectifier" | "relu" => Some(Nonlinearity::Rectifier),
            "identity" | "linear" => Some(Nonlinearity::Identity),
            _ => None,
        }
    }
}

pub fn apply(nl: Nonlinearity, v: &[f64]) -> Vector {
    let mut out = v.to_vec();
    nl.apply_in_place(&mut out);
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax(v: &[f64]) -> Vector {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Normalizes logits in place and returns their log-sum-exp.
pub fn softmax_in_place(v: &mut [f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
    m + sum.ln()
}

pub const POWER_ITERATION_CAP: usize = 1000;
pub const SPECTRAL_TOL: f64 = 1e-6;

/// Largest singular value by power iteration on `MᵀM`.
///
/// The Rayleigh quotient increases monotonically, so the ratio of successive
/// increments estimates the convergence rate; iteration stops once the
/// extrapolated remaining error is below `tol / 10` relative.
pub fn largest_singular_value(m: &Matrix, tol: f64) -> Result<f64> {
    if m.as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::Numeric(format!(
            "largest singular value of a zero {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let mut rng = Rng::new(0x5EED_0F_5EED);
    let mut v: Vector = (0..m.cols()).map(|_| rng.normal() + 1e-3).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut mv = vec![0.0; m.rows()];
    let mut mtmv = vec![0.0; m.cols()];
    let mut prev_sigma = 0.0;
    let mut prev_delta = f64::INFINITY;
    for iter in 0..POWER_ITERATION_CAP {
        mv.iter_mut().for_each(|x| *x = 0.0);
        m.mul_acc(&v, &mut mv);
        mtmv.iter_mut().for_each(|x| *x = 0.0);
        m.tmul_acc(&mv, &mut mtmv);
        let sigma = dot(&mv, &mv).sqrt();
        let u_norm = norm(&mtmv);
        if u_norm == 0.0 {
            // start vector fell into the null space; perturb and retry
            v.iter_mut().for_each(|x| *x = rng.normal());
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            continue;
        }
        for (vi, ui) in v.iter_mut().zip(&mtmv) {
            *vi = ui / u_norm;
        }
        let delta = (sigma - prev_sigma).abs();
        if iter > 0 {
            if delta <= 1e-15 * sigma {
                return Ok(sigma);
            }
            let rate = delta / prev_delta;
            if rate < 1.0 {
                let remaining = delta * rate / (1.0 - rate);
                if remaining <= 0.1 * tol * sigma && delta <= tol * sigma {
                    return Ok(sigma);
                }
            }
        }
        prev_delta = delta;
        prev_sigma = sigma;
    }
    Err(Error::Numeric(format!(
        "power iteration on a {}x{} matrix did not converge in {} iterations",
        m.rows(),
        m.cols(),
        POWER_ITERATION_CAP
    )))
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    if std > 0.0 {
        m.data.iter_mut().for_each(|v| *v = std * rng.normal());
    }
    m
}

/// Counter-based deterministic generator (ChaCha8).
///
/// `with_stream` selects an independent stream for the same seed, so
/// per-update or per-parameter draws never depend on consumption order
/// elsewhere.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `k` distinct indices from `0..n`, uniformly without replacement.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, k.min(n)).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_and_zero() {
        let x = affine(&Matrix::identity(2), &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        let y = affine(&Matrix::zeros(2, 2), &[5.0, -3.0], &[0.5, -0.5]).unwrap();
        assert_eq!(y, vec![0.5, -0.5]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let err = affine(&Matrix::zeros(2, 3), &[1.0, 2.0], &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("2x3"), "{err}");
    }

    #[test]
    fn nonlinearity_examples() {
        assert_eq!(apply(Nonlinearity::Sigmoid, &[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(apply(Nonlinearity::Tanh, &[0.0]), vec![0.0]);
        assert_eq!(apply(Nonlinearity::Rectifier, &[-3.0, 2.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn sigmoid_derivative_matches_central_differences() {
        let mut rng = Rng::new(11);
        let h = 1e-5;
        for _ in 0..20 {
            let x = 4.0 * (rng.uniform() - 0.5);
            let fd = (sigmoid(x + h) - sigmoid(x - h)) / (2.0 * h);
            let an = Nonlinearity::Sigmoid.derivative_from_output(sigmoid(x));
            assert!(((fd - an) / an).abs() < 1e-7, "x={x} fd={fd} an={an}");
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        for c in [-7.5, 0.0, 3.25, 1e3] {
            let p = softmax(&[c; 4]);
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        let p = softmax(&[1.0, 2.0, 3.0]);
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(0.0), std::f64::consts::LN_2);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn singular_value_simple_cases() {
        let s = largest_singular_value(&Matrix::identity(3), SPECTRAL_TOL).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let s = largest_singular_value(&Matrix::from_diag(&[3.0, 1.0]), SPECTRAL_TOL).unwrap();
        assert!((s - 3.0).abs() < 3e-6);
        assert!(largest_singular_value(&Matrix::zeros(2, 2), SPECTRAL_TOL).is_err());
    }

    #[test]
    fn gaussian_matrix_degenerate_and_deterministic() {
        let mut rng = Rng::new(1);
        assert_eq!(gaussian_matrix(&mut rng, 2, 2, 0.0), Matrix::zeros(2, 2));
        let a = gaussian_matrix(&mut Rng::new(42), 5, 7, 0.3);
        let b = gaussian_matrix(&mut Rng::new(42), 5, 7, 0.3);
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_matrix_sample_std() {
        let m = gaussian_matrix(&mut Rng::new(3), 1000, 1000, 0.1);
        let n = m.len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        assert!((0.098..=0.102).contains(&sd), "{sd}");
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: Vec<u64> = {
            let mut r = Rng::with_stream(9, 1);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::with_stream(9, 2);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let a2: Vec<u64> = {
            let mut r = Rng::with_stream(9, 1);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn rng_reproduces_first_ten_thousand_draws() {
        let mut a = Rng::new(2024);
        let mut b = Rng::new(2024);
        for _ in 0..10_000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn sample_indices_clamps_and_is_distinct() {
        let mut rng = Rng::new(5);
        let mut idx = rng.sample_indices(10, 20);
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        let mut idx = rng.sample_indices(600, 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
    }
}
