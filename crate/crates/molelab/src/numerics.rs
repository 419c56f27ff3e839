//! Dense row-major matrices, vectors, softmax, a central-difference gradient
//! oracle, and the seeded ChaCha8 generator that owns determinism for the
//! whole crate.
//!
//! Problem sizes are desk scale, so the kernels are plain triple loops in
//! `f64`. No BLAS, no autodiff: gradients elsewhere in the crate are
//! hand-derived and checked against [`finite_diff_grad`].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix, row-major storage, all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entries must be finite".into()));
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// 2x2, 3x3, ... identity.
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Standard matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let a_rows = self.data.chunks(self.cols);
        let out_rows = out.data.chunks_mut(other.cols);
        for (a_row, out_row) in a_rows.zip(out_rows) {
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self * x`.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if self.cols != x.len() {
            return Err(Error::Shape(format!(
                "matvec: {}x{} * len {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let out = self
            .data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum())
            .collect();
        Ok(Vector::from_raw(out))
    }

    /// Transposed matrix-vector product `selfᵀ * x`.
    pub fn tr_matvec(&self, x: &Vector) -> Result<Vector> {
        if self.rows != x.len() {
            return Err(Error::Shape(format!(
                "tr_matvec: ({}x{})ᵀ * len {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x.data()[r];
            if xr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xr;
            }
        }
        Ok(Vector::from_raw(out))
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &Vector, v: &Vector) -> Matrix {
        Matrix::from_fn(u.len(), v.len(), |r, c| u.data()[r] * v.data()[c])
    }

    /// `self += s * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add_scaled: {}x{} += {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Dense vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Build a vector, validating finiteness.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("vector entries must be finite".into()));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "dot: len {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Vector, s: f64) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "add_scaled: len {} += len {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Numerically safe softmax: subtracts the max before exponentiating.
///
/// Output entries are positive and sum to 1 within 1e-12.
pub fn softmax(z: &[f64]) -> Result<Vector> {
    if z.is_empty() {
        return Err(Error::Shape("softmax of empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input must be finite".into()));
    }
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Vector::from_raw(
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}

/// Central-difference gradient `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` per coordinate.
///
/// This is the oracle every hand-derived gradient in the crate is checked
/// against; it must stay independent of those implementations.
pub fn finite_diff_grad(f: impl Fn(&Vector) -> f64, x: &Vector, eps: f64) -> Result<Vector> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Domain(format!("finite_diff_grad: eps = {eps}")));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&probe);
        probe.data[i] = orig - eps;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_grad: f non-finite at coordinate {i}"
            )));
        }
        *slot = (fp - fm) / (2.0 * eps);
    }
    Ok(Vector::from_raw(grad))
}

/// Seeded deterministic generator (ChaCha8). Identical seeds reproduce
/// bit-identical draw sequences on every platform.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// The seed this state was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 random mantissa bits.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Index in `[0, n)`, for shuffles.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.rng.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; the second draw of each pair is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log stays finite.
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }

    pub fn normal_vector(&mut self, n: usize, mean: f64, std: f64) -> Vector {
        Vector::from_fn(n, |_| self.normal(mean, std))
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
