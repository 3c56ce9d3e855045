//! Dense vector/matrix primitives and numerically stable transforms.
//!
//! Everything here is 64-bit and row-major. Problem sizes are small
//! (N ≤ 64 items per impression), so there is no sparse path and no BLAS;
//! plain loops keep summation order fixed, which the reproducibility
//! guarantees elsewhere rely on.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense 64-bit vector. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("vector must have len >= 1"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "vector entry {i} is not finite: {}",
                data[i]
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            data: (0..len).map(f).collect(),
        }
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

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector::from_fn(self.len(), |i| self[i] * other[i])
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector::from_fn(self.len(), |i| self[i] * c)
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector::from_fn(self.len(), |i| self[i] + other[i])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest |a_i - b_i|.
    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major 64-bit matrix. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("matrix must have rows >= 1 and cols >= 1"));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "matrix entry ({}, {}) is not finite",
                i / cols,
                i % cols
            )));
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
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Column sums as a vector of length `cols`.
    pub fn col_sums(&self) -> Vector {
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let row = self.row(i);
            for j in 0..self.cols {
                out[j] += row[j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax at the given temperature.
///
/// Each row of the output sums to 1 and every entry lies in (0, 1).
/// Inputs are divided by the temperature first, then stabilized by
/// max subtraction, so `row_softmax(x, t)` and `row_softmax(x/t, 1)`
/// run the identical arithmetic.
pub fn row_softmax(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        softmax_into(&scaled, out.row_mut(i));
    }
    Ok(out)
}

/// In-place stabilized softmax of one row.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits.iter()) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// ln of `x` clamped into [epsilon, 1 - epsilon].
///
/// Total on all of R; protects cross-entropy terms when a survival
/// probability saturates at 0 or 1. With the default epsilon = 1e-7 the
/// magnitude of any log term stays below ~16.2.
pub fn clamped_log(x: f64, epsilon: f64) -> f64 {
    debug_assert!(epsilon > 0.0 && epsilon < 0.5);
    x.clamp(epsilon, 1.0 - epsilon).ln()
}

/// Derivative of [`clamped_log`] with respect to `x`: 1/x strictly inside
/// the clamp window, 0 outside (the clamped branches are constant).
pub fn clamped_log_grad(x: f64, epsilon: f64) -> f64 {
    if x > epsilon && x < 1.0 - epsilon {
        1.0 / x
    } else {
        0.0
    }
}

/// Default clamp for all cross-entropy style losses.
pub const DEFAULT_EPSILON: f64 = 1e-7;

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Standard logistic 1 / (1 + e^-x).
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compares an analytic gradient against central finite differences.
///
/// Returns the max over coordinates of
/// `|central_difference_i - analytic_i| / max(1, |analytic_i|)` where the
/// central difference is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The analytic gradient is evaluated once at `point`; `f` is evaluated
/// 2·len times. Errors if any evaluation of `f` is non-finite, naming the
/// offending coordinate.
pub fn grad_check<F, G>(f: F, analytic_grad: G, point: &Vector, step: f64) -> Result<f64>
where
    F: Fn(&Vector) -> f64,
    G: Fn(&Vector) -> Vector,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::invalid(format!(
            "step must lie in [1e-7, 1e-3], got {step}"
        )));
    }
    let analytic = analytic_grad(point);
    if analytic.len() != point.len() {
        return Err(Error::invalid(format!(
            "analytic gradient length {} != point length {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let f_plus = f(&x);
        x[i] = point[i] - step;
        let f_minus = f(&x);
        x[i] = point[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite f evaluation while perturbing coordinate {i}"
            )));
        }
        let central = (f_plus - f_minus) / (2.0 * step);
        let err = (central - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
