//! Row-major dense matrices and the handful of vector kernels the layer needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// Row vector times matrix: `x · self`.
    pub fn left_mul(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.left_mul_into(x, &mut out);
        out
    }

    pub fn left_mul_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (xi, row) in x.iter().zip(self.iter_rows()) {
            if *xi != T::zero() {
                axpy(*xi, row, out);
            }
        }
    }

    /// Matrix times column vector: `self · y`, i.e. `y · selfᵀ`.
    pub fn right_mul(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.cols);
        self.iter_rows().map(|row| dot(row, y)).collect()
    }

    /// `self += uᵀ v` (outer product of two row vectors).
    pub fn add_outer(&mut self, alpha: T, u: &[T], v: &[T]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            let s = alpha * *ui;
            if s != T::zero() {
                axpy(s, v, self.row_mut(i));
            }
        }
    }

    /// Frobenius inner product.
    pub fn frobenius(&self, other: &Self) -> T {
        dot(&self.data, &other.data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|x| x.abs()).fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

pub fn l2_norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y).abs()).fold(T::zero(), T::max)
}

/// Root-mean-square normalization: `x / sqrt(mean(x²) + eps)`.
/// Returns the normalized vector and the inverse scale.
pub fn rms_norm<T: Scalar>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_usize(x.len().max(1)).unwrap();
    let inv = (dot(x, x) / n + eps).sqrt().recip();
    (x.iter().map(|v| *v * inv).collect(), inv)
}

/// Backward of [`rms_norm`] given the input, its inverse scale and the
/// upstream gradient on the output.
pub fn rms_norm_backward<T: Scalar>(x: &[T], inv: T, grad_out: &[T]) -> Vec<T> {
    let n = T::from_usize(x.len().max(1)).unwrap();
    let proj = dot(x, grad_out);
    let c = inv * inv * inv * proj / n;
    x.iter()
        .zip(grad_out)
        .map(|(xi, gi)| inv * *gi - c * *xi)
        .collect()
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|z| (*z - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}
