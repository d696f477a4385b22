//! Dense row-major matrices and the handful of differentiable layers the
//! fusion network and the prompt encoder are built from.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. All reductions
//! walk memory in row-major, left-to-right order, which keeps results
//! bit-reproducible for a given seed.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point type usable by every layer in the crate.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static {
    /// Lossy conversion from `f64`, used for constants and cross-precision casts.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected length {expected}, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::LengthMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::LengthMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + self.data[i * k + p] * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out[i * n + j] = dot(a, other.row(j));
            }
        }
        debug_assert_eq!(k, other.cols);
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + self.data[p * m + i] * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[T]) -> Result<Vec<T>> {
        if y.len() != self.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "t_matvec",
                left: (self.cols, self.rows),
                right: (y.len(), 1),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o = *o + w * yr;
            }
        }
        Ok(out)
    }

    /// Accumulates the outer product `a ⊗ b` into `self`.
    pub fn add_outer(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w = *w + ar * bc;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::of(x.as_f64())).collect()
}

pub fn all_finite<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Index of the first maximum. Ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax<T: Scalar>(v: &[T], temperature: T) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(NumericsError::Empty { op: "softmax" });
    }
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(NumericsError::InvalidTemperature(temperature.as_f64()));
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let out: Vec<T> = exps.into_iter().map(|e| e / total).collect();
    if !all_finite(&out) {
        return Err(NumericsError::NonFinite { op: "softmax" });
    }
    Ok(out)
}

/// Backward pass of a unit-temperature softmax given its output.
pub fn softmax_backward<T: Scalar>(probs: &[T], grad_out: &[T]) -> Vec<T> {
    let inner = dot(probs, grad_out);
    probs.iter().zip(grad_out).map(|(&p, &g)| p * (g - inner)).collect()
}

/// Mean cross-entropy for one example: returns `(−log softmax(logits)[label], softmax − onehot)`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(NumericsError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite { op: "cross_entropy" });
    }
    let mut grad: Vec<T> = logits.iter().map(|&x| (x - max).exp() / sum).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}

/// `(x − mean)/sqrt(var + eps) · gamma + beta` with population variance.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    check_len("layer_norm", x.len(), gamma.len())?;
    check_len("layer_norm", x.len(), beta.len())?;
    if x.is_empty() {
        return Err(NumericsError::Empty { op: "layer_norm" });
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&h, &g), &b)| h * g + b)
        .collect())
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    eps: T,
    grad_out: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    check_len("layer_norm_backward", x.len(), gamma.len())?;
    check_len("layer_norm_backward", x.len(), grad_out.len())?;
    let n = T::of(x.len() as f64);
    let (xhat, inv_std) = normalize(x, eps);
    let dxhat: Vec<T> = grad_out.iter().zip(gamma).map(|(&g, &w)| g * w).collect();
    let mean_dxhat = dxhat.iter().copied().sum::<T>() / n;
    let mean_dxhat_xhat = dot(&dxhat, &xhat) / n;
    let dx = dxhat
        .iter()
        .zip(&xhat)
        .map(|(&d, &h)| inv_std * (d - mean_dxhat - h * mean_dxhat_xhat))
        .collect();
    let dgamma = grad_out.iter().zip(&xhat).map(|(&g, &h)| g * h).collect();
    Ok((dx, dgamma, grad_out.to_vec()))
}

fn normalize<T: Scalar>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    (x.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(NumericsError::LengthMismatch { op, expected, got });
    }
    Ok(())
}

/// `x · σ(1.702 x)`, the sigmoid approximation of GELU.
#[inline]
pub fn quick_gelu<T: Scalar>(x: T) -> T {
    x * sigmoid(T::of(1.702) * x)
}

#[inline]
pub fn quick_gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(1.702);
    let s = sigmoid(k * x);
    s + x * k * s * (T::one() - s)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Affine map `y = W x + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Gradients of a [`Linear`] layer; shaped like the layer itself.
pub type LinearGrad<T> = Linear<T>;

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let mut y = self.weight.matvec(x)?;
        for (v, &b) in y.iter_mut().zip(&self.bias) {
            *v = *v + b;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], grad_out: &[T], grad: &mut LinearGrad<T>) -> Result<Vec<T>> {
        check_len("Linear::backward", self.output_dim(), grad_out.len())?;
        check_len("Linear::backward", self.input_dim(), x.len())?;
        grad.weight.add_outer(grad_out, x);
        for (b, &g) in grad.bias.iter_mut().zip(grad_out) {
            *b = *b + g;
        }
        self.weight.t_matvec(grad_out)
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Finite-difference verification of analytic gradients.
pub mod gradcheck {
    /// Central-difference step used in double precision.
    pub const FD_STEP: f64 = 1e-5;
    /// Denominator floor of the relative error, so entries whose true gradient
    /// is (near) zero are judged on absolute error instead of exploding.
    pub const REL_ERROR_FLOOR: f64 = 1e-3;

    #[derive(Clone, Debug, PartialEq)]
    pub struct GradCheckReport {
        pub checked: usize,
        pub max_rel_error: f64,
        pub max_abs_error: f64,
        pub worst_index: Option<usize>,
    }

    impl GradCheckReport {
        pub fn passes(&self, tolerance: f64) -> bool {
            self.max_rel_error < tolerance
        }
    }

    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        (analytic - numeric).abs() / denom
    }

    /// Central differences of a scalar function at `x`.
    pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + FD_STEP;
                let plus = f(&probe);
                probe[i] = orig - FD_STEP;
                let minus = f(&probe);
                probe[i] = orig;
                (plus - minus) / (2.0 * FD_STEP)
            })
            .collect()
    }

    pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
        assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
        let mut report = GradCheckReport {
            checked: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: None,
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = relative_error(a, n);
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if rel > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_index = Some(i);
            }
        }
        report
    }

    /// Checks `f`, which returns its value and analytic gradient at a point.
    pub fn grad_check(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x: &[f64]) -> GradCheckReport {
        let (_, analytic) = f(x);
        let numeric = numeric_gradient(|p| f(p).0, x);
        compare(&analytic, &numeric)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg32;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = Matrix::from_rows(&[vec![3.0f32, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);
        let z = Matrix::<f32>::zeros(2, 3);
        let any = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f32 + 0.5);
        assert_eq!(z.matmul(&any).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 43.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn transpose_products_agree() {
        let mut rng = Pcg32::seed_from_u64(3);
        let a = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0f64));
        let b = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0f64));
        let direct = a.matmul(&b.transpose()).unwrap();
        assert_eq!(a.matmul_t(&b).unwrap(), direct);
        let c = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let tm = a.t_matmul(&c).unwrap();
        let expect = a.transpose().matmul(&c).unwrap();
        for (x, y) in tm.data().iter().zip(expect.data()) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0f64, 0.0, 0.0], 1.0).unwrap();
        for p in u {
            assert!(close(p, 1.0 / 3.0, 1e-12));
        }
        let p = softmax(&[0.0f64, 3f64.ln()], 1.0).unwrap();
        assert!(close(p[0], 0.25, 1e-12) && close(p[1], 0.75, 1e-12));
        let c = softmax(&[42.0f32; 5], 1.0).unwrap();
        assert!(c.iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(softmax::<f32>(&[], 1.0), Err(NumericsError::Empty { op: "softmax" }));
        assert!(matches!(
            softmax(&[1.0f32], 0.0),
            Err(NumericsError::InvalidTemperature(_))
        ));
        assert!(matches!(
            softmax(&[1.0f32], -2.0),
            Err(NumericsError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, _) = cross_entropy(&[0.0f64; 6], 3).unwrap();
        assert!(close(loss, 6f64.ln(), 1e-12));
        assert!(close(loss, 1.791759, 1e-6));

        let (loss, _) = cross_entropy(&[20.0f64, 0.0, 0.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-6);

        // direct summation oracle
        let logits = [1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0];
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let (loss, grad) = cross_entropy(&logits, 1).unwrap();
        assert!(close(loss, z.ln() - 0.0, 1e-12));
        assert!(close(grad[0], 1f64.exp() / z, 1e-12));
        assert!(close(grad[1], 1.0 / z - 1.0, 1e-12));

        assert_eq!(
            cross_entropy(&[0.0f32; 6], 6),
            Err(NumericsError::LabelOutOfRange { label: 6, classes: 6 })
        );
    }

    #[test]
    fn layer_norm_cases() {
        let ones = [1.0f64; 4];
        let zeros = [0.0f64; 4];
        let out = layer_norm(&[2.5f64; 4], &ones, &zeros, 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let beta = [0.5f64, -1.0, 2.0, 3.0];
        let out = layer_norm(&[1.0f64, 5.0, -2.0, 0.3], &zeros, &beta, 1e-5).unwrap();
        assert_eq!(out, beta);

        let out = layer_norm(&[1.0f64, 3.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert!(close(out[0], -1.0, 1e-12) && close(out[1], 1.0, 1e-12));

        assert!(matches!(
            layer_norm(&[1.0f32, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(NumericsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn linear_layer_gradcheck() {
        let mut rng = Pcg32::seed_from_u64(11);
        // an 8×4 input batch through a 4→3 linear layer with a fixed random readout
        let x = Matrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0f64));
        let readout = Matrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0f64));
        let mut layer = Linear::<f64>::zeros(4, 3);
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let n_w = layer.weight.data().len();
        let mut flat: Vec<f64> = layer.weight.data().to_vec();
        flat.extend(&layer.bias);
        let eval = |p: &[f64]| {
            let l = Linear {
                weight: Matrix::new(3, 4, p[..n_w].to_vec()).unwrap(),
                bias: p[n_w..].to_vec(),
            };
            let mut grad = Linear::zeros(4, 3);
            let mut value = 0.0;
            for r in 0..8 {
                let y = l.forward(x.row(r)).unwrap();
                value += dot(&y, readout.row(r));
                l.backward(x.row(r), readout.row(r), &mut grad).unwrap();
            }
            let mut g = grad.weight.into_data();
            g.extend(grad.bias);
            (value, g)
        };
        let report = grad_check(eval, &flat);
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_gradcheck() {
        let mut rng = Pcg32::seed_from_u64(5);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..6usize);
            let report = grad_check(|p| cross_entropy(p, label).unwrap(), &logits);
            assert!(report.passes(1e-6), "{report:?}");
        }
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = Pcg32::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gamma: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..1.5)).collect();
            let beta: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
            let readout: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let report = grad_check(
                |p| {
                    let y = layer_norm(p, &gamma, &beta, 1e-5).unwrap();
                    let (dx, _, _) = layer_norm_backward(p, &gamma, 1e-5, &readout).unwrap();
                    (dot(&y, &readout), dx)
                },
                &x,
            );
            assert!(report.passes(1e-6), "{report:?}");
        }
    }

    #[test]
    fn quick_gelu_gradcheck() {
        let xs: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.25).collect();
        let report = grad_check(
            |p| {
                (
                    p.iter().map(|&v| quick_gelu(v)).sum(),
                    p.iter().map(|&v| quick_gelu_grad(v)).collect(),
                )
            },
            &xs,
        );
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = [0.3, -1.2, 4.0];
        let numeric = numeric_gradient(|_| 7.5, &x);
        assert!(numeric.iter().all(|&g| g == 0.0));
        let report = grad_check(|_| (7.5, vec![0.0; 3]), &x);
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.max_abs_error, 0.0);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant_and_argmax_preserving(
            v in prop::collection::vec(-20.0f64..20.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let p = softmax(&v, 1.0).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted, 1.0).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(argmax(&p), argmax(&v));
        }

        #[test]
        fn cross_entropy_nonnegative_with_zero_sum_grad(
            v in prop::collection::vec(-30.0f32..30.0, 6),
            label in 0usize..6,
        ) {
            let (loss, grad) = cross_entropy(&v, label).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!(grad.iter().sum::<f32>().abs() < 1e-6);
        }

        #[test]
        fn matmul_with_identity_is_bit_exact(
            rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(),
        ) {
            let mut rng = Pcg32::seed_from_u64(seed);
            let a = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1e3f32..1e3));
            prop_assert_eq!(a.matmul(&Matrix::identity(cols)).unwrap(), a);
        }
    }
}
