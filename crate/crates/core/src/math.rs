//! Dense float kernels used by the forward pass and scoring paths.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in
//! standard (f32) and wide (f64) precision. Probabilities and metric
//! arithmetic are always accumulated in f64 regardless of the kernel type.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Float type a model can run in: f32 (standard) or f64 (wide).
pub trait Scalar:
    Float + FromPrimitive + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn erf(self) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// FFN activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// GPT-2's tanh-approximation GELU (`gelu_new`).
    #[default]
    GeluTanh,
    /// Exact erf-based GELU.
    GeluExact,
}

impl Activation {
    pub fn apply<F: Scalar>(self, x: F) -> F {
        let half = F::from_f64(0.5);
        let one = F::one();
        match self {
            Activation::GeluTanh => {
                // 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
                let c = F::from_f64(0.797_884_560_802_865_4);
                let k = F::from_f64(0.044_715);
                half * x * (one + (c * (x + k * x * x * x)).tanh())
            }
            Activation::GeluExact => {
                let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                half * x * (one + (x * inv_sqrt2).erf())
            }
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// `y = A x` with rows as output coordinates.
    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `y = A x + b`.
    pub fn matvec_bias(&self, x: &[F], b: &[F]) -> Vec<F> {
        debug_assert_eq!(b.len(), self.rows);
        (0..self.rows)
            .map(|r| dot(self.row(r), x) + b[r])
            .collect()
    }

    pub fn transposed(&self) -> Matrix<F> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}

pub fn add_assign<F: Scalar>(y: &mut [F], x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + xi;
    }
}

/// `y += a * x`.
pub fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + a * xi;
    }
}

pub fn l2_norm<F: Scalar>(x: &[F]) -> F {
    dot(x, x).sqrt()
}

/// LayerNorm with learned gain/shift: `(x - mean) / sqrt(var + eps) * g + b`.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], shift: &[F], eps: F) -> Vec<F> {
    let n = F::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d
        })
        .sum::<F>()
        / n;
    let inv_std = F::one() / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(shift.iter()))
        .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b)
        .collect()
}

/// Numerically stable softmax with f64 accumulation.
pub fn softmax_f64<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// In-place softmax in kernel precision (used for attention rows).
pub fn softmax_in_place<F: Scalar>(xs: &mut [F]) {
    let mut max = xs[0];
    for &v in xs.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in xs.iter_mut() {
        *v = *v / sum;
    }
}

/// Index of the largest value; first occurrence wins ties.
pub fn argmax_f64(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Natural log with an underflow floor so ablated distributions never
/// produce -inf.
pub const LOG_PROB_FLOOR: f64 = 1e-45;

pub fn floored_ln(p: f64) -> f64 {
    p.max(LOG_PROB_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let logits = vec![0.5f32, -1.0, 3.0, 0.0];
        let p = softmax_f64(&logits);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let gain = vec![1.0; 4];
        let shift = vec![0.0; 4];
        let y = layer_norm(&x, &gain, &shift, 1e-12);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_variants_agree_near_zero_and_at_zero() {
        assert_eq!(Activation::GeluTanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::GeluExact.apply(0.0f64), 0.0);
        for &x in &[-2.0f64, -0.5, 0.1, 1.0, 3.0] {
            let a = Activation::GeluTanh.apply(x);
            let b = Activation::GeluExact.apply(x);
            assert!((a - b).abs() < 2e-3, "tanh vs erf gelu at {x}: {a} vs {b}");
        }
    }

    #[test]
    fn matvec_matches_manual() {
        let m = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = m.matvec(&[1.0, 0.0, -1.0]);
        assert_eq!(y, vec![-2.0, -2.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Matrix::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.transposed().transposed(), m);
    }

    #[test]
    fn floored_ln_never_neg_inf() {
        assert!(floored_ln(0.0).is_finite());
        assert_eq!(floored_ln(1.0), 0.0);
    }
}
