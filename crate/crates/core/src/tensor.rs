//! Dense row-major tensors and the numeric kernels every other module uses.
//!
//! All reductions (dot products, means, variances) go through [`exact_sum`],
//! which returns the correctly rounded sum of its inputs regardless of their
//! order. Two consequences matter for expansion checks: a matmul result does
//! not depend on how rows are laid out, and a sum made of exactly cancelling
//! pairs is exactly zero.
//!
//! Dtype agreement between operands is enforced by the type parameter, so the
//! kernels here only report shape errors and non-finite results.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::{from_usize, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(shape_err("Tensor::new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            data.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for a 0-d tensor).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row count when viewed as `[.., last_dim]` collapsed to 2-D.
    pub fn outer_len(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn rows(&self) -> usize {
        self.expect_2d();
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.expect_2d();
        self.shape[1]
    }

    fn expect_2d(&self) {
        assert_eq!(self.shape.len(), 2, "expected a 2-D tensor, got {:?}", self.shape);
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self {
            shape: vec![r, end - start],
            data,
        }
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn hcat(parts: &[&Tensor<T>]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(shape_err("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Concatenates 2-D tensors along the row axis.
    pub fn vcat(parts: &[&Tensor<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != cols) {
            return Err(shape_err("vcat", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(shape_err(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }
}

/// Correctly rounded floating-point sum (Shewchuk's non-overlapping partials).
///
/// Assumes finite inputs; non-finite inputs yield a non-finite result.
pub fn exact_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    // Non-overlapping partials of a finite f64 sum never exceed ~40 entries.
    const CAP: usize = 80;
    let mut partials = [T::zero(); CAP];
    let mut n = 0usize;
    for mut x in values {
        if !x.is_finite() {
            return x;
        }
        let mut i = 0;
        for j in 0..n {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != T::zero() {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        if !x.is_finite() {
            return x;
        }
        partials[i] = x;
        n = i + 1;
    }
    if n == 0 {
        return T::zero();
    }
    let mut n = n - 1;
    let mut hi = partials[n];
    let mut lo = T::zero();
    while n > 0 {
        let x = hi;
        let y = partials[n - 1];
        n -= 1;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != T::zero() {
            break;
        }
    }
    // Round half to even across the remaining partials.
    if n > 0
        && ((lo < T::zero() && partials[n - 1] < T::zero())
            || (lo > T::zero() && partials[n - 1] > T::zero()))
    {
        let y = lo + lo;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Correctly rounded dot product of the elementwise-rounded products.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    fast_dot(a, b).unwrap_or_else(|| exact_sum(a.iter().zip(b).map(|(&x, &y)| x * y)))
}

/// Compensated dot product that only answers when it can prove the result
/// equals the correctly rounded sum; `None` means "use the slow path".
///
/// The running sum is tracked with error-free TwoSum steps, so the exact sum
/// is `s + Σe`. `Σe` is summed naively with a rigorous error bound; if the
/// rounded total sits far enough from a rounding boundary that the bound
/// cannot move it, that total is the correctly rounded answer.
fn fast_dot<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let eps = T::epsilon();
    let n = from_usize::<T>(a.len().min(b.len()));
    if n * eps >= T::from_f64_lossy(0.01) {
        return None;
    }
    let (mut s, mut t, mut mag) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let hi = s + p;
        let z = hi - s;
        let e = (s - (hi - z)) + (p - z);
        s = hi;
        t += e;
        mag += e.abs();
    }
    // |t - Σe| <= γ_{n-1}·Σ|e| < 2n·eps·mag (with room for mag's own rounding).
    let bound = T::from_f64_lossy(2.0) * n * eps * mag;
    let hi = s + t;
    let lo = t - (hi - s);
    if !hi.is_finite() || !bound.is_finite() || hi.abs() < T::min_positive_value() / eps {
        return None;
    }
    // Spacing of floats just below |hi| (half the usual at a power of two).
    let (mantissa, exp, _) = hi.integer_decode();
    let mut gap = T::from_f64_lossy(2.0).powi(exp as i32);
    if mantissa.is_power_of_two() {
        gap /= T::from_f64_lossy(2.0);
    }
    let limit = gap / T::from_f64_lossy(2.0) * (T::one() - T::from_f64_lossy(4.0) * eps);
    (lo.abs() + bound < limit).then_some(hi)
}

/// `C = A·B` for 2-D operands.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let bt = b.transpose();
    let (m, n) = (a.rows(), b.cols());
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            data.push(dot(ar, bt.row(j)));
        }
    }
    Tensor::new(vec![m, n], data)?.ensure_finite("matmul")
}

/// `X·Wᵀ` where `W` is stored as `[out, in]`.
pub fn matmul_t<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 2 || w.ndim() != 2 || x.cols() != w.cols() {
        return Err(shape_err(
            "matmul_t",
            format!("{:?} x {:?}ᵀ", x.shape(), w.shape()),
        ));
    }
    let (m, n) = (x.rows(), w.rows());
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let xr = x.row(i);
        for j in 0..n {
            data.push(dot(xr, w.row(j)));
        }
    }
    Tensor::new(vec![m, n], data)?.ensure_finite("matmul_t")
}

/// Elementwise sum of equally shaped tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)?.ensure_finite("add")
}

/// Adds `bias` to every trailing vector of `x`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if bias.len() != d {
        return Err(shape_err(
            "add_bias",
            format!("bias of {} for trailing extent {d}", bias.len()),
        ));
    }
    let b = bias.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[i % d])
        .collect();
    Tensor::new(x.shape().to_vec(), data)?.ensure_finite("add_bias")
}

pub fn mean<T: Scalar>(x: &[T]) -> T {
    exact_sum(x.iter().copied()) / from_usize(x.len())
}

/// Population variance around `m`.
pub fn variance<T: Scalar>(x: &[T], m: T) -> T {
    exact_sum(x.iter().map(|&v| (v - m) * (v - m))) / from_usize(x.len())
}

fn check_norm_params<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    params: &[&Tensor<T>],
) -> Result<usize> {
    let d = x.last_dim();
    for p in params {
        if p.len() != d {
            return Err(shape_err(
                op,
                format!("parameter of {} for trailing extent {d}", p.len()),
            ));
        }
    }
    Ok(d)
}

/// LayerNorm over the trailing axis with population variance.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    mu: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = check_norm_params("layernorm", x, &[mu, beta])?;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.outer_len() {
        let v = &x.data()[r * d..(r + 1) * d];
        let m = mean(v);
        let denom = variance(v, m) + eps;
        if denom == T::zero() {
            return Err(Error::ZeroDenominator { op: "layernorm" });
        }
        let s = denom.sqrt();
        for i in 0..d {
            out.push((v[i] - m) / s * mu.data()[i] + beta.data()[i]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("layernorm")
}

/// RMS normalisation over the trailing axis.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, mu: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = check_norm_params("rmsnorm", x, &[mu])?;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.outer_len() {
        let v = &x.data()[r * d..(r + 1) * d];
        let ms = exact_sum(v.iter().map(|&a| a * a)) / from_usize(d);
        let denom = ms + eps;
        if denom == T::zero() {
            return Err(Error::ZeroDenominator { op: "rmsnorm" });
        }
        let s = denom.sqrt();
        for i in 0..d {
            out.push(v[i] / s * mu.data()[i]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("rmsnorm")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    if m.ndim() != 2 {
        return Err(shape_err("softmax_rows", format!("{:?}", m.shape())));
    }
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z = exact_sum(e.iter().copied());
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::new(m.shape().to_vec(), out)?.ensure_finite("softmax_rows")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            // Exact erf form: x·Φ(x).
            Activation::Gelu => {
                let half = T::from_f64_lossy(0.5);
                x * half * (T::one() + (x / T::from_f64_lossy(std::f64::consts::SQRT_2)).erf())
            }
        }
    }

    /// Derivative, used only by the hand-written gradient of the toy MLP.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::from_f64_lossy(0.5);
                let cdf = half * (T::one() + (x / T::from_f64_lossy(std::f64::consts::SQRT_2)).erf());
                let pdf = (-(x * x) * half).exp()
                    / T::from_f64_lossy((2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    x.map(|v| kind.apply(v)).ensure_finite("activation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&m, &ones).unwrap().data(), &[3.0, 7.0]);
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(matmul(&m, &z).unwrap(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_surfaces_overflow() {
        let a = t(&[1, 2], &[f64::MAX, f64::MAX]);
        let b = t(&[2, 1], &[2.0, 2.0]);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn exact_sum_cancels_pairs_in_any_order() {
        let v = [1e16, 1.0, -1e16, -1.0, 3.5e-7, -3.5e-7];
        assert_eq!(exact_sum(v.iter().copied()), 0.0);
        let naive: f64 = v.iter().sum();
        assert_ne!(naive, 0.0);
        assert_eq!(exact_sum([0.1f64, 0.2, 0.3]), 0.6);
    }

    #[test]
    fn layernorm_examples() {
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = t(&[2], &[0.0, 0.0]);
        let y = layernorm(&t(&[2], &[1.0, 3.0]), &ones, &zeros, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let beta = t(&[3], &[0.5, -1.0, 2.0]);
        let y = layernorm(&t(&[3], &[4.0, 4.0, 4.0]), &t(&[3], &[3.0, 3.0, 3.0]), &beta, 1e-5)
            .unwrap();
        assert_eq!(y, beta);

        let x = t(&[2], &[-1.0, 1.0]);
        assert_eq!(layernorm(&x, &ones, &zeros, 0.0).unwrap(), x);
    }

    #[test]
    fn layernorm_zero_variance_without_eps_errors() {
        let ones = t(&[2], &[1.0, 1.0]);
        let r = layernorm(&t(&[2], &[2.0, 2.0]), &ones, &ones, 0.0);
        assert!(matches!(r, Err(Error::ZeroDenominator { .. })));
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = t(&[2], &[1.0, 1.0]);
        assert_eq!(rmsnorm(&t(&[2], &[1.0, -1.0]), &ones, 0.0).unwrap().data(), &[1.0, -1.0]);
        let y = rmsnorm(&t(&[2], &[2.0, 0.0]), &ones, 0.0).unwrap();
        assert!((y.data()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(rmsnorm(&t(&[2], &[0.0, 0.0]), &ones, 1e-6).unwrap().data(), &[0.0, 0.0]);
        assert!(rmsnorm(&t(&[2], &[0.0, 0.0]), &ones, 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[1, 3], &[2.0, 2.0, 2.0])).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&t(&[1, 2], &[0.0, 3f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        let y = softmax_rows(&t(&[3, 1], &[-5.0, 0.0, 700.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0]);
    }

    /// erf via its Maclaurin series, independent of libm.
    fn erf_series(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut term = x;
        let mut n = 0u32;
        while term.abs() > 1e-18 || n < 5 {
            sum += term / (2 * n + 1) as f64;
            n += 1;
            term *= -x * x / n as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        let expected = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((Activation::Gelu.apply(1.0f64) - expected).abs() < 1e-15);
        for &x in &[-2.5f64, -0.3, 0.7, 1.9] {
            let oracle = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((Activation::Gelu.apply(x) - oracle).abs() < 1e-14, "x = {x}");
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-1.3f64, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((Activation::Gelu.derivative(x) - fd).abs() < 1e-8);
        }
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
    }

    fn slow_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        exact_sum(a.iter().zip(b).map(|(&x, &y)| x * y))
    }

    #[test]
    fn dot_fast_path_handles_cancellation() {
        let a = [1e16f64, 1.0, -1e16, 3.0, 0.1];
        let b = [1.0, 1.0, 1.0, 1.0, -10.0];
        assert_eq!(dot(&a, &b).to_bits(), slow_dot(&a, &b).to_bits());
        let x: Vec<f64> = (0..768).map(|i| ((i * 37 % 101) as f64 - 50.0) / 7.0).collect();
        let y: Vec<f64> = (0..768).map(|i| ((i * 53 % 89) as f64 - 44.0) / 3.0).collect();
        assert_eq!(fast_dot(&x, &y), Some(slow_dot(&x, &y)));
        let pairs = [0.3f64, -0.3, 0.7, -0.7];
        assert_eq!(dot(&pairs, &[1.1, 1.1, 2.0, 2.0]), 0.0);
    }

    proptest! {
        #[test]
        fn dot_matches_exact_sum_f64(
            v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..300),
            scale in -40i32..40,
        ) {
            let a: Vec<f64> = v.iter().map(|p| p.0 * 2f64.powi(scale)).collect();
            let mut b: Vec<f64> = v.iter().map(|p| p.1).collect();
            // Near-cancelling tail stresses the certification.
            let head = slow_dot(&a, &b);
            b.push(1.0);
            let mut a = a;
            a.push(-head * (1.0 + 1e-15));
            prop_assert_eq!(dot(&a, &b).to_bits(), slow_dot(&a, &b).to_bits());
            prop_assert_eq!(dot(&a[..a.len() - 1], &b[..b.len() - 1]).to_bits(), head.to_bits());
        }

        #[test]
        fn dot_matches_exact_sum_f32(v in proptest::collection::vec((-10f32..10.0, -10f32..10.0), 1..300)) {
            let a: Vec<f32> = v.iter().map(|p| p.0).collect();
            let b: Vec<f32> = v.iter().map(|p| p.1).collect();
            prop_assert_eq!(dot(&a, &b).to_bits(), slow_dot(&a, &b).to_bits());
        }

        #[test]
        fn matmul_is_associative_f64(
            a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-12);
        }

        #[test]
        fn matmul_is_associative_f32(
            a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)
        ) {
            let (a, b, c) = (a.cast::<f32>(), b.cast::<f32>(), c.cast::<f32>());
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-5);
        }

        #[test]
        fn layernorm_standardises(x in proptest::collection::vec(-5.0f64..5.0, 2..12)) {
            let d = x.len();
            let x = Tensor::vector(x);
            prop_assume!(variance(x.data(), mean(x.data())) > 1e-6);
            let y = layernorm(&x, &Tensor::filled(&[d], 1.0), &Tensor::zeros(&[d]), 0.0).unwrap();
            let m = mean(y.data());
            prop_assert!(m.abs() <= 1e-12);
            prop_assert!((variance(y.data(), m) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one(m in small_matrix(4, 6)) {
            let y = softmax_rows(&m.scale(10.0)).unwrap();
            for i in 0..4 {
                let s: f64 = y.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn exact_sum_matches_sorted_compensated_reference(
            v in proptest::collection::vec(-1e6f64..1e6, 0..40)
        ) {
            // Reference: exact rational-free check via permutation invariance.
            let mut rev = v.clone();
            rev.reverse();
            prop_assert_eq!(exact_sum(v.iter().copied()), exact_sum(rev.iter().copied()));
            let naive: f64 = v.iter().sum();
            prop_assert!((exact_sum(v.iter().copied()) - naive).abs() <= 1e-6);
        }
    }
}
