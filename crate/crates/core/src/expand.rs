//! Lossless expansion operators for vectors, matrices, biases and norm layers.
//!
//! Every expansion from width `S` to width `T >= S` keeps the first
//! `⌊T/S⌋·S` entries as repeated copies of the source; the operators differ
//! only in how the `T mod S` tail is filled. Each operator is paired with the
//! vector expansions it is lossless for:
//!
//! | operator                         | input     | output    |
//! |----------------------------------|-----------|-----------|
//! | [`expand_matrix_rows`] (avg)     | identity  | `V_avg`   |
//! | [`expand_matrix_rows`] (zero)    | identity  | `V_zero`  |
//! | [`expand_matrix_rows`] (circ)    | identity  | `V_circ`  |
//! | [`expand_matrix_cols`] (rand)    | `V_zero`  | identity  |
//! | [`expand_matrix_cols`] (circ)    | `V_circ`  | identity  |
//! | [`expand_bias`] (m)              | `V_m`     | `V_m`     |
//! | [`expand_layernorm`]             | `V_avg`   | `V_zero`  |
//! | [`expand_rmsnorm`]               | `V_zero`  | `V_zero`  |
//!
//! Matrices follow the `y = M·x` convention, so "rows" are outputs and
//! "columns" are inputs. No operator draws random numbers; free parameters
//! (tails, splits) are passed in by the caller.

use crate::error::{shape_err, Error, Result};
use crate::scalar::{from_usize, Scalar};
use crate::tensor::{mean, Tensor};

/// How the `T mod S` tail of a vector expansion is filled.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorExpandMode<T> {
    /// Tail entries are the mean of the source.
    Avg,
    /// Tail entries are zero.
    Zero,
    /// Tail is the leading `T mod S` source entries.
    Circ,
    /// Tail is the given vector, which must have length `T mod S`.
    Rand(Tensor<T>),
}

/// Tail rule for row expansion (and bias expansion).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowMode {
    Avg,
    Zero,
    Circ,
}

impl<T> From<RowMode> for VectorExpandMode<T> {
    fn from(m: RowMode) -> Self {
        match m {
            RowMode::Avg => VectorExpandMode::Avg,
            RowMode::Zero => VectorExpandMode::Zero,
            RowMode::Circ => VectorExpandMode::Circ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnMode {
    /// Parts sum to `M`; the tail is free. Lossless for `V_zero` inputs.
    Rand,
    /// Parts plus tail sum to `M` over the leading columns. Lossless for `V_circ` inputs.
    Circ,
}

/// Column blocks of an expanded matrix.
///
/// `parts` holds `⌊T/S⌋` matrices shaped like the source `[P, S]`; `tail` is
/// `[P, T mod S]`. For [`ColumnMode::Rand`] the parts must sum to the source
/// and the tail is arbitrary. For [`ColumnMode::Circ`] the tail plays the role
/// of the residual block and must complete the sum over the leading columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSplit<T> {
    pub parts: Vec<Tensor<T>>,
    pub tail: Tensor<T>,
}

/// `(⌊T/S⌋, T mod S)` after checking `T >= S`.
pub fn copies_and_tail(source: usize, target: usize) -> Result<(usize, usize)> {
    if target < source {
        return Err(Error::Shrink { from: source, to: target });
    }
    if source == 0 {
        return Err(shape_err("expand", "source extent is zero"));
    }
    Ok((target / source, target % source))
}

/// Source index that target position `i` replicates (circular pattern).
#[inline]
pub fn source_index(i: usize, source: usize) -> usize {
    i % source
}

/// Target positions holding a copy of source index `j`, under the circular
/// pattern (the `Circ` tail included).
pub fn replica_positions(j: usize, source: usize, target: usize) -> Vec<usize> {
    (j..target).step_by(source).collect()
}

pub fn expand_vector<T: Scalar>(
    x: &Tensor<T>,
    target: usize,
    mode: &VectorExpandMode<T>,
) -> Result<Tensor<T>> {
    let s = x.len();
    let (k, r) = copies_and_tail(s, target)?;
    let mut out = Vec::with_capacity(target);
    for _ in 0..k {
        out.extend_from_slice(x.data());
    }
    match mode {
        VectorExpandMode::Avg => {
            let m = mean(x.data());
            out.extend(std::iter::repeat_n(m, r));
        }
        VectorExpandMode::Zero => out.extend(std::iter::repeat_n(T::zero(), r)),
        VectorExpandMode::Circ => out.extend_from_slice(&x.data()[..r]),
        VectorExpandMode::Rand(zeta) => {
            if zeta.len() != r {
                return Err(shape_err(
                    "expand_vector",
                    format!("random tail of {} for {r} tail entries", zeta.len()),
                ));
            }
            out.extend_from_slice(zeta.data());
        }
    }
    Tensor::new(vec![target], out)
}

/// Inverse of every vector expansion: the leading `source` entries.
pub fn invert_vector_expansion<T: Scalar>(xstar: &Tensor<T>, source: usize) -> Result<Tensor<T>> {
    copies_and_tail(source, xstar.len())?;
    Tensor::new(vec![source], xstar.data()[..source].to_vec())
}

/// Applies a vector expansion to every trailing vector of `x`.
pub fn expand_last_dim<T: Scalar>(
    x: &Tensor<T>,
    target: usize,
    mode: &VectorExpandMode<T>,
) -> Result<Tensor<T>> {
    let s = x.last_dim();
    copies_and_tail(s, target)?;
    let mut out = Vec::with_capacity(x.outer_len() * target);
    for i in 0..x.outer_len() {
        let v = Tensor::vector(x.row(i).to_vec());
        out.extend(expand_vector(&v, target, mode)?.into_data());
    }
    let mut shape = x.shape().to_vec();
    if let Some(last) = shape.last_mut() {
        *last = target;
    }
    Tensor::new(shape, out)
}

/// Expands the output (row) dimension of `M: [S, P]` to `[T, P]`.
pub fn expand_matrix_rows<T: Scalar>(m: &Tensor<T>, target: usize, mode: RowMode) -> Result<Tensor<T>> {
    if m.ndim() != 2 {
        return Err(shape_err("expand_matrix_rows", format!("{:?}", m.shape())));
    }
    let (s, p) = (m.rows(), m.cols());
    let (k, r) = copies_and_tail(s, target)?;
    let mut out = Vec::with_capacity(target * p);
    for _ in 0..k {
        out.extend_from_slice(m.data());
    }
    match mode {
        RowMode::Avg => {
            let avg: Vec<T> = (0..p).map(|j| mean(&m.column(j))).collect();
            for _ in 0..r {
                out.extend_from_slice(&avg);
            }
        }
        RowMode::Zero => out.extend(std::iter::repeat_n(T::zero(), r * p)),
        RowMode::Circ => out.extend_from_slice(&m.data()[..r * p]),
    }
    Tensor::new(vec![target, p], out)
}

fn split_tolerance<T: Scalar>() -> f64 {
    // 1e-12 relative in f64; f32 cannot resolve that, so allow a few ulps.
    (16.0 * T::epsilon().to_f64_lossless()).max(1e-12)
}

impl<T: Scalar> ColumnSplit<T> {
    /// The split of a non-expanding map: one part equal to `M`, empty tail.
    pub fn identity(m: &Tensor<T>) -> Self {
        Self {
            parts: vec![m.clone()],
            tail: Tensor::zeros(&[m.rows(), 0]),
        }
    }

    /// Checks shapes and the sum constraint of `mode` against source `m`.
    pub fn validate(&self, m: &Tensor<T>, target: usize, mode: ColumnMode) -> Result<()> {
        if m.ndim() != 2 {
            return Err(shape_err("ColumnSplit", format!("{:?}", m.shape())));
        }
        let (p, s) = (m.rows(), m.cols());
        let (k, r) = copies_and_tail(s, target)?;
        if self.parts.len() != k {
            return Err(shape_err(
                "ColumnSplit",
                format!("{} parts for {k} copies", self.parts.len()),
            ));
        }
        if let Some(bad) = self.parts.iter().find(|q| q.shape() != m.shape()) {
            return Err(shape_err(
                "ColumnSplit",
                format!("part {:?} vs source {:?}", bad.shape(), m.shape()),
            ));
        }
        if self.tail.shape() != [p, r] {
            return Err(shape_err(
                "ColumnSplit",
                format!("tail {:?}, expected [{p}, {r}]", self.tail.shape()),
            ));
        }
        let tol = split_tolerance::<T>();
        let mut worst = 0.0f64;
        for i in 0..p {
            for j in 0..s {
                let mut terms: Vec<T> = self.parts.iter().map(|q| q.at(i, j)).collect();
                if mode == ColumnMode::Circ && j < r {
                    terms.push(self.tail.at(i, j));
                }
                let sum = crate::tensor::exact_sum(terms.iter().copied());
                let scale = terms
                    .iter()
                    .map(|v| v.abs())
                    .fold(m.at(i, j).abs(), T::max)
                    .to_f64_lossless();
                let err = (sum - m.at(i, j)).abs().to_f64_lossless();
                if err > 0.0 {
                    let rel = if scale > 0.0 { err / scale } else { f64::INFINITY };
                    worst = worst.max(rel);
                }
            }
        }
        if worst > tol {
            return Err(Error::SplitConstraint { rel_err: worst });
        }
        Ok(())
    }
}

/// Expands the input (column) dimension of `M: [P, S]` to `[P, T]`.
pub fn expand_matrix_cols<T: Scalar>(
    m: &Tensor<T>,
    target: usize,
    mode: ColumnMode,
    split: &ColumnSplit<T>,
) -> Result<Tensor<T>> {
    split.validate(m, target, mode)?;
    let mut blocks: Vec<&Tensor<T>> = split.parts.iter().collect();
    blocks.push(&split.tail);
    Tensor::hcat(&blocks)
}

pub fn expand_bias<T: Scalar>(b: &Tensor<T>, target: usize, mode: RowMode) -> Result<Tensor<T>> {
    expand_vector(b, target, &mode.into())
}

/// Scalar correction and free tail used by the norm-layer expansions.
#[derive(Debug, Clone, PartialEq)]
pub struct NormExpansion<T> {
    /// `sqrt(⌊T/S⌋·S/T)`, in `(0, 1]`.
    pub eta: T,
    /// Free `T mod S` tail for the scale vector.
    pub zeta: Tensor<T>,
}

/// `sqrt(⌊T/S⌋·S/T)`.
pub fn norm_eta<T: Scalar>(source: usize, target: usize) -> Result<T> {
    let (k, r) = copies_and_tail(source, target)?;
    if r == 0 {
        return Ok(T::one());
    }
    let ratio: T = from_usize::<T>(k * source) / from_usize::<T>(target);
    Ok(ratio.sqrt())
}

impl<T: Scalar> NormExpansion<T> {
    pub fn new(source: usize, target: usize, zeta: Tensor<T>) -> Result<Self> {
        let (_, r) = copies_and_tail(source, target)?;
        if zeta.len() != r {
            return Err(shape_err(
                "NormExpansion",
                format!("tail of {} for {r} tail entries", zeta.len()),
            ));
        }
        Ok(Self {
            eta: norm_eta(source, target)?,
            zeta,
        })
    }
}

/// Expanded LayerNorm parameters: `μ* = η·V_rand(μ; ζ)`, `β* = V_zero(β)`,
/// `ε* = η²·ε`.
///
/// With these, `LN(V_avg(x); μ*, β*, ε*) == V_zero(LN(x; μ, β, ε))`: the
/// average tail keeps the mean and shrinks the population variance by `η²`.
pub fn expand_layernorm<T: Scalar>(
    mu: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    target: usize,
    zeta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    if mu.len() != beta.len() {
        return Err(shape_err("expand_layernorm", "mu and beta differ in length"));
    }
    let ne = NormExpansion::new(mu.len(), target, zeta.clone())?;
    let mu_star = expand_vector(mu, target, &VectorExpandMode::Rand(ne.zeta))?.scale(ne.eta);
    let beta_star = expand_vector(beta, target, &VectorExpandMode::Zero)?;
    Ok((mu_star, beta_star, ne.eta * ne.eta * eps))
}

/// Expanded RMSNorm parameters: `μ* = η·V_rand(μ; ζ)`, `ε* = η²·ε`.
pub fn expand_rmsnorm<T: Scalar>(
    mu: &Tensor<T>,
    eps: T,
    target: usize,
    zeta: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    let ne = NormExpansion::new(mu.len(), target, zeta.clone())?;
    let mu_star = expand_vector(mu, target, &VectorExpandMode::Rand(ne.zeta))?.scale(ne.eta);
    Ok((mu_star, ne.eta * ne.eta * eps))
}
