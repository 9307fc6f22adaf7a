//! Whole-model width and depth expansion.
//!
//! Width comes first, block by block, then depth. The residual stream of the
//! expanded model carries a fixed vector expansion of the small model's
//! stream, chosen per norm style so every operator's lossless pairing lines
//! up:
//!
//! | style           | stream  | module output rows | final norm          |
//! |-----------------|---------|--------------------|---------------------|
//! | `pre_ln`        | `V_avg` | avg                | LN → `V_zero`       |
//! | `rms_pre`       | `V_zero`| zero               | RMS → `V_zero`      |
//! | `post_res_norm` | `V_zero`| avg, then LN       | none                |
//! | `post_ln`       | tiled   | tiled              | none                |
//!
//! The decoder always sees a `V_zero` (or tiled) hidden state, so a
//! column-random expansion of its weight keeps the logits.
//!
//! Random draws come from [`RandStream`]s keyed by block index, so the
//! parallel per-block expansion is bitwise reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::expand::{
    copies_and_tail, expand_bias, expand_last_dim, expand_layernorm, expand_matrix_cols,
    expand_matrix_rows, expand_rmsnorm, expand_vector, ColumnMode, ColumnSplit, RowMode,
    VectorExpandMode,
};
use crate::model::{
    AttentionWeights, BlockWeights, Decoder, Embedding, MlpWeights, ModelSpec, ModelWeights,
    NormParams, NormStyle,
};
use crate::rng::{Purpose, RandStream};
use crate::scalar::{from_usize, Scalar};
use crate::tensor::{exact_sum, Tensor};

/// Standard deviation of the free tail entries of column-random expansions.
pub const COLUMN_ZETA_STD: f64 = 0.02;

/// How the fan-out weights of replicated units are divided between copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Copy `c >= 2` gets `v/m + Φ_c`, the first copy takes the remainder.
    #[default]
    Lemon,
    /// Every copy gets `v/m`.
    Net2netEqual,
    /// The first copy keeps `v`, the others get zero.
    ZeroTail,
}

/// How inserted blocks are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Copy of the source block with its output projections zeroed.
    #[default]
    Type1,
    /// Shared fan-in across copies and cancelling `+P/−P` fan-out pairs.
    Type2,
    /// Like `Type1`, but the non-output weights come from the next block.
    Type1Aki,
}

/// Distribution of the free tail of an expanded norm scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZetaDist {
    Uniform { lo: f64, hi: f64 },
}

impl Default for ZetaDist {
    fn default() -> Self {
        ZetaDist::Uniform { lo: -1.0, hi: 1.0 }
    }
}

fn default_noise_scale() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub target_width: usize,
    pub target_depth: usize,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub depth_mode: DepthMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default)]
    pub ln_zeta_dist: ZetaDist,
}

impl ExpansionPlan {
    pub fn new(target_width: usize, target_depth: usize) -> Self {
        Self {
            target_width,
            target_depth,
            policy: Policy::default(),
            depth_mode: DepthMode::default(),
            seed: 0,
            noise_scale: default_noise_scale(),
            ln_zeta_dist: ZetaDist::default(),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if self.target_width < spec.width {
            return Err(Error::Shrink {
                from: spec.width,
                to: self.target_width,
            });
        }
        if self.target_depth < spec.depth {
            return Err(Error::Shrink {
                from: spec.depth,
                to: self.target_depth,
            });
        }
        if !self.target_width.is_multiple_of(spec.head_dim) {
            return bad(format!(
                "target width {} is not a multiple of head_dim {}",
                self.target_width, spec.head_dim
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad(format!("noise_scale {} must be finite and non-negative", self.noise_scale));
        }
        let ZetaDist::Uniform { lo, hi } = self.ln_zeta_dist;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("empty uniform range [{lo}, {hi})"));
        }
        if spec.norm_style == NormStyle::PostLn {
            if !self.target_width.is_multiple_of(spec.width) {
                return bad(format!(
                    "post-LN width expansion needs a multiple of the source width ({} -> {})",
                    spec.width, self.target_width
                ));
            }
            if self.target_depth > spec.depth && spec.eps != 0.0 {
                return bad("post-LN depth expansion needs eps = 0".into());
            }
        }
        Ok(())
    }

    /// Spec of the expanded model.
    pub fn target_spec(&self, spec: &ModelSpec) -> ModelSpec {
        ModelSpec {
            width: self.target_width,
            depth: self.target_depth,
            ..spec.clone()
        }
    }
}

/// Fan-out split rule plus its noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPolicy {
    pub policy: Policy,
    pub noise_scale: f64,
}

impl SplitPolicy {
    pub fn new(policy: Policy, noise_scale: f64) -> Self {
        Self { policy, noise_scale }
    }

    /// Splits `v` into `m` pieces summing to `v`.
    pub fn split<T: Scalar>(&self, v: &[T], m: usize, rng: &mut RandStream) -> Vec<Vec<T>> {
        assert!(m >= 1, "split needs at least one piece");
        if m == 1 {
            return vec![v.to_vec()];
        }
        let mf: T = from_usize(m);
        match self.policy {
            Policy::Net2netEqual => vec![v.iter().map(|&x| x / mf).collect(); m],
            Policy::ZeroTail => {
                let mut out = vec![v.to_vec()];
                out.extend((1..m).map(|_| vec![T::zero(); v.len()]));
                out
            }
            Policy::Lemon => {
                let rest: Vec<Vec<T>> = (1..m)
                    .map(|_| {
                        v.iter()
                            .map(|&x| x / mf + T::from_f64_lossy(rng.normal(self.noise_scale)))
                            .collect()
                    })
                    .collect();
                let first = (0..v.len())
                    .map(|i| {
                        let others = exact_sum(rest.iter().map(|p| p[i]));
                        v[i] - others
                    })
                    .collect();
                let mut out = vec![first];
                out.extend(rest);
                out
            }
        }
    }

    /// One half of a cancelling `+P/−P` pair built from `base`.
    fn cancel_piece<T: Scalar>(&self, base: &[T], rng: &mut RandStream) -> Vec<T> {
        let half = T::from_f64_lossy(0.5);
        match self.policy {
            Policy::Lemon => base
                .iter()
                .map(|&x| x * half + T::from_f64_lossy(rng.normal(self.noise_scale)))
                .collect(),
            Policy::Net2netEqual => base.iter().map(|&x| x * half).collect(),
            Policy::ZeroTail => base.to_vec(),
        }
    }

    /// Column split of `m: [P, S]` towards `target` columns.
    ///
    /// Copies of source column `j` form a group split by the policy; for
    /// [`ColumnMode::Circ`] the tail column joins the group of its source,
    /// for [`ColumnMode::Rand`] it is filled with `N(0, COLUMN_ZETA_STD²)`.
    pub fn column_split<T: Scalar>(
        &self,
        m: &Tensor<T>,
        target: usize,
        mode: ColumnMode,
        rng: &mut RandStream,
    ) -> Result<ColumnSplit<T>> {
        if m.ndim() != 2 {
            return Err(shape_err("column_split", format!("{:?}", m.shape())));
        }
        let (p, s) = (m.rows(), m.cols());
        let (k, r) = copies_and_tail(s, target)?;
        let mut parts = vec![Tensor::zeros(&[p, s]); k];
        let mut tail = Tensor::zeros(&[p, r]);
        for j in 0..s {
            let in_tail = mode == ColumnMode::Circ && j < r;
            let pieces = self.split(&m.column(j), k + in_tail as usize, rng);
            for (c, piece) in pieces.iter().enumerate() {
                let dst = if c < k { &mut parts[c] } else { &mut tail };
                for (i, &x) in piece.iter().enumerate() {
                    dst.set(i, j, x);
                }
            }
        }
        if mode == ColumnMode::Rand {
            tail = rng.normal_tensor(&[p, r], COLUMN_ZETA_STD);
        }
        Ok(ColumnSplit { parts, tail })
    }
}

/// Vector-expansion layout of the residual stream and module outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamLayout {
    /// Tail rule of the residual stream (and embeddings).
    pub stream: RowMode,
    /// Tail rule of attention / MLP output rows.
    pub module_out: RowMode,
}

impl StreamLayout {
    pub fn for_style(style: NormStyle) -> Self {
        use RowMode::*;
        match style {
            NormStyle::PreLn | NormStyle::PostLn => Self {
                stream: Avg,
                module_out: Avg,
            },
            NormStyle::PostResNorm => Self {
                stream: Zero,
                module_out: Avg,
            },
            NormStyle::RmsPre => Self {
                stream: Zero,
                module_out: Zero,
            },
        }
    }
}

/// Replicated units grouped by source unit, used by the symmetry report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    /// Name of the tensor holding the fan-out vectors.
    pub tensor: String,
    /// Whether fan-out vectors are rows or columns of that tensor.
    pub axis: Axis,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Col,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DuplicateMap {
    pub policy: Option<Policy>,
    pub groups: Vec<DuplicateGroup>,
}

/// Positions `0..target` grouped by `i mod source`, keeping groups of two or more.
fn replica_groups(source: usize, target: usize) -> Vec<Vec<usize>> {
    (0..source)
        .map(|j| (j..target).step_by(source).collect::<Vec<_>>())
        .filter(|g| g.len() > 1)
        .collect()
}

fn expand_norm<T: Scalar>(n: &NormParams<T>, target: usize, plan: &ExpansionPlan, rng: &mut RandStream) -> Result<NormParams<T>> {
    let (_, r) = copies_and_tail(n.width(), target)?;
    let ZetaDist::Uniform { lo, hi } = plan.ln_zeta_dist;
    let zeta = rng.uniform_tensor(&[r], lo, hi);
    Ok(match &n.beta {
        Some(beta) => {
            let (mu, beta, eps) = expand_layernorm(&n.mu, beta, n.eps, target, &zeta)?;
            NormParams {
                mu,
                beta: Some(beta),
                eps,
            }
        }
        None => {
            let (mu, eps) = expand_rmsnorm(&n.mu, n.eps, target, &zeta)?;
            NormParams { mu, beta: None, eps }
        }
    })
}

/// Column-random expansion of `w: [out, S]` to `[out, target]`.
fn expand_fan_in<T: Scalar>(w: &Tensor<T>, target: usize, policy: &SplitPolicy, rng: &mut RandStream) -> Result<Tensor<T>> {
    let split = policy.column_split(w, target, ColumnMode::Rand, rng)?;
    expand_matrix_cols(w, target, ColumnMode::Rand, &split)
}

/// Row expansion of `w: [S, in]`, then column-circular expansion of its input.
fn expand_fan_out<T: Scalar>(
    w: &Tensor<T>,
    rows: usize,
    row_mode: RowMode,
    cols: usize,
    policy: &SplitPolicy,
    rng: &mut RandStream,
) -> Result<Tensor<T>> {
    let w = expand_matrix_rows(w, rows, row_mode)?;
    let split = policy.column_split(&w, cols, ColumnMode::Circ, rng)?;
    expand_matrix_cols(&w, cols, ColumnMode::Circ, &split)
}

/// Expands multi-head attention to `target` width.
///
/// Heads are replicated circularly; every copy of `W^Q/K/V` gets its own
/// column-random split along the model width. `W_O` rows follow `out_rows`
/// and its inputs (the concatenated heads) are split circularly by `policy`.
pub fn expand_mha<T: Scalar>(
    w: &AttentionWeights<T>,
    head_dim: usize,
    target: usize,
    out_rows: RowMode,
    policy: &SplitPolicy,
    rng: &mut RandStream,
) -> Result<AttentionWeights<T>> {
    if !target.is_multiple_of(head_dim) {
        return Err(Error::InvalidPlan(format!(
            "target width {target} is not a multiple of head_dim {head_dim}"
        )));
    }
    let h_s = w.heads.len();
    if h_s == 0 || w.out_weight.rows() != h_s * head_dim {
        return Err(shape_err("expand_mha", "head count does not match W_O"));
    }
    let source = w.out_weight.cols();
    copies_and_tail(source, target)?;
    let fan_in = |m: &Tensor<T>, rng: &mut RandStream| -> Result<Tensor<T>> {
        Ok(expand_fan_in(&m.transpose(), target, policy, rng)?.transpose())
    };
    let mut heads = Vec::with_capacity(target / head_dim);
    for t in 0..target / head_dim {
        let src = &w.heads[t % h_s];
        let mut h = src.clone();
        h.q_weight = fan_in(&src.q_weight, rng)?;
        h.k_weight = fan_in(&src.k_weight, rng)?;
        h.v_weight = fan_in(&src.v_weight, rng)?;
        heads.push(h);
    }
    let out_t = expand_fan_out(&w.out_weight.transpose(), target, out_rows, target, policy, rng)?;
    Ok(AttentionWeights {
        heads,
        out_weight: out_t.transpose(),
        out_bias: expand_bias(&w.out_bias, target, out_rows)?,
    })
}

/// Expands an MLP from width `D_S` to `target`, hidden units to `hidden`.
pub fn expand_mlp<T: Scalar>(
    w: &MlpWeights<T>,
    target: usize,
    hidden: usize,
    out_rows: RowMode,
    policy: &SplitPolicy,
    rng: &mut RandStream,
) -> Result<MlpWeights<T>> {
    let fc1 = expand_matrix_rows(&w.fc1_weight, hidden, RowMode::Circ)?;
    Ok(MlpWeights {
        fc1_weight: expand_fan_in(&fc1, target, policy, rng)?,
        fc1_bias: expand_bias(&w.fc1_bias, hidden, RowMode::Circ)?,
        fc2_weight: expand_fan_out(&w.fc2_weight, target, out_rows, hidden, policy, rng)?,
        fc2_bias: expand_bias(&w.fc2_bias, target, out_rows)?,
    })
}

/// Width expansion of one block under `spec`'s norm style.
pub fn expand_block_width<T: Scalar>(
    b: &BlockWeights<T>,
    spec: &ModelSpec,
    plan: &ExpansionPlan,
    rng: &mut RandStream,
) -> Result<BlockWeights<T>> {
    let target = plan.target_width;
    let layout = StreamLayout::for_style(spec.norm_style);
    let policy = SplitPolicy::new(plan.policy, plan.noise_scale);
    let hidden = plan.target_spec(spec).hidden();
    Ok(BlockWeights {
        ln1: expand_norm(&b.ln1, target, plan, rng)?,
        attn: expand_mha(&b.attn, spec.head_dim, target, layout.module_out, &policy, rng)?,
        ln2: expand_norm(&b.ln2, target, plan, rng)?,
        mlp: expand_mlp(&b.mlp, target, hidden, layout.module_out, &policy, rng)?,
    })
}

/// Expands every embedding row (tokens, positions, class token, patch
/// projection outputs) with the stream's vector expansion.
pub fn expand_embeddings<T: Scalar>(w: &Embedding<T>, target: usize, stream: RowMode) -> Result<Embedding<T>> {
    let mode: VectorExpandMode<T> = stream.into();
    Ok(match w {
        Embedding::Tokens { table, positions } => Embedding::Tokens {
            table: expand_last_dim(table, target, &mode)?,
            positions: expand_last_dim(positions, target, &mode)?,
        },
        Embedding::Patches {
            proj_weight,
            proj_bias,
            cls,
            positions,
        } => Embedding::Patches {
            proj_weight: expand_matrix_rows(proj_weight, target, stream)?,
            proj_bias: expand_bias(proj_bias, target, stream)?,
            cls: expand_vector(cls, target, &mode)?,
            positions: expand_last_dim(positions, target, &mode)?,
        },
    })
}

/// Expands the decoder. Untied weights get a column-random expansion; a
/// tied decoder instead rescales the (already expanded) final norm by
/// `1/⌊D_T/D_S⌋`, compensating for the tiled embedding table.
pub fn expand_decoder<T: Scalar>(
    w: &Decoder<T>,
    final_norm: Option<&mut NormParams<T>>,
    source: usize,
    target: usize,
    policy: &SplitPolicy,
    rng: &mut RandStream,
) -> Result<Decoder<T>> {
    let (k, _) = copies_and_tail(source, target)?;
    match &w.weight {
        Some(wd) => Ok(Decoder {
            weight: Some(expand_fan_in(wd, target, policy, rng)?),
            bias: w.bias.clone(),
        }),
        None => {
            let norm = final_norm.ok_or_else(|| Error::InvalidSpec("a tied decoder needs a final norm".into()))?;
            if k > 1 {
                let s = T::one() / from_usize::<T>(k);
                norm.mu = norm.mu.scale(s);
                norm.beta = norm.beta.as_ref().map(|b| b.scale(s));
            }
            Ok(w.clone())
        }
    }
}

/// Copies per source block: `⌊L_T/L_S⌋`, plus one for the earliest
/// `L_T mod L_S` blocks.
pub fn depth_multiplicities(source: usize, target: usize) -> Result<Vec<usize>> {
    if target < source {
        return Err(Error::Shrink { from: source, to: target });
    }
    if source == 0 {
        return if target == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::InvalidPlan("cannot grow a model without blocks".into()))
        };
    }
    let (q, r) = (target / source, target % source);
    Ok((0..source).map(|i| q + (i < r) as usize).collect())
}

fn zero_outputs<T: Scalar>(b: &mut BlockWeights<T>) {
    b.attn.out_weight = Tensor::zeros(b.attn.out_weight.shape());
    b.attn.out_bias = Tensor::zeros(b.attn.out_bias.shape());
    b.mlp.fc2_weight = Tensor::zeros(b.mlp.fc2_weight.shape());
    b.mlp.fc2_bias = Tensor::zeros(b.mlp.fc2_bias.shape());
}

fn zero_affine<T: Scalar>(n: &mut NormParams<T>) {
    n.mu = Tensor::zeros(n.mu.shape());
    if let Some(b) = &mut n.beta {
        *b = Tensor::zeros(b.shape());
    }
}

/// Fills a fan-out matrix stored with fan-out vectors along `axis` so each
/// group of replicas receives cancelling `+P, −P` pairs (an odd leftover and
/// singleton groups get zero).
fn cancelling_fan_out<T: Scalar>(
    base: &Tensor<T>,
    axis: Axis,
    source: usize,
    policy: &SplitPolicy,
    rng: &mut RandStream,
) -> Tensor<T> {
    let n = match axis {
        Axis::Row => base.rows(),
        Axis::Col => base.cols(),
    };
    let mut out = Tensor::zeros(base.shape());
    let mut put = |idx: usize, v: &[T]| {
        for (i, &x) in v.iter().enumerate() {
            match axis {
                Axis::Row => out.set(idx, i, x),
                Axis::Col => out.set(i, idx, x),
            }
        }
    };
    for j in 0..source.min(n) {
        let group: Vec<usize> = (j..n).step_by(source).collect();
        let vec_of = |idx: usize| match axis {
            Axis::Row => base.row(idx).to_vec(),
            Axis::Col => base.column(idx),
        };
        for pair in group.chunks_exact(2) {
            let p = policy.cancel_piece(&vec_of(pair[0]), rng);
            let neg: Vec<T> = p.iter().map(|&x| -x).collect();
            put(pair[0], &p);
            put(pair[1], &neg);
        }
    }
    out
}

/// Inserted block whose copies of each unit share fan-in and whose fan-out
/// weights cancel in pairs; its residual contribution is exactly zero.
fn type2_block<T: Scalar>(
    b: &BlockWeights<T>,
    source: &ModelSpec,
    policy: &SplitPolicy,
    rng: &mut RandStream,
) -> BlockWeights<T> {
    let h_s = source.heads();
    let hid_s = source.hidden();
    let mut out = b.clone();
    for t in 0..out.attn.heads.len() {
        out.attn.heads[t] = b.attn.heads[t % h_s].clone();
    }
    out.attn.out_weight = cancelling_fan_out(&b.attn.out_weight, Axis::Row, source.width, policy, rng);
    out.attn.out_bias = Tensor::zeros(b.attn.out_bias.shape());
    for r in hid_s..out.mlp.fc1_weight.rows() {
        let row = b.mlp.fc1_weight.row(r % hid_s).to_vec();
        out.mlp.fc1_weight.row_mut(r).copy_from_slice(&row);
        out.mlp.fc1_bias.data_mut()[r] = b.mlp.fc1_bias.data()[r % hid_s];
    }
    out.mlp.fc2_weight = cancelling_fan_out(&b.mlp.fc2_weight, Axis::Col, hid_s, policy, rng);
    out.mlp.fc2_bias = Tensor::zeros(b.mlp.fc2_bias.shape());
    out
}

/// Blocks standing in for one source block of multiplicity `m` (`m >= 1`),
/// given the width-expanded source block and the next one (if any).
fn depth_group<T: Scalar>(
    b: &BlockWeights<T>,
    next: Option<&BlockWeights<T>>,
    m: usize,
    source: &ModelSpec,
    plan: &ExpansionPlan,
    rng: &mut RandStream,
) -> Vec<BlockWeights<T>> {
    let mut out = vec![b.clone()];
    if m == 1 {
        return out;
    }
    let policy = SplitPolicy::new(plan.policy, plan.noise_scale);
    match source.norm_style {
        NormStyle::PostLn => {
            // LN(Module(x) + x) with a zero module is LN(x); standardising an
            // already standardised vector is a no-op when eps = 0, so the
            // original output affine can move to the last inserted block.
            let mut last = b.clone();
            zero_outputs(&mut last);
            last.ln1 = b.ln1.identity_affine();
            out[0].ln2 = b.ln2.identity_affine();
            for _ in 1..m - 1 {
                let mut mid = last.clone();
                mid.ln2 = b.ln2.identity_affine();
                out.push(mid);
            }
            out.push(last);
        }
        NormStyle::PostResNorm => {
            for _ in 1..m {
                let mut c = b.clone();
                zero_affine(&mut c.ln1);
                zero_affine(&mut c.ln2);
                out.push(c);
            }
        }
        NormStyle::PreLn | NormStyle::RmsPre => {
            for _ in 1..m {
                out.push(match plan.depth_mode {
                    DepthMode::Type1 | DepthMode::Type1Aki => {
                        let mut c = match plan.depth_mode {
                            DepthMode::Type1Aki => next.unwrap_or(b).clone(),
                            _ => b.clone(),
                        };
                        zero_outputs(&mut c);
                        c
                    }
                    DepthMode::Type2 => type2_block(b, source, &policy, rng),
                });
            }
        }
    }
    out
}

/// Inserts blocks so `blocks` (already at target width) reaches `target_depth`.
pub fn expand_depth<T: Scalar>(
    blocks: &[BlockWeights<T>],
    source: &ModelSpec,
    plan: &ExpansionPlan,
) -> Result<Vec<BlockWeights<T>>> {
    let mult = depth_multiplicities(blocks.len(), plan.target_depth)?;
    let groups: Vec<Vec<BlockWeights<T>>> = (0..blocks.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = RandStream::new(plan.seed, Purpose::BlockDepth, i as u64);
            depth_group(&blocks[i], blocks.get(i + 1), mult[i], source, plan, &mut rng)
        })
        .collect();
    Ok(groups.into_iter().flatten().collect())
}

/// Full LEMON expansion: width, then depth.
///
/// Returns the expanded weights, their spec and the duplicate map of
/// replicated units in the blocks that descend directly from source blocks.
pub fn expand_model<T: Scalar>(
    w: &ModelWeights<T>,
    spec: &ModelSpec,
    plan: &ExpansionPlan,
) -> Result<(ModelWeights<T>, ModelSpec, DuplicateMap)> {
    plan.validate(spec)?;
    w.check(spec)?;
    let target = plan.target_width;
    let layout = StreamLayout::for_style(spec.norm_style);
    let policy = SplitPolicy::new(plan.policy, plan.noise_scale);

    let wide: Vec<BlockWeights<T>> = w
        .blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = RandStream::new(plan.seed, Purpose::BlockWidth, i as u64);
            expand_block_width(b, spec, plan, &mut rng)
        })
        .collect::<Result<_>>()?;
    let blocks = expand_depth(&wide, spec, plan)?;

    let embedding = expand_embeddings(&w.embedding, target, layout.stream)?;
    let mut final_norm = match &w.final_norm {
        Some(n) => Some(expand_norm(
            n,
            target,
            plan,
            &mut RandStream::new(plan.seed, Purpose::FinalNorm, 0),
        )?),
        None => None,
    };
    let decoder = expand_decoder(
        &w.decoder,
        final_norm.as_mut(),
        spec.width,
        target,
        &policy,
        &mut RandStream::new(plan.seed, Purpose::Decoder, 0),
    )?;

    let big_spec = plan.target_spec(spec);
    let out = ModelWeights {
        embedding,
        blocks,
        final_norm,
        decoder,
    };
    out.check(&big_spec)?;
    let map = duplicate_map(spec, &big_spec, plan)?;
    Ok((out, big_spec, map))
}

/// Groups of replicated units in the expanded blocks that descend directly
/// from a source block.
pub fn duplicate_map(small: &ModelSpec, big: &ModelSpec, plan: &ExpansionPlan) -> Result<DuplicateMap> {
    let mult = depth_multiplicities(small.depth, big.depth)?;
    let head_groups = replica_groups(small.width, big.width);
    let unit_groups = replica_groups(small.hidden(), big.hidden());
    let mut groups = Vec::new();
    let mut pos = 0;
    for m in mult {
        for g in &head_groups {
            groups.push(DuplicateGroup {
                tensor: format!("blocks.{pos}.attn.out.weight"),
                axis: Axis::Row,
                indices: g.clone(),
            });
        }
        for g in &unit_groups {
            groups.push(DuplicateGroup {
                tensor: format!("blocks.{pos}.mlp.fc2.weight"),
                axis: Axis::Col,
                indices: g.clone(),
            });
        }
        pos += m;
    }
    Ok(DuplicateMap {
        policy: Some(plan.policy),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{block_forward, mha_forward, mlp_forward, InputSpec};
    use crate::tensor::Activation;

    fn spec(style: NormStyle, width: usize) -> ModelSpec {
        ModelSpec {
            norm_style: style,
            depth: 2,
            width,
            head_dim: 2,
            mlp_ratio: 1.5,
            vocab_or_classes: 7,
            tied_decoder: false,
            activation: Activation::Gelu,
            eps: 1e-5,
            input: InputSpec::Tokens { max_len: 5 },
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        RandStream::new(seed, Purpose::Toy, 7).normal_tensor(shape, 1.0)
    }

    fn lemon() -> SplitPolicy {
        SplitPolicy::new(Policy::Lemon, 0.02)
    }

    #[test]
    fn splits_sum_to_source() {
        let v = [1.5f64, -2.0, 0.25];
        let mut rng = RandStream::new(1, Purpose::Toy, 0);
        for p in [Policy::Lemon, Policy::Net2netEqual, Policy::ZeroTail] {
            for m in 1..5 {
                let pieces = SplitPolicy::new(p, 0.02).split(&v, m, &mut rng);
                assert_eq!(pieces.len(), m);
                for i in 0..3 {
                    let s = exact_sum(pieces.iter().map(|q| q[i]));
                    assert!((s - v[i]).abs() <= 1e-15, "{p:?} m={m}");
                }
            }
        }
        let eq = SplitPolicy::new(Policy::Net2netEqual, 0.02).split(&v, 2, &mut rng);
        assert_eq!(eq[0], eq[1]);
        let le = lemon().split(&v, 3, &mut rng);
        assert!(le[0] != le[1] && le[1] != le[2] && le[0] != le[2]);
    }

    #[test]
    fn mha_two_to_three_heads_is_lossless() {
        let s = spec(NormStyle::PreLn, 4);
        let w = ModelWeights::<f64>::random(&s, 2).unwrap().blocks.remove(0).attn;
        let x = rand(&[3, 4], 1);
        let mut rng = RandStream::new(3, Purpose::Toy, 1);
        let big = expand_mha(&w, 2, 6, RowMode::Avg, &lemon(), &mut rng).unwrap();
        assert_eq!(big.heads.len(), 3);
        let xz = expand_last_dim(&x, 6, &VectorExpandMode::Zero).unwrap();
        let want = expand_last_dim(&mha_forward(&x, &w, 2).unwrap(), 6, &VectorExpandMode::Avg).unwrap();
        let got = mha_forward(&xz, &big, 2).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
    }

    #[test]
    fn identity_width_leaves_weights_unchanged() {
        let s = spec(NormStyle::PreLn, 4);
        let w = ModelWeights::<f64>::random(&s, 2).unwrap();
        let mut rng = RandStream::new(3, Purpose::Toy, 1);
        let b = &w.blocks[0];
        assert_eq!(&expand_mha(&b.attn, 2, 4, RowMode::Avg, &lemon(), &mut rng).unwrap(), &b.attn);
        assert_eq!(&expand_mlp(&b.mlp, 4, s.hidden(), RowMode::Avg, &lemon(), &mut rng).unwrap(), &b.mlp);
        let (big, _, map) = expand_model(&w, &s, &ExpansionPlan::new(4, 2)).unwrap();
        assert_eq!(big, w);
        assert!(map.groups.is_empty());
    }

    #[test]
    fn net2net_doubling_gives_equal_fan_out_blocks() {
        let s = spec(NormStyle::PreLn, 4);
        let w = ModelWeights::<f64>::random(&s, 2).unwrap().blocks.remove(0).attn;
        let mut rng = RandStream::new(3, Purpose::Toy, 1);
        let eq = SplitPolicy::new(Policy::Net2netEqual, 0.02);
        let big = expand_mha(&w, 2, 8, RowMode::Avg, &eq, &mut rng).unwrap();
        for r in 0..4 {
            assert_eq!(big.out_weight.row(r), big.out_weight.row(r + 4));
        }
    }

    #[test]
    fn mlp_four_to_six_is_lossless_and_lemon_distinct() {
        let s = spec(NormStyle::PreLn, 4);
        let w = ModelWeights::<f64>::random(&s, 5).unwrap().blocks.remove(0).mlp;
        let x = rand(&[3, 4], 2);
        let mut rng = RandStream::new(3, Purpose::Toy, 1);
        let big = expand_mlp(&w, 6, 9, RowMode::Avg, &lemon(), &mut rng).unwrap();
        let xz = expand_last_dim(&x, 6, &VectorExpandMode::Zero).unwrap();
        let want = expand_last_dim(&mlp_forward(&x, &w, Activation::Gelu).unwrap(), 6, &VectorExpandMode::Avg).unwrap();
        let got = mlp_forward(&xz, &big, Activation::Gelu).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
        for j in 0..3 {
            assert_ne!(big.fc2_weight.column(j), big.fc2_weight.column(j + 6));
        }
    }

    #[test]
    fn block_width_is_lossless_on_the_stream() {
        for style in [NormStyle::PreLn, NormStyle::PostResNorm, NormStyle::RmsPre] {
            let s = spec(style, 4);
            let b = ModelWeights::<f64>::random(&s, 5).unwrap().blocks.remove(0);
            let plan = ExpansionPlan::new(6, 2);
            let big = expand_block_width(&b, &s, &plan, &mut RandStream::new(0, Purpose::Toy, 0)).unwrap();
            let mode: VectorExpandMode<f64> = StreamLayout::for_style(style).stream.into();
            let x = rand(&[4, 4], 3);
            let xs = expand_last_dim(&x, 6, &mode).unwrap();
            let want = expand_last_dim(&block_forward(&x, &b, &s).unwrap(), 6, &mode).unwrap();
            let got = block_forward(&xs, &big, &plan.target_spec(&s)).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-10, "{style:?}");
        }
    }

    #[test]
    fn divisible_doubling_tiles_norm_weights() {
        let s = spec(NormStyle::PreLn, 4);
        let b = ModelWeights::<f64>::random(&s, 5).unwrap().blocks.remove(0);
        let big = expand_block_width(&b, &s, &ExpansionPlan::new(8, 2), &mut RandStream::new(0, Purpose::Toy, 0)).unwrap();
        let tiled: Vec<f64> = b.ln1.mu.data().iter().chain(b.ln1.mu.data()).copied().collect();
        assert_eq!(big.ln1.mu.data(), &tiled[..]);
        assert_eq!(big.ln1.eps, b.ln1.eps);
    }

    #[test]
    fn embeddings_use_the_stream_expansion() {
        let e = Embedding::Tokens {
            table: Tensor::from_rows(&[vec![1.0f64, 3.0]]),
            positions: Tensor::from_rows(&[vec![0.0f64, 0.0]]),
        };
        let Embedding::Tokens { table, .. } = expand_embeddings(&e, 3, RowMode::Avg).unwrap() else {
            unreachable!()
        };
        assert_eq!(table.data(), &[1.0, 3.0, 2.0]);
    }

    #[test]
    fn multiplicities_favour_early_blocks() {
        assert_eq!(depth_multiplicities(2, 3).unwrap(), vec![2, 1]);
        assert_eq!(depth_multiplicities(3, 5).unwrap(), vec![2, 2, 1]);
        assert_eq!(depth_multiplicities(6, 12).unwrap(), vec![2; 6]);
        assert!(matches!(depth_multiplicities(3, 2), Err(Error::Shrink { .. })));
    }

    #[test]
    fn plan_rejections() {
        let s = spec(NormStyle::PreLn, 4);
        assert!(matches!(ExpansionPlan::new(5, 2).validate(&s), Err(Error::InvalidPlan(_))));
        assert!(matches!(ExpansionPlan::new(2, 2).validate(&s), Err(Error::Shrink { .. })));
        let post = spec(NormStyle::PostLn, 4);
        assert!(ExpansionPlan::new(6, 2).validate(&post).is_err());
        assert!(ExpansionPlan::new(8, 4).validate(&post).is_err());
        let post0 = ModelSpec { eps: 0.0, ..post };
        assert!(ExpansionPlan::new(8, 4).validate(&post0).is_ok());
    }

    #[test]
    fn plan_json_defaults() {
        let p: ExpansionPlan = serde_json::from_str(r#"{"target_width": 8, "target_depth": 4}"#).unwrap();
        assert_eq!(p, ExpansionPlan::new(8, 4));
        let q: ExpansionPlan =
            serde_json::from_str(r#"{"target_width": 8, "target_depth": 4, "policy": "net2net_equal", "depth_mode": "type2"}"#)
                .unwrap();
        assert_eq!((q.policy, q.depth_mode), (Policy::Net2netEqual, DepthMode::Type2));
    }
}
