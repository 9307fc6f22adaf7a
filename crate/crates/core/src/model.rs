//! Forward-only reference Transformer used as the ground truth for expansion
//! checks.
//!
//! Attention is bidirectional. Weight layout follows `y = x·W + b` for the
//! attention projections (`W^Q/K/V: [D, d]`, `W^O: [H·d, D]`) and the
//! `[out, in]` convention for the MLP and decoder (`fc1: [hidden, D]`,
//! `fc2: [D, hidden]`, `dec: [classes, D]`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{Purpose, RandStream};
use crate::scalar::Scalar;
use crate::tensor::{
    activation, add, add_bias, layernorm, matmul, matmul_t, rmsnorm, softmax_rows, Activation,
    Tensor,
};

/// Placement of normalisation relative to the residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// `x + Module(LN(x))`, final LayerNorm before the decoder.
    PreLn,
    /// `x + LN(Module(x))`, no final norm.
    PostResNorm,
    /// `LN(Module(x) + x)`, no final norm.
    PostLn,
    /// `x + Module(RMS(x))`, final RMSNorm before the decoder.
    RmsPre,
}

impl NormStyle {
    pub fn has_final_norm(self) -> bool {
        matches!(self, NormStyle::PreLn | NormStyle::RmsPre)
    }

    pub fn is_rms(self) -> bool {
        self == NormStyle::RmsPre
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Token ids; the embedding table has `vocab_or_classes` rows.
    Tokens { max_len: usize },
    /// Pre-flattened patches `[num_patches, patch_dim]`, plus a class token.
    Patches { num_patches: usize, patch_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub norm_style: NormStyle,
    pub depth: usize,
    pub width: usize,
    pub head_dim: usize,
    pub mlp_ratio: f64,
    pub vocab_or_classes: usize,
    pub tied_decoder: bool,
    pub activation: Activation,
    pub eps: f64,
    pub input: InputSpec,
}

impl ModelSpec {
    pub fn heads(&self) -> usize {
        self.width / self.head_dim
    }

    /// MLP hidden extent, `round(mlp_ratio · width)`.
    pub fn hidden(&self) -> usize {
        (self.mlp_ratio * self.width as f64).round() as usize
    }

    /// Number of positional embedding rows.
    pub fn positions(&self) -> usize {
        match self.input {
            InputSpec::Tokens { max_len } => max_len,
            InputSpec::Patches { num_patches, .. } => num_patches + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.head_dim == 0 {
            return bad("width and head_dim must be positive".into());
        }
        if !self.width.is_multiple_of(self.head_dim) {
            return bad(format!(
                "width {} is not a multiple of head_dim {}",
                self.width, self.head_dim
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return bad(format!("mlp_ratio {} gives no hidden units", self.mlp_ratio));
        }
        if self.vocab_or_classes == 0 {
            return bad("vocab_or_classes must be positive".into());
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad(format!("eps {} must be finite and non-negative", self.eps));
        }
        match self.input {
            InputSpec::Tokens { max_len: 0 } => {
                return bad("max_len must be positive".into())
            }
            InputSpec::Patches {
                num_patches,
                patch_dim,
            } if num_patches == 0 || patch_dim == 0 => {
                return bad("patch grid must be non-empty".into())
            }
            _ => {}
        }
        if self.tied_decoder {
            if !matches!(self.input, InputSpec::Tokens { .. }) {
                return bad("a tied decoder needs token-embedding input".into());
            }
            if !self.norm_style.has_final_norm() {
                return bad(format!(
                    "a tied decoder needs a final norm; {:?} has none",
                    self.norm_style
                ));
            }
        }
        Ok(())
    }

    /// True when both specs accept the same inputs and produce the same
    /// output shape.
    pub fn io_compatible(&self, other: &ModelSpec) -> bool {
        self.vocab_or_classes == other.vocab_or_classes && self.input == other.input
    }
}

/// Normalisation layer parameters. `beta` is absent for RMSNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub mu: Tensor<T>,
    pub beta: Option<Tensor<T>>,
    pub eps: T,
}

impl<T: Scalar> NormParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.beta {
            Some(beta) => layernorm(x, &self.mu, beta, self.eps),
            None => rmsnorm(x, &self.mu, self.eps),
        }
    }

    pub fn width(&self) -> usize {
        self.mu.len()
    }

    /// Scale `1`, shift `0`, same epsilon and kind.
    pub fn identity_affine(&self) -> Self {
        Self {
            mu: Tensor::filled(&[self.width()], T::one()),
            beta: self.beta.as_ref().map(|b| Tensor::zeros(b.shape())),
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub heads: Vec<HeadWeights<T>>,
    /// `[H·d, D]`.
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T> {
    /// `[hidden, D]`.
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    /// `[D, hidden]`.
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1: NormParams<T>,
    pub attn: AttentionWeights<T>,
    pub ln2: NormParams<T>,
    pub mlp: MlpWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedding<T> {
    Tokens {
        /// `[vocab, D]`.
        table: Tensor<T>,
        /// `[max_len, D]`.
        positions: Tensor<T>,
    },
    Patches {
        /// `[D, patch_dim]`.
        proj_weight: Tensor<T>,
        proj_bias: Tensor<T>,
        cls: Tensor<T>,
        /// `[num_patches + 1, D]`, row 0 belongs to the class token.
        positions: Tensor<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    /// `[classes, D]`; `None` when tied to the token table.
    pub weight: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub embedding: Embedding<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm: Option<NormParams<T>>,
    pub decoder: Decoder<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput<T> {
    Tokens(Vec<usize>),
    Patches(Tensor<T>),
}

pub fn mha_forward<T: Scalar>(x: &Tensor<T>, w: &AttentionWeights<T>, head_dim: usize) -> Result<Tensor<T>> {
    if x.ndim() != 2 || w.out_weight.rows() != w.heads.len() * head_dim {
        return Err(shape_err(
            "mha_forward",
            format!("input {:?}, {} heads of {head_dim}", x.shape(), w.heads.len()),
        ));
    }
    let scale = T::one() / T::from_usize(head_dim).expect("head_dim").sqrt();
    let mut outs = Vec::with_capacity(w.heads.len());
    for h in &w.heads {
        let q = add_bias(&matmul(x, &h.q_weight)?, &h.q_bias)?;
        let k = add_bias(&matmul(x, &h.k_weight)?, &h.k_bias)?;
        let v = add_bias(&matmul(x, &h.v_weight)?, &h.v_bias)?;
        let scores = matmul_t(&q, &k)?.scale(scale);
        outs.push(matmul(&softmax_rows(&scores)?, &v)?);
    }
    let concat = Tensor::hcat(&outs.iter().collect::<Vec<_>>())?;
    add_bias(&matmul(&concat, &w.out_weight)?, &w.out_bias)
}

/// Post-activation hidden units, `[E, hidden]`.
pub fn mlp_hidden<T: Scalar>(x: &Tensor<T>, w: &MlpWeights<T>, act: Activation) -> Result<Tensor<T>> {
    activation(&add_bias(&matmul_t(x, &w.fc1_weight)?, &w.fc1_bias)?, act)
}

pub fn mlp_forward<T: Scalar>(x: &Tensor<T>, w: &MlpWeights<T>, act: Activation) -> Result<Tensor<T>> {
    let h = mlp_hidden(x, w, act)?;
    add_bias(&matmul_t(&h, &w.fc2_weight)?, &w.fc2_bias)
}

pub fn block_forward<T: Scalar>(x: &Tensor<T>, w: &BlockWeights<T>, spec: &ModelSpec) -> Result<Tensor<T>> {
    let d = spec.head_dim;
    let act = spec.activation;
    match spec.norm_style {
        NormStyle::PreLn | NormStyle::RmsPre => {
            let x = add(x, &mha_forward(&w.ln1.forward(x)?, &w.attn, d)?)?;
            add(&x, &mlp_forward(&w.ln2.forward(&x)?, &w.mlp, act)?)
        }
        NormStyle::PostLn => {
            let x = w.ln1.forward(&add(&mha_forward(x, &w.attn, d)?, x)?)?;
            w.ln2.forward(&add(&mlp_forward(&x, &w.mlp, act)?, &x)?)
        }
        NormStyle::PostResNorm => {
            let x = add(x, &w.ln1.forward(&mha_forward(x, &w.attn, d)?)?)?;
            add(&x, &w.ln2.forward(&mlp_forward(&x, &w.mlp, act)?)?)
        }
    }
}

/// Embedded input sequence `[E, D]` (class token first for patch input).
pub fn embed<T: Scalar>(input: &ModelInput<T>, w: &Embedding<T>, spec: &ModelSpec) -> Result<Tensor<T>> {
    match (input, w) {
        (ModelInput::Tokens(ids), Embedding::Tokens { table, positions }) => {
            if ids.is_empty() || ids.len() > positions.rows() {
                return Err(shape_err(
                    "embed",
                    format!("{} tokens for {} positions", ids.len(), positions.rows()),
                ));
            }
            let vocab = table.rows();
            let mut rows = Vec::with_capacity(ids.len());
            for (p, &id) in ids.iter().enumerate() {
                if id >= vocab {
                    return Err(Error::TokenOutOfRange { token: id, vocab });
                }
                rows.push(
                    table
                        .row(id)
                        .iter()
                        .zip(positions.row(p))
                        .map(|(&a, &b)| a + b)
                        .collect::<Vec<T>>(),
                );
            }
            Ok(Tensor::from_rows(&rows))
        }
        (
            ModelInput::Patches(grid),
            Embedding::Patches {
                proj_weight,
                proj_bias,
                cls,
                positions,
            },
        ) => {
            if let InputSpec::Patches {
                num_patches,
                patch_dim,
            } = spec.input
            {
                if grid.shape() != [num_patches, patch_dim] {
                    return Err(shape_err(
                        "embed",
                        format!("patch grid {:?}, expected [{num_patches}, {patch_dim}]", grid.shape()),
                    ));
                }
            }
            let proj = add_bias(&matmul_t(grid, proj_weight)?, proj_bias)?;
            let cls_row = Tensor::new(vec![1, cls.len()], cls.data().to_vec())?;
            let seq = Tensor::vcat(&[&cls_row, &proj])?;
            add(&seq, positions)
        }
        _ => Err(shape_err("embed", "input kind does not match the embedding")),
    }
}

/// Logits: `[E, vocab]` for token input, `[1, classes]` (class token) for patches.
pub fn model_forward<T: Scalar>(input: &ModelInput<T>, w: &ModelWeights<T>, spec: &ModelSpec) -> Result<Tensor<T>> {
    let mut x = embed(input, &w.embedding, spec)?;
    for b in &w.blocks {
        x = block_forward(&x, b, spec)?;
    }
    if let Some(n) = &w.final_norm {
        x = n.forward(&x)?;
    }
    if matches!(input, ModelInput::Patches(_)) {
        x = x.slice_rows(0, 1);
    }
    let dec = match (&w.decoder.weight, &w.embedding) {
        (Some(wd), _) => wd,
        (None, Embedding::Tokens { table, .. }) => table,
        (None, _) => return Err(shape_err("model_forward", "tied decoder without token table")),
    };
    add_bias(&matmul_t(&x, dec)?, &w.decoder.bias)
}

fn expect_shape<T: Scalar>(name: &str, t: &Tensor<T>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::InconsistentWeights(format!(
            "{name}: shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> NormParams<T> {
    fn check(&self, name: &str, d: usize, rms: bool) -> Result<()> {
        expect_shape(&format!("{name}.mu"), &self.mu, &[d])?;
        match (&self.beta, rms) {
            (Some(b), false) => expect_shape(&format!("{name}.beta"), b, &[d]),
            (None, true) => Ok(()),
            _ => Err(Error::InconsistentWeights(format!("{name}: norm kind mismatch"))),
        }
    }
}

impl<T: Scalar> BlockWeights<T> {
    /// Checks extents against width `d_model`, head size and hidden extent.
    pub fn check(&self, i: usize, d_model: usize, head_dim: usize, hidden: usize, rms: bool) -> Result<()> {
        let p = format!("blocks.{i}");
        self.ln1.check(&format!("{p}.ln1"), d_model, rms)?;
        self.ln2.check(&format!("{p}.ln2"), d_model, rms)?;
        let h = d_model / head_dim;
        if self.attn.heads.len() != h {
            return Err(Error::InconsistentWeights(format!(
                "{p}: {} heads, expected {h}",
                self.attn.heads.len()
            )));
        }
        for (j, hw) in self.attn.heads.iter().enumerate() {
            for (n, w, b) in [
                ("q", &hw.q_weight, &hw.q_bias),
                ("k", &hw.k_weight, &hw.k_bias),
                ("v", &hw.v_weight, &hw.v_bias),
            ] {
                expect_shape(&format!("{p}.attn.heads.{j}.{n}.weight"), w, &[d_model, head_dim])?;
                expect_shape(&format!("{p}.attn.heads.{j}.{n}.bias"), b, &[head_dim])?;
            }
        }
        expect_shape(&format!("{p}.attn.out.weight"), &self.attn.out_weight, &[d_model, d_model])?;
        expect_shape(&format!("{p}.attn.out.bias"), &self.attn.out_bias, &[d_model])?;
        expect_shape(&format!("{p}.mlp.fc1.weight"), &self.mlp.fc1_weight, &[hidden, d_model])?;
        expect_shape(&format!("{p}.mlp.fc1.bias"), &self.mlp.fc1_bias, &[hidden])?;
        expect_shape(&format!("{p}.mlp.fc2.weight"), &self.mlp.fc2_weight, &[d_model, hidden])?;
        expect_shape(&format!("{p}.mlp.fc2.bias"), &self.mlp.fc2_bias, &[d_model])
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Verifies every extent against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let d = spec.width;
        let rms = spec.norm_style.is_rms();
        match (&self.embedding, &spec.input) {
            (Embedding::Tokens { table, positions }, InputSpec::Tokens { max_len }) => {
                expect_shape("embed.tokens", table, &[spec.vocab_or_classes, d])?;
                expect_shape("embed.positions", positions, &[*max_len, d])?;
            }
            (
                Embedding::Patches {
                    proj_weight,
                    proj_bias,
                    cls,
                    positions,
                },
                InputSpec::Patches {
                    num_patches,
                    patch_dim,
                },
            ) => {
                expect_shape("embed.patch.weight", proj_weight, &[d, *patch_dim])?;
                expect_shape("embed.patch.bias", proj_bias, &[d])?;
                expect_shape("embed.cls", cls, &[d])?;
                expect_shape("embed.positions", positions, &[num_patches + 1, d])?;
            }
            _ => return Err(Error::InconsistentWeights("embedding kind does not match input".into())),
        }
        if self.blocks.len() != spec.depth {
            return Err(Error::InconsistentWeights(format!(
                "{} blocks, expected {}",
                self.blocks.len(),
                spec.depth
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.check(i, d, spec.head_dim, spec.hidden(), rms)?;
        }
        match (&self.final_norm, spec.norm_style.has_final_norm()) {
            (Some(n), true) => n.check("final_norm", d, rms)?,
            (None, false) => {}
            _ => return Err(Error::InconsistentWeights("final norm presence mismatch".into())),
        }
        match (&self.decoder.weight, spec.tied_decoder) {
            (Some(w), false) => expect_shape("decoder.weight", w, &[spec.vocab_or_classes, d])?,
            (None, true) => {}
            _ => return Err(Error::InconsistentWeights("decoder tying mismatch".into())),
        }
        expect_shape("decoder.bias", &self.decoder.bias, &[spec.vocab_or_classes])
    }

    /// Flattens into `(name, tensor)` pairs. Norm epsilons are stored as
    /// one-element tensors named `<norm>.eps`.
    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut push = |n: String, t: &Tensor<T>| out.push((n, t.clone()));
        match &self.embedding {
            Embedding::Tokens { table, positions } => {
                push("embed.tokens".into(), table);
                push("embed.positions".into(), positions);
            }
            Embedding::Patches {
                proj_weight,
                proj_bias,
                cls,
                positions,
            } => {
                push("embed.patch.weight".into(), proj_weight);
                push("embed.patch.bias".into(), proj_bias);
                push("embed.cls".into(), cls);
                push("embed.positions".into(), positions);
            }
        }
        let norm = |push: &mut dyn FnMut(String, &Tensor<T>), p: &str, n: &NormParams<T>| {
            push(format!("{p}.mu"), &n.mu);
            if let Some(b) = &n.beta {
                push(format!("{p}.beta"), b);
            }
            push(format!("{p}.eps"), &Tensor::vector(vec![n.eps]));
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            norm(&mut push, &format!("{p}.ln1"), &b.ln1);
            for (j, h) in b.attn.heads.iter().enumerate() {
                let hp = format!("{p}.attn.heads.{j}");
                push(format!("{hp}.q.weight"), &h.q_weight);
                push(format!("{hp}.q.bias"), &h.q_bias);
                push(format!("{hp}.k.weight"), &h.k_weight);
                push(format!("{hp}.k.bias"), &h.k_bias);
                push(format!("{hp}.v.weight"), &h.v_weight);
                push(format!("{hp}.v.bias"), &h.v_bias);
            }
            push(format!("{p}.attn.out.weight"), &b.attn.out_weight);
            push(format!("{p}.attn.out.bias"), &b.attn.out_bias);
            norm(&mut push, &format!("{p}.ln2"), &b.ln2);
            push(format!("{p}.mlp.fc1.weight"), &b.mlp.fc1_weight);
            push(format!("{p}.mlp.fc1.bias"), &b.mlp.fc1_bias);
            push(format!("{p}.mlp.fc2.weight"), &b.mlp.fc2_weight);
            push(format!("{p}.mlp.fc2.bias"), &b.mlp.fc2_bias);
        }
        if let Some(n) = &self.final_norm {
            norm(&mut push, "final_norm", n);
        }
        if let Some(w) = &self.decoder.weight {
            push("decoder.weight".into(), w);
        }
        push("decoder.bias".into(), &self.decoder.bias);
        out
    }

    /// Inverse of [`ModelWeights::to_named`]; extents are checked against `spec`.
    pub fn from_named(spec: &ModelSpec, mut named: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let mut take = |n: &str| -> Result<Tensor<T>> {
            named
                .remove(n)
                .ok_or_else(|| Error::InconsistentWeights(format!("missing tensor {n}")))
        };
        let rms = spec.norm_style.is_rms();
        let embedding = match spec.input {
            InputSpec::Tokens { .. } => Embedding::Tokens {
                table: take("embed.tokens")?,
                positions: take("embed.positions")?,
            },
            InputSpec::Patches { .. } => Embedding::Patches {
                proj_weight: take("embed.patch.weight")?,
                proj_bias: take("embed.patch.bias")?,
                cls: take("embed.cls")?,
                positions: take("embed.positions")?,
            },
        };
        fn norm<T: Scalar>(
            take: &mut dyn FnMut(&str) -> Result<Tensor<T>>,
            p: &str,
            rms: bool,
        ) -> Result<NormParams<T>> {
            let mu = take(&format!("{p}.mu"))?;
            let beta = if rms { None } else { Some(take(&format!("{p}.beta"))?) };
            let eps = take(&format!("{p}.eps"))?;
            if eps.len() != 1 {
                return Err(Error::InconsistentWeights(format!("{p}.eps must hold one value")));
            }
            Ok(NormParams {
                mu,
                beta,
                eps: eps.data()[0],
            })
        }
        let mut blocks = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let p = format!("blocks.{i}");
            let ln1 = norm(&mut take, &format!("{p}.ln1"), rms)?;
            let mut heads = Vec::with_capacity(spec.heads());
            for j in 0..spec.heads() {
                let hp = format!("{p}.attn.heads.{j}");
                heads.push(HeadWeights {
                    q_weight: take(&format!("{hp}.q.weight"))?,
                    q_bias: take(&format!("{hp}.q.bias"))?,
                    k_weight: take(&format!("{hp}.k.weight"))?,
                    k_bias: take(&format!("{hp}.k.bias"))?,
                    v_weight: take(&format!("{hp}.v.weight"))?,
                    v_bias: take(&format!("{hp}.v.bias"))?,
                });
            }
            let attn = AttentionWeights {
                heads,
                out_weight: take(&format!("{p}.attn.out.weight"))?,
                out_bias: take(&format!("{p}.attn.out.bias"))?,
            };
            let ln2 = norm(&mut take, &format!("{p}.ln2"), rms)?;
            let mlp = MlpWeights {
                fc1_weight: take(&format!("{p}.mlp.fc1.weight"))?,
                fc1_bias: take(&format!("{p}.mlp.fc1.bias"))?,
                fc2_weight: take(&format!("{p}.mlp.fc2.weight"))?,
                fc2_bias: take(&format!("{p}.mlp.fc2.bias"))?,
            };
            blocks.push(BlockWeights { ln1, attn, ln2, mlp });
        }
        let final_norm = if spec.norm_style.has_final_norm() {
            Some(norm(&mut take, "final_norm", rms)?)
        } else {
            None
        };
        let decoder = Decoder {
            weight: if spec.tied_decoder {
                None
            } else {
                Some(take("decoder.weight")?)
            },
            bias: take("decoder.bias")?,
        };
        if let Some(extra) = named.keys().next() {
            return Err(Error::InconsistentWeights(format!("unexpected tensor {extra}")));
        }
        let w = Self {
            embedding,
            blocks,
            final_norm,
            decoder,
        };
        w.check(spec)?;
        Ok(w)
    }

    /// Deterministic random weights for `spec`.
    ///
    /// Linear weights are `N(0, 1/fan_in)`, biases `N(0, 0.1²)`, norm scales
    /// `1 + N(0, 0.1²)`, norm shifts `N(0, 0.1²)` and embeddings `N(0, 1)`.
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.width;
        let hd = spec.head_dim;
        let hidden = spec.hidden();
        let rms = spec.norm_style.is_rms();
        let eps = T::from_f64_lossy(spec.eps);
        let lin = |rng: &mut RandStream, shape: &[usize], fan_in: usize| {
            rng.normal_tensor::<T>(shape, 1.0 / (fan_in as f64).sqrt())
        };
        let norm = |rng: &mut RandStream| NormParams {
            mu: rng.normal_tensor::<T>(&[d], 0.1).map(|v| v + T::one()),
            beta: if rms { None } else { Some(rng.normal_tensor(&[d], 0.1)) },
            eps,
        };

        let mut rng = RandStream::new(seed, Purpose::Init, 0);
        let embedding = match spec.input {
            InputSpec::Tokens { max_len } => Embedding::Tokens {
                table: rng.normal_tensor(&[spec.vocab_or_classes, d], 1.0),
                positions: rng.normal_tensor(&[max_len, d], 1.0),
            },
            InputSpec::Patches {
                num_patches,
                patch_dim,
            } => Embedding::Patches {
                proj_weight: lin(&mut rng, &[d, patch_dim], patch_dim),
                proj_bias: rng.normal_tensor(&[d], 0.1),
                cls: rng.normal_tensor(&[d], 1.0),
                positions: rng.normal_tensor(&[num_patches + 1, d], 1.0),
            },
        };
        let blocks = (0..spec.depth)
            .map(|i| {
                let mut rng = RandStream::new(seed, Purpose::Init, 1 + i as u64);
                let ln1 = norm(&mut rng);
                let heads = (0..spec.heads())
                    .map(|_| HeadWeights {
                        q_weight: lin(&mut rng, &[d, hd], d),
                        q_bias: rng.normal_tensor(&[hd], 0.1),
                        k_weight: lin(&mut rng, &[d, hd], d),
                        k_bias: rng.normal_tensor(&[hd], 0.1),
                        v_weight: lin(&mut rng, &[d, hd], d),
                        v_bias: rng.normal_tensor(&[hd], 0.1),
                    })
                    .collect();
                let attn = AttentionWeights {
                    heads,
                    out_weight: lin(&mut rng, &[d, d], d),
                    out_bias: rng.normal_tensor(&[d], 0.1),
                };
                let ln2 = norm(&mut rng);
                let mlp = MlpWeights {
                    fc1_weight: lin(&mut rng, &[hidden, d], d),
                    fc1_bias: rng.normal_tensor(&[hidden], 0.1),
                    fc2_weight: lin(&mut rng, &[d, hidden], hidden),
                    fc2_bias: rng.normal_tensor(&[d], 0.1),
                };
                BlockWeights { ln1, attn, ln2, mlp }
            })
            .collect();
        let mut rng = RandStream::new(seed, Purpose::Init, u32::MAX as u64);
        let final_norm = spec.norm_style.has_final_norm().then(|| norm(&mut rng));
        let decoder = Decoder {
            weight: (!spec.tied_decoder).then(|| lin(&mut rng, &[spec.vocab_or_classes, d], d)),
            bias: rng.normal_tensor(&[spec.vocab_or_classes], 0.1),
        };
        Ok(Self {
            embedding,
            blocks,
            final_norm,
            decoder,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let norm = |n: &NormParams<T>| NormParams {
            mu: n.mu.cast(),
            beta: n.beta.as_ref().map(|b| b.cast()),
            eps: U::from_f64_lossy(n.eps.to_f64_lossless()),
        };
        ModelWeights {
            embedding: match &self.embedding {
                Embedding::Tokens { table, positions } => Embedding::Tokens {
                    table: table.cast(),
                    positions: positions.cast(),
                },
                Embedding::Patches {
                    proj_weight,
                    proj_bias,
                    cls,
                    positions,
                } => Embedding::Patches {
                    proj_weight: proj_weight.cast(),
                    proj_bias: proj_bias.cast(),
                    cls: cls.cast(),
                    positions: positions.cast(),
                },
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    ln1: norm(&b.ln1),
                    attn: AttentionWeights {
                        heads: b
                            .attn
                            .heads
                            .iter()
                            .map(|h| HeadWeights {
                                q_weight: h.q_weight.cast(),
                                q_bias: h.q_bias.cast(),
                                k_weight: h.k_weight.cast(),
                                k_bias: h.k_bias.cast(),
                                v_weight: h.v_weight.cast(),
                                v_bias: h.v_bias.cast(),
                            })
                            .collect(),
                        out_weight: b.attn.out_weight.cast(),
                        out_bias: b.attn.out_bias.cast(),
                    },
                    ln2: norm(&b.ln2),
                    mlp: MlpWeights {
                        fc1_weight: b.mlp.fc1_weight.cast(),
                        fc1_bias: b.mlp.fc1_bias.cast(),
                        fc2_weight: b.mlp.fc2_weight.cast(),
                        fc2_bias: b.mlp.fc2_bias.cast(),
                    },
                })
                .collect(),
            final_norm: self.final_norm.as_ref().map(norm),
            decoder: Decoder {
                weight: self.decoder.weight.as_ref().map(|w| w.cast()),
                bias: self.decoder.bias.cast(),
            },
        }
    }
}

/// Random input matching `spec`: `len` tokens, or a standard-normal patch grid.
pub fn random_input<T: Scalar>(spec: &ModelSpec, len: usize, rng: &mut RandStream) -> ModelInput<T> {
    match spec.input {
        InputSpec::Tokens { max_len } => {
            let len = len.clamp(1, max_len);
            ModelInput::Tokens((0..len).map(|_| rng.below(spec.vocab_or_classes)).collect())
        }
        InputSpec::Patches {
            num_patches,
            patch_dim,
        } => ModelInput::Patches(rng.normal_tensor(&[num_patches, patch_dim], 1.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_spec(style: NormStyle) -> ModelSpec {
        ModelSpec {
            norm_style: style,
            depth: 2,
            width: 8,
            head_dim: 4,
            mlp_ratio: 2.0,
            vocab_or_classes: 11,
            tied_decoder: false,
            activation: Activation::Gelu,
            eps: 1e-5,
            input: InputSpec::Tokens { max_len: 6 },
        }
    }

    fn rand_x(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        RandStream::new(seed, Purpose::Toy, 0).normal_tensor(&[rows, cols], 1.0)
    }

    /// Per-head attention written with explicit loops.
    fn naive_mha(x: &Tensor<f64>, w: &AttentionWeights<f64>, d: usize) -> Tensor<f64> {
        let e = x.rows();
        let dm = x.cols();
        let mut concat = vec![vec![0.0; w.heads.len() * d]; e];
        for (hi, h) in w.heads.iter().enumerate() {
            let proj = |wt: &Tensor<f64>, b: &Tensor<f64>| -> Vec<Vec<f64>> {
                (0..e)
                    .map(|t| {
                        (0..d)
                            .map(|c| (0..dm).map(|i| x.at(t, i) * wt.at(i, c)).sum::<f64>() + b.data()[c])
                            .collect()
                    })
                    .collect()
            };
            let q = proj(&h.q_weight, &h.q_bias);
            let k = proj(&h.k_weight, &h.k_bias);
            let v = proj(&h.v_weight, &h.v_bias);
            for t in 0..e {
                let logits: Vec<f64> = (0..e)
                    .map(|s| (0..d).map(|c| q[t][c] * k[s][c]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..d {
                    concat[t][hi * d + c] = (0..e).map(|s| logits[s].exp() / z * v[s][c]).sum();
                }
            }
        }
        let mut out = vec![vec![0.0; dm]; e];
        for t in 0..e {
            for j in 0..dm {
                out[t][j] = (0..concat[t].len()).map(|r| concat[t][r] * w.out_weight.at(r, j)).sum::<f64>()
                    + w.out_bias.data()[j];
            }
        }
        Tensor::from_rows(&out)
    }

    #[test]
    fn mha_matches_naive_two_heads() {
        let spec = toy_spec(NormStyle::PreLn);
        let w = ModelWeights::<f64>::random(&spec, 3).unwrap();
        let x = rand_x(5, 8, 1);
        let got = mha_forward(&x, &w.blocks[0].attn, 4).unwrap();
        let want = naive_mha(&x, &w.blocks[0].attn, 4);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn mha_zero_value_path_gives_zero() {
        let spec = ModelSpec { width: 4, head_dim: 4, ..toy_spec(NormStyle::PreLn) };
        let mut w = ModelWeights::<f64>::random(&spec, 5).unwrap().blocks.remove(0).attn;
        w.heads[0].v_weight = Tensor::zeros(&[4, 4]);
        w.heads[0].v_bias = Tensor::zeros(&[4]);
        w.out_weight = Tensor::identity(4);
        w.out_bias = Tensor::zeros(&[4]);
        let y = mha_forward(&rand_x(3, 4, 2), &w, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_single_token_is_value_projection() {
        let spec = toy_spec(NormStyle::PreLn);
        let w = ModelWeights::<f64>::random(&spec, 9).unwrap().blocks.remove(0).attn;
        let x = rand_x(1, 8, 4);
        let mut concat = Vec::new();
        for h in &w.heads {
            let v = add_bias(&matmul(&x, &h.v_weight).unwrap(), &h.v_bias).unwrap();
            concat.extend_from_slice(v.data());
        }
        let c = Tensor::new(vec![1, 8], concat).unwrap();
        let want = add_bias(&matmul(&c, &w.out_weight).unwrap(), &w.out_bias).unwrap();
        let got = mha_forward(&x, &w, 4).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn mha_rejects_extent_mismatch() {
        let spec = toy_spec(NormStyle::PreLn);
        let w = ModelWeights::<f64>::random(&spec, 9).unwrap().blocks.remove(0).attn;
        assert!(mha_forward(&rand_x(2, 6, 4), &w, 4).is_err());
    }

    #[test]
    fn mlp_examples() {
        let zero = MlpWeights::<f64> {
            fc1_weight: Tensor::zeros(&[3, 2]),
            fc1_bias: Tensor::zeros(&[3]),
            fc2_weight: Tensor::zeros(&[2, 3]),
            fc2_bias: Tensor::zeros(&[2]),
        };
        let x = rand_x(4, 2, 1);
        assert!(mlp_forward(&x, &zero, Activation::Gelu).unwrap().data().iter().all(|&v| v == 0.0));

        // One hidden unit, relu: y = 3·relu(2·x0 - x1 + 0.5) + 0.25.
        let w = MlpWeights::<f64> {
            fc1_weight: Tensor::from_rows(&[vec![2.0, -1.0]]),
            fc1_bias: Tensor::vector(vec![0.5]),
            fc2_weight: Tensor::from_rows(&[vec![3.0]]),
            fc2_bias: Tensor::vector(vec![0.25]),
        };
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, 1.0]]);
        let y = mlp_forward(&x, &w, Activation::Relu).unwrap();
        assert_eq!(y.data(), &[3.0 * 1.5 + 0.25, 0.25]);
    }

    #[test]
    fn mlp_matches_kernel_chain() {
        let spec = toy_spec(NormStyle::PreLn);
        let w = ModelWeights::<f64>::random(&spec, 1).unwrap().blocks.remove(0).mlp;
        let x = rand_x(3, 8, 8);
        let h = activation(
            &add_bias(&matmul(&x, &w.fc1_weight.transpose()).unwrap(), &w.fc1_bias).unwrap(),
            Activation::Gelu,
        )
        .unwrap();
        let want = add_bias(&matmul(&h, &w.fc2_weight.transpose()).unwrap(), &w.fc2_bias).unwrap();
        assert_eq!(mlp_forward(&x, &w, Activation::Gelu).unwrap(), want);
    }

    #[test]
    fn pre_ln_block_with_zero_modules_is_identity() {
        let spec = toy_spec(NormStyle::PreLn);
        let mut b = ModelWeights::<f64>::random(&spec, 2).unwrap().blocks.remove(0);
        b.attn.out_weight = Tensor::zeros(&[8, 8]);
        b.attn.out_bias = Tensor::zeros(&[8]);
        b.mlp.fc2_weight = Tensor::zeros(&[8, 16]);
        b.mlp.fc2_bias = Tensor::zeros(&[8]);
        let x = rand_x(4, 8, 3);
        assert!(block_forward(&x, &b, &spec).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn post_res_norm_block_with_zero_norms_is_identity() {
        let spec = toy_spec(NormStyle::PostResNorm);
        let mut b = ModelWeights::<f64>::random(&spec, 2).unwrap().blocks.remove(0);
        for n in [&mut b.ln1, &mut b.ln2] {
            n.mu = Tensor::zeros(&[8]);
            n.beta = Some(Tensor::zeros(&[8]));
        }
        let x = rand_x(4, 8, 3);
        assert!(block_forward(&x, &b, &spec).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn blocks_match_straight_line_composition() {
        let x = rand_x(3, 8, 6);
        for style in [NormStyle::PreLn, NormStyle::PostLn, NormStyle::PostResNorm, NormStyle::RmsPre] {
            let spec = toy_spec(style);
            let b = ModelWeights::<f64>::random(&spec, 4).unwrap().blocks.remove(0);
            let ln = |n: &NormParams<f64>, t: &Tensor<f64>| match &n.beta {
                Some(beta) => layernorm(t, &n.mu, beta, n.eps).unwrap(),
                None => rmsnorm(t, &n.mu, n.eps).unwrap(),
            };
            let attn = |t: &Tensor<f64>| naive_mha(t, &b.attn, 4);
            let mlp = |t: &Tensor<f64>| mlp_forward(t, &b.mlp, Activation::Gelu).unwrap();
            let plus = |a: &Tensor<f64>, c: &Tensor<f64>| add(a, c).unwrap();
            let want = match style {
                NormStyle::PreLn | NormStyle::RmsPre => {
                    let y = plus(&x, &attn(&ln(&b.ln1, &x)));
                    plus(&y, &mlp(&ln(&b.ln2, &y)))
                }
                NormStyle::PostLn => {
                    let y = ln(&b.ln1, &plus(&attn(&x), &x));
                    ln(&b.ln2, &plus(&mlp(&y), &y))
                }
                NormStyle::PostResNorm => {
                    let y = plus(&x, &ln(&b.ln1, &attn(&x)));
                    plus(&y, &ln(&b.ln2, &mlp(&y)))
                }
            };
            let got = block_forward(&x, &b, &spec).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-11, "{style:?}");
        }
    }

    #[test]
    fn depth_zero_model_matches_hand_evaluation() {
        let spec = ModelSpec { depth: 0, ..toy_spec(NormStyle::PreLn) };
        let w = ModelWeights::<f64>::random(&spec, 8).unwrap();
        let ids = vec![3usize, 0, 10];
        let logits = model_forward(&ModelInput::Tokens(ids.clone()), &w, &spec).unwrap();
        assert_eq!(logits.shape(), &[3, 11]);
        let Embedding::Tokens { table, positions } = &w.embedding else { unreachable!() };
        let fnorm = w.final_norm.as_ref().unwrap();
        let dec = w.decoder.weight.as_ref().unwrap();
        for (p, &id) in ids.iter().enumerate() {
            let e: Vec<f64> = (0..8).map(|i| table.at(id, i) + positions.at(p, i)).collect();
            let m = e.iter().sum::<f64>() / 8.0;
            let var = e.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0;
            let h: Vec<f64> = (0..8)
                .map(|i| (e[i] - m) / (var + fnorm.eps).sqrt() * fnorm.mu.data()[i] + fnorm.beta.as_ref().unwrap().data()[i])
                .collect();
            for c in 0..11 {
                let want = (0..8).map(|i| h[i] * dec.at(c, i)).sum::<f64>() + w.decoder.bias.data()[c];
                assert!((logits.at(p, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_forward_is_deterministic_and_shaped() {
        let spec = toy_spec(NormStyle::PreLn);
        let w = ModelWeights::<f64>::random(&spec, 8).unwrap();
        let input = ModelInput::Tokens(vec![1, 2, 3, 4]);
        let a = model_forward(&input, &w, &spec).unwrap();
        let b = model_forward(&input, &w, &spec).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.shape(), &[4, spec.vocab_or_classes]);
        assert!(matches!(
            model_forward(&ModelInput::Tokens(vec![11]), &w, &spec),
            Err(Error::TokenOutOfRange { token: 11, vocab: 11 })
        ));
        assert!(model_forward(&ModelInput::Tokens(vec![0; 7]), &w, &spec).is_err());
    }

    #[test]
    fn vision_model_reads_class_token() {
        let spec = ModelSpec {
            input: InputSpec::Patches { num_patches: 4, patch_dim: 6 },
            vocab_or_classes: 5,
            ..toy_spec(NormStyle::PreLn)
        };
        let w = ModelWeights::<f64>::random(&spec, 8).unwrap();
        let mut rng = RandStream::new(1, Purpose::Toy, 1);
        let x = random_input::<f64>(&spec, 0, &mut rng);
        let y = model_forward(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 5]);
    }

    #[test]
    fn duplicated_hidden_units_compute_identical_activations() {
        let spec = toy_spec(NormStyle::PreLn);
        let mut m = ModelWeights::<f64>::random(&spec, 8).unwrap().blocks.remove(0).mlp;
        let r0 = m.fc1_weight.row(0).to_vec();
        m.fc1_weight.row_mut(5).copy_from_slice(&r0);
        let b0 = m.fc1_bias.data()[0];
        m.fc1_bias.data_mut()[5] = b0;
        let h = mlp_hidden(&rand_x(7, 8, 1), &m, Activation::Gelu).unwrap();
        for t in 0..7 {
            assert_eq!(h.at(t, 0).to_bits(), h.at(t, 5).to_bits());
        }
    }

    #[test]
    fn permuting_heads_with_out_rows_preserves_output() {
        let spec = toy_spec(NormStyle::PreLn);
        let w = ModelWeights::<f64>::random(&spec, 8).unwrap();
        let mut p = w.clone();
        for b in &mut p.blocks {
            b.attn.heads.swap(0, 1);
            let top = b.attn.out_weight.slice_rows(0, 4);
            let bottom = b.attn.out_weight.slice_rows(4, 8);
            b.attn.out_weight = Tensor::vcat(&[&bottom, &top]).unwrap();
        }
        let input = ModelInput::Tokens(vec![1, 7, 3]);
        let a = model_forward(&input, &w, &spec).unwrap();
        let b = model_forward(&input, &p, &spec).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
    }

    #[test]
    fn named_round_trip_and_validation() {
        for style in [NormStyle::PreLn, NormStyle::RmsPre, NormStyle::PostLn] {
            let spec = ModelSpec { tied_decoder: style != NormStyle::PostLn, ..toy_spec(style) };
            let w = ModelWeights::<f64>::random(&spec, 8).unwrap();
            let named: BTreeMap<_, _> = w.to_named().into_iter().collect();
            assert_eq!(ModelWeights::from_named(&spec, named).unwrap(), w);
        }
        let bad = ModelSpec { head_dim: 3, ..toy_spec(NormStyle::PreLn) };
        assert!(matches!(bad.validate(), Err(Error::InvalidSpec(_))));
        let tied_post = ModelSpec { tied_decoder: true, ..toy_spec(NormStyle::PostResNorm) };
        assert!(tied_post.validate().is_err());
    }
}
