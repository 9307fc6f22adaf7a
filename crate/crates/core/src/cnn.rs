//! Bottleneck residual block (three conv–BN sub-blocks) and its width
//! expansion.
//!
//! Convolutions are stride 1 with `k/2` zero padding, so spatial size is
//! preserved. Batch norm runs in inference mode from stored statistics. The
//! block computes `relu(x + bn3(conv3(relu(bn2(conv2(relu(bn1(conv1(x)))))))))`
//! and only the inner channel count is expanded.

use crate::error::{shape_err, Result};
use crate::expander::SplitPolicy;
use crate::rng::{Purpose, RandStream};
use crate::scalar::Scalar;
use crate::tensor::{matmul_t, Tensor};

/// Convolution followed by inference-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    /// `[out, in, k, k]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    pub conv3: ConvBn<T>,
}

/// Same-padded, stride-1 2-D convolution of `x: [C, H, W]` with
/// `w: [O, C, k, k]` (odd `k`), via im2col.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0 || b.len() != ws[0] {
        return Err(shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}, bias {:?}", b.shape())));
    }
    let (c, h, wd) = (xs[0], xs[1], xs[2]);
    let (o, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let mut cols = Vec::with_capacity(h * wd * c * k * k);
    for i in 0..h as isize {
        for j in 0..wd as isize {
            for ch in 0..c {
                for di in 0..k as isize {
                    for dj in 0..k as isize {
                        let (y, z) = (i + di - pad, j + dj - pad);
                        cols.push(if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                            T::zero()
                        } else {
                            x.data()[(ch * h + y as usize) * wd + z as usize]
                        });
                    }
                }
            }
        }
    }
    let cols = Tensor::new(vec![h * wd, c * k * k], cols)?;
    let wmat = w.clone().reshape(vec![o, c * k * k])?;
    let out = matmul_t(&cols, &wmat)?.transpose();
    let data = out
        .data()
        .chunks(h * wd)
        .zip(b.data())
        .flat_map(|(row, &bias)| row.iter().map(move |&v| v + bias))
        .collect();
    Tensor::new(vec![o, h, wd], data)
}

impl<T: Scalar> ConvBn<T> {
    pub fn forward(&self, x: &Tensor<T>, relu: bool) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.weight, &self.bias)?;
        let plane = y.shape()[1] * y.shape()[2];
        let data = y.data_mut();
        for ch in 0..self.gamma.len() {
            let scale = self.gamma.data()[ch] / (self.running_var.data()[ch] + self.eps).sqrt();
            let (m, b) = (self.running_mean.data()[ch], self.beta.data()[ch]);
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v = (*v - m) * scale + b;
                if relu && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Ok(y)
    }

    fn random(out: usize, inp: usize, k: usize, rng: &mut RandStream) -> Self {
        Self {
            weight: rng.normal_tensor(&[out, inp, k, k], 1.0 / ((inp * k * k) as f64).sqrt()),
            bias: rng.normal_tensor(&[out], 0.1),
            gamma: rng.normal_tensor::<T>(&[out], 0.1).map(|v| v + T::one()),
            beta: rng.normal_tensor(&[out], 0.1),
            running_mean: rng.normal_tensor(&[out], 0.1),
            running_var: rng.uniform_tensor(&[out], 0.5, 1.5),
            eps: T::from_f64_lossy(1e-5),
        }
    }

    /// Output channels replicated circularly to `target`.
    fn tile_outputs(&self, target: usize) -> Result<Self> {
        let o = self.weight.shape()[0];
        let per = self.weight.len() / o;
        let tile = |t: &Tensor<T>| -> Tensor<T> { Tensor::vector((0..target).map(|i| t.data()[i % o]).collect()) };
        let mut shape = self.weight.shape().to_vec();
        shape[0] = target;
        let data = (0..target)
            .flat_map(|i| self.weight.data()[(i % o) * per..(i % o + 1) * per].iter().copied())
            .collect();
        Ok(Self {
            weight: Tensor::new(shape, data)?,
            bias: tile(&self.bias),
            gamma: tile(&self.gamma),
            beta: tile(&self.beta),
            running_mean: tile(&self.running_mean),
            running_var: tile(&self.running_var),
            eps: self.eps,
        })
    }

    /// Input channels expanded to `target`: copies of source channel `z`
    /// (positions `i ≡ z mod S`) get kernels summing to the original.
    fn split_inputs(&self, target: usize, policy: &SplitPolicy, rng: &mut RandStream) -> Result<Self> {
        let s = self.weight.shape();
        let (o, c, kk) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![T::zero(); o * target * kk];
        for oc in 0..o {
            for z in 0..c {
                let members: Vec<usize> = (z..target).step_by(c).collect();
                let base = &self.weight.data()[(oc * c + z) * kk..(oc * c + z + 1) * kk];
                for (piece, &i) in policy.split(base, members.len(), rng).iter().zip(&members) {
                    out[(oc * target + i) * kk..(oc * target + i + 1) * kk].copy_from_slice(piece);
                }
            }
        }
        Ok(Self {
            weight: Tensor::new(vec![o, target, s[2], s[3]], out)?,
            ..self.clone()
        })
    }
}

impl<T: Scalar> Bottleneck<T> {
    /// Random block with `channels` outer and `inner` bottleneck channels;
    /// the middle convolution has a `kernel × kernel` window.
    pub fn random(channels: usize, inner: usize, kernel: usize, seed: u64) -> Self {
        let mut rng = RandStream::new(seed, Purpose::Cnn, 0);
        Self {
            conv1: ConvBn::random(inner, channels, 1, &mut rng),
            conv2: ConvBn::random(inner, inner, kernel, &mut rng),
            conv3: ConvBn::random(channels, inner, 1, &mut rng),
        }
    }

    pub fn inner(&self) -> usize {
        self.conv1.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x, true)?;
        let h = self.conv2.forward(&h, true)?;
        let h = self.conv3.forward(&h, false)?;
        crate::tensor::add(x, &h).map(|y| y.map(|v| if v < T::zero() { T::zero() } else { v }))
    }
}

/// Expands the inner channels of `block` to `target`.
///
/// The first convolution's output channels (with bias and BN statistics)
/// are replicated circularly; the second has circular outputs and split
/// inputs; the third has split inputs. The block output is unchanged.
pub fn expand_cnn_bottleneck<T: Scalar>(
    block: &Bottleneck<T>,
    target: usize,
    policy: &SplitPolicy,
    rng: &mut RandStream,
) -> Result<Bottleneck<T>> {
    crate::expand::copies_and_tail(block.inner(), target)?;
    Ok(Bottleneck {
        conv1: block.conv1.tile_outputs(target)?,
        conv2: block.conv2.tile_outputs(target)?.split_inputs(target, policy, rng)?,
        conv3: block.conv3.split_inputs(target, policy, rng)?,
    })
}
