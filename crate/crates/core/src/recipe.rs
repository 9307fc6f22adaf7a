//! End-to-end checks on checkpoints: losslessness, symmetry of replicated
//! units, fixture generation, and the toy symmetry-breaking experiment.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{read_json, write_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::expand::{expand_bias, expand_matrix_cols, expand_matrix_rows, ColumnMode, RowMode};
use crate::expander::{Axis, DuplicateMap, Policy, SplitPolicy};
use crate::model::{model_forward, random_input, MlpWeights, ModelSpec, ModelWeights};
use crate::rng::{Purpose, RandStream};
use crate::scalar::DType;
use crate::tensor::{Activation, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleDiff {
    pub sample: usize,
    pub max_abs_diff: f64,
    /// `(row, column)` of the largest logit difference.
    pub position: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub max_abs_diff: f64,
    pub tol: f64,
    pub pass: bool,
    pub samples: Vec<SampleDiff>,
}

/// Runs both models on `samples` seeded random inputs (in `f64`) and compares
/// logits. Token inputs use the full context length.
pub fn verify_lossless(small: &Checkpoint, big: &Checkpoint, samples: usize, seed: u64, tol: f64) -> Result<VerifyReport> {
    if !small.spec.io_compatible(&big.spec) {
        return Err(Error::Incompatible(format!(
            "inputs/outputs differ: {:?}/{} vs {:?}/{}",
            small.spec.input, small.spec.vocab_or_classes, big.spec.input, big.spec.vocab_or_classes
        )));
    }
    let (ws, wb) = (small.weights.to_f64(), big.weights.to_f64());
    let len = small.spec.positions();
    let per: Vec<SampleDiff> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = RandStream::new(seed, Purpose::Verify, i as u64);
            let x = random_input::<f64>(&small.spec, len, &mut rng);
            let a = model_forward(&x, &ws, &small.spec)?;
            let b = model_forward(&x, &wb, &big.spec)?;
            let mut best = SampleDiff {
                sample: i,
                max_abs_diff: 0.0,
                position: (0, 0),
            };
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    let d = (a.at(r, c) - b.at(r, c)).abs();
                    if d > best.max_abs_diff || d.is_nan() {
                        best.max_abs_diff = d;
                        best.position = (r, c);
                    }
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let max_abs_diff = per.iter().map(|s| s.max_abs_diff).fold(0.0, f64::max);
    Ok(VerifyReport {
        max_abs_diff,
        tol,
        pass: max_abs_diff <= tol && per.iter().all(|s| !s.max_abs_diff.is_nan()),
        samples: per,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub tensor: String,
    pub indices: Vec<usize>,
    /// Smallest pairwise L∞ distance between the group's fan-out vectors.
    pub min_distance: f64,
}

/// Minimum pairwise fan-out distance for every group of replicated units.
pub fn symmetry_report(ck: &Checkpoint, map: &DuplicateMap) -> Result<Vec<GroupReport>> {
    let named: std::collections::HashMap<String, Tensor<f64>> =
        ck.weights.to_f64().to_named().into_iter().collect();
    map.groups
        .iter()
        .map(|g| {
            let t = named
                .get(&g.tensor)
                .ok_or_else(|| Error::MissingMap(format!("tensor {} is not in the checkpoint", g.tensor)))?;
            let extent = match g.axis {
                Axis::Row => t.rows(),
                Axis::Col => t.cols(),
            };
            if let Some(&bad) = g.indices.iter().find(|&&i| i >= extent) {
                return Err(Error::MissingMap(format!("index {bad} out of range for {}", g.tensor)));
            }
            let vec_of = |i: usize| match g.axis {
                Axis::Row => t.row(i).to_vec(),
                Axis::Col => t.column(i),
            };
            let mut min = f64::INFINITY;
            for (a, &i) in g.indices.iter().enumerate() {
                for &j in &g.indices[a + 1..] {
                    let d = vec_of(i)
                        .iter()
                        .zip(vec_of(j))
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    min = min.min(d);
                }
            }
            Ok(GroupReport {
                tensor: g.tensor.clone(),
                indices: g.indices.clone(),
                min_distance: min,
            })
        })
        .collect()
}

/// Writes deterministic random weights for the spec at `spec_path`.
pub fn init_random_model(spec_path: impl AsRef<Path>, seed: u64, out_path: impl AsRef<Path>, dtype: DType) -> Result<ModelSpec> {
    let spec: ModelSpec = read_json(spec_path).map_err(|e| match e {
        Error::Json(j) => Error::InvalidSpec(j.to_string()),
        other => other,
    })?;
    let w = ModelWeights::<f64>::random(&spec, seed)?;
    match dtype {
        DType::F64 => write_checkpoint(&w, &spec, out_path)?,
        DType::F32 => write_checkpoint(&w.cast::<f32>(), &spec, out_path)?,
    }
    Ok(spec)
}

/// Single-output MLP `y = w2·act(W1·x + b1) + b2` used to show how fan-out
/// splits decide whether replicated hidden units can ever diverge.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMlp {
    pub w: MlpWeights<f64>,
    pub act: Activation,
}

impl ToyMlp {
    pub fn random(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = RandStream::new(seed, Purpose::Toy, 0);
        Self {
            w: MlpWeights {
                fc1_weight: rng.normal_tensor(&[hidden, inputs], 1.0),
                fc1_bias: rng.normal_tensor(&[hidden], 0.5),
                fc2_weight: rng.normal_tensor(&[1, hidden], 1.0),
                fc2_bias: rng.normal_tensor(&[1], 0.5),
            },
            act: Activation::Gelu,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(crate::model::mlp_forward(&xt, &self.w, self.act)?.data()[0])
    }

    /// Replicates hidden units circularly to `hidden` and splits their
    /// fan-out weights by `policy`.
    pub fn expand_hidden(&self, hidden: usize, policy: &SplitPolicy, rng: &mut RandStream) -> Result<Self> {
        let split = policy.column_split(&self.w.fc2_weight, hidden, ColumnMode::Circ, rng)?;
        Ok(Self {
            w: MlpWeights {
                fc1_weight: expand_matrix_rows(&self.w.fc1_weight, hidden, RowMode::Circ)?,
                fc1_bias: expand_bias(&self.w.fc1_bias, hidden, RowMode::Circ)?,
                fc2_weight: expand_matrix_cols(&self.w.fc2_weight, hidden, ColumnMode::Circ, &split)?,
                fc2_bias: self.w.fc2_bias.clone(),
            },
            act: self.act,
        })
    }

    /// One gradient-descent step on `½(y − target)²`.
    pub fn sgd_step(&self, x: &[f64], target: f64, lr: f64) -> Result<Self> {
        let w = &self.w;
        let h = w.fc1_weight.rows();
        let z: Vec<f64> = (0..h)
            .map(|i| w.fc1_weight.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w.fc1_bias.data()[i])
            .collect();
        let y = self.forward(x)?;
        let g = y - target;
        let mut next = self.clone();
        for i in 0..h {
            let a = w.fc2_weight.data()[i];
            let gz = g * a * self.act.derivative(z[i]);
            for (j, &xj) in x.iter().enumerate() {
                let v = w.fc1_weight.at(i, j) - lr * gz * xj;
                next.w.fc1_weight.set(i, j, v);
            }
            next.w.fc1_bias.data_mut()[i] -= lr * gz;
            next.w.fc2_weight.data_mut()[i] -= lr * g * self.act.apply(z[i]);
        }
        next.w.fc2_bias.data_mut()[0] -= lr * g;
        Ok(next)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySymmetryOutcome {
    /// `|f_big(x) − f_small(x)|` before training.
    pub expansion_gap: f64,
    /// Largest fan-in difference between replicas after one step.
    pub max_fan_in_gap: f64,
    /// Whether every replica pair kept bitwise-identical fan-in weights.
    pub replicas_identical: bool,
}

/// Expands a two-neuron toy MLP to four hidden units, takes one gradient
/// step, and measures how far replicated units drifted apart.
pub fn toy_symmetry_experiment(policy: Policy, seed: u64) -> Result<ToySymmetryOutcome> {
    let small = ToyMlp::random(3, 2, seed);
    let mut rng = RandStream::new(seed, Purpose::Toy, 1);
    let big = small.expand_hidden(4, &SplitPolicy::new(policy, 0.02), &mut rng)?;
    let x = [0.7, -1.3, 0.4];
    let expansion_gap = (big.forward(&x)? - small.forward(&x)?).abs();
    let stepped = big.sgd_step(&x, 1.5, 0.1)?;
    let fi = &stepped.w.fc1_weight;
    let mut gap = 0.0f64;
    let mut identical = true;
    for (a, b) in [(0, 2), (1, 3)] {
        for j in 0..fi.cols() {
            gap = gap.max((fi.at(a, j) - fi.at(b, j)).abs());
            identical &= fi.at(a, j).to_bits() == fi.at(b, j).to_bits();
        }
    }
    Ok(ToySymmetryOutcome {
        expansion_gap,
        max_fan_in_gap: gap,
        replicas_identical: identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_step_matches_finite_differences() {
        let m = ToyMlp::random(3, 2, 4);
        let x = [0.3, -0.2, 1.1];
        let loss = |m: &ToyMlp| 0.5 * (m.forward(&x).unwrap() - 0.7).powi(2);
        let lr = 1e-3;
        let next = m.sgd_step(&x, 0.7, lr).unwrap();
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 2)] {
            let mut p = m.clone();
            p.w.fc1_weight.set(i, j, m.w.fc1_weight.at(i, j) + h);
            let mut q = m.clone();
            q.w.fc1_weight.set(i, j, m.w.fc1_weight.at(i, j) - h);
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            let step = (m.w.fc1_weight.at(i, j) - next.w.fc1_weight.at(i, j)) / lr;
            assert!((fd - step).abs() < 1e-6, "{fd} vs {step}");
        }
    }

    #[test]
    fn toy_expansion_is_lossless_and_policies_differ() {
        let lemon = toy_symmetry_experiment(Policy::Lemon, 3).unwrap();
        let equal = toy_symmetry_experiment(Policy::Net2netEqual, 3).unwrap();
        assert!(lemon.expansion_gap < 1e-12 && equal.expansion_gap < 1e-12);
        assert!(lemon.max_fan_in_gap > 1e-9 && !lemon.replicas_identical);
        assert!(equal.replicas_identical);
    }
}
