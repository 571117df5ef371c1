//! MLP model definition, initialization, forward passes, and the flat
//! parameter layout the rationale machinery addresses.
//!
//! Multiplicative weights live in one flat vector `W = {w_0..w_K}` partitioned
//! by layer into index sets `K_l` (row-major within a layer: the weights of
//! output unit `j` occupy `offset_l + j·fan_in ..`). Biases are stored and
//! trained separately and are excluded from `W`, hence from every parity and
//! importance computation.

use crate::autodiff::{ExpressionTape, NodeHandle};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Probability clamp for the cross-entropy loss.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("input has {got} features but the model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight index {index} out of range (network has {count} weights)")]
    WeightIndexOutOfRange { index: usize, count: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has {inputs} inputs but {labels} labels")]
    BatchLengthMismatch { inputs: usize, labels: usize },
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture of a fully connected relu network with a sigmoid output.
///
/// `hidden_dims` may be empty for a single-layer (logistic-regression-like)
/// model; one entry per hidden layer otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        assert!(input_dim >= 1, "input dimension must be at least 1");
        assert!(
            hidden_dims.iter().all(|&d| d >= 1),
            "hidden dimensions must be at least 1"
        );
        MlpSpec {
            input_dim,
            hidden_dims,
        }
    }

    /// `(fan_in, fan_out)` per layer, output layer included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn num_weights(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o).sum()
    }

    /// The index sets `K_l`: contiguous, pairwise disjoint ranges that
    /// partition `0..num_weights()`.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges = Vec::with_capacity(self.num_layers());
        let mut offset = 0;
        for (fan_in, fan_out) in self.layer_dims() {
            ranges.push(offset..offset + fan_in * fan_out);
            offset += fan_in * fan_out;
        }
        ranges
    }

    /// Layer owning flat weight index `k`.
    pub fn layer_of(&self, k: usize) -> usize {
        for (l, r) in self.layer_ranges().iter().enumerate() {
            if r.contains(&k) {
                return l;
            }
        }
        panic!("weight index {k} out of range");
    }
}

/// Concrete parameters: flat multiplicative weights plus per-layer biases.
///
/// A value type — cheap to clone, shareable read-only across concurrent
/// evaluations; training mutates one owned instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub weights: Vec<f64>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(spec.num_weights());
    let mut biases = Vec::with_capacity(spec.num_layers());
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-bound, bound);
        for _ in 0..fan_in * fan_out {
            weights.push(dist.sample(&mut rng));
        }
        biases.push(vec![0.0; fan_out]);
    }
    MlpParams {
        spec: spec.clone(),
        weights,
        biases,
        seed,
    }
}

impl MlpParams {
    /// Copy with `w_k = 0`; everything else bit-identical.
    pub fn zero_weight(&self, k: usize) -> Result<MlpParams, NetworkError> {
        if k >= self.weights.len() {
            return Err(NetworkError::WeightIndexOutOfRange {
                index: k,
                count: self.weights.len(),
            });
        }
        let mut copy = self.clone();
        copy.weights[k] = 0.0;
        Ok(copy)
    }

    /// Plain value-level forward pass; probability of class 1.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut scratch = ForwardScratch::new(&self.spec);
        self.predict_with(x, &mut scratch)
    }

    /// Forward pass reusing caller-owned activation buffers.
    pub fn predict_with(&self, x: &[f64], scratch: &mut ForwardScratch) -> f64 {
        assert_eq!(
            x.len(),
            self.spec.input_dim,
            "input width must match the model spec"
        );
        let dims = self.spec.layer_dims();
        let mut offset = 0;
        scratch.input.clear();
        scratch.input.extend_from_slice(x);
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let is_output_layer = l + 1 == dims.len();
            scratch.output.clear();
            for j in 0..fan_out {
                let row = &self.weights[offset + j * fan_in..offset + (j + 1) * fan_in];
                let mut acc = 0.0;
                for (w, a) in row.iter().zip(scratch.input.iter()) {
                    acc += w * a;
                }
                acc += self.biases[l][j];
                scratch
                    .output
                    .push(if is_output_layer { acc } else { acc.max(0.0) });
            }
            offset += fan_in * fan_out;
            std::mem::swap(&mut scratch.input, &mut scratch.output);
        }
        stable_sigmoid_value(scratch.input[0])
    }

    /// Mean clamped cross-entropy over `(rows, labels)` without a tape.
    /// Matches the tape-built loss definition.
    pub fn mean_loss<'a, I>(&self, rows: I, labels: &[u8]) -> f64
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut scratch = ForwardScratch::new(&self.spec);
        let mut total = 0.0;
        let mut n = 0usize;
        for (row, &y) in rows.into_iter().zip(labels) {
            let p = self.predict_with(row, &mut scratch);
            total += bce_value(p, y);
            n += 1;
        }
        assert!(n > 0, "mean_loss over an empty batch");
        total / n as f64
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<(), NetworkError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<MlpParams, NetworkError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reusable activation buffers for value-level forward passes.
pub struct ForwardScratch {
    input: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardScratch {
    pub fn new(spec: &MlpSpec) -> Self {
        let widest = spec
            .hidden_dims
            .iter()
            .copied()
            .chain([spec.input_dim, 1])
            .max()
            .unwrap();
        ForwardScratch {
            input: Vec::with_capacity(widest),
            output: Vec::with_capacity(widest),
        }
    }
}

fn stable_sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clamped binary cross-entropy of probability `p` against label `y`.
pub fn bce_value(p: f64, y: u8) -> f64 {
    let pc = clamp_prob(p);
    if y == 1 {
        -pc.ln()
    } else {
        -(1.0 - pc).ln()
    }
}

fn clamp_prob(p: f64) -> f64 {
    // Same piecewise form the tape uses: eps + relu(p - eps) - relu(p - (1 - eps)).
    BCE_EPSILON + (p - BCE_EPSILON).max(0.0) - (p - (1.0 - BCE_EPSILON)).max(0.0)
}

/// A model bound onto a tape: weights and biases pushed as leaf variables so
/// gradients with respect to them exist.
///
/// Weight leaves form one contiguous block in flat `K` order, which lets every
/// matrix-vector product on the forward pass use the fused range dot.
pub struct BoundMlp {
    spec: MlpSpec,
    weight_nodes: Vec<NodeHandle>,
    bias_nodes: Vec<Vec<NodeHandle>>,
    consts: BceConsts,
}

struct BceConsts {
    eps: NodeHandle,
    one_minus_eps: NodeHandle,
    one: NodeHandle,
}

impl BoundMlp {
    pub fn bind(params: &MlpParams, tape: &mut ExpressionTape) -> BoundMlp {
        let weight_nodes: Vec<NodeHandle> =
            params.weights.iter().map(|&w| tape.variable(w)).collect();
        let bias_nodes: Vec<Vec<NodeHandle>> = params
            .biases
            .iter()
            .map(|layer| layer.iter().map(|&b| tape.variable(b)).collect())
            .collect();
        let consts = BceConsts {
            eps: tape.constant(BCE_EPSILON),
            one_minus_eps: tape.constant(1.0 - BCE_EPSILON),
            one: tape.constant(1.0),
        };
        BoundMlp {
            spec: params.spec.clone(),
            weight_nodes,
            bias_nodes,
            consts,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Flat weight handles, aligned with `MlpParams::weights`.
    pub fn weight_nodes(&self) -> &[NodeHandle] {
        &self.weight_nodes
    }

    pub fn bias_nodes(&self) -> &[Vec<NodeHandle>] {
        &self.bias_nodes
    }

    /// Forward pass for one sample; returns the output probability node.
    pub fn forward(&self, tape: &mut ExpressionTape, x: &[f64]) -> NodeHandle {
        assert_eq!(
            x.len(),
            self.spec.input_dim,
            "input width must match the model spec"
        );
        let dims = self.spec.layer_dims();
        let mut act_start = tape.len();
        let mut act_len = x.len();
        for &v in x {
            tape.variable(v);
        }
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            // One fused dot per unit against the contiguous activation block,
            // then bias adds, then a contiguous relu block for the next layer.
            let act_base = tape.handle_at(act_start);
            let mut pre = Vec::with_capacity(fan_out);
            for j in 0..fan_out {
                let row = self.weight_nodes[offset + j * fan_in];
                let d = tape.dot_range(row, act_base, act_len);
                pre.push(tape.add(d, self.bias_nodes[l][j]));
            }
            if l + 1 == dims.len() {
                return tape.sigmoid(pre[0]);
            }
            let next_start = tape.len();
            for &p in &pre {
                tape.relu(p);
            }
            act_start = next_start;
            act_len = fan_out;
            offset += fan_in * fan_out;
        }
        unreachable!("layer_dims always ends with the output layer");
    }

    /// Per-sample clamped cross-entropy node.
    pub fn sample_loss(&self, tape: &mut ExpressionTape, p: NodeHandle, y: u8) -> NodeHandle {
        let t1 = tape.sub(p, self.consts.eps);
        let r1 = tape.relu(t1);
        let t2 = tape.sub(p, self.consts.one_minus_eps);
        let r2 = tape.relu(t2);
        let lo = tape.add(self.consts.eps, r1);
        let pc = tape.sub(lo, r2);
        if y == 1 {
            let lp = tape.log(pc);
            tape.neg(lp)
        } else {
            let om = tape.sub(self.consts.one, pc);
            let lo = tape.log(om);
            tape.neg(lo)
        }
    }

    /// Forward outputs for a batch of rows.
    pub fn forward_batch<'a, I>(&self, tape: &mut ExpressionTape, rows: I) -> Vec<NodeHandle>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        rows.into_iter().map(|r| self.forward(tape, r)).collect()
    }

    /// Mean clamped cross-entropy over a batch. Returns the loss node and the
    /// per-sample output nodes (the outputs feed the relaxed fairness terms).
    pub fn batch_loss<'a, I>(
        &self,
        tape: &mut ExpressionTape,
        rows: I,
        labels: &[u8],
    ) -> Result<(NodeHandle, Vec<NodeHandle>), NetworkError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let outputs = self.forward_batch(tape, rows);
        if outputs.is_empty() {
            return Err(NetworkError::EmptyBatch);
        }
        if outputs.len() != labels.len() {
            return Err(NetworkError::BatchLengthMismatch {
                inputs: outputs.len(),
                labels: labels.len(),
            });
        }
        let losses: Vec<NodeHandle> = outputs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| self.sample_loss(tape, p, y))
            .collect();
        let total = tape.sum(&losses);
        let n = tape.constant(losses.len() as f64);
        Ok((tape.div(total, n), outputs))
    }
}

/// Forward pass of `params` on `x`, recorded on `tape`. Binds the parameters
/// first; use [`BoundMlp`] directly to share one binding across many samples.
pub fn forward(params: &MlpParams, x: &[f64], tape: &mut ExpressionTape) -> NodeHandle {
    let bound = BoundMlp::bind(params, tape);
    bound.forward(tape, x)
}

/// Mean clamped cross-entropy of `params` on a batch, recorded on `tape`.
pub fn batch_classification_loss<'a, I>(
    params: &MlpParams,
    rows: I,
    labels: &[u8],
    tape: &mut ExpressionTape,
) -> Result<NodeHandle, NetworkError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let bound = BoundMlp::bind(params, tape);
    let (loss, _) = bound.batch_loss(tape, rows, labels)?;
    Ok(loss)
}
