//! Decision-rationale machinery: exact leave-one-out loss changes and parity
//! scores, Taylor-approximated neuron importance, layer normalization, the
//! cosine alignment loss, prediction gaps, and top-k neuron characterization.
//!
//! Terminology, with `J(F, P)` the mean classification loss of network `F` on
//! subgroup `P` and `F_{w_k=0}` the network with weight `k` zeroed:
//!
//! * loss change       `c_k = |J(F, P) - J(F_{w_k=0}, P)|²`
//! * parity score      `d_k = |c_k^{a=0} - c_k^{a=1}|²`, network parity `d_F = Σ_k d_k`
//! * Taylor importance `ĉ_k = (g_k · w_k)²` with `g_k` the gradient of the
//!   subgroup loss — a first-order estimate of the loss change that is cheap
//!   enough to sit inside a training step and differentiable because `g_k` is
//!   itself a tape node
//! * alignment loss    `-Σ_l cos(c⃗_l^{a=0}, c⃗_l^{a=1})` over per-layer vectors
//!
//! The exact quantities are evaluated without a tape (pure forward passes) and
//! serve as the oracle the Taylor estimate is validated against.

use crate::autodiff::{ExpressionTape, NodeHandle};
use crate::data::SubgroupView;
use crate::network::{BoundMlp, MlpParams, NetworkError};
use rayon::prelude::*;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RationaleError {
    #[error("subgroup is empty")]
    EmptySubgroup,
    #[error("importance vectors have mismatched layer shapes")]
    ShapeMismatch,
    #[error("top-k of {k} exceeds layer width {width}")]
    TopKTooLarge { k: usize, width: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Squared loss change from ablating one parameter:
/// `|J(F) - J(F_{w=0})|²`. Model-agnostic core of the exact score.
pub fn loss_change(loss_full: f64, loss_ablated: f64) -> f64 {
    (loss_full - loss_ablated).powi(2)
}

/// Squared difference of two per-subgroup loss changes. Symmetric.
pub fn parity_from_changes(c0: f64, c1: f64) -> f64 {
    (c0 - c1).powi(2)
}

/// Squared subgroup mean-prediction gap after ablation. Model-agnostic core
/// of [`prediction_gap`].
pub fn gap_from_means(mean0: f64, mean1: f64) -> f64 {
    (mean0 - mean1).powi(2)
}

/// Exact loss change of weight `k` on one subgroup (pure forward passes).
pub fn exact_loss_change(
    params: &MlpParams,
    k: usize,
    subgroup: &SubgroupView<'_>,
) -> Result<f64, RationaleError> {
    if subgroup.is_empty() {
        return Err(RationaleError::EmptySubgroup);
    }
    let labels = subgroup.labels();
    let j_full = params.mean_loss(subgroup.rows(), &labels);
    let ablated = params.zero_weight(k)?;
    let j_ablated = ablated.mean_loss(subgroup.rows(), &labels);
    Ok(loss_change(j_full, j_ablated))
}

/// Exact parity score of weight `k` across two subgroups; symmetric in the
/// subgroup order.
pub fn exact_parity(
    params: &MlpParams,
    k: usize,
    subgroup0: &SubgroupView<'_>,
    subgroup1: &SubgroupView<'_>,
) -> Result<f64, RationaleError> {
    let c0 = exact_loss_change(params, k, subgroup0)?;
    let c1 = exact_loss_change(params, k, subgroup1)?;
    Ok(parity_from_changes(c0, c1))
}

/// Squared gap of subgroup mean predictions after zeroing weight `k`.
pub fn prediction_gap(
    params: &MlpParams,
    k: usize,
    subgroup0: &SubgroupView<'_>,
    subgroup1: &SubgroupView<'_>,
) -> Result<f64, RationaleError> {
    if subgroup0.is_empty() || subgroup1.is_empty() {
        return Err(RationaleError::EmptySubgroup);
    }
    let ablated = params.zero_weight(k)?;
    let mean = |view: &SubgroupView<'_>| {
        let mut scratch = crate::network::ForwardScratch::new(&ablated.spec);
        let mut total = 0.0;
        for row in view.rows() {
            total += ablated.predict_with(row, &mut scratch);
        }
        total / view.len() as f64
    };
    Ok(gap_from_means(mean(subgroup0), mean(subgroup1)))
}

/// Per-layer, per-weight importance values for one subgroup, with the layer
/// and subgroup identity carried along for reporting.
#[derive(Debug, Clone)]
pub struct ImportanceVector {
    /// Display key, e.g. "a=0" or "a=1,y=0".
    pub subgroup: String,
    /// One vector per layer, entry order matching the flat weight layout.
    pub layers: Vec<Vec<f64>>,
}

impl ImportanceVector {
    /// Each layer vector divided by its Euclidean norm; all-zero layers pass
    /// through unchanged.
    pub fn normalized(&self) -> ImportanceVector {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let norm = layer.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    layer.clone()
                } else {
                    layer.iter().map(|v| v / norm).collect()
                }
            })
            .collect();
        ImportanceVector {
            subgroup: self.subgroup.clone(),
            layers,
        }
    }
}

/// Per-layer normalization of raw importance scores (`ĉ_k / |ĉ_l|`).
pub fn layer_normalize(raw: &ImportanceVector) -> ImportanceVector {
    raw.normalized()
}

/// Taylor importance scores as tape nodes, one vector per layer.
#[derive(Debug, Clone)]
pub struct NodeImportance {
    pub layers: Vec<Vec<NodeHandle>>,
}

impl NodeImportance {
    pub fn values(&self, tape: &ExpressionTape, subgroup: impl Into<String>) -> ImportanceVector {
        ImportanceVector {
            subgroup: subgroup.into(),
            layers: self
                .layers
                .iter()
                .map(|layer| layer.iter().map(|&h| tape.value(h)).collect())
                .collect(),
        }
    }
}

/// `ĉ_k = (g_k · w_k)²` for every weight, where `g_k` is the tape gradient of
/// `loss` with respect to weight `k` of the bound model. All entries are tape
/// nodes, so the result stays differentiable (the gradient of the alignment
/// loss flows through a second backward pass).
pub fn taylor_from_loss(
    tape: &mut ExpressionTape,
    loss: NodeHandle,
    bound: &BoundMlp,
) -> Result<NodeImportance, RationaleError> {
    let grads = tape
        .gradient(loss, bound.weight_nodes())
        .map_err(|_| RationaleError::ShapeMismatch)?;
    let ranges = bound.spec().layer_ranges();
    let mut layers = Vec::with_capacity(ranges.len());
    for range in ranges {
        let mut layer = Vec::with_capacity(range.len());
        for k in range {
            let gw = tape.mul(grads[k], bound.weight_nodes()[k]);
            layer.push(tape.square(gw));
        }
        layers.push(layer);
    }
    Ok(NodeImportance { layers })
}

/// Taylor importance of `params` on a subgroup batch: builds the mean
/// classification loss of the batch on `tape` and differentiates it. Binds the
/// parameters itself; training uses [`taylor_from_loss`] to share one binding
/// across subgroups.
pub fn taylor_importance(
    params: &MlpParams,
    subgroup: &SubgroupView<'_>,
    tape: &mut ExpressionTape,
) -> Result<NodeImportance, RationaleError> {
    if subgroup.is_empty() {
        return Err(RationaleError::EmptySubgroup);
    }
    let bound = BoundMlp::bind(params, tape);
    let labels = subgroup.labels();
    let (loss, _) = bound.batch_loss(tape, subgroup.rows(), &labels)?;
    taylor_from_loss(tape, loss, &bound)
}

/// The alignment term built on a tape: the loss node plus per-layer cosine
/// similarity nodes for logging.
pub struct AlignmentTerm {
    /// `-Σ_l cos(c⃗_l^0, c⃗_l^1)` over the unmasked layers.
    pub loss: NodeHandle,
    /// Cosine similarity per layer (all layers, masked or not).
    pub layer_sims: Vec<NodeHandle>,
}

/// Cosine alignment loss between two importance vectors.
///
/// Cosine similarity is invariant under positive scaling, so it is computed
/// directly from the raw scores; explicit layer normalization yields the same
/// value. A layer whose importance vector is all zero on either side is
/// defined as perfectly aligned (similarity 1) so dead layers are not
/// penalized; this is logged as a warning.
///
/// `last_k` restricts the *loss* to the last `k` layers; similarities are
/// still reported for every layer.
pub fn alignment_loss(
    tape: &mut ExpressionTape,
    imp0: &NodeImportance,
    imp1: &NodeImportance,
    last_k: Option<usize>,
) -> Result<AlignmentTerm, RationaleError> {
    if imp0.layers.len() != imp1.layers.len()
        || imp0
            .layers
            .iter()
            .zip(&imp1.layers)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(RationaleError::ShapeMismatch);
    }
    let num_layers = imp0.layers.len();
    let first_in_loss = last_k.map_or(0, |k| num_layers.saturating_sub(k));
    let mut layer_sims = Vec::with_capacity(num_layers);
    let mut in_loss = Vec::new();
    for (l, (c0, c1)) in imp0.layers.iter().zip(&imp1.layers).enumerate() {
        let sim = cosine_node(tape, c0, c1, l);
        layer_sims.push(sim);
        if l >= first_in_loss {
            in_loss.push(sim);
        }
    }
    let total = tape.sum(&in_loss);
    let loss = tape.neg(total);
    Ok(AlignmentTerm { loss, layer_sims })
}

fn cosine_node(
    tape: &mut ExpressionTape,
    c0: &[NodeHandle],
    c1: &[NodeHandle],
    layer: usize,
) -> NodeHandle {
    let n00 = tape.dot(c0, c0);
    let n11 = tape.dot(c1, c1);
    if tape.value(n00) == 0.0 || tape.value(n11) == 0.0 {
        log::warn!("layer {layer}: all-zero importance vector, similarity defined as 1");
        return tape.constant(1.0);
    }
    let d = tape.dot(c0, c1);
    let s0 = tape.sqrt(n00);
    let s1 = tape.sqrt(n11);
    let denom = tape.mul(s0, s1);
    tape.div(d, denom)
}

/// Value-level cosine between two layer vectors with the same zero-vector
/// convention as [`alignment_loss`].
pub fn cosine_value(c0: &[f64], c1: &[f64]) -> f64 {
    let n0: f64 = c0.iter().map(|v| v * v).sum();
    let n1: f64 = c1.iter().map(|v| v * v).sum();
    if n0 == 0.0 || n1 == 0.0 {
        return 1.0;
    }
    let d: f64 = c0.iter().zip(c1).map(|(a, b)| a * b).sum();
    d / (n0.sqrt() * n1.sqrt())
}

/// Per-layer Jaccard overlap of the top-`k` index sets of two importance
/// vectors; ties broken toward the lower index.
pub fn top_k_overlap(
    imp0: &ImportanceVector,
    imp1: &ImportanceVector,
    k: usize,
) -> Result<Vec<f64>, RationaleError> {
    if imp0.layers.len() != imp1.layers.len() {
        return Err(RationaleError::ShapeMismatch);
    }
    let mut overlaps = Vec::with_capacity(imp0.layers.len());
    for (l0, l1) in imp0.layers.iter().zip(&imp1.layers) {
        if l0.len() != l1.len() {
            return Err(RationaleError::ShapeMismatch);
        }
        if k > l0.len() {
            return Err(RationaleError::TopKTooLarge { k, width: l0.len() });
        }
        let t0 = top_k_indices(l0, k);
        let t1 = top_k_indices(l1, k);
        let inter = t0.iter().filter(|i| t1.contains(i)).count();
        let union = t0.len() + t1.len() - inter;
        overlaps.push(inter as f64 / union as f64);
    }
    Ok(overlaps)
}

/// Indices of the `k` largest entries, descending by value, ties by lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    idx.truncate(k);
    idx
}

/// One row of a [`ParityReport`].
#[derive(Debug, Clone)]
pub struct ParityRow {
    pub layer: usize,
    pub param_index: usize,
    pub c0: f64,
    pub c1: f64,
    pub d_k: f64,
}

/// Exact parity scores with layer-wise Taylor cosine similarities.
#[derive(Debug, Clone)]
pub struct ParityReport {
    pub rows: Vec<ParityRow>,
    /// `Σ_k d_k` (summed squared differences; canonical form).
    pub d_f: f64,
    /// `Σ_k |c_k^0 - c_k^1|` (L1-of-differences variant, reported for
    /// comparability).
    pub d_f_l1: f64,
    /// Per-layer cosine similarity of the Taylor importance vectors.
    pub layer_sims: Vec<f64>,
    /// `Σ_l S_l`.
    pub sim_sum: f64,
}

impl ParityReport {
    /// Flat CSV: `(layer, param_index, c0, c1, d_k)` rows followed by a
    /// summary block.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), RationaleError> {
        writeln!(w, "layer,param_index,c0,c1,d_k")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:?},{:?},{:?}",
                r.layer, r.param_index, r.c0, r.c1, r.d_k
            )?;
        }
        writeln!(w, "summary,d_f,{:?}", self.d_f)?;
        writeln!(w, "summary,d_f_l1,{:?}", self.d_f_l1)?;
        for (l, s) in self.layer_sims.iter().enumerate() {
            writeln!(w, "summary,s_{l},{s:?}")?;
        }
        writeln!(w, "summary,sim_sum,{:?}", self.sim_sum)?;
        Ok(())
    }
}

/// Exact per-parameter parity scores over two subgroups, aggregated to the
/// network parity `d_F`, plus Taylor-importance layer similarities on the same
/// subgroups.
///
/// Costs one full forward pass per parameter and subgroup row — an analysis
/// tool, never part of a training step. Parameters are processed in parallel.
pub fn network_parity(
    params: &MlpParams,
    subgroup0: &SubgroupView<'_>,
    subgroup1: &SubgroupView<'_>,
) -> Result<ParityReport, RationaleError> {
    if subgroup0.is_empty() || subgroup1.is_empty() {
        return Err(RationaleError::EmptySubgroup);
    }
    let labels0 = subgroup0.labels();
    let labels1 = subgroup1.labels();
    let j0_full = params.mean_loss(subgroup0.rows(), &labels0);
    let j1_full = params.mean_loss(subgroup1.rows(), &labels1);

    let rows: Vec<ParityRow> = (0..params.weights.len())
        .into_par_iter()
        .map(|k| {
            let ablated = params.zero_weight(k).expect("k < weight count");
            let c0 = loss_change(j0_full, ablated.mean_loss(subgroup0.rows(), &labels0));
            let c1 = loss_change(j1_full, ablated.mean_loss(subgroup1.rows(), &labels1));
            ParityRow {
                layer: params.spec.layer_of(k),
                param_index: k,
                c0,
                c1,
                d_k: parity_from_changes(c0, c1),
            }
        })
        .collect();

    let d_f = rows.iter().map(|r| r.d_k).sum();
    let d_f_l1 = rows.iter().map(|r| (r.c0 - r.c1).abs()).sum();

    // Taylor similarities on the same subgroups, via a private tape.
    let mut tape = ExpressionTape::new();
    let imp0 = taylor_importance(params, subgroup0, &mut tape)?.values(&tape, "a=0");
    let imp1 = taylor_importance(params, subgroup1, &mut tape)?.values(&tape, "a=1");
    let layer_sims: Vec<f64> = imp0
        .layers
        .iter()
        .zip(&imp1.layers)
        .map(|(a, b)| cosine_value(a, b))
        .collect();
    let sim_sum = layer_sims.iter().sum();

    Ok(ParityReport {
        rows,
        d_f,
        d_f_l1,
        layer_sims,
        sim_sum,
    })
}
