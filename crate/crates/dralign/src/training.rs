//! Training algorithms: plain empirical risk minimization, oversampling,
//! fairness-regularized training, and rationale-aligned training, plus the
//! subgroup batch samplers they share.
//!
//! A rationale-aligned step with fairness weight `λ` and alignment weight `β`
//! minimizes
//!
//! ```text
//! L = L_cls(X_0) + L_cls(X_1) + λ·L_fair - β·Σ_l cos(c⃗_l^{a=0}, c⃗_l^{a=1})
//! ```
//!
//! over per-subgroup batches. The classification term is the *sum* of the
//! per-subgroup batch means, not a pooled mean, which matters for the
//! effective learning rate. The alignment term is built from tape-node
//! gradients, so one value-level backward pass of the total loss performs the
//! required second-order differentiation.
//!
//! Degenerate coefficients reduce exactly: a λ=0, β=0 run is classification
//! training on subgroup-paired batches, and a β=0 run is fairness-regularized
//! training, trajectory-identical bit for bit. [`TrainConfig::validate`]
//! rejects such configs at the user boundary; `train` itself accepts them so
//! the reductions stay testable.

use crate::autodiff::ExpressionTape;
use crate::data::{DataError, DatasetTable, SubgroupView};
use crate::metrics::{self, MetricError, SubgroupPredictions};
use crate::network::{init, BoundMlp, MlpParams, MlpSpec, NetworkError};
use crate::rationale::{
    alignment_loss, cosine_value, taylor_from_loss, ImportanceVector, RationaleError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Rows used per subgroup for the epoch-end fairness/similarity probe.
const EPOCH_PROBE_CAP: usize = 512;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: cls={cls}, fair={fair:?}, align={align:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        cls: f64,
        fair: Option<f64>,
        align: Option<f64>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Rationale(#[from] RationaleError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Oversample,
    FairReg,
    DrAlign,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Erm => "erm",
            Method::Oversample => "oversample",
            Method::FairReg => "fairreg",
            Method::DrAlign => "dralign",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessMetric {
    Dp,
    Eo,
    Eop,
    Pp,
}

impl FairnessMetric {
    /// Whether batches are drawn per `(a, y)` cell rather than per attribute.
    pub fn uses_label_cells(self) -> bool {
        !matches!(self, FairnessMetric::Dp)
    }
}

impl std::fmt::Display for FairnessMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FairnessMetric::Dp => "dp",
            FairnessMetric::Eo => "eo",
            FairnessMetric::Eop => "eop",
            FairnessMetric::Pp => "pp",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the parameters after the final epoch (default).
    LastEpoch,
    /// Keep the epoch with the best validation average precision.
    BestValidationAp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub metric: FairnessMetric,
    /// Fairness regularization weight λ.
    pub lambda: f64,
    /// Alignment weight β.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Batch size per `Sample()` call (per subgroup batch for the paired
    /// methods, pooled batch for erm/oversample).
    pub batch_size: usize,
    pub seed: u64,
    /// Align only the last `k` layers when set.
    pub layer_mask: Option<usize>,
    pub optimizer: Optimizer,
    #[serde(default = "default_selection")]
    pub selection: Selection,
}

fn default_selection() -> Selection {
    Selection::LastEpoch
}

impl TrainConfig {
    pub fn new(method: Method, metric: FairnessMetric) -> TrainConfig {
        TrainConfig {
            method,
            metric,
            lambda: 0.0,
            beta: 0.0,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 256,
            seed: 0,
            layer_mask: None,
            optimizer: Optimizer::Adam,
            selection: Selection::LastEpoch,
        }
    }

    /// User-boundary invariants: rationale-aligned training needs β > 0,
    /// fairness regularization needs λ > 0.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err(TrainError::InvalidConfig(
                "lambda and beta must be non-negative".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        match self.method {
            Method::DrAlign if self.beta <= 0.0 => Err(TrainError::InvalidConfig(
                "dralign requires beta > 0".into(),
            )),
            Method::FairReg if self.lambda <= 0.0 => Err(TrainError::InvalidConfig(
                "fairreg requires lambda > 0".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Optimizer state over the flattened `(weights, biases)` vector.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: Optimizer, param_count: usize) -> OptimizerState {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam => OptimizerState::Adam {
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
                t: 0,
            },
        }
    }

    fn update(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        match self {
            OptimizerState::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    **p -= lr * g;
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    **p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn apply_update(params: &mut MlpParams, opt: &mut OptimizerState, grads: &[f64], lr: f64) {
    let mut slots: Vec<&mut f64> = Vec::with_capacity(grads.len());
    for w in params.weights.iter_mut() {
        slots.push(w);
    }
    for layer in params.biases.iter_mut() {
        for b in layer.iter_mut() {
            slots.push(b);
        }
    }
    opt.update(&mut slots, grads, lr);
}

/// The rng stream `train` uses for batch sampling. Exposed so external
/// harnesses and equivalence tests can reproduce the exact draw sequence.
pub fn sampler_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15)
}

/// `B` row indices drawn uniformly with replacement from the rows with
/// attribute `a`. Replacement keeps small subgroups drawable at any `B`.
pub fn sample_subgroup(
    data: &DatasetTable,
    a: u8,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>, TrainError> {
    let view = data.subgroup(a, None)?;
    Ok(draw_with_replacement(view.indices(), b, rng))
}

/// As [`sample_subgroup`], conditioned on both attribute and label.
pub fn sample_subgroup_labeled(
    data: &DatasetTable,
    a: u8,
    y: u8,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>, TrainError> {
    let view = data.subgroup(a, Some(y))?;
    Ok(draw_with_replacement(view.indices(), b, rng))
}

fn draw_with_replacement(pool: &[u32], b: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..b).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// `ceil(data_size / batch_size)`.
pub fn steps_per_epoch(data_size: usize, batch_size: usize) -> usize {
    data_size.div_ceil(batch_size)
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub total: f64,
    pub cls: f64,
    pub fair: Option<f64>,
    /// Value of the alignment loss term (`-Σ cos`), when built.
    pub align: Option<f64>,
    /// Similarity sum across all aligned layer pairs, when built.
    pub sim_sum: Option<f64>,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total step loss over the epoch.
    pub train_loss: f64,
    /// Relaxed fairness value on capped training subgroups at epoch end.
    pub relaxed_fair: f64,
    /// Taylor-importance similarity sum on the same probe.
    pub align_sim_sum: f64,
    pub val_ap: f64,
    pub val_hard_dp: f64,
    pub val_hard_eo: f64,
}

/// One record per epoch.
#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "epoch,train_loss,relaxed_fair,align_sim_sum,val_ap,val_hard_dp,val_hard_eo"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.epoch,
                r.train_loss,
                r.relaxed_fair,
                r.align_sim_sum,
                r.val_ap,
                r.val_hard_dp,
                r.val_hard_eo
            )?;
        }
        Ok(())
    }
}

fn collect_labels(data: &DatasetTable, idx: &[u32]) -> Vec<u8> {
    idx.iter().map(|&i| data.label(i as usize)).collect()
}

fn finite_or_abort(
    epoch: usize,
    step: usize,
    total: f64,
    grads: &[f64],
    rec: &StepRecord,
) -> Result<(), TrainError> {
    if total.is_finite() && grads.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    Err(TrainError::NonFiniteLoss {
        epoch,
        step,
        cls: rec.cls,
        fair: rec.fair,
        align: rec.align,
    })
}

/// One update on a pooled minibatch: plain mean cross-entropy.
fn step_plain(
    params: &mut MlpParams,
    opt: &mut OptimizerState,
    data: &DatasetTable,
    batch: &[u32],
    lr: f64,
    tape: &mut ExpressionTape,
) -> Result<StepRecord, TrainError> {
    tape.clear();
    let bound = BoundMlp::bind(params, tape);
    let labels = collect_labels(data, batch);
    let (loss, _) = bound.batch_loss(tape, batch.iter().map(|&i| data.row(i as usize)), &labels)?;
    let wrt: Vec<_> = bound
        .weight_nodes()
        .iter()
        .chain(bound.bias_nodes().iter().flatten())
        .copied()
        .collect();
    let grads = tape.grad_values(loss, &wrt).expect("same tape");
    let rec = StepRecord {
        total: tape.value(loss),
        cls: tape.value(loss),
        fair: None,
        align: None,
        sim_sum: None,
    };
    finite_or_abort(0, 0, rec.total, &grads, &rec)?;
    apply_update(params, opt, &grads, lr);
    Ok(rec)
}

/// One rationale-aligned (or plain fairness-regularized) update on a pair of
/// per-attribute batches, demographic-parity flavor.
///
/// Builds `L_cls(X0) + L_cls(X1)`, adds `λ·ΔDP` of the batch means when
/// `λ > 0`, and when `β > 0` adds the alignment term built from the two
/// subgroup-loss gradients; then takes one optimizer step on all weights and
/// biases.
pub fn train_step_dp(
    params: &mut MlpParams,
    opt: &mut OptimizerState,
    data: &DatasetTable,
    batch0: &[u32],
    batch1: &[u32],
    cfg: &TrainConfig,
    tape: &mut ExpressionTape,
) -> Result<StepRecord, TrainError> {
    if batch0.is_empty() || batch1.is_empty() {
        return Err(NetworkError::EmptyBatch.into());
    }
    tape.clear();
    let bound = BoundMlp::bind(params, tape);
    let labels0 = collect_labels(data, batch0);
    let labels1 = collect_labels(data, batch1);
    let (l0, out0) =
        bound.batch_loss(tape, batch0.iter().map(|&i| data.row(i as usize)), &labels0)?;
    let (l1, out1) =
        bound.batch_loss(tape, batch1.iter().map(|&i| data.row(i as usize)), &labels1)?;
    let cls = tape.add(l0, l1);

    let mut total = cls;
    let mut fair_value = None;
    if cfg.lambda > 0.0 {
        let m0 = metrics::subgroup_mean(tape, &out0);
        let m1 = metrics::subgroup_mean(tape, &out1);
        let fair = metrics::relaxed_dp(tape, m0, m1);
        fair_value = Some(tape.value(fair));
        let lam = tape.constant(cfg.lambda);
        let weighted = tape.mul(lam, fair);
        total = tape.add(total, weighted);
    }

    let mut align_value = None;
    let mut sim_value = None;
    if cfg.beta > 0.0 {
        let imp0 = taylor_from_loss(tape, l0, &bound)?;
        let imp1 = taylor_from_loss(tape, l1, &bound)?;
        let term = alignment_loss(tape, &imp0, &imp1, cfg.layer_mask)?;
        align_value = Some(tape.value(term.loss));
        sim_value = Some(term.layer_sims.iter().map(|&s| tape.value(s)).sum());
        let beta = tape.constant(cfg.beta);
        let weighted = tape.mul(beta, term.loss);
        total = tape.add(total, weighted);
    }

    let wrt: Vec<_> = bound
        .weight_nodes()
        .iter()
        .chain(bound.bias_nodes().iter().flatten())
        .copied()
        .collect();
    let grads = tape.grad_values(total, &wrt).expect("same tape");
    let rec = StepRecord {
        total: tape.value(total),
        cls: tape.value(cls),
        fair: fair_value,
        align: align_value,
        sim_sum: sim_value,
    };
    finite_or_abort(0, 0, rec.total, &grads, &rec)?;
    apply_update(params, opt, &grads, cfg.learning_rate);
    Ok(rec)
}

/// One update on four `(a, y)` cell batches (equalized-odds family:
/// `eo`, `eop`, `pp`). `batches[a][y]` is the index batch of the cell.
///
/// The classification term sums the four cell batch means. The fairness term
/// depends on the metric; the alignment term pairs the cells across the
/// attribute within each label (`(0,y)` vs `(1,y)`), both label groups
/// negated, except for `eop` which aligns only the positive-label pair.
pub fn train_step_eo(
    params: &mut MlpParams,
    opt: &mut OptimizerState,
    data: &DatasetTable,
    batches: [[&[u32]; 2]; 2],
    cfg: &TrainConfig,
    tape: &mut ExpressionTape,
) -> Result<StepRecord, TrainError> {
    for a in 0..2 {
        for y in 0..2 {
            if batches[a][y].is_empty() {
                return Err(NetworkError::EmptyBatch.into());
            }
        }
    }
    tape.clear();
    let bound = BoundMlp::bind(params, tape);

    let mut losses = [[None; 2]; 2];
    let mut means = [[None; 2]; 2];
    let mut cls = None;
    for a in 0..2 {
        for y in 0..2 {
            let idx = batches[a][y];
            let labels = collect_labels(data, idx);
            let (l, out) =
                bound.batch_loss(tape, idx.iter().map(|&i| data.row(i as usize)), &labels)?;
            losses[a][y] = Some(l);
            means[a][y] = Some(metrics::subgroup_mean(tape, &out));
            cls = Some(match cls {
                None => l,
                Some(acc) => tape.add(acc, l),
            });
        }
    }
    let cls = cls.expect("four cells");
    let mean_arr = [
        [means[0][0].unwrap(), means[0][1].unwrap()],
        [means[1][0].unwrap(), means[1][1].unwrap()],
    ];

    let mut total = cls;
    let mut fair_value = None;
    if cfg.lambda > 0.0 {
        let fair = match cfg.metric {
            FairnessMetric::Dp => {
                // DP over four-cell batches: pool each attribute's cells.
                let s0 = tape.add(mean_arr[0][0], mean_arr[0][1]);
                let s1 = tape.add(mean_arr[1][0], mean_arr[1][1]);
                let two = tape.constant(2.0);
                let m0 = tape.div(s0, two);
                let m1 = tape.div(s1, two);
                metrics::relaxed_dp(tape, m0, m1)
            }
            FairnessMetric::Eo => metrics::relaxed_eo(tape, mean_arr),
            FairnessMetric::Eop => metrics::relaxed_eop(tape, mean_arr[0][1], mean_arr[1][1]),
            FairnessMetric::Pp => {
                let counts = [
                    [batches[0][0].len(), batches[0][1].len()],
                    [batches[1][0].len(), batches[1][1].len()],
                ];
                metrics::relaxed_pp(tape, mean_arr, counts)?
            }
        };
        fair_value = Some(tape.value(fair));
        let lam = tape.constant(cfg.lambda);
        let weighted = tape.mul(lam, fair);
        total = tape.add(total, weighted);
    }

    let mut align_value = None;
    let mut sim_value = None;
    if cfg.beta > 0.0 {
        let pairs: &[(usize, usize)] = match cfg.metric {
            FairnessMetric::Eop => &[(1, 1)],
            _ => &[(0, 0), (1, 1)],
        };
        // pairs are (y, y): align cell (a=0, y) with (a=1, y).
        let mut align_acc = None;
        let mut sims = 0.0;
        for &(y, _) in pairs {
            let i0 = taylor_from_loss(tape, losses[0][y].unwrap(), &bound)?;
            let i1 = taylor_from_loss(tape, losses[1][y].unwrap(), &bound)?;
            let term = alignment_loss(tape, &i0, &i1, cfg.layer_mask)?;
            sims += term
                .layer_sims
                .iter()
                .map(|&s| tape.value(s))
                .sum::<f64>();
            align_acc = Some(match align_acc {
                None => term.loss,
                Some(acc) => tape.add(acc, term.loss),
            });
        }
        let align = align_acc.expect("at least one aligned pair");
        align_value = Some(tape.value(align));
        sim_value = Some(sims);
        let beta = tape.constant(cfg.beta);
        let weighted = tape.mul(beta, align);
        total = tape.add(total, weighted);
    }

    let wrt: Vec<_> = bound
        .weight_nodes()
        .iter()
        .chain(bound.bias_nodes().iter().flatten())
        .copied()
        .collect();
    let grads = tape.grad_values(total, &wrt).expect("same tape");
    let rec = StepRecord {
        total: tape.value(total),
        cls: tape.value(cls),
        fair: fair_value,
        align: align_value,
        sim_sum: sim_value,
    };
    finite_or_abort(0, 0, rec.total, &grads, &rec)?;
    apply_update(params, opt, &grads, cfg.learning_rate);
    Ok(rec)
}

/// Hard and relaxed evaluation of a model on a table.
#[derive(Debug, Clone, Copy)]
pub struct ModelEval {
    pub ap: f64,
    pub hard_dp: f64,
    pub hard_eo: f64,
    pub eop_ratio: f64,
    pub pp_diff: f64,
    pub soft_dp: f64,
    pub soft_eo: f64,
    pub mean_loss: f64,
}

/// Evaluates every metric the harness reports; metrics whose preconditions
/// fail (an empty cell, no predicted positives) come back as NaN.
pub fn evaluate_model(params: &MlpParams, data: &DatasetTable, threshold: f64) -> ModelEval {
    let mut scratch = crate::network::ForwardScratch::new(&params.spec);
    let probs: Vec<f64> = (0..data.n_rows())
        .map(|i| params.predict_with(data.row(i), &mut scratch))
        .collect();
    let preds = SubgroupPredictions::from_parts(&probs, data.labels(), data.attrs())
        .expect("equal lengths by construction");

    let mut cell_sum = [[0.0f64; 2]; 2];
    let mut cell_n = [[0usize; 2]; 2];
    for (i, &p) in probs.iter().enumerate() {
        let a = data.attr(i) as usize;
        let y = data.label(i) as usize;
        cell_sum[a][y] += p;
        cell_n[a][y] += 1;
    }
    let group_mean = |a: usize| -> f64 {
        let n = cell_n[a][0] + cell_n[a][1];
        if n == 0 {
            f64::NAN
        } else {
            (cell_sum[a][0] + cell_sum[a][1]) / n as f64
        }
    };
    let cell_mean = |a: usize, y: usize| -> f64 {
        if cell_n[a][y] == 0 {
            f64::NAN
        } else {
            cell_sum[a][y] / cell_n[a][y] as f64
        }
    };
    let soft_dp = (group_mean(0) - group_mean(1)).abs();
    let soft_eo =
        (cell_mean(0, 0) - cell_mean(1, 0)).abs() + (cell_mean(0, 1) - cell_mean(1, 1)).abs();

    let nan = f64::NAN;
    ModelEval {
        ap: metrics::average_precision(&probs, data.labels()).unwrap_or(nan),
        hard_dp: metrics::hard_dp(&preds, threshold).unwrap_or(nan),
        hard_eo: metrics::hard_eo(&preds, threshold).unwrap_or(nan),
        eop_ratio: metrics::eop_ratio(&preds, threshold).unwrap_or(nan),
        pp_diff: metrics::pp_diff(&preds, threshold).unwrap_or(nan),
        soft_dp,
        soft_eo,
        mean_loss: if data.n_rows() > 0 {
            params.mean_loss((0..data.n_rows()).map(|i| data.row(i)), data.labels())
        } else {
            nan
        },
    }
}

/// Value-level Taylor importance per layer on a capped subgroup view.
fn taylor_values(params: &MlpParams, view: &SubgroupView<'_>) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut tape = ExpressionTape::new();
    let bound = BoundMlp::bind(params, &mut tape);
    let labels = view.labels();
    let (loss, _) = bound.batch_loss(&mut tape, view.rows(), &labels)?;
    let g = tape
        .grad_values(loss, bound.weight_nodes())
        .expect("same tape");
    Ok(params
        .spec
        .layer_ranges()
        .into_iter()
        .map(|r| r.map(|k| (g[k] * params.weights[k]).powi(2)).collect())
        .collect())
}

/// Mean prediction on a view.
fn view_mean_pred(params: &MlpParams, view: &SubgroupView<'_>) -> f64 {
    let mut scratch = crate::network::ForwardScratch::new(&params.spec);
    let mut total = 0.0;
    for row in view.rows() {
        total += params.predict_with(row, &mut scratch);
    }
    total / view.len() as f64
}

/// Epoch-end probe: relaxed fairness value and Taylor similarity sum on
/// capped training subgroups, metric-appropriate.
fn epoch_probe(
    params: &MlpParams,
    data: &DatasetTable,
    metric: FairnessMetric,
) -> Result<(f64, f64), TrainError> {
    let cap = EPOCH_PROBE_CAP;
    if !metric.uses_label_cells() {
        let g0 = data.subgroup(0, None)?.truncated(cap);
        let g1 = data.subgroup(1, None)?.truncated(cap);
        let fair = (view_mean_pred(params, &g0) - view_mean_pred(params, &g1)).abs();
        let t0 = taylor_values(params, &g0)?;
        let t1 = taylor_values(params, &g1)?;
        let sim = t0
            .iter()
            .zip(&t1)
            .map(|(a, b)| cosine_value(a, b))
            .sum::<f64>();
        return Ok((fair, sim));
    }

    let mut views = Vec::with_capacity(4);
    for a in 0..2u8 {
        for y in 0..2u8 {
            views.push(data.subgroup(a, Some(y))?.truncated(cap));
        }
    }
    // views[a*2 + y]
    let m = |a: usize, y: usize| view_mean_pred(params, &views[a * 2 + y]);
    let n = |a: usize, y: usize| views[a * 2 + y].len() as f64;
    let fair = match metric {
        FairnessMetric::Eo => (m(0, 0) - m(1, 0)).abs() + (m(0, 1) - m(1, 1)).abs(),
        FairnessMetric::Eop => (m(0, 1) - m(1, 1)).abs(),
        FairnessMetric::Pp => {
            let g0 = (m(0, 0) * n(0, 0) + m(0, 1) * n(0, 1)) / (n(0, 0) + n(0, 1));
            let g1 = (m(1, 0) * n(1, 0) + m(1, 1) * n(1, 1)) / (n(1, 0) + n(1, 1));
            (g0 - g1).abs()
        }
        FairnessMetric::Dp => unreachable!("handled above"),
    };
    let pair_sim = |y: usize| -> Result<f64, TrainError> {
        let t0 = taylor_values(params, &views[y])?;
        let t1 = taylor_values(params, &views[2 + y])?;
        Ok(t0
            .iter()
            .zip(&t1)
            .map(|(a, b)| cosine_value(a, b))
            .sum::<f64>())
    };
    let sim = match metric {
        FairnessMetric::Eop => pair_sim(1)?,
        _ => pair_sim(0)? + pair_sim(1)?,
    };
    Ok((fair, sim))
}

/// Trains a fresh model on `train_data`, evaluating on `val_data` each epoch.
///
/// Method dispatch: `erm` shuffles pooled minibatches; `oversample` draws each
/// row from a fair coin over the two subgroups; `fairreg` and `dralign` draw
/// paired subgroup batches (four `(a, y)` cells for the equalized-odds-family
/// metrics). Fully deterministic per `(data, config)`.
pub fn train(
    train_data: &DatasetTable,
    val_data: &DatasetTable,
    spec: &MlpSpec,
    cfg: &TrainConfig,
) -> Result<(MlpParams, RunHistory), TrainError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(TrainError::InvalidConfig(
            "epochs, batch_size and learning_rate must be positive".into(),
        ));
    }
    let mut params = init(spec, cfg.seed);
    let param_count = params.weights.len() + params.biases.iter().map(|b| b.len()).sum::<usize>();
    let mut opt = OptimizerState::new(cfg.optimizer, param_count);
    let mut rng = sampler_rng(cfg.seed);
    let steps = steps_per_epoch(train_data.n_rows(), cfg.batch_size);
    let mut tape = ExpressionTape::new();
    let mut history = RunHistory::default();
    let mut best: Option<(f64, MlpParams)> = None;

    // Oversampling pools, fixed for the run.
    let pools: [Vec<u32>; 2] = [
        train_data.subgroup(0, None)?.indices().to_vec(),
        train_data.subgroup(1, None)?.indices().to_vec(),
    ];

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        match cfg.method {
            Method::Erm => {
                let mut perm: Vec<u32> = (0..train_data.n_rows() as u32).collect();
                for i in (1..perm.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    perm.swap(i, j);
                }
                for (step, chunk) in perm.chunks(cfg.batch_size).enumerate() {
                    let rec = step_plain(
                        &mut params,
                        &mut opt,
                        train_data,
                        chunk,
                        cfg.learning_rate,
                        &mut tape,
                    )
                    .map_err(|e| at_step(e, epoch, step))?;
                    loss_sum += rec.total;
                }
            }
            Method::Oversample => {
                for step in 0..steps {
                    let batch: Vec<u32> = (0..cfg.batch_size)
                        .map(|_| {
                            let a = rng.gen_range(0..2usize);
                            pools[a][rng.gen_range(0..pools[a].len())]
                        })
                        .collect();
                    let rec = step_plain(
                        &mut params,
                        &mut opt,
                        train_data,
                        &batch,
                        cfg.learning_rate,
                        &mut tape,
                    )
                    .map_err(|e| at_step(e, epoch, step))?;
                    loss_sum += rec.total;
                }
            }
            Method::FairReg | Method::DrAlign => {
                if !cfg.metric.uses_label_cells() {
                    for step in 0..steps {
                        let b0 = sample_subgroup(train_data, 0, cfg.batch_size, &mut rng)?;
                        let b1 = sample_subgroup(train_data, 1, cfg.batch_size, &mut rng)?;
                        let rec =
                            train_step_dp(&mut params, &mut opt, train_data, &b0, &b1, cfg, &mut tape)
                                .map_err(|e| at_step(e, epoch, step))?;
                        loss_sum += rec.total;
                    }
                } else {
                    for step in 0..steps {
                        let b00 = sample_subgroup_labeled(train_data, 0, 0, cfg.batch_size, &mut rng)?;
                        let b01 = sample_subgroup_labeled(train_data, 0, 1, cfg.batch_size, &mut rng)?;
                        let b10 = sample_subgroup_labeled(train_data, 1, 0, cfg.batch_size, &mut rng)?;
                        let b11 = sample_subgroup_labeled(train_data, 1, 1, cfg.batch_size, &mut rng)?;
                        let rec = train_step_eo(
                            &mut params,
                            &mut opt,
                            train_data,
                            [[&b00, &b01], [&b10, &b11]],
                            cfg,
                            &mut tape,
                        )
                        .map_err(|e| at_step(e, epoch, step))?;
                        loss_sum += rec.total;
                    }
                }
            }
        }

        let (relaxed_fair, align_sim_sum) = epoch_probe(&params, train_data, cfg.metric)?;
        let val = evaluate_model(&params, val_data, 0.5);
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            relaxed_fair,
            align_sim_sum,
            val_ap: val.ap,
            val_hard_dp: val.hard_dp,
            val_hard_eo: val.hard_eo,
        });
        if cfg.selection == Selection::BestValidationAp
            && val.ap.is_finite()
            && best.as_ref().map_or(true, |(b, _)| val.ap > *b)
        {
            best = Some((val.ap, params.clone()));
        }
    }

    let final_params = match cfg.selection {
        Selection::LastEpoch => params,
        Selection::BestValidationAp => best.map(|(_, p)| p).unwrap_or(params),
    };
    Ok((final_params, history))
}

fn at_step(e: TrainError, epoch: usize, step: usize) -> TrainError {
    match e {
        TrainError::NonFiniteLoss {
            cls, fair, align, ..
        } => TrainError::NonFiniteLoss {
            epoch,
            step,
            cls,
            fair,
            align,
        },
        other => other,
    }
}

/// Value-level Taylor importance grouped by layer, public analysis flavor.
pub fn taylor_importance_values(
    params: &MlpParams,
    view: &SubgroupView<'_>,
    subgroup: impl Into<String>,
) -> Result<ImportanceVector, TrainError> {
    Ok(ImportanceVector {
        subgroup: subgroup.into(),
        layers: taylor_values(params, view)?,
    })
}
