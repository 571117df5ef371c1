//! Fairness and accuracy metrics.
//!
//! Two families live here. The *relaxed* regularizers are differentiable tape
//! expressions over subgroup mean predictions and go into training losses.
//! The *hard* metrics threshold predictions and score a finished model on
//! held-out data; they are plain functions of [`SubgroupPredictions`].
//!
//! Relaxed forms (means over the attribute/label cells):
//! * demographic parity        `|m_0 - m_1|`
//! * equalized odds            `Σ_y |m_0^y - m_1^y|`
//! * equality of opportunity   `|m_0^1 - m_1^1|`
//! * predictive parity         `|weighted group mean difference|`
//!
//! The equality-of-opportunity and predictive-parity regularizers penalize the
//! magnitude of the difference so the penalty cannot go negative, matching the
//! treatment of the demographic-parity and equalized-odds forms.

use crate::autodiff::{ExpressionTape, NodeHandle};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("subgroup (a={a}) is empty")]
    EmptySubgroup { a: u8 },
    #[error("subgroup cell (a={a}, y={y}) is empty")]
    EmptyCell { a: u8, y: u8 },
    #[error("no positive labels; average precision is undefined")]
    NoPositives,
    #[error("group a={a} has no predicted positives; precision is undefined")]
    NoPredictedPositives { a: u8 },
    #[error("true-positive rate of group a=1 is zero; the ratio is undefined")]
    ZeroReferenceTpr,
    #[error("predictions, labels and attributes must have equal lengths")]
    LengthMismatch,
}

/// Per-subgroup prediction/label pairs, keyed by the binary attribute.
#[derive(Debug, Clone, Default)]
pub struct SubgroupPredictions {
    groups: [Vec<(f64, u8)>; 2],
}

impl SubgroupPredictions {
    pub fn from_parts(
        probs: &[f64],
        labels: &[u8],
        attrs: &[u8],
    ) -> Result<SubgroupPredictions, MetricError> {
        if probs.len() != labels.len() || probs.len() != attrs.len() {
            return Err(MetricError::LengthMismatch);
        }
        let mut groups: [Vec<(f64, u8)>; 2] = Default::default();
        for ((&p, &y), &a) in probs.iter().zip(labels).zip(attrs) {
            groups[(a == 1) as usize].push((p, y));
        }
        Ok(SubgroupPredictions { groups })
    }

    pub fn push(&mut self, a: u8, prob: f64, label: u8) {
        self.groups[(a == 1) as usize].push((prob, label));
    }

    pub fn group(&self, a: u8) -> &[(f64, u8)] {
        &self.groups[(a == 1) as usize]
    }

    fn cell(&self, a: u8, y: u8) -> impl Iterator<Item = f64> + '_ {
        self.group(a)
            .iter()
            .filter(move |(_, label)| *label == y)
            .map(|(p, _)| *p)
    }
}

// ── Relaxed (differentiable) regularizers ───────────────────────────────

/// Mean of a batch of output nodes, as a node.
pub fn subgroup_mean(tape: &mut ExpressionTape, outputs: &[NodeHandle]) -> NodeHandle {
    assert!(!outputs.is_empty(), "mean of an empty subgroup batch");
    let s = tape.sum(outputs);
    let n = tape.constant(outputs.len() as f64);
    tape.div(s, n)
}

/// Relaxed demographic parity: absolute difference of subgroup means.
pub fn relaxed_dp(tape: &mut ExpressionTape, mean0: NodeHandle, mean1: NodeHandle) -> NodeHandle {
    let d = tape.sub(mean0, mean1);
    tape.abs(d)
}

/// Relaxed equalized odds over the four `(a, y)` cell means, indexed
/// `means[a][y]`: sum over labels of absolute mean differences.
pub fn relaxed_eo(tape: &mut ExpressionTape, means: [[NodeHandle; 2]; 2]) -> NodeHandle {
    let d0 = tape.sub(means[0][0], means[1][0]);
    let a0 = tape.abs(d0);
    let d1 = tape.sub(means[0][1], means[1][1]);
    let a1 = tape.abs(d1);
    tape.add(a0, a1)
}

/// Relaxed equality of opportunity: absolute difference of the positive-label
/// cell means.
pub fn relaxed_eop(
    tape: &mut ExpressionTape,
    mean01: NodeHandle,
    mean11: NodeHandle,
) -> NodeHandle {
    let d = tape.sub(mean01, mean11);
    tape.abs(d)
}

/// Relaxed predictive parity: count-weighted group means differenced,
/// magnitude regularized. `means[a][y]` are the cell means, `counts[a][y]` the
/// cell sample counts `N_a^y`.
pub fn relaxed_pp(
    tape: &mut ExpressionTape,
    means: [[NodeHandle; 2]; 2],
    counts: [[usize; 2]; 2],
) -> Result<NodeHandle, MetricError> {
    let mut weighted = Vec::with_capacity(2);
    for a in 0..2 {
        let total = counts[a][0] + counts[a][1];
        if total == 0 {
            return Err(MetricError::EmptySubgroup { a: a as u8 });
        }
        let n0 = tape.constant(counts[a][0] as f64);
        let n1 = tape.constant(counts[a][1] as f64);
        let t = tape.constant(total as f64);
        let w0 = tape.mul(means[a][0], n0);
        let w1 = tape.mul(means[a][1], n1);
        let s = tape.add(w0, w1);
        weighted.push(tape.div(s, t));
    }
    let d = tape.sub(weighted[0], weighted[1]);
    Ok(tape.abs(d))
}

// ── Hard (threshold) evaluation metrics ─────────────────────────────────

fn positive_rate(pairs: &[(f64, u8)], threshold: f64) -> f64 {
    let pos = pairs.iter().filter(|(p, _)| *p >= threshold).count();
    pos as f64 / pairs.len() as f64
}

/// |P(ŷ=1 | a=0) - P(ŷ=1 | a=1)| at the given decision threshold.
pub fn hard_dp(preds: &SubgroupPredictions, threshold: f64) -> Result<f64, MetricError> {
    for a in 0..2u8 {
        if preds.group(a).is_empty() {
            return Err(MetricError::EmptySubgroup { a });
        }
    }
    Ok((positive_rate(preds.group(0), threshold) - positive_rate(preds.group(1), threshold)).abs())
}

/// Σ_y |P(ŷ=1 | a=0, y) - P(ŷ=1 | a=1, y)|.
pub fn hard_eo(preds: &SubgroupPredictions, threshold: f64) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for y in 0..2u8 {
        let mut rates = [0.0; 2];
        for a in 0..2u8 {
            let mut n = 0usize;
            let mut pos = 0usize;
            for p in preds.cell(a, y) {
                n += 1;
                if p >= threshold {
                    pos += 1;
                }
            }
            if n == 0 {
                return Err(MetricError::EmptyCell { a, y });
            }
            rates[a as usize] = pos as f64 / n as f64;
        }
        total += (rates[0] - rates[1]).abs();
    }
    Ok(total)
}

/// True-positive-rate ratio `TPR_{a=0} / TPR_{a=1}`; 1 is perfectly fair.
pub fn eop_ratio(preds: &SubgroupPredictions, threshold: f64) -> Result<f64, MetricError> {
    let mut tpr = [0.0; 2];
    for a in 0..2u8 {
        let mut n = 0usize;
        let mut pos = 0usize;
        for p in preds.cell(a, 1) {
            n += 1;
            if p >= threshold {
                pos += 1;
            }
        }
        if n == 0 {
            return Err(MetricError::EmptyCell { a, y: 1 });
        }
        tpr[a as usize] = pos as f64 / n as f64;
    }
    if tpr[1] == 0.0 {
        return Err(MetricError::ZeroReferenceTpr);
    }
    Ok(tpr[0] / tpr[1])
}

/// |P(y=1 | a=0, ŷ=1) - P(y=1 | a=1, ŷ=1)|: absolute precision difference
/// among predicted positives.
pub fn pp_diff(preds: &SubgroupPredictions, threshold: f64) -> Result<f64, MetricError> {
    let mut precision = [0.0; 2];
    for a in 0..2u8 {
        let mut predicted = 0usize;
        let mut correct = 0usize;
        for &(p, y) in preds.group(a) {
            if p >= threshold {
                predicted += 1;
                if y == 1 {
                    correct += 1;
                }
            }
        }
        if predicted == 0 {
            return Err(MetricError::NoPredictedPositives { a });
        }
        precision[a as usize] = correct as f64 / predicted as f64;
    }
    Ok((precision[0] - precision[1]).abs())
}

/// Average precision over the descending-score ranking, ties broken by stable
/// original order: `AP = Σ_k precision@k · Δrecall@k`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch);
    }
    let total_pos = labels.iter().filter(|&&y| y == 1).count();
    if total_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite scores"));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / total_pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mean_node(tape: &mut ExpressionTape, vals: &[f64]) -> NodeHandle {
        let hs: Vec<NodeHandle> = vals.iter().map(|&v| tape.variable(v)).collect();
        subgroup_mean(tape, &hs)
    }

    #[test]
    fn relaxed_dp_examples() {
        let mut t = ExpressionTape::new();
        let m0 = t.variable(0.7);
        let m1 = t.variable(0.2);
        let d = relaxed_dp(&mut t, m0, m1);
        assert_relative_eq!(t.value(d), 0.5, epsilon = 1e-12);

        // Identical batches for both subgroups.
        let m0 = mean_node(&mut t, &[0.3, 0.6, 0.9]);
        let m1 = mean_node(&mut t, &[0.3, 0.6, 0.9]);
        let d = relaxed_dp(&mut t, m0, m1);
        assert_eq!(t.value(d), 0.0);

        // Constant predictor.
        let m0 = mean_node(&mut t, &[0.5, 0.5]);
        let m1 = mean_node(&mut t, &[0.5, 0.5, 0.5]);
        let d = relaxed_dp(&mut t, m0, m1);
        assert_eq!(t.value(d), 0.0);
    }

    #[test]
    fn relaxed_eo_examples() {
        let mut t = ExpressionTape::new();
        let mk = |t: &mut ExpressionTape, v: f64| t.variable(v);
        // y=0 means 0.3/0.1, y=1 means 0.9/0.6 → 0.2 + 0.3.
        let means = [
            [mk(&mut t, 0.3), mk(&mut t, 0.9)],
            [mk(&mut t, 0.1), mk(&mut t, 0.6)],
        ];
        let eo = relaxed_eo(&mut t, means);
        assert_relative_eq!(t.value(eo), 0.5, epsilon = 1e-12);

        // All four means equal.
        let means = [
            [mk(&mut t, 0.4), mk(&mut t, 0.4)],
            [mk(&mut t, 0.4), mk(&mut t, 0.4)],
        ];
        let eo = relaxed_eo(&mut t, means);
        assert_eq!(t.value(eo), 0.0);

        // Difference only in the y=1 cell.
        let means = [
            [mk(&mut t, 0.2), mk(&mut t, 0.75)],
            [mk(&mut t, 0.2), mk(&mut t, 0.5)],
        ];
        let eo = relaxed_eo(&mut t, means);
        assert_relative_eq!(t.value(eo), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn relaxed_eop_examples() {
        let mut t = ExpressionTape::new();
        let m0 = t.variable(0.8);
        let m1 = t.variable(0.4);
        let e = relaxed_eop(&mut t, m0, m1);
        assert_relative_eq!(t.value(e), 0.4, epsilon = 1e-12);
        // Swapped subgroups: same magnitude.
        let e2 = relaxed_eop(&mut t, m1, m0);
        assert_eq!(t.value(e), t.value(e2));
        // Equal means.
        let e3 = relaxed_eop(&mut t, m0, m0);
        assert_eq!(t.value(e3), 0.0);
    }

    #[test]
    fn relaxed_pp_examples() {
        let mut t = ExpressionTape::new();
        let mk = |t: &mut ExpressionTape, v: f64| t.variable(v);
        // N all 1, group-0 means (0.2, 0.8), group-1 means (0.4, 0.6) → 0.
        let means = [
            [mk(&mut t, 0.2), mk(&mut t, 0.8)],
            [mk(&mut t, 0.4), mk(&mut t, 0.6)],
        ];
        let pp = relaxed_pp(&mut t, means, [[1, 1], [1, 1]]).unwrap();
        assert_relative_eq!(t.value(pp), 0.0, epsilon = 1e-12);

        // Weighted means 0.6 vs 0.4 → 0.2.
        let means = [
            [mk(&mut t, 0.6), mk(&mut t, 0.6)],
            [mk(&mut t, 0.4), mk(&mut t, 0.4)],
        ];
        let pp = relaxed_pp(&mut t, means, [[3, 1], [2, 2]]).unwrap();
        assert_relative_eq!(t.value(pp), 0.2, epsilon = 1e-12);

        // All cells equal mean and count.
        let means = [
            [mk(&mut t, 0.5), mk(&mut t, 0.5)],
            [mk(&mut t, 0.5), mk(&mut t, 0.5)],
        ];
        let pp = relaxed_pp(&mut t, means, [[2, 2], [2, 2]]).unwrap();
        assert_eq!(t.value(pp), 0.0);
    }

    fn preds_from(rows: &[(u8, f64, u8)]) -> SubgroupPredictions {
        let mut p = SubgroupPredictions::default();
        for &(a, prob, y) in rows {
            p.push(a, prob, y);
        }
        p
    }

    #[test]
    fn hard_dp_examples() {
        // a=0 positives 3/4, a=1 positives 1/4 → 0.5.
        let p = preds_from(&[
            (0, 0.9, 1),
            (0, 0.8, 0),
            (0, 0.7, 1),
            (0, 0.1, 0),
            (1, 0.9, 1),
            (1, 0.2, 0),
            (1, 0.3, 1),
            (1, 0.4, 0),
        ]);
        assert_relative_eq!(hard_dp(&p, 0.5).unwrap(), 0.5, epsilon = 1e-12);

        // Identical prediction sets.
        let p = preds_from(&[(0, 0.9, 1), (0, 0.1, 0), (1, 0.9, 1), (1, 0.1, 0)]);
        assert_eq!(hard_dp(&p, 0.5).unwrap(), 0.0);

        // All below threshold.
        let p = preds_from(&[(0, 0.2, 1), (0, 0.3, 0), (1, 0.1, 1), (1, 0.4, 0)]);
        assert_eq!(hard_dp(&p, 0.5).unwrap(), 0.0);

        let p = preds_from(&[(0, 0.2, 1)]);
        assert!(matches!(
            hard_dp(&p, 0.5),
            Err(MetricError::EmptySubgroup { a: 1 })
        ));
    }

    #[test]
    fn hard_eo_examples() {
        // Rates (y=0): 0.5 vs 0.25; (y=1): 1.0 vs 0.5 → 0.75.
        let p = preds_from(&[
            // a=0, y=0: 2 of 4 above threshold.
            (0, 0.9, 0),
            (0, 0.8, 0),
            (0, 0.1, 0),
            (0, 0.2, 0),
            // a=1, y=0: 1 of 4.
            (1, 0.9, 0),
            (1, 0.1, 0),
            (1, 0.2, 0),
            (1, 0.3, 0),
            // a=0, y=1: 2 of 2.
            (0, 0.9, 1),
            (0, 0.8, 1),
            // a=1, y=1: 1 of 2.
            (1, 0.9, 1),
            (1, 0.2, 1),
        ]);
        assert_relative_eq!(hard_eo(&p, 0.5).unwrap(), 0.75, epsilon = 1e-12);

        // Identical per-cell rates.
        let p = preds_from(&[(0, 0.9, 1), (0, 0.1, 0), (1, 0.9, 1), (1, 0.1, 0)]);
        assert_eq!(hard_eo(&p, 0.5).unwrap(), 0.0);

        // One empty cell errors.
        let p = preds_from(&[(0, 0.9, 1), (0, 0.1, 0), (1, 0.9, 1)]);
        assert!(matches!(
            hard_eo(&p, 0.5),
            Err(MetricError::EmptyCell { a: 1, y: 0 })
        ));
    }

    #[test]
    fn eop_ratio_examples() {
        // TPRs 0.8 / 0.4 → 2.0.
        let mut rows = Vec::new();
        for i in 0..5 {
            rows.push((0u8, if i < 4 { 0.9 } else { 0.1 }, 1u8));
        }
        for i in 0..5 {
            rows.push((1u8, if i < 2 { 0.9 } else { 0.1 }, 1u8));
        }
        let p = preds_from(&rows);
        assert_relative_eq!(eop_ratio(&p, 0.5).unwrap(), 2.0, epsilon = 1e-12);

        // Perfect classifier on both groups.
        let p = preds_from(&[(0, 0.9, 1), (1, 0.9, 1), (0, 0.1, 0), (1, 0.1, 0)]);
        assert_eq!(eop_ratio(&p, 0.5).unwrap(), 1.0);

        // Identical groups.
        let p = preds_from(&[(0, 0.9, 1), (0, 0.2, 1), (1, 0.9, 1), (1, 0.2, 1)]);
        assert_eq!(eop_ratio(&p, 0.5).unwrap(), 1.0);

        // Zero reference TPR errors.
        let p = preds_from(&[(0, 0.9, 1), (1, 0.1, 1)]);
        assert!(matches!(
            eop_ratio(&p, 0.5),
            Err(MetricError::ZeroReferenceTpr)
        ));
    }

    #[test]
    fn pp_diff_examples() {
        // Precisions 0.75 and 0.5 → 0.25.
        let p = preds_from(&[
            (0, 0.9, 1),
            (0, 0.9, 1),
            (0, 0.9, 1),
            (0, 0.9, 0),
            (1, 0.9, 1),
            (1, 0.9, 0),
        ]);
        assert_relative_eq!(pp_diff(&p, 0.5).unwrap(), 0.25, epsilon = 1e-12);

        // Identical groups.
        let p = preds_from(&[(0, 0.9, 1), (0, 0.9, 0), (1, 0.9, 1), (1, 0.9, 0)]);
        assert_eq!(pp_diff(&p, 0.5).unwrap(), 0.0);

        // No predicted positives in a group errors.
        let p = preds_from(&[(0, 0.9, 1), (1, 0.1, 1)]);
        assert!(matches!(
            pp_diff(&p, 0.5),
            Err(MetricError::NoPredictedPositives { a: 1 })
        ));
    }

    #[test]
    fn average_precision_examples() {
        // Perfect ranking.
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_relative_eq!(ap, 1.0, epsilon = 1e-12);

        // Hand-evaluated ranked precision sum: (1/1 + 2/3)/2 = 5/6.
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert_relative_eq!(ap, 5.0 / 6.0, epsilon = 1e-12);

        // Reversed perfect ranking with 2 pos / 2 neg: (1/3 + 2/4)/2 = 5/12.
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[0, 0, 1, 1]).unwrap();
        assert_relative_eq!(ap, 5.0 / 12.0, epsilon = 1e-12);

        assert!(matches!(
            average_precision(&[0.3, 0.2], &[0, 0]),
            Err(MetricError::NoPositives)
        ));
    }

    #[test]
    fn relaxed_dp_gradient_matches_finite_differences() {
        use crate::autodiff::finite_difference;
        // ΔDP of sigmoid(w·x) batch means as a function of the single weight.
        let xs0 = [0.5, -1.0, 2.0];
        let xs1 = [1.5, 0.3, -0.7];
        let eval = |w: f64| {
            let mut t = ExpressionTape::new();
            let wv = t.variable(w);
            let mut outs = |xs: &[f64], t: &mut ExpressionTape| {
                xs.iter()
                    .map(|&x| {
                        let c = t.constant(x);
                        let m = t.mul(wv, c);
                        t.sigmoid(m)
                    })
                    .collect::<Vec<_>>()
            };
            let o0 = outs(&xs0, &mut t);
            let o1 = outs(&xs1, &mut t);
            let m0 = subgroup_mean(&mut t, &o0);
            let m1 = subgroup_mean(&mut t, &o1);
            let dp = relaxed_dp(&mut t, m0, m1);
            let g = t.grad_values(dp, &[wv]).unwrap()[0];
            (t.value(dp), g)
        };
        let (_, analytic) = eval(0.8);
        let fd = finite_difference(|p| eval(p[0]).0, &[0.8], 1e-6)[0];
        assert!(
            (analytic - fd).abs() <= 1e-4 * analytic.abs().max(fd.abs()).max(1.0),
            "analytic {analytic} vs fd {fd}"
        );
    }

    proptest! {
        /// Relaxed metrics are non-negative, vanish on identical means, and
        /// are symmetric in the subgroup order.
        #[test]
        fn relaxed_dp_nonnegative_and_symmetric(m0 in 0.0f64..1.0, m1 in 0.0f64..1.0) {
            let mut t = ExpressionTape::new();
            let h0 = t.variable(m0);
            let h1 = t.variable(m1);
            let d01 = relaxed_dp(&mut t, h0, h1);
            let d10 = relaxed_dp(&mut t, h1, h0);
            prop_assert!(t.value(d01) >= 0.0);
            prop_assert_eq!(t.value(d01), t.value(d10));
            let dself = relaxed_dp(&mut t, h0, h0);
            prop_assert_eq!(t.value(dself), 0.0);
        }

        /// Hard metrics obey their ranges.
        #[test]
        fn hard_metric_ranges(rows in proptest::collection::vec(
            (0u8..2, 0.0f64..1.0, 0u8..2), 16..64)
        ) {
            let p = preds_from(&rows);
            if let Ok(v) = hard_dp(&p, 0.5) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Ok(v) = hard_eo(&p, 0.5) {
                prop_assert!((0.0..=2.0).contains(&v));
            }
            if let Ok(v) = eop_ratio(&p, 0.5) {
                // 0 only when the a=0 group has no true positives at all.
                prop_assert!(v.is_finite() && v >= 0.0);
            }
            if let Ok(v) = pp_diff(&p, 0.5) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        /// Average precision lies in (0,1] and is invariant under strictly
        /// monotone transforms of the scores.
        #[test]
        fn ap_range_and_monotone_invariance(
            pairs in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 4..32),
        ) {
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
            let mut labels: Vec<u8> = pairs.iter().map(|(_, y)| *y).collect();
            if labels.iter().all(|&y| y == 0) {
                labels[0] = 1;
            }
            let ap = average_precision(&scores, &labels).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
            // An affine map with positive slope is strictly monotone; stable
            // sort keeps equal keys in input order on both sides.
            let transformed: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
            let ap2 = average_precision(&transformed, &labels).unwrap();
            prop_assert!((ap - ap2).abs() < 1e-12);
        }
    }
}
