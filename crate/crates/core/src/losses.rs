//! The four-term training objective.
//!
//! Per image: a block-average classification term over every feature point,
//! a classification term over the selected points (weight 0 by default, but
//! always computed and reported), a flattening term pushing each dropped
//! point's class distribution toward uniform, and the fusion head's own
//! classification term. The total is a weighted sum folded left in the
//! fixed order (block, selected, flatten, fusion) so reported parts re-add
//! to the total bit-exactly.
//!
//! Cross-entropy terms guard the log with a tiny additive floor
//! (`log(p + 1e-12)`) so a saturated wrong prediction still receives a
//! gradient; the flattening argument is clamped to [1e-6, 1-1e-6], giving
//! that term a fixed finite floor per block.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::selector::{PointLogits, SelectionResult};
use crate::tape::{Tape, Var};

/// Floor (and headroom) clamped onto the flattening term's argument
/// before it meets a logarithm.
pub const LOG_CLAMP_EPS: f64 = 1e-6;

/// Additive guard inside cross-entropy logs: `-log(p + LOG_GUARD)`.
/// Unlike a clamp this keeps the gradient alive when a head is saturated
/// on the wrong class (p ~ 0), which is exactly when it must recover;
/// the softmax jacobian upstream keeps the product bounded.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_s: f64,
    pub lambda_n: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_b: 1.0,
            lambda_s: 0.0,
            lambda_n: 5.0,
            lambda_c: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_b, self.lambda_s, self.lambda_n, self.lambda_c];
        if all.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid(
                "loss weights",
                "every lambda must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// All per-image loss terms plus per-block diagnostic distributions.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_b: Var,
    pub l_s: Var,
    pub l_n: Var,
    pub l_c: Option<Var>,
    pub total: Var,
    /// Per block: mean class distribution over all points.
    pub z: Vec<Var>,
    /// Per block: mean class distribution over selected points.
    pub h: Vec<Var>,
    /// Per block: mean class distribution over dropped points.
    pub n: Vec<Var>,
}

/// Element `idx` of a rank-1 vector, as a one-element tensor.
fn pick<F: Real>(tape: &mut Tape<F>, v: Var, idx: usize) -> Result<Var> {
    let len = tape.value(v).numel();
    let col = tape.reshape(v, vec![len, 1])?;
    let row = tape.gather_rows(col, &[idx])?;
    tape.reshape(row, vec![1])
}

/// `-log(probs[label] + LOG_GUARD)` for a rank-1 probability vector.
fn neg_log_at<F: Real>(tape: &mut Tape<F>, probs: Var, label: usize) -> Result<Var> {
    let p = pick(tape, probs, label)?;
    let guarded = tape.affine(p, F::one(), F::from_f64(LOG_GUARD));
    let lp = tape.log(guarded);
    Ok(tape.affine(lp, -F::one(), F::zero()))
}

fn check_label<F: Real>(tape: &Tape<F>, pls: &[PointLogits], label: usize) -> Result<usize> {
    if pls.is_empty() {
        return Err(Error::invalid("losses", "no blocks"));
    }
    let classes = tape.value(pls[0].probs).shape()[1];
    if label >= classes {
        return Err(Error::invalid(
            "losses",
            format!("label {label} out of range for {classes} classes"),
        ));
    }
    Ok(classes)
}

fn sum_blocks<F: Real>(tape: &mut Tape<F>, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Average every point's class distribution per block, then sum the
/// per-block cross-entropies of those averages.
pub fn block_average_loss<F: Real>(
    tape: &mut Tape<F>,
    pls: &[PointLogits],
    label: usize,
) -> Result<(Var, Vec<Var>)> {
    check_label(tape, pls, label)?;
    let mut terms = Vec::with_capacity(pls.len());
    let mut z = Vec::with_capacity(pls.len());
    for pl in pls {
        let z_l = tape.mean_axis(pl.probs, 0)?;
        terms.push(neg_log_at(tape, z_l, label)?);
        z.push(z_l);
    }
    Ok((sum_blocks(tape, &terms)?, z))
}

/// Same cross-entropy-of-averages, over the selected points only.
pub fn selected_loss<F: Real>(
    tape: &mut Tape<F>,
    pls: &[PointLogits],
    srs: &[SelectionResult],
    label: usize,
) -> Result<(Var, Vec<Var>)> {
    check_label(tape, pls, label)?;
    if srs.len() != pls.len() {
        return Err(Error::invalid(
            "selected_loss",
            format!("{} selections for {} blocks", srs.len(), pls.len()),
        ));
    }
    let mut terms = Vec::with_capacity(pls.len());
    let mut h = Vec::with_capacity(pls.len());
    for (pl, sr) in pls.iter().zip(srs) {
        if sr.selected_indices.is_empty() {
            return Err(Error::invalid(
                "selected_loss",
                format!("block {} has an empty selection", sr.block_index),
            ));
        }
        let gathered = tape.gather_rows(pl.probs, &sr.selected_indices)?;
        let h_l = tape.mean_axis(gathered, 0)?;
        terms.push(neg_log_at(tape, h_l, label)?);
        h.push(h_l);
    }
    Ok((sum_blocks(tape, &terms)?, h))
}

/// Flattening term: for every dropped point, `sum_i -log(1 - p_i)` over its
/// class distribution, averaged over the block's dropped points and summed
/// over blocks. Uniquely minimized when each dropped point is uniform, at
/// `-C' * ln(1 - 1/C')` per block.
pub fn flatten_loss<F: Real>(
    tape: &mut Tape<F>,
    pls: &[PointLogits],
    srs: &[SelectionResult],
) -> Result<(Var, Vec<Var>)> {
    if pls.is_empty() {
        return Err(Error::invalid("losses", "no blocks"));
    }
    if srs.len() != pls.len() {
        return Err(Error::invalid(
            "flatten_loss",
            format!("{} selections for {} blocks", srs.len(), pls.len()),
        ));
    }
    let classes = tape.value(pls[0].probs).shape()[1];
    let eps = F::from_f64(LOG_CLAMP_EPS);
    let mut terms = Vec::with_capacity(pls.len());
    let mut n = Vec::with_capacity(pls.len());
    for (pl, sr) in pls.iter().zip(srs) {
        if sr.dropped_indices.is_empty() {
            eprintln!(
                "warning: block {} drops no points; flattening term contributes 0",
                sr.block_index
            );
            terms.push(tape.scalar(F::zero()));
            n.push(tape.constant(crate::tensor::Tensor::zeros(vec![classes])?));
            continue;
        }
        let dropped = tape.gather_rows(pl.probs, &sr.dropped_indices)?;
        let clamped = tape.clamp(dropped, eps, F::one() - eps);
        let one_minus = tape.affine(clamped, -F::one(), F::one());
        let lg = tape.log(one_minus);
        let neg = tape.affine(lg, -F::one(), F::zero());
        let per_point = tape.sum_axis(neg, 1)?;
        terms.push(tape.mean_axis(per_point, 0)?);
        n.push(tape.mean_axis(dropped, 0)?);
    }
    Ok((sum_blocks(tape, &terms)?, n))
}

/// Cross-entropy of the fusion head's score vector `[1, C']`.
pub fn combiner_loss<F: Real>(tape: &mut Tape<F>, scores: Var, label: usize) -> Result<Var> {
    let shape = tape.value(scores).shape().to_vec();
    if shape.len() != 2 || shape[0] != 1 {
        return Err(Error::InvalidShape {
            op: "combiner_loss",
            shape,
            reason: "expected [1, classes]".into(),
        });
    }
    if label >= shape[1] {
        return Err(Error::invalid(
            "combiner_loss",
            format!("label {label} out of range for {} classes", shape[1]),
        ));
    }
    let probs = tape.softmax(scores, 1)?;
    let flat = tape.reshape(probs, vec![shape[1]])?;
    neg_log_at(tape, flat, label)
}

/// Left fold of the weighted terms in the fixed order (b, s, n, c).
pub fn weighted_total<F: Real>(
    tape: &mut Tape<F>,
    w: &LossWeights,
    l_b: Var,
    l_s: Var,
    l_n: Var,
    l_c: Option<Var>,
) -> Result<Var> {
    w.validate()?;
    let tb = tape.affine(l_b, F::from_f64(w.lambda_b), F::zero());
    let ts = tape.affine(l_s, F::from_f64(w.lambda_s), F::zero());
    let tn = tape.affine(l_n, F::from_f64(w.lambda_n), F::zero());
    let mut total = tape.add(tb, ts)?;
    total = tape.add(total, tn)?;
    if let Some(c) = l_c {
        let tc = tape.affine(c, F::from_f64(w.lambda_c), F::zero());
        total = tape.add(total, tc)?;
    }
    Ok(total)
}

/// Compute every term and assemble the bundle for one image.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    pls: &[PointLogits],
    srs: &[SelectionResult],
    combiner_scores: Option<Var>,
    label: usize,
    w: &LossWeights,
) -> Result<LossBundle> {
    if !srs.is_empty() && srs.len() != pls.len() {
        return Err(Error::invalid(
            "losses",
            format!("{} selections for {} blocks", srs.len(), pls.len()),
        ));
    }
    let (l_b, z) = block_average_loss(tape, pls, label)?;
    // No selections at all means selection is switched off: the selected and
    // flattening terms vanish instead of erroring.
    let (l_s, h) = if srs.is_empty() {
        (tape.scalar(F::zero()), Vec::new())
    } else {
        selected_loss(tape, pls, srs, label)?
    };
    let (l_n, n) = if srs.is_empty() {
        (tape.scalar(F::zero()), Vec::new())
    } else {
        flatten_loss(tape, pls, srs)?
    };
    let l_c = match combiner_scores {
        Some(scores) => Some(combiner_loss(tape, scores, label)?),
        None => None,
    };
    let total = weighted_total(tape, w, l_b, l_s, l_n, l_c)?;
    Ok(LossBundle { l_b, l_s, l_n, l_c, total, z, h, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::select;
    use crate::tensor::Tensor;

    fn pl_from(tape: &mut Tape<f64>, h: usize, w: usize, rows: &[Vec<f64>]) -> PointLogits {
        let classes = rows[0].len();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let logits = tape.leaf(Tensor::new(vec![rows.len(), classes], data).unwrap(), true);
        PointLogits::from_logits(tape, 1, h, w, logits).unwrap()
    }

    #[test]
    fn perfect_single_point_prediction_costs_nothing() {
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 1, 1, &[vec![1000.0, 0.0, 0.0]]);
        let (l_b, z) = block_average_loss(&mut tape, &[pl], 0).unwrap();
        // -ln(1 + guard) is a hair below zero
        assert!(tape.value(l_b).item().abs() < 1e-11);
        assert_eq!(tape.value(z[0]).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_probs_cost_log_class_count() {
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 1, 2, &[vec![0.0; 200], vec![0.0; 200]]);
        let (l_b, _) = block_average_loss(&mut tape, &[pl], 7).unwrap();
        assert!((tape.value(l_b).item() - 200f64.ln()).abs() < 1e-9);
        assert!((tape.value(l_b).item() - 5.2983).abs() < 1e-4);
    }

    #[test]
    fn block_average_is_the_mean_of_point_distributions() {
        let mut tape = Tape::new();
        let rows = vec![vec![0.4, -1.0, 2.0], vec![1.5, 0.0, -0.5]];
        let pl = pl_from(&mut tape, 1, 2, &rows);
        let probs = tape.value(pl.probs).data().to_vec();
        let (_, z) = block_average_loss(&mut tape, &[pl], 0).unwrap();
        for i in 0..3 {
            let want = (probs[i] + probs[3 + i]) / 2.0;
            assert!((tape.value(z[0]).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 1, 1, &[vec![0.0, 0.0]]);
        assert!(block_average_loss(&mut tape, &[pl], 2).is_err());
    }

    #[test]
    fn selected_loss_of_perfect_points_is_zero_and_single_point_mean_is_identity() {
        let mut tape = Tape::new();
        let pl = pl_from(
            &mut tape,
            2,
            2,
            &[
                vec![1000.0, 0.0],
                vec![0.0, 0.0],
                vec![900.0, 0.0],
                vec![0.0, 1.0],
            ],
        );
        let points = tape.constant(Tensor::zeros(vec![4, 3]).unwrap());
        let sr = select(&mut tape, &pl, points, 2).unwrap();
        // the two confident points (0 and 2) are exactly the one-hot ones
        assert_eq!(sr.selected_indices, vec![0, 2]);
        let (l_s, h) = selected_loss(&mut tape, &[pl.clone()], &[sr], 0).unwrap();
        assert!(tape.value(l_s).item().abs() < 1e-11);
        assert_eq!(tape.value(h[0]).data(), &[1.0, 0.0]);

        // single selected point: h equals that point's distribution
        let sr1 = select(&mut tape, &pl, points, 1).unwrap();
        let (_, h1) = selected_loss(&mut tape, &[pl.clone()], &[sr1], 0).unwrap();
        let probs = tape.value(pl.probs).data().to_vec();
        assert_eq!(tape.value(h1[0]).data(), &probs[0..2]);
    }

    #[test]
    fn flatten_closed_forms_hold_at_uniform() {
        // C' = 10, every dropped point uniform
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 2, 2, &vec![vec![0.0; 10]; 4]);
        let points = tape.constant(Tensor::zeros(vec![4, 2]).unwrap());
        let sr = select(&mut tape, &pl, points, 1).unwrap();
        let (l_n, n) = flatten_loss(&mut tape, &[pl], &[sr]).unwrap();
        let want10 = -10.0 * (1.0 - 0.1f64).ln();
        assert!((tape.value(l_n).item() - want10).abs() < 1e-12);
        assert!((tape.value(l_n).item() - 1.05361).abs() < 1e-4);
        for &v in tape.value(n[0]).data() {
            assert!((v - 0.1).abs() < 1e-15);
        }

        // C' = 200
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 1, 3, &vec![vec![0.0; 200]; 3]);
        let points = tape.constant(Tensor::zeros(vec![3, 2]).unwrap());
        let sr = select(&mut tape, &pl, points, 1).unwrap();
        let (l_n, _) = flatten_loss(&mut tape, &[pl], &[sr]).unwrap();
        let want200 = -200.0 * (1.0 - 1.0 / 200.0f64).ln();
        assert!((tape.value(l_n).item() - want200).abs() < 1e-12);
        assert!((tape.value(l_n).item() - 1.00250).abs() < 1e-4);
    }

    #[test]
    fn confident_dropped_point_pays_the_clamp_ceiling() {
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 1, 2, &[vec![1000.0, 0.0], vec![1000.0, 0.0]]);
        let points = tape.constant(Tensor::zeros(vec![2, 2]).unwrap());
        let sr = select(&mut tape, &pl, points, 1).unwrap();
        let (l_n, _) = flatten_loss(&mut tape, &[pl], &[sr]).unwrap();
        // -ln(eps) for the saturated class, -ln(1 - eps) ~ 0 for the other
        let want = -(LOG_CLAMP_EPS.ln()) - (1.0 - LOG_CLAMP_EPS).ln();
        assert!((tape.value(l_n).item() - want).abs() < 1e-9);
        assert!(tape.value(l_n).item() > 13.0);
    }

    #[test]
    fn empty_dropped_set_contributes_zero() {
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 1, 2, &[vec![0.5, 0.0], vec![0.0, 0.5]]);
        let points = tape.constant(Tensor::zeros(vec![2, 2]).unwrap());
        let sr = select(&mut tape, &pl, points, 2).unwrap();
        let (l_n, _) = flatten_loss(&mut tape, &[pl], &[sr]).unwrap();
        assert_eq!(tape.value(l_n).item(), 0.0);
    }

    #[test]
    fn flatten_gradient_pushes_peaked_points_toward_uniform() {
        // point 0 is most confident and gets selected; the dropped point 1
        // is itself peaked at class 0
        let mut tape = Tape::new();
        let logits =
            tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 0.0, 2.0, 0.0]).unwrap(), true);
        let pl = PointLogits::from_logits(&mut tape, 1, 1, 2, logits).unwrap();
        let points = tape.constant(Tensor::zeros(vec![2, 2]).unwrap());
        let sr = select(&mut tape, &pl, points, 1).unwrap();
        assert_eq!(sr.dropped_indices, vec![1]);
        let (l_n, _) = flatten_loss(&mut tape, &[pl], &[sr]).unwrap();
        tape.backward(l_n).unwrap();
        let g = tape.grad(logits).unwrap().data();
        // dropped point: descending its dominant logit lowers the loss
        assert!(g[2] > 0.0, "grad {g:?}");
        assert!(g[3] < 0.0, "grad {g:?}");
        // selected point's logits get no flattening gradient
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn weighted_total_matches_hand_arithmetic() {
        let mut tape = Tape::new();
        let (b, s, n, c) = (
            tape.scalar(2.0),
            tape.scalar(9.0),
            tape.scalar(0.5),
            tape.scalar(3.0),
        );
        let w = LossWeights::default();
        let total = weighted_total(&mut tape, &w, b, s, n, Some(c)).unwrap();
        assert_eq!(tape.value(total).item(), 7.5);
    }

    #[test]
    fn decomposition_is_bit_exact() {
        let mut tape = Tape::new();
        let (b, s, n, c) = (
            tape.scalar(0.7310291),
            tape.scalar(1.2345678),
            tape.scalar(0.0912837),
            tape.scalar(2.5647389),
        );
        let w = LossWeights {
            lambda_b: 1.0,
            lambda_s: 0.25,
            lambda_n: 5.0,
            lambda_c: 1.5,
        };
        let total = weighted_total(&mut tape, &w, b, s, n, Some(c)).unwrap();
        let fold = ((w.lambda_b * 0.7310291 + w.lambda_s * 1.2345678)
            + w.lambda_n * 0.0912837)
            + w.lambda_c * 2.5647389;
        assert_eq!(tape.value(total).item(), fold);
    }

    #[test]
    fn all_zero_weights_zero_the_total_and_the_gradients() {
        let mut tape = Tape::new();
        let pl = pl_from(&mut tape, 1, 2, &[vec![0.3, -0.4], vec![1.0, 0.2]]);
        let logits_var = pl.logits;
        let points = tape.constant(Tensor::zeros(vec![2, 2]).unwrap());
        let sr = select(&mut tape, &pl, points, 1).unwrap();
        let w = LossWeights {
            lambda_b: 0.0,
            lambda_s: 0.0,
            lambda_n: 0.0,
            lambda_c: 0.0,
        };
        let bundle = total_loss(&mut tape, &[pl], &[sr], None, 0, &w).unwrap();
        assert_eq!(tape.value(bundle.total).item(), 0.0);
        tape.backward(bundle.total).unwrap();
        assert!(tape.grad(logits_var).unwrap().data().iter().all(|&g| g == 0.0));
    }

    /// With the selected-term weight at 0, leaving the term out of the
    /// graph entirely must not change any gradient bit.
    #[test]
    fn zero_weighted_selected_term_is_graph_removal_exact() {
        let rows = vec![
            vec![0.9, -0.2, 0.4],
            vec![-1.0, 0.3, 0.8],
            vec![0.1, 0.1, -0.6],
            vec![2.0, -0.5, 0.0],
        ];
        let grads_with = {
            let mut tape = Tape::new();
            let pl = pl_from(&mut tape, 2, 2, &rows);
            let lv = pl.logits;
            let points = tape.constant(Tensor::zeros(vec![4, 2]).unwrap());
            let sr = select(&mut tape, &pl, points, 2).unwrap();
            let w = LossWeights::default(); // lambda_s = 0
            let bundle = total_loss(&mut tape, &[pl], &[sr], None, 1, &w).unwrap();
            tape.backward(bundle.total).unwrap();
            tape.grad(lv).unwrap().data().to_vec()
        };
        let grads_without = {
            let mut tape = Tape::new();
            let pl = pl_from(&mut tape, 2, 2, &rows);
            let lv = pl.logits;
            let points = tape.constant(Tensor::zeros(vec![4, 2]).unwrap());
            let sr = select(&mut tape, &pl, points, 2).unwrap();
            let w = LossWeights::default();
            let (l_b, _) = block_average_loss(&mut tape, &[pl.clone()], 1).unwrap();
            let (l_n, _) = flatten_loss(&mut tape, &[pl], &[sr]).unwrap();
            // same fold, selected term absent: scale-0 affine contributes
            // no value and blocks all gradient, so wiring a zero scalar in
            // its place is the exact same computation
            let zero = tape.scalar(0.0);
            let total = weighted_total(&mut tape, &w, l_b, zero, l_n, None).unwrap();
            tape.backward(total).unwrap();
            tape.grad(lv).unwrap().data().to_vec()
        };
        assert_eq!(grads_with, grads_without);
    }

    #[test]
    fn combiner_scores_feed_a_plain_cross_entropy() {
        let mut tape = Tape::new();
        let scores = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let l_c = combiner_loss(&mut tape, scores, 2).unwrap();
        assert!((tape.value(l_c).item() - 3f64.ln()).abs() < 1e-9);
        assert!(combiner_loss(&mut tape, scores, 3).is_err());
    }
}
