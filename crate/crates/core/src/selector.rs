//! Weakly supervised feature-point selection.
//!
//! Every spatial position of a block's map is classified by that block's
//! linear head; positions are then ranked by their top-class softmax
//! confidence and the `k` most confident are kept as discriminative, the
//! rest marked dropped. The ranking itself is not differentiated — hard
//! top-k, with gradients reaching the heads only through the loss terms
//! computed on the gathered values.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{LinearParams, TapeBinding};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

/// Per-point class scores for one block's map, points in row-major spatial
/// order.
#[derive(Debug, Clone)]
pub struct PointLogits {
    pub block_index: usize,
    pub height: usize,
    pub width: usize,
    /// `[H*W, num_classes]`
    pub logits: Var,
    /// Softmax of `logits` along the class axis.
    pub probs: Var,
}

impl PointLogits {
    /// Wrap raw per-point logits (mostly for tests and probes).
    pub fn from_logits<F: Real>(
        tape: &mut Tape<F>,
        block_index: usize,
        height: usize,
        width: usize,
        logits: Var,
    ) -> Result<Self> {
        let shape = tape.value(logits).shape();
        if shape.len() != 2 || shape[0] != height * width {
            return Err(Error::InvalidShape {
                op: "point_logits",
                shape: shape.to_vec(),
                reason: format!("expected [{}, classes]", height * width),
            });
        }
        let probs = tape.softmax(logits, 1)?;
        Ok(PointLogits { block_index, height, width, logits, probs })
    }

    /// Top-class confidence of every point, row-major.
    pub fn max_probs<F: Real>(&self, tape: &Tape<F>) -> Vec<f64> {
        let t = tape.value(self.probs);
        let classes = t.shape()[1];
        t.data()
            .chunks(classes)
            .map(|row| row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64())))
            .collect()
    }
}

/// Rearrange a `[C, H, W]` map into per-point rows `[H*W, C]`.
pub fn points_matrix<F: Real>(tape: &mut Tape<F>, fmap: &FeatureMap) -> Result<Var> {
    let shape = tape.value(fmap.features).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "points_matrix",
            shape,
            reason: "expected [c,h,w]".into(),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(fmap.features, vec![c, h * w])?;
    tape.transpose2d(flat)
}

/// Apply a block's shared linear head to every feature point.
pub fn classify_points<F: Real>(
    tape: &mut Tape<F>,
    binding: &TapeBinding,
    head: &LinearParams,
    fmap: &FeatureMap,
) -> Result<(PointLogits, Var)> {
    let points = points_matrix(tape, fmap)?;
    let point_width = tape.value(points).shape()[1];
    let head_width = tape.value(binding.var(head.w)).shape()[1];
    if point_width != head_width {
        return Err(Error::ShapeMismatch {
            op: "classify_points",
            lhs: vec![point_width],
            rhs: vec![head_width],
        });
    }
    let map_shape = tape.value(fmap.features).shape();
    let (h, w) = (map_shape[1], map_shape[2]);
    let logits = head.apply(tape, binding, points)?;
    let pl = PointLogits::from_logits(tape, fmap.block_index, h, w, logits)?;
    Ok((pl, points))
}

/// Outcome of hard top-k selection over one block's points.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub block_index: usize,
    pub height: usize,
    pub width: usize,
    /// Confidence-descending; ties broken by ascending spatial index.
    pub selected_indices: Vec<usize>,
    /// Ascending spatial order.
    pub dropped_indices: Vec<usize>,
    /// Row-major `H*W` bytes, 1 = selected.
    pub mask: Vec<u8>,
    /// `[k, C]` rows gathered from the feature map, confidence order.
    /// Absent only after a threshold filter empties the selection.
    pub selected_features: Option<Var>,
    pub confidence_threshold: Option<f64>,
}

impl SelectionResult {
    pub fn num_selected(&self) -> usize {
        self.selected_indices.len()
    }
}

/// Rank points by top-class confidence and keep the `k` strongest.
pub fn select<F: Real>(
    tape: &mut Tape<F>,
    pl: &PointLogits,
    points: Var,
    k: usize,
) -> Result<SelectionResult> {
    let total = pl.height * pl.width;
    if k == 0 || k > total {
        return Err(Error::invalid(
            "select",
            format!("k = {k} outside 1..={total}"),
        ));
    }
    let conf = pl.max_probs(tape);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        conf[b]
            .partial_cmp(&conf[a])
            .expect("softmax confidences are finite")
            .then(a.cmp(&b))
    });
    let selected_indices = order[..k].to_vec();
    let mut dropped_indices = order[k..].to_vec();
    dropped_indices.sort_unstable();
    let mut mask = vec![0u8; total];
    for &i in &selected_indices {
        mask[i] = 1;
    }
    let selected_features = Some(tape.gather_rows(points, &selected_indices)?);
    Ok(SelectionResult {
        block_index: pl.block_index,
        height: pl.height,
        width: pl.width,
        selected_indices,
        dropped_indices,
        mask,
        selected_features,
        confidence_threshold: None,
    })
}

/// Evaluation-time refinement: drop selected points whose confidence falls
/// below `tau`. Never used while training; may empty the selection, in
/// which case callers fall back to the block-average score.
pub fn threshold_filter<F: Real>(
    tape: &mut Tape<F>,
    sr: &SelectionResult,
    pl: &PointLogits,
    points: Var,
    tau: f64,
) -> Result<SelectionResult> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(
            "threshold_filter",
            format!("tau = {tau} outside (0,1)"),
        ));
    }
    let conf = pl.max_probs(tape);
    let selected_indices: Vec<usize> = sr
        .selected_indices
        .iter()
        .copied()
        .filter(|&i| conf[i] >= tau)
        .collect();
    let mut dropped_indices: Vec<usize> = sr
        .dropped_indices
        .iter()
        .copied()
        .chain(sr.selected_indices.iter().copied().filter(|&i| conf[i] < tau))
        .collect();
    dropped_indices.sort_unstable();
    let mut mask = vec![0u8; sr.height * sr.width];
    for &i in &selected_indices {
        mask[i] = 1;
    }
    let selected_features = if selected_indices.is_empty() {
        None
    } else {
        Some(tape.gather_rows(points, &selected_indices)?)
    };
    Ok(SelectionResult {
        block_index: sr.block_index,
        height: sr.height,
        width: sr.width,
        selected_indices,
        dropped_indices,
        mask,
        selected_features,
        confidence_threshold: Some(tau),
    })
}
