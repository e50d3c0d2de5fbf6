//! The assembled network: backbone pyramid, per-block point heads, hard
//! top-k selection, and the optional fusion head.
//!
//! Ablation toggles nest: the point heads always exist (they produce the
//! per-block scores and the base loss term), selection adds the selected
//! and flattening terms, and the combiner — which consumes selected
//! features — requires selection.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::combiner::{Combiner, CombinerConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle, LossWeights};
use crate::nn::{LinearParams, ParamStore, TapeBinding};
use crate::scalar::Real;
use crate::selector::{classify_points, select, PointLogits, SelectionResult};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Reference per-block selection counts, finest block first. Assumes large
/// input maps; small maps are capped at half their point count so a dropped
/// set always exists.
const SELECT_TABLE: [usize; 4] = [256, 128, 64, 32];

/// Per-block defaults: `min(reference count, ceil(points/2))`. Blocks past
/// the reference table reuse its last entry.
pub fn default_num_selects(backbone: &BackboneConfig) -> Vec<usize> {
    (1..=backbone.num_blocks)
        .map(|l| {
            let base = SELECT_TABLE[(l - 1).min(SELECT_TABLE.len() - 1)];
            let r = backbone.block_resolution(l);
            let points = r * r;
            base.min(points.div_ceil(2)).max(1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub selector_enabled: bool,
    /// One entry per block; consulted only when selection is enabled.
    pub num_selects: Vec<usize>,
    pub combiner_enabled: bool,
    pub combiner: CombinerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let num_selects = default_num_selects(&backbone);
        ModelConfig {
            backbone,
            num_classes: 200,
            selector_enabled: true,
            num_selects,
            combiner_enabled: true,
            combiner: CombinerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::invalid("model", "need at least two classes"));
        }
        if self.selector_enabled {
            if self.num_selects.len() != self.backbone.num_blocks {
                return Err(Error::invalid(
                    "model",
                    format!(
                        "{} selection counts for {} blocks",
                        self.num_selects.len(),
                        self.backbone.num_blocks
                    ),
                ));
            }
            for (i, &k) in self.num_selects.iter().enumerate() {
                let r = self.backbone.block_resolution(i + 1);
                let points = r * r;
                if k == 0 || k > points {
                    return Err(Error::invalid(
                        "model",
                        format!(
                            "block {} selects {k} of {points} points",
                            i + 1
                        ),
                    ));
                }
            }
        }
        if self.combiner_enabled {
            if !self.selector_enabled {
                return Err(Error::invalid(
                    "model",
                    "combiner consumes selected features; enable the selector",
                ));
            }
            self.combiner.validate()?;
            let w0 = self.backbone.feature_width(1);
            if (2..=self.backbone.num_blocks).any(|l| self.backbone.feature_width(l) != w0) {
                return Err(Error::invalid(
                    "model",
                    "combiner needs one feature width across blocks \
                     (enable fusion or use uniform block widths)",
                ));
            }
        }
        Ok(())
    }

    /// Total selected points across blocks — the combiner's node count.
    pub fn node_count(&self) -> usize {
        self.num_selects.iter().sum()
    }

    /// Scoring branches at evaluation: one per block, plus the fusion head.
    pub fn num_heads(&self) -> usize {
        self.backbone.num_blocks + usize::from(self.combiner_enabled)
    }
}

/// One image's worth of network outputs on a tape.
#[derive(Debug)]
pub struct Forward {
    pub point_logits: Vec<PointLogits>,
    /// Per block: the `[P, C]` feature-point matrix the head classified.
    pub points: Vec<Var>,
    /// Empty when selection is disabled.
    pub selections: Vec<SelectionResult>,
    /// Fusion head scores `[1, C']`, when the combiner is enabled.
    pub combiner_scores: Option<Var>,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    /// Per-block point classifiers, finest block first.
    pub heads: Vec<LinearParams>,
    pub combiner: Option<Combiner>,
}

impl Model {
    /// Parameter creation order is the checkpoint's block order: backbone
    /// (convs, then fusion projections), point heads by block, combiner.
    pub fn create<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::create(store, rng, cfg.backbone.clone())?;
        let mut heads = Vec::with_capacity(cfg.backbone.num_blocks);
        for l in 1..=cfg.backbone.num_blocks {
            heads.push(LinearParams::create(
                store,
                rng,
                &format!("selector.block{l}.head"),
                cfg.backbone.feature_width(l),
                cfg.num_classes,
            )?);
        }
        let combiner = if cfg.combiner_enabled {
            Some(Combiner::create(
                store,
                rng,
                cfg.combiner.clone(),
                cfg.node_count(),
                cfg.backbone.feature_width(1),
                cfg.num_classes,
            )?)
        } else {
            None
        };
        Ok(Model { cfg, backbone, heads, combiner })
    }

    /// Run one image through every enabled stage.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        image: &Tensor<F>,
    ) -> Result<Forward> {
        // pixels arrive in [0, 1]; center to [-1, 1] so the first conv sees
        // zero-mean input (the init assumes it)
        let mut centered = image.clone();
        let (half, two) = (F::from_f64(0.5), F::from_f64(2.0));
        for v in centered.data_mut() {
            *v = (*v - half) * two;
        }
        let img = tape.constant(centered);
        let maps = self.backbone.feature_maps(tape, binding, img)?;
        let mut point_logits = Vec::with_capacity(maps.len());
        let mut points = Vec::with_capacity(maps.len());
        let mut selections = Vec::new();
        for (map, head) in maps.iter().zip(&self.heads) {
            let (pl, pts) = classify_points(tape, binding, head, map)?;
            if self.cfg.selector_enabled {
                let k = self.cfg.num_selects[map.block_index - 1];
                selections.push(select(tape, &pl, pts, k)?);
            }
            point_logits.push(pl);
            points.push(pts);
        }
        let combiner_scores = match &self.combiner {
            Some(c) => Some(c.forward(tape, binding, &selections)?),
            None => None,
        };
        Ok(Forward { point_logits, points, selections, combiner_scores })
    }

    /// The full training objective for one image.
    pub fn loss<F: Real>(
        &self,
        tape: &mut Tape<F>,
        fwd: &Forward,
        label: usize,
        weights: &LossWeights,
    ) -> Result<LossBundle> {
        total_loss(
            tape,
            &fwd.point_logits,
            &fwd.selections,
            fwd.combiner_scores,
            label,
            weights,
        )
    }
}

/// Mean class distribution over all of a block's points — the block's
/// evaluation score vector.
pub fn block_distribution<F: Real>(tape: &Tape<F>, pl: &PointLogits) -> Vec<f64> {
    mean_rows(tape, pl, None)
}

/// Mean class distribution over a subset of point rows; `None` if the
/// subset is empty.
pub fn rows_distribution<F: Real>(
    tape: &Tape<F>,
    pl: &PointLogits,
    rows: &[usize],
) -> Option<Vec<f64>> {
    if rows.is_empty() {
        None
    } else {
        Some(mean_rows(tape, pl, Some(rows)))
    }
}

fn mean_rows<F: Real>(tape: &Tape<F>, pl: &PointLogits, rows: Option<&[usize]>) -> Vec<f64> {
    let probs = tape.value(pl.probs);
    let classes = probs.shape()[1];
    let data = probs.data();
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..probs.shape()[0]).collect();
            &all
        }
    };
    let mut mean = vec![0.0f64; classes];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(&data[r * classes..(r + 1) * classes]) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    mean
}

/// Softmax of the fusion head's raw scores — its evaluation score vector.
pub fn combiner_distribution<F: Real>(tape: &Tape<F>, scores: Var) -> Vec<f64> {
    let raw: Vec<f64> = tape.value(scores).data().iter().map(|v| v.as_f64()).collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                num_blocks: 2,
                input_resolution: 8,
                widths: vec![4, 8],
                fpn_width: 8,
                fpn_enabled: true,
            },
            num_classes: 3,
            selector_enabled: true,
            num_selects: vec![4, 2],
            combiner_enabled: true,
            combiner: CombinerConfig {
                pool_ratios: vec![0.5],
                hidden: 8,
                ..CombinerConfig::default()
            },
        }
    }

    fn random_image(seed: u64, r: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![3, r, r],
            (0..3 * r * r).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_selection_counts_cap_at_half_the_points() {
        // 64x64 input: block point counts 1024, 256, 64, 16
        let counts = default_num_selects(&BackboneConfig::default());
        assert_eq!(counts, vec![256, 128, 32, 8]);
        // micro scale: 16 and 4 points
        let counts = default_num_selects(&micro_cfg().backbone);
        assert_eq!(counts, vec![8, 2]);
    }

    #[test]
    fn config_validation_enforces_the_toggle_nesting() {
        let mut cfg = micro_cfg();
        cfg.selector_enabled = false;
        assert!(cfg.validate().is_err()); // combiner without selector
        cfg.combiner_enabled = false;
        assert!(cfg.validate().is_ok());

        let mut cfg = micro_cfg();
        cfg.num_selects = vec![99, 2]; // block 1 has 16 points
        assert!(cfg.validate().is_err());

        let mut cfg = micro_cfg();
        cfg.backbone.fpn_enabled = false; // widths 4 and 8 diverge
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_produces_the_expected_shapes() {
        let cfg = micro_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::create(&mut store, &mut rng, cfg).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &random_image(2, 8)).unwrap();

        assert_eq!(fwd.point_logits.len(), 2);
        assert_eq!(tape.value(fwd.point_logits[0].logits).shape(), &[16, 3]);
        assert_eq!(tape.value(fwd.point_logits[1].logits).shape(), &[4, 3]);
        assert_eq!(fwd.selections[0].num_selected(), 4);
        assert_eq!(fwd.selections[1].num_selected(), 2);
        let scores = fwd.combiner_scores.unwrap();
        assert_eq!(tape.value(scores).shape(), &[1, 3]);
        assert_eq!(model.cfg.num_heads(), 3);
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let cfg = micro_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::create(&mut store, &mut rng, cfg).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &random_image(4, 8)).unwrap();
        let weights = LossWeights { lambda_s: 0.5, ..LossWeights::default() };
        let bundle = model.loss(&mut tape, &fwd, 1, &weights).unwrap();
        tape.backward(bundle.total).unwrap();
        for (p, &v) in store.iter().zip(binding.all()) {
            let g = tape
                .grad(v)
                .unwrap_or_else(|| panic!("no gradient for {}", p.name));
            assert!(g.is_finite(), "non-finite gradient for {}", p.name);
        }
    }

    #[test]
    fn ablations_shrink_the_output_set() {
        // selector off: no selections, zero selected/flatten terms
        let mut cfg = micro_cfg();
        cfg.combiner_enabled = false;
        cfg.selector_enabled = false;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::create(&mut store, &mut rng, cfg).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &random_image(6, 8)).unwrap();
        assert!(fwd.selections.is_empty());
        assert!(fwd.combiner_scores.is_none());
        let bundle = model
            .loss(&mut tape, &fwd, 0, &LossWeights::default())
            .unwrap();
        assert_eq!(tape.value(bundle.l_s).item(), 0.0);
        assert_eq!(tape.value(bundle.l_n).item(), 0.0);
        assert!(bundle.l_c.is_none());
        // loss reduces to the block-average term
        let got = tape.value(bundle.total).item();
        let want = tape.value(bundle.l_b).item();
        assert!((got - want).abs() < 1e-15);

        // combiner off, selector on: selections exist, no fusion scores
        let mut cfg = micro_cfg();
        cfg.combiner_enabled = false;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::create(&mut store, &mut rng, cfg).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &random_image(6, 8)).unwrap();
        assert_eq!(fwd.selections.len(), 2);
        assert!(fwd.combiner_scores.is_none());
        assert_eq!(model.cfg.num_heads(), 2);
    }

    #[test]
    fn forward_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let model = Model::create(&mut store, &mut rng, micro_cfg()).unwrap();
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let fwd = model.forward(&mut tape, &binding, &random_image(8, 8)).unwrap();
            tape.value(fwd.combiner_scores.unwrap()).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn head_distributions_are_probability_vectors() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::create(&mut store, &mut rng, micro_cfg()).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &random_image(10, 8)).unwrap();
        for pl in &fwd.point_logits {
            let z = block_distribution(&tape, pl);
            assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // the mean over the selected subset is also a distribution
            let sr = &fwd.selections[pl.block_index - 1];
            let h = rows_distribution(&tape, pl, &sr.selected_indices).unwrap();
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(rows_distribution(&tape, pl, &[]).is_none());
        }
        let c = combiner_distribution(&tape, fwd.combiner_scores.unwrap());
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(c.iter().all(|&v| v > 0.0));
    }
}
