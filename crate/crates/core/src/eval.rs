//! Evaluation: per-head accuracy, top-k confidence ensembling, optional
//! selected/dropped-region diagnostics, and selection-mask export with a
//! localization hit report.
//!
//! Heads are, in order, each block's mean point distribution and (when
//! enabled) the fusion head's softmax. The top-k ensemble ranks the heads
//! per image by their maximum confidence, averages the k strongest score
//! vectors, and takes the argmax; k = number of heads is plain averaging.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::augment::{test_augment, test_frame_box};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imageio::save_pgm;
use crate::model::{
    block_distribution, combiner_distribution, rows_distribution, Model,
};
use crate::nn::ParamStore;
use crate::scalar::Real;
use crate::selector::threshold_filter;
use crate::tape::Tape;

/// First index of the maximum (ties go to the lower class).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One image's evaluation outputs.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub label: usize,
    /// Per head: a class distribution (sums to 1).
    pub head_scores: Vec<Vec<f64>>,
    pub masks: Vec<BlockMask>,
}

#[derive(Debug, Clone)]
pub struct BlockMask {
    pub block_index: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, 1 = selected.
    pub mask: Vec<u8>,
}

/// Average the k most confident heads' score vectors. With
/// `by_fixed_order`, "most confident" is replaced by "first k in head
/// order" for comparison runs.
pub fn top_k_ensemble(heads: &[Vec<f64>], k: usize, by_fixed_order: bool) -> Result<Vec<f64>> {
    if heads.is_empty() || k == 0 || k > heads.len() {
        return Err(Error::invalid(
            "ensemble",
            format!("k = {k} with {} heads", heads.len()),
        ));
    }
    let mut order: Vec<usize> = (0..heads.len()).collect();
    if !by_fixed_order {
        let conf: Vec<f64> = heads
            .iter()
            .map(|h| h.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        order.sort_by(|&a, &b| {
            conf[b]
                .partial_cmp(&conf[a])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
    }
    let classes = heads[0].len();
    let mut avg = vec![0.0f64; classes];
    for &h in &order[..k] {
        for (a, &v) in avg.iter_mut().zip(&heads[h]) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= k as f64;
    }
    Ok(avg)
}

/// Selected-vs-dropped accuracy for one block (the Table-style region
/// diagnostic).
#[derive(Debug, Clone, Serialize)]
pub struct RegionAccuracy {
    pub block_index: usize,
    pub selected: f64,
    pub dropped: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Confidence floor: block heads score over the filtered selection,
    /// falling back to the all-points average when nothing passes.
    pub threshold: Option<f64>,
    pub per_region: bool,
    pub collect_masks: bool,
    /// Rank ensemble heads by fixed head order instead of confidence.
    pub rank_by_head_order: bool,
}

#[derive(Debug)]
pub struct EvalSummary {
    pub n: usize,
    pub head_accuracy: Vec<f64>,
    /// Entry k-1 is top-k accuracy, k up to the head count.
    pub ensemble_accuracy: Vec<f64>,
    /// True when the last head is the fusion head rather than a block.
    pub fusion_head: bool,
    pub per_region: Option<Vec<RegionAccuracy>>,
    pub records: Vec<EvalRecord>,
}

impl EvalSummary {
    /// The headline number: all heads averaged.
    pub fn accuracy(&self) -> f64 {
        *self.ensemble_accuracy.last().expect("at least one head")
    }
}

/// Score every image in the dataset.
pub fn evaluate<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    if dataset.num_classes() != model.cfg.num_classes {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "dataset has {} classes, model was built for {}",
                dataset.num_classes(),
                model.cfg.num_classes
            ),
        ));
    }
    let num_heads = model.cfg.num_heads();
    let mut head_hits = vec![0usize; num_heads];
    let mut ens_hits = vec![0usize; num_heads];
    let mut region_hits: Vec<(usize, usize, usize, usize)> =
        vec![(0, 0, 0, 0); model.cfg.backbone.num_blocks]; // sel ok, sel n, drop ok, drop n
    let mut records = Vec::with_capacity(dataset.len());

    for index in 0..dataset.len() {
        let item = &dataset.items[index];
        let image = test_augment(&dataset.load(index)?, model.cfg.backbone.input_resolution)?;
        let mut tape: Tape<F> = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &image.cast())?;

        let mut head_scores: Vec<Vec<f64>> = Vec::with_capacity(num_heads);
        for (b, pl) in fwd.point_logits.iter().enumerate() {
            let z = block_distribution(&tape, pl);
            let score = match (opts.threshold, fwd.selections.get(b)) {
                (Some(tau), Some(sr)) => {
                    let filtered =
                        threshold_filter(&mut tape, sr, pl, fwd.points[b], tau)?;
                    rows_distribution(&tape, pl, &filtered.selected_indices).unwrap_or(z)
                }
                _ => z,
            };
            head_scores.push(score);
        }
        if let Some(scores) = fwd.combiner_scores {
            head_scores.push(combiner_distribution(&tape, scores));
        }
        for s in &head_scores {
            let sum: f64 = s.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "evaluate",
                    format!("head scores sum to {sum}, not 1"),
                ));
            }
        }

        for (h, s) in head_scores.iter().enumerate() {
            if argmax(s) == item.class_index {
                head_hits[h] += 1;
            }
        }
        for k in 1..=num_heads {
            let avg = top_k_ensemble(&head_scores, k, opts.rank_by_head_order)?;
            if argmax(&avg) == item.class_index {
                ens_hits[k - 1] += 1;
            }
        }

        if opts.per_region {
            for (b, sr) in fwd.selections.iter().enumerate() {
                let pl = &fwd.point_logits[b];
                if let Some(s) = rows_distribution(&tape, pl, &sr.selected_indices) {
                    region_hits[b].1 += 1;
                    if argmax(&s) == item.class_index {
                        region_hits[b].0 += 1;
                    }
                }
                if let Some(d) = rows_distribution(&tape, pl, &sr.dropped_indices) {
                    region_hits[b].3 += 1;
                    if argmax(&d) == item.class_index {
                        region_hits[b].2 += 1;
                    }
                }
            }
        }

        let masks = if opts.collect_masks {
            fwd.selections
                .iter()
                .map(|sr| BlockMask {
                    block_index: sr.block_index,
                    height: sr.height,
                    width: sr.width,
                    mask: sr.mask.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        records.push(EvalRecord { label: item.class_index, head_scores, masks });
    }

    let n = dataset.len().max(1);
    let per_region = opts.per_region.then(|| {
        region_hits
            .iter()
            .enumerate()
            .map(|(b, &(so, sn, dk, dn))| RegionAccuracy {
                block_index: b + 1,
                selected: so as f64 / sn.max(1) as f64,
                dropped: dk as f64 / dn.max(1) as f64,
            })
            .collect()
    });
    Ok(EvalSummary {
        n: dataset.len(),
        head_accuracy: head_hits.iter().map(|&h| h as f64 / n as f64).collect(),
        ensemble_accuracy: ens_hits.iter().map(|&h| h as f64 / n as f64).collect(),
        fusion_head: model.cfg.combiner_enabled,
        per_region,
        records,
    })
}

/// Localization quality of the coarsest block's selection.
#[derive(Debug, Clone, Serialize)]
pub struct HitReport {
    pub images: usize,
    /// Fraction of selected coarsest-block points whose cell center lands
    /// inside the ground-truth motif box (in test-crop coordinates).
    pub hit_rate: f64,
    /// Expected hit rate of uniform selection: mean clipped motif area
    /// divided by crop area.
    pub chance_rate: f64,
    pub ratio: f64,
}

/// Count coarsest-block selection hits for one image: a selected point
/// hits when its cell's center pixel lies inside the box (half-open, in
/// test-frame coordinates).
pub fn selection_hits(
    selected_indices: &[usize],
    height: usize,
    width: usize,
    input_resolution: usize,
    frame_box: [f64; 4],
) -> usize {
    let stride_y = input_resolution as f64 / height as f64;
    let stride_x = input_resolution as f64 / width as f64;
    selected_indices
        .iter()
        .filter(|&&idx| {
            let (r, c) = (idx / width, idx % width);
            let cy = (r as f64 + 0.5) * stride_y;
            let cx = (c as f64 + 0.5) * stride_x;
            cy >= frame_box[0] && cy < frame_box[2] && cx >= frame_box[1] && cx < frame_box[3]
        })
        .count()
}

/// Export every block's selection mask as a PGM at input resolution
/// (nearest upsampling, 255 = selected) and compute the hit report when
/// ground-truth boxes exist.
pub fn export_masks<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<Option<HitReport>> {
    if !model.cfg.selector_enabled {
        return Err(Error::invalid(
            "export_masks",
            "model has no selector; there are no masks to export",
        ));
    }
    let res = model.cfg.backbone.input_resolution;
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut chance_sum = 0.0f64;
    let mut boxed_images = 0usize;

    for index in 0..dataset.len() {
        let item = &dataset.items[index];
        let image = test_augment(&dataset.load(index)?, res)?;
        let mut tape: Tape<F> = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &image.cast())?;

        let class_dir = out_dir.join(&dataset.classes[item.class_index]);
        fs::create_dir_all(&class_dir)?;
        let stem = Path::new(&item.rel_path)
            .file_stem()
            .unwrap()
            .to_string_lossy()
            .into_owned();
        for sr in &fwd.selections {
            let fy = res / sr.height;
            let fx = res / sr.width;
            let mut big = vec![0u8; res * res];
            for (i, &m) in sr.mask.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                let (r, c) = (i / sr.width, i % sr.width);
                for y in r * fy..(r + 1) * fy {
                    let row = y * res;
                    for x in c * fx..(c + 1) * fx {
                        big[row + x] = 255;
                    }
                }
            }
            save_pgm(
                &class_dir.join(format!("{stem}.block{}.pgm", sr.block_index)),
                res,
                res,
                &big,
            )?;
        }

        if let (Some(b), Some(sr)) = (item.motif_box, fwd.selections.last()) {
            let canvas = dataset.load(index)?.shape()[1];
            let fb = test_frame_box(b, canvas, res);
            hits += selection_hits(&sr.selected_indices, sr.height, sr.width, res, fb);
            total += sr.num_selected();
            chance_sum += ((fb[2] - fb[0]) * (fb[3] - fb[1])) / (res * res) as f64;
            boxed_images += 1;
        }
    }

    if boxed_images == 0 {
        eprintln!("warning: no ground-truth motif boxes; hit report skipped");
        return Ok(None);
    }
    let report = HitReport {
        images: boxed_images,
        hit_rate: hits as f64 / total.max(1) as f64,
        chance_rate: chance_sum / boxed_images as f64,
        ratio: if chance_sum > 0.0 {
            (hits as f64 / total.max(1) as f64) / (chance_sum / boxed_images as f64)
        } else {
            f64::INFINITY
        },
    };
    fs::write(
        out_dir.join("hit_report.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::invalid("export_masks", e.to_string()))?,
    )?;
    Ok(Some(report))
}

/// Rebuild the model a checkpoint describes and restore its weights.
fn rebuild<F: Real>(
    cfg: &crate::config::RunConfig,
    data: &crate::checkpoint::CheckpointData,
) -> Result<(ParamStore<F>, Model)> {
    let classes = cfg.num_classes.ok_or_else(|| {
        Error::invalid("checkpoint", "manifest lacks derived.num_classes")
    })?;
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let model = Model::create(&mut store, &mut rng, cfg.model_config(classes))?;
    crate::checkpoint::restore(&mut store, data)?;
    Ok((store, model))
}

/// Evaluate a saved checkpoint against a dataset directory, at the
/// precision the checkpoint was trained in.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    let data = crate::checkpoint::load(checkpoint)?;
    let cfg = crate::config::RunConfig::parse_str(&data.manifest)?;
    let ds = crate::data::ingest(data_dir)?;
    match cfg.precision {
        crate::config::Precision::F32 => {
            let (store, model) = rebuild::<f32>(&cfg, &data)?;
            evaluate(&model, &store, &ds, opts)
        }
        crate::config::Precision::F64 => {
            let (store, model) = rebuild::<f64>(&cfg, &data)?;
            evaluate(&model, &store, &ds, opts)
        }
    }
}

/// Export selection masks (and the hit report, when boxes exist) from a
/// saved checkpoint.
pub fn export_masks_checkpoint(
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<Option<HitReport>> {
    let data = crate::checkpoint::load(checkpoint)?;
    let cfg = crate::config::RunConfig::parse_str(&data.manifest)?;
    let ds = crate::data::ingest(data_dir)?;
    fs::create_dir_all(out_dir)?;
    match cfg.precision {
        crate::config::Precision::F32 => {
            let (store, model) = rebuild::<f32>(&cfg, &data)?;
            export_masks(&model, &store, &ds, out_dir)
        }
        crate::config::Precision::F64 => {
            let (store, model) = rebuild::<f64>(&cfg, &data)?;
            export_masks(&model, &store, &ds, out_dir)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_the_first_maximum() {
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn worked_three_head_example() {
        let heads = vec![
            vec![0.9, 0.1],
            vec![0.6, 0.4],
            vec![0.2, 0.8],
        ];
        // ranked by max confidence: head 0 (0.9), head 2 (0.8), head 1 (0.6)
        let avg = top_k_ensemble(&heads, 2, false).unwrap();
        assert!((avg[0] - 0.55).abs() < 1e-12);
        assert!((avg[1] - 0.45).abs() < 1e-12);
        assert_eq!(argmax(&avg), 0);
        // k = 3 is the plain average
        let avg = top_k_ensemble(&heads, 3, false).unwrap();
        assert!((avg[0] - (0.9 + 0.6 + 0.2) / 3.0).abs() < 1e-12);
        // one head: the ensemble is that head
        let one = top_k_ensemble(&heads[..1], 1, false).unwrap();
        assert_eq!(one, heads[0]);
    }

    #[test]
    fn fixed_order_ranking_takes_the_leading_heads() {
        let heads = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let avg = top_k_ensemble(&heads, 1, true).unwrap();
        assert_eq!(avg, heads[0]);
        let avg = top_k_ensemble(&heads, 1, false).unwrap();
        assert_eq!(avg, heads[0]); // 0.9 beats 0.8 under confidence too
    }

    #[test]
    fn ensemble_matches_brute_force_on_random_heads() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let h = rng.gen_range(1..=5);
            let c = rng.gen_range(2..=6);
            let heads: Vec<Vec<f64>> = (0..h)
                .map(|_| {
                    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            for k in 1..=h {
                let got = top_k_ensemble(&heads, k, false).unwrap();
                // brute force: sort (conf, index) pairs, average, compare
                let mut ranked: Vec<(f64, usize)> = heads
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.iter().cloned().fold(f64::MIN, f64::max), i))
                    .collect();
                ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let mut want = vec![0.0; c];
                for &(_, i) in &ranked[..k] {
                    for (w, &v) in want.iter_mut().zip(&heads[i]) {
                        *w += v;
                    }
                }
                for w in &mut want {
                    *w /= k as f64;
                }
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn ensemble_rejects_bad_k() {
        let heads = vec![vec![0.5, 0.5]];
        assert!(top_k_ensemble(&heads, 0, false).is_err());
        assert!(top_k_ensemble(&heads, 2, false).is_err());
        assert!(top_k_ensemble(&[], 1, false).is_err());
    }

    #[test]
    fn selection_hits_use_cell_centers_in_the_frame_box() {
        // 4x4 grid over a 64px input: centers at 8, 24, 40, 56
        let full = [0.0, 0.0, 64.0, 64.0];
        assert_eq!(selection_hits(&[0, 5, 15], 4, 4, 64, full), 3);
        // a box covering only the cell centered at (24, 24): index 5
        let tight = [20.0, 20.0, 28.0, 28.0];
        assert_eq!(selection_hits(&[0, 5, 15], 4, 4, 64, tight), 1);
        assert_eq!(selection_hits(&[0, 15], 4, 4, 64, tight), 0);
        // half-open: a center exactly on the upper edge does not hit
        let edge = [8.0, 0.0, 24.0, 64.0]; // center y=24 excluded, y=8 included
        assert_eq!(selection_hits(&[0, 4], 4, 4, 64, edge), 1);
        // empty box never hits
        let empty = [10.0, 10.0, 10.0, 10.0];
        assert_eq!(selection_hits(&[0, 5, 10, 15], 4, 4, 64, empty), 0);
    }
}
