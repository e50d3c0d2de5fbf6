//! The training loop: seeded end to end, cosine-annealed SGD on batch-mean
//! losses, per-step metrics, periodic evaluation, and a final checkpoint.
//!
//! Determinism contract: class order comes from sorted folder names, the
//! epoch shuffle and each sample's augmentation draw from generators keyed
//! by (run seed, epoch, index), and the step itself is single-threaded —
//! so a (seed, config, dataset) triple fixes every float in the run.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{sample_rng, train_augment};
use crate::config::{Precision, RunConfig};
use crate::data::{ingest, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalSummary};
use crate::metrics::{EvalRecordLine, MetricsWriter, StepRecord};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::optim::Sgd;
use crate::scalar::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest: String,
    pub epochs_run: usize,
    pub final_eval: EvalSummary,
}

/// Train according to the config: resolves data-dependent defaults, then
/// dispatches on the configured precision.
pub fn run_train(cfg: &RunConfig) -> Result<TrainResult> {
    let train_dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_dir is required to train".into()))?;
    let test_dir = cfg
        .test_dir
        .as_ref()
        .ok_or_else(|| Error::Config("data.test_dir is required to train".into()))?;
    let train_ds = ingest(Path::new(train_dir))?;
    let test_ds = ingest(Path::new(test_dir))?;
    if train_ds.num_classes() != test_ds.num_classes() {
        return Err(Error::Data(format!(
            "train has {} classes but test has {}",
            train_ds.num_classes(),
            test_ds.num_classes()
        )));
    }

    let mut resolved = cfg.clone();
    // synthetic data (recognizable by its ground-truth boxes) converges in
    // fewer epochs than real photographs
    resolved.epochs =
        Some(cfg.epochs.unwrap_or(if train_ds.has_motif_boxes() { 30 } else { 50 }));
    resolved.num_selects = Some(cfg.resolved_num_selects());
    resolved.num_classes = Some(train_ds.num_classes());

    match resolved.precision {
        Precision::F32 => train_loop::<f32>(&resolved, &train_ds, &test_ds),
        Precision::F64 => train_loop::<f64>(&resolved, &train_ds, &test_ds),
    }
}

fn train_loop<F: Real>(
    cfg: &RunConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<TrainResult> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be positive".into()));
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let manifest = cfg.to_manifest();
    fs::write(out_dir.join("manifest.txt"), &manifest)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;

    let model_cfg = cfg.model_config(train_ds.num_classes());
    let mut store: ParamStore<F> = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::create(&mut store, &mut init_rng, model_cfg)?;

    let epochs = cfg.epochs.expect("resolved by run_train");
    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size);
    let mut sgd: Sgd<F> = Sgd::new(cfg.optim, steps_per_epoch * epochs, &store)?;
    let res = cfg.backbone.input_resolution;

    let mut step = 0usize;
    let mut final_eval = None;
    for epoch in 0..epochs {
        // the shuffle gets its own stream, disjoint from per-sample
        // augmentation seeds by an out-of-range index
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        let mut shuffle_rng = sample_rng(cfg.seed, epoch, usize::MAX);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        for batch in order.chunks(cfg.batch_size) {
            let mut tape: Tape<F> = Tape::new();
            let binding = store.bind(&mut tape);
            let mut totals = Vec::with_capacity(batch.len());
            let mut sums = [0.0f64; 4]; // b, s, n, c
            let mut has_c = false;
            for &idx in batch {
                let raw = train_ds.load(idx)?;
                let mut arng = sample_rng(cfg.seed, epoch, idx);
                let img = train_augment(&raw, res, &mut arng)?;
                let fwd = model.forward(&mut tape, &binding, &img.cast())?;
                let bundle =
                    model.loss(&mut tape, &fwd, train_ds.items[idx].class_index, &cfg.loss)?;
                sums[0] += tape.value(bundle.l_b).item().as_f64();
                sums[1] += tape.value(bundle.l_s).item().as_f64();
                sums[2] += tape.value(bundle.l_n).item().as_f64();
                if let Some(c) = bundle.l_c {
                    sums[3] += tape.value(c).item().as_f64();
                    has_c = true;
                }
                totals.push(bundle.total);
            }
            let batch_loss = if totals.len() == 1 {
                totals[0]
            } else {
                let stacked = tape.concat(&totals, 0)?;
                tape.mean_axis(stacked, 0)?
            };
            let loss_value = tape.value(batch_loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::invalid(
                    "train",
                    format!(
                        "loss became {loss_value} at epoch {epoch} step {step} \
                         (batch items {batch:?}); aborting"
                    ),
                ));
            }
            let lr = sgd.current_lr();
            tape.backward(batch_loss)?;
            let grads: Vec<Option<&Tensor<F>>> =
                binding.all().iter().map(|&v| tape.grad(v)).collect();
            sgd.step(&mut store, &grads)?;

            let inv = 1.0 / batch.len() as f64;
            metrics.write(&StepRecord {
                kind: "step",
                step,
                epoch,
                lr,
                loss_b: sums[0] * inv,
                loss_s: sums[1] * inv,
                loss_n: sums[2] * inv,
                loss_c: has_c.then_some(sums[3] * inv),
                loss_total: loss_value,
            })?;
            step += 1;
        }

        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == epochs {
            let summary = evaluate(&model, &store, test_ds, &EvalOptions::default())?;
            metrics.write(&EvalRecordLine {
                kind: "eval",
                epoch,
                head_accuracy: summary.head_accuracy.clone(),
                ensemble_accuracy: summary.ensemble_accuracy.clone(),
                accuracy: summary.accuracy(),
            })?;
            final_eval = Some(summary);
        }
    }

    let checkpoint_path = out_dir.join("model.ckpt");
    crate::checkpoint::save(&checkpoint_path, &manifest, &store)?;
    Ok(TrainResult {
        checkpoint_path,
        metrics_path,
        manifest,
        epochs_run: epochs,
        final_eval: final_eval.expect("at least one epoch"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticSpec};

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("train-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn micro_data(dir: &Path) {
        let spec = SyntheticSpec {
            num_classes: 2,
            train_per_class: 4,
            test_per_class: 2,
            canvas: 16,
            motif_size: 4,
            ..SyntheticSpec::default()
        };
        synth_generate(&spec, 1, dir).unwrap();
    }

    fn micro_cfg(data: &Path, out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train_dir = Some(data.join("train").to_string_lossy().into_owned());
        cfg.test_dir = Some(data.join("test").to_string_lossy().into_owned());
        cfg.out_dir = out.to_string_lossy().into_owned();
        cfg.epochs = Some(2);
        cfg.batch_size = 4;
        cfg.precision = Precision::F64;
        cfg.backbone.num_blocks = 2;
        cfg.backbone.input_resolution = 16;
        cfg.backbone.widths = vec![4, 8];
        cfg.backbone.fpn_width = 8;
        cfg.num_selects = Some(vec![8, 2]);
        cfg.combiner.pool_ratios = vec![0.5];
        cfg.combiner.hidden = 8;
        cfg
    }

    #[test]
    fn micro_run_writes_manifest_metrics_and_checkpoint() {
        let data = tmpdir("microdata");
        micro_data(&data);
        let out = tmpdir("microout");
        let cfg = micro_cfg(&data, &out);
        let result = run_train(&cfg).unwrap();
        assert_eq!(result.epochs_run, 2);
        assert!(result.checkpoint_path.is_file());
        assert!(out.join("manifest.txt").is_file());

        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.contains("derived.num_classes=2"), "{manifest}");
        assert!(manifest.contains("selector.num_selects=8,2"), "{manifest}");
        assert!(manifest.contains("run.epochs=2"), "{manifest}");

        let metrics = fs::read_to_string(&result.metrics_path).unwrap();
        let steps = metrics.lines().filter(|l| l.contains("\"step\"")).count();
        assert_eq!(steps, 4); // 8 images / batch 4 = 2 steps x 2 epochs
        assert!(metrics.lines().any(|l| l.contains("\"eval\"")));
        // 3 heads: 2 blocks + combiner
        assert_eq!(result.final_eval.head_accuracy.len(), 3);
        assert_eq!(result.final_eval.ensemble_accuracy.len(), 3);
    }

    #[test]
    fn same_seed_reruns_are_bit_identical_in_f64() {
        let data = tmpdir("detdata");
        micro_data(&data);
        let out = tmpdir("detout");
        let cfg = micro_cfg(&data, &out);
        let r1 = run_train(&cfg).unwrap();
        let b1 = fs::read(&r1.checkpoint_path).unwrap();
        let r2 = run_train(&cfg).unwrap();
        let b2 = fs::read(&r2.checkpoint_path).unwrap();
        assert_eq!(b1, b2, "checkpoints differ between identical runs");
        assert_eq!(r1.final_eval.ensemble_accuracy, r2.final_eval.ensemble_accuracy);
    }

    #[test]
    fn checkpoint_round_trips_through_eval_and_mask_export() {
        let data = tmpdir("rtdata");
        micro_data(&data);
        let out = tmpdir("rtout");
        let cfg = micro_cfg(&data, &out);
        let result = run_train(&cfg).unwrap();

        let summary = crate::eval::evaluate_checkpoint(
            &result.checkpoint_path,
            &data.join("test"),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(summary.ensemble_accuracy, result.final_eval.ensemble_accuracy);
        assert_eq!(summary.head_accuracy, result.final_eval.head_accuracy);

        let masks = tmpdir("rtmasks");
        let report = crate::eval::export_masks_checkpoint(
            &result.checkpoint_path,
            &data.join("test"),
            &masks,
        )
        .unwrap()
        .expect("synthetic data has boxes");
        assert_eq!(report.images, 4);
        assert!(masks.join("hit_report.json").is_file());
        // 4 test images x 2 blocks of masks
        let pgms: Vec<_> = walk_pgms(&masks);
        assert_eq!(pgms.len(), 8, "{pgms:?}");
    }

    fn walk_pgms(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk_pgms(&p));
            } else if p.extension().is_some_and(|e| e == "pgm") {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn missing_data_dirs_are_config_errors() {
        let cfg = RunConfig::default();
        let err = run_train(&cfg).unwrap_err().to_string();
        assert!(err.contains("train_dir"), "{err}");
    }

    #[test]
    fn epoch_default_follows_the_data_kind() {
        // synthetic data carries motif boxes; without an explicit epoch
        // count the manifest must say 30
        let data = tmpdir("epochdata");
        micro_data(&data);
        let out = tmpdir("epochout");
        let mut cfg = micro_cfg(&data, &out);
        cfg.epochs = None;
        cfg.eval_every = 100; // skip per-epoch evals; final still runs
        // shrink to one step per epoch to keep 30 epochs fast
        cfg.batch_size = 8;
        let result = run_train(&cfg).unwrap();
        assert_eq!(result.epochs_run, 30);
        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.contains("run.epochs=30"), "{manifest}");
    }
}
