//! Convolutional feature extractor with an optional top-down fusion pathway.
//!
//! The trunk is deliberately small: `num_blocks` stages of conv-relu ×2 where
//! the second conv strides by 2, so block `l` (1-based) emits a map at
//! `input_resolution / 2^l`. The fusion pathway projects every block to one
//! common channel width with 1×1 convolutions and adds in the 2× upsampled
//! coarser level, top down — so fine maps see coarse context while keeping
//! their resolution.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvParams, ParamStore, TapeBinding};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub input_resolution: usize,
    /// Output channel width of each block, finest first.
    pub widths: Vec<usize>,
    /// Common channel width after fusion.
    pub fpn_width: usize,
    pub fpn_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_blocks: 4,
            input_resolution: 64,
            widths: vec![4, 8, 16, 32],
            fpn_width: 32,
            fpn_enabled: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::invalid("backbone", "need at least one block"));
        }
        if self.widths.len() != self.num_blocks {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "{} widths for {} blocks",
                    self.widths.len(),
                    self.num_blocks
                ),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.fpn_width == 0 {
            return Err(Error::invalid("backbone", "zero channel width"));
        }
        if self.input_resolution % (1 << self.num_blocks) != 0 {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "input resolution {} not divisible by 2^{}",
                    self.input_resolution, self.num_blocks
                ),
            ));
        }
        Ok(())
    }

    /// Spatial extent of block `l`'s output map, `l` 1-based.
    pub fn block_resolution(&self, block_index: usize) -> usize {
        self.input_resolution >> block_index
    }

    /// Channel width the selector sees for block `l`: the common fusion
    /// width when fusion is on, the raw block width otherwise.
    pub fn feature_width(&self, block_index: usize) -> usize {
        if self.fpn_enabled {
            self.fpn_width
        } else {
            self.widths[block_index - 1]
        }
    }
}

/// One block's output on the tape, tagged with its 1-based position.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub block_index: usize,
    pub features: Var,
}

#[derive(Debug)]
struct Block {
    conv1: ConvParams,
    conv2: ConvParams,
}

/// Trunk + lateral parameters. Lateral projections exist only when fusion
/// is enabled, so disabled runs carry no dead weights in checkpoints.
#[derive(Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    blocks: Vec<Block>,
    laterals: Option<Vec<ConvParams>>,
}

impl Backbone {
    pub fn create<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut in_chans = 3;
        for (i, &width) in cfg.widths.iter().enumerate() {
            let l = i + 1;
            let conv1 = ConvParams::create(
                store,
                rng,
                &format!("backbone.block{l}.conv1"),
                in_chans,
                width,
                3,
                1,
                1,
            )?;
            let conv2 = ConvParams::create(
                store,
                rng,
                &format!("backbone.block{l}.conv2"),
                width,
                width,
                3,
                2,
                1,
            )?;
            blocks.push(Block { conv1, conv2 });
            in_chans = width;
        }
        let laterals = if cfg.fpn_enabled {
            let mut v = Vec::with_capacity(cfg.num_blocks);
            for (i, &width) in cfg.widths.iter().enumerate() {
                v.push(ConvParams::create(
                    store,
                    rng,
                    &format!("fpn.lateral{}", i + 1),
                    width,
                    cfg.fpn_width,
                    1,
                    1,
                    0,
                )?);
            }
            Some(v)
        } else {
            None
        };
        Ok(Backbone { cfg, blocks, laterals })
    }

    /// Run the trunk on one `[3, R, R]` image, returning the raw
    /// (pre-fusion) map of every block, finest first.
    pub fn extract<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        image: Var,
    ) -> Result<Vec<FeatureMap>> {
        let shape = tape.value(image).shape().to_vec();
        let r = self.cfg.input_resolution;
        if shape != [3, r, r] {
            return Err(Error::InvalidShape {
                op: "backbone",
                shape,
                reason: format!("expected [3, {r}, {r}]"),
            });
        }
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut x = image;
        for (i, block) in self.blocks.iter().enumerate() {
            let y = block.conv1.apply(tape, binding, x)?;
            let y = tape.relu(y);
            let y = block.conv2.apply(tape, binding, y)?;
            x = tape.relu(y);
            maps.push(FeatureMap { block_index: i + 1, features: x });
        }
        Ok(maps)
    }

    /// Top-down fusion: project every map to the common width, add the 2×
    /// upsampled coarser level; the coarsest level is projection only.
    pub fn fpn_fuse<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        maps: &[FeatureMap],
    ) -> Result<Vec<FeatureMap>> {
        let laterals = self.laterals.as_ref().ok_or_else(|| {
            Error::invalid("fpn", "fusion pathway disabled in this configuration")
        })?;
        if maps.len() != self.blocks.len() {
            return Err(Error::invalid(
                "fpn",
                format!("{} maps for {} blocks", maps.len(), self.blocks.len()),
            ));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.block_index != i + 1 {
                return Err(Error::invalid(
                    "fpn",
                    format!("block indices not contiguous: found {} at slot {}", m.block_index, i + 1),
                ));
            }
        }
        let mut fused: Vec<Option<Var>> = vec![None; maps.len()];
        for i in (0..maps.len()).rev() {
            let mut p = laterals[i].apply(tape, binding, maps[i].features)?;
            if let Some(coarser) = fused.get(i + 1).and_then(|v| *v) {
                let up = tape.upsample2x(coarser)?;
                p = tape.add(p, up)?;
            }
            fused[i] = Some(p);
        }
        Ok(fused
            .into_iter()
            .enumerate()
            .map(|(i, v)| FeatureMap {
                block_index: i + 1,
                features: v.expect("all levels filled"),
            })
            .collect())
    }

    /// The maps the selector consumes: fused when fusion is on, raw
    /// otherwise.
    pub fn feature_maps<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        image: Var,
    ) -> Result<Vec<FeatureMap>> {
        let raw = self.extract(tape, binding, image)?;
        if self.cfg.fpn_enabled {
            self.fpn_fuse(tape, binding, &raw)
        } else {
            Ok(raw)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn image(seed: u64, r: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![3, r, r],
            (0..3 * r * r).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pyramid_spatial_sizes_halve_per_block() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::create(&mut store, &mut rng, BackboneConfig::default()).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let img = tape.constant(image(1, 64));
        let maps = bb.extract(&mut tape, &binding, img).unwrap();
        let sizes: Vec<usize> = maps
            .iter()
            .map(|m| tape.value(m.features).shape()[1])
            .collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
        for (i, m) in maps.iter().enumerate() {
            assert_eq!(tape.value(m.features).shape()[0], bb.cfg.widths[i]);
        }
    }

    #[test]
    fn zero_image_yields_finite_outputs() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::create(&mut store, &mut rng, BackboneConfig::default()).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let img = tape.constant(Tensor::zeros(vec![3, 64, 64]).unwrap());
        let maps = bb.feature_maps(&mut tape, &binding, img).unwrap();
        for m in maps {
            assert!(tape.value(m.features).is_finite());
        }
    }

    #[test]
    fn wrong_input_size_is_rejected_with_expectation() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::create(&mut store, &mut rng, BackboneConfig::default()).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let img = tape.constant(Tensor::zeros(vec![3, 32, 32]).unwrap());
        let err = bb.extract(&mut tape, &binding, img).unwrap_err().to_string();
        assert!(err.contains("64"), "{err}");
        assert!(err.contains("32"), "{err}");
    }

    #[test]
    fn extraction_is_bit_reproducible_across_builds() {
        let run = || {
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let bb = Backbone::create(&mut store, &mut rng, BackboneConfig::default()).unwrap();
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let img = tape.constant(image(5, 64));
            let maps = bb.feature_maps(&mut tape, &binding, img).unwrap();
            tape.value(maps[0].features).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_block_fusion_is_projection_only() {
        let cfg = BackboneConfig {
            num_blocks: 1,
            input_resolution: 8,
            widths: vec![4],
            fpn_width: 6,
            fpn_enabled: true,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bb = Backbone::create(&mut store, &mut rng, cfg).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let img = tape.constant(image(6, 8));
        let raw = bb.extract(&mut tape, &binding, img).unwrap();
        let fused = bb.fpn_fuse(&mut tape, &binding, &raw).unwrap();
        // compare against applying the lateral directly
        let direct = bb.laterals.as_ref().unwrap()[0]
            .apply(&mut tape, &binding, raw[0].features)
            .unwrap();
        assert_eq!(tape.value(fused[0].features).data(), tape.value(direct).data());
    }

    /// Two-level fusion with identity 1×1 projections reduces to
    /// `fine + upsample(coarse)`, checkable elementwise by hand.
    #[test]
    fn hand_built_two_level_fusion() {
        let cfg = BackboneConfig {
            num_blocks: 2,
            input_resolution: 8,
            widths: vec![2, 2],
            fpn_width: 2,
            fpn_enabled: true,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb = Backbone::create(&mut store, &mut rng, cfg).unwrap();
        // overwrite laterals with identity kernels, zero bias
        for lat in bb.laterals.as_ref().unwrap() {
            *store.get_mut(lat.w) = Tensor::new(
                vec![2, 2, 1, 1],
                vec![1.0, 0.0, 0.0, 1.0],
            )
            .unwrap();
            *store.get_mut(lat.b) = Tensor::zeros(vec![2]).unwrap();
        }
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fine = image(8, 4).into_data(); // reuse as arbitrary values
        let fine_t = Tensor::new(vec![2, 4, 4], fine[..32].to_vec()).unwrap();
        let coarse_t = Tensor::new(vec![2, 2, 2], fine[32..40].to_vec()).unwrap();
        let fine_v = tape.constant(fine_t.clone());
        let coarse_v = tape.constant(coarse_t.clone());
        let maps = vec![
            FeatureMap { block_index: 1, features: fine_v },
            FeatureMap { block_index: 2, features: coarse_v },
        ];
        let fused = bb.fpn_fuse(&mut tape, &binding, &maps).unwrap();
        let got = tape.value(fused[0].features).data();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = fine_t.data()[(c * 4 + y) * 4 + x]
                        + coarse_t.data()[(c * 2 + y / 2) * 2 + x / 2];
                    let g = got[(c * 4 + y) * 4 + x];
                    assert!((g - want).abs() < 1e-15, "({c},{y},{x}): {g} vs {want}");
                }
            }
        }
        // coarse level all-zero: fine output equals its lateral projection
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fine_v = tape.constant(fine_t.clone());
        let zero_v = tape.constant(Tensor::zeros(vec![2, 2, 2]).unwrap());
        let maps = vec![
            FeatureMap { block_index: 1, features: fine_v },
            FeatureMap { block_index: 2, features: zero_v },
        ];
        let fused = bb.fpn_fuse(&mut tape, &binding, &maps).unwrap();
        assert_eq!(tape.value(fused[0].features).data(), fine_t.data());
    }

    #[test]
    fn fusion_rejects_shuffled_maps() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bb = Backbone::create(&mut store, &mut rng, BackboneConfig::default()).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let img = tape.constant(image(10, 64));
        let mut maps = bb.extract(&mut tape, &binding, img).unwrap();
        maps.swap(0, 1);
        assert!(bb.fpn_fuse(&mut tape, &binding, &maps).is_err());
    }

    #[test]
    fn fused_maps_share_the_common_width() {
        for widths in [vec![4, 8, 16, 32], vec![8, 8, 8, 8]] {
            let cfg = BackboneConfig {
                num_blocks: 4,
                input_resolution: 32,
                widths,
                fpn_width: 24,
                fpn_enabled: true,
            };
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let bb = Backbone::create(&mut store, &mut rng, cfg).unwrap();
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let img = tape.constant(image(12, 32));
            let maps = bb.feature_maps(&mut tape, &binding, img).unwrap();
            for m in maps {
                assert_eq!(tape.value(m.features).shape()[0], 24);
            }
        }
    }

    #[test]
    fn gradients_reach_the_first_block() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bb = Backbone::create(&mut store, &mut rng, BackboneConfig::default()).unwrap();
        let first_w = bb.blocks[0].conv1.w;
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let img = tape.constant(image(14, 64));
        let maps = bb.feature_maps(&mut tape, &binding, img).unwrap();
        let last = maps.last().unwrap().features;
        let n = tape.value(last).numel();
        let flat = tape.reshape(last, vec![1, n]).unwrap();
        let s = tape.sum_axis(flat, 1).unwrap();
        let s = tape.sum_axis(s, 0).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(binding.var(first_w)).unwrap();
        let norm: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "no gradient reached block 1");
    }
}
