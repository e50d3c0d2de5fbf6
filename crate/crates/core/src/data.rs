//! Dataset generation and ingestion.
//!
//! The synthetic generator plants one class-specific micro-pattern (the
//! motif) per image on a cluttered background and records its bounding box,
//! so localization quality is measurable — each class is identified by the
//! motif's 8x8 *shape* alone, never by color or position. Clutter includes
//! decoy micro-patterns guaranteed dissimilar to every class motif, which
//! makes "find the dense blob" insufficient as a strategy.
//!
//! Ingestion reads a class-per-folder tree: labels come from sorted folder
//! names only; an optional `motifs.index` sidecar supplies ground-truth
//! boxes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::resize_bilinear;
use crate::error::{Error, Result};
use crate::imageio::{load_image, save_ppm};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub canvas: usize,
    pub motif_size: usize,
    /// 0..=1; scales the number of decoy shapes per image.
    pub clutter_density: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            canvas: 64,
            motif_size: 8,
            clutter_density: 0.5,
        }
    }
}

impl SyntheticSpec {
    /// Parse a flat `key=value` spec file (same grammar as run configs):
    /// defaults plus overrides, `#` comments, unknown or duplicate keys are
    /// hard errors.
    pub fn parse_str(text: &str) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            let bad = |e: &dyn std::fmt::Display| {
                Error::Config(format!("line {}: {key}: {e}", lineno + 1))
            };
            match key {
                "synth.num_classes" => spec.num_classes = value.parse().map_err(|e| bad(&e))?,
                "synth.train_per_class" => {
                    spec.train_per_class = value.parse().map_err(|e| bad(&e))?
                }
                "synth.test_per_class" => {
                    spec.test_per_class = value.parse().map_err(|e| bad(&e))?
                }
                "synth.canvas" => spec.canvas = value.parse().map_err(|e| bad(&e))?,
                "synth.motif_size" => spec.motif_size = value.parse().map_err(|e| bad(&e))?,
                "synth.clutter_density" => {
                    spec.clutter_density = value.parse().map_err(|e| bad(&e))?
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {key}", lineno + 1))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synth", "need at least two classes"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("synth", "zero images per class"));
        }
        if self.motif_size < 2 || self.motif_size > self.canvas / 2 {
            return Err(Error::invalid(
                "synth",
                format!(
                    "motif size {} does not fit canvas {}",
                    self.motif_size, self.canvas
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return Err(Error::invalid("synth", "clutter density outside [0, 1]"));
        }
        Ok(())
    }

    /// Motif placement range: the central region that survives every train
    /// crop and the test crop without being cut.
    fn placement_range(&self) -> (usize, usize) {
        let lo = self.canvas / 4;
        let hi = self.canvas - self.canvas / 4 - self.motif_size;
        (lo, hi)
    }
}

/// Minimum pairwise Hamming distance between class motifs: a quarter of
/// the motif bits.
fn min_hamming(bits: usize) -> u32 {
    (bits / 4) as u32
}

fn hamming(a: &[bool], b: &[bool]) -> u32 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

/// Draw `n` random bit patterns with pairwise Hamming distance at least a
/// quarter of the bits, by rejection.
pub fn generate_motifs(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let bits = size * size;
    let floor = min_hamming(bits);
    let mut motifs: Vec<Vec<bool>> = Vec::with_capacity(n);
    while motifs.len() < n {
        let cand: Vec<bool> = (0..bits).map(|_| rng.gen_range(0..2u8) == 1).collect();
        if motifs.iter().all(|m| hamming(m, &cand) >= floor) {
            motifs.push(cand);
        }
    }
    motifs
}

fn mix_chain(parts: &[u64]) -> u64 {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }
    let mut s = 0u64;
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

/// Paint a bit pattern at (y0, x0); 1-bits take `color`, 0-bits keep the
/// background.
fn paint_pattern(
    img: &mut [f64],
    canvas: usize,
    pattern: &[bool],
    size: usize,
    y0: usize,
    x0: usize,
    color: [f64; 3],
) {
    let plane = canvas * canvas;
    for (i, &on) in pattern.iter().enumerate() {
        if !on {
            continue;
        }
        let (dy, dx) = (i / size, i % size);
        let p = (y0 + dy) * canvas + (x0 + dx);
        for c in 0..3 {
            img[c * plane + p] = color[c];
        }
    }
}

/// The class's saturated hue, evenly spaced around the color wheel, with a
/// per-image brightness in [0.85, 1]. The motif patch is the only saturated
/// region of the image, so hue identifies the class and saturation marks
/// where to look.
fn class_hue(class: usize, num_classes: usize, value: f64) -> [f64; 3] {
    let h = class as f64 / num_classes as f64 * 6.0;
    let i = (h.floor() as usize) % 6;
    let f = h - h.floor();
    let (p, q, t) = (0.0, value * (1.0 - f), value * f);
    match i {
        0 => [value, t, p],
        1 => [q, value, p],
        2 => [p, value, t],
        3 => [p, q, value],
        4 => [t, p, value],
        _ => [value, p, q],
    }
}

fn compose_image(
    spec: &SyntheticSpec,
    motifs: &[Vec<bool>],
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f64>, [usize; 4])> {
    let canvas = spec.canvas;
    let plane = canvas * canvas;

    // smooth achromatic background: a coarse random luminance grid,
    // upsampled, with light per-channel noise (saturation stays ~0.1)
    let g = (canvas / 8).max(2);
    let lum: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.25..0.75)).collect();
    let coarse = Tensor::new(vec![1, g, g], lum)?;
    let bg = resize_bilinear(&coarse, canvas, canvas)?;
    let mut img = vec![0.0f64; 3 * plane];
    for p in 0..plane {
        let l = bg.data()[p];
        for c in 0..3 {
            img[c * plane + p] = (l + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
    }

    // clutter: muted rectangles — luminance steps with a small tint, never
    // saturated, so they distract edge and texture detectors but carry no
    // class information
    let count = (spec.clutter_density * 16.0).round() as usize;
    for _ in 0..count {
        let h = rng.gen_range(3..=10.min(canvas));
        let w = rng.gen_range(3..=10.min(canvas));
        let y0 = rng.gen_range(0..=canvas - h);
        let x0 = rng.gen_range(0..=canvas - w);
        let l: f64 = rng.gen_range(0.2..0.8);
        let color = [
            (l + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
            (l + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
            (l + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
        ];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    img[c * plane + y * canvas + x] = color[c];
                }
            }
        }
    }

    // the class motif, painted last so it is never occluded: the class's
    // bit pattern in the class's hue
    let (lo, hi) = spec.placement_range();
    let y0 = rng.gen_range(lo..=hi);
    let x0 = rng.gen_range(lo..=hi);
    let color = class_hue(class, motifs.len(), rng.gen_range(0.85..1.0));
    paint_pattern(&mut img, canvas, &motifs[class], spec.motif_size, y0, x0, color);

    let t = Tensor::new(vec![3, canvas, canvas], img)?;
    Ok((t, [y0, x0, y0 + spec.motif_size, x0 + spec.motif_size]))
}

/// Generate both splits under `out`: `out/train` and `out/test`, each a
/// class-per-folder tree with a `motifs.index` ground-truth file. The same
/// seed reproduces the same bytes.
pub fn synth_generate(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<()> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(mix_chain(&[seed, 0x6d6f74696673]));
    let motifs = generate_motifs(spec.num_classes, spec.motif_size, &mut master);

    for (split_id, (split, per_class)) in [
        ("train", spec.train_per_class),
        ("test", spec.test_per_class),
    ]
    .into_iter()
    .enumerate()
    {
        let split_dir = out.join(split);
        let mut index = String::new();
        for class in 0..spec.num_classes {
            let class_dir = split_dir.join(format!("class_{class:02}"));
            fs::create_dir_all(&class_dir)?;
            for i in 0..per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_chain(&[
                    seed,
                    split_id as u64 + 1,
                    class as u64,
                    i as u64,
                ]));
                let (img, b) = compose_image(spec, &motifs, class, &mut rng)?;
                let name = format!("img_{i:04}.ppm");
                save_ppm(&class_dir.join(&name), &img)?;
                index.push_str(&format!(
                    "class_{class:02}/{name} {class} {} {} {} {}\n",
                    b[0], b[1], b[2], b[3]
                ));
            }
        }
        fs::write(split_dir.join("motifs.index"), index)?;
    }
    Ok(())
}

/// One labeled image on disk.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub path: PathBuf,
    /// Path relative to the dataset root, as used in `motifs.index`.
    pub rel_path: String,
    pub class_index: usize,
    /// Ground-truth motif box `[y0, x0, y1, x1]` (half-open), when known.
    pub motif_box: Option<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    /// Sorted folder names; position is the class index.
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn has_motif_boxes(&self) -> bool {
        self.items.iter().any(|i| i.motif_box.is_some())
    }

    pub fn load(&self, index: usize) -> Result<Tensor<f64>> {
        load_image(&self.items[index].path)
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "ppm"
    )
}

/// Read a class-per-folder tree. Class indices follow sorted folder names;
/// non-image files are skipped; a class folder with no images is an error.
pub fn ingest(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.path().is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class folders under {}",
            root.display()
        )));
    }

    let boxes = read_motif_index(root)?;
    let mut items = Vec::new();
    let mut classes = Vec::with_capacity(class_dirs.len());
    for (class_index, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class folder {} contains no images",
                dir.display()
            )));
        }
        for path in files {
            let rel_path = format!(
                "{name}/{}",
                path.file_name().unwrap().to_string_lossy()
            );
            let motif_box = boxes.as_ref().and_then(|m| m.get(&rel_path).copied());
            items.push(DatasetItem { path, rel_path, class_index, motif_box });
        }
        classes.push(name.clone());
    }
    Ok(Dataset { root: root.to_path_buf(), classes, items })
}

/// Parse `motifs.index`: one `path class y0 x0 y1 x1` line per image.
fn read_motif_index(root: &Path) -> Result<Option<HashMap<String, [f64; 4]>>> {
    let path = root.join("motifs.index");
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::Data(format!(
                "motifs.index line {}: expected 6 fields, got {}",
                lineno + 1,
                parts.len()
            )));
        }
        let nums: Vec<f64> = parts[2..]
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::Data(format!("motifs.index line {}: bad number {s}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        map.insert(parts[0].to_string(), [nums[0], nums[1], nums[2], nums[3]]);
    }
    Ok(Some(map))
}
