//! Run configuration: a flat `key=value` text format, override handling,
//! and the manifest that makes a run reproducible.
//!
//! The manifest a run writes (and embeds in its checkpoint) is itself a
//! valid config file with every derived value resolved — epochs, selection
//! counts, and the class count discovered from the dataset — so a run can
//! be reconstructed from manifest + dataset alone.
//!
//! Unknown keys are hard errors: a typo must never silently fall back to a
//! default.

use std::fmt;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::combiner::CombinerConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{default_num_selects, ModelConfig};
use crate::optim::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "run.precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Unset means "decide from the dataset": 30 epochs when ground-truth
    /// motif boxes are present (synthetic data), 50 otherwise.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub precision: Precision,
    pub out_dir: String,
    /// Run evaluation every this many epochs (and always after the last).
    pub eval_every: usize,
    pub train_dir: Option<String>,
    pub test_dir: Option<String>,
    pub backbone: BackboneConfig,
    pub selector_enabled: bool,
    /// Unset means the per-block default rule.
    pub num_selects: Option<Vec<usize>>,
    pub combiner_enabled: bool,
    pub combiner: CombinerConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    /// Discovered from the dataset at train time; carried in manifests so
    /// checkpoints can rebuild the model.
    pub num_classes: Option<usize>,
    pub eval_k: usize,
    pub eval_threshold: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: None,
            batch_size: 8,
            precision: Precision::F32,
            out_dir: "run-out".into(),
            eval_every: 1,
            train_dir: None,
            test_dir: None,
            backbone: BackboneConfig::default(),
            selector_enabled: true,
            num_selects: None,
            combiner_enabled: true,
            combiner: CombinerConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            num_classes: None,
            eval_k: 5,
            eval_threshold: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected true or false, got {other:?}"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

fn join_list<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parse a config file's text on top of the defaults. Keys may appear
    /// once each; later `--override` pairs go through [`Self::set`].
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply `key=value` override strings in order (later wins).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {o:?}: expected key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set a single key. The key list below is the format documentation.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.epochs" => self.epochs = Some(parse_num(key, v)?),
            "run.batch_size" => self.batch_size = parse_num(key, v)?,
            "run.precision" => self.precision = v.parse()?,
            "run.out_dir" => self.out_dir = v.to_string(),
            "run.eval_every" => self.eval_every = parse_num(key, v)?,
            "data.train_dir" => self.train_dir = Some(v.to_string()),
            "data.test_dir" => self.test_dir = Some(v.to_string()),
            "backbone.num_blocks" => self.backbone.num_blocks = parse_num(key, v)?,
            "backbone.input_resolution" => {
                self.backbone.input_resolution = parse_num(key, v)?
            }
            "backbone.widths" => self.backbone.widths = parse_list(key, v)?,
            "backbone.fpn_width" => self.backbone.fpn_width = parse_num(key, v)?,
            "backbone.fpn_enabled" => self.backbone.fpn_enabled = parse_bool(key, v)?,
            "selector.enabled" => self.selector_enabled = parse_bool(key, v)?,
            "selector.num_selects" => self.num_selects = Some(parse_list(key, v)?),
            "combiner.enabled" => self.combiner_enabled = parse_bool(key, v)?,
            "combiner.variant" => self.combiner.variant = v.parse()?,
            "combiner.gcn_layers" => self.combiner.gcn_layers = parse_num(key, v)?,
            "combiner.pool_ratios" => self.combiner.pool_ratios = parse_list(key, v)?,
            "combiner.hidden" => self.combiner.hidden = parse_num(key, v)?,
            "loss.lambda_b" => self.loss.lambda_b = parse_num(key, v)?,
            "loss.lambda_s" => self.loss.lambda_s = parse_num(key, v)?,
            "loss.lambda_n" => self.loss.lambda_n = parse_num(key, v)?,
            "loss.lambda_c" => self.loss.lambda_c = parse_num(key, v)?,
            "optim.lr_base" => self.optim.learning_rate_base = parse_num(key, v)?,
            "optim.momentum" => self.optim.momentum = parse_num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "derived.num_classes" => self.num_classes = Some(parse_num(key, v)?),
            "eval.k" => self.eval_k = parse_num(key, v)?,
            "eval.threshold" => self.eval_threshold = Some(parse_num(key, v)?),
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Per-block selection counts: explicit when set, otherwise the
    /// half-the-points-capped default rule.
    pub fn resolved_num_selects(&self) -> Vec<usize> {
        self.num_selects
            .clone()
            .unwrap_or_else(|| default_num_selects(&self.backbone))
    }

    /// Build the network shape for a discovered class count.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            num_classes,
            selector_enabled: self.selector_enabled,
            num_selects: self.resolved_num_selects(),
            combiner_enabled: self.combiner_enabled,
            combiner: self.combiner.clone(),
        }
    }

    /// Serialize every setting, sorted by key, with derived values
    /// resolved. The result parses back into an equal config.
    pub fn to_manifest(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("run.seed".into(), self.seed.to_string()),
            ("run.batch_size".into(), self.batch_size.to_string()),
            ("run.precision".into(), self.precision.to_string()),
            ("run.out_dir".into(), self.out_dir.clone()),
            ("run.eval_every".into(), self.eval_every.to_string()),
            (
                "backbone.num_blocks".into(),
                self.backbone.num_blocks.to_string(),
            ),
            (
                "backbone.input_resolution".into(),
                self.backbone.input_resolution.to_string(),
            ),
            ("backbone.widths".into(), join_list(&self.backbone.widths)),
            (
                "backbone.fpn_width".into(),
                self.backbone.fpn_width.to_string(),
            ),
            (
                "backbone.fpn_enabled".into(),
                self.backbone.fpn_enabled.to_string(),
            ),
            (
                "selector.enabled".into(),
                self.selector_enabled.to_string(),
            ),
            (
                "selector.num_selects".into(),
                join_list(&self.resolved_num_selects()),
            ),
            ("combiner.enabled".into(), self.combiner_enabled.to_string()),
            ("combiner.variant".into(), self.combiner.variant.to_string()),
            (
                "combiner.gcn_layers".into(),
                self.combiner.gcn_layers.to_string(),
            ),
            (
                "combiner.pool_ratios".into(),
                join_list(&self.combiner.pool_ratios),
            ),
            ("combiner.hidden".into(), self.combiner.hidden.to_string()),
            ("loss.lambda_b".into(), self.loss.lambda_b.to_string()),
            ("loss.lambda_s".into(), self.loss.lambda_s.to_string()),
            ("loss.lambda_n".into(), self.loss.lambda_n.to_string()),
            ("loss.lambda_c".into(), self.loss.lambda_c.to_string()),
            (
                "optim.lr_base".into(),
                self.optim.learning_rate_base.to_string(),
            ),
            ("optim.momentum".into(), self.optim.momentum.to_string()),
            (
                "optim.weight_decay".into(),
                self.optim.weight_decay.to_string(),
            ),
            ("eval.k".into(), self.eval_k.to_string()),
        ];
        if let Some(e) = self.epochs {
            pairs.push(("run.epochs".into(), e.to_string()));
        }
        if let Some(d) = &self.train_dir {
            pairs.push(("data.train_dir".into(), d.clone()));
        }
        if let Some(d) = &self.test_dir {
            pairs.push(("data.test_dir".into(), d.clone()));
        }
        if let Some(n) = self.num_classes {
            pairs.push(("derived.num_classes".into(), n.to_string()));
        }
        if let Some(t) = self.eval_threshold {
            pairs.push(("eval.threshold".into(), t.to_string()));
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
