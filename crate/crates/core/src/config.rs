//! Flat `key = value` run configuration.
//!
//! One file covers the model, the training schedule and the synthetic dataset.
//! Lines are `key = value`; `#` starts a comment. Unknown keys, repeated keys and
//! malformed values are rejected. [`RunConfig::to_text`] writes every key, so the
//! resolved file alone reproduces a run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AugmentMode, DatasetSpec};
use crate::engine::TrainConfig;
use crate::losses::SimilarityScheme;
use crate::model::{HeadMode, InputChannel, ModelConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            _ => Err(Error::Config(format!("unknown precision `{s}` (single or double)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub precision: Precision,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            precision: Precision::Double,
            threads: 1,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 38] = [
    "base_channels",
    "input_channels",
    "gap_fill",
    "hierarchical",
    "head_mode",
    "zero_init_heads",
    "model_seed",
    "epochs_stage1",
    "epochs_stage2",
    "lr_stage1",
    "lr_stage2",
    "batch_size",
    "alpha_stage1",
    "beta_stage1",
    "alpha_stage2",
    "beta_stage2",
    "seed",
    "no_similarity",
    "plain_unet",
    "similarity_scheme",
    "similarity_gradient",
    "patches_per_sample",
    "val_patches_per_sample",
    "normalizer_warmup",
    "deterministic",
    "dims",
    "n_rois",
    "phantom_noise",
    "blur_sigma",
    "max_disp",
    "smoothness",
    "pairs",
    "val_pairs",
    "fractions",
    "augment",
    "noise_gt",
    "data_seed",
    "precision",
];

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for `{key}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "base_channels" => m.base_channels = num(key, value)?,
            "input_channels" => {
                m.input_channels = value.split(',').map(|s| InputChannel::parse(s.trim())).collect::<Result<_>>()?
            }
            "gap_fill" => m.gap_fill = flag(key, value)?,
            "hierarchical" => m.hierarchical = flag(key, value)?,
            "head_mode" => {
                m.head_mode = match value {
                    "shared3" => HeadMode::Shared3,
                    "per_axis" => HeadMode::PerAxis,
                    _ => return Err(bad(key, value)),
                }
            }
            "zero_init_heads" => m.zero_init_heads = flag(key, value)?,
            "model_seed" => m.seed = num(key, value)?,
            "epochs_stage1" => t.epochs_stage1 = num(key, value)?,
            "epochs_stage2" => t.epochs_stage2 = num(key, value)?,
            "lr_stage1" => t.lr_stage1 = num(key, value)?,
            "lr_stage2" => t.lr_stage2 = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "alpha_stage1" => t.stage1.alpha = num(key, value)?,
            "beta_stage1" => t.stage1.beta = num(key, value)?,
            "alpha_stage2" => t.stage2.alpha = num(key, value)?,
            "beta_stage2" => t.stage2.beta = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "no_similarity" => t.no_similarity = flag(key, value)?,
            "plain_unet" => t.plain_unet = flag(key, value)?,
            "similarity_scheme" => t.similarity_scheme = SimilarityScheme::parse(value)?,
            "similarity_gradient" => t.similarity_gradient = flag(key, value)?,
            "patches_per_sample" => t.patches_per_sample = num(key, value)?,
            "val_patches_per_sample" => t.val_patches_per_sample = num(key, value)?,
            "normalizer_warmup" => t.normalizer_warmup = num(key, value)?,
            "deterministic" => t.deterministic = flag(key, value)?,
            "dims" => {
                let v: Vec<usize> = list(key, value)?;
                d.dims = match v.as_slice() {
                    [n] => [*n; 3],
                    [x, y, z] => [*x, *y, *z],
                    _ => return Err(bad(key, value)),
                }
            }
            "n_rois" => d.n_rois = num(key, value)?,
            "phantom_noise" => d.phantom_noise = num(key, value)?,
            "blur_sigma" => d.blur_sigma = num(key, value)?,
            "max_disp" => d.max_magnitude = num(key, value)?,
            "smoothness" => d.smoothness = num(key, value)?,
            "pairs" => d.train_pairs = num(key, value)?,
            "val_pairs" => d.val_pairs = num(key, value)?,
            "fractions" => d.fractions = if value.is_empty() { Vec::new() } else { list(key, value)? },
            "augment" => d.augment = AugmentMode::parse(value).map_err(|_| bad(key, value))?,
            "noise_gt" => d.supervision_noise = num(key, value)?,
            "data_seed" => d.seed = num(key, value)?,
            "precision" => self.precision = Precision::parse(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        Ok(match key {
            "base_channels" => m.base_channels.to_string(),
            "input_channels" => m.input_channels.iter().map(|c| c.name()).collect::<Vec<_>>().join(","),
            "gap_fill" => m.gap_fill.to_string(),
            "hierarchical" => m.hierarchical.to_string(),
            "head_mode" => match m.head_mode {
                HeadMode::Shared3 => "shared3".into(),
                HeadMode::PerAxis => "per_axis".into(),
            },
            "zero_init_heads" => m.zero_init_heads.to_string(),
            "model_seed" => m.seed.to_string(),
            "epochs_stage1" => t.epochs_stage1.to_string(),
            "epochs_stage2" => t.epochs_stage2.to_string(),
            "lr_stage1" => t.lr_stage1.to_string(),
            "lr_stage2" => t.lr_stage2.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "alpha_stage1" => t.stage1.alpha.to_string(),
            "beta_stage1" => t.stage1.beta.to_string(),
            "alpha_stage2" => t.stage2.alpha.to_string(),
            "beta_stage2" => t.stage2.beta.to_string(),
            "seed" => t.seed.to_string(),
            "no_similarity" => t.no_similarity.to_string(),
            "plain_unet" => t.plain_unet.to_string(),
            "similarity_scheme" => t.similarity_scheme.name().into(),
            "similarity_gradient" => t.similarity_gradient.to_string(),
            "patches_per_sample" => t.patches_per_sample.to_string(),
            "val_patches_per_sample" => t.val_patches_per_sample.to_string(),
            "normalizer_warmup" => t.normalizer_warmup.to_string(),
            "deterministic" => t.deterministic.to_string(),
            "dims" => join(&d.dims),
            "n_rois" => d.n_rois.to_string(),
            "phantom_noise" => d.phantom_noise.to_string(),
            "blur_sigma" => d.blur_sigma.to_string(),
            "max_disp" => d.max_magnitude.to_string(),
            "smoothness" => d.smoothness.to_string(),
            "pairs" => d.train_pairs.to_string(),
            "val_pairs" => d.val_pairs.to_string(),
            "fractions" => join(&d.fractions),
            "augment" => d.augment.name().into(),
            "noise_gt" => d.supervision_noise.to_string(),
            "data_seed" => d.seed.to_string(),
            "precision" => self.precision.name().into(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Apply the assignments in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
            self.set(k, v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// `key=value` override as given on the command line.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("every listed key is readable"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train.check_model(&self.model)?;
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.train.deterministic && self.threads != 1 {
            return Err(Error::Config("deterministic mode runs on one thread".into()));
        }
        Ok(())
    }
}
