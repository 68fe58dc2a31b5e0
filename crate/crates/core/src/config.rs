//! Run configuration: a flat `section.key = value` text format with
//! defaults for every key, `#` comments, and `key=value` overrides.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, NUM_STAGES};
use crate::data::{generate_synthetic, load_dataset, LoadedDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::seeded_rng;
use crate::train::{Checkpoint, TrainConfig};

/// Fallback for `train.seed`.
pub const SEED_ENV: &str = "TUNA_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Directory of PPM/PGM pairs; synthetic data when unset.
    pub path: Option<PathBuf>,
    /// Evaluation set; the training set when unset.
    pub eval_path: Option<PathBuf>,
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        DataConfig {
            path: None,
            eval_path: None,
            num_images: s.num_images,
            height: s.height,
            width: s.width,
            noise: s.noise_std,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub backbone_seed: u64,
    /// Container of backbone tensors replacing the seeded stand-in.
    pub backbone_weights: Option<PathBuf>,
    pub train: TrainConfig,
    /// `None` until set by file, override or environment.
    pub train_seed: Option<u64>,
    pub data: DataConfig,
}


fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for key `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<[T; NUM_STAGES]>
where
    T::Err: Display,
{
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    let items = inner
        .split(',')
        .map(|s| parse_scalar(key, s.trim()))
        .collect::<Result<Vec<T>>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("key `{key}` needs {NUM_STAGES} comma-separated values, got {n}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for key `{key}`: expected true or false"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("invalid value {value:?} for key `{key}`: expected HxW")))?;
    Ok((parse_scalar(key, h.trim())?, parse_scalar(key, w.trim())?))
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Defaults, then every `key = value` line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "preset" => m.preset = parse_scalar(key, v)?,
            "backbone.patch_size" => m.backbone.patch_size = parse_scalar(key, v)?,
            "backbone.embed_dims" => m.backbone.embed_dims = parse_list(key, v)?,
            "backbone.depths" => m.backbone.depths = parse_list(key, v)?,
            "backbone.num_heads" => m.backbone.num_heads = parse_list(key, v)?,
            "backbone.window_size" => m.backbone.window_size = parse_scalar(key, v)?,
            "backbone.mlp_ratio" => m.backbone.mlp_ratio = parse_scalar(key, v)?,
            "backbone.dropout" => m.backbone.dropout = parse_scalar(key, v)?,
            "backbone.seed" => self.backbone_seed = parse_scalar(key, v)?,
            "backbone.weights" => self.backbone_weights = parse_path(v),
            "tuna.kernel_sizes" => m.tuna.kernel_sizes = parse_list(key, v)?,
            "tuna.bottleneck_dims" => m.tuna.bottleneck_dims = parse_list(key, v)?,
            "tuna.structure" => m.tuna.structure = parse_scalar(key, v)?,
            "tuna.s1_init" => m.tuna.s1_init = parse_scalar(key, v)?,
            "tuna.s2_init" => m.tuna.s2_init = parse_scalar(key, v)?,
            "tuna.dropout" => m.tuna.dropout = parse_scalar(key, v)?,
            "tuna.adaptive_convolution" => m.tuna.adaptive_convolution = parse_bool(key, v)?,
            "tuna.adaptive_embedding" => m.tuna.adaptive_embedding = parse_bool(key, v)?,
            "head.channels" => m.head.channels = parse_scalar(key, v)?,
            "head.num_classes" => m.head.num_classes = parse_scalar(key, v)?,
            "loss.ignore_index" => m.ignore_index = parse_scalar(key, v)?,
            "train.iters" => t.iters = parse_scalar(key, v)?,
            "train.batch" => t.batch_size = parse_scalar(key, v)?,
            "train.crop" => t.crop = parse_size(key, v)?,
            "train.seed" => {
                self.train_seed = if v == "unset" { None } else { Some(parse_scalar(key, v)?) };
            }
            "train.lr" => t.lr = parse_scalar(key, v)?,
            "train.wd" => t.weight_decay = parse_scalar(key, v)?,
            "train.warmup" => t.warmup_iters = parse_scalar(key, v)?,
            "train.min_lr_ratio" => t.min_lr_ratio = parse_scalar(key, v)?,
            "train.eval_interval" => t.eval_interval = parse_scalar(key, v)?,
            "train.log_interval" => t.log_interval = parse_scalar(key, v)?,
            "data.path" => d.path = parse_path(v),
            "data.eval_path" => d.eval_path = parse_path(v),
            "data.num_images" => d.num_images = parse_scalar(key, v)?,
            "data.size" => (d.height, d.width) = parse_size(key, v)?,
            "data.noise" => d.noise = parse_scalar(key, v)?,
            "data.seed" => d.seed = parse_scalar(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let (b, tu, t, d) = (&m.backbone, &m.tuna, &self.train, &self.data);
        vec![
            ("preset", m.preset.to_string()),
            ("backbone.patch_size", b.patch_size.to_string()),
            ("backbone.embed_dims", list(&b.embed_dims)),
            ("backbone.depths", list(&b.depths)),
            ("backbone.num_heads", list(&b.num_heads)),
            ("backbone.window_size", b.window_size.to_string()),
            ("backbone.mlp_ratio", b.mlp_ratio.to_string()),
            ("backbone.dropout", b.dropout.to_string()),
            ("backbone.seed", self.backbone_seed.to_string()),
            ("backbone.weights", path(&self.backbone_weights)),
            ("tuna.kernel_sizes", list(&tu.kernel_sizes)),
            ("tuna.bottleneck_dims", list(&tu.bottleneck_dims)),
            ("tuna.structure", tu.structure.to_string()),
            ("tuna.s1_init", tu.s1_init.to_string()),
            ("tuna.s2_init", tu.s2_init.to_string()),
            ("tuna.dropout", tu.dropout.to_string()),
            ("tuna.adaptive_convolution", tu.adaptive_convolution.to_string()),
            ("tuna.adaptive_embedding", tu.adaptive_embedding.to_string()),
            ("head.channels", m.head.channels.to_string()),
            ("head.num_classes", m.head.num_classes.to_string()),
            ("loss.ignore_index", m.ignore_index.to_string()),
            ("train.iters", t.iters.to_string()),
            ("train.batch", t.batch_size.to_string()),
            ("train.crop", format!("{}x{}", t.crop.0, t.crop.1)),
            ("train.seed", self.train_seed.map_or("unset".into(), |s| s.to_string())),
            ("train.lr", t.lr.to_string()),
            ("train.wd", t.weight_decay.to_string()),
            ("train.warmup", t.warmup_iters.to_string()),
            ("train.min_lr_ratio", t.min_lr_ratio.to_string()),
            ("train.eval_interval", t.eval_interval.to_string()),
            ("train.log_interval", t.log_interval.to_string()),
            ("data.path", path(&d.path)),
            ("data.eval_path", path(&d.eval_path)),
            ("data.num_images", d.num_images.to_string()),
            ("data.size", format!("{}x{}", d.height, d.width)),
            ("data.noise", d.noise.to_string()),
            ("data.seed", d.seed.to_string()),
        ]
    }

    /// The resolved configuration in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Fills `train.seed` from the environment when the config left it unset.
    pub fn resolve_seed_from_env(&mut self) -> Result<()> {
        if self.train_seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                self.train_seed = Some(parse_scalar(SEED_ENV, v.trim())?);
            }
        }
        Ok(())
    }

    /// Training config with the seed filled in; the seed is mandatory here.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let seed = self
            .train_seed
            .ok_or_else(|| Error::Config(format!("train.seed is required (set it or export {SEED_ENV})")))?;
        Ok(TrainConfig { seed, ..self.train.clone() })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_images: self.data.num_images,
            height: self.data.height,
            width: self.data.width,
            num_classes: self.model.head.num_classes,
            noise_std: self.data.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth_spec().validate()
    }

    /// Builds the model: backbone from `backbone.seed` (or the weights
    /// file), adapters and head from `train.seed` (0 when unset).
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(
            self.model.clone(),
            &mut seeded_rng(self.backbone_seed),
            &mut seeded_rng(self.train_seed.unwrap_or(0)),
        )?;
        if let Some(path) = &self.backbone_weights {
            model.load_backbone(&Checkpoint::load(path)?)?;
        }
        Ok(model)
    }

    /// Training samples: `data.path` when set, otherwise the synthetic set
    /// drawn from `data.seed`.
    pub fn training_data(&self) -> Result<LoadedDataset> {
        match &self.data.path {
            Some(dir) => load_dataset(dir, self.model.head.num_classes, self.model.ignore_index),
            None => Ok(LoadedDataset {
                samples: generate_synthetic(&self.synth_spec(), &mut seeded_rng(self.data.seed))?,
                skipped: Vec::new(),
            }),
        }
    }

    /// Evaluation samples: `data.eval_path` when set, else the training set.
    pub fn eval_data(&self) -> Result<LoadedDataset> {
        match &self.data.eval_path {
            Some(dir) => load_dataset(dir, self.model.head.num_classes, self.model.ignore_index),
            None => self.training_data(),
        }
    }

    /// The bundled toy configuration: desk-scale backbone that overfits the
    /// synthetic 3-class task within 2000 iterations.
    pub fn toy() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.backbone = BackboneConfig { patch_size: 2, ..BackboneConfig::toy() };
        cfg.model.tuna.bottleneck_dims = [4, 4, 8, 8];
        cfg.model.head.channels = 8;
        cfg.model.head.num_classes = 3;
        cfg.train.iters = 2000;
        cfg.train.lr = 5e-3;
        cfg.train.warmup_iters = 50;
        cfg.train.log_interval = 100;
        cfg.train.eval_interval = 500;
        cfg.train_seed = Some(0);
        cfg
    }
}
