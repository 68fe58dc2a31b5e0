//! Full segmentation model: backbone (optionally adapter-injected) + head,
//! and the presets that decide which components train.

use std::fmt;
use std::str::FromStr;

use crate::adapter::{self, TunaConfig};
use crate::backbone::{backbone_forward, BackboneConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::head::{head_forward, HeadConfig, DEFAULT_IGNORE_INDEX};
use crate::params::{Component, CountFilter, ParamSpec, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::train::Checkpoint;
use crate::SeededRng;

/// Which parameters train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Adapters, scales and head train; backbone frozen.
    Tuna,
    /// Only the head trains; no adapters are injected.
    LinearProbe,
    /// Everything trains; no adapters are injected.
    FullFinetune,
}

impl Preset {
    pub fn injects_adapters(self) -> bool {
        matches!(self, Preset::Tuna)
    }

    pub fn is_trainable(self, component: Component) -> bool {
        match self {
            Preset::Tuna => component != Component::Backbone,
            Preset::LinearProbe => component == Component::Head,
            Preset::FullFinetune => true,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tuna => "tuna",
            Preset::LinearProbe => "linear_probe",
            Preset::FullFinetune => "full_ft",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuna" => Ok(Preset::Tuna),
            "linear_probe" => Ok(Preset::LinearProbe),
            "full_ft" => Ok(Preset::FullFinetune),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tuna: TunaConfig,
    pub head: HeadConfig,
    pub preset: Preset,
    pub ignore_index: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            tuna: TunaConfig::default(),
            head: HeadConfig::default(),
            preset: Preset::Tuna,
            ignore_index: DEFAULT_IGNORE_INDEX,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.tuna.validate()?;
        self.head.validate()?;
        if (self.ignore_index as usize) < self.head.num_classes {
            return Err(Error::Config(format!(
                "loss.ignore_index {} collides with a class id (num_classes {})",
                self.ignore_index, self.head.num_classes
            )));
        }
        Ok(())
    }

    /// Every parameter of the model, without allocating.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone.param_specs();
        if self.preset.injects_adapters() {
            specs.extend(self.tuna.param_specs(&self.backbone));
        }
        specs.extend(self.head.param_specs(&self.backbone.embed_dims));
        specs
    }

    pub fn count_params(&self, filter: CountFilter) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| filter_matches(filter, s.component, self.preset.is_trainable(s.component)))
            .map(ParamSpec::numel)
            .sum()
    }
}

fn filter_matches(filter: CountFilter, component: Component, trainable: bool) -> bool {
    match filter {
        CountFilter::All => true,
        CountFilter::Trainable => trainable,
        CountFilter::AdaptersOnly => matches!(component, Component::Tuna | Component::Scales),
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Backbone weights come from `backbone_rng` (the stand-in for
    /// pre-trained weights, shared across tasks); adapters and head from
    /// `adapter_rng`.
    pub fn new(config: ModelConfig, backbone_rng: &mut SeededRng, adapter_rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for spec in config.backbone.param_specs() {
            let t = spec.materialize(backbone_rng);
            store.insert(spec.name, t, spec.component, false)?;
        }
        if config.preset.injects_adapters() {
            adapter::inject(&mut store, &config.backbone, &config.tuna, adapter_rng)?;
        }
        for spec in config.head.param_specs(&config.backbone.embed_dims) {
            let t = spec.materialize(adapter_rng);
            store.insert(spec.name, t, spec.component, true)?;
        }
        let preset = config.preset;
        store.apply_freeze(|c| preset.is_trainable(c));
        Ok(Model { config, store })
    }

    pub fn count_params(&self, filter: CountFilter) -> usize {
        self.store.count(filter)
    }

    /// Replaces the seeded stand-in backbone with externally supplied
    /// tensors. Every backbone parameter must be present with its shape;
    /// nothing changes on error.
    pub fn load_backbone(&mut self, weights: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| p.component == Component::Backbone)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in &names {
            let t = weights
                .tensors
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("backbone weights lack {name}")))?;
            let want = self.store.tensor(name)?.shape();
            if t.shape() != want {
                return Err(Error::Compatibility(format!("{name}: weights {:?}, model {want:?}", t.shape())));
            }
        }
        if let Some(extra) = weights.tensors.keys().find(|k| !names.contains(k)) {
            return Err(Error::Compatibility(format!("backbone weights contain unknown tensor {extra}")));
        }
        for name in &names {
            self.store.set(name, weights.tensors[name].clone())?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.frozen_fingerprint()
    }

    /// Backbone features for `images` `[B,3,H,W]`.
    pub fn features(&self, fw: &mut Forward<'_>, images: Var) -> Result<StageFeatures> {
        let tuna = self.config.preset.injects_adapters().then_some(&self.config.tuna);
        backbone_forward(fw, &self.config.backbone, images, tuna)
    }

    /// Logits `[B, K, H, W]` at the input resolution.
    pub fn forward(&self, fw: &mut Forward<'_>, images: Var) -> Result<Var> {
        let (h, w) = match *fw.graph.shape(images) {
            [_, _, h, w] => (h, w),
            ref s => return Err(Error::dim("Model::forward", format!("expected [B,3,H,W], got {s:?}"))),
        };
        let features = self.features(fw, images)?;
        let p = self.config.backbone.patch_size;
        let (gh, gw) = features.stages[0].spatial;
        let logits = head_forward(fw, &features, (gh * p, gw * p))?;
        let g = &mut fw.graph;
        let logits = if gh * p != h { g.narrow(logits, 2, 0, h)? } else { logits };
        let logits = if gw * p != w { g.narrow(logits, 3, 0, w)? } else { logits };
        Ok(logits)
    }

    /// Inference-mode class map `[H·W]` for one `[3,H,W]` image.
    pub fn predict(&self, image: &Tensor, rng: &mut SeededRng) -> Result<Vec<u32>> {
        let shape = image.shape().to_vec();
        let [c, h, w] = match shape[..] {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::dim("Model::predict", format!("expected [3,H,W], got {shape:?}"))),
        };
        let mut fw = Forward::new(&self.store, false, rng);
        let x = fw.graph.constant(image.reshaped([1, c, h, w])?);
        let logits = self.forward(&mut fw, x)?;
        Ok(argmax_channels(fw.graph.value(logits)))
    }
}

/// Per-pixel argmax over axis 1 of `[B,K,H,W]`, laid out `[B,H,W]`.
/// Ties resolve to the lowest class id.
pub fn argmax_channels(logits: &Tensor) -> Vec<u32> {
    let [b, k, h, w] = [logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * hw + px] > d[(bi * k + best) * hw + px] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    out
}
