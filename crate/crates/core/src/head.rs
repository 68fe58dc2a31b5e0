//! Lightweight multi-scale segmentation head and the pixel-wise loss.
//!
//! Each stage is projected to `F` channels, bilinearly resized to the
//! stage-0 grid, concatenated (4F), fused by a 1×1 convolution with GeLU,
//! classified by another 1×1 convolution, and resized to the output size.

use crate::backbone::{StageFeatures, NUM_STAGES};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{Component, Init, ParamSpec};
use crate::tensor::Var;

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Common channel width `F`.
    pub channels: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            channels: 64,
            num_classes: 104,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("head.channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("head.num_classes must be at least 2, got {}", self.num_classes)));
        }
        Ok(())
    }

    pub fn param_specs(&self, stage_dims: &[usize; NUM_STAGES]) -> Vec<ParamSpec> {
        let f = self.channels;
        let tn = Init::TruncNormal { std: 0.02 };
        let zeros = Init::Const(0.0);
        let h = Component::Head;
        let mut specs = Vec::new();
        for (s, &c) in stage_dims.iter().enumerate() {
            specs.push(ParamSpec::new(format!("head.lateral.{s}.weight"), [c, f], tn, h));
            specs.push(ParamSpec::new(format!("head.lateral.{s}.bias"), [f], zeros, h));
        }
        specs.push(ParamSpec::new("head.fuse.weight", [f, NUM_STAGES * f, 1, 1], tn, h));
        specs.push(ParamSpec::new("head.fuse.bias", [f], zeros, h));
        specs.push(ParamSpec::new("head.cls.weight", [self.num_classes, f, 1, 1], tn, h));
        specs.push(ParamSpec::new("head.cls.bias", [self.num_classes], zeros, h));
        specs
    }
}

/// Logits `[B, num_classes, out_h, out_w]` from the four stage features.
pub fn head_forward(fw: &mut Forward<'_>, features: &StageFeatures, out_size: (usize, usize)) -> Result<Var> {
    let first = features
        .stages
        .first()
        .ok_or_else(|| Error::Contract("segmentation head needs stage features".into()))?;
    let grid = first.spatial;
    let mut lateral = Vec::with_capacity(features.stages.len());
    for (s, feat) in features.stages.iter().enumerate() {
        let (h, w) = feat.spatial;
        let b = fw.graph.shape(feat.tokens)[0];
        let x = fw.linear(&format!("head.lateral.{s}"), feat.tokens, true)?;
        let f = fw.graph.shape(x)[2];
        let g = &mut fw.graph;
        let x = g.reshape(x, &[b, h, w, f])?;
        let x = g.permute(x, &[0, 3, 1, 2])?;
        lateral.push(g.resize_bilinear(x, grid)?);
    }
    let cat = fw.graph.concat(&lateral, 1)?;
    let (fw_w, fw_b) = (fw.param("head.fuse.weight")?, fw.param("head.fuse.bias")?);
    let (cls_w, cls_b) = (fw.param("head.cls.weight")?, fw.param("head.cls.bias")?);
    let g = &mut fw.graph;
    let fused = g.conv2d_pointwise(cat, fw_w, fw_b)?;
    let fused = g.gelu(fused);
    let logits = g.conv2d_pointwise(fused, cls_w, cls_b)?;
    g.resize_bilinear(logits, out_size)
}

/// Mean cross-entropy over non-ignored pixels.
pub fn segmentation_loss(fw: &mut Forward<'_>, logits: Var, target: &[u32], ignore_index: u32) -> Result<Var> {
    fw.graph.cross_entropy(logits, target, ignore_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StageFeature;
    use crate::params::ParamStore;
    use crate::seeded_rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    const DIMS: [usize; NUM_STAGES] = [4, 8, 16, 32];

    fn head_store(cfg: &HeadConfig, seed: u64) -> ParamStore {
        let mut rng = seeded_rng(seed);
        let mut s = ParamStore::new();
        for spec in cfg.param_specs(&DIMS) {
            let t = spec.materialize(&mut rng);
            s.insert(spec.name, t, spec.component, true).unwrap();
        }
        s
    }

    fn features(fw: &mut Forward<'_>, seed: u64) -> StageFeatures {
        let mut rng = seeded_rng(seed);
        let grids = [(6, 5), (3, 3), (2, 2), (1, 1)];
        let stages = grids
            .iter()
            .zip(DIMS)
            .map(|(&(h, w), c)| StageFeature {
                tokens: fw.graph.constant(Tensor::from_fn([2, h * w, c], |_| rng.random_range(-1.0..1.0))),
                spatial: (h, w),
            })
            .collect();
        StageFeatures { stages }
    }

    #[test]
    fn zero_classifier_gives_bias_map() {
        let cfg = HeadConfig { channels: 6, num_classes: 2 };
        let mut s = head_store(&cfg, 1);
        s.set("head.cls.weight", Tensor::zeros([2, 6, 1, 1])).unwrap();
        s.set("head.cls.bias", Tensor::new([2], vec![0.25, -3.0]).unwrap()).unwrap();
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let f = features(&mut fw, 2);
        let logits = head_forward(&mut fw, &f, (13, 9)).unwrap();
        let v = fw.graph.value(logits);
        assert_eq!(v.shape(), &[2, 2, 13, 9]);
        for (i, &x) in v.data().iter().enumerate() {
            let want = if (i / (13 * 9)) % 2 == 0 { 0.25 } else { -3.0 };
            assert!((x - want).abs() < 1e-14);
        }
    }

    #[test]
    fn output_follows_requested_size() {
        let cfg = HeadConfig { channels: 4, num_classes: 5 };
        let s = head_store(&cfg, 3);
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let f = features(&mut fw, 4);
        for size in [(6, 5), (1, 1), (31, 17)] {
            let l = head_forward(&mut fw, &f, size).unwrap();
            assert_eq!(fw.graph.shape(l), &[2, 5, size.0, size.1]);
        }
        let empty = StageFeatures { stages: vec![] };
        assert!(matches!(head_forward(&mut fw, &empty, (4, 4)), Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_count_by_hand() {
        let cfg = HeadConfig { channels: 64, num_classes: 104 };
        let lateral: usize = [192, 384, 768, 1536].iter().map(|c| c * 64 + 64).sum();
        let n: usize = cfg.param_specs(&[192, 384, 768, 1536]).iter().map(ParamSpec::numel).sum();
        assert_eq!(n, lateral + (256 * 64 + 64) + (64 * 104 + 104));
        assert!(cfg.param_specs(&DIMS).iter().all(|p| p.component == Component::Head));
    }

    #[test]
    fn loss_is_ln_k_for_uniform_logits() {
        let s = ParamStore::new();
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, true, &mut rng);
        let logits = fw.graph.constant(Tensor::full([1, 5, 2, 3], -1.5));
        let loss = segmentation_loss(&mut fw, logits, &[0, 4, 3, 255, 1, 2], 255).unwrap();
        assert!((fw.graph.value(loss).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(HeadConfig { channels: 0, num_classes: 3 }.validate().is_err());
        assert!(HeadConfig { channels: 8, num_classes: 1 }.validate().is_err());
        assert!(HeadConfig::default().validate().is_ok());
    }
}
