//! The TUNA adapter: a convolutional bottleneck injected into every
//! transformer block of a frozen backbone, balanced against the frozen
//! branch by trainable scales `s1` (per channel) and `s2` (scalar).
//!
//! ```text
//! X_down = F_down(X_in)                               [B, L, d]
//! X_up   = F_up(pw(dw(X_down)) + X_down)              [B, L, C]
//! X_out  = Dropout(GeLU(X_up)) + X_in
//! ```
//!
//! `dw` is a k×k depthwise convolution and `pw` a 1×1 convolution, both on
//! the token grid reshaped to `[B, d, H, W]`.
//!
//! Per-block parameter names, under `stages.{s}.blocks.{b}`:
//! `tuna.down`, `tuna.dw`, `tuna.pw`, `tuna.up` (each `.weight`/`.bias`),
//! `s1` `[C]` and `s2` `[1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{attention_residual, block_prefix, mlp_residual, swin_block_vanilla, BackboneConfig, BlockGeometry, NUM_STAGES};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{Component, Init, ParamSpec, ParamStore};
use crate::tensor::Var;

/// Initial std of adapter projection and convolution weights.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Where the adapter sits relative to the frozen block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    /// Adapter reads the block input; its output is added to the scaled
    /// frozen branch.
    Parallel,
    /// Adapter reads the (scaled) block output and refines it.
    Sequential,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Parallel => "parallel",
            Structure::Sequential => "sequential",
        })
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Structure::Parallel),
            "sequential" => Ok(Structure::Sequential),
            other => Err(Error::Config(format!("unknown adapter structure {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunaConfig {
    /// Depthwise kernel per stage, shallow to deep.
    pub kernel_sizes: [usize; NUM_STAGES],
    /// Bottleneck width per stage.
    pub bottleneck_dims: [usize; NUM_STAGES],
    pub structure: Structure,
    pub s1_init: f64,
    pub s2_init: f64,
    pub dropout: f64,
    /// Stage-dependent kernels; when off every stage uses `kernel_sizes[3]`.
    pub adaptive_convolution: bool,
    /// Stage-dependent bottlenecks; when off every stage uses `bottleneck_dims[0]`.
    pub adaptive_embedding: bool,
}

impl Default for TunaConfig {
    fn default() -> Self {
        TunaConfig {
            kernel_sizes: [7, 5, 5, 3],
            bottleneck_dims: [64, 64, 96, 192],
            structure: Structure::Parallel,
            s1_init: 1e-6,
            s2_init: 0.0,
            dropout: 0.1,
            adaptive_convolution: true,
            adaptive_embedding: true,
        }
    }
}

impl TunaConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("tuna.kernel_sizes must be odd and positive, got {k}")));
        }
        if self.bottleneck_dims.contains(&0) {
            return Err(Error::Config("tuna.bottleneck_dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("tuna.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Kernel size actually instantiated at `stage`.
    pub fn kernel_size(&self, stage: usize) -> usize {
        if self.adaptive_convolution {
            self.kernel_sizes[stage]
        } else {
            self.kernel_sizes[NUM_STAGES - 1]
        }
    }

    /// Bottleneck width actually instantiated at `stage`.
    pub fn bottleneck(&self, stage: usize) -> usize {
        if self.adaptive_embedding {
            self.bottleneck_dims[stage]
        } else {
            self.bottleneck_dims[0]
        }
    }

    /// Adapter and scale parameters for one block with `channels` channels.
    pub fn block_specs(&self, prefix: &str, stage: usize, channels: usize) -> Vec<ParamSpec> {
        let (c, d, k) = (channels, self.bottleneck(stage), self.kernel_size(stage));
        let tn = Init::TruncNormal { std: ADAPTER_INIT_STD };
        let zeros = Init::Const(0.0);
        let t = Component::Tuna;
        vec![
            ParamSpec::new(format!("{prefix}.tuna.down.weight"), [c, d], tn, t),
            ParamSpec::new(format!("{prefix}.tuna.down.bias"), [d], zeros, t),
            ParamSpec::new(format!("{prefix}.tuna.dw.weight"), [d, 1, k, k], tn, t),
            ParamSpec::new(format!("{prefix}.tuna.dw.bias"), [d], zeros, t),
            ParamSpec::new(format!("{prefix}.tuna.pw.weight"), [d, d, 1, 1], tn, t),
            ParamSpec::new(format!("{prefix}.tuna.pw.bias"), [d], zeros, t),
            ParamSpec::new(format!("{prefix}.tuna.up.weight"), [d, c], tn, t),
            ParamSpec::new(format!("{prefix}.tuna.up.bias"), [c], zeros, t),
            ParamSpec::new(format!("{prefix}.s1"), [c], Init::Const(self.s1_init), Component::Scales),
            ParamSpec::new(format!("{prefix}.s2"), [1], Init::Const(self.s2_init), Component::Scales),
        ]
    }

    /// Specs for every block of `backbone`, in stage/block order.
    pub fn param_specs(&self, backbone: &BackboneConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for s in 0..NUM_STAGES {
            for b in 0..backbone.depths[s] {
                specs.extend(self.block_specs(&block_prefix(s, b), s, backbone.embed_dims[s]));
            }
        }
        specs
    }
}

/// Adds adapter and scale parameters for every block to `store` and freezes
/// the backbone. Returns the number of adapter instances created.
pub fn inject<R: Rng + ?Sized>(store: &mut ParamStore, backbone: &BackboneConfig, cfg: &TunaConfig, rng: &mut R) -> Result<usize> {
    cfg.validate()?;
    for spec in cfg.param_specs(backbone) {
        let t = spec.materialize(rng);
        store.insert(spec.name, t, spec.component, true)?;
    }
    store.apply_freeze(|c| c != Component::Backbone);
    Ok(backbone.num_blocks())
}

/// `Dropout(GeLU(F_up(Conv(X_down) + X_down)))`: the adapter without its
/// outer residual. Parameters are read from `{prefix}.{down,dw,pw,up}`.
pub fn tuna_branch(fw: &mut Forward<'_>, prefix: &str, x_in: Var, (h, w): (usize, usize), dropout: f64) -> Result<Var> {
    let [b, l, _c] = match *fw.graph.shape(x_in) {
        [b, l, c] => [b, l, c],
        ref s => return Err(Error::dim("tuna_forward", format!("expected [B,L,C], got {s:?}"))),
    };
    if l != h * w {
        return Err(Error::Contract(format!("adapter input has {l} tokens, spatial grid is {h}x{w}")));
    }
    let down = fw.linear(&format!("{prefix}.down"), x_in, true)?;
    let d = fw.graph.shape(down)[2];
    let dw_w = fw.param(&format!("{prefix}.dw.weight"))?;
    let dw_b = fw.param(&format!("{prefix}.dw.bias"))?;
    let pw_w = fw.param(&format!("{prefix}.pw.weight"))?;
    let pw_b = fw.param(&format!("{prefix}.pw.bias"))?;
    let g = &mut fw.graph;
    // Tokens are row-major over (H, W); move channels first for the convs.
    let grid = g.reshape(down, &[b, h, w, d])?;
    let grid = g.permute(grid, &[0, 3, 1, 2])?;
    let conv = g.conv2d_depthwise(grid, dw_w, dw_b)?;
    let conv = g.conv2d_pointwise(conv, pw_w, pw_b)?;
    let mixed = g.add(conv, grid)?;
    let mixed = g.permute(mixed, &[0, 2, 3, 1])?;
    let mixed = g.reshape(mixed, &[b, l, d])?;
    let up = fw.linear(&format!("{prefix}.up"), mixed, true)?;
    let act = fw.graph.gelu(up);
    fw.dropout(act, dropout)
}

/// The full adapter, `X_out = branch(X_in) + X_in`.
pub fn tuna_forward(fw: &mut Forward<'_>, prefix: &str, x_in: Var, spatial: (usize, usize), dropout: f64) -> Result<Var> {
    let branch = tuna_branch(fw, prefix, x_in, spatial, dropout)?;
    fw.graph.add(branch, x_in)
}

/// A transformer block with the adapter injected.
///
/// Parallel: `z = s1 ⊗ (MLP(LN(ẑ)) + ẑ) + s2 · TUNA(z_prev)`.
/// Sequential: `v = s1 ⊗ block(z_prev)`, `z = v + s2 · branch(v)`.
pub fn block_forward(
    fw: &mut Forward<'_>,
    prefix: &str,
    z_prev: Var,
    spatial: (usize, usize),
    geom: &BlockGeometry,
    cfg: &TunaConfig,
) -> Result<Var> {
    let s1 = fw.param(&format!("{prefix}.s1"))?;
    let s2 = fw.param(&format!("{prefix}.s2"))?;
    let tuna_prefix = format!("{prefix}.tuna");
    match cfg.structure {
        Structure::Parallel => {
            let z_hat = attention_residual(fw, prefix, z_prev, spatial, geom)?;
            let frozen = mlp_residual(fw, prefix, z_hat, geom.dropout)?;
            let frozen = fw.graph.mul_bcast(frozen, s1)?;
            let adapted = tuna_forward(fw, &tuna_prefix, z_prev, spatial, cfg.dropout)?;
            let adapted = fw.graph.mul_scalar(adapted, s2)?;
            fw.graph.add(frozen, adapted)
        }
        Structure::Sequential => {
            let vanilla = swin_block_vanilla(fw, prefix, z_prev, spatial, geom)?.z_out;
            let v = fw.graph.mul_bcast(vanilla, s1)?;
            let delta = tuna_branch(fw, &tuna_prefix, v, spatial, cfg.dropout)?;
            let delta = fw.graph.mul_scalar(delta, s2)?;
            fw.graph.add(v, delta)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn store_with(cfg: &TunaConfig, c: usize, mut fill: impl FnMut(&ParamSpec) -> Tensor) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in cfg.block_specs("blk", 0, c) {
            let t = fill(&spec);
            store.insert(spec.name, t, spec.component, true).unwrap();
        }
        store
    }

    fn small() -> TunaConfig {
        TunaConfig { kernel_sizes: [3; 4], bottleneck_dims: [4; 4], ..TunaConfig::default() }
    }

    #[test]
    fn zero_adapter_is_exact_identity() {
        let cfg = small();
        let store = store_with(&cfg, 6, |s| Tensor::zeros(s.shape.clone()));
        let mut rng = seeded_rng(1);
        let x = Tensor::from_fn([2, 12, 6], |_| rng.random_range(-3.0..3.0));
        for training in [false, true] {
            let mut r = seeded_rng(0);
            let mut fw = Forward::new(&store, training, &mut r);
            let xv = fw.graph.constant(x.clone());
            let out = tuna_forward(&mut fw, "blk.tuna", xv, (3, 4), 0.5).unwrap();
            assert_eq!(fw.graph.value(out).to_le_bytes(), x.to_le_bytes());
        }
    }

    #[test]
    fn adapter_keeps_shape_on_non_square_grid() {
        let cfg = small();
        let mut init = seeded_rng(2);
        let store = store_with(&cfg, 5, |s| s.materialize(&mut init));
        let mut r = seeded_rng(0);
        let mut fw = Forward::new(&store, false, &mut r);
        let xv = fw.graph.constant(Tensor::full([1, 14, 5], 0.3));
        let out = tuna_forward(&mut fw, "blk.tuna", xv, (2, 7), 0.1).unwrap();
        assert_eq!(fw.graph.shape(out), &[1, 14, 5]);
        assert!(matches!(
            tuna_forward(&mut fw, "blk.tuna", xv, (3, 4), 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stage_schedules_and_their_collapsed_forms() {
        let mut cfg = TunaConfig::default();
        let ks = |c: &TunaConfig| (0..4).map(|s| c.kernel_size(s)).collect::<Vec<_>>();
        let ds = |c: &TunaConfig| (0..4).map(|s| c.bottleneck(s)).collect::<Vec<_>>();
        assert_eq!(ks(&cfg), [7, 5, 5, 3]);
        assert_eq!(ds(&cfg), [64, 64, 96, 192]);
        cfg.adaptive_convolution = false;
        cfg.adaptive_embedding = false;
        assert_eq!(ks(&cfg), [3; 4]);
        assert_eq!(ds(&cfg), [64; 4]);
        let dw = cfg.block_specs("b", 2, 768).into_iter().find(|s| s.name == "b.tuna.dw.weight").unwrap();
        assert_eq!(dw.shape, vec![64, 1, 3, 3]);
    }

    #[test]
    fn validation_rejects_bad_hyperparameters() {
        assert!(TunaConfig { kernel_sizes: [7, 4, 5, 3], ..TunaConfig::default() }.validate().is_err());
        assert!(TunaConfig { bottleneck_dims: [0, 64, 96, 192], ..TunaConfig::default() }.validate().is_err());
        assert!(TunaConfig { dropout: 1.0, ..TunaConfig::default() }.validate().is_err());
        assert!(TunaConfig::default().validate().is_ok());
    }

    #[test]
    fn structure_names_round_trip() {
        for s in [Structure::Parallel, Structure::Sequential] {
            assert_eq!(s.to_string().parse::<Structure>().unwrap(), s);
        }
        assert!("serial".parse::<Structure>().is_err());
    }

    #[test]
    fn inject_freezes_everything_else() {
        let backbone = BackboneConfig::toy();
        let mut store = ParamStore::new();
        store.insert("patch_embed.weight", Tensor::zeros([8, 48]), Component::Backbone, true).unwrap();
        let n = inject(&mut store, &backbone, &small(), &mut seeded_rng(3)).unwrap();
        assert_eq!(n, 5);
        for (name, p) in store.iter() {
            assert_eq!(p.trainable, p.component != Component::Backbone, "{name}");
        }
    }
}
