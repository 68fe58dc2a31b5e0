//! Swin-style hierarchical backbone: patch embedding, four stages of
//! (shifted-)window attention blocks, and patch merging between stages.
//!
//! Parameter names:
//!
//! ```text
//! patch_embed.proj.{weight,bias}        [3·p·p, C0], [C0]
//! patch_embed.norm.{weight,bias}
//! stages.{s}.blocks.{b}.norm1 / attn.qkv / attn.proj /
//!     attn.relative_position_bias_table / norm2 / mlp.fc1 / mlp.fc2
//! stages.{s}.downsample.norm            [4C]      (s < 3)
//! stages.{s}.downsample.reduction.weight [4C, 2C] (no bias)
//! norms.{s}.{weight,bias}               per-stage output norm
//! ```

mod attention;
mod block;
pub mod window;

use std::rc::Rc;

pub use attention::{window_attention, AttentionOutput};
pub use block::{attention_residual, mlp_residual, swin_block_vanilla, BlockGeometry, BlockState};

use crate::adapter::{self, TunaConfig};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::params::{Component, Init, ParamSpec};
use crate::tensor::{Graph, Var, GATHER_ZERO};

pub const NUM_STAGES: usize = 4;
pub const IN_CHANNELS: usize = 3;
/// Standard deviation of the seeded stand-in for pre-trained projection weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dims: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::swin_large()
    }
}

impl BackboneConfig {
    /// Swin-L: the reference configuration for parameter accounting.
    pub fn swin_large() -> Self {
        BackboneConfig {
            patch_size: 4,
            embed_dims: [192, 384, 768, 1536],
            depths: [2, 2, 18, 2],
            num_heads: [6, 12, 24, 48],
            window_size: 7,
            mlp_ratio: 4.0,
            dropout: 0.1,
        }
    }

    /// Desk-scale backbone used by the tests and bundled configs.
    pub fn toy() -> Self {
        BackboneConfig {
            patch_size: 4,
            embed_dims: [8, 16, 32, 64],
            depths: [1, 1, 2, 1],
            num_heads: [1, 2, 4, 8],
            window_size: 4,
            mlp_ratio: 4.0,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 {
            return bad("backbone.patch_size must be positive".into());
        }
        if self.window_size < 2 {
            return bad(format!("backbone.window_size must be at least 2, got {}", self.window_size));
        }
        for s in 0..NUM_STAGES {
            if self.depths[s] == 0 {
                return bad(format!("backbone.depths[{s}] must be at least 1"));
            }
            if self.num_heads[s] == 0 || !self.embed_dims[s].is_multiple_of(self.num_heads[s]) {
                return bad(format!(
                    "backbone.num_heads[{s}]={} must divide embed_dims[{s}]={}",
                    self.num_heads[s], self.embed_dims[s]
                ));
            }
            if s + 1 < NUM_STAGES && self.embed_dims[s + 1] != 2 * self.embed_dims[s] {
                return bad(format!(
                    "backbone.embed_dims must double per stage, got {:?}",
                    self.embed_dims
                ));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("backbone.mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("backbone.dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        (self.embed_dims[stage] as f64 * self.mlp_ratio).round() as usize
    }

    pub fn num_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let tn = Init::TruncNormal { std: INIT_STD };
        let (zeros, ones) = (Init::Const(0.0), Init::Const(1.0));
        let bb = Component::Backbone;
        let mut specs = Vec::new();
        let ln = |specs: &mut Vec<ParamSpec>, prefix: String, c: usize| {
            specs.push(ParamSpec::new(format!("{prefix}.weight"), [c], ones, bb));
            specs.push(ParamSpec::new(format!("{prefix}.bias"), [c], zeros, bb));
        };
        let p = self.patch_size;
        let c0 = self.embed_dims[0];
        specs.push(ParamSpec::new("patch_embed.proj.weight", [IN_CHANNELS * p * p, c0], tn, bb));
        specs.push(ParamSpec::new("patch_embed.proj.bias", [c0], zeros, bb));
        ln(&mut specs, "patch_embed.norm".into(), c0);
        let span = 2 * self.window_size - 1;
        for s in 0..NUM_STAGES {
            let c = self.embed_dims[s];
            let hidden = self.mlp_hidden(s);
            for b in 0..self.depths[s] {
                let pre = block_prefix(s, b);
                ln(&mut specs, format!("{pre}.norm1"), c);
                specs.push(ParamSpec::new(format!("{pre}.attn.qkv.weight"), [c, 3 * c], tn, bb));
                specs.push(ParamSpec::new(format!("{pre}.attn.qkv.bias"), [3 * c], zeros, bb));
                specs.push(ParamSpec::new(
                    format!("{pre}.attn.relative_position_bias_table"),
                    [span * span, self.num_heads[s]],
                    tn,
                    bb,
                ));
                specs.push(ParamSpec::new(format!("{pre}.attn.proj.weight"), [c, c], tn, bb));
                specs.push(ParamSpec::new(format!("{pre}.attn.proj.bias"), [c], zeros, bb));
                ln(&mut specs, format!("{pre}.norm2"), c);
                specs.push(ParamSpec::new(format!("{pre}.mlp.fc1.weight"), [c, hidden], tn, bb));
                specs.push(ParamSpec::new(format!("{pre}.mlp.fc1.bias"), [hidden], zeros, bb));
                specs.push(ParamSpec::new(format!("{pre}.mlp.fc2.weight"), [hidden, c], tn, bb));
                specs.push(ParamSpec::new(format!("{pre}.mlp.fc2.bias"), [c], zeros, bb));
            }
            if s + 1 < NUM_STAGES {
                ln(&mut specs, format!("stages.{s}.downsample.norm"), 4 * c);
                specs.push(ParamSpec::new(format!("stages.{s}.downsample.reduction.weight"), [4 * c, 2 * c], tn, bb));
            }
            ln(&mut specs, format!("norms.{s}"), c);
        }
        specs
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

/// One stage's output tokens `[B, h·w, C]` and their grid.
#[derive(Clone, Copy, Debug)]
pub struct StageFeature {
    pub tokens: Var,
    pub spatial: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct StageFeatures {
    pub stages: Vec<StageFeature>,
}

/// Splits `[B,3,H,W]` into non-overlapping `p×p` patches, zero-padding the
/// bottom/right edge, giving `[B, hp·wp, 3·p·p]` with patch vectors ordered
/// `(channel, row, col)`.
pub fn patch_unfold(g: &mut Graph, image: Var, p: usize) -> Result<(Var, (usize, usize))> {
    let [b, c, h, w] = match *g.shape(image) {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(Error::dim("patch_embed", format!("expected [B,3,H,W], got {s:?}"))),
    };
    if c != IN_CHANNELS {
        return Err(Error::dim("patch_embed", format!("expected 3 input channels, got {c}")));
    }
    let (hp, wp) = (h.div_ceil(p), w.div_ceil(p));
    let mut index = Vec::with_capacity(b * hp * wp * c * p * p);
    for bi in 0..b {
        for py in 0..hp {
            for px in 0..wp {
                for ch in 0..c {
                    for u in 0..p {
                        for v in 0..p {
                            let (y, x) = (py * p + u, px * p + v);
                            index.push(if y < h && x < w { ((bi * c + ch) * h + y) * w + x } else { GATHER_ZERO });
                        }
                    }
                }
            }
        }
    }
    let patches = g.gather(image, vec![b, hp * wp, c * p * p], Rc::new(index), "patch_unfold");
    Ok((patches, (hp, wp)))
}

/// Patch projection followed by layer norm.
pub fn patch_embed(fw: &mut Forward<'_>, image: Var, patch_size: usize) -> Result<(Var, (usize, usize))> {
    let (patches, grid) = patch_unfold(&mut fw.graph, image, patch_size)?;
    let tokens = fw.linear("patch_embed.proj", patches, true)?;
    let tokens = fw.layer_norm("patch_embed.norm", tokens)?;
    Ok((tokens, grid))
}

/// Concatenates each 2×2 neighbourhood (4C), normalises and projects to 2C.
/// Odd grids are zero-padded first.
pub fn patch_merging(fw: &mut Forward<'_>, prefix: &str, x: Var, (h, w): (usize, usize)) -> Result<(Var, (usize, usize))> {
    let [b, l, c] = match *fw.graph.shape(x) {
        [b, l, c] => [b, l, c],
        ref s => return Err(Error::dim("patch_merging", format!("expected [B,L,C], got {s:?}"))),
    };
    if l != h * w {
        return Err(Error::Contract(format!("{l} tokens do not match a {h}x{w} map")));
    }
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    // Neighbour order (dy, dx): (0,0), (1,0), (0,1), (1,1).
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let mut index = Vec::with_capacity(b * h2 * w2 * 4 * c);
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                for (dy, dx) in OFFSETS {
                    let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                    for ch in 0..c {
                        index.push(if sy < h && sx < w { (bi * l + sy * w + sx) * c + ch } else { GATHER_ZERO });
                    }
                }
            }
        }
    }
    let merged = fw
        .graph
        .gather(x, vec![b, h2 * w2, 4 * c], Rc::new(index), "patch_merge_gather");
    let merged = fw.layer_norm(&format!("{prefix}.norm"), merged)?;
    let out = fw.linear(&format!("{prefix}.reduction"), merged, false)?;
    Ok((out, (h2, w2)))
}

/// Runs the four stages. With `tuna` set, every block goes through the
/// adapter-injected block instead of the vanilla one.
pub fn backbone_forward(
    fw: &mut Forward<'_>,
    cfg: &BackboneConfig,
    image: Var,
    tuna: Option<&TunaConfig>,
) -> Result<StageFeatures> {
    let (mut x, mut spatial) = patch_embed(fw, image, cfg.patch_size)?;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for s in 0..NUM_STAGES {
        for b in 0..cfg.depths[s] {
            let geom = BlockGeometry::for_block(b, cfg.num_heads[s], cfg.window_size, cfg.dropout, spatial);
            let prefix = block_prefix(s, b);
            x = match tuna {
                Some(tcfg) => adapter::block_forward(fw, &prefix, x, spatial, &geom, tcfg)?,
                None => swin_block_vanilla(fw, &prefix, x, spatial, &geom)?.z_out,
            };
        }
        let out = fw.layer_norm(&format!("norms.{s}"), x)?;
        stages.push(StageFeature { tokens: out, spatial });
        if s + 1 < NUM_STAGES {
            (x, spatial) = patch_merging(fw, &format!("stages.{s}.downsample"), x, spatial)?;
        }
    }
    Ok(StageFeatures { stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::seeded_rng;
    use rand::Rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(n, t, Component::Backbone, false).unwrap();
        }
        s
    }

    #[test]
    fn patch_embed_shape_and_channel_check() {
        let s = store(vec![
            ("patch_embed.proj.weight", random(1, &[48, 6])),
            ("patch_embed.proj.bias", Tensor::zeros([6])),
            ("patch_embed.norm.weight", Tensor::ones([6])),
            ("patch_embed.norm.bias", Tensor::zeros([6])),
        ]);
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let img = fw.graph.constant(random(2, &[1, 3, 8, 8]));
        let (tok, grid) = patch_embed(&mut fw, img, 4).unwrap();
        assert_eq!((fw.graph.shape(tok), grid), (&[1usize, 4, 6][..], (2, 2)));
        let grey = fw.graph.constant(Tensor::zeros([1, 1, 8, 8]));
        assert!(matches!(patch_embed(&mut fw, grey, 4), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unfold_projection_matches_loop_oracle() {
        let (p, c0) = (3, 5);
        let img = random(3, &[2, 3, 7, 8]);
        let (w, b) = (random(4, &[3 * p * p, c0]), random(5, &[c0]));
        let mut g = Graph::new();
        let iv = g.constant(img.clone());
        let (patches, (hp, wp)) = patch_unfold(&mut g, iv, p).unwrap();
        assert_eq!((hp, wp), (3, 3));
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let tok = g.linear(patches, wv, Some(bv)).unwrap();
        let got = g.value(tok);
        for bi in 0..2 {
            for py in 0..hp {
                for px in 0..wp {
                    for o in 0..c0 {
                        let mut acc = b.data()[o];
                        for ch in 0..3 {
                            for u in 0..p {
                                for v in 0..p {
                                    let (y, x) = (py * p + u, px * p + v);
                                    if y < 7 && x < 8 {
                                        acc += img.at(&[bi, ch, y, x]) * w.at(&[(ch * p + u) * p + v, o]);
                                    }
                                }
                            }
                        }
                        assert!((got.at(&[bi, py * wp + px, o]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let mut g = Graph::new();
        let iv = g.constant(Tensor::zeros([1, 3, 8, 8]));
        let (patches, _) = patch_unfold(&mut g, iv, 4).unwrap();
        let wv = g.constant(random(6, &[48, 4]));
        let bv = g.constant(Tensor::zeros([4]));
        let tok = g.linear(patches, wv, Some(bv)).unwrap();
        assert!(g.value(tok).data().iter().all(|&v| v == 0.0));
    }

    fn merge_store(c: usize, seed: u64) -> ParamStore {
        store(vec![
            ("m.norm.weight", Tensor::ones([4 * c])),
            ("m.norm.bias", Tensor::zeros([4 * c])),
            ("m.reduction.weight", random(seed, &[4 * c, 2 * c])),
        ])
    }

    #[test]
    fn merging_matches_neighbourhood_oracle() {
        let c = 3;
        let s = merge_store(c, 7);
        let x = random(8, &[1, 16, c]);
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let xv = fw.graph.constant(x.clone());
        let (out, grid) = patch_merging(&mut fw, "m", xv, (4, 4)).unwrap();
        assert_eq!((fw.graph.shape(out), grid), (&[1usize, 4, 2 * c][..], (2, 2)));
        let red = s.tensor("m.reduction.weight").unwrap();
        for y in 0..2 {
            for xx in 0..2 {
                let mut cat = Vec::new();
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let t = (2 * y + dy) * 4 + 2 * xx + dx;
                    cat.extend((0..c).map(|ch| x.at(&[0, t, ch])));
                }
                let mean = cat.iter().sum::<f64>() / cat.len() as f64;
                let var = cat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cat.len() as f64;
                let normed: Vec<f64> = cat.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
                for o in 0..2 * c {
                    let want: f64 = normed.iter().enumerate().map(|(k, v)| v * red.at(&[k, o])).sum();
                    assert!((fw.graph.value(out).at(&[0, y * 2 + xx, o]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn merging_shapes_and_constant_input() {
        let c = 4;
        let s = merge_store(c, 9);
        let mut rng = seeded_rng(0);
        let mut fw = Forward::new(&s, false, &mut rng);
        let xv = fw.graph.constant(random(10, &[1, 4, c]));
        let (out, grid) = patch_merging(&mut fw, "m", xv, (2, 2)).unwrap();
        assert_eq!((fw.graph.shape(out), grid), (&[1usize, 1, 2 * c][..], (1, 1)));

        let token = random(11, &[c]);
        let same = Tensor::from_fn([1, 36, c], |i| token.data()[i % c]);
        let xv = fw.graph.constant(same);
        let (out, grid) = patch_merging(&mut fw, "m", xv, (6, 6)).unwrap();
        assert_eq!(grid, (3, 3));
        let rows: Vec<&[f64]> = fw.graph.value(out).data().chunks(2 * c).collect();
        assert!(rows.iter().all(|r| r == &rows[0]));

        let xv = fw.graph.constant(random(12, &[1, 15, c]));
        let (out, grid) = patch_merging(&mut fw, "m", xv, (3, 5)).unwrap();
        assert_eq!((fw.graph.shape(out)[1], grid), (6, (2, 3)));
    }

    #[test]
    fn swin_large_backbone_count() {
        let cfg = BackboneConfig::swin_large();
        let mut oracle = 48 * 192 + 192 + 2 * 192;
        for s in 0..4 {
            let (c, heads) = (cfg.embed_dims[s], cfg.num_heads[s]);
            let block = 2 * c + (3 * c * c + 3 * c) + 169 * heads + (c * c + c) + 2 * c + (4 * c * c + 4 * c) + (4 * c * c + c);
            oracle += cfg.depths[s] * block + 2 * c;
            if s < 3 {
                oracle += 8 * c + 8 * c * c;
            }
        }
        let counted: usize = cfg.param_specs().iter().map(ParamSpec::numel).sum();
        assert_eq!(counted, oracle);
    }

    #[test]
    fn validation() {
        assert!(BackboneConfig::toy().validate().is_ok());
        assert!(BackboneConfig::swin_large().validate().is_ok());
        assert!(BackboneConfig { num_heads: [3, 2, 4, 8], ..BackboneConfig::toy() }.validate().is_err());
        assert!(BackboneConfig { embed_dims: [8, 16, 24, 64], ..BackboneConfig::toy() }.validate().is_err());
        assert!(BackboneConfig { window_size: 1, ..BackboneConfig::toy() }.validate().is_err());
    }

    #[test]
    fn inference_forward_is_deterministic() {
        let cfg = BackboneConfig::toy();
        let mut s = ParamStore::new();
        let mut rng = seeded_rng(13);
        for spec in cfg.param_specs() {
            let t = spec.materialize(&mut rng);
            s.insert(spec.name, t, spec.component, false).unwrap();
        }
        let img = random(14, &[1, 3, 20, 28]);
        let run = || {
            let mut r = seeded_rng(0);
            let mut fw = Forward::new(&s, false, &mut r);
            let iv = fw.graph.constant(img.clone());
            let f = backbone_forward(&mut fw, &cfg, iv, None).unwrap();
            f.stages.iter().map(|st| (st.spatial, fw.graph.value(st.tokens).clone())).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        let grids: Vec<_> = a.iter().map(|(g, _)| *g).collect();
        assert_eq!(grids, vec![(5, 7), (3, 4), (2, 2), (1, 1)]);
    }
}
