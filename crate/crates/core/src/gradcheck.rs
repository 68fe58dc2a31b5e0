//! Finite-difference verification of every differentiable op and of the
//! composed model paths.
//!
//! Each case owns a small parameter store (all trainable) and a closure
//! that builds an output from it. The checked loss is `Σ out ⊙ R` for a
//! fixed random `R`, so every output element contributes with a distinct
//! weight. Analytic gradients come from one backward pass; numeric ones
//! from central differences with step `h`.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use crate::adapter::{self, tuna_forward, TunaConfig};
use crate::backbone::window::{crop_hw, pad_hw, roll_hw, shifted_window_mask, window_partition, window_reverse};
use crate::backbone::{
    patch_embed, patch_merging, swin_block_vanilla, window_attention, BackboneConfig, BlockGeometry, StageFeature,
    StageFeatures,
};
use crate::error::Result;
use crate::forward::Forward;
use crate::head::{head_forward, segmentation_loss, HeadConfig};
use crate::params::{Component, ParamSpec, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::{seeded_rng, SeededRng};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

/// Every op name the graph can record with a backward rule.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_bcast",
    "mul_bcast",
    "mul_scalar",
    "sum",
    "matmul",
    "reshape",
    "permute",
    "narrow",
    "concat",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "conv2d_depthwise",
    "conv2d_pointwise",
    "resize_bilinear",
    "cross_entropy",
    "pad",
    "crop",
    "roll",
    "window_partition",
    "window_reverse",
    "relative_position_bias",
    "patch_unfold",
    "patch_merge_gather",
];

/// Suite groups, selectable from the command line.
pub const MODULES: &[&str] = &["tensor-core", "swin-backbone", "tuna-adapter", "seg-head-loss"];

type Build = Box<dyn Fn(&mut Forward<'_>) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub module: &'static str,
    store: ParamStore,
    training: bool,
    build: Build,
}

#[derive(Clone, Debug)]
pub struct Options {
    pub step: f64,
    pub tolerance: f64,
    /// Elements checked per tensor; larger tensors are sampled evenly.
    pub max_elements: usize,
    /// Test hook: corrupt the analytic gradient of the named case.
    pub perturb: Option<String>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_elements: 16,
            perturb: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub module: &'static str,
    pub max_rel_error: f64,
    /// Parameter element holding the worst error.
    pub worst: String,
    pub elements: usize,
    pub ops: BTreeSet<&'static str>,
    pub passed: bool,
}

impl fmt::Display for CaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} max_rel_err={:.3e} elements={} worst={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.name,
            self.max_rel_error,
            self.elements,
            self.worst
        )
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

const CASE_SEED: u64 = 0x6772_6164;

impl Case {
    fn new(
        name: &'static str,
        module: &'static str,
        store: ParamStore,
        training: bool,
        build: impl Fn(&mut Forward<'_>) -> Result<Var> + 'static,
    ) -> Self {
        Case { name, module, store, training, build: Box::new(build) }
    }

    /// Builds `Σ out ⊙ R`. Callers pass a freshly seeded rng so dropout
    /// masks repeat between evaluations.
    fn loss<'r>(&self, store: &ParamStore, rng: &'r mut SeededRng, weights: &mut Option<Tensor>) -> Result<(Forward<'r>, Var)> {
        let mut fw = Forward::new(store, self.training, rng);
        let out = (self.build)(&mut fw)?;
        let shape = fw.graph.shape(out).to_vec();
        let r = weights.get_or_insert_with(|| {
            let mut wrng = seeded_rng(CASE_SEED ^ 0xffff);
            Tensor::from_fn(shape, |_| wrng.random_range(0.5..1.5) * if wrng.random_bool(0.5) { 1.0 } else { -1.0 })
        });
        let r = fw.graph.constant(r.clone());
        let prod = fw.graph.mul(out, r)?;
        let loss = fw.graph.sum(prod);
        Ok((fw, loss))
    }

    pub fn run(&self, opts: &Options) -> Result<CaseReport> {
        let mut weights = None;
        let mut rng = seeded_rng(CASE_SEED);
        let (mut fw, loss) = self.loss(&self.store, &mut rng, &mut weights)?;
        let ops: BTreeSet<&'static str> = (0..fw.graph.len()).map(|i| fw.graph.op_name(Var(i))).collect();
        fw.graph.backward(loss)?;
        let mut grads = fw.binding().grads(&fw.graph);
        drop(fw);
        if opts.perturb.as_deref() == Some(self.name) {
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v += 1e-2 * v.abs().max(1.0);
                }
            }
        }
        let eval = |store: &ParamStore| -> Result<f64> {
            let mut w = weights.clone();
            let mut rng = seeded_rng(CASE_SEED);
            let (fw, loss) = self.loss(store, &mut rng, &mut w)?;
            Ok(fw.graph.value(loss).item())
        };

        let mut probe = self.store.clone();
        let (mut max_rel, mut worst, mut elements) = (0.0f64, String::from("-"), 0);
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let n = self.store.tensor(&name)?.numel();
            let zero = Tensor::zeros(self.store.tensor(&name)?.shape().to_vec());
            let grad = grads.get(&name).unwrap_or(&zero);
            let stride = n.div_ceil(opts.max_elements.max(1));
            for i in (0..n).step_by(stride) {
                let orig = self.store.tensor(&name)?.data()[i];
                probe.get_mut(&name).expect("cloned store").tensor_mut().data_mut()[i] = orig + opts.step;
                let plus = eval(&probe)?;
                probe.get_mut(&name).expect("cloned store").tensor_mut().data_mut()[i] = orig - opts.step;
                let minus = eval(&probe)?;
                probe.get_mut(&name).expect("cloned store").tensor_mut().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * opts.step);
                let rel = relative_error(grad.data()[i], numeric);
                elements += 1;
                if rel > max_rel || !rel.is_finite() {
                    max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                    worst = format!("{name}[{i}]");
                }
            }
        }
        Ok(CaseReport {
            name: self.name,
            module: self.module,
            max_rel_error: max_rel,
            worst,
            elements,
            ops,
            passed: max_rel < opts.tolerance,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    /// Differentiable ops no case exercised.
    pub uncovered: Vec<&'static str>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

/// Runs every case of `module` (all modules when `None`).
pub fn run_suite(module: Option<&str>, opts: &Options) -> Result<SuiteReport> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(crate::Error::Config(format!("unknown gradcheck module {m:?}; expected one of {MODULES:?}")));
        }
    }
    let mut cases = Vec::new();
    for case in suite() {
        if module.is_none_or(|m| m == case.module) {
            cases.push(case.run(opts)?);
        }
    }
    let covered: BTreeSet<&str> = cases.iter().flat_map(|c| c.ops.iter().copied()).collect();
    let uncovered = if module.is_none() {
        DIFFERENTIABLE_OPS.iter().copied().filter(|op| !covered.contains(op)).collect()
    } else {
        Vec::new()
    };
    Ok(SuiteReport { cases, uncovered })
}

fn random_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn store_of(tensors: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.insert(name, t, Component::Tuna, true).expect("unique case tensor names");
    }
    s
}

/// Materialises `specs` with random values (norm gains centred on 1) and
/// adds the given input tensors; everything is trainable.
fn random_store(specs: Vec<ParamSpec>, inputs: Vec<(&str, Tensor)>, rng: &mut SeededRng) -> ParamStore {
    let mut s = ParamStore::new();
    for spec in specs {
        let shift = if spec.name.contains("norm") && spec.name.ends_with("weight") { 1.0 } else { 0.0 };
        let t = Tensor::from_fn(spec.shape.clone(), |_| shift + rng.random_range(-0.5..0.5));
        s.insert(spec.name, t, Component::Tuna, true).expect("unique spec names");
    }
    for (name, t) in inputs {
        s.insert(name, t, Component::Tuna, true).expect("unique input names");
    }
    s
}

/// Backbone shared by the composed cases: 4×4 maps, window 2.
fn mini_backbone() -> BackboneConfig {
    BackboneConfig {
        patch_size: 4,
        embed_dims: [8, 16, 32, 64],
        depths: [1, 1, 1, 1],
        num_heads: [2, 2, 4, 8],
        window_size: 2,
        mlp_ratio: 2.0,
        dropout: 0.0,
    }
}

fn mini_tuna() -> TunaConfig {
    TunaConfig {
        kernel_sizes: [3, 3, 3, 3],
        bottleneck_dims: [4, 4, 4, 4],
        dropout: 0.1,
        ..TunaConfig::default()
    }
}

fn with_prefix(specs: Vec<ParamSpec>, prefix: &str) -> Vec<ParamSpec> {
    specs.into_iter().filter(|s| s.name.starts_with(prefix)).collect()
}

fn unary(
    name: &'static str,
    shape: &[usize],
    rng: &mut SeededRng,
    op: impl Fn(&mut Forward<'_>, Var) -> Result<Var> + 'static,
) -> Case {
    let store = store_of(vec![("a", random_tensor(rng, shape))]);
    Case::new(name, "tensor-core", store, false, move |fw| {
        let a = fw.param("a")?;
        op(fw, a)
    })
}

fn binary(
    name: &'static str,
    a: &[usize],
    b: &[usize],
    rng: &mut SeededRng,
    op: impl Fn(&mut Forward<'_>, Var, Var) -> Result<Var> + 'static,
) -> Case {
    let store = store_of(vec![("a", random_tensor(rng, a)), ("b", random_tensor(rng, b))]);
    Case::new(name, "tensor-core", store, false, move |fw| {
        let (a, b) = (fw.param("a")?, fw.param("b")?);
        op(fw, a, b)
    })
}

/// All cases, primitives first.
pub fn suite() -> Vec<Case> {
    let mut rng = seeded_rng(CASE_SEED);
    let rng = &mut rng;
    let mut cases = vec![
        binary("add", &[2, 3], &[2, 3], rng, |fw, a, b| fw.graph.add(a, b)),
        binary("sub", &[2, 3], &[2, 3], rng, |fw, a, b| fw.graph.sub(a, b)),
        binary("mul", &[2, 3], &[2, 3], rng, |fw, a, b| fw.graph.mul(a, b)),
        unary("scale", &[3, 2], rng, |fw, a| Ok(fw.graph.scale(a, -0.7))),
        binary("add_bcast", &[2, 3, 4], &[4], rng, |fw, a, b| fw.graph.add_bcast(a, b)),
        binary("mul_bcast", &[2, 3, 4], &[3, 4], rng, |fw, a, b| fw.graph.mul_bcast(a, b)),
        binary("mul_scalar", &[2, 3], &[1], rng, |fw, a, s| fw.graph.mul_scalar(a, s)),
        unary("sum", &[2, 3, 2], rng, |fw, a| Ok(fw.graph.sum(a))),
        unary("mean", &[4, 3], rng, |fw, a| Ok(fw.graph.mean(a))),
        binary("matmul", &[2, 3, 4], &[2, 4, 5], rng, |fw, a, b| fw.graph.matmul(a, b)),
        binary("matmul_shared", &[2, 3, 4], &[4, 5], rng, |fw, a, b| fw.graph.matmul(a, b)),
        unary("reshape", &[2, 6], rng, |fw, a| fw.graph.reshape(a, &[3, 4])),
        unary("permute", &[2, 3, 4], rng, |fw, a| fw.graph.permute(a, &[2, 0, 1])),
        unary("narrow", &[3, 5], rng, |fw, a| fw.graph.narrow(a, 1, 1, 3)),
        binary("concat", &[2, 2, 3], &[2, 1, 3], rng, |fw, a, b| fw.graph.concat(&[a, b], 1)),
        unary("softmax", &[2, 3, 4], rng, |fw, a| Ok(fw.graph.softmax(a))),
        unary("softmax_masked", &[2, 4], rng, |fw, a| {
            let mask = Tensor::new([2, 4], vec![0.0, f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY])?;
            let m = fw.graph.constant(mask);
            let x = fw.graph.add(a, m)?;
            Ok(fw.graph.softmax(x))
        }),
        unary("gelu", &[3, 4], rng, |fw, a| {
            let wide = fw.graph.scale(a, 3.0);
            Ok(fw.graph.gelu(wide))
        }),
        unary("pad_crop", &[1, 3, 3, 2], rng, |fw, a| {
            let p = pad_hw(&mut fw.graph, a, 4, 5)?;
            let r = roll_hw(&mut fw.graph, p, 1, -2)?;
            crop_hw(&mut fw.graph, r, 3, 4)
        }),
        unary("window_partition", &[1, 4, 4, 2], rng, |fw, a| {
            let w = window_partition(&mut fw.graph, a, 2)?;
            let s = fw.graph.scale(w, 2.0);
            let back = window_reverse(&mut fw.graph, s, 2, 1, 4, 4)?;
            fw.graph.narrow(back, 1, 1, 2)
        }),
        unary("resize_bilinear_up", &[1, 2, 3, 3], rng, |fw, a| fw.graph.resize_bilinear(a, (5, 7))),
        unary("resize_bilinear_down", &[1, 2, 5, 4], rng, |fw, a| fw.graph.resize_bilinear(a, (2, 3))),
    ];

    let ln = store_of(vec![
        ("x", random_tensor(rng, &[2, 3, 5])),
        ("gamma", random_tensor(rng, &[5])),
        ("beta", random_tensor(rng, &[5])),
    ]);
    cases.push(Case::new("layer_norm", "tensor-core", ln, false, |fw| {
        let (x, g, b) = (fw.param("x")?, fw.param("gamma")?, fw.param("beta")?);
        fw.graph.layer_norm(x, g, b, 1e-5)
    }));

    let lin = store_of(vec![
        ("x", random_tensor(rng, &[2, 3, 4])),
        ("w", random_tensor(rng, &[4, 5])),
        ("b", random_tensor(rng, &[5])),
    ]);
    cases.push(Case::new("linear", "tensor-core", lin, false, |fw| {
        let (x, w, b) = (fw.param("x")?, fw.param("w")?, fw.param("b")?);
        fw.graph.linear(x, w, Some(b))
    }));

    let drop = store_of(vec![("a", random_tensor(rng, &[4, 6]))]);
    cases.push(Case::new("dropout", "tensor-core", drop, true, |fw| {
        let a = fw.param("a")?;
        fw.dropout(a, 0.3)
    }));

    for (name, k) in [("conv2d_depthwise", 3), ("conv2d_depthwise_k5", 5)] {
        let s = store_of(vec![
            ("x", random_tensor(rng, &[2, 3, 4, 5])),
            ("w", random_tensor(rng, &[3, 1, k, k])),
            ("b", random_tensor(rng, &[3])),
        ]);
        cases.push(Case::new(name, "tensor-core", s, false, |fw| {
            let (x, w, b) = (fw.param("x")?, fw.param("w")?, fw.param("b")?);
            fw.graph.conv2d_depthwise(x, w, b)
        }));
    }

    let pw = store_of(vec![
        ("x", random_tensor(rng, &[2, 3, 2, 3])),
        ("w", random_tensor(rng, &[4, 3, 1, 1])),
        ("b", random_tensor(rng, &[4])),
    ]);
    cases.push(Case::new("conv2d_pointwise", "tensor-core", pw, false, |fw| {
        let (x, w, b) = (fw.param("x")?, fw.param("w")?, fw.param("b")?);
        fw.graph.conv2d_pointwise(x, w, b)
    }));

    let ce = store_of(vec![("logits", random_tensor(rng, &[1, 3, 2, 2]))]);
    cases.push(Case::new("cross_entropy", "tensor-core", ce, false, |fw| {
        let l = fw.param("logits")?;
        fw.graph.cross_entropy(l, &[0, 2, 255, 1], 255)
    }));

    // Composed paths.
    let bb = mini_backbone();
    let tuna = mini_tuna();
    let block = "stages.0.blocks.0";

    let specs = with_prefix(bb.param_specs(), "patch_embed");
    let s = random_store(specs, vec![("image", random_tensor(rng, &[1, 3, 6, 7]))], rng);
    cases.push(Case::new("patch_embed", "swin-backbone", s, false, |fw| {
        let img = fw.param("image")?;
        Ok(patch_embed(fw, img, 4)?.0)
    }));

    let specs = with_prefix(bb.param_specs(), "stages.0.downsample");
    let s = random_store(specs, vec![("x", random_tensor(rng, &[1, 9, 8]))], rng);
    cases.push(Case::new("patch_merging", "swin-backbone", s, false, |fw| {
        let x = fw.param("x")?;
        Ok(patch_merging(fw, "stages.0.downsample", x, (3, 3))?.0)
    }));

    let specs = with_prefix(bb.param_specs(), &format!("{block}.attn"));
    let s = random_store(specs, vec![("x", random_tensor(rng, &[4, 4, 8]))], rng);
    cases.push(Case::new("window_attention", "swin-backbone", s, false, |fw| {
        let x = fw.param("x")?;
        let mask = shifted_window_mask(4, 4, 2, 1);
        Ok(window_attention(fw, "stages.0.blocks.0.attn", x, 2, 2, Some(&mask), 0.0)?.out)
    }));

    let specs = with_prefix(bb.param_specs(), block);
    let s = random_store(specs, vec![("z", random_tensor(rng, &[1, 16, 8]))], rng);
    cases.push(Case::new("swin_block", "swin-backbone", s, false, |fw| {
        let z = fw.param("z")?;
        let geom = BlockGeometry::for_block(1, 2, 2, 0.0, (4, 4));
        Ok(swin_block_vanilla(fw, "stages.0.blocks.0", z, (4, 4), &geom)?.z_out)
    }));

    let specs = tuna.block_specs("t", 0, 8);
    let s = random_store(specs, vec![("x", random_tensor(rng, &[1, 16, 8]))], rng);
    cases.push(Case::new("tuna_forward", "tuna-adapter", s, true, |fw| {
        let x = fw.param("x")?;
        tuna_forward(fw, "t.tuna", x, (4, 4), 0.1)
    }));

    for (name, structure) in [
        ("tuna_block_parallel", adapter::Structure::Parallel),
        ("tuna_block_sequential", adapter::Structure::Sequential),
    ] {
        let cfg = TunaConfig { structure, ..tuna.clone() };
        let mut specs = with_prefix(bb.param_specs(), block);
        specs.extend(cfg.block_specs(block, 0, 8));
        let s = random_store(specs, vec![("z", random_tensor(rng, &[1, 16, 8]))], rng);
        cases.push(Case::new(name, "tuna-adapter", s, true, move |fw| {
            let z = fw.param("z")?;
            let geom = BlockGeometry::for_block(1, 2, 2, 0.1, (4, 4));
            adapter::block_forward(fw, "stages.0.blocks.0", z, (4, 4), &geom, &cfg)
        }));
    }

    let head = HeadConfig { channels: 4, num_classes: 3 };
    let grids = [(4, 4), (2, 2), (1, 1), (1, 1)];
    let mut inputs = Vec::new();
    for (s, &(h, w)) in grids.iter().enumerate() {
        inputs.push((["f0", "f1", "f2", "f3"][s], random_tensor(rng, &[1, h * w, bb.embed_dims[s]])));
    }
    let s = random_store(head.param_specs(&bb.embed_dims), inputs, rng);
    let target: Vec<u32> = (0..64).map(|i| if i % 11 == 0 { 255 } else { (i * 7 % 3) as u32 }).collect();
    cases.push(Case::new("head_loss", "seg-head-loss", s, false, move |fw| {
        let mut stages = Vec::new();
        for (s, &spatial) in grids.iter().enumerate() {
            stages.push(StageFeature { tokens: fw.param(["f0", "f1", "f2", "f3"][s])?, spatial });
        }
        let logits = head_forward(fw, &StageFeatures { stages }, (8, 8))?;
        segmentation_loss(fw, logits, &target, 255)
    }));

    cases
}
