//! Named parameter registry with a per-tensor trainable flag (the freeze mask).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// Host network weights (the "pre-trained" part).
    Backbone,
    /// Adapter modules injected into transformer blocks.
    Tuna,
    /// Per-block balance scales `s1` and `s2`.
    Scales,
    /// Segmentation head.
    Head,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Backbone => "backbone",
            Component::Tuna => "tuna",
            Component::Scales => "scales",
            Component::Head => "head",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Const(f64),
    /// Normal(0, std) resampled until it falls within two standard deviations.
    TruncNormal { std: f64 },
}

/// Shape-only description of a parameter, enough to count it without
/// allocating.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub component: Component,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init, component: Component) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
            component,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.init {
            Init::Const(v) => Tensor::full(self.shape.clone(), v),
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
                Tensor::from_fn(self.shape.clone(), |_| loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break x;
                    }
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    tensor: Rc<Tensor>,
    pub trainable: bool,
    pub component: Component,
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Mutable access; copies only if a live graph still shares the value.
    pub fn tensor_mut(&mut self) -> &mut Tensor {
        Rc::make_mut(&mut self.tensor)
    }
}

/// Parameter filter for counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountFilter {
    All,
    Trainable,
    /// Adapter modules plus their balance scales.
    AdaptersOnly,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, component: Component, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name,
            Param {
                tensor: Rc::new(tensor),
                trainable,
                component,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(Param::tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Replaces a tensor's value, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if p.tensor.shape() != value.shape() {
            return Err(Error::dim(
                "ParamStore::set",
                format!("{name}: stored {:?}, new {:?}", p.tensor.shape(), value.shape()),
            ));
        }
        p.tensor = Rc::new(value);
        Ok(())
    }

    /// Iterates in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n).collect()
    }

    /// Sets the trainable flag of every parameter from its component.
    pub fn apply_freeze(&mut self, trainable: impl Fn(Component) -> bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable(p.component);
        }
    }

    pub fn count(&self, filter: CountFilter) -> usize {
        self.iter()
            .filter(|(_, p)| match filter {
                CountFilter::All => true,
                CountFilter::Trainable => p.trainable,
                CountFilter::AdaptersOnly => matches!(p.component, Component::Tuna | Component::Scales),
            })
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// 64-bit FNV-1a over the little-endian bytes of every frozen tensor,
    /// visited in name order.
    pub fn frozen_fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (_, p) in self.iter().filter(|(_, p)| !p.trainable) {
            for x in p.tensor.data() {
                h.write(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Registers every parameter as a graph leaf; only trainable ones
    /// request gradients.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf_shared(Rc::clone(&p.tensor), p.trainable)))
            .collect();
        Binding { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    /// Gradients that reached bound parameters after `graph.backward`.
    pub fn grads(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| graph.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}
