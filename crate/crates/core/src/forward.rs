//! Per-step forward context: one graph, the bound parameters, mode and rng.

use crate::error::Result;
use crate::params::{Binding, ParamStore};
use crate::tensor::{Graph, Var};
use crate::SeededRng;

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;

pub struct Forward<'r> {
    pub graph: Graph,
    pub(crate) binding: Binding,
    pub training: bool,
    pub rng: &'r mut SeededRng,
}

impl<'r> Forward<'r> {
    pub fn new(store: &ParamStore, training: bool, rng: &'r mut SeededRng) -> Self {
        let mut graph = Graph::new();
        let binding = store.bind(&mut graph);
        Forward {
            graph,
            binding,
            training,
            rng,
        }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.binding.var(name)
    }

    pub fn binding(&self) -> &Binding {
        &self.binding
    }

    /// `x · {prefix}.weight + {prefix}.bias`; the bias is optional.
    pub fn linear(&mut self, prefix: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.graph.dropout(x, p, self.training, self.rng)
    }
}
