use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. State exists only for parameters
/// that were trainable when the optimiser was created.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let state = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let n = p.tensor().numel();
                (name.to_string(), Moments { m: vec![0.0; n], v: vec![0.0; n] })
            })
            .collect();
        Ok(AdamW { cfg, step: 0, state })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn num_tracked(&self) -> usize {
        self.state.len()
    }

    /// One update. Every gradient must belong to a tracked parameter; a
    /// gradient for a frozen tensor means the freeze mask leaked and is
    /// rejected before anything is modified. Tracked parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let param = store
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if !param.trainable || !self.state.contains_key(name) {
                return Err(Error::Contract(format!("gradient arrived at frozen parameter {name}")));
            }
            if g.shape() != param.tensor().shape() {
                return Err(Error::dim(
                    "adamw_step",
                    format!("gradient {:?} for {name} of shape {:?}", g.shape(), param.tensor().shape()),
                ));
            }
        }
        self.step += 1;
        let AdamWConfig { weight_decay, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, mom) in &mut self.state {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter {name} vanished from the store")))?;
            let grad = grads.get(name).map(Tensor::data);
            let p = param.tensor_mut().data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                p[i] -= lr * weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;

    fn store_with(value: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(value), Component::Tuna, trainable).unwrap();
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut store = store_with(0.7, true);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        for _ in 0..5 {
            opt.step(&mut store, &grads(0.0), 1e-3).unwrap();
        }
        assert_eq!(store.tensor("p").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        for g in [3.0, -0.25] {
            let mut store = store_with(1.0, true);
            let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let mut opt = AdamW::new(cfg, &store).unwrap();
            let lr = 1e-2;
            opt.step(&mut store, &grads(g), lr).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
            let expected = 1.0 - lr * g / (g.abs() + 1e-8);
            let got = store.tensor("p").unwrap().item();
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            assert!(((1.0 - got).abs() - lr).abs() < 1e-8);
        }
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut store = store_with(2.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        let lr = 0.1;
        opt.step(&mut store, &grads(0.0), lr).unwrap();
        assert_eq!(store.tensor("p").unwrap().item(), 2.0 * (1.0 - lr * 0.01));
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = store_with(-1.5, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        opt.step(&mut store, &grads(4.0), 0.0).unwrap();
        assert_eq!(store.tensor("p").unwrap().item(), -1.5);
    }

    #[test]
    fn gradient_on_frozen_parameter_is_rejected_untouched() {
        let mut store = store_with(1.0, false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        assert_eq!(opt.num_tracked(), 0);
        let err = opt.step(&mut store, &grads(1.0), 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("frozen parameter p")), "{err}");
        assert_eq!(store.tensor("p").unwrap().item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
