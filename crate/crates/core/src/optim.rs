use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with decoupled weight decay. Parameters that are frozen or received
/// no gradient in a step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, state: Vec::new() }
    }

    /// Returns the number of parameter tensors updated.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> usize {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let c = self.cfg;
        let mut updated = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = grads.raw(id) else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let values = p.value.data_mut();
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; values.len()],
                v: vec![0.0; values.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t);
            let bc2 = 1.0 - c.beta2.powi(st.t);
            let step = c.lr / bc1;
            let decay = 1.0 - c.lr * c.weight_decay;
            let sq = bc2.sqrt();
            let (b1, b2) = (c.beta1, c.beta2);
            for (((p, &gk), m), v) in values.iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (1.0 - b1) * gk;
                *v = b2 * *v + (1.0 - b2) * gk * gk;
                *p = *p * decay - step * *m / (v.sqrt() / sq + c.eps);
            }
            updated += 1;
        }
        updated
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn reference_adamw(p0: f64, grads: &[f64], c: AdamWConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            p -= c.lr * c.weight_decay * p;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn matches_textbook_update() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.5)).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut seen = Vec::new();
        for _ in 0..5 {
            // loss = w^2, grad = 2w
            let grads = {
                let mut g = Graph::new(&store);
                let v = g.param(w).unwrap();
                let l = g.square(v).unwrap();
                let l = g.sum(l).unwrap();
                g.backward(l).unwrap()
            };
            seen.push(grads.raw(w).unwrap()[0]);
            opt.step(&mut store, &grads);
        }
        let want = reference_adamw(1.5, &seen, cfg);
        assert!((store.value(w).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn skips_frozen_and_unreached() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0)).unwrap();
        let b = store.add("b", Tensor::scalar(2.0)).unwrap();
        let c = store.add("c", Tensor::scalar(3.0)).unwrap();
        store.set_trainable(b, false);
        let grads = {
            let mut g = Graph::new(&store);
            let va = g.param(a).unwrap();
            let vb = g.param(b).unwrap();
            let s = g.add(va, vb).unwrap();
            g.backward(s).unwrap()
        };
        let mut opt = AdamW::new(AdamWConfig::default());
        assert_eq!(opt.step(&mut store, &grads), 1);
        assert_ne!(store.value(a).data()[0], 1.0);
        assert_eq!(store.value(b).data()[0], 2.0);
        assert_eq!(store.value(c).data()[0], 3.0);
    }
}
