//! Mixture-of-experts layer with per-task routers and shared-expert
//! top-k gating.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, TwoLayer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoeMode {
    /// The module stands in for an existing layer.
    Replace,
    /// Residual: `x + moe(x)`.
    Append,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingResult {
    /// Active experts in ascending index order; always contains the shared one.
    pub selected: Vec<usize>,
    /// One weight per expert, exactly 0 off the selected set.
    pub weights: Vec<f64>,
}

/// Shared expert plus the `k_top` largest remaining logits; ties go to the
/// lower index. Everything else is masked before the softmax.
pub fn topk_s_select(logits: &[f64], k_top: usize, shared_idx: usize) -> Result<GatingResult> {
    let n = logits.len();
    if k_top + 1 > n {
        return Err(Error::Config(format!(
            "top-{k_top} plus a shared expert needs at least {} experts, have {n}",
            k_top + 1
        )));
    }
    if shared_idx >= n {
        return Err(Error::Config(format!("shared expert {shared_idx} out of {n}")));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("router produced NaN logits".into()));
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| i != shared_idx).collect();
    // stable sort keeps the lower index first on ties
    rest.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let mut selected: Vec<usize> = rest[..k_top].to_vec();
    selected.push(shared_idx);
    selected.sort_unstable();

    let masked: Vec<f64> = (0..n)
        .map(|i| if selected.contains(&i) { logits[i] } else { f64::NEG_INFINITY })
        .collect();
    let weights = autodiff::softmax(&masked)?;
    Ok(GatingResult { selected, weights })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoeModule {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub experts: Vec<TwoLayer>,
    pub routers: BTreeMap<usize, Linear>,
    pub k_top: usize,
    pub shared_idx: usize,
    pub mode: MoeMode,
}

impl MoeModule {
    /// Experts are `in → hidden → out` networks. In append mode their output
    /// layers start at zero so the module is initially the identity. The
    /// shared expert is the last one.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        n_experts: usize,
        k_top: usize,
        mode: MoeMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (in_dim, _, out_dim) = dims;
        if n_experts == 0 || k_top + 1 > n_experts {
            return Err(Error::Config(format!(
                "{n_experts} experts cannot host top-{k_top} plus a shared expert"
            )));
        }
        if mode == MoeMode::Append && in_dim != out_dim {
            return Err(Error::Config(format!(
                "append-mode experts must preserve width, got {in_dim} → {out_dim}"
            )));
        }
        let mut experts = Vec::with_capacity(n_experts);
        for i in 0..n_experts {
            let ename = format!("{name}.expert{i}");
            experts.push(match mode {
                MoeMode::Append => TwoLayer::zero_output(store, &ename, dims, rng)?,
                MoeMode::Replace => TwoLayer::new(store, &ename, dims, rng)?,
            });
        }
        Ok(MoeModule {
            name: name.to_string(),
            in_dim,
            out_dim,
            experts,
            routers: BTreeMap::new(),
            k_top,
            shared_idx: n_experts - 1,
            mode,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Adds a router for `task` and freezes every earlier router.
    pub fn add_task_router(&mut self, store: &mut ParamStore, task: usize, rng: &mut impl Rng) -> Result<()> {
        if self.routers.contains_key(&task) {
            return Err(Error::DuplicateTask(task));
        }
        for r in self.routers.values() {
            for p in r.params() {
                store.set_trainable(p, false);
            }
        }
        let r = Linear::new(store, &format!("{}.router{task}", self.name), self.in_dim, self.n_experts(), rng)?;
        self.routers.insert(task, r);
        Ok(())
    }

    pub fn set_router_trainable(&self, store: &mut ParamStore, task: usize, trainable: bool) -> Result<()> {
        let r = self.routers.get(&task).ok_or(Error::UnknownTask(task))?;
        for p in r.params() {
            store.set_trainable(p, trainable);
        }
        Ok(())
    }

    fn router(&self, task: usize) -> Result<&Linear> {
        self.routers.get(&task).ok_or(Error::UnknownTask(task))
    }

    /// Gating weights as a `1 × n_E` graph node.
    pub fn gate(&self, g: &mut Graph, x: Var, task: usize) -> Result<(Var, GatingResult)> {
        let logits = self.router(task)?.forward(g, x)?;
        let gr = topk_s_select(g.values(logits), self.k_top, self.shared_idx)?;
        let keep = (0..self.n_experts()).map(|i| gr.selected.contains(&i)).collect();
        let masked = g.mask_fill(logits, keep)?;
        let w = g.softmax(masked)?;
        Ok((w, gr))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, task: usize) -> Result<(Var, GatingResult)> {
        let (w, gr) = self.gate(g, x, task)?;
        let mut acc: Option<Var> = None;
        for &i in &gr.selected {
            let wi = g.slice_cols(w, i, i + 1)?;
            let e = self.experts[i].forward(g, x)?;
            let term = g.mul(e, wi)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        let mixed = acc.expect("shared expert is always selected");
        let y = match self.mode {
            MoeMode::Append => g.add(x, mixed)?,
            MoeMode::Replace => mixed,
        };
        Ok((y, gr))
    }

    /// Mixture under externally fixed gating weights; experts with weight 0
    /// are skipped.
    pub fn forward_with_weights(&self, g: &mut Graph, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.n_experts() {
            return Err(Error::Shape(format!(
                "{} gating weights for {} experts",
                weights.len(),
                self.n_experts()
            )));
        }
        let mut acc: Option<Var> = None;
        for (i, &wv) in weights.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let wi = g.constant_vec(1, 1, vec![wv])?;
            let e = self.experts[i].forward(g, x)?;
            let term = g.mul(e, wi)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        let mixed = acc.ok_or_else(|| Error::Contract("all gating weights are zero".into()))?;
        match self.mode {
            MoeMode::Append => g.add(x, mixed),
            MoeMode::Replace => Ok(mixed),
        }
    }

    /// Gating decision for a plain input vector, without building a graph.
    pub fn route(&self, store: &ParamStore, x: &[f64], task: usize) -> Result<GatingResult> {
        let r = self.router(task)?;
        let logits = autodiff::linear(&Tensor::vector(x.to_vec()), store.value(r.w), store.value(r.b))?;
        topk_s_select(logits.data(), self.k_top, self.shared_idx)
    }

    /// Fraction of `inputs` on which each expert was selected.
    pub fn routing_stats(&self, store: &ParamStore, inputs: &[Vec<f64>], task: usize) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Err(Error::Contract("routing statistics need at least one input".into()));
        }
        let gatings = inputs
            .iter()
            .map(|x| self.route(store, x, task))
            .collect::<Result<Vec<_>>>()?;
        Ok(selection_proportions(&gatings, self.n_experts()))
    }
}

pub fn selection_proportions(gatings: &[GatingResult], n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_experts];
    for gr in gatings {
        for &i in &gr.selected {
            counts[i] += 1;
        }
    }
    let n = gatings.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::nn::seeded_rng;

    #[test]
    fn topk_s_example() {
        let gr = topk_s_select(&[3.0, 1.0, 2.0, 0.0], 1, 3).unwrap();
        assert_eq!(gr.selected, vec![0, 3]);
        let want = [0.952574126822433, 0.0, 0.0, 0.04742587317756678];
        for (a, b) in gr.weights.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(gr.weights[1], 0.0);
        assert_eq!(gr.weights[2], 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let gr = topk_s_select(&[0.5; 8], 2, 7).unwrap();
        assert_eq!(gr.selected, vec![0, 1, 7]);
        for &i in &gr.selected {
            assert!((gr.weights[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn too_few_experts_is_config_error() {
        assert!(matches!(topk_s_select(&[0.0, 1.0], 2, 1), Err(Error::Config(_))));
    }

    fn module(mode: MoeMode, seed: u64) -> (ParamStore, MoeModule) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut m = MoeModule::new(&mut store, "m", (4, 5, 4), 8, 2, mode, &mut rng).unwrap();
        m.add_task_router(&mut store, 0, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn router_param_growth() {
        let (mut store, mut m) = module(MoeMode::Append, 1);
        let before = store.scalar_count();
        let mut rng = seeded_rng(2);
        for t in 1..5 {
            m.add_task_router(&mut store, t, &mut rng).unwrap();
        }
        assert_eq!(store.scalar_count() - before, 4 * (4 * 8 + 8));
        assert_eq!(m.routers.len(), 5);
        assert!(matches!(m.add_task_router(&mut store, 1, &mut rng), Err(Error::DuplicateTask(1))));
        // earlier routers are frozen
        assert!(!store.get(m.routers[&0].w).trainable);
        assert!(store.get(m.routers[&4].w).trainable);
    }

    #[test]
    fn append_identity_at_init() {
        let (store, m) = module(MoeMode::Append, 4);
        let x = vec![0.3, -1.2, 2.5, 0.0];
        let mut g = Graph::new(&store);
        let xv = g.constant_vec(1, 4, x.clone()).unwrap();
        let (y, gr) = m.forward(&mut g, xv, 0).unwrap();
        assert_eq!(g.values(y), x.as_slice());
        assert_eq!(gr.selected.len(), 3);
        assert!(matches!(m.forward(&mut g, xv, 9), Err(Error::UnknownTask(9))));
    }

    #[test]
    fn forced_shared_weight_reproduces_shared_expert() {
        let (store, m) = module(MoeMode::Replace, 5);
        let mut g = Graph::new(&store);
        let xv = g.constant_vec(1, 4, vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let mut w = vec![0.0; 8];
        w[7] = 1.0;
        let y = m.forward_with_weights(&mut g, xv, &w).unwrap();
        let e = m.experts[7].forward(&mut g, xv).unwrap();
        assert_eq!(g.values(y), g.values(e));
    }

    #[test]
    fn half_half_is_average() {
        let (store, m) = module(MoeMode::Append, 6);
        let mut store = store;
        // give experts nonzero outputs
        let mut rng = seeded_rng(7);
        for e in &m.experts {
            for v in store.value_mut(e.l2.w).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let x = vec![0.4, 0.1, -0.7, 1.1];
        let mut g = Graph::new(&store);
        let xv = g.constant_vec(1, 4, x.clone()).unwrap();
        let mut w = vec![0.0; 8];
        w[2] = 0.5;
        w[5] = 0.5;
        let y = m.forward_with_weights(&mut g, xv, &w).unwrap();
        let a = m.experts[2].forward(&mut g, xv).unwrap();
        let b = m.experts[5].forward(&mut g, xv).unwrap();
        let (ya, yb) = (g.values(a).to_vec(), g.values(b).to_vec());
        for i in 0..4 {
            let want = x[i] + 0.5 * ya[i] + 0.5 * yb[i];
            assert!((g.values(y)[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn router_isolation() {
        let (mut store, mut m) = module(MoeMode::Replace, 8);
        let x = vec![0.2, 0.9, -0.3, 0.5];
        let eval = |store: &ParamStore, m: &MoeModule| {
            let mut g = Graph::new(store);
            let xv = g.constant_vec(1, 4, x.clone()).unwrap();
            let (y, _) = m.forward(&mut g, xv, 0).unwrap();
            g.values(y).to_vec()
        };
        let before = eval(&store, &m);
        m.add_task_router(&mut store, 1, &mut seeded_rng(99)).unwrap();
        assert_eq!(before, eval(&store, &m));
    }

    #[test]
    fn routing_stats_shared_always_one() {
        let (store, m) = module(MoeMode::Replace, 10);
        let mut rng = seeded_rng(11);
        let inputs: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let p = m.routing_stats(&store, &inputs, 0).unwrap();
        assert_eq!(p[7], 1.0);
        assert!((p.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        let single = m.routing_stats(&store, &inputs[..1], 0).unwrap();
        assert!(single.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(m.routing_stats(&store, &[], 0).is_err());
    }

    #[test]
    fn moe_gradient_check() {
        let (mut store, m) = module(MoeMode::Append, 12);
        let mut rng = seeded_rng(13);
        for e in &m.experts {
            for v in store.value_mut(e.l2.w).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let x = vec![0.7, -0.2, 0.4, 1.3];
        let err = finite_diff_check(&store, 1e-6, |g| {
            let xv = g.constant_vec(1, 4, x.clone())?;
            let (y, _) = m.forward(g, xv, 0)?;
            let s = g.square(y)?;
            g.sum(s)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
