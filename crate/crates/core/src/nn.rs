//! Layers built on the autodiff graph.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// splitmix64 finalizer; used to derive independent sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a (stream, index) pair under a master seed.
pub fn sub_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(master) ^ stream) ^ index)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_tensor(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

/// Affine map `x W + b` with `W: in × out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_tensor(in_dim, out_dim, bound, rng))?;
        let b = store.add(format!("{name}.b"), uniform_tensor(1, out_dim, bound, rng))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        g.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn scalar_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Two-layer feed-forward network with a ReLU between the layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoLayer {
    pub l1: Linear,
    pub l2: Linear,
}

impl TwoLayer {
    pub fn new(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut impl Rng) -> Result<Self> {
        let (i, h, o) = dims;
        Ok(TwoLayer {
            l1: Linear::new(store, &format!("{name}.l1"), i, h, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), h, o, rng)?,
        })
    }

    /// Second layer starts at zero, so the network initially outputs 0.
    pub fn zero_output(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut impl Rng) -> Result<Self> {
        let (i, h, o) = dims;
        Ok(TwoLayer {
            l1: Linear::new(store, &format!("{name}.l1"), i, h, rng)?,
            l2: Linear::zeros(store, &format!("{name}.l2"), h, o)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

/// Gated attention pooling: score_i = w · (tanh(V u_i) ⊙ σ(U u_i)),
/// output = Σ softmax(score)_i u_i.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatedAttention {
    pub v: Linear,
    pub u: Linear,
    pub w: Linear,
}

impl GatedAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, attn_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(GatedAttention {
            v: Linear::new(store, &format!("{name}.v"), dim, attn_dim, rng)?,
            u: Linear::new(store, &format!("{name}.u"), dim, attn_dim, rng)?,
            w: Linear::new(store, &format!("{name}.w"), attn_dim, 1, rng)?,
        })
    }

    /// Returns the pooled `1 × dim` row and the `n × 1` attention weights.
    pub fn pool(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Var)> {
        let a = self.v.forward(g, tokens)?;
        let a = g.tanh(a)?;
        let b = self.u.forward(g, tokens)?;
        let b = g.sigmoid(b)?;
        let gated = g.mul(a, b)?;
        let scores = self.w.forward(g, gated)?;
        let scores = g.transpose(scores)?;
        let attn = g.softmax(scores)?;
        let pooled = g.matmul(attn, tokens)?;
        let attn = g.transpose(attn)?;
        Ok((pooled, attn))
    }
}
