//! Patch encoder, genomic encoder, fusion network and per-task heads.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::{GenomicProfile, PatchBag, N_GENOMIC_GROUPS};
use crate::error::{Error, Result};
use crate::nn::{GatedAttention, Linear, TwoLayer};

/// Patch, genomic and fused representations of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTriple {
    pub f_p: Vec<f64>,
    pub f_g: Vec<f64>,
    pub f_f: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub patch_dim: usize,
    pub genomic_width: usize,
    /// Width `d` of every representation.
    pub latent: usize,
    pub hidden: usize,
    pub attn: usize,
    pub n_bins: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    pub dims: BackboneDims,
    pub patch_embed: TwoLayer,
    pub group_embed: Vec<TwoLayer>,
    pub patch_mix: Linear,
    pub patch_attn: GatedAttention,
    pub genomic_mix: Linear,
    pub genomic_attn: GatedAttention,
    /// Absent when a mixture of experts takes the fusion network's place.
    pub fusion: Option<TwoLayer>,
    pub heads: BTreeMap<usize, Linear>,
}

/// Intermediate embeddings shared by both encoders.
struct Embedded {
    patches: Var,
    groups: Var,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, dims: BackboneDims, with_fusion: bool, rng: &mut impl Rng) -> Result<Self> {
        let BackboneDims {
            patch_dim,
            genomic_width,
            latent: d,
            hidden,
            attn,
            n_bins,
        } = dims;
        if patch_dim == 0 || genomic_width == 0 || d == 0 || hidden == 0 || attn == 0 || n_bins == 0 {
            return Err(Error::Config(format!("backbone dimensions must be positive: {dims:?}")));
        }
        let patch_embed = TwoLayer::new(store, "patch_embed", (patch_dim, hidden, d), rng)?;
        let group_embed = (0..N_GENOMIC_GROUPS)
            .map(|i| TwoLayer::new(store, &format!("group_embed{i}"), (genomic_width, hidden, d), rng))
            .collect::<Result<Vec<_>>>()?;
        let patch_mix = Linear::new(store, "patch_mix", 2 * d, d, rng)?;
        let patch_attn = GatedAttention::new(store, "patch_attn", d, attn, rng)?;
        let genomic_mix = Linear::new(store, "genomic_mix", 2 * d, d, rng)?;
        let genomic_attn = GatedAttention::new(store, "genomic_attn", d, attn, rng)?;
        let fusion = if with_fusion {
            Some(TwoLayer::new(store, "fusion", (2 * d, hidden, d), rng)?)
        } else {
            None
        };
        Ok(Backbone {
            dims,
            patch_embed,
            group_embed,
            patch_mix,
            patch_attn,
            genomic_mix,
            genomic_attn,
            fusion,
            heads: BTreeMap::new(),
        })
    }

    fn check_inputs(&self, p: &PatchBag, gp: &GenomicProfile) -> Result<()> {
        if p.n_patches() == 0 {
            return Err(Error::Contract("patch bag is empty".into()));
        }
        if p.dim() != self.dims.patch_dim {
            return Err(Error::Shape(format!("patch dim {} vs model {}", p.dim(), self.dims.patch_dim)));
        }
        if gp.dims().len() != N_GENOMIC_GROUPS {
            return Err(Error::Contract(format!("expected {N_GENOMIC_GROUPS} genomic groups")));
        }
        if gp.width() != self.dims.genomic_width {
            return Err(Error::Shape(format!(
                "genomic width {} vs model {}",
                gp.width(),
                self.dims.genomic_width
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, p: &PatchBag, gp: &GenomicProfile) -> Result<Embedded> {
        self.check_inputs(p, gp)?;
        let pv = g.constant(p.features())?;
        let patches = self.patch_embed.forward(g, pv)?;
        let mut rows = Vec::with_capacity(N_GENOMIC_GROUPS);
        for (i, net) in self.group_embed.iter().enumerate() {
            let x = g.constant_vec(1, gp.width(), gp.group(i).to_vec())?;
            rows.push(net.forward(g, x)?);
        }
        let groups = g.concat_rows(&rows)?;
        Ok(Embedded { patches, groups })
    }

    fn pool_patches(&self, g: &mut Graph, e: &Embedded) -> Result<Var> {
        let summary = g.mean_rows(e.groups)?;
        let x = g.concat_cols(&[e.patches, summary])?;
        let u = self.patch_mix.forward(g, x)?;
        let u = g.relu(u)?;
        Ok(self.patch_attn.pool(g, u)?.0)
    }

    fn pool_genomics(&self, g: &mut Graph, e: &Embedded) -> Result<Var> {
        let summary = g.mean_rows(e.patches)?;
        let x = g.concat_cols(&[e.groups, summary])?;
        let v = self.genomic_mix.forward(g, x)?;
        let v = g.relu(v)?;
        Ok(self.genomic_attn.pool(g, v)?.0)
    }

    /// `(f_P, f_G)` computed from one shared set of embeddings.
    pub fn encode(&self, g: &mut Graph, p: &PatchBag, gp: &GenomicProfile) -> Result<(Var, Var)> {
        let e = self.embed(g, p, gp)?;
        let fp = self.pool_patches(g, &e)?;
        let fg = self.pool_genomics(g, &e)?;
        Ok((fp, fg))
    }

    pub fn encode_patches(&self, g: &mut Graph, p: &PatchBag, gp: &GenomicProfile) -> Result<Var> {
        let e = self.embed(g, p, gp)?;
        self.pool_patches(g, &e)
    }

    pub fn encode_genomics(&self, g: &mut Graph, gp: &GenomicProfile, p: &PatchBag) -> Result<Var> {
        let e = self.embed(g, p, gp)?;
        self.pool_genomics(g, &e)
    }

    /// Fusion network over `[f_P; f_G]`. Fails when the fusion layer has
    /// been replaced by a mixture of experts.
    pub fn fuse(&self, g: &mut Graph, fp: Var, fg: Var) -> Result<Var> {
        let d = self.dims.latent;
        if g.dims(fp) != (1, d) || g.dims(fg) != (1, d) {
            return Err(Error::Shape(format!(
                "fusion inputs {:?} and {:?}, want 1×{d}",
                g.dims(fp),
                g.dims(fg)
            )));
        }
        let net = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Contract("fusion network is replaced by experts".into()))?;
        let x = g.concat_cols(&[fp, fg])?;
        net.forward(g, x)
    }

    pub fn has_head(&self, task: usize) -> bool {
        self.heads.contains_key(&task)
    }

    pub fn add_head(&mut self, store: &mut ParamStore, task: usize, rng: &mut impl Rng) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::DuplicateTask(task));
        }
        let h = Linear::new(store, &format!("head{task}"), self.dims.latent, self.dims.n_bins, rng)?;
        self.heads.insert(task, h);
        Ok(())
    }

    /// Head logits `1 × n_B` for `task`.
    pub fn head_logits(&self, g: &mut Graph, ff: Var, task: usize) -> Result<Var> {
        let head = self.heads.get(&task).ok_or(Error::MissingHead(task))?;
        head.forward(g, ff)
    }

    /// Per-bin hazards `sigmoid(logits)`.
    pub fn predict_hazards(&self, g: &mut Graph, ff: Var, task: usize) -> Result<Var> {
        let logits = self.head_logits(g, ff, task)?;
        g.sigmoid(logits)
    }
}
