//! Full survival network: backbone plus optional expert layers at the
//! patch, genomic and fusion stages.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::{Backbone, BackboneDims, FeatureTriple};
use crate::data::{CaseRecord, GenomicProfile, PatchBag};
use crate::error::{Error, Result};
use crate::moe::{GatingResult, MoeMode, MoeModule};
use crate::nn::{seeded_rng, sub_seed};

const STREAM_BACKBONE: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_ROUTER: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub n_bins: usize,
    pub use_moe: bool,
    pub n_experts: usize,
    pub k_top: usize,
    /// Hidden width of append-mode experts; defaults to `latent_dim`.
    pub expert_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 64,
            hidden_dim: 128,
            attn_dim: 32,
            n_bins: 4,
            use_moe: true,
            n_experts: 8,
            k_top: 2,
            expert_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 || self.n_bins == 0 {
            return Err(Error::Config("model widths and bin count must be positive".into()));
        }
        if self.use_moe && self.k_top + 1 > self.n_experts {
            return Err(Error::Config(format!(
                "k_top {} needs more than {} experts",
                self.k_top, self.n_experts
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoeSite {
    Patch,
    Genomic,
    Fusion,
}

impl MoeSite {
    pub const ALL: [MoeSite; 3] = [MoeSite::Patch, MoeSite::Genomic, MoeSite::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            MoeSite::Patch => "patch",
            MoeSite::Genomic => "genomic",
            MoeSite::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoeSites {
    pub patch: MoeModule,
    pub genomic: MoeModule,
    pub fusion: MoeModule,
}

impl MoeSites {
    pub fn get(&self, site: MoeSite) -> &MoeModule {
        match site {
            MoeSite::Patch => &self.patch,
            MoeSite::Genomic => &self.genomic,
            MoeSite::Fusion => &self.fusion,
        }
    }

    fn all_mut(&mut self) -> [&mut MoeModule; 3] {
        [&mut self.patch, &mut self.genomic, &mut self.fusion]
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub f_p: Var,
    pub f_g: Var,
    pub f_f: Var,
    pub logits: Var,
    pub hazards: Var,
    pub gating: Vec<(MoeSite, GatingResult)>,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub hazards: Vec<f64>,
    pub logits: Vec<f64>,
    pub features: FeatureTriple,
    pub gating: Vec<(MoeSite, GatingResult)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurvivalModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub moe: Option<MoeSites>,
}

impl SurvivalModel {
    pub fn new(config: ModelConfig, patch_dim: usize, genomic_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = BackboneDims {
            patch_dim,
            genomic_width,
            latent: config.latent_dim,
            hidden: config.hidden_dim,
            attn: config.attn_dim,
            n_bins: config.n_bins,
        };
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(sub_seed(seed, STREAM_BACKBONE, 0));
        let backbone = Backbone::new(&mut store, dims, !config.use_moe, &mut rng)?;
        let moe = if config.use_moe {
            let d = config.latent_dim;
            let eh = config.expert_hidden.unwrap_or(d);
            let (ne, k) = (config.n_experts, config.k_top);
            Some(MoeSites {
                patch: MoeModule::new(&mut store, "moe_patch", (d, eh, d), ne, k, MoeMode::Append, &mut rng)?,
                genomic: MoeModule::new(&mut store, "moe_genomic", (d, eh, d), ne, k, MoeMode::Append, &mut rng)?,
                fusion: MoeModule::new(
                    &mut store,
                    "moe_fusion",
                    (2 * d, config.hidden_dim, d),
                    ne,
                    k,
                    MoeMode::Replace,
                    &mut rng,
                )?,
            })
        } else {
            None
        };
        Ok(SurvivalModel {
            config,
            seed,
            store,
            backbone,
            moe,
        })
    }

    pub fn dims(&self) -> BackboneDims {
        self.backbone.dims
    }

    pub fn has_task(&self, task: usize) -> bool {
        self.backbone.has_head(task)
    }

    pub fn tasks(&self) -> Vec<usize> {
        self.backbone.heads.keys().copied().collect()
    }

    /// Adds the head (and routers) for `task` if absent. Initial values depend
    /// only on the model seed and the task id. Returns whether anything was added.
    pub fn ensure_task(&mut self, task: usize) -> Result<bool> {
        if self.has_task(task) {
            return Ok(false);
        }
        let mut rng = seeded_rng(sub_seed(self.seed, STREAM_HEAD, task as u64));
        self.backbone.add_head(&mut self.store, task, &mut rng)?;
        if let Some(moe) = self.moe.as_mut() {
            for (i, m) in moe.all_mut().into_iter().enumerate() {
                let mut rng = seeded_rng(sub_seed(self.seed, STREAM_ROUTER, (task * 3 + i) as u64));
                m.add_task_router(&mut self.store, task, &mut rng)?;
            }
        }
        Ok(true)
    }

    /// Freezes or unfreezes the routers of `task`.
    pub fn set_routers_trainable(&mut self, task: usize, trainable: bool) -> Result<()> {
        if let Some(moe) = &self.moe {
            for site in MoeSite::ALL {
                moe.get(site).set_router_trainable(&mut self.store, task, trainable)?;
            }
        }
        Ok(())
    }

    /// Feature triple and head output for one case, routed with `task`'s routers.
    pub fn forward(&self, g: &mut Graph, p: &PatchBag, gp: &GenomicProfile, task: usize) -> Result<ForwardVars> {
        if !self.has_task(task) {
            return Err(Error::MissingHead(task));
        }
        let (mut fp, mut fg) = self.backbone.encode(g, p, gp)?;
        let mut gating = Vec::new();
        let ff = match &self.moe {
            Some(moe) => {
                let (y, gr) = moe.patch.forward(g, fp, task)?;
                fp = y;
                gating.push((MoeSite::Patch, gr));
                let (y, gr) = moe.genomic.forward(g, fg, task)?;
                fg = y;
                gating.push((MoeSite::Genomic, gr));
                let x = g.concat_cols(&[fp, fg])?;
                let (y, gr) = moe.fusion.forward(g, x, task)?;
                gating.push((MoeSite::Fusion, gr));
                y
            }
            None => self.backbone.fuse(g, fp, fg)?,
        };
        let logits = self.backbone.head_logits(g, ff, task)?;
        let hazards = g.sigmoid(logits)?;
        Ok(ForwardVars {
            f_p: fp,
            f_g: fg,
            f_f: ff,
            logits,
            hazards,
            gating,
        })
    }

    pub fn forward_case(&self, g: &mut Graph, case: &CaseRecord, task: usize) -> Result<ForwardVars> {
        self.forward(g, &case.patches, &case.genomics, task)
    }

    pub fn predict(&self, p: &PatchBag, gp: &GenomicProfile, task: usize) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let fv = self.forward(&mut g, p, gp, task)?;
        Ok(prediction_from(&g, fv))
    }

    pub fn predict_case(&self, case: &CaseRecord, task: usize) -> Result<Prediction> {
        self.predict(&case.patches, &case.genomics, task)
    }
}

pub fn prediction_from(g: &Graph, fv: ForwardVars) -> Prediction {
    Prediction {
        hazards: g.values(fv.hazards).to_vec(),
        logits: g.values(fv.logits).to_vec(),
        features: FeatureTriple {
            f_p: g.values(fv.f_p).to_vec(),
            f_g: g.values(fv.f_g).to_vec(),
            f_f: g.values(fv.f_f).to_vec(),
        },
        gating: fv.gating,
    }
}
