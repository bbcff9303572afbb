//! Replay buffer with frozen features, feature-constraint and replay losses.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureTriple;
use crate::data::{CaseRecord, N_GENOMIC_GROUPS};
use crate::error::{Error, Result};
use crate::io::{read_case, write_case};
use crate::model::SurvivalModel;
use crate::survival::{nll_survival_loss_graph, SurvLossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CLLossConfig {
    /// Feature-constraint weight.
    pub alpha: f64,
    /// Replay weight.
    pub beta: f64,
    /// Forgetting-term weight for the generic replay baselines.
    pub zeta: f64,
    /// Replay items drawn per training step.
    pub replay_count: usize,
}

impl Default for CLLossConfig {
    fn default() -> Self {
        CLLossConfig {
            alpha: 2.4e-3,
            beta: 0.5,
            zeta: 1.0,
            replay_count: 1,
        }
    }
}

impl CLLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("zeta", self.zeta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if self.replay_count == 0 {
            return Err(Error::Config("replay_count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayItem {
    pub case: CaseRecord,
    pub task: usize,
    features: Option<FeatureTriple>,
    logits: Option<Vec<f64>>,
}

impl ReplayItem {
    pub fn new(case: CaseRecord, task: usize, features: Option<FeatureTriple>, logits: Option<Vec<f64>>) -> Self {
        ReplayItem {
            case,
            task,
            features,
            logits,
        }
    }

    /// Features captured when the item entered the buffer.
    pub fn features(&self) -> Option<&FeatureTriple> {
        self.features.as_ref()
    }

    /// Head logits captured when the item entered the buffer.
    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Counts one streamed item and decides where it goes: a free slot while
    /// filling, afterwards a uniform slot with probability m / seen, else
    /// nowhere. Pass the result to [`ReplayBuffer::place`].
    pub fn reserve_slot(&mut self, rng: &mut impl Rng) -> Option<usize> {
        self.seen += 1;
        if self.items.len() < self.capacity {
            return Some(self.items.len());
        }
        let j = rng.random_range(0..self.seen);
        (j < self.capacity as u64).then_some(j as usize)
    }

    pub fn place(&mut self, slot: usize, item: ReplayItem) {
        if slot == self.items.len() {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
    }

    /// Returns the slot the item landed in, if any.
    pub fn reservoir_update(&mut self, item: ReplayItem, rng: &mut impl Rng) -> Option<usize> {
        let slot = self.reserve_slot(rng)?;
        self.place(slot, item);
        Some(slot)
    }

    /// `r` items drawn uniformly with replacement; empty when the buffer is.
    pub fn sample_replay(&self, r: usize, rng: &mut impl Rng) -> Vec<&ReplayItem> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..r).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }

    /// Binary dump: magic "RBUF", version u8, capacity u32, seen_count u64,
    /// n_items u32, then per item its dimensions, case record, task id,
    /// label, and optional frozen features and logits as f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let out = (|| -> std::io::Result<()> {
            w.write_all(b"RBUF")?;
            w.write_u8(1)?;
            w.write_u32::<LE>(self.capacity as u32)?;
            w.write_u64::<LE>(self.seen)?;
            w.write_u32::<LE>(self.items.len() as u32)?;
            for it in &self.items {
                let c = &it.case;
                w.write_u32::<LE>(c.patches.dim() as u32)?;
                w.write_u32::<LE>(c.genomics.width() as u32)?;
                for &d in c.genomics.dims() {
                    w.write_u32::<LE>(d as u32)?;
                }
                write_case(&mut w, c)?;
                w.write_u32::<LE>(it.task as u32)?;
                w.write_u32::<LE>(c.label as u32)?;
                write_opt_vecs(&mut w, it.features.as_ref().map(|f| [&f.f_p[..], &f.f_g[..], &f.f_f[..]]))?;
                write_opt_vecs(&mut w, it.logits.as_ref().map(|l| [&l[..]]))?;
            }
            w.flush()
        })();
        out.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let corrupt = |detail: String| Error::CorruptHeader {
            path: path.to_path_buf(),
            detail,
        };
        let eof = |e: std::io::Error| {
            if e.kind() == ErrorKind::UnexpectedEof {
                corrupt("file ends inside the buffer header".into())
            } else {
                Error::io(path, e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != b"RBUF" {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let version = r.read_u8().map_err(eof)?;
        if version != 1 {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let capacity = r.read_u32::<LE>().map_err(eof)? as usize;
        let seen = r.read_u64::<LE>().map_err(eof)?;
        let n = r.read_u32::<LE>().map_err(eof)? as usize;
        if capacity == 0 || n > capacity || n as u64 > seen {
            return Err(corrupt(format!("{n} items in capacity {capacity} after {seen} streamed")));
        }
        let fe = |i: usize, f: &str, e: std::io::Error| Error::FileField {
            path: path.to_path_buf(),
            field: format!("item[{i}].{f}"),
            detail: e.to_string(),
        };
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let d_p = r.read_u32::<LE>().map_err(|e| fe(i, "d_p", e))? as usize;
            let width = r.read_u32::<LE>().map_err(|e| fe(i, "width", e))? as usize;
            let mut dims = [0usize; N_GENOMIC_GROUPS];
            for d in &mut dims {
                *d = r.read_u32::<LE>().map_err(|e| fe(i, "group_dims", e))? as usize;
            }
            let mut case = read_case(&mut r, i, d_p, &dims, width).map_err(|e| e.into_error(path))?;
            let task = r.read_u32::<LE>().map_err(|e| fe(i, "task", e))? as usize;
            case.label = r.read_u32::<LE>().map_err(|e| fe(i, "label", e))? as usize;
            let features = read_opt_vecs(&mut r, 3)
                .map_err(|e| fe(i, "features", e))?
                .map(|mut v| FeatureTriple {
                    f_f: v.pop().unwrap_or_default(),
                    f_g: v.pop().unwrap_or_default(),
                    f_p: v.pop().unwrap_or_default(),
                });
            let logits = read_opt_vecs(&mut r, 1)
                .map_err(|e| fe(i, "logits", e))?
                .and_then(|mut v| v.pop());
            items.push(ReplayItem {
                case,
                task,
                features,
                logits,
            });
        }
        Ok(ReplayBuffer { capacity, items, seen })
    }
}

fn write_opt_vecs<W: Write, const N: usize>(w: &mut W, v: Option<[&[f64]; N]>) -> std::io::Result<()> {
    match v {
        None => w.write_u8(0),
        Some(parts) => {
            w.write_u8(1)?;
            for p in parts {
                w.write_u32::<LE>(p.len() as u32)?;
                for &x in p {
                    w.write_f64::<LE>(x)?;
                }
            }
            Ok(())
        }
    }
}

fn read_opt_vecs<R: Read>(r: &mut R, n: usize) -> std::io::Result<Option<Vec<Vec<f64>>>> {
    if r.read_u8()? == 0 {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u32::<LE>()? as usize;
        let mut v = vec![0.0; len];
        r.read_f64_into::<LE>(&mut v)?;
        out.push(v);
    }
    Ok(Some(out))
}

/// The three components of the feature-constraint loss as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct FcLoss {
    pub patch: Var,
    pub genomic: Var,
    pub fusion: Var,
    pub total: Var,
}

/// Which replay terms to build.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReplayNeeds {
    pub features: bool,
    pub survival: bool,
    pub logits: bool,
}

/// Replay terms built from a single forward pass per item. Terms that were
/// not requested are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReplayTerms {
    pub fc: Option<FcLoss>,
    pub survival: Option<Var>,
    pub logit_mse: Option<Var>,
}

fn sq_dist(g: &mut Graph, current: Var, frozen: &[f64]) -> Result<Var> {
    let (r, c) = g.dims(current);
    if r * c != frozen.len() {
        return Err(Error::Shape(format!("frozen vector of {} vs current {r}×{c}", frozen.len())));
    }
    let f = g.constant_vec(r, c, frozen.to_vec())?;
    let d = g.sub(current, f)?;
    let s = g.square(d)?;
    g.sum(s)
}

fn mean_of(g: &mut Graph, parts: Vec<Var>) -> Result<Var> {
    let n = parts.len();
    if n == 0 {
        return g.constant_vec(1, 1, vec![0.0]);
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / n as f64)
}

pub fn replay_terms(
    model: &SurvivalModel,
    g: &mut Graph,
    items: &[&ReplayItem],
    cfg: SurvLossConfig,
    needs: ReplayNeeds,
) -> Result<ReplayTerms> {
    let (mut lp, mut lg, mut lf, mut ls, mut lm) = (vec![], vec![], vec![], vec![], vec![]);
    if needs != ReplayNeeds::default() {
        for it in items {
            let fv = model.forward_case(g, &it.case, it.task)?;
            if needs.features {
                let fr = it
                    .features()
                    .ok_or_else(|| Error::Contract("replay item carries no frozen features".into()))?;
                lp.push(sq_dist(g, fv.f_p, &fr.f_p)?);
                lg.push(sq_dist(g, fv.f_g, &fr.f_g)?);
                lf.push(sq_dist(g, fv.f_f, &fr.f_f)?);
            }
            if needs.survival {
                ls.push(nll_survival_loss_graph(g, fv.hazards, it.case.label, it.case.censored, cfg)?);
            }
            if needs.logits {
                let fr = it
                    .logits()
                    .ok_or_else(|| Error::Contract("replay item carries no stored logits".into()))?;
                let d = sq_dist(g, fv.logits, fr)?;
                lm.push(g.scale(d, 1.0 / fr.len() as f64)?);
            }
        }
    }
    let fc = if needs.features {
        let patch = mean_of(g, lp)?;
        let genomic = mean_of(g, lg)?;
        let fusion = mean_of(g, lf)?;
        let s = g.add(patch, genomic)?;
        let total = g.add(s, fusion)?;
        Some(FcLoss {
            patch,
            genomic,
            fusion,
            total,
        })
    } else {
        None
    };
    Ok(ReplayTerms {
        fc,
        survival: if needs.survival { Some(mean_of(g, ls)?) } else { None },
        logit_mse: if needs.logits { Some(mean_of(g, lm)?) } else { None },
    })
}

/// L_FC = L_P + L_G + L_F, each a mean squared distance to the frozen features.
pub fn feature_constraint_loss(model: &SurvivalModel, g: &mut Graph, items: &[&ReplayItem]) -> Result<FcLoss> {
    let needs = ReplayNeeds {
        features: true,
        ..Default::default()
    };
    let t = replay_terms(model, g, items, SurvLossConfig::default(), needs)?;
    Ok(t.fc.expect("requested"))
}

/// Mean survival loss of the items, each through its own task's head.
pub fn replay_loss(model: &SurvivalModel, g: &mut Graph, items: &[&ReplayItem], cfg: SurvLossConfig) -> Result<Var> {
    let needs = ReplayNeeds {
        survival: true,
        ..Default::default()
    };
    Ok(replay_terms(model, g, items, cfg, needs)?.survival.expect("requested"))
}

/// `L_s + α·L_FC + β·L_R`.
pub fn total_loss(l_s: f64, l_fc: f64, l_r: f64, cfg: &CLLossConfig) -> f64 {
    l_s + cfg.alpha * l_fc + cfg.beta * l_r
}

/// Graph form of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_graph(g: &mut Graph, l_s: Var, l_fc: Option<Var>, l_r: Option<Var>, cfg: &CLLossConfig) -> Result<Var> {
    let mut acc = l_s;
    if let Some(v) = l_fc {
        let t = g.scale(v, cfg.alpha)?;
        acc = g.add(acc, t)?;
    }
    if let Some(v) = l_r {
        let t = g.scale(v, cfg.beta)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn total_loss_arithmetic() {
        let cfg = CLLossConfig {
            alpha: 0.5,
            beta: 0.25,
            ..Default::default()
        };
        assert_eq!(total_loss(1.0, 2.0, 4.0, &cfg), 3.0);
        let zero = CLLossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(1.7, 2.0, 4.0, &zero), 1.7);
    }

    fn item(i: usize) -> ReplayItem {
        let case = CaseRecord {
            id: format!("c{i}"),
            task: 0,
            time: 1.0 + i as f64,
            censored: false,
            label: 0,
            patches: crate::data::PatchBag::new(1, 2, vec![i as f64, 0.5]).unwrap(),
            genomics: crate::data::GenomicProfile::new(vec![vec![1.0]; 6], 1).unwrap(),
        };
        ReplayItem::new(case, 0, None, None)
    }

    #[test]
    fn fill_phase_keeps_everything() {
        let mut b = ReplayBuffer::new(4).unwrap();
        let mut rng = seeded_rng(0);
        for i in 0..4 {
            assert_eq!(b.reservoir_update(item(i), &mut rng), Some(i));
        }
        assert_eq!(b.seen_count(), 4);
        assert_eq!(b.len(), 4);
        b.reservoir_update(item(4), &mut rng);
        assert_eq!(b.len(), 4);
        assert_eq!(b.seen_count(), 5);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn empty_buffer_samples_nothing() {
        let b = ReplayBuffer::new(3).unwrap();
        assert!(b.sample_replay(5, &mut seeded_rng(1)).is_empty());
    }

    #[test]
    fn config_rejects_negative_weights() {
        let bad = CLLossConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
