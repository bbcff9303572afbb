//! Seeded generator of multimodal survival task streams.
//!
//! Each case has two latent vectors, one per modality. Signal patches carry
//! a projection of the first, genomic groups a projection of the second, and
//! each task views both feature spaces through its own random rotation. The
//! log-risk mixes a shared linear term, a task-specific linear term and a
//! cross-modal product term.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CaseRecord, GenomicProfile, PatchBag, TaskData, TaskStream, N_GENOMIC_GROUPS};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, sub_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_tasks: usize,
    pub cases_per_task: usize,
    pub n_patches_min: usize,
    pub n_patches_max: usize,
    pub patch_dim: usize,
    pub group_dims: Vec<usize>,
    /// Width of each modality's latent vector.
    pub latent_dim: usize,
    /// Share of patches in a bag that carry signal.
    pub signal_fraction: f64,
    pub signal_scale: f64,
    pub noise_scale: f64,
    pub shared_scale: f64,
    pub specific_scale: f64,
    /// Weight on the product of the two modalities' latent projections.
    pub cross_strength: f64,
    /// Target fraction of censored cases.
    pub censoring_rate: f64,
    pub baseline_hazard: f64,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_tasks: 4,
            cases_per_task: 300,
            n_patches_min: 8,
            n_patches_max: 32,
            patch_dim: 16,
            group_dims: vec![8, 12, 10, 16, 6, 14],
            latent_dim: 4,
            signal_fraction: 0.25,
            signal_scale: 2.0,
            noise_scale: 1.0,
            shared_scale: 1.5,
            specific_scale: 1.0,
            cross_strength: 0.75,
            censoring_rate: 0.3,
            baseline_hazard: 0.1,
            n_bins: 4,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_tasks == 0 || self.cases_per_task == 0 {
            return bad("need at least one task and one case per task".into());
        }
        if self.n_patches_min == 0 || self.n_patches_min > self.n_patches_max {
            return bad(format!(
                "patch range {}..={} is invalid",
                self.n_patches_min, self.n_patches_max
            ));
        }
        if self.patch_dim == 0 || self.latent_dim == 0 || self.n_bins == 0 {
            return bad("patch_dim, latent_dim and n_bins must be positive".into());
        }
        if self.group_dims.len() != N_GENOMIC_GROUPS || self.group_dims.iter().any(|&d| d == 0) {
            return bad(format!("group_dims must list {N_GENOMIC_GROUPS} positive widths"));
        }
        if self.latent_dim > self.patch_dim || self.latent_dim > self.group_dims.iter().sum::<usize>() {
            return bad("latent_dim exceeds a feature space width".into());
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad(format!("signal_fraction {} not in (0, 1]", self.signal_fraction));
        }
        for (n, v) in [
            ("signal_scale", self.signal_scale),
            ("noise_scale", self.noise_scale),
            ("shared_scale", self.shared_scale),
            ("specific_scale", self.specific_scale),
            ("cross_strength", self.cross_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{n} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad(format!("censoring_rate {} not in [0, 1)", self.censoring_rate));
        }
        if !(self.baseline_hazard.is_finite() && self.baseline_hazard > 0.0) {
            return bad("baseline_hazard must be positive".into());
        }
        Ok(())
    }

    pub fn genomic_width(&self) -> usize {
        self.group_dims.iter().copied().max().unwrap_or(0)
    }
}

/// Log-risk of one case and its single-modality parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRisk {
    pub total: f64,
    /// Terms depending only on the patch-side latent.
    pub patch_only: f64,
    /// Terms depending only on the genomic-side latent.
    pub genomic_only: f64,
}

/// Generating directions. Unit-norm vectors live in latent space; the
/// embeddings map latent space into each feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRiskModel {
    pub shared_a: Vec<f64>,
    pub shared_b: Vec<f64>,
    pub cross_a: Vec<f64>,
    pub cross_b: Vec<f64>,
    pub cross_strength: f64,
    pub specific_a: Vec<Vec<f64>>,
    pub specific_b: Vec<Vec<f64>>,
    /// `patch_dim × latent_dim`, orthonormal columns.
    pub embed_a: Vec<Vec<f64>>,
    /// `Σ group_dims × latent_dim`, orthonormal columns.
    pub embed_b: Vec<Vec<f64>>,
    /// Per-task orthogonal rotations of the patch and genomic spaces.
    pub rotate_a: Vec<Vec<Vec<f64>>>,
    pub rotate_b: Vec<Vec<Vec<f64>>>,
    pub baseline: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStream {
    pub stream: TaskStream,
    pub risk_model: LatentRiskModel,
    /// Per task, per case (in stream order).
    pub oracle: Vec<Vec<OracleRisk>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v = normal_vec(n, rng);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `rows × cols` matrix with orthonormal columns (Gram–Schmidt on Gaussians).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = normal_vec(rows, rng);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    // stored row-major: out[r][c]
    (0..rows).map(|r| (0..cols).map(|c| basis[c][r]).collect()).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn to_f32_exact(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Censoring rate ρ of an exponential censoring time such that the expected
/// censored fraction `mean(ρ / (ρ + λ_i))` hits `target`.
fn censoring_rate_for(target: f64, event_rates: &[f64]) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let frac = |rho: f64| event_rates.iter().map(|&l| rho / (rho + l)).sum::<f64>() / event_rates.len() as f64;
    let (mut lo, mut hi) = (1e-12f64, 1.0f64);
    while frac(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

pub fn build_risk_model(cfg: &GeneratorConfig) -> LatentRiskModel {
    let dz = cfg.latent_dim;
    let gdim: usize = cfg.group_dims.iter().sum();
    let mut rng = seeded_rng(sub_seed(cfg.seed, 10, 0));
    let shared_a = unit_vec(dz, &mut rng);
    let shared_b = unit_vec(dz, &mut rng);
    let cross_a = unit_vec(dz, &mut rng);
    let cross_b = unit_vec(dz, &mut rng);
    let embed_a = orthonormal_columns(cfg.patch_dim, dz, &mut rng);
    let embed_b = orthonormal_columns(gdim, dz, &mut rng);
    let mut m = LatentRiskModel {
        shared_a,
        shared_b,
        cross_a,
        cross_b,
        cross_strength: cfg.cross_strength,
        specific_a: vec![],
        specific_b: vec![],
        embed_a,
        embed_b,
        rotate_a: vec![],
        rotate_b: vec![],
        baseline: vec![],
    };
    for k in 0..cfg.n_tasks {
        let mut rng = seeded_rng(sub_seed(cfg.seed, 11, k as u64));
        m.specific_a.push(unit_vec(dz, &mut rng));
        m.specific_b.push(unit_vec(dz, &mut rng));
        m.rotate_a.push(orthonormal_columns(cfg.patch_dim, cfg.patch_dim, &mut rng));
        m.rotate_b.push(orthonormal_columns(gdim, gdim, &mut rng));
        m.baseline.push(cfg.baseline_hazard * rng.random_range(-0.5f64..0.5).exp());
    }
    m
}

impl LatentRiskModel {
    pub fn risk(&self, task: usize, za: &[f64], zb: &[f64], shared: f64, specific: f64) -> OracleRisk {
        let patch_only = shared * dot(&self.shared_a, za) + specific * dot(&self.specific_a[task], za);
        let genomic_only = shared * dot(&self.shared_b, zb) + specific * dot(&self.specific_b[task], zb);
        let cross = self.cross_strength * dot(&self.cross_a, za) * dot(&self.cross_b, zb);
        OracleRisk {
            total: patch_only + genomic_only + cross,
            patch_only,
            genomic_only,
        }
    }
}

fn generate_task(
    cfg: &GeneratorConfig,
    m: &LatentRiskModel,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TaskData, Vec<OracleRisk>)> {
    let dz = cfg.latent_dim;
    let width = cfg.genomic_width();
    let mut raw = Vec::with_capacity(cfg.cases_per_task);
    let mut oracle = Vec::with_capacity(cfg.cases_per_task);
    let mut rates = Vec::with_capacity(cfg.cases_per_task);
    for i in 0..cfg.cases_per_task {
        let za = normal_vec(dz, rng);
        let zb = normal_vec(dz, rng);
        let risk = m.risk(k, &za, &zb, cfg.shared_scale, cfg.specific_scale);

        let n_p = rng.random_range(cfg.n_patches_min..=cfg.n_patches_max);
        let n_sig = ((cfg.signal_fraction * n_p as f64).round() as usize).clamp(1, n_p);
        let mut sig_slots: Vec<usize> = (0..n_p).collect();
        sig_slots.shuffle(rng);
        let sig_slots = &sig_slots[..n_sig];
        let pa = mat_vec(&m.rotate_a[k], &mat_vec(&m.embed_a, &za));
        let mut patches = Vec::with_capacity(n_p * cfg.patch_dim);
        for slot in 0..n_p {
            let signal = sig_slots.contains(&slot);
            for &s in &pa {
                let noise: f64 = rng.sample(StandardNormal);
                let v = cfg.noise_scale * noise + if signal { cfg.signal_scale * s } else { 0.0 };
                patches.push(to_f32_exact(v));
            }
        }
        let gb = mat_vec(&m.rotate_b[k], &mat_vec(&m.embed_b, &zb));
        let mut groups = Vec::with_capacity(N_GENOMIC_GROUPS);
        let mut off = 0;
        for &gd in &cfg.group_dims {
            let g: Vec<f64> = (0..gd)
                .map(|j| {
                    let noise: f64 = rng.sample(StandardNormal);
                    to_f32_exact(cfg.signal_scale * gb[off + j] + cfg.noise_scale * noise)
                })
                .collect();
            off += gd;
            groups.push(g);
        }
        let rate = m.baseline[k] * risk.total.exp();
        let event = Exp::new(rate)
            .map_err(|e| Error::Generation(format!("event rate {rate}: {e}")))?
            .sample(rng);
        rates.push(rate);
        oracle.push(risk);
        raw.push((
            format!("t{k}_c{i:04}"),
            event,
            PatchBag::new(n_p, cfg.patch_dim, patches)?,
            GenomicProfile::new(groups, width)?,
        ));
    }
    let rho = censoring_rate_for(cfg.censoring_rate, &rates);
    let mut cases = Vec::with_capacity(raw.len());
    for (id, event, patches, genomics) in raw {
        let censor_time = if rho > 0.0 {
            Exp::new(rho)
                .map_err(|e| Error::Generation(format!("censoring rate {rho}: {e}")))?
                .sample(rng)
        } else {
            f64::INFINITY
        };
        let censored = censor_time < event;
        cases.push(CaseRecord {
            id,
            task: k,
            time: if censored { censor_time } else { event },
            censored,
            label: 0,
            patches,
            genomics,
        });
    }
    let task = TaskData::new(format!("task{k}"), cases, cfg.n_bins).map_err(|e| match e {
        Error::InsufficientEvents { needed, found } => Error::Generation(format!(
            "task {k} has {found} distinct event times, {needed} bins need more"
        )),
        other => other,
    })?;
    Ok((task, oracle))
}

pub fn generate_stream(cfg: &GeneratorConfig) -> Result<SyntheticStream> {
    cfg.validate()?;
    let m = build_risk_model(cfg);
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut oracle = Vec::with_capacity(cfg.n_tasks);
    for k in 0..cfg.n_tasks {
        let mut rng = seeded_rng(sub_seed(cfg.seed, 12, k as u64));
        let (t, o) = generate_task(cfg, &m, k, &mut rng)?;
        tasks.push(t);
        oracle.push(o);
    }
    Ok(SyntheticStream {
        stream: TaskStream::new(tasks)?,
        risk_model: m,
        oracle,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded k-fold partition stratified by censoring status.
pub fn split_folds(task: &TaskData, n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = task.len();
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if n < n_folds {
        return Err(Error::Data(format!("{n} cases cannot fill {n_folds} folds")));
    }
    let mut rng = seeded_rng(seed);
    let mut events: Vec<usize> = (0..n).filter(|&i| !task.cases[i].censored).collect();
    let mut censored: Vec<usize> = (0..n).filter(|&i| task.cases[i].censored).collect();
    events.shuffle(&mut rng);
    censored.shuffle(&mut rng);
    let mut members = vec![Vec::new(); n_folds];
    for (pos, &i) in events.iter().chain(&censored).enumerate() {
        members[pos % n_folds].push(i);
    }
    let folds = (0..n_folds)
        .map(|f| {
            let mut val = members[f].clone();
            val.sort_unstable();
            let mut train: Vec<usize> = (0..n_folds).filter(|&o| o != f).flat_map(|o| members[o].clone()).collect();
            train.sort_unstable();
            Fold { train, val }
        })
        .collect();
    Ok(folds)
}
