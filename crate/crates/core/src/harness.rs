//! Task-incremental training and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::data::{TaskData, TaskStream};
use crate::error::{Error, Result};
use crate::fcr::{replay_terms, total_loss_graph, CLLossConfig, ReplayBuffer, ReplayItem, ReplayNeeds};
use crate::model::{prediction_from, ModelConfig, MoeSite, SurvivalModel};
use crate::moe::selection_proportions;
use crate::nn::{seeded_rng, sub_seed};
use crate::optim::{AdamW, AdamWConfig};
use crate::survival::{c_index, c_index_ipcw, default_tau, nll_survival_loss_graph, risk_score, SurvLossConfig};
use crate::synth::Fold;

const STREAM_SHUFFLE: u64 = 20;
const STREAM_BUFFER: u64 = 21;
const JOINT_TASK: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Joint,
    Er,
    DerPp,
    Consurv,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Er => "er",
            Method::DerPp => "der_pp",
            Method::Consurv => "consurv",
        }
    }

    fn uses_buffer(self) -> bool {
        matches!(self, Method::Er | Method::DerPp | Method::Consurv)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "finetune" => Method::Finetune,
            "joint" => Method::Joint,
            "er" => Method::Er,
            "der_pp" | "der++" => Method::DerPp,
            "consurv" => Method::Consurv,
            other => return Err(Error::Config(format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub loss: CLLossConfig,
    pub surv: SurvLossConfig,
    pub buffer_capacity: usize,
    pub model: ModelConfig,
    pub seed: u64,
}

impl MethodConfig {
    /// Defaults per method. Only ConSurv carries expert layers; DER++ uses a
    /// logit-matching weight of 0.3.
    pub fn new(method: Method) -> Self {
        let mut loss = CLLossConfig::default();
        if method == Method::DerPp {
            loss.alpha = 0.3;
        }
        MethodConfig {
            method,
            epochs: 20,
            optimizer: AdamWConfig::default(),
            loss,
            surv: SurvLossConfig::default(),
            buffer_capacity: 32,
            model: ModelConfig {
                use_moe: method == Method::Consurv,
                ..ModelConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.surv.validate()?;
        self.model.validate()?;
        if self.method.uses_buffer() && self.buffer_capacity == 0 {
            return Err(Error::Config("replay methods need a positive buffer capacity".into()));
        }
        Ok(())
    }

    /// Which replay terms a step builds; zero-weighted terms are left out.
    fn needs(&self) -> ReplayNeeds {
        let l = &self.loss;
        match self.method {
            Method::Finetune | Method::Joint => ReplayNeeds::default(),
            Method::Er => ReplayNeeds {
                survival: l.zeta * l.beta > 0.0,
                ..Default::default()
            },
            Method::DerPp => ReplayNeeds {
                survival: l.zeta * l.beta > 0.0,
                logits: l.zeta * l.alpha > 0.0,
                ..Default::default()
            },
            Method::Consurv => ReplayNeeds {
                features: l.alpha > 0.0,
                survival: l.beta > 0.0,
                logits: false,
            },
        }
    }
}

/// `(K+1) × K` matrix; row 0 is the untrained model, row `l` the model after
/// task `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub metric: String,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl PerformanceMatrix {
    pub fn new(metric: &str, k: usize) -> Self {
        PerformanceMatrix {
            metric: metric.to_string(),
            rows: vec![vec![None; k]; k + 1],
        }
    }

    pub fn from_rows(metric: &str, rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.len());
        if k == 0 || rows.len() != k + 1 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("performance matrix must be (K+1) × K".into()));
        }
        Ok(PerformanceMatrix {
            metric: metric.to_string(),
            rows: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.rows[0].len()
    }

    pub fn set(&mut self, row: usize, task: usize, v: f64) {
        self.rows[row][task] = Some(v);
    }

    fn at(&self, row: usize, task: usize) -> Result<f64> {
        self.rows[row][task].ok_or_else(|| {
            Error::UndefinedMetric(format!("{} matrix entry ({row}, {task}) is not filled", self.metric))
        })
    }

    fn need_two(&self, what: &str) -> Result<usize> {
        let k = self.k();
        if k < 2 {
            return Err(Error::UndefinedMetric(format!("{what} needs at least two tasks")));
        }
        Ok(k)
    }

    /// Mean of the final row.
    pub fn average(&self) -> Result<f64> {
        let k = self.k();
        let mut s = 0.0;
        for j in 0..k {
            s += self.at(k, j)?;
        }
        Ok(s / k as f64)
    }

    /// Mean over earlier tasks of the best score seen for that task minus
    /// the final one. The final row takes part in the max, so a task that
    /// only improved contributes 0 rather than a negative amount.
    pub fn forgetting(&self) -> Result<f64> {
        let k = self.need_two("forgetting")?;
        let mut s = 0.0;
        for j in 0..k - 1 {
            let mut best = f64::NEG_INFINITY;
            for l in j + 1..=k {
                best = best.max(self.at(l, j)?);
            }
            s += best - self.at(k, j)?;
        }
        Ok(s / (k - 1) as f64)
    }

    pub fn bwt(&self) -> Result<f64> {
        let k = self.need_two("backward transfer")?;
        let mut s = 0.0;
        for j in 0..k - 1 {
            s += self.at(k, j)? - self.at(j + 1, j)?;
        }
        Ok(s / (k - 1) as f64)
    }

    pub fn fwt(&self) -> Result<f64> {
        let k = self.need_two("forward transfer")?;
        let mut s = 0.0;
        for j in 1..k {
            s += self.at(j, j)? - self.at(0, j)?;
        }
        Ok(s / (k - 1) as f64)
    }

    /// Mean over the tasks trained so far, per row `1..=K`.
    pub fn average_on_trained(&self) -> Vec<Option<f64>> {
        (1..=self.k())
            .map(|l| {
                let vals: Option<Vec<f64>> = (0..l).map(|j| self.rows[l][j]).collect();
                vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub average: f64,
    pub forgetting: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub average_on_trained: Vec<Option<f64>>,
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricSummary {
    /// Average is required; the transfer metrics are `None` where undefined
    /// (one task, or a matrix with a single training row).
    pub fn from_matrix(r: &PerformanceMatrix) -> Result<Self> {
        Ok(MetricSummary {
            average: r.average()?,
            forgetting: optional(r.forgetting())?,
            bwt: optional(r.bwt())?,
            fwt: optional(r.fwt())?,
            average_on_trained: r.average_on_trained(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub c_index: f64,
    pub c_index_ipcw: f64,
}

pub fn predict_risks(model: &SurvivalModel, task: &TaskData, idx: &[usize], task_id: usize) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| risk_score(&model.predict_case(&task.cases[i], task_id)?.hazards))
        .collect()
}

pub fn validation_c_index(model: &SurvivalModel, task: &TaskData, idx: &[usize], task_id: usize) -> Result<f64> {
    let risks = predict_risks(model, task, idx, task_id)?;
    c_index(&risks, &task.times(idx), &task.censored(idx))
}

pub fn evaluate(model: &SurvivalModel, task: &TaskData, idx: &[usize], task_id: usize) -> Result<EvalScores> {
    let risks = predict_risks(model, task, idx, task_id)?;
    let (times, cens) = (task.times(idx), task.censored(idx));
    let tau = default_tau(&times, &cens)
        .ok_or_else(|| Error::UndefinedMetric(format!("task {task_id} validation split has no events")))?;
    Ok(EvalScores {
        c_index: c_index(&risks, &times, &cens)?,
        c_index_ipcw: c_index_ipcw(&risks, &times, &cens, tau)?,
    })
}

/// Evaluates `task_id` through its own head; a task not yet seen gets its
/// deterministic initial head on a temporary copy of the model.
fn evaluate_through_own_head(model: &SurvivalModel, task: &TaskData, idx: &[usize], task_id: usize) -> Result<EvalScores> {
    if model.has_task(task_id) {
        evaluate(model, task, idx, task_id)
    } else {
        let mut probe = model.clone();
        probe.ensure_task(task_id)?;
        evaluate(&probe, task, idx, task_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Task being trained; `None` for joint training.
    pub task: Option<usize>,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_c_index: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub curve: Vec<EpochRecord>,
}

/// Mutable state carried across tasks of one run.
pub struct Trainer {
    pub cfg: MethodConfig,
    pub model: SurvivalModel,
    pub buffer: Option<ReplayBuffer>,
    buffer_rng: rand_chacha::ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: MethodConfig, patch_dim: usize, genomic_width: usize) -> Result<Self> {
        cfg.validate()?;
        let model = SurvivalModel::new(cfg.model.clone(), patch_dim, genomic_width, cfg.seed)?;
        Self::with_model(cfg, model)
    }

    pub fn with_model(cfg: MethodConfig, model: SurvivalModel) -> Result<Self> {
        cfg.validate()?;
        let buffer = if cfg.method.uses_buffer() {
            Some(ReplayBuffer::new(cfg.buffer_capacity)?)
        } else {
            None
        };
        let buffer_rng = seeded_rng(sub_seed(cfg.seed, STREAM_BUFFER, 0));
        Ok(Trainer {
            cfg,
            model,
            buffer,
            buffer_rng,
        })
    }

    /// One gradient step on case `i` of `task`; returns the total loss.
    pub fn step(&mut self, opt: &mut AdamW, task: &TaskData, i: usize, task_id: usize) -> Result<f64> {
        let case = &task.cases[i];
        let needs = self.cfg.needs();
        let any_replay = needs != ReplayNeeds::default();
        let slot = match self.buffer.as_mut() {
            Some(b) => b.reserve_slot(&mut self.buffer_rng),
            None => None,
        };
        let (grads, loss, captured) = {
            let replay: Vec<&ReplayItem> = match (&self.buffer, any_replay) {
                (Some(b), true) => b.sample_replay(self.cfg.loss.replay_count, &mut self.buffer_rng),
                _ => Vec::new(),
            };
            let mut g = Graph::new(&self.model.store);
            let fv = self.model.forward_case(&mut g, case, task_id)?;
            let ls = nll_survival_loss_graph(&mut g, fv.hazards, case.label, case.censored, self.cfg.surv)?;
            let total = if replay.is_empty() {
                ls
            } else {
                let terms = replay_terms(&self.model, &mut g, &replay, self.cfg.surv, needs)?;
                let l = &self.cfg.loss;
                match self.cfg.method {
                    Method::Consurv => total_loss_graph(&mut g, ls, terms.fc.map(|f| f.total), terms.survival, l)?,
                    Method::Er => {
                        let w = CLLossConfig {
                            alpha: 0.0,
                            beta: l.zeta * l.beta,
                            ..*l
                        };
                        total_loss_graph(&mut g, ls, None, terms.survival, &w)?
                    }
                    Method::DerPp => {
                        let w = CLLossConfig {
                            alpha: l.zeta * l.alpha,
                            beta: l.zeta * l.beta,
                            ..*l
                        };
                        total_loss_graph(&mut g, ls, terms.logit_mse, terms.survival, &w)?
                    }
                    Method::Finetune | Method::Joint => ls,
                }
            };
            let loss = g.scalar(total).unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::Domain(format!("non-finite training loss on case {}", case.id)));
            }
            let grads = g.backward(total)?;
            let captured = slot.map(|_| prediction_from(&g, fv.clone()));
            (grads, loss, captured)
        };
        opt.step(&mut self.model.store, &grads);
        if let (Some(slot), Some(pred), Some(buf)) = (slot, captured, self.buffer.as_mut()) {
            let item = match self.cfg.method {
                Method::Consurv => ReplayItem::new(case.clone(), task_id, Some(pred.features), None),
                Method::DerPp => ReplayItem::new(case.clone(), task_id, None, Some(pred.logits)),
                _ => ReplayItem::new(case.clone(), task_id, None, None),
            };
            buf.place(slot, item);
        }
        Ok(loss)
    }

    /// Trains on one task and restores the epoch with the best validation
    /// C-index (earliest on ties).
    pub fn train_task(&mut self, task: &TaskData, task_id: usize, fold: &Fold) -> Result<TrainOutcome> {
        if fold.train.is_empty() {
            return Err(Error::Data(format!("task {task_id} has an empty training split")));
        }
        self.model.ensure_task(task_id)?;
        self.model.set_routers_trainable(task_id, true)?;
        let mut opt = AdamW::new(self.cfg.optimizer);
        let mut shuffle = seeded_rng(sub_seed(self.cfg.seed, STREAM_SHUFFLE, task_id as u64));
        let mut order = fold.train.clone();
        let mut best: Option<(usize, f64, ParamStore)> = None;
        let mut curve = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut shuffle);
            let mut sum = 0.0;
            for &i in &order {
                sum += self.step(&mut opt, task, i, task_id)?;
            }
            let val = validation_c_index(&self.model, task, &fold.val, task_id)?;
            curve.push(EpochRecord {
                task: Some(task_id),
                epoch,
                train_loss: sum / order.len() as f64,
                val_c_index: val,
            });
            if best.as_ref().is_none_or(|b| val > b.1) {
                best = Some((epoch, val, self.model.store.clone()));
            }
        }
        self.model.set_routers_trainable(task_id, false)?;
        Ok(match best {
            Some((e, v, store)) => {
                self.model.store = store;
                TrainOutcome {
                    best_epoch: Some(e),
                    best_val: Some(v),
                    curve,
                }
            }
            None => TrainOutcome {
                best_epoch: None,
                best_val: None,
                curve,
            },
        })
    }

    /// Joint training on the union of all tasks, every case through its own
    /// task's head. Checkpoint chosen by mean validation C-index.
    pub fn train_joint(&mut self, stream: &TaskStream, folds: &[Fold]) -> Result<TrainOutcome> {
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (k, f) in folds.iter().enumerate() {
            if f.train.is_empty() {
                return Err(Error::Data(format!("task {k} has an empty training split")));
            }
            self.model.ensure_task(k)?;
            order.extend(f.train.iter().map(|&i| (k, i)));
        }
        for k in 0..folds.len() {
            self.model.set_routers_trainable(k, true)?;
        }
        let mut opt = AdamW::new(self.cfg.optimizer);
        let mut shuffle = seeded_rng(sub_seed(self.cfg.seed, STREAM_SHUFFLE, JOINT_TASK));
        let mut best: Option<(usize, f64, ParamStore)> = None;
        let mut curve = Vec::new();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut shuffle);
            let mut sum = 0.0;
            for &(k, i) in &order {
                sum += self.step(&mut opt, &stream.tasks[k], i, k)?;
            }
            let mut val = 0.0;
            for (k, f) in folds.iter().enumerate() {
                val += validation_c_index(&self.model, &stream.tasks[k], &f.val, k)?;
            }
            val /= folds.len() as f64;
            curve.push(EpochRecord {
                task: None,
                epoch,
                train_loss: sum / order.len() as f64,
                val_c_index: val,
            });
            if best.as_ref().is_none_or(|b| val > b.1) {
                best = Some((epoch, val, self.model.store.clone()));
            }
        }
        let (best_epoch, best_val) = match best {
            Some((e, v, store)) => {
                self.model.store = store;
                (Some(e), Some(v))
            }
            None => (None, None),
        };
        Ok(TrainOutcome {
            best_epoch,
            best_val,
            curve,
        })
    }

    /// Scores every task's validation split through its own head.
    pub fn evaluate_all(&self, stream: &TaskStream, folds: &[Fold]) -> Result<Vec<EvalScores>> {
        stream
            .tasks
            .iter()
            .zip(folds)
            .enumerate()
            .map(|(j, (t, f))| evaluate_through_own_head(&self.model, t, &f.val, j))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub task: usize,
    pub site: MoeSite,
    pub expert: usize,
    pub proportion: f64,
}

/// Per-site expert selection proportions over a set of cases routed with
/// `task_id`'s routers. Empty for models without expert layers.
pub fn routing_proportions(model: &SurvivalModel, task: &TaskData, idx: &[usize], task_id: usize) -> Result<Vec<RoutingRecord>> {
    let Some(moe) = &model.moe else { return Ok(Vec::new()) };
    if idx.is_empty() {
        return Err(Error::Contract("routing statistics need at least one case".into()));
    }
    let mut per_site: Vec<Vec<_>> = vec![Vec::new(); MoeSite::ALL.len()];
    for &i in idx {
        let pred = model.predict_case(&task.cases[i], task_id)?;
        for (s, gr) in pred.gating {
            let pos = MoeSite::ALL.iter().position(|&x| x == s).expect("known site");
            per_site[pos].push(gr);
        }
    }
    let mut out = Vec::new();
    for (pos, site) in MoeSite::ALL.into_iter().enumerate() {
        let n_e = moe.get(site).n_experts();
        for (e, p) in selection_proportions(&per_site[pos], n_e).into_iter().enumerate() {
            out.push(RoutingRecord {
                task: task_id,
                site,
                expert: e,
                proportion: p,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub c_index: PerformanceMatrix,
    pub c_index_ipcw: PerformanceMatrix,
    pub curve: Vec<EpochRecord>,
    pub routing: Vec<RoutingRecord>,
    pub model: SurvivalModel,
    pub buffer: Option<ReplayBuffer>,
}

/// Runs a method over the whole stream. `folds[k]` is task `k`'s split.
pub fn run_sequence(cfg: &MethodConfig, stream: &TaskStream, folds: &[Fold]) -> Result<RunResult> {
    let k = stream.n_tasks();
    if folds.len() != k {
        return Err(Error::Contract(format!("{} splits for {k} tasks", folds.len())));
    }
    let mut trainer = Trainer::new(cfg.clone(), stream.patch_dim(), stream.genomic_width())?;
    let mut ci = PerformanceMatrix::new("c_index", k);
    let mut ipcw = PerformanceMatrix::new("c_index_ipcw", k);
    let record = |row: usize, scores: &[EvalScores], ci: &mut PerformanceMatrix, ipcw: &mut PerformanceMatrix| {
        for (j, s) in scores.iter().enumerate() {
            ci.set(row, j, s.c_index);
            ipcw.set(row, j, s.c_index_ipcw);
        }
    };
    let scores = trainer.evaluate_all(stream, folds)?;
    record(0, &scores, &mut ci, &mut ipcw);

    let mut curve = Vec::new();
    if cfg.method == Method::Joint {
        curve.extend(trainer.train_joint(stream, folds)?.curve);
        let scores = trainer.evaluate_all(stream, folds)?;
        record(k, &scores, &mut ci, &mut ipcw);
    } else {
        for (t, (task, fold)) in stream.tasks.iter().zip(folds).enumerate() {
            curve.extend(trainer.train_task(task, t, fold)?.curve);
            let scores = trainer.evaluate_all(stream, folds)?;
            record(t + 1, &scores, &mut ci, &mut ipcw);
        }
    }

    let mut routing = Vec::new();
    for (t, (task, fold)) in stream.tasks.iter().zip(folds).enumerate() {
        routing.extend(routing_proportions(&trainer.model, task, &fold.val, t)?);
    }
    Ok(RunResult {
        method: cfg.method,
        seed: cfg.seed,
        c_index: ci,
        c_index_ipcw: ipcw,
        curve,
        routing,
        model: trainer.model,
        buffer: trainer.buffer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: Vec<Vec<f64>>) -> PerformanceMatrix {
        PerformanceMatrix::from_rows("c_index", rows).unwrap()
    }

    #[test]
    fn metric_examples() {
        let r = m(vec![vec![0.5, 0.5], vec![0.6, 0.55], vec![0.5, 0.5]]);
        assert!((r.average().unwrap() - 0.5).abs() < 1e-15);
        assert!((r.forgetting().unwrap() - 0.1).abs() < 1e-12);
        assert!((r.bwt().unwrap() + 0.1).abs() < 1e-12);
        let r = m(vec![vec![0.5, 0.5], vec![0.6, 0.55], vec![0.6, 0.5]]);
        assert!((r.average().unwrap() - 0.55).abs() < 1e-15);
        assert!((r.fwt().unwrap() - 0.05).abs() < 1e-12);
        let c = m(vec![vec![0.7; 3]; 4]);
        assert!((c.average().unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(c.forgetting().unwrap(), 0.0);
        assert_eq!(c.bwt().unwrap(), 0.0);
        assert_eq!(c.fwt().unwrap(), 0.0);
    }

    #[test]
    fn single_task_only_has_average() {
        let r = m(vec![vec![0.5], vec![0.62]]);
        assert_eq!(r.average().unwrap(), 0.62);
        assert!(matches!(r.forgetting(), Err(Error::UndefinedMetric(_))));
        let s = MetricSummary::from_matrix(&r).unwrap();
        assert_eq!(s.forgetting, None);
        assert_eq!(s.fwt, None);
    }

    #[test]
    fn nondecreasing_rows_do_not_forget() {
        let r = m(vec![vec![0.5, 0.5, 0.5], vec![0.6, 0.5, 0.5], vec![0.62, 0.7, 0.5], vec![0.65, 0.7, 0.8]]);
        assert_eq!(r.forgetting().unwrap(), 0.0);
        assert!(r.bwt().unwrap() > 0.0);
    }

    #[test]
    fn incomplete_final_row_is_undefined() {
        let mut r = PerformanceMatrix::new("c_index", 2);
        r.set(2, 0, 0.5);
        assert!(matches!(r.average(), Err(Error::UndefinedMetric(_))));
        let joint = {
            let mut j = PerformanceMatrix::new("c_index", 2);
            for t in 0..2 {
                j.set(0, t, 0.5);
                j.set(2, t, 0.7);
            }
            j
        };
        let s = MetricSummary::from_matrix(&joint).unwrap();
        assert_eq!(s.average, 0.7);
        assert_eq!(s.forgetting, None);
        assert_eq!(s.bwt, None);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Finetune, Method::Joint, Method::Er, Method::DerPp, Method::Consurv] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("ewc".parse::<Method>().is_err());
    }
}
