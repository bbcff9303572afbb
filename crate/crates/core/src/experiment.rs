//! Config-driven experiment runs and checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::harness::{run_sequence, Method, MethodConfig};
use crate::io::ingest_feature_bags;
use crate::model::SurvivalModel;
use crate::nn::sub_seed;
use crate::report::{
    aggregate, aggregate_csv, curve_csv, emit_km_csv, matrix_csv, routing_csv, write_json, write_text, Aggregate,
    RunMetrics,
};
use crate::synth::{generate_stream, split_folds, Fold, GeneratorConfig};

pub const OUTPUT_DIR_ENV: &str = "SURVCL_OUTPUT_DIR";
const STREAM_FOLDS: u64 = 30;

/// Where a run's tasks come from. Synthetic streams are regenerated per run
/// seed, with the generator's own `seed` field replaced by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic(GeneratorConfig),
    Ingested(PathBuf),
}

impl Source {
    pub fn load(&self, seed: u64) -> Result<TaskStream> {
        match self {
            Source::Synthetic(g) => Ok(generate_stream(&GeneratorConfig { seed, ..g.clone() })?.stream),
            Source::Ingested(dir) => ingest_feature_bags(dir),
        }
    }
}

/// Optional overrides of the per-method defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub zeta: Option<f64>,
    pub replay_count: Option<usize>,
    pub buffer_capacity: Option<usize>,
    pub alpha_s: Option<f64>,
    pub use_moe: Option<bool>,
    pub n_experts: Option<usize>,
    pub k_top: Option<usize>,
    pub latent_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
}

impl TrainingOverrides {
    pub fn method_config(&self, method: Method, seed: u64) -> MethodConfig {
        let mut c = MethodConfig::new(method);
        c.seed = seed;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            epochs => c.epochs,
            lr => c.optimizer.lr,
            weight_decay => c.optimizer.weight_decay,
            alpha => c.loss.alpha,
            beta => c.loss.beta,
            zeta => c.loss.zeta,
            replay_count => c.loss.replay_count,
            buffer_capacity => c.buffer_capacity,
            alpha_s => c.surv.alpha_s,
            use_moe => c.model.use_moe,
            n_experts => c.model.n_experts,
            k_top => c.model.k_top,
            latent_dim => c.model.latent_dim,
            hidden_dim => c.model.hidden_dim,
        );
        c
    }
}

fn default_n_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub synthetic: Option<GeneratorConfig>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_n_folds")]
    pub n_folds: usize,
    /// Which fold of each task serves as validation.
    #[serde(default)]
    pub fold: usize,
    #[serde(default)]
    pub training: TrainingOverrides,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; a relative `data_dir` resolves against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(d), Some(base)) = (&c.data_dir, path.parent()) {
            if d.is_relative() {
                c.data_dir = Some(base.join(d));
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one method and one seed".into()));
        }
        if self.synthetic.is_some() == self.data_dir.is_some() {
            return Err(Error::Config("give exactly one of `synthetic` and `data_dir`".into()));
        }
        if let Some(g) = &self.synthetic {
            g.validate()?;
        }
        if self.n_folds < 2 || self.fold >= self.n_folds {
            return Err(Error::Config(format!("fold {} of {} is invalid", self.fold, self.n_folds)));
        }
        for &m in &self.methods {
            self.training.method_config(m, 0).validate()?;
        }
        Ok(())
    }

    pub fn source(&self) -> Source {
        match (&self.synthetic, &self.data_dir) {
            (Some(g), _) => Source::Synthetic(g.clone()),
            (None, Some(d)) => Source::Ingested(d.clone()),
            (None, None) => unreachable!("validated"),
        }
    }

    /// The configured directory unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Validation fold `fold` of every task, each task split with its own sub-seed.
pub fn task_folds(stream: &TaskStream, n_folds: usize, fold: usize, seed: u64) -> Result<Vec<Fold>> {
    stream
        .tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut f = split_folds(t, n_folds, sub_seed(seed, STREAM_FOLDS, k as u64))?;
            if fold >= f.len() {
                return Err(Error::Config(format!("fold {fold} of {n_folds} is invalid")));
            }
            Ok(f.swap_remove(fold))
        })
        .collect()
}

/// A trained model plus what is needed to rebuild its data and splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: Method,
    pub seed: u64,
    pub source: Source,
    pub n_folds: usize,
    pub fold: usize,
    pub model: SurvivalModel,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::FileField {
            path: path.to_path_buf(),
            field: "checkpoint".into(),
            detail: e.to_string(),
        })
    }

    pub fn stream(&self) -> Result<TaskStream> {
        self.source.load(self.seed)
    }

    pub fn folds(&self, stream: &TaskStream) -> Result<Vec<Fold>> {
        task_folds(stream, self.n_folds, self.fold, self.seed)
    }
}

pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.as_str()).join(format!("seed_{seed}"))
}

#[derive(Debug)]
pub struct RunFailure {
    pub method: Method,
    pub seed: u64,
    pub error: Error,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub runs: Vec<RunMetrics>,
    pub aggregate: Aggregate,
    pub failures: Vec<RunFailure>,
}

/// Runs one (method, seed) pair and writes its report files.
pub fn run_one(cfg: &ExperimentConfig, method: Method, seed: u64, out: &Path) -> Result<RunMetrics> {
    let source = cfg.source();
    let stream = source.load(seed)?;
    let folds = task_folds(&stream, cfg.n_folds, cfg.fold, seed)?;
    let mc = cfg.training.method_config(method, seed);
    let run = run_sequence(&mc, &stream, &folds)?;
    let metrics = RunMetrics::new(method.as_str(), seed, &run.c_index, &run.c_index_ipcw)?;
    let dir = run_dir(out, method, seed);
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_text(&dir.join("performance_c_index.csv"), &matrix_csv(&run.c_index))?;
    write_text(&dir.join("performance_c_index_ipcw.csv"), &matrix_csv(&run.c_index_ipcw))?;
    write_text(&dir.join("routing.csv"), &routing_csv(&run.routing))?;
    write_text(&dir.join("training_curve.csv"), &curve_csv(&run.curve))?;
    for (k, (task, fold)) in stream.tasks.iter().zip(&folds).enumerate() {
        emit_km_csv(&run.model, task, &fold.val, k, &dir.join(format!("km_task_{k}.csv")))?;
    }
    if let Some(buf) = &run.buffer {
        buf.save(&dir.join("buffer.bin"))?;
    }
    Checkpoint {
        method,
        seed,
        source,
        n_folds: cfg.n_folds,
        fold: cfg.fold,
        model: run.model,
    }
    .save(&dir.join("checkpoint.json"))?;
    Ok(metrics)
}

/// Runs every (method, seed) pair in order. A failing pair is recorded and
/// the rest still run; the aggregate covers the successful pairs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            match run_one(cfg, method, seed, &out) {
                Ok(m) => runs.push(m),
                Err(error) => failures.push(RunFailure { method, seed, error }),
            }
        }
    }
    let agg = aggregate(&runs);
    write_json(&out.join("aggregate.json"), &agg)?;
    write_text(&out.join("aggregate.csv"), &aggregate_csv(&agg))?;
    Ok(ExperimentReport {
        output_dir: out,
        runs,
        aggregate: agg,
        failures,
    })
}
