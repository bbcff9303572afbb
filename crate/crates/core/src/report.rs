//! CSV and JSON emission for run results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::harness::{predict_risks, EpochRecord, MetricSummary, PerformanceMatrix, RoutingRecord};
use crate::model::SurvivalModel;
use crate::survival::{km_estimator, log_rank_test, KmCurve, LogRank};

pub const SIGNIFICANCE: f64 = 0.05;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    write_text(path, &text)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header `row,task_0,…`; one line per matrix row, blanks for unfilled entries.
pub fn matrix_csv(r: &PerformanceMatrix) -> String {
    let mut s = String::from("row");
    for j in 0..r.k() {
        let _ = write!(s, ",task_{j}");
    }
    s.push('\n');
    for (l, row) in r.rows.iter().enumerate() {
        let _ = write!(s, "{l}");
        for &v in row {
            let _ = write!(s, ",{}", opt(v));
        }
        s.push('\n');
    }
    s
}

pub fn routing_csv(records: &[RoutingRecord]) -> String {
    let mut s = String::from("task_id,module_site,expert_idx,proportion\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.task, r.site.as_str(), r.expert, r.proportion);
    }
    s
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("task,epoch,train_loss,val_c_index\n");
    for e in curve {
        let task = e.task.map(|t| t.to_string()).unwrap_or_else(|| "joint".into());
        let _ = writeln!(s, "{task},{},{},{}", e.epoch, e.train_loss, e.val_c_index);
    }
    s
}

/// The four headline numbers for one metric; undefined ones are omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    #[serde(rename = "Average")]
    pub average: f64,
    #[serde(rename = "Forget", skip_serializing_if = "Option::is_none", default)]
    pub forget: Option<f64>,
    #[serde(rename = "BWT", skip_serializing_if = "Option::is_none", default)]
    pub bwt: Option<f64>,
    #[serde(rename = "FWT", skip_serializing_if = "Option::is_none", default)]
    pub fwt: Option<f64>,
    #[serde(rename = "Average_on_trained")]
    pub average_on_trained: Vec<Option<f64>>,
}

impl From<MetricSummary> for MetricBlock {
    fn from(s: MetricSummary) -> Self {
        MetricBlock {
            average: s.average,
            forget: s.forgetting,
            bwt: s.bwt,
            fwt: s.fwt,
            average_on_trained: s.average_on_trained,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub seed: u64,
    pub c_index: MetricBlock,
    pub c_index_ipcw: MetricBlock,
}

impl RunMetrics {
    pub fn new(method: &str, seed: u64, ci: &PerformanceMatrix, ipcw: &PerformanceMatrix) -> Result<Self> {
        Ok(RunMetrics {
            method: method.to_string(),
            seed,
            c_index: MetricSummary::from_matrix(ci)?.into(),
            c_index_ipcw: MetricSummary::from_matrix(ipcw)?.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent with a single value.
    pub std: Option<f64>,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Some(MeanStd { mean, std, n })
}

/// method → metric → measure → statistics across seeds.
pub type Aggregate = BTreeMap<String, BTreeMap<String, BTreeMap<String, MeanStd>>>;

pub fn aggregate(runs: &[RunMetrics]) -> Aggregate {
    let mut out = Aggregate::new();
    let mut methods: Vec<&str> = runs.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    for m in methods {
        let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == m).collect();
        let mut per_metric = BTreeMap::new();
        for (metric, pick) in [
            ("c_index", (|r: &RunMetrics| r.c_index.clone()) as fn(&RunMetrics) -> MetricBlock),
            ("c_index_ipcw", |r: &RunMetrics| r.c_index_ipcw.clone()),
        ] {
            let blocks: Vec<MetricBlock> = mine.iter().map(|r| pick(r)).collect();
            let mut measures = BTreeMap::new();
            let columns: [(&str, fn(&MetricBlock) -> Option<f64>); 4] = [
                ("Average", |b| Some(b.average)),
                ("Forget", |b| b.forget),
                ("BWT", |b| b.bwt),
                ("FWT", |b| b.fwt),
            ];
            for (name, get) in columns {
                let vals: Vec<f64> = blocks.iter().filter_map(get).collect();
                if let Some(ms) = mean_std(&vals) {
                    measures.insert(name.to_string(), ms);
                }
            }
            per_metric.insert(metric.to_string(), measures);
        }
        out.insert(m.to_string(), per_metric);
    }
    out
}

pub fn aggregate_csv(agg: &Aggregate) -> String {
    let mut s = String::from("method,metric,measure,mean,std,n\n");
    for (m, metrics) in agg {
        for (metric, measures) in metrics {
            for (name, ms) in measures {
                let _ = writeln!(s, "{m},{metric},{name},{},{},{}", ms.mean, opt(ms.std), ms.n);
            }
        }
    }
    s
}

/// Low- and high-risk groups split at the mean predicted risk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmSplit {
    pub threshold: f64,
    pub low: KmCurve,
    pub high: KmCurve,
    pub n_low: usize,
    pub n_high: usize,
    pub test: LogRank,
}

impl KmSplit {
    pub fn significant(&self) -> bool {
        self.test.p_value < SIGNIFICANCE
    }

    /// Header plus one line per distinct event time in each group.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,time,survival,n_at_risk,n_events,chi2,p_value,significant\n");
        for (name, curve) in [("low", &self.low), ("high", &self.high)] {
            for p in &curve.points {
                let _ = writeln!(
                    s,
                    "{name},{},{},{},{},{},{},{}",
                    p.time,
                    p.survival,
                    p.at_risk,
                    p.events,
                    self.test.chi2,
                    self.test.p_value,
                    self.significant()
                );
            }
        }
        s
    }
}

/// Cases with risk above the mean form the high-risk group.
pub fn km_split(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<KmSplit> {
    if risks.is_empty() || risks.len() != times.len() || times.len() != censored.len() {
        return Err(Error::Shape("risks, times and censor flags must be nonempty and aligned".into()));
    }
    let threshold = risks.iter().sum::<f64>() / risks.len() as f64;
    let mut groups: [(Vec<f64>, Vec<bool>); 2] = Default::default();
    for ((&r, &t), &c) in risks.iter().zip(times).zip(censored) {
        let g = &mut groups[(r > threshold) as usize];
        g.0.push(t);
        g.1.push(!c);
    }
    let [(tl, el), (th, eh)] = groups;
    if tl.is_empty() || th.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "all {} risks fall on one side of the mean {threshold}",
            risks.len()
        )));
    }
    Ok(KmSplit {
        threshold,
        low: km_estimator(&tl, &el)?,
        high: km_estimator(&th, &eh)?,
        n_low: tl.len(),
        n_high: th.len(),
        test: log_rank_test(&tl, &el, &th, &eh)?,
    })
}

/// Scores `idx` of `task` through `task_id`'s head, splits at the mean risk
/// and writes the two KM curves with the log-rank result.
pub fn emit_km_csv(model: &SurvivalModel, task: &TaskData, idx: &[usize], task_id: usize, out: &Path) -> Result<KmSplit> {
    if !model.has_task(task_id) {
        return Err(Error::MissingHead(task_id));
    }
    let risks = predict_risks(model, task, idx, task_id)?;
    let split = km_split(&risks, &task.times(idx), &task.censored(idx))?;
    write_text(out, &split.to_csv())?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_risks_are_degenerate() {
        let e = km_split(&[0.3; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], &[false; 5]).unwrap_err();
        assert!(matches!(e, Error::DegenerateSplit(_)));
    }

    #[test]
    fn csv_rows_follow_distinct_event_times() {
        let risks = [0.1, 0.2, 0.3, 0.9, 0.8, 0.7];
        let times = [5.0, 6.0, 6.0, 1.0, 2.0, 2.0];
        let cens = [false, false, true, false, false, false];
        let s = km_split(&risks, &times, &cens).unwrap();
        assert_eq!((s.n_low, s.n_high), (3, 3));
        // low: events at 5 and 6; high: events at 1 and 2
        assert_eq!(s.to_csv().lines().count(), 1 + 2 + 2);
    }

    #[test]
    fn two_point_statistics() {
        let ms = mean_std(&[0.6, 0.7]).unwrap();
        assert!((ms.mean - 0.65).abs() < 1e-15);
        assert!((ms.std.unwrap() - 0.1 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5]).unwrap().std, None);
        assert!(mean_std(&[]).is_none());
    }

    #[test]
    fn single_task_metrics_carry_average_only() {
        let r = PerformanceMatrix::from_rows("c_index", vec![vec![0.5], vec![0.6]]).unwrap();
        let m = RunMetrics::new("finetune", 0, &r, &r).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        let block = v["c_index"].as_object().unwrap();
        assert!(block.contains_key("Average"));
        for k in ["Forget", "BWT", "FWT"] {
            assert!(!block.contains_key(k));
        }
    }
}
