//! Discrete-time survival machinery and evaluation statistics.
//!
//! Times are partitioned into `n_bins` right-open intervals whose boundaries
//! come from percentiles of the uncensored times. Models emit one conditional
//! hazard per bin; the survival curve is the running product of `1 - h`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Hazards are clamped into `[HAZARD_EPS, 1 - HAZARD_EPS]` before logs.
pub const HAZARD_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    n_bins: usize,
    /// Left endpoints of bins 1..n_bins; bin 0 extends to -inf, the last bin
    /// to +inf.
    boundaries: Vec<f64>,
}

impl BinSpec {
    pub fn new(n_bins: usize, boundaries: Vec<f64>) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Contract(format!("need at least 2 bins, got {n_bins}")));
        }
        if boundaries.len() != n_bins - 1 {
            return Err(Error::Contract(format!(
                "{n_bins} bins need {} boundaries, got {}",
                n_bins - 1,
                boundaries.len()
            )));
        }
        if boundaries.iter().any(|b| !b.is_finite()) || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "bin boundaries must be finite and strictly increasing: {boundaries:?}"
            )));
        }
        Ok(BinSpec { n_bins, boundaries })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Bin index of `t`. Boundaries belong to the higher bin.
    pub fn assign(&self, t: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= t)
    }
}

/// Percentile of sorted data by linear interpolation between order statistics.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Bin boundaries at the `100·i/n_bins` percentiles of the uncensored times.
pub fn compute_bins(times: &[f64], censored: &[bool], n_bins: usize) -> Result<BinSpec> {
    if times.len() != censored.len() {
        return Err(Error::Shape(format!(
            "{} times but {} censor flags",
            times.len(),
            censored.len()
        )));
    }
    let mut events: Vec<f64> = times
        .iter()
        .zip(censored)
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .collect();
    events.sort_by(f64::total_cmp);
    let mut distinct = events.clone();
    distinct.dedup();
    if distinct.len() < n_bins {
        return Err(Error::InsufficientEvents {
            needed: n_bins,
            found: distinct.len(),
        });
    }
    let boundaries = (1..n_bins)
        .map(|i| percentile_sorted(&events, i as f64 / n_bins as f64))
        .collect();
    BinSpec::new(n_bins, boundaries)
}

pub fn assign_bin(t: f64, spec: &BinSpec) -> usize {
    spec.assign(t)
}

/// `S[r] = Π_{u ≤ r} (1 − h[u])`.
pub fn hazards_to_survival(hazards: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = hazards.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::Contract(format!("hazard {bad} outside [0, 1]")));
    }
    let mut s = 1.0;
    Ok(hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvLossConfig {
    /// Down-weights the censored term; 0 keeps the full censored likelihood.
    pub alpha_s: f64,
}

impl Default for SurvLossConfig {
    fn default() -> Self {
        SurvLossConfig { alpha_s: 0.0 }
    }
}

impl SurvLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_s) {
            return Err(Error::Config(format!("alpha_s {} outside [0, 1]", self.alpha_s)));
        }
        Ok(())
    }
}

/// Censored negative log-likelihood of one case.
pub fn nll_survival_loss(hazards: &[f64], label: usize, censored: bool, cfg: SurvLossConfig) -> Result<f64> {
    if label >= hazards.len() {
        return Err(Error::Label {
            label,
            n_bins: hazards.len(),
        });
    }
    let h: Vec<f64> = hazards
        .iter()
        .map(|h| h.clamp(HAZARD_EPS, 1.0 - HAZARD_EPS))
        .collect();
    let log_surv = |upto: usize| h[..upto].iter().map(|h| (1.0 - h).ln()).sum::<f64>();
    Ok(if censored {
        -(1.0 - cfg.alpha_s) * log_surv(label + 1)
    } else {
        -(log_surv(label) + h[label].ln())
    })
}

/// Graph form of [`nll_survival_loss`]; `hazards` is a 1×n_bins node.
pub fn nll_survival_loss_graph(
    g: &mut Graph,
    hazards: Var,
    label: usize,
    censored: bool,
    cfg: SurvLossConfig,
) -> Result<Var> {
    let (_, n_bins) = g.dims(hazards);
    if label >= n_bins {
        return Err(Error::Label { label, n_bins });
    }
    let h = g.clamp(hazards, HAZARD_EPS, 1.0 - HAZARD_EPS)?;
    let one_minus = g.one_minus(h)?;
    let log_one_minus = g.log(one_minus)?;
    if censored {
        let upto = g.slice_cols(log_one_minus, 0, label + 1)?;
        let s = g.sum(upto)?;
        g.scale(s, -(1.0 - cfg.alpha_s))
    } else {
        let log_h = g.log(h)?;
        let at = g.slice_cols(log_h, label, label + 1)?;
        let total = if label > 0 {
            let before = g.slice_cols(log_one_minus, 0, label)?;
            let s = g.sum(before)?;
            g.add(s, at)?
        } else {
            at
        };
        g.scale(total, -1.0)
    }
}

/// Scalar risk: negative sum of the survival curve. Higher means shorter
/// expected survival.
pub fn risk_score(hazards: &[f64]) -> Result<f64> {
    Ok(-hazards_to_survival(hazards)?.iter().sum::<f64>())
}

fn check_lengths(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<()> {
    if risks.len() != times.len() || times.len() != censored.len() {
        return Err(Error::Shape(format!(
            "lengths differ: {} risks, {} times, {} censor flags",
            risks.len(),
            times.len(),
            censored.len()
        )));
    }
    Ok(())
}

/// Harrell's concordance index. A pair is comparable when the shorter time is
/// an observed event; equal times are never comparable and tied risks count
/// one half.
pub fn c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64> {
    check_lengths(risks, times, censored)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut concordant = 0.0;
    let mut comparable = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if censored[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if times[j] <= times[i] {
                continue;
            }
            comparable += 1.0;
            if risks[i] > risks[j] {
                concordant += 1.0;
            } else if risks[i] == risks[j] {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0.0 {
        return Err(Error::UndefinedMetric("no comparable pairs for C-index".into()));
    }
    Ok(concordant / comparable)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Product-limit step curve, one point per distinct event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub points: Vec<KmPoint>,
}

impl KmCurve {
    /// `Ŝ(t)`: right-continuous, equal to 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.points.partition_point(|p| p.time <= t);
        if k == 0 {
            1.0
        } else {
            self.points[k - 1].survival
        }
    }

    /// Left limit `Ŝ(t⁻)`.
    pub fn survival_before(&self, t: f64) -> f64 {
        let k = self.points.partition_point(|p| p.time < t);
        if k == 0 {
            1.0
        } else {
            self.points[k - 1].survival
        }
    }
}

/// Kaplan–Meier estimate; `events[i]` is true when case `i` died. Cases
/// censored at an event time stay in that time's risk set.
pub fn km_estimator(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::Contract("Kaplan–Meier needs at least one case".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Shape(format!(
            "{} times but {} event flags",
            times.len(),
            events.len()
        )));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut survival = 1.0;
    let mut points = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut end = k;
        let mut deaths = 0;
        while end < order.len() && times[order[end]] == t {
            deaths += events[order[end]] as usize;
            end += 1;
        }
        if deaths > 0 {
            survival *= 1.0 - deaths as f64 / at_risk as f64;
            points.push(KmPoint {
                time: t,
                survival,
                at_risk,
                events: deaths,
            });
        }
        at_risk -= end - k;
        k = end;
    }
    Ok(KmCurve { points })
}

/// Default IPCW truncation: the largest uncensored time.
pub fn default_tau(times: &[f64], censored: &[bool]) -> Option<f64> {
    times
        .iter()
        .zip(censored)
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .max_by(f64::total_cmp)
}

/// Uno's inverse-probability-of-censoring-weighted concordance. The censoring
/// distribution is the Kaplan–Meier estimate with censorings as events.
pub fn c_index_ipcw(risks: &[f64], times: &[f64], censored: &[bool], tau: f64) -> Result<f64> {
    check_lengths(risks, times, censored)?;
    let cens_km = km_estimator(times, censored)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut num = 0.0;
    let mut den = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if censored[i] || times[i] >= tau {
            continue;
        }
        let g = cens_km.survival_before(times[i]);
        let mut weight = None;
        for &j in &order[pos + 1..] {
            if times[j] <= times[i] {
                continue;
            }
            let w = match weight {
                Some(w) => w,
                None => {
                    if g <= 0.0 {
                        return Err(Error::DegenerateWeights(format!(
                            "censoring survival is zero before t = {}",
                            times[i]
                        )));
                    }
                    let w = 1.0 / (g * g);
                    weight = Some(w);
                    w
                }
            };
            den += w;
            if risks[i] > risks[j] {
                num += w;
            } else if risks[i] == risks[j] {
                num += 0.5 * w;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("no comparable pairs for IPCW C-index".into()));
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-group log-rank test with the hypergeometric variance.
pub fn log_rank_test(times_a: &[f64], events_a: &[bool], times_b: &[f64], events_b: &[bool]) -> Result<LogRank> {
    if times_a.is_empty() || times_b.is_empty() {
        return Err(Error::UndefinedTest("log-rank needs two nonempty groups".into()));
    }
    if times_a.len() != events_a.len() || times_b.len() != events_b.len() {
        return Err(Error::Shape("times and event flags differ in length".into()));
    }
    let mut event_times: Vec<f64> = times_a
        .iter()
        .zip(events_a)
        .chain(times_b.iter().zip(events_b))
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let count = |times: &[f64], events: &[bool], t: f64| {
        let mut at_risk = 0usize;
        let mut deaths = 0usize;
        for (&ti, &e) in times.iter().zip(events) {
            if ti >= t {
                at_risk += 1;
            }
            if ti == t && e {
                deaths += 1;
            }
        }
        (at_risk as f64, deaths as f64)
    };

    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for &t in &event_times {
        let (n_a, d_a) = count(times_a, events_a, t);
        let (n_b, d_b) = count(times_b, events_b, t);
        let n = n_a + n_b;
        let d = d_a + d_b;
        observed += d_a;
        expected += n_a * d / n;
        if n > 1.0 {
            variance += n_a * n_b * d * (n - d) / (n * n * (n - 1.0));
        }
    }
    if !(variance > 0.0) {
        return Err(Error::UndefinedTest("log-rank variance is zero".into()));
    }
    let chi2 = (observed - expected).powi(2) / variance;
    Ok(LogRank {
        chi2,
        p_value: chi2_sf(chi2, 1.0)?,
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (1.0 - sum * log_prefix.exp()).clamp(0.0, 1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (log_prefix.exp() * h).clamp(0.0, 1.0)
    }
}

/// Chi-square survival function `P(X > x)` with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("chi-square statistic {x} is negative")));
    }
    if !(df > 0.0) {
        return Err(Error::Domain(format!("degrees of freedom {df} must be positive")));
    }
    Ok(gamma_q(df / 2.0, x / 2.0))
}
