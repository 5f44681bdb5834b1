//! Losses between an actual explanation (ground-truth radius/answer series)
//! and the model's approximation on the same radius grid, plus batch
//! evaluation and report export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{radius_grid, AggregateKind, AqAnswer, Dataset};
use crate::error::{Error, Result};
use crate::explainer::build_explanation;
use crate::geometry::Query;
use crate::model::ExplanationModel;

/// Why a metric has no value for a pair of curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degenerate {
    /// The actual series is constant.
    UndefinedConstant,
    /// One of the slope vectors is all zeros.
    UndefinedFlat,
    /// Fewer than two usable grid points.
    TooFewPoints,
}

pub type MetricValue = std::result::Result<f64, Degenerate>;

/// Actual and predicted answers on a shared radius grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePair {
    pub thetas: Vec<f64>,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl CurvePair {
    pub fn new(thetas: Vec<f64>, actual: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        if thetas.len() != actual.len() || actual.len() != predicted.len() {
            return Err(Error::usage("curve pair series differ in length"));
        }
        Ok(CurvePair {
            thetas,
            actual,
            predicted,
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    fn mean_actual(&self) -> f64 {
        neumaier_sum(self.actual.iter().copied()) / self.len() as f64
    }

    fn actual_is_constant(&self) -> bool {
        self.actual.windows(2).all(|w| w[0] == w[1])
    }
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn guard(pair: &CurvePair) -> std::result::Result<(), Degenerate> {
    if pair.len() < 2 {
        return Err(Degenerate::TooFewPoints);
    }
    if pair.actual_is_constant() {
        return Err(Degenerate::UndefinedConstant);
    }
    Ok(())
}

/// Coefficient of determination `1 - SSE / SST`.
pub fn r2(pair: &CurvePair) -> MetricValue {
    guard(pair)?;
    let mean = pair.mean_actual();
    let sse = neumaier_sum(pair.actual.iter().zip(&pair.predicted).map(|(y, p)| (y - p).powi(2)));
    let sst = neumaier_sum(pair.actual.iter().map(|y| (y - mean).powi(2)));
    Ok(1.0 - sse / sst)
}

/// Absolute-deviation variant `1 - sum|y - y_hat| / sum|y - mean|`.
pub fn alt_r2(pair: &CurvePair) -> MetricValue {
    guard(pair)?;
    let mean = pair.mean_actual();
    let sae = neumaier_sum(pair.actual.iter().zip(&pair.predicted).map(|(y, p)| (y - p).abs()));
    let sad = neumaier_sum(pair.actual.iter().map(|y| (y - mean).abs()));
    Ok(1.0 - sae / sad)
}

/// KL divergence in bits between smoothed histograms of the actual and
/// predicted answers over shared equal-width bins.
pub fn kl(pair: &CurvePair, bins: usize, smoothing: f64) -> MetricValue {
    if pair.len() < 2 || bins < 2 {
        return Err(Degenerate::TooFewPoints);
    }
    let (lo, hi) = pair
        .actual
        .iter()
        .chain(&pair.predicted)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let histogram = |values: &[f64]| -> Vec<f64> {
        let mut counts = vec![0.0; bins];
        for &v in values {
            let i = if hi > lo {
                (((v - lo) / (hi - lo)) * bins as f64).floor() as usize
            } else {
                0
            };
            counts[i.min(bins - 1)] += 1.0;
        }
        let total = values.len() as f64 + smoothing * bins as f64;
        counts.into_iter().map(|c| (c + smoothing) / total).collect()
    };
    let p = histogram(&pair.actual);
    let q = histogram(&pair.predicted);
    let d = neumaier_sum(
        p.iter()
            .zip(&q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi).log2()),
    );
    Ok(d.max(0.0))
}

fn slopes(thetas: &[f64], ys: &[f64]) -> Vec<f64> {
    thetas
        .windows(2)
        .zip(ys.windows(2))
        .map(|(t, y)| (y[1] - y[0]) / (t[1] - t[0]))
        .collect()
}

/// Cosine similarity of the finite-difference slope vectors. The matching
/// loss is `1 - similarity`.
pub fn cosine_similarity(pair: &CurvePair) -> MetricValue {
    if pair.len() < 2 {
        return Err(Degenerate::TooFewPoints);
    }
    let a = slopes(&pair.thetas, &pair.actual);
    let b = slopes(&pair.thetas, &pair.predicted);
    let dot = neumaier_sum(a.iter().zip(&b).map(|(x, y)| x * y));
    let na = neumaier_sum(a.iter().map(|x| x * x)).sqrt();
    let nb = neumaier_sum(b.iter().map(|x| x * x)).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Degenerate::UndefinedFlat);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Root-mean-squared error over the range of the actual series. With
/// `paper_literal` the square root is omitted.
pub fn nrmse(pair: &CurvePair, paper_literal: bool) -> MetricValue {
    guard(pair)?;
    let (lo, hi) = pair
        .actual
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mse = neumaier_sum(pair.actual.iter().zip(&pair.predicted).map(|(y, p)| (y - p).powi(2)))
        / pair.len() as f64;
    let num = if paper_literal { mse } else { mse.sqrt() };
    Ok(num / (hi - lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_subradii: usize,
    pub theta_min: f64,
    pub kl_bins: usize,
    pub kl_smoothing: f64,
    pub paper_literal_nrmse: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_subradii: crate::dataset::DEFAULT_N_SUBRADII,
            theta_min: crate::dataset::DEFAULT_THETA_MIN,
            kl_bins: 10,
            kl_smoothing: 1.0,
            paper_literal_nrmse: false,
        }
    }
}

pub const METRIC_NAMES: [&str; 5] = ["r2", "alt_r2", "kl", "cosine", "nrmse"];

/// Metric values for one evaluation query; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: usize,
    pub theta: f64,
    pub r2: Option<f64>,
    pub alt_r2: Option<f64>,
    pub kl: Option<f64>,
    pub cosine: Option<f64>,
    pub nrmse: Option<f64>,
    /// Grid points dropped because the actual answer was undefined.
    pub undefined_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "r2" => self.r2,
            "alt_r2" => self.alt_r2,
            "kl" => self.kl,
            "cosine" => self.cosine,
            "nrmse" => self.nrmse,
            _ => None,
        }
    }

    fn failed(query: usize, theta: f64, error: String) -> Self {
        QueryMetrics {
            query,
            theta,
            r2: None,
            alt_r2: None,
            kl: None,
            cosine: None,
            nrmse: None,
            undefined_points: 0,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let (mean, std) = if n == 0 {
            (None, None)
        } else {
            let mean = neumaier_sum(defined.iter().copied()) / n as f64;
            let var = if n > 1 {
                neumaier_sum(defined.iter().map(|v| (v - mean).powi(2))) / (n - 1) as f64
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()))
        };
        MetricSummary {
            mean,
            std,
            defined: n,
            undefined: values.len() - n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub workload: String,
    pub aggregate: AggregateKind,
    pub model_version: u64,
    pub options: EvalOptions,
    pub queries: Vec<QueryMetrics>,
    pub summary: BTreeMap<String, MetricSummary>,
    pub undefined_points: usize,
    pub total_points: usize,
}

impl EvaluationReport {
    pub fn new(
        workload: impl Into<String>,
        aggregate: AggregateKind,
        model_version: u64,
        options: EvalOptions,
        queries: Vec<QueryMetrics>,
        total_points: usize,
    ) -> Self {
        let summary = METRIC_NAMES
            .iter()
            .map(|&m| {
                let vals: Vec<Option<f64>> = queries.iter().map(|q| q.get(m)).collect();
                (m.to_string(), MetricSummary::from_values(&vals))
            })
            .collect();
        let undefined_points = queries.iter().map(|q| q.undefined_points).sum();
        EvaluationReport {
            workload: workload.into(),
            aggregate,
            model_version,
            options,
            queries,
            summary,
            undefined_points,
            total_points,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).and_then(|s| s.mean)
    }

    /// Share of queries whose metric was undefined.
    pub fn undefined_fraction(&self, metric: &str) -> f64 {
        match self.summary.get(metric) {
            Some(s) if s.defined + s.undefined > 0 => s.undefined as f64 / (s.defined + s.undefined) as f64,
            _ => 0.0,
        }
    }

    /// One line `key=value` summary.
    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mut parts = vec![
            format!("workload={}", self.workload),
            format!("aggregate={}", self.aggregate),
            format!("queries={}", self.queries.len()),
        ];
        for m in METRIC_NAMES {
            parts.push(format!("mean_{m}={}", fmt(self.mean(m))));
        }
        parts.push(format!("undefined_points={}", self.undefined_points));
        parts.join(" ")
    }

    /// CSV with one row per query per metric.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["workload", "aggregate", "query", "theta", "metric", "value", "undefined_points"])?;
        for q in &self.queries {
            for m in METRIC_NAMES {
                out.write_record([
                    self.workload.clone(),
                    self.aggregate.to_string(),
                    q.query.to_string(),
                    q.theta.to_string(),
                    m.to_string(),
                    q.get(m).map_or(String::new(), |v| v.to_string()),
                    q.undefined_points.to_string(),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io("<report csv>", e))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Compare ground truth against the model for every evaluation query.
/// Per-query failures are recorded in the report instead of aborting.
pub fn evaluate(
    model: &ExplanationModel,
    eval: &[Query],
    dataset: &Dataset,
    kind: AggregateKind,
    workload: &str,
    opts: &EvalOptions,
) -> EvaluationReport {
    let mut rows = Vec::with_capacity(eval.len());
    let mut total_points = 0;
    for (i, q) in eval.iter().enumerate() {
        match evaluate_query(model, q, dataset, kind, opts) {
            Ok((row, points)) => {
                total_points += points;
                rows.push(QueryMetrics { query: i, ..row });
            }
            Err(e) => rows.push(QueryMetrics::failed(i, q.theta, e.to_string())),
        }
    }
    EvaluationReport::new(workload, kind, model.version, *opts, rows, total_points)
}

fn evaluate_query(
    model: &ExplanationModel,
    q: &Query,
    dataset: &Dataset,
    kind: AggregateKind,
    opts: &EvalOptions,
) -> Result<(QueryMetrics, usize)> {
    let actual = dataset.actual_explanation(q, kind, opts.n_subradii, opts.theta_min)?;
    let expl = build_explanation(model, q.center.coords())?;
    let mut thetas = Vec::with_capacity(actual.len());
    let mut ys = Vec::with_capacity(actual.len());
    let mut undefined = 0;
    for (t, a) in &actual {
        match a {
            AqAnswer::Value(y) => {
                thetas.push(*t);
                ys.push(*y);
            }
            AqAnswer::EmptySubspace => undefined += 1,
        }
    }
    let predicted: Vec<f64> = thetas.iter().map(|&t| expl.value(t)).collect();
    let pair = CurvePair::new(thetas, ys, predicted)?;
    Ok((
        QueryMetrics {
            query: 0,
            theta: q.theta,
            r2: r2(&pair).ok(),
            alt_r2: alt_r2(&pair).ok(),
            kl: kl(&pair, opts.kl_bins, opts.kl_smoothing).ok(),
            cosine: cosine_similarity(&pair).ok(),
            nrmse: nrmse(&pair, opts.paper_literal_nrmse).ok(),
            undefined_points: undefined,
            error: None,
        },
        actual.len(),
    ))
}

/// Radius grid used for a query during evaluation.
pub fn evaluation_grid(q: &Query, opts: &EvalOptions) -> Vec<f64> {
    radius_grid(opts.theta_min, q.theta, opts.n_subradii)
}
