//! Retrieval metrics and reports.
//!
//! Per-query values are computed independently and averaged over query ids
//! in sorted order, so a report never depends on the order rankings arrive
//! in. Queries whose reasoning failed are excluded from every mean and
//! counted separately.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::query_model::{BenchmarkKind, DatasetSplit};
use crate::scoring::Ranking;

pub const REPORT_FORMAT: &str = "cotmr-report-v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("k = {k} is outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("query {query_id}: subset member {image_id} is not in the ranking")]
    SubsetNotInGallery { query_id: String, image_id: String },
    #[error("no ranking for query {query_id}")]
    MissingRanking { query_id: String },
    #[error("query {query_id} has no subset but the plan needs one")]
    MissingSubset { query_id: String },
    #[error("ranking for {query_id} does not belong to the split")]
    UnknownQuery { query_id: String },
    #[error("query has no targets")]
    NoTargets,
}

fn check_k(k: usize, n: usize) -> Result<(), EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::KOutOfRange { k, n });
    }
    Ok(())
}

/// 1 if any target is among the first `k` ids, else 0.
pub fn recall_indicator(ranked: &[&str], targets: &[String], k: usize) -> Result<f64, EvalError> {
    check_k(k, ranked.len())?;
    let hit = ranked[..k].iter().any(|id| targets.iter().any(|t| t == id));
    Ok(if hit { 1.0 } else { 0.0 })
}

pub fn query_recall(ranking: &Ranking, targets: &[String], k: usize) -> Result<f64, EvalError> {
    let ids: Vec<&str> = ranking.ids().collect();
    recall_indicator(&ids, targets, k)
}

/// Recall@k within the subset: the ranking restricted to subset members,
/// in their full-ranking order.
pub fn query_recall_subset(
    ranking: &Ranking,
    subset: &[String],
    targets: &[String],
    k: usize,
) -> Result<f64, EvalError> {
    let members: HashSet<&str> = subset.iter().map(String::as_str).collect();
    let restricted: Vec<&str> = ranking.ids().filter(|id| members.contains(id)).collect();
    if restricted.len() != members.len() {
        let present: HashSet<&str> = restricted.iter().copied().collect();
        let missing = subset.iter().find(|s| !present.contains(s.as_str())).expect("one is missing");
        return Err(EvalError::SubsetNotInGallery {
            query_id: ranking.query_id.clone(),
            image_id: missing.clone(),
        });
    }
    recall_indicator(&restricted, targets, k)
}

/// AP@k normalized by `min(k, |targets|)`.
pub fn query_average_precision(ranking: &Ranking, targets: &[String], k: usize) -> Result<f64, EvalError> {
    if targets.is_empty() {
        return Err(EvalError::NoTargets);
    }
    check_k(k, ranking.entries.len())?;
    let targets: HashSet<&str> = targets.iter().map(String::as_str).collect();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.ids().take(k).enumerate() {
        if targets.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(targets.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Recall(usize),
    RecallSubset(usize),
    MeanAp(usize),
}

impl Metric {
    pub fn k(self) -> usize {
        match self {
            Metric::Recall(k) | Metric::RecallSubset(k) | Metric::MeanAp(k) => k,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Recall(k) => write!(f, "R@{k}"),
            Metric::RecallSubset(k) => write!(f, "Rsub@{k}"),
            Metric::MeanAp(k) => write!(f, "mAP@{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregate {
    /// Mean of R@10 and R@50.
    RMean,
    /// Mean of R@5 and Rsub@1.
    Avg,
}

impl Aggregate {
    pub fn name(self) -> &'static str {
        match self {
            Aggregate::RMean => "R_mean",
            Aggregate::Avg => "Avg",
        }
    }

    fn inputs(self) -> [Metric; 2] {
        match self {
            Aggregate::RMean => [Metric::Recall(10), Metric::Recall(50)],
            Aggregate::Avg => [Metric::Recall(5), Metric::RecallSubset(1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricPlan {
    pub name: String,
    pub metrics: Vec<Metric>,
    pub aggregates: Vec<Aggregate>,
}

impl MetricPlan {
    pub fn fashioniq() -> Self {
        Self {
            name: "fashioniq".into(),
            metrics: vec![Metric::Recall(10), Metric::Recall(50)],
            aggregates: vec![Aggregate::RMean],
        }
    }

    pub fn cirr() -> Self {
        let mut metrics: Vec<Metric> = [1, 5, 10, 50].into_iter().map(Metric::Recall).collect();
        metrics.extend([1, 2, 3].into_iter().map(Metric::RecallSubset));
        Self { name: "cirr".into(), metrics, aggregates: vec![Aggregate::Avg] }
    }

    pub fn circo() -> Self {
        Self {
            name: "circo".into(),
            metrics: [5, 10, 25, 50].into_iter().map(Metric::MeanAp).collect(),
            aggregates: vec![],
        }
    }

    /// Small-gallery plan for synthetic splits; every k fits a gallery of 6.
    pub fn synthetic() -> Self {
        let mut metrics = vec![Metric::Recall(1), Metric::Recall(5)];
        metrics.extend([1, 2, 3].into_iter().map(Metric::RecallSubset));
        metrics.push(Metric::MeanAp(5));
        Self { name: "synthetic".into(), metrics, aggregates: vec![Aggregate::Avg] }
    }

    pub fn for_kind(kind: BenchmarkKind) -> Self {
        match kind {
            BenchmarkKind::FashionIq => Self::fashioniq(),
            BenchmarkKind::Cirr => Self::cirr(),
            BenchmarkKind::Circo => Self::circo(),
            BenchmarkKind::Synthetic => Self::synthetic(),
        }
    }

    pub fn k_values(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.metrics.iter().map(|m| m.k()).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    fn value_of(metrics: &BTreeMap<String, f64>, m: Metric) -> Option<f64> {
        metrics.get(&m.to_string()).copied()
    }
}

impl FromStr for MetricPlan {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind: BenchmarkKind = s.parse()?;
        Ok(Self::for_kind(kind))
    }
}

/// The effective settings behind an artifact, with a stable hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub hash: String,
    pub fields: BTreeMap<String, String>,
}

impl Fingerprint {
    pub fn new(fields: BTreeMap<String, String>) -> Self {
        let canonical = serde_json::to_string(&fields).expect("string map serializes");
        let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
        Self { hash, fields }
    }

    /// First 12 hex digits, for display.
    pub fn short(&self) -> &str {
        &self.hash[..12.min(self.hash.len())]
    }
}

/// Renders a [0,1] value as a percentage with two decimals.
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub split: String,
    pub benchmark: BenchmarkKind,
    pub plan: String,
    pub k_values: Vec<usize>,
    /// Metric name to value in [0,1].
    pub metrics: BTreeMap<String, f64>,
    pub aggregates: BTreeMap<String, f64>,
    /// Metrics and aggregates scaled by 100, two decimals.
    pub display: BTreeMap<String, String>,
    pub n_total: usize,
    pub n_evaluated: usize,
    pub n_failed: usize,
    pub failed_queries: Vec<String>,
    /// Mean 1-based rank of each query's best-placed target.
    pub mean_target_rank: Option<f64>,
    pub fingerprint: Fingerprint,
}

impl EvalReport {
    /// Column order for tables: plan metrics, then aggregates.
    pub fn columns(&self, plan: &MetricPlan) -> Vec<String> {
        plan.metrics
            .iter()
            .map(|m| m.to_string())
            .chain(plan.aggregates.iter().map(|a| a.name().to_string()))
            .collect()
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).or_else(|| self.aggregates.get(name)).copied()
    }

    /// A two-row text table of percentages.
    pub fn render_table(&self, plan: &MetricPlan) -> String {
        let cols = self.columns(plan);
        let cells: Vec<String> = cols
            .iter()
            .map(|c| self.display.get(c).cloned().unwrap_or_else(|| "-".into()))
            .collect();
        let widths: Vec<usize> = cols.iter().zip(&cells).map(|(c, v)| c.len().max(v.len())).collect();
        let row = |items: &[String]| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        format!(
            "{}\n{}\n{}\n",
            row(&cols),
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"),
            row(&cells)
        )
    }
}

/// Evaluates rankings against a split. Every split query needs a ranking
/// unless it is listed in `failed`.
pub fn evaluate_split(
    rankings: &[Ranking],
    split: &DatasetSplit,
    plan: &MetricPlan,
    failed: &[String],
    fingerprint: Fingerprint,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &Ranking> = rankings.iter().map(|r| (r.query_id.as_str(), r)).collect();
    for r in rankings {
        if split.query(&r.query_id).is_none() {
            return Err(EvalError::UnknownQuery { query_id: r.query_id.clone() });
        }
    }
    let failed_set: HashSet<&str> = failed.iter().map(String::as_str).collect();
    let mut evaluated = Vec::new();
    let mut failed_queries = Vec::new();
    for q in &split.queries {
        if failed_set.contains(q.query_id.as_str()) {
            failed_queries.push(q.query_id.clone());
            continue;
        }
        let r = by_id.get(q.query_id.as_str()).ok_or_else(|| EvalError::MissingRanking {
            query_id: q.query_id.clone(),
        })?;
        evaluated.push((q, *r));
    }
    evaluated.sort_by(|a, b| a.0.query_id.cmp(&b.0.query_id));
    failed_queries.sort();

    let n = evaluated.len();
    let mut metrics = BTreeMap::new();
    for &m in &plan.metrics {
        let mut sum = 0.0;
        for (q, r) in &evaluated {
            sum += match m {
                Metric::Recall(k) => query_recall(r, &q.targets, k)?,
                Metric::RecallSubset(k) => {
                    let subset = q.subset.as_ref().ok_or_else(|| EvalError::MissingSubset {
                        query_id: q.query_id.clone(),
                    })?;
                    query_recall_subset(r, subset, &q.targets, k)?
                }
                Metric::MeanAp(k) => query_average_precision(r, &q.targets, k)?,
            };
        }
        metrics.insert(m.to_string(), if n == 0 { 0.0 } else { sum / n as f64 });
    }
    let mut aggregates = BTreeMap::new();
    for &a in &plan.aggregates {
        let [x, y] = a.inputs();
        if let (Some(x), Some(y)) = (MetricPlan::value_of(&metrics, x), MetricPlan::value_of(&metrics, y)) {
            aggregates.insert(a.name().to_string(), (x + y) / 2.0);
        }
    }
    let display = metrics
        .iter()
        .chain(aggregates.iter())
        .map(|(k, v)| (k.clone(), percent(*v)))
        .collect();
    let mut rank_sum = 0.0;
    let mut ranked = 0usize;
    for (q, r) in &evaluated {
        if let Some(best) = q.targets.iter().filter_map(|t| r.rank_of(t)).min() {
            rank_sum += best as f64;
            ranked += 1;
        }
    }
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        split: split.name.clone(),
        benchmark: split.benchmark_kind,
        plan: plan.name.clone(),
        k_values: plan.k_values(),
        metrics,
        aggregates,
        display,
        n_total: split.queries.len(),
        n_evaluated: n,
        n_failed: failed_queries.len(),
        failed_queries,
        mean_target_rank: (ranked > 0).then(|| rank_sum / ranked as f64),
        fingerprint,
    })
}
