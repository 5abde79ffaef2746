//! Multi-grained scoring.
//!
//! Three similarity rows per query, fused as
//! `S = base + λ·pos − μ·neg` with each term switchable:
//!
//! - `base`: the target caption against the gallery.
//! - `pos`: existent objects, either joined into one string or averaged
//!   over per-object rows.
//! - `neg`: nonexistent objects, averaged by default.
//!
//! Rankings sort by fused score, descending, breaking exact ties by
//! ascending image id.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{similarity_row, EmbeddingError, GalleryIndex, TextEncoder};
use crate::reasoning::ReasoningOutput;

/// Joins existent objects in concat mode.
pub const CONCAT_SEPARATOR: &str = ", ";

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("score arrays differ in length: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Concat,
    Mean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Concat => "concat",
            Aggregation::Mean => "mean",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(Aggregation::Concat),
            "mean" => Ok(Aggregation::Mean),
            other => Err(format!("unknown aggregation '{other}' (expected concat or mean)")),
        }
    }
}

/// Which score terms take part in fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    pub base: bool,
    pub pos: bool,
    pub neg: bool,
}

impl Components {
    pub const ALL: Components = Components { base: true, pos: true, neg: true };

    pub fn any(self) -> bool {
        self.base || self.pos || self.neg
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [("base", self.base), ("pos", self.pos), ("neg", self.neg)]
            .into_iter()
            .filter_map(|(n, on)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Components {
    type Err = String;

    /// Parses a comma-separated subset of `base`, `pos`, `neg`, or `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut c = Components { base: false, pos: false, neg: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "base" => c.base = true,
                "pos" => c.pos = true,
                "neg" => c.neg = true,
                "all" => c = Components::ALL,
                other => return Err(format!("unknown score component '{other}'")),
            }
        }
        if !c.any() {
            return Err(format!("no score component in '{s}'"));
        }
        Ok(c)
    }
}

/// Component sets of the standard ablation rows, labelled A.1 to A.5.
pub const ABLATION_ROWS: [(&str, Components); 5] = [
    ("A.1", Components { base: true, pos: false, neg: false }),
    ("A.2", Components { base: false, pos: true, neg: true }),
    ("A.3", Components { base: true, pos: true, neg: false }),
    ("A.4", Components { base: true, pos: false, neg: true }),
    ("A.5", Components::ALL),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MgsConfig {
    pub lambda: f64,
    pub mu: f64,
    pub use_base: bool,
    pub use_pos: bool,
    pub use_neg: bool,
    pub eo_aggregation: Aggregation,
    pub neo_aggregation: Aggregation,
}

impl Default for MgsConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 0.5,
            use_base: true,
            use_pos: true,
            use_neg: true,
            eo_aggregation: Aggregation::Concat,
            neo_aggregation: Aggregation::Mean,
        }
    }
}

impl MgsConfig {
    pub fn with_weights(lambda: f64, mu: f64) -> Self {
        Self { lambda, mu, ..Self::default() }
    }

    pub fn components(&self) -> Components {
        Components { base: self.use_base, pos: self.use_pos, neg: self.use_neg }
    }

    pub fn with_components(mut self, c: Components) -> Self {
        self.use_base = c.base;
        self.use_pos = c.pos;
        self.use_neg = c.neg;
        self
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ScoreError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(ScoreError::InvalidConfig(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !self.components().any() {
            return Err(ScoreError::InvalidConfig("at least one score component must be enabled".into()));
        }
        Ok(())
    }
}

/// Per-candidate score terms for one query, aligned with gallery order.
/// Disabled terms hold zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub query_id: String,
    pub base: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub fused: Vec<f64>,
    pub config: MgsConfig,
}

fn mean_rows(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; n];
    }
    let mut out = vec![0.0; n];
    for row in rows {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    let len = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= len);
    out
}

fn row_for(text: &str, index: &GalleryIndex, encoder: &dyn TextEncoder) -> Result<Vec<f64>, ScoreError> {
    Ok(similarity_row(&encoder.encode_one(text)?, index)?)
}

fn object_rows(objects: &[String], index: &GalleryIndex, encoder: &dyn TextEncoder) -> Result<Vec<Vec<f64>>, ScoreError> {
    if objects.is_empty() {
        return Ok(Vec::new());
    }
    encoder
        .encode(objects)?
        .iter()
        .map(|v| Ok(similarity_row(v, index)?))
        .collect()
}

fn aggregate(
    objects: &[String],
    agg: Aggregation,
    index: &GalleryIndex,
    encoder: &dyn TextEncoder,
) -> Result<Vec<f64>, ScoreError> {
    if objects.is_empty() {
        return Ok(vec![0.0; index.len()]);
    }
    match agg {
        Aggregation::Concat => row_for(&objects.join(CONCAT_SEPARATOR), index, encoder),
        Aggregation::Mean => Ok(mean_rows(&object_rows(objects, index, encoder)?, index.len())),
    }
}

pub fn score_base(
    reasoning: &ReasoningOutput,
    index: &GalleryIndex,
    encoder: &dyn TextEncoder,
) -> Result<Vec<f64>, ScoreError> {
    row_for(&reasoning.target_caption, index, encoder)
}

pub fn score_pos(
    reasoning: &ReasoningOutput,
    index: &GalleryIndex,
    encoder: &dyn TextEncoder,
    agg: Aggregation,
) -> Result<Vec<f64>, ScoreError> {
    aggregate(&reasoning.existent_objects, agg, index, encoder)
}

pub fn score_neg(
    reasoning: &ReasoningOutput,
    index: &GalleryIndex,
    encoder: &dyn TextEncoder,
    agg: Aggregation,
) -> Result<Vec<f64>, ScoreError> {
    aggregate(&reasoning.nonexistent_objects, agg, index, encoder)
}

/// Combines the terms enabled in `config`; disabled terms are stored as
/// zeros whatever was passed in.
pub fn fuse(
    query_id: &str,
    base: &[f64],
    pos: &[f64],
    neg: &[f64],
    config: &MgsConfig,
) -> Result<ScoreBreakdown, ScoreError> {
    let n = base.len();
    for len in [pos.len(), neg.len()] {
        if len != n {
            return Err(ScoreError::LengthMismatch { expected: n, got: len });
        }
    }
    let keep = |on: bool, row: &[f64]| if on { row.to_vec() } else { vec![0.0; n] };
    let base = keep(config.use_base, base);
    let pos = keep(config.use_pos, pos);
    let neg = keep(config.use_neg, neg);
    let fused = (0..n)
        .map(|j| {
            let mut s = 0.0;
            if config.use_base {
                s += base[j];
            }
            if config.use_pos {
                s += config.lambda * pos[j];
            }
            if config.use_neg {
                s -= config.mu * neg[j];
            }
            s
        })
        .collect();
    Ok(ScoreBreakdown { query_id: query_id.to_string(), base, pos, neg, fused, config: *config })
}

/// Scores one query, computing only the enabled terms.
pub fn score_query(
    reasoning: &ReasoningOutput,
    index: &GalleryIndex,
    encoder: &dyn TextEncoder,
    config: &MgsConfig,
) -> Result<ScoreBreakdown, ScoreError> {
    config.validate()?;
    let zeros = || vec![0.0; index.len()];
    let base = if config.use_base { score_base(reasoning, index, encoder)? } else { zeros() };
    let pos = if config.use_pos {
        score_pos(reasoning, index, encoder, config.eo_aggregation)?
    } else {
        zeros()
    };
    let neg = if config.use_neg {
        score_neg(reasoning, index, encoder, config.neo_aggregation)?
    } else {
        zeros()
    };
    fuse(&reasoning.query_id, &base, &pos, &neg, config)
}

/// Every similarity row a query can need, so parameter sweeps fuse without
/// touching the encoder again.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRows {
    pub query_id: String,
    pub base: Vec<f64>,
    pub eo_concat: Vec<f64>,
    pub eo_mean: Vec<f64>,
    pub neo_concat: Vec<f64>,
    pub neo_mean: Vec<f64>,
}

impl QueryRows {
    pub fn compute(
        reasoning: &ReasoningOutput,
        index: &GalleryIndex,
        encoder: &dyn TextEncoder,
    ) -> Result<Self, ScoreError> {
        Ok(Self {
            query_id: reasoning.query_id.clone(),
            base: score_base(reasoning, index, encoder)?,
            eo_concat: score_pos(reasoning, index, encoder, Aggregation::Concat)?,
            eo_mean: score_pos(reasoning, index, encoder, Aggregation::Mean)?,
            neo_concat: score_neg(reasoning, index, encoder, Aggregation::Concat)?,
            neo_mean: score_neg(reasoning, index, encoder, Aggregation::Mean)?,
        })
    }

    pub fn fuse(&self, config: &MgsConfig) -> Result<ScoreBreakdown, ScoreError> {
        config.validate()?;
        let pos = match config.eo_aggregation {
            Aggregation::Concat => &self.eo_concat,
            Aggregation::Mean => &self.eo_mean,
        };
        let neg = match config.neo_aggregation {
            Aggregation::Concat => &self.neo_concat,
            Aggregation::Mean => &self.neo_mean,
        };
        fuse(&self.query_id, &self.base, pos, neg, config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    /// `(image_id, fused score)`, best first.
    pub entries: Vec<(String, f64)>,
}

impl Ranking {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// 1-based rank of `image_id`.
    pub fn rank_of(&self, image_id: &str) -> Option<usize> {
        self.ids().position(|id| id == image_id).map(|p| p + 1)
    }
}

/// Descending by score, then ascending by id. `total_cmp` keeps the order
/// total even for NaN.
pub fn compare_entries(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

pub fn rank(breakdown: &ScoreBreakdown, index: &GalleryIndex) -> Result<Ranking, ScoreError> {
    rank_scores(&breakdown.query_id, &breakdown.fused, &index.ids)
}

pub fn rank_scores(query_id: &str, scores: &[f64], ids: &[String]) -> Result<Ranking, ScoreError> {
    if scores.len() != ids.len() {
        return Err(ScoreError::LengthMismatch { expected: ids.len(), got: scores.len() });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| compare_entries((&ids[a], scores[a]), (&ids[b], scores[b])));
    Ok(Ranking {
        query_id: query_id.to_string(),
        entries: order.into_iter().map(|j| (ids[j].clone(), scores[j])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    use crate::embedding::normalize;

    /// Encoder over a fixed table; unknown text is an error.
    struct Table(HashMap<String, Vec<f64>>, usize);

    impl TextEncoder for Table {
        fn model_id(&self) -> String {
            "table".into()
        }
        fn dim(&self) -> usize {
            self.1
        }
        fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
            texts
                .iter()
                .map(|t| self.0.get(t).cloned().ok_or_else(|| EmbeddingError::MissingEmbedding(vec![t.clone()])))
                .collect()
        }
    }

    fn index(cols: &[&[f64]]) -> GalleryIndex {
        let dim = cols[0].len();
        GalleryIndex {
            ids: (0..cols.len()).map(|j| format!("g{j}")).collect(),
            dim,
            data: cols.iter().flat_map(|c| normalize(c).unwrap()).collect(),
            model_id: "t".into(),
        }
    }

    fn output(caption: &str, eo: &[&str], neo: &[&str]) -> ReasoningOutput {
        ReasoningOutput {
            query_id: "q".into(),
            target_caption: caption.into(),
            existent_objects: eo.iter().map(|s| s.to_string()).collect(),
            nonexistent_objects: neo.iter().map(|s| s.to_string()).collect(),
            trace_image_scale: String::new(),
            trace_object_scale: String::new(),
        }
    }

    #[test]
    fn base_examples() {
        let idx = index(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let enc = Table([("c".to_string(), vec![1.0, 0.0])].into(), 2);
        let s = score_base(&output("c", &[], &[]), &idx, &enc).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(score_base(&output("c", &[], &[]), &idx, &enc).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn concat_embeds_joined_string() {
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0]]);
        // only the joined string is in the table, so any other lookup fails
        let enc = Table([("a, b".to_string(), vec![0.0, 1.0])].into(), 2);
        let s = score_pos(&output("c", &["a", "b"], &[]), &idx, &enc, Aggregation::Concat).unwrap();
        assert_eq!(s, vec![0.0, 1.0]);
    }

    #[test]
    fn empty_lists_score_zero() {
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let enc = Table(HashMap::new(), 2);
        for agg in [Aggregation::Concat, Aggregation::Mean] {
            assert_eq!(score_pos(&output("c", &[], &[]), &idx, &enc, agg).unwrap(), vec![0.0, 0.0]);
            assert_eq!(score_neg(&output("c", &[], &[]), &idx, &enc, agg).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn single_object_modes_agree() {
        let idx = index(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let enc = Table([("x".to_string(), vec![0.8, 0.6])].into(), 2);
        let o = output("c", &[], &["x"]);
        assert_eq!(
            score_neg(&o, &idx, &enc, Aggregation::Mean).unwrap(),
            score_neg(&o, &idx, &enc, Aggregation::Concat).unwrap()
        );
    }

    #[test]
    fn fuse_example() {
        let cfg = MgsConfig::with_weights(1.0, 0.5);
        let b = fuse("q", &[0.2, 0.5], &[0.4, 0.1], &[0.1, 0.3], &cfg).unwrap();
        assert!((b.fused[0] - 0.55).abs() < 1e-12);
        assert!((b.fused[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn fuse_flag_algebra() {
        let zero = MgsConfig::with_weights(0.0, 0.0);
        let b = fuse("q", &[0.2, 0.5], &[0.4, 0.1], &[0.1, 0.3], &zero).unwrap();
        assert_eq!(b.fused, vec![0.2, 0.5]);
        let pos_only = MgsConfig::with_weights(1.0, 0.5)
            .with_components(Components { base: false, pos: true, neg: false });
        let b = fuse("q", &[0.2, 0.5], &[0.4, 0.1], &[0.1, 0.3], &pos_only).unwrap();
        assert_eq!(b.fused, vec![0.4, 0.1]);
        assert_eq!(b.base, vec![0.0, 0.0]);
        assert_eq!(b.neg, vec![0.0, 0.0]);
    }

    #[test]
    fn fuse_length_mismatch() {
        let cfg = MgsConfig::default();
        assert!(matches!(
            fuse("q", &[0.1, 0.2], &[0.1], &[0.1, 0.2], &cfg),
            Err(ScoreError::LengthMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn rank_examples() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = rank_scores("q", &[0.1, 0.9, 0.5], &ids).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["b", "c", "a"]);
        let ids: Vec<String> = ["b", "a"].iter().map(|s| s.to_string()).collect();
        let r = rank_scores("q", &[0.5, 0.5], &ids).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(r.rank_of("b"), Some(2));
    }

    #[test]
    fn components_parse() {
        assert_eq!("base,pos,neg".parse::<Components>().unwrap(), Components::ALL);
        assert_eq!("pos, neg".parse::<Components>().unwrap().to_string(), "pos,neg");
        assert!("".parse::<Components>().is_err());
        assert!("base,extra".parse::<Components>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MgsConfig::with_weights(-1.0, 0.0).validate().is_err());
        assert!(MgsConfig::default()
            .with_components(Components { base: false, pos: false, neg: false })
            .validate()
            .is_err());
    }
}
