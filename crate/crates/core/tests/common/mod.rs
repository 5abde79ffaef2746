//! Reference implementations used as test oracles. They are written
//! independently of the library code: plain loops, no shared helpers.

#![allow(dead_code)]

use std::collections::HashMap;

use cotmr_core::embedding::{EmbeddingError, GalleryIndex, TextEncoder};
use cotmr_core::reasoning::ReasoningOutput;
use cotmr_core::scoring::{Aggregation, MgsConfig, Ranking};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Text encoder backed by an exact lookup table.
pub struct TableEncoder {
    pub table: HashMap<String, Vec<f64>>,
    pub dim: usize,
}

impl TextEncoder for TableEncoder {
    fn model_id(&self) -> String {
        "oracle-table".into()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| EmbeddingError::MissingEmbedding(vec![t.clone()]))
            })
            .collect()
    }
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let mut n = 0.0;
    for x in &v {
        n += x * x;
    }
    let n = n.sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return unit(v);
        }
    }
}

/// Cosine of two unit vectors by an explicit index loop.
pub fn scalar_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// A random scoring instance with every string embedded in a table.
pub struct MgsInstance {
    pub index: GalleryIndex,
    pub encoder: TableEncoder,
    pub output: ReasoningOutput,
    pub config: MgsConfig,
}

/// Gallery columns as separate vectors.
pub fn columns(index: &GalleryIndex) -> Vec<Vec<f64>> {
    (0..index.len()).map(|j| index.data[j * index.dim..(j + 1) * index.dim].to_vec()).collect()
}

pub fn random_instance(seed: u64) -> MgsInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=64usize);
    let dim = rng.random_range(2..=32usize);
    let mut ids: Vec<String> = (0..n).map(|j| format!("img{j:03}")).collect();
    // shuffle so gallery order differs from lexicographic order
    for i in (1..ids.len()).rev() {
        let k = rng.random_range(0..=i);
        ids.swap(i, k);
    }
    let mut data = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for _ in 0..n {
        // duplicate an earlier column now and then to force exact ties
        let col = if !cols.is_empty() && rng.random_bool(0.15) {
            cols[rng.random_range(0..cols.len())].clone()
        } else {
            random_unit(&mut rng, dim)
        };
        data.extend(col.iter().copied());
        cols.push(col);
    }
    let index = GalleryIndex { ids, dim, data, model_id: "oracle".into() };
    let n_eo = rng.random_range(0..=8usize);
    let n_neo = rng.random_range(0..=8usize);
    let eo: Vec<String> = (0..n_eo).map(|i| format!("kept {seed} {i}")).collect();
    let neo: Vec<String> = (0..n_neo).map(|i| format!("gone {seed} {i}")).collect();
    let mut table = HashMap::new();
    let caption = format!("caption {seed}");
    for text in std::iter::once(caption.clone()).chain(eo.iter().cloned()).chain(neo.iter().cloned()) {
        table.insert(text, random_unit(&mut rng, dim));
    }
    if !eo.is_empty() {
        table.insert(eo.join(", "), random_unit(&mut rng, dim));
    }
    if !neo.is_empty() {
        table.insert(neo.join(", "), random_unit(&mut rng, dim));
    }
    let agg = |b: bool| if b { Aggregation::Concat } else { Aggregation::Mean };
    let config = MgsConfig {
        lambda: rng.random_range(0.0..=2.0),
        mu: rng.random_range(0.0..=1.0),
        use_base: true,
        use_pos: true,
        use_neg: true,
        eo_aggregation: agg(rng.random_bool(0.5)),
        neo_aggregation: agg(rng.random_bool(0.5)),
    };
    let mut config = config;
    loop {
        config.use_base = rng.random_bool(0.7);
        config.use_pos = rng.random_bool(0.7);
        config.use_neg = rng.random_bool(0.7);
        if config.use_base || config.use_pos || config.use_neg {
            break;
        }
    }
    let output = ReasoningOutput {
        query_id: format!("q{seed}"),
        target_caption: caption,
        existent_objects: eo,
        nonexistent_objects: neo,
        trace_image_scale: String::new(),
        trace_object_scale: String::new(),
    };
    MgsInstance { index, encoder: TableEncoder { table, dim }, output, config }
}

/// Reward or penalty term for one candidate column, by scalar loops.
fn scalar_objects(objects: &[String], agg: Aggregation, table: &HashMap<String, Vec<f64>>, col: &[f64]) -> f64 {
    if objects.is_empty() {
        return 0.0;
    }
    match agg {
        Aggregation::Concat => scalar_dot(&table[&objects.join(", ")], col),
        Aggregation::Mean => {
            let mut s = 0.0;
            for o in objects {
                s += scalar_dot(&table[o], col);
            }
            s / objects.len() as f64
        }
    }
}

/// Fused score of every candidate: `base + λ pos − μ neg` over enabled terms.
pub fn scalar_mgs(inst: &MgsInstance) -> Vec<f64> {
    let cfg = &inst.config;
    let t = &inst.encoder.table;
    let o = &inst.output;
    columns(&inst.index)
        .iter()
        .map(|col| {
            let mut s = 0.0;
            if cfg.use_base {
                s += scalar_dot(&t[&o.target_caption], col);
            }
            if cfg.use_pos {
                s += cfg.lambda * scalar_objects(&o.existent_objects, cfg.eo_aggregation, t, col);
            }
            if cfg.use_neg {
                s -= cfg.mu * scalar_objects(&o.nonexistent_objects, cfg.neo_aggregation, t, col);
            }
            s
        })
        .collect()
}

/// Ranking by repeated selection: highest score first, smallest id among
/// exact ties.
pub fn selection_rank(scores: &[f64], ids: &[String]) -> Vec<String> {
    let mut left: Vec<usize> = (0..ids.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]) {
                best = i;
            }
        }
        out.push(ids[left.remove(best)].clone());
    }
    out
}

pub fn ranked_ids(r: &Ranking) -> Vec<String> {
    r.entries.iter().map(|(id, _)| id.clone()).collect()
}

/// Recall indicator by scanning the prefix.
pub fn brute_recall(ranked: &[String], targets: &[String], k: usize) -> f64 {
    for id in ranked.iter().take(k) {
        if targets.contains(id) {
            return 1.0;
        }
    }
    0.0
}

pub fn brute_recall_subset(ranked: &[String], subset: &[String], targets: &[String], k: usize) -> f64 {
    let restricted: Vec<String> = ranked.iter().filter(|id| subset.contains(id)).cloned().collect();
    brute_recall(&restricted, targets, k)
}

/// AP@k from its definition: precision at each relevant cutoff, summed and
/// divided by `min(k, |targets|)`.
pub fn brute_ap(ranked: &[String], targets: &[String], k: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=k {
        let rel = targets.contains(&ranked[i - 1]);
        if rel {
            let hits = ranked[..i].iter().filter(|id| targets.contains(id)).count();
            total += hits as f64 / i as f64;
        }
    }
    total / (k.min(targets.len())) as f64
}

/// One entry of the parser corpus.
#[derive(Debug, serde::Deserialize)]
pub struct WellFormed {
    pub name: String,
    pub scale: cotmr_core::Scale,
    pub reply: String,
    pub expect: cotmr_core::reasoning::PassOutcome,
}

#[derive(Debug, serde::Deserialize)]
pub struct Malformed {
    pub name: String,
    pub scale: cotmr_core::Scale,
    pub reply: String,
    pub error: String,
    pub marker: Option<String>,
}

fn corpus_lines<T: serde::de::DeserializeOwned>(file: &str) -> Vec<T> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus").join(file);
    let text = std::fs::read_to_string(&path).expect("corpus file readable");
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("corpus line parses"))
        .collect()
}

pub fn well_formed_corpus() -> Vec<WellFormed> {
    corpus_lines("well_formed.jsonl")
}

pub fn malformed_corpus() -> Vec<Malformed> {
    corpus_lines("malformed.jsonl")
}

/// Whether `err` is the error an entry names.
pub fn is_expected_error(entry: &Malformed, err: &cotmr_core::reasoning::ParseError) -> bool {
    use cotmr_core::reasoning::ParseError;
    match (entry.error.as_str(), err) {
        ("empty_caption", ParseError::EmptyCaption) => true,
        ("missing_marker", ParseError::MissingMarker(m)) => Some(*m) == entry.marker.as_deref(),
        ("payload_not_array", ParseError::PayloadNotArray { marker, .. }) => {
            Some(*marker) == entry.marker.as_deref()
        }
        _ => false,
    }
}

/// Path of the golden rendering for a prompt.
pub fn golden_path(scale: cotmr_core::Scale, mode: cotmr_core::PromptMode) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{scale}_{}.txt", mode.flag()))
}

pub const GOLDEN_REFERENCE: &str = "ref-0001";
pub const GOLDEN_TEXT: &str = "is blue and has no sleeves";

pub fn golden_render(scale: cotmr_core::Scale, mode: cotmr_core::PromptMode) -> String {
    cotmr_core::build_prompt(scale, mode, GOLDEN_REFERENCE, GOLDEN_TEXT).render()
}
