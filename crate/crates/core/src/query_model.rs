//! Queries, gallery manifests and dataset splits.
//!
//! Both annotation files are line-delimited JSON with a versioned header
//! object on the first line. Blank lines are skipped; every other line must
//! be a complete record. Unknown keys are rejected.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const QUERIES_FORMAT: &str = "cotmr-queries-v1";
pub const GALLERY_FORMAT: &str = "cotmr-gallery-v1";

/// Size of a curated subset (the CIRR subset task).
pub const SUBSET_SIZE: usize = 6;

/// Weights attached to synthetic splits, which have no published defaults.
pub const SYNTHETIC_WEIGHTS: (f64, f64) = (1.0, 0.5);

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed record: {reason}")]
    MalformedRecord {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("query {query_id} refers to unknown image {image_id}")]
    DanglingReference { query_id: String, image_id: String },
    #[error("{file}:{line}: duplicate id {id}")]
    DuplicateId { file: String, line: usize, id: String },
    #[error("benchmark {0} has no default hyperparameters; pass lambda and mu explicitly")]
    UnknownBenchmark(BenchmarkKind),
    #[error("invalid size: {0}")]
    InvalidSize(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkKind {
    FashionIq,
    Cirr,
    Circo,
    Synthetic,
}

impl BenchmarkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkKind::FashionIq => "fashioniq",
            BenchmarkKind::Cirr => "cirr",
            BenchmarkKind::Circo => "circo",
            BenchmarkKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fashioniq" => Ok(BenchmarkKind::FashionIq),
            "cirr" => Ok(BenchmarkKind::Cirr),
            "circo" => Ok(BenchmarkKind::Circo),
            "synthetic" => Ok(BenchmarkKind::Synthetic),
            other => Err(format!(
                "unknown benchmark '{other}' (expected fashioniq, cirr, circo or synthetic)"
            )),
        }
    }
}

/// Reward and penalty weights `(lambda, mu)` tuned per benchmark.
pub fn default_hyperparams(kind: BenchmarkKind) -> Result<(f64, f64), DatasetError> {
    match kind {
        BenchmarkKind::FashionIq => Ok((1.0, 0.5)),
        BenchmarkKind::Cirr => Ok((1.0, 0.3)),
        BenchmarkKind::Circo => Ok((0.5, 0.3)),
        BenchmarkKind::Synthetic => Err(DatasetError::UnknownBenchmark(kind)),
    }
}

/// One retrieval request: a reference image plus the text describing how
/// the wanted image differs from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposedQuery {
    pub query_id: String,
    pub reference_image: String,
    pub modification_text: String,
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
}

impl ComposedQuery {
    /// Checks the record-local invariants. Gallery resolution is checked by
    /// [`DatasetSplit::new`].
    pub fn validate(&self) -> Result<(), String> {
        if self.query_id.trim().is_empty() {
            return Err("query_id is empty".into());
        }
        if self.modification_text.trim().is_empty() {
            return Err("modification_text is empty".into());
        }
        if self.targets.is_empty() {
            return Err("targets is empty".into());
        }
        if let Some(dup) = first_duplicate(&self.targets) {
            return Err(format!("duplicate target {dup}"));
        }
        if let Some(subset) = &self.subset {
            if subset.len() != SUBSET_SIZE {
                return Err(format!(
                    "subset has {} members, expected {SUBSET_SIZE}",
                    subset.len()
                ));
            }
            if let Some(dup) = first_duplicate(subset) {
                return Err(format!("duplicate subset member {dup}"));
            }
            if let Some(missing) = self.targets.iter().find(|t| !subset.contains(t)) {
                return Err(format!("subset does not contain target {missing}"));
            }
        }
        Ok(())
    }
}

fn first_duplicate(ids: &[String]) -> Option<&str> {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().find(|id| !seen.insert(id.as_str())).map(String::as_str)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryEntry {
    pub image_id: String,
    pub locator: String,
}

/// The candidate set, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GalleryManifest {
    pub entries: Vec<GalleryEntry>,
}

impl GalleryManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }

    pub fn locator(&self, image_id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.image_id == image_id)
            .map(|e| e.locator.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub benchmark_kind: BenchmarkKind,
    pub queries: Vec<ComposedQuery>,
    pub gallery: GalleryManifest,
    pub default_lambda: f64,
    pub default_mu: f64,
}

impl DatasetSplit {
    /// Assembles a split, checking that every target and subset member
    /// resolves to a gallery image and that query ids are unique.
    pub fn new(
        name: impl Into<String>,
        benchmark_kind: BenchmarkKind,
        queries: Vec<ComposedQuery>,
        gallery: GalleryManifest,
    ) -> Result<Self, DatasetError> {
        let (default_lambda, default_mu) = match benchmark_kind {
            BenchmarkKind::Synthetic => SYNTHETIC_WEIGHTS,
            kind => default_hyperparams(kind)?,
        };
        if gallery.is_empty() {
            return Err(DatasetError::InvalidSize("gallery is empty".into()));
        }
        let known: HashSet<&str> = gallery.ids().collect();
        let mut seen_queries = HashSet::new();
        for (i, q) in queries.iter().enumerate() {
            if !seen_queries.insert(q.query_id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    file: "queries".into(),
                    line: i + 2,
                    id: q.query_id.clone(),
                });
            }
            let members = q.targets.iter().chain(q.subset.iter().flatten());
            for id in members {
                if !known.contains(id.as_str()) {
                    return Err(DatasetError::DanglingReference {
                        query_id: q.query_id.clone(),
                        image_id: id.clone(),
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            benchmark_kind,
            queries,
            gallery,
            default_lambda,
            default_mu,
        })
    }

    pub fn query(&self, query_id: &str) -> Option<&ComposedQuery> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
}

/// Yields `(1-based line number, line)` for every non-blank line after
/// checking the header.
fn records<'a>(
    text: &'a str,
    file: &str,
    expected_format: &str,
) -> Result<Vec<(usize, &'a str)>, DatasetError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let malformed = |line: usize, reason: String| DatasetError::MalformedRecord {
        file: file.to_string(),
        line,
        reason,
    };
    let (line_no, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "missing header line".into()))?;
    let header: Header = serde_json::from_str(header)
        .map_err(|e| malformed(line_no, format!("bad header: {e}")))?;
    if header.format != expected_format {
        return Err(malformed(
            line_no,
            format!(
                "format is '{}', expected '{expected_format}'",
                header.format
            ),
        ));
    }
    Ok(lines.collect())
}

pub fn parse_queries(text: &str, file: &str) -> Result<Vec<ComposedQuery>, DatasetError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, raw) in records(text, file, QUERIES_FORMAT)? {
        let query: ComposedQuery =
            serde_json::from_str(raw).map_err(|e| DatasetError::MalformedRecord {
                file: file.to_string(),
                line,
                reason: e.to_string(),
            })?;
        query
            .validate()
            .map_err(|reason| DatasetError::MalformedRecord {
                file: file.to_string(),
                line,
                reason,
            })?;
        if !seen.insert(query.query_id.clone()) {
            return Err(DatasetError::DuplicateId {
                file: file.to_string(),
                line,
                id: query.query_id,
            });
        }
        out.push(query);
    }
    Ok(out)
}

pub fn parse_gallery(text: &str, file: &str) -> Result<GalleryManifest, DatasetError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (line, raw) in records(text, file, GALLERY_FORMAT)? {
        let entry: GalleryEntry =
            serde_json::from_str(raw).map_err(|e| DatasetError::MalformedRecord {
                file: file.to_string(),
                line,
                reason: e.to_string(),
            })?;
        if entry.image_id.is_empty() {
            return Err(DatasetError::MalformedRecord {
                file: file.to_string(),
                line,
                reason: "image_id is empty".into(),
            });
        }
        if !seen.insert(entry.image_id.clone()) {
            return Err(DatasetError::DuplicateId {
                file: file.to_string(),
                line,
                id: entry.image_id,
            });
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(DatasetError::InvalidSize(format!("{file}: gallery has no entries")));
    }
    Ok(GalleryManifest { entries })
}

fn read(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_gallery(path: &Path) -> Result<GalleryManifest, DatasetError> {
    parse_gallery(&read(path)?, &path.display().to_string())
}

/// Loads a split from the canonical queries and gallery files. The split is
/// named after the queries file stem.
pub fn load_split(
    queries_path: &Path,
    gallery_path: &Path,
    benchmark_kind: BenchmarkKind,
) -> Result<DatasetSplit, DatasetError> {
    let queries = parse_queries(&read(queries_path)?, &queries_path.display().to_string())?;
    let gallery = load_gallery(gallery_path)?;
    let name = queries_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "split".into());
    DatasetSplit::new(name, benchmark_kind, queries, gallery)
}

pub fn write_queries(queries: &[ComposedQuery]) -> String {
    let mut out = format!("{{\"format\":\"{QUERIES_FORMAT}\"}}\n");
    for q in queries {
        out.push_str(&serde_json::to_string(q).expect("query serializes"));
        out.push('\n');
    }
    out
}

pub fn write_gallery(gallery: &GalleryManifest) -> String {
    let mut out = format!("{{\"format\":\"{GALLERY_FORMAT}\"}}\n");
    for e in &gallery.entries {
        out.push_str(&serde_json::to_string(e).expect("gallery entry serializes"));
        out.push('\n');
    }
    out
}

/// Ground truth planted by [`generate_synthetic_split`] for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedQuery {
    pub query_id: String,
    pub caption: String,
    pub existent: Vec<String>,
    pub nonexistent: Vec<String>,
    pub target: String,
    pub distractor: String,
}

/// Vectors behind a synthetic split: image embeddings in manifest order,
/// text embeddings keyed by the exact string a scorer will embed, and the
/// reasoning outputs a perfect model would produce.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEmbeddings {
    pub dim: usize,
    pub images: Vec<(String, Vec<f64>)>,
    pub texts: Vec<(String, Vec<f64>)>,
    pub queries: Vec<PlantedQuery>,
}

/// How far the distractor leans towards the forbidden direction. Values
/// below 1 keep it closer to the caption than the target is.
const DISTRACTOR_NEO_WEIGHT: f64 = 0.8;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn unit_sum(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let dim = parts[0].1.len();
    let mut v = vec![0.0; dim];
    for (w, p) in parts {
        for (acc, x) in v.iter_mut().zip(p.iter()) {
            *acc += w * x;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Builds a deterministic desk-scale split with planted answers.
///
/// Each query gets random unit directions for its caption (`c`), its
/// existent objects (`e`) and two nonexistent objects (`n1`, `n2`). The
/// target image is `unit(c + e)`; a distractor `unit(c + 0.8 n1)` sits closer
/// to the caption than the target but carries the forbidden object, so
/// caption-only scoring tends to prefer it while the full reward/penalty
/// score does not. Remaining gallery slots are random unit vectors.
pub fn generate_synthetic_split(
    seed: u64,
    n_queries: usize,
    gallery_size: usize,
    dim: usize,
) -> Result<(DatasetSplit, PlantedEmbeddings), DatasetError> {
    if n_queries < 1 {
        return Err(DatasetError::InvalidSize("n_queries must be at least 1".into()));
    }
    if gallery_size < SUBSET_SIZE {
        return Err(DatasetError::InvalidSize(format!(
            "gallery_size must be at least {SUBSET_SIZE}, got {gallery_size}"
        )));
    }
    if dim < 4 {
        return Err(DatasetError::InvalidSize(format!("dim must be at least 4, got {dim}")));
    }
    let fillers_needed = SUBSET_SIZE - 2;
    if gallery_size < 2 * n_queries + fillers_needed {
        return Err(DatasetError::InvalidSize(format!(
            "gallery_size {gallery_size} cannot hold a target and a distractor for {n_queries} queries plus {fillers_needed} fillers"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(gallery_size);
    let mut texts = Vec::new();
    let mut planted = Vec::with_capacity(n_queries);

    for i in 0..n_queries {
        let qid = format!("q{i:04}");
        let caption_dir = random_unit(&mut rng, dim);
        let eo_dir = random_unit(&mut rng, dim);
        let neo_dir = random_unit(&mut rng, dim);
        let neo_other = random_unit(&mut rng, dim);

        let target = format!("img_t{i:04}");
        let distractor = format!("img_d{i:04}");
        images.push((target.clone(), unit_sum(&[(1.0, &caption_dir), (1.0, &eo_dir)])));
        images.push((
            distractor.clone(),
            unit_sum(&[(1.0, &caption_dir), (DISTRACTOR_NEO_WEIGHT, &neo_dir)]),
        ));

        let caption = format!("a scene planted for query {i}");
        let existent = vec![format!("first kept object {i}"), format!("second kept object {i}")];
        let nonexistent = vec![format!("removed object {i}"), format!("absent object {i}")];

        texts.push((caption.clone(), caption_dir));
        texts.push((existent.join(", "), eo_dir.clone()));
        for item in &existent {
            let jitter = random_unit(&mut rng, dim);
            texts.push((item.clone(), unit_sum(&[(1.0, &eo_dir), (0.5, &jitter)])));
        }
        texts.push((nonexistent.join(", "), unit_sum(&[(1.0, &neo_dir), (1.0, &neo_other)])));
        texts.push((nonexistent[0].clone(), neo_dir));
        texts.push((nonexistent[1].clone(), neo_other));

        planted.push(PlantedQuery {
            query_id: qid,
            caption,
            existent,
            nonexistent,
            target,
            distractor,
        });
    }

    let filler_start = images.len();
    for j in 0..(gallery_size - filler_start) {
        images.push((format!("img_f{j:05}"), random_unit(&mut rng, dim)));
    }
    let n_fillers = gallery_size - filler_start;

    let queries = planted
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut subset = vec![p.target.clone(), p.distractor.clone()];
            while subset.len() < SUBSET_SIZE {
                let pick = &images[filler_start + rng.random_range(0..n_fillers)].0;
                if !subset.contains(pick) {
                    subset.push(pick.clone());
                }
            }
            ComposedQuery {
                query_id: p.query_id.clone(),
                reference_image: format!("ref{i:04}"),
                modification_text: format!("apply planted change number {i}"),
                targets: vec![p.target.clone()],
                subset: Some(subset),
            }
        })
        .collect();

    let gallery = GalleryManifest {
        entries: images
            .iter()
            .map(|(id, _)| GalleryEntry {
                image_id: id.clone(),
                locator: format!("synthetic://{id}"),
            })
            .collect(),
    };
    let split = DatasetSplit::new(
        format!("synthetic-s{seed}"),
        BenchmarkKind::Synthetic,
        queries,
        gallery,
    )?;
    Ok((
        split,
        PlantedEmbeddings {
            dim,
            images,
            texts,
            queries: planted,
        },
    ))
}
