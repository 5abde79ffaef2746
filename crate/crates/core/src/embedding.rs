//! Unit-norm embeddings, the gallery index and cosine similarity rows.
//!
//! Vectors are normalized here no matter what the backend claims, so every
//! dot product against the index is a cosine similarity.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, EmbedBackend, EmbedBatch};
use crate::evaluation::Fingerprint;
use crate::query_model::{GalleryManifest, PlantedEmbeddings};

pub const EMBEDDINGS_FORMAT: &str = "cotmr-emb-v1";
/// Largest batch sent to an embedding backend in one request.
pub const MAX_BATCH: usize = 256;
/// Allowed deviation of a stored vector's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("dimension mismatch: store has dim {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no embedding for {} id(s): {}", .0.len(), .0.join(", "))]
    MissingEmbedding(Vec<String>),
    #[error("cannot normalize zero vector for {0:?}")]
    ZeroVector(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("backend returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("embeddings io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed embeddings record: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

/// Returns `v / ‖v‖₂`, or `None` for a zero or non-finite vector. Vectors
/// already unit-norm to within rounding are returned unchanged, which makes
/// normalization exactly idempotent.
pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= f64::MIN_POSITIVE {
        return None;
    }
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Some(v.to_vec());
    }
    Some(v.iter().map(|x| x / norm).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
    pub model_id: String,
}

fn checked_batch(
    batch: EmbedBatch,
    inputs: &[String],
    expected_dim: Option<usize>,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), EmbeddingError> {
    if batch.vectors.len() != inputs.len() {
        return Err(EmbeddingError::CountMismatch {
            expected: inputs.len(),
            got: batch.vectors.len(),
        });
    }
    let dim = expected_dim.unwrap_or(batch.dim);
    let mut out = Vec::with_capacity(inputs.len());
    for (v, input) in batch.vectors.iter().zip(inputs) {
        if v.len() != dim || batch.dim != dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: dim,
                got: if v.len() != dim { v.len() } else { batch.dim },
            });
        }
        out.push(normalize(v).ok_or_else(|| EmbeddingError::ZeroVector(input.clone()))?);
    }
    let mut truncated = batch.truncated;
    truncated.resize(inputs.len(), false);
    Ok((out, truncated))
}

fn embed_batched(
    inputs: &[String],
    expected_dim: Option<usize>,
    call: impl Fn(&[String]) -> Result<EmbedBatch, BackendError>,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), EmbeddingError> {
    let mut vectors = Vec::with_capacity(inputs.len());
    let mut truncated = Vec::with_capacity(inputs.len());
    let mut dim = expected_dim;
    for chunk in inputs.chunks(MAX_BATCH) {
        let (v, t) = checked_batch(call(chunk)?, chunk, dim)?;
        dim = dim.or(v.first().map(Vec::len));
        vectors.extend(v);
        truncated.extend(t);
    }
    Ok((vectors, truncated))
}

/// Embeds texts in order. `expected_dim` is the dimension of the store the
/// records are going into, if it already has one.
pub fn embed_texts(
    texts: &[String],
    backend: &dyn EmbedBackend,
    expected_dim: Option<usize>,
) -> Result<Vec<EmbeddingRecord>, EmbeddingError> {
    if texts.is_empty() {
        return Err(EmbeddingError::EmptyInput("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(EmbeddingError::EmptyInput(format!("text {i} is empty")));
    }
    let (vectors, truncated) = embed_batched(texts, expected_dim, |c| backend.embed_texts(c))?;
    let model_id = backend.model_id();
    for (t, cut) in texts.iter().zip(truncated) {
        if cut {
            log::warn!("text truncated by backend {model_id}: {t:?}");
        }
    }
    Ok(texts
        .iter()
        .zip(vectors)
        .map(|(t, vector)| EmbeddingRecord {
            id: t.clone(),
            vector,
            source: EmbeddingSource::Text,
            model_id: model_id.clone(),
        })
        .collect())
}

/// Image embeddings for a gallery, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub ids: Vec<String>,
    pub dim: usize,
    /// Row `j` (`data[j*dim..(j+1)*dim]`) is the unit vector of `ids[j]`.
    pub data: Vec<f64>,
    pub model_id: String,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// Builds an index from `(id, vector)` pairs, taking the manifest order
    /// and normalizing every vector.
    pub fn from_vectors(
        manifest: &GalleryManifest,
        vectors: &HashMap<String, Vec<f64>>,
        model_id: &str,
    ) -> Result<Self, EmbeddingError> {
        let missing: Vec<String> = manifest
            .ids()
            .filter(|id| !vectors.contains_key(*id))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(EmbeddingError::MissingEmbedding(missing));
        }
        let mut dim = None;
        let mut data = Vec::new();
        for id in manifest.ids() {
            let v = &vectors[id];
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(EmbeddingError::DimensionMismatch { expected: d, got: v.len() });
            }
            data.extend(normalize(v).ok_or_else(|| EmbeddingError::ZeroVector(id.to_string()))?);
        }
        Ok(Self {
            ids: manifest.ids().map(str::to_string).collect(),
            dim: dim.unwrap_or(0),
            data,
            model_id: model_id.to_string(),
        })
    }

    pub fn records(&self) -> Vec<(String, Vec<f64>)> {
        (0..self.len())
            .map(|j| (self.ids[j].clone(), self.vector(j).to_vec()))
            .collect()
    }
}

/// Where gallery vectors come from.
pub enum GallerySource<'a> {
    Backend(&'a dyn EmbedBackend),
    File(&'a Path),
}

/// Builds the gallery index. A backend is asked for every manifest locator;
/// a file must cover every manifest id (extra ids are ignored).
pub fn build_gallery_index(
    manifest: &GalleryManifest,
    source: GallerySource<'_>,
) -> Result<GalleryIndex, EmbeddingError> {
    match source {
        GallerySource::Backend(backend) => {
            let locators: Vec<String> = manifest.entries.iter().map(|e| e.locator.clone()).collect();
            if locators.is_empty() {
                return Err(EmbeddingError::EmptyInput("gallery is empty".into()));
            }
            let (vectors, _) = embed_batched(&locators, None, |c| backend.embed_images(c))?;
            let dim = vectors.first().map_or(0, Vec::len);
            Ok(GalleryIndex {
                ids: manifest.ids().map(str::to_string).collect(),
                dim,
                data: vectors.into_iter().flatten().collect(),
                model_id: backend.model_id(),
            })
        }
        GallerySource::File(path) => {
            let file = read_embeddings(path)?;
            let map: HashMap<String, Vec<f64>> = file.records.into_iter().collect();
            let index = GalleryIndex::from_vectors(manifest, &map, &file.model)?;
            if index.dim != file.dim {
                return Err(EmbeddingError::DimensionMismatch { expected: file.dim, got: index.dim });
            }
            Ok(index)
        }
    }
}

/// Cosine similarity of `text` against every gallery image, in index order.
pub fn similarity_row(text: &[f64], index: &GalleryIndex) -> Result<Vec<f64>, EmbeddingError> {
    if text.len() != index.dim {
        return Err(EmbeddingError::DimensionMismatch { expected: index.dim, got: text.len() });
    }
    Ok(index.data.chunks_exact(index.dim).map(|col| dot(text, col)).collect())
}

/// Contents of an embeddings file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingsFile {
    pub dim: usize,
    pub model: String,
    pub fingerprint: Option<Fingerprint>,
    pub records: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    dim: usize,
    model: String,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<Fingerprint>,
}

#[derive(Serialize, Deserialize)]
struct FileRecord {
    id: String,
    v: Vec<f64>,
}

/// Renders records as an embeddings file. Floats are written in shortest
/// round-trip form, so reading back is exact.
pub fn format_embeddings(
    dim: usize,
    model: &str,
    records: &[(String, Vec<f64>)],
    fingerprint: Option<&Fingerprint>,
) -> String {
    let header = FileHeader {
        format: EMBEDDINGS_FORMAT.into(),
        dim,
        model: model.into(),
        normalized: true,
        fingerprint: fingerprint.cloned(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for (id, v) in records {
        let r = FileRecord { id: id.clone(), v: v.clone() };
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_embeddings(
    path: &Path,
    dim: usize,
    model: &str,
    records: &[(String, Vec<f64>)],
    fingerprint: Option<&Fingerprint>,
) -> Result<(), EmbeddingError> {
    let io = |source| EmbeddingError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, format_embeddings(dim, model, records, fingerprint)).map_err(io)
}

pub fn parse_embeddings(text: &str, path: &str) -> Result<EmbeddingsFile, EmbeddingError> {
    let malformed = |line: usize, reason: String| EmbeddingError::Malformed {
        path: path.to_string(),
        line,
        reason,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (n, header) = lines.next().ok_or_else(|| malformed(1, "missing header".into()))?;
    let header: FileHeader =
        serde_json::from_str(header).map_err(|e| malformed(n, format!("bad header: {e}")))?;
    if header.format != EMBEDDINGS_FORMAT {
        return Err(malformed(n, format!("format is '{}', expected '{EMBEDDINGS_FORMAT}'", header.format)));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (n, line) in lines {
        let r: FileRecord = serde_json::from_str(line).map_err(|e| malformed(n, e.to_string()))?;
        if r.v.len() != header.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: header.dim, got: r.v.len() });
        }
        if !seen.insert(r.id.clone()) {
            return Err(malformed(n, format!("duplicate id {}", r.id)));
        }
        let v = if header.normalized {
            r.v
        } else {
            normalize(&r.v).ok_or_else(|| EmbeddingError::ZeroVector(r.id.clone()))?
        };
        records.push((r.id, v));
    }
    Ok(EmbeddingsFile { dim: header.dim, model: header.model, fingerprint: header.fingerprint, records })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingsFile, EmbeddingError> {
    let text = std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_embeddings(&text, &path.display().to_string())
}

/// Turns texts into unit vectors for scoring.
pub trait TextEncoder: Sync {
    fn model_id(&self) -> String;

    fn dim(&self) -> usize;

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;

    fn encode_one(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        Ok(self.encode(&[text.to_string()])?.remove(0))
    }
}

/// A [`TextEncoder`] over an embedding backend with an exact-match cache
/// keyed by `(model_id, text)`.
pub struct CachedTextEncoder<'a> {
    backend: &'a dyn EmbedBackend,
    dim: usize,
    model_id: String,
    cache: Mutex<HashMap<(String, String), Vec<f64>>>,
    truncations: Mutex<Vec<String>>,
}

impl<'a> CachedTextEncoder<'a> {
    /// `dim` is the gallery dimension every text vector must match.
    pub fn new(backend: &'a dyn EmbedBackend, dim: usize) -> Self {
        Self {
            model_id: backend.model_id(),
            backend,
            dim,
            cache: Mutex::new(HashMap::new()),
            truncations: Mutex::new(Vec::new()),
        }
    }

    /// Texts the backend reported as truncated, in first-seen order.
    pub fn truncation_warnings(&self) -> Vec<String> {
        self.truncations.lock().expect("cache lock").clone()
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl TextEncoder for CachedTextEncoder<'_> {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let key = |t: &String| (self.model_id.clone(), t.clone());
        let mut missing: Vec<String> = {
            let cache = self.cache.lock().expect("cache lock");
            texts.iter().filter(|t| !cache.contains_key(&key(t))).cloned().collect()
        };
        missing.sort();
        missing.dedup();
        if !missing.is_empty() {
            if missing.iter().any(String::is_empty) {
                return Err(EmbeddingError::EmptyInput("cannot embed an empty text".into()));
            }
            let (vectors, truncated) =
                embed_batched(&missing, Some(self.dim), |c| self.backend.embed_texts(c))?;
            let mut cache = self.cache.lock().expect("cache lock");
            let mut warn = self.truncations.lock().expect("cache lock");
            for ((t, v), cut) in missing.iter().zip(vectors).zip(truncated) {
                if cut && !warn.contains(t) {
                    log::warn!("text truncated by backend {}: {t:?}", self.model_id);
                    warn.push(t.clone());
                }
                cache.insert(key(t), v);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(texts.iter().map(|t| cache[&key(t)].clone()).collect())
    }
}

/// Deterministic unit vector derived from a string: SHA-256 of the model id
/// and input seeds a ChaCha stream of standard normals.
pub fn hash_vector(model_id: &str, input: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(input.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalize(&v) {
            return u;
        }
    }
}

/// In-process embedder: exact lookups in text and image tables, with a
/// hash-derived vector for anything else.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub model: String,
    pub dim: usize,
    texts: HashMap<String, Vec<f64>>,
    images: HashMap<String, Vec<f64>>,
}

impl MockEmbedder {
    pub fn new(model: impl Into<String>, dim: usize) -> Self {
        Self {
            model: model.into(),
            dim,
            texts: HashMap::new(),
            images: HashMap::new(),
        }
    }

    pub fn with_texts(mut self, texts: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        self.texts.extend(texts);
        self
    }

    /// Image vectors keyed by locator.
    pub fn with_images(mut self, images: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        self.images.extend(images);
        self
    }

    /// Tables for a synthetic split; image keys are the gallery locators.
    pub fn from_planted(planted: &PlantedEmbeddings, manifest: &GalleryManifest) -> Self {
        let images = planted
            .images
            .iter()
            .map(|(id, v)| (manifest.locator(id).unwrap_or(id).to_string(), v.clone()));
        Self::new("mock-planted", planted.dim)
            .with_texts(planted.texts.iter().cloned())
            .with_images(images)
    }

    fn lookup(&self, table: &HashMap<String, Vec<f64>>, inputs: &[String]) -> Result<EmbedBatch, BackendError> {
        if inputs.is_empty() {
            return Err(BackendError::Rejected { status: 400, message: "empty input list".into() });
        }
        let vectors = inputs
            .iter()
            .map(|s| table.get(s).cloned().unwrap_or_else(|| hash_vector(&self.model, s, self.dim)))
            .collect();
        Ok(EmbedBatch { dim: self.dim, vectors, truncated: vec![false; inputs.len()] })
    }
}

impl EmbedBackend for MockEmbedder {
    fn model_id(&self) -> String {
        self.model.clone()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<EmbedBatch, BackendError> {
        self.lookup(&self.texts, texts)
    }

    fn embed_images(&self, locators: &[String]) -> Result<EmbedBatch, BackendError> {
        self.lookup(&self.images, locators)
    }
}
