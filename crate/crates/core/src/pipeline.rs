//! Run configuration and the stage-cached pipeline.
//!
//! Stages communicate only through files in the output directory:
//!
//! | stage      | reads                              | writes                          |
//! |------------|------------------------------------|---------------------------------|
//! | `embed`    | gallery manifest                   | `embeddings.jsonl`              |
//! | `reason`   | split                              | `traces/traces.jsonl`           |
//! | `retrieve` | split, embeddings, traces          | `rankings.jsonl`, `scores.jsonl` |
//! | `evaluate` | split, rankings                    | `report.json`                   |
//! | `ablate`   | split, embeddings, traces          | `ablation.json`                 |
//!
//! Every artifact header carries a [`Fingerprint`] of the settings that
//! produced it. Input files enter the fingerprint by content hash, never by
//! path, so identical inputs give identical artifacts wherever they live.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, ChatBackend, EmbedBackend, HttpBackend};
use crate::embedding::{
    build_gallery_index, read_embeddings, write_embeddings, CachedTextEncoder, EmbeddingError, GalleryIndex,
    GallerySource, MockEmbedder,
};
use crate::evaluation::{evaluate_split, EvalError, EvalReport, Fingerprint, MetricPlan};
use crate::prompting::{PromptError, PromptLibrary, PromptMode, Scale};
use crate::query_model::{
    load_gallery, load_split, write_gallery, write_queries, BenchmarkKind, DatasetError, DatasetSplit,
    GalleryManifest,
};
use crate::reasoning::{
    edit_and_replay, load_effective_traces, load_traces, trace_file, trace_fingerprint, write_traces,
    MockChatBackend, ProcessPolicy, ReasonError, Reasoner, ReasoningOutput, ReasoningTrace, RetryPolicy,
    TraceError, DEFAULT_CONCURRENCY, DEFAULT_RETRY_BUDGET, TRACE_FILE,
};
use crate::scoring::{
    rank, score_query, Aggregation, Components, MgsConfig, QueryRows, Ranking, ScoreBreakdown, ScoreError,
    ABLATION_ROWS, CONCAT_SEPARATOR,
};

pub const RANKINGS_FORMAT: &str = "cotmr-rankings-v1";
pub const SCORES_FORMAT: &str = "cotmr-scores-v1";
pub const ABLATION_FORMAT: &str = "cotmr-ablation-v1";

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const TRACES_DIR: &str = "traces";
pub const RANKINGS_FILE: &str = "rankings.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const REPLAYED_RANKINGS_FILE: &str = "rankings.replayed.jsonl";
pub const REPLAYED_REPORT_FILE: &str = "report.replayed.json";
pub const CONFIG_FILE: &str = "run.cfg";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("fingerprint mismatch in {artifact}: expected {expected}, found {found} (use --force to override)")]
    FingerprintMismatch { artifact: String, expected: String, found: String },
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

impl PipelineError {
    fn is_unavailable(&self) -> bool {
        matches!(
            self,
            PipelineError::Backend(BackendError::Unavailable(_))
                | PipelineError::Embedding(EmbeddingError::Backend(BackendError::Unavailable(_)))
                | PipelineError::Score(ScoreError::Embedding(EmbeddingError::Backend(BackendError::Unavailable(_))))
        )
    }

    /// 3 when a backend could not be reached, otherwise 2.
    pub fn exit_code(&self) -> i32 {
        if self.is_unavailable() {
            3
        } else {
            2
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every setting a run depends on. Each field has a config-file key of the
/// same name; command-line flags use the same keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub queries: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub benchmark: Option<BenchmarkKind>,
    pub out: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    /// Adapter base URL; when unset, the mock backends below are used.
    pub backend: Option<String>,
    pub replies: Option<PathBuf>,
    /// Embeddings file keyed by locator, served by the mock image encoder.
    pub mock_images: Option<PathBuf>,
    /// Embeddings file keyed by exact text, served by the mock text encoder.
    pub mock_texts: Option<PathBuf>,
    pub mock_dim: Option<usize>,
    pub prompts: Option<PathBuf>,
    pub prompt_mode: PromptMode,
    pub process: ProcessPolicy,
    pub retry_budget: u32,
    pub concurrency: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub components: Components,
    pub eo_agg: Aggregation,
    pub neo_agg: Aggregation,
    pub plan: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            queries: None,
            gallery: None,
            benchmark: None,
            out: PathBuf::from("cotmr-out"),
            embeddings: None,
            traces: None,
            backend: None,
            replies: None,
            mock_images: None,
            mock_texts: None,
            mock_dim: None,
            prompts: None,
            prompt_mode: PromptMode::default(),
            process: ProcessPolicy::default(),
            retry_budget: DEFAULT_RETRY_BUDGET,
            concurrency: DEFAULT_CONCURRENCY,
            seed: 0,
            lambda: None,
            mu: None,
            components: Components::ALL,
            eo_agg: Aggregation::Concat,
            neo_agg: Aggregation::Mean,
            plan: None,
        }
    }
}

/// Config keys, in documentation order.
pub const CONFIG_KEYS: [&str; 23] = [
    "queries",
    "gallery",
    "benchmark",
    "out",
    "embeddings",
    "traces",
    "backend",
    "replies",
    "mock_images",
    "mock_texts",
    "mock_dim",
    "prompts",
    "prompt_mode",
    "process",
    "retry_budget",
    "concurrency",
    "seed",
    "lambda",
    "mu",
    "components",
    "eo_agg",
    "neo_agg",
    "plan",
];

/// Parses a config document: either one JSON object, or `key = value`
/// lines with `#` comments.
pub fn parse_config_text(text: &str, path: &str) -> Result<Vec<(String, String)>, PipelineError> {
    let malformed = |line: usize, reason: String| PipelineError::Malformed { path: path.to_string(), line, reason };
    if text.trim_start().starts_with('{') {
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| malformed(e.line(), e.to_string()))?;
        return obj
            .into_iter()
            .map(|(k, v)| {
                let value = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                        .collect::<Vec<_>>()
                        .join(","),
                    other => return Err(malformed(1, format!("unsupported value for {k}: {other}"))),
                };
                Ok((k, value))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(i + 1, format!("expected key = value, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

const PATH_KEYS: [&str; 9] =
    ["queries", "gallery", "out", "embeddings", "traces", "replies", "mock_images", "mock_texts", "prompts"];

impl RunConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        for (k, v) in parse_config_text(&text, &path.display().to_string())? {
            let v = if PATH_KEYS.contains(&k.as_str()) && Path::new(&v).is_relative() {
                base.join(&v).display().to_string()
            } else {
                v
            };
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let bad = |e: String| PipelineError::Usage(format!("invalid value {value:?} for {key}: {e}"));
        let path = || Some(PathBuf::from(value));
        match key {
            "queries" => self.queries = path(),
            "gallery" => self.gallery = path(),
            "benchmark" => self.benchmark = Some(value.parse().map_err(bad)?),
            "out" => self.out = PathBuf::from(value),
            "embeddings" => self.embeddings = path(),
            "traces" => self.traces = path(),
            "backend" => self.backend = Some(value.to_string()).filter(|v| !v.is_empty()),
            "replies" => self.replies = path(),
            "mock_images" => self.mock_images = path(),
            "mock_texts" => self.mock_texts = path(),
            "mock_dim" => self.mock_dim = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "prompts" => self.prompts = path(),
            "prompt_mode" => self.prompt_mode = value.parse().map_err(bad)?,
            "process" => self.process = value.parse().map_err(bad)?,
            "retry_budget" => self.retry_budget = value.parse().map_err(|e| bad(format!("{e}")))?,
            "concurrency" => {
                self.concurrency = value.parse().map_err(|e| bad(format!("{e}")))?;
                if self.concurrency == 0 {
                    return Err(bad("must be at least 1".into()));
                }
            }
            "seed" => self.seed = value.parse().map_err(|e| bad(format!("{e}")))?,
            "lambda" => self.lambda = Some(parse_weight(value).map_err(bad)?),
            "mu" => self.mu = Some(parse_weight(value).map_err(bad)?),
            "components" => self.components = value.parse().map_err(bad)?,
            "eo_agg" => self.eo_agg = value.parse().map_err(bad)?,
            "neo_agg" => self.neo_agg = value.parse().map_err(bad)?,
            "plan" => {
                value.parse::<MetricPlan>().map_err(bad)?;
                self.plan = Some(value.to_string());
            }
            other => return Err(PipelineError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Effective values of every key, as a config file would spell them.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        let values: [Option<String>; 23] = [
            p(&self.queries),
            p(&self.gallery),
            self.benchmark.map(|b| b.to_string()),
            Some(self.out.display().to_string()),
            p(&self.embeddings),
            p(&self.traces),
            self.backend.clone(),
            p(&self.replies),
            p(&self.mock_images),
            p(&self.mock_texts),
            self.mock_dim.map(|d| d.to_string()),
            p(&self.prompts),
            Some(self.prompt_mode.flag().to_string()),
            Some(self.process.flag().to_string()),
            Some(self.retry_budget.to_string()),
            Some(self.concurrency.to_string()),
            Some(self.seed.to_string()),
            self.lambda.map(|v| v.to_string()),
            self.mu.map(|v| v.to_string()),
            Some(self.components.to_string()),
            Some(self.eo_agg.to_string()),
            Some(self.neo_agg.to_string()),
            self.plan.clone(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect()
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.embeddings.clone().unwrap_or_else(|| self.out.join(EMBEDDINGS_FILE))
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.traces.clone().unwrap_or_else(|| self.out.join(TRACES_DIR))
    }

    pub fn rankings_path(&self) -> PathBuf {
        self.out.join(RANKINGS_FILE)
    }

    pub fn scores_path(&self) -> PathBuf {
        self.out.join(SCORES_FILE)
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join(REPORT_FILE)
    }

    pub fn benchmark(&self) -> Result<BenchmarkKind, PipelineError> {
        self.benchmark
            .ok_or_else(|| PipelineError::Usage("no benchmark configured (set benchmark or --benchmark)".into()))
    }

    pub fn load_split(&self) -> Result<DatasetSplit, PipelineError> {
        let q = self.queries.as_ref().ok_or_else(|| PipelineError::Usage("no queries file configured".into()))?;
        let g = self.gallery.as_ref().ok_or_else(|| PipelineError::Usage("no gallery manifest configured".into()))?;
        Ok(load_split(q, g, self.benchmark()?)?)
    }

    pub fn load_gallery(&self) -> Result<GalleryManifest, PipelineError> {
        let g = self.gallery.as_ref().ok_or_else(|| PipelineError::Usage("no gallery manifest configured".into()))?;
        Ok(load_gallery(g)?)
    }

    /// Scoring config with weights from the config, else the benchmark
    /// defaults carried by the split.
    pub fn mgs_config(&self, split: &DatasetSplit) -> Result<MgsConfig, PipelineError> {
        let cfg = MgsConfig {
            lambda: self.lambda.unwrap_or(split.default_lambda),
            mu: self.mu.unwrap_or(split.default_mu),
            eo_aggregation: self.eo_agg,
            neo_aggregation: self.neo_agg,
            ..MgsConfig::default()
        }
        .with_components(self.components);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn metric_plan(&self, split: &DatasetSplit) -> MetricPlan {
        self.plan
            .as_deref()
            .and_then(|p| p.parse().ok())
            .unwrap_or_else(|| MetricPlan::for_kind(split.benchmark_kind))
    }

    pub fn prompt_library(&self) -> Result<PromptLibrary, PipelineError> {
        Ok(match &self.prompts {
            Some(dir) => PromptLibrary::load_dir(dir)?,
            None => PromptLibrary::builtin(),
        })
    }

    fn prompts_identity(&self) -> Result<String, PipelineError> {
        let Some(dir) = &self.prompts else { return Ok("builtin".into()) };
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut h = Sha256::new();
        for p in entries {
            h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            h.update(std::fs::read(&p).map_err(io_err(&p))?);
        }
        Ok(hex::encode(h.finalize()))
    }

    fn chat_identity(&self) -> Result<String, PipelineError> {
        match (&self.backend, &self.replies) {
            (Some(url), _) => Ok(format!("http:{url}")),
            (None, Some(r)) => Ok(format!("mock:{}", sha256_file(r)?)),
            (None, None) => Ok("none".into()),
        }
    }

    fn embed_identity(&self) -> Result<String, PipelineError> {
        if let Some(url) = &self.backend {
            return Ok(format!("http:{url}"));
        }
        let mut parts = vec!["mock".to_string()];
        if let Some(p) = &self.mock_images {
            parts.push(format!("images={}", sha256_file(p)?));
        }
        if let Some(p) = &self.mock_texts {
            parts.push(format!("texts={}", sha256_file(p)?));
        }
        if let Some(d) = self.mock_dim {
            parts.push(format!("dim={d}"));
        }
        Ok(parts.join(":"))
    }

    fn split_fields(&self, fields: &mut BTreeMap<String, String>) -> Result<(), PipelineError> {
        if let Some(q) = &self.queries {
            fields.insert("queries_sha256".into(), sha256_file(q)?);
        }
        if let Some(g) = &self.gallery {
            fields.insert("gallery_sha256".into(), sha256_file(g)?);
        }
        if let Some(b) = self.benchmark {
            fields.insert("benchmark".into(), b.to_string());
        }
        Ok(())
    }

    /// Fingerprint of the embedding stage.
    pub fn embed_fingerprint(&self) -> Result<Fingerprint, PipelineError> {
        let mut f = BTreeMap::new();
        if let Some(g) = &self.gallery {
            f.insert("gallery_sha256".into(), sha256_file(g)?);
        }
        f.insert("embed_backend".into(), self.embed_identity()?);
        Ok(Fingerprint::new(f))
    }

    /// Fingerprint of the reasoning stage.
    pub fn reason_fingerprint(&self) -> Result<Fingerprint, PipelineError> {
        let mut f = BTreeMap::new();
        self.split_fields(&mut f)?;
        f.insert("prompt_mode".into(), self.prompt_mode.flag().into());
        f.insert("process".into(), self.process.flag().into());
        f.insert("retry_budget".into(), self.retry_budget.to_string());
        f.insert("chat_backend".into(), self.chat_identity()?);
        f.insert("prompts".into(), self.prompts_identity()?);
        Ok(Fingerprint::new(f))
    }

    /// Fingerprint of everything behind rankings, score dumps and reports.
    pub fn run_fingerprint(&self, split: &DatasetSplit, mgs: &MgsConfig) -> Result<Fingerprint, PipelineError> {
        let mut f = self.reason_fingerprint()?.fields;
        f.insert("lambda".into(), mgs.lambda.to_string());
        f.insert("mu".into(), mgs.mu.to_string());
        f.insert("components".into(), mgs.components().to_string());
        f.insert("eo_agg".into(), mgs.eo_aggregation.to_string());
        f.insert("neo_agg".into(), mgs.neo_aggregation.to_string());
        f.insert("eo_separator".into(), format!("{CONCAT_SEPARATOR:?}"));
        f.insert("embed_backend".into(), self.embed_identity()?);
        let emb = self.embeddings_path();
        if emb.exists() {
            f.insert("embeddings_sha256".into(), sha256_file(&emb)?);
            f.insert("embed_model".into(), read_embeddings(&emb)?.model);
        }
        f.insert("plan".into(), self.metric_plan(split).name);
        f.insert("seed".into(), self.seed.to_string());
        Ok(Fingerprint::new(f))
    }

    /// The embedding backend: the adapter when `backend` is set, else the
    /// mock encoder over the configured tables.
    pub fn embed_backend(&self) -> Result<Box<dyn EmbedBackend>, PipelineError> {
        if let Some(url) = &self.backend {
            return Ok(Box::new(HttpBackend::new(url.clone()).connect()?));
        }
        let images = self.mock_images.as_ref().map(|p| read_embeddings(p)).transpose()?;
        let texts = self.mock_texts.as_ref().map(|p| read_embeddings(p)).transpose()?;
        let dim = self
            .mock_dim
            .or(images.as_ref().map(|f| f.dim))
            .or(texts.as_ref().map(|f| f.dim))
            .ok_or_else(|| {
                PipelineError::Usage("no embedding backend: set backend, mock_images, mock_texts or mock_dim".into())
            })?;
        let mut mock = MockEmbedder::new("mock-embedder", dim);
        if let Some(f) = images {
            mock = mock.with_images(f.records);
        }
        if let Some(f) = texts {
            mock = mock.with_texts(f.records);
        }
        Ok(Box::new(mock))
    }

    /// The chat backend: the adapter when `backend` is set, else canned
    /// replies from `replies`.
    pub fn chat_backend(&self, gallery: &GalleryManifest) -> Result<Box<dyn ChatBackend>, PipelineError> {
        if let Some(url) = &self.backend {
            let locators =
                gallery.entries.iter().map(|e| (e.image_id.clone(), e.locator.clone())).collect::<HashMap<_, _>>();
            return Ok(Box::new(HttpBackend::new(url.clone()).with_locators(locators).connect()?));
        }
        let path = self
            .replies
            .as_ref()
            .ok_or_else(|| PipelineError::Usage("no chat backend: set backend or replies".into()))?;
        let mock = MockChatBackend::load(path).map_err(PipelineError::Usage)?;
        Ok(Box::new(mock))
    }
}

fn parse_weight(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if !v.is_finite() || v < 0.0 {
        return Err("must be a finite number >= 0".into());
    }
    Ok(v)
}

/// Applies `f` to every item with at most `concurrency` workers, keeping
/// input order in the result.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], concurrency: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = concurrency.max(1).min(items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no poisoned workers").into_iter().map(|r| r.expect("every item mapped")).collect()
}

fn header_line(format: &str, fingerprint: &Fingerprint, extra: &[(&str, serde_json::Value)]) -> String {
    let mut h = serde_json::json!({ "format": format, "fingerprint": fingerprint });
    for (k, v) in extra {
        h[*k] = v.clone();
    }
    h.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RankingRecord {
    query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranking: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failed: Option<String>,
}

/// A rankings artifact: one ranking or failure per query, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingsFile {
    pub fingerprint: Fingerprint,
    pub gallery_size: usize,
    pub rankings: Vec<Ranking>,
    /// `(query_id, reason)`.
    pub failed: Vec<(String, String)>,
}

impl RankingsFile {
    pub fn render(&self) -> String {
        let mut records: Vec<RankingRecord> = self
            .rankings
            .iter()
            .map(|r| RankingRecord { query_id: r.query_id.clone(), ranking: Some(r.entries.clone()), failed: None })
            .chain(self.failed.iter().map(|(q, why)| RankingRecord {
                query_id: q.clone(),
                ranking: None,
                failed: Some(why.clone()),
            }))
            .collect();
        records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let mut out = header_line(
            RANKINGS_FORMAT,
            &self.fingerprint,
            &[("gallery_size", serde_json::json!(self.gallery_size))],
        );
        out.push('\n');
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("ranking serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        write_file(path, &self.render())
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let malformed =
            |line: usize, reason: String| PipelineError::Malformed { path: path.display().to_string(), line, reason };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| malformed(1, "empty rankings file".into()))?;
        let header: serde_json::Value = serde_json::from_str(header).map_err(|e| malformed(1, e.to_string()))?;
        if header["format"] != RANKINGS_FORMAT {
            return Err(malformed(1, format!("expected format {RANKINGS_FORMAT}")));
        }
        let fingerprint: Fingerprint =
            serde_json::from_value(header["fingerprint"].clone()).map_err(|e| malformed(1, e.to_string()))?;
        let gallery_size = header["gallery_size"].as_u64().unwrap_or(0) as usize;
        let mut rankings = Vec::new();
        let mut failed = Vec::new();
        for (i, line) in lines {
            let r: RankingRecord = serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
            match (r.ranking, r.failed) {
                (Some(entries), None) => rankings.push(Ranking { query_id: r.query_id, entries }),
                (None, Some(why)) => failed.push((r.query_id, why)),
                _ => return Err(malformed(i + 1, "record needs exactly one of ranking or failed".into())),
            }
        }
        Ok(Self { fingerprint, gallery_size, rankings, failed })
    }

    pub fn failed_ids(&self) -> Vec<String> {
        self.failed.iter().map(|(q, _)| q.clone()).collect()
    }
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    query_id: &'a str,
    scores: ScoreArrays<'a>,
}

#[derive(Serialize)]
struct ScoreArrays<'a> {
    base: &'a [f64],
    pos: &'a [f64],
    neg: &'a [f64],
    fused: &'a [f64],
}

pub fn render_scores(fingerprint: &Fingerprint, breakdowns: &[ScoreBreakdown]) -> String {
    let mut out = header_line(SCORES_FORMAT, fingerprint, &[]);
    out.push('\n');
    let mut sorted: Vec<&ScoreBreakdown> = breakdowns.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    for b in sorted {
        let line = ScoreLine {
            query_id: &b.query_id,
            scores: ScoreArrays { base: &b.base, pos: &b.pos, neg: &b.neg, fused: &b.fused },
        };
        out.push_str(&serde_json::to_string(&line).expect("scores serialize"));
        out.push('\n');
    }
    out
}

pub fn render_report(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn read_report(path: &Path) -> Result<EvalReport, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Malformed { path: path.display().to_string(), line: e.line(), reason: e.to_string() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSummary {
    pub path: PathBuf,
    pub n_images: usize,
    pub dim: usize,
    pub model: String,
}

/// Embeds every gallery image and writes the embeddings file.
pub fn run_embed(cfg: &RunConfig) -> Result<EmbedSummary, PipelineError> {
    let gallery = cfg.load_gallery()?;
    let backend = cfg.embed_backend()?;
    let index = build_gallery_index(&gallery, GallerySource::Backend(backend.as_ref()))?;
    let path = cfg.embeddings_path();
    let fp = cfg.embed_fingerprint()?;
    write_embeddings(&path, index.dim, &index.model_id, &index.records(), Some(&fp))?;
    log::info!("embedded {} gallery images into {}", index.len(), path.display());
    Ok(EmbedSummary { path, n_images: index.len(), dim: index.dim, model: index.model_id })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonSummary {
    pub trace_path: PathBuf,
    pub n_total: usize,
    /// `(query_id, error)` for queries without a usable output.
    pub failed: Vec<(String, String)>,
}

/// Reasons every split query and writes the trace file.
pub fn run_reason(cfg: &RunConfig) -> Result<ReasonSummary, PipelineError> {
    let split = cfg.load_split()?;
    let library = cfg.prompt_library()?;
    let backend = cfg.chat_backend(&split.gallery)?;
    let mut reasoner = Reasoner::new(&library, backend.as_ref());
    reasoner.mode = cfg.prompt_mode;
    reasoner.process = cfg.process;
    reasoner.retry = RetryPolicy { budget: cfg.retry_budget };
    let results = reasoner.reason_all(&split.queries, cfg.concurrency);
    let traces: Vec<ReasoningTrace> = results.iter().map(|r| r.trace.clone()).collect();
    let trace_path = cfg.traces_dir().join(TRACE_FILE);
    write_traces(&trace_path, &traces, Some(&cfg.reason_fingerprint()?))?;
    let mut failed = Vec::new();
    let mut unavailable = None;
    for r in &results {
        if let Err(e) = &r.result {
            log::warn!("query {} failed: {e}", r.query_id);
            if let ReasonError::Backend(b @ BackendError::Unavailable(_)) = e {
                unavailable.get_or_insert_with(|| b.clone());
            }
            failed.push((r.query_id.clone(), e.to_string()));
        }
    }
    if let Some(b) = unavailable {
        return Err(b.into());
    }
    Ok(ReasonSummary { trace_path, n_total: results.len(), failed })
}

/// Loaded inputs shared by the scoring stages.
pub struct ScoringInputs {
    pub split: DatasetSplit,
    pub index: GalleryIndex,
    pub traces: Vec<ReasoningTrace>,
}

fn load_index(cfg: &RunConfig, gallery: &GalleryManifest) -> Result<GalleryIndex, PipelineError> {
    let path = cfg.embeddings_path();
    if !path.exists() {
        return Err(PipelineError::Usage(format!(
            "embeddings file {} not found; run `cotmr embed` first",
            path.display()
        )));
    }
    Ok(build_gallery_index(gallery, GallerySource::File(&path))?)
}

fn load_run_traces(cfg: &RunConfig, effective: bool, force: bool) -> Result<Vec<ReasoningTrace>, PipelineError> {
    let path = trace_file(&cfg.traces_dir());
    if !path.exists() {
        return Err(PipelineError::Usage(format!("trace file {} not found; run `cotmr reason` first", path.display())));
    }
    let expected = cfg.reason_fingerprint()?;
    if let Some(found) = trace_fingerprint(&path)? {
        if found.hash != expected.hash && !force {
            return Err(PipelineError::FingerprintMismatch {
                artifact: path.display().to_string(),
                expected: expected.short().into(),
                found: found.short().into(),
            });
        }
    }
    Ok(if effective { load_effective_traces(&path)? } else { load_traces(&path)? })
}

impl ScoringInputs {
    pub fn load(cfg: &RunConfig, effective_traces: bool, force: bool) -> Result<Self, PipelineError> {
        let split = cfg.load_split()?;
        let index = load_index(cfg, &split.gallery)?;
        let traces = load_run_traces(cfg, effective_traces, force)?;
        Ok(Self { split, index, traces })
    }

    /// Reasoning outputs by query id, and `(query_id, reason)` for split
    /// queries without one. Both sorted by query id.
    pub fn outputs(&self) -> (Vec<ReasoningOutput>, Vec<(String, String)>) {
        let by_id: HashMap<&str, &ReasoningTrace> = self.traces.iter().map(|t| (t.query_id.as_str(), t)).collect();
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for q in &self.split.queries {
            match by_id.get(q.query_id.as_str()) {
                None => failed.push((q.query_id.clone(), "no reasoning trace".to_string())),
                Some(t) => match t.output() {
                    Ok(o) => ok.push(o),
                    Err(e) => failed.push((q.query_id.clone(), t.failure.clone().unwrap_or(e))),
                },
            }
        }
        ok.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        failed.sort();
        (ok, failed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieveSummary {
    pub rankings_path: PathBuf,
    pub scores_path: PathBuf,
    pub n_ranked: usize,
    pub failed: Vec<(String, String)>,
}

fn score_outputs(
    outputs: &[ReasoningOutput],
    index: &GalleryIndex,
    backend: &dyn EmbedBackend,
    mgs: &MgsConfig,
    concurrency: usize,
) -> Result<(Vec<ScoreBreakdown>, Vec<(String, String)>), PipelineError> {
    let encoder = CachedTextEncoder::new(backend, index.dim);
    let results = parallel_map(outputs, concurrency, |o| score_query(o, index, &encoder, mgs));
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (o, r) in outputs.iter().zip(results) {
        match r {
            Ok(b) => ok.push(b),
            Err(e) => {
                let e = PipelineError::Score(e);
                if e.is_unavailable() {
                    return Err(e);
                }
                log::warn!("query {} not scored: {e}", o.query_id);
                failed.push((o.query_id.clone(), e.to_string()));
            }
        }
    }
    Ok((ok, failed))
}

/// Scores and ranks every reasoned query; writes rankings and score dump.
pub fn run_retrieve(cfg: &RunConfig, force: bool) -> Result<RetrieveSummary, PipelineError> {
    let inputs = ScoringInputs::load(cfg, false, force)?;
    let mgs = cfg.mgs_config(&inputs.split)?;
    let fingerprint = cfg.run_fingerprint(&inputs.split, &mgs)?;
    let (outputs, mut failed) = inputs.outputs();
    let backend = cfg.embed_backend()?;
    let (breakdowns, score_failed) = score_outputs(&outputs, &inputs.index, backend.as_ref(), &mgs, cfg.concurrency)?;
    failed.extend(score_failed);
    failed.sort();
    let rankings = breakdowns.iter().map(|b| rank(b, &inputs.index)).collect::<Result<Vec<_>, _>>()?;
    let file = RankingsFile { fingerprint: fingerprint.clone(), gallery_size: inputs.index.len(), rankings, failed };
    let rankings_path = cfg.rankings_path();
    file.write(&rankings_path)?;
    let scores_path = cfg.scores_path();
    write_file(&scores_path, &render_scores(&fingerprint, &breakdowns))?;
    Ok(RetrieveSummary { rankings_path, scores_path, n_ranked: file.rankings.len(), failed: file.failed })
}

/// Evaluates one or more rankings files. All of them must carry the
/// fingerprint of the current config unless `force` is set.
pub fn run_evaluate(cfg: &RunConfig, rankings: &[PathBuf], force: bool) -> Result<EvalReport, PipelineError> {
    let split = cfg.load_split()?;
    let mgs = cfg.mgs_config(&split)?;
    let expected = cfg.run_fingerprint(&split, &mgs)?;
    let paths: Vec<PathBuf> = if rankings.is_empty() { vec![cfg.rankings_path()] } else { rankings.to_vec() };
    let mut all = Vec::new();
    let mut failed = Vec::new();
    let mut seen = BTreeSet::new();
    for p in &paths {
        if !p.exists() {
            return Err(PipelineError::Usage(format!("rankings file {} not found; run `cotmr retrieve` first", p.display())));
        }
        let file = RankingsFile::read(p)?;
        if file.fingerprint.hash != expected.hash && !force {
            return Err(PipelineError::FingerprintMismatch {
                artifact: p.display().to_string(),
                expected: expected.short().into(),
                found: file.fingerprint.short().into(),
            });
        }
        for q in file.rankings.iter().map(|r| &r.query_id).chain(file.failed.iter().map(|(q, _)| q)) {
            if !seen.insert(q.clone()) {
                return Err(PipelineError::Usage(format!("query {q} appears in more than one rankings file")));
            }
        }
        failed.extend(file.failed_ids());
        all.extend(file.rankings);
    }
    let plan = cfg.metric_plan(&split);
    let report = evaluate_split(&all, &split, &plan, &failed, expected)?;
    write_file(&cfg.report_path(), &render_report(&report))?;
    Ok(report)
}

/// Parameter grid for a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
    /// `(label, components)`.
    pub component_sets: Vec<(String, Components)>,
}

impl AblationGrid {
    pub fn size(&self) -> usize {
        self.lambdas.len() * self.mus.len() * self.component_sets.len()
    }

    /// The five standard component rows at fixed weights.
    pub fn standard_rows(lambda: f64, mu: f64) -> Self {
        Self {
            lambdas: vec![lambda],
            mus: vec![mu],
            component_sets: ABLATION_ROWS.iter().map(|(l, c)| (l.to_string(), *c)).collect(),
        }
    }

    /// Parses `;`-separated component sets such as `base;pos,neg;all`.
    pub fn parse_component_sets(s: &str) -> Result<Vec<(String, Components)>, PipelineError> {
        s.split(';')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                let c: Components = p.parse().map_err(PipelineError::Usage)?;
                Ok((c.to_string(), c))
            })
            .collect()
    }

    pub fn parse_weights(s: &str) -> Result<Vec<f64>, PipelineError> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| parse_weight(p).map_err(|e| PipelineError::Usage(format!("bad weight {p:?}: {e}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub label: String,
    pub lambda: f64,
    pub mu: f64,
    pub components: String,
    pub eo_agg: Aggregation,
    pub neo_agg: Aggregation,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub format: String,
    pub fingerprint: Fingerprint,
    pub points: Vec<AblationPoint>,
}

impl AblationTable {
    pub fn render_text(&self, plan: &MetricPlan) -> String {
        let mut out = String::new();
        let Some(first) = self.points.first() else { return out };
        let cols = first.report.columns(plan);
        out.push_str(&format!("{:<8} {:>6} {:>6} {:<14}", "row", "lambda", "mu", "components"));
        for c in &cols {
            out.push_str(&format!(" {c:>8}"));
        }
        out.push_str(&format!(" {:>10}\n", "mean_rank"));
        for p in &self.points {
            out.push_str(&format!("{:<8} {:>6} {:>6} {:<14}", p.label, p.lambda, p.mu, p.components));
            for c in &cols {
                let v = p.report.display.get(c).map(String::as_str).unwrap_or("-");
                out.push_str(&format!(" {v:>8}"));
            }
            let rank = p.report.mean_target_rank.map(|r| format!("{r:.3}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(" {rank:>10}\n"));
        }
        out
    }
}

/// Sweeps the grid over cached traces. Similarity rows are computed once
/// per query and reused by every point.
pub fn run_ablate(cfg: &RunConfig, grid: &AblationGrid, force: bool) -> Result<AblationTable, PipelineError> {
    if grid.size() == 0 {
        return Err(PipelineError::Usage("ablation grid is empty".into()));
    }
    let inputs = ScoringInputs::load(cfg, false, force)?;
    let (outputs, mut failed) = inputs.outputs();
    let backend = cfg.embed_backend()?;
    let encoder = CachedTextEncoder::new(backend.as_ref(), inputs.index.dim);
    let rows = parallel_map(&outputs, cfg.concurrency, |o| QueryRows::compute(o, &inputs.index, &encoder));
    let mut ok_rows = Vec::new();
    for (o, r) in outputs.iter().zip(rows) {
        match r {
            Ok(r) => ok_rows.push(r),
            Err(e) => {
                let e = PipelineError::Score(e);
                if e.is_unavailable() {
                    return Err(e);
                }
                failed.push((o.query_id.clone(), e.to_string()));
            }
        }
    }
    let failed_ids: Vec<String> = failed.iter().map(|(q, _)| q.clone()).collect();
    let plan = cfg.metric_plan(&inputs.split);
    let base_mgs = cfg.mgs_config(&inputs.split)?;
    let mut points = Vec::new();
    for (label, components) in &grid.component_sets {
        for &lambda in &grid.lambdas {
            for &mu in &grid.mus {
                let mgs = MgsConfig { lambda, mu, ..base_mgs }.with_components(*components);
                let rankings = ok_rows
                    .iter()
                    .map(|r| Ok(rank(&r.fuse(&mgs)?, &inputs.index)?))
                    .collect::<Result<Vec<_>, PipelineError>>()?;
                let fp = cfg.run_fingerprint(&inputs.split, &mgs)?;
                let report = evaluate_split(&rankings, &inputs.split, &plan, &failed_ids, fp)?;
                points.push(AblationPoint {
                    label: label.clone(),
                    lambda,
                    mu,
                    components: components.to_string(),
                    eo_agg: mgs.eo_aggregation,
                    neo_agg: mgs.neo_aggregation,
                    report,
                });
            }
        }
    }
    let table = AblationTable {
        format: ABLATION_FORMAT.into(),
        fingerprint: cfg.reason_fingerprint()?,
        points,
    };
    let mut text = serde_json::to_string_pretty(&table).expect("ablation serializes");
    text.push('\n');
    write_file(&cfg.out.join(ABLATION_FILE), &text)?;
    Ok(table)
}

/// Human-readable transcript of stored traces, optionally for one query.
pub fn trace_show(cfg: &RunConfig, query_id: Option<&str>) -> Result<String, PipelineError> {
    let traces = load_effective_traces(&cfg.traces_dir())?;
    let selected: Vec<&ReasoningTrace> = match query_id {
        Some(q) => {
            let t = traces
                .iter()
                .find(|t| t.query_id == q)
                .ok_or_else(|| TraceError::UnknownQuery(q.to_string()))?;
            vec![t]
        }
        None => traces.iter().collect(),
    };
    let mut out = String::new();
    for t in selected {
        out.push_str(&format!(
            "=== query {} | reference {} | {} | {} process{}\n",
            t.query_id,
            t.reference_image,
            t.prompt_mode,
            t.process,
            if t.edited { " | edited" } else { "" }
        ));
        out.push_str(&format!("modification: {}\n", t.modification_text));
        for p in &t.passes {
            out.push_str(&format!("--- {} scale ({} retries, backend {})\n", p.scale, p.retries, p.backend));
            out.push_str(p.reply.trim_end());
            out.push('\n');
        }
        match t.output() {
            Ok(o) => out.push_str(&format!(
                "=> caption: {}\n=> existent: {:?}\n=> nonexistent: {:?}\n",
                o.target_caption, o.existent_objects, o.nonexistent_objects
            )),
            Err(e) => out.push_str(&format!("=> failed: {}\n", t.failure.as_deref().unwrap_or(&e))),
        }
    }
    Ok(out)
}

/// Replaces one stored reply and re-parses it; see [`edit_and_replay`].
pub fn trace_edit(cfg: &RunConfig, query_id: &str, scale: Scale, reply: &str) -> Result<ReasoningOutput, PipelineError> {
    Ok(edit_and_replay(&cfg.traces_dir(), query_id, scale, reply)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySummary {
    pub rescored: Vec<String>,
    pub rankings_path: PathBuf,
    pub report: EvalReport,
}

/// Re-scores only the queries whose traces were edited, merges them into
/// the existing rankings and re-evaluates. Writes the `*.replayed.*` files
/// and leaves the originals alone.
pub fn trace_replay(cfg: &RunConfig, force: bool) -> Result<ReplaySummary, PipelineError> {
    let inputs = ScoringInputs::load(cfg, true, force)?;
    let mgs = cfg.mgs_config(&inputs.split)?;
    let base_fp = cfg.run_fingerprint(&inputs.split, &mgs)?;
    let existing_path = cfg.rankings_path();
    if !existing_path.exists() {
        return Err(PipelineError::Usage(format!(
            "rankings file {} not found; run `cotmr retrieve` first",
            existing_path.display()
        )));
    }
    let existing = RankingsFile::read(&existing_path)?;
    if existing.fingerprint.hash != base_fp.hash && !force {
        return Err(PipelineError::FingerprintMismatch {
            artifact: existing_path.display().to_string(),
            expected: base_fp.short().into(),
            found: existing.fingerprint.short().into(),
        });
    }
    let edited: BTreeSet<String> = inputs.traces.iter().filter(|t| t.edited).map(|t| t.query_id.clone()).collect();
    let (outputs, _) = inputs.outputs();
    let targets: Vec<ReasoningOutput> = outputs.into_iter().filter(|o| edited.contains(&o.query_id)).collect();
    let backend = cfg.embed_backend()?;
    let (breakdowns, score_failed) = score_outputs(&targets, &inputs.index, backend.as_ref(), &mgs, cfg.concurrency)?;
    let mut rankings: BTreeMap<String, Ranking> =
        existing.rankings.into_iter().map(|r| (r.query_id.clone(), r)).collect();
    let mut failed: BTreeMap<String, String> = existing.failed.into_iter().collect();
    for b in &breakdowns {
        failed.remove(&b.query_id);
        rankings.insert(b.query_id.clone(), rank(b, &inputs.index)?);
    }
    for (q, why) in score_failed {
        rankings.remove(&q);
        failed.insert(q, why);
    }
    let mut fields = base_fp.fields.clone();
    if !edited.is_empty() {
        fields.insert("edited_queries".into(), edited.iter().cloned().collect::<Vec<_>>().join(","));
    }
    let fingerprint = Fingerprint::new(fields);
    let file = RankingsFile {
        fingerprint: fingerprint.clone(),
        gallery_size: inputs.index.len(),
        rankings: rankings.into_values().collect(),
        failed: failed.into_iter().collect(),
    };
    let rankings_path = cfg.out.join(REPLAYED_RANKINGS_FILE);
    file.write(&rankings_path)?;
    let plan = cfg.metric_plan(&inputs.split);
    let report = evaluate_split(&file.rankings, &inputs.split, &plan, &file.failed_ids(), fingerprint)?;
    write_file(&cfg.out.join(REPLAYED_REPORT_FILE), &render_report(&report))?;
    Ok(ReplaySummary { rescored: breakdowns.into_iter().map(|b| b.query_id).collect(), rankings_path, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub config_path: PathBuf,
    pub n_queries: usize,
    pub gallery_size: usize,
}

/// Writes a synthetic split with mock fixtures and a ready-to-use config
/// file into `dir`.
pub fn run_synth(
    dir: &Path,
    seed: u64,
    n_queries: usize,
    gallery_size: usize,
    dim: usize,
) -> Result<SynthSummary, PipelineError> {
    let (split, planted) = crate::query_model::generate_synthetic_split(seed, n_queries, gallery_size, dim)?;
    write_file(&dir.join("queries.jsonl"), &write_queries(&split.queries))?;
    write_file(&dir.join("gallery.jsonl"), &write_gallery(&split.gallery))?;
    let image_records: Vec<(String, Vec<f64>)> = planted
        .images
        .iter()
        .map(|(id, v)| (split.gallery.locator(id).unwrap_or(id).to_string(), v.clone()))
        .collect();
    write_embeddings(&dir.join("mock_images.emb.jsonl"), dim, "mock-planted", &image_records, None)?;
    write_embeddings(&dir.join("mock_texts.emb.jsonl"), dim, "mock-planted", &planted.texts, None)?;
    write_file(&dir.join("replies.jsonl"), &MockChatBackend::from_planted(&split, &planted).to_file_string())?;
    let config = format!(
        "# synthetic split, seed {seed}\n\
         queries = queries.jsonl\n\
         gallery = gallery.jsonl\n\
         benchmark = synthetic\n\
         replies = replies.jsonl\n\
         mock_images = mock_images.emb.jsonl\n\
         mock_texts = mock_texts.emb.jsonl\n\
         seed = {seed}\n\
         out = run\n"
    );
    let config_path = dir.join(CONFIG_FILE);
    write_file(&config_path, &config)?;
    Ok(SynthSummary { config_path, n_queries, gallery_size })
}

/// Runs embed, reason, retrieve and evaluate in order.
pub fn run_all(cfg: &RunConfig) -> Result<(ReasonSummary, RetrieveSummary, EvalReport), PipelineError> {
    run_embed(cfg)?;
    let reason = run_reason(cfg)?;
    let retrieve = run_retrieve(cfg, false)?;
    let report = run_evaluate(cfg, &[], false)?;
    Ok((reason, retrieve, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_config() {
        let pairs = parse_config_text("# c\nlambda = 0.5\n\nprocess=one\n", "x").unwrap();
        let mut cfg = RunConfig::default();
        for (k, v) in &pairs {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(cfg.lambda, Some(0.5));
        assert_eq!(cfg.process, ProcessPolicy::OneProcess);
    }

    #[test]
    fn json_config() {
        let pairs = parse_config_text(r#"{"mu": 0.3, "components": ["base","neg"], "concurrency": 2}"#, "x").unwrap();
        let mut cfg = RunConfig::default();
        for (k, v) in &pairs {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(cfg.mu, Some(0.3));
        assert_eq!(cfg.components, Components { base: true, pos: false, neg: true });
        assert_eq!(cfg.concurrency, 2);
    }

    #[test]
    fn bad_config_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("lambda", "-1").is_err());
        assert!(cfg.set("concurrency", "0").is_err());
        assert!(cfg.set("colour", "red").is_err());
        assert!(cfg.set("plan", "imagenet").is_err());
        assert!(parse_config_text("no equals sign", "x").is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "0.25").unwrap();
        cfg.set("benchmark", "cirr").unwrap();
        cfg.set("neo_agg", "concat").unwrap();
        let mut back = RunConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(parallel_map(&items, 4, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Usage("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::Backend(BackendError::Unavailable("down".into())).exit_code(), 3);
    }
}
