//! Multi-scale reasoning against a chat backend.
//!
//! The image pass yields the target caption; the object pass yields the
//! existent and nonexistent object lists. Replies end with marker lines
//! (see [`crate::prompting::output_contract`]) which the parsers here turn
//! into a [`ReasoningOutput`]. Every pass is recorded in a
//! [`ReasoningTrace`] so a reply can be inspected, edited and re-parsed
//! later without calling the model again.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatBackend};
use crate::evaluation::Fingerprint;
use crate::prompting::{
    ChatMessage, ChatRequest, Part, PromptLibrary, PromptMode, Role, Scale, CAPTION_MARKER,
    EXISTENT_MARKER, NONEXISTENT_MARKER,
};
use crate::query_model::{ComposedQuery, DatasetSplit, PlantedEmbeddings};

pub const TRACE_FORMAT: &str = "cotmr-trace-v1";
pub const REPLIES_FORMAT: &str = "cotmr-replies-v1";
pub const TRACE_FILE: &str = "traces.jsonl";
pub const EDITED_TRACE_FILE: &str = "traces.edited.jsonl";

/// Longest object list kept from a reply.
pub const MAX_OBJECTS: usize = 10;
pub const DEFAULT_RETRY_BUDGET: u32 = 2;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const RETRY_REMINDER: &str =
    "Your previous reply omitted the required final markers. End with them now.";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("reply has no {0} line")]
    MissingMarker(&'static str),
    #[error("caption after {CAPTION_MARKER} is empty")]
    EmptyCaption,
    #[error("payload after {marker} is not a JSON array of strings: {payload}")]
    PayloadNotArray { marker: &'static str, payload: String },
}

#[derive(Debug, thiserror::Error)]
pub enum ReasonError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{scale} reply unparseable after {attempts} attempt(s): {error}")]
    ParseFailure {
        scale: Scale,
        error: ParseError,
        attempts: u32,
        raw: String,
    },
    #[error("{scale} reply has an empty caption after {attempts} attempt(s)")]
    EmptyCaption { scale: Scale, attempts: u32, raw: String },
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed trace record: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("no trace for query {0}")]
    UnknownQuery(String),
    #[error("trace for query {query_id} has no {scale} pass")]
    UnknownPass { query_id: String, scale: Scale },
    #[error("edited {scale} reply does not parse: {error}")]
    ParseFailure { scale: Scale, error: ParseError },
}

fn trace_io(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessPolicy {
    #[default]
    TwoProcess,
    OneProcess,
}

impl ProcessPolicy {
    pub fn flag(self) -> &'static str {
        match self {
            ProcessPolicy::TwoProcess => "two",
            ProcessPolicy::OneProcess => "one",
        }
    }
}

impl fmt::Display for ProcessPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for ProcessPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two" | "two_process" => Ok(ProcessPolicy::TwoProcess),
            "one" | "one_process" => Ok(ProcessPolicy::OneProcess),
            other => Err(format!("unknown process policy '{other}' (expected two or one)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningOutput {
    pub query_id: String,
    pub target_caption: String,
    pub existent_objects: Vec<String>,
    pub nonexistent_objects: Vec<String>,
    pub trace_image_scale: String,
    pub trace_object_scale: String,
}

impl ReasoningOutput {
    /// Checks the caption and object-list invariants.
    pub fn check(&self) -> Result<(), String> {
        let caption = &self.target_caption;
        if caption.trim().is_empty() || caption.contains('\n') || caption.trim() != caption {
            return Err(format!("bad caption {caption:?}"));
        }
        for (name, list) in [
            ("existent", &self.existent_objects),
            ("nonexistent", &self.nonexistent_objects),
        ] {
            if list.len() > MAX_OBJECTS {
                return Err(format!("{name} list has {} entries", list.len()));
            }
            let mut seen = HashSet::new();
            for o in list {
                if o.is_empty() || o.trim() != o {
                    return Err(format!("{name} entry {o:?} is empty or untrimmed"));
                }
                if !seen.insert(o) {
                    return Err(format!("{name} entry {o:?} repeated"));
                }
            }
        }
        Ok(())
    }
}

/// Byte offset of the last occurrence of `marker` that starts a word, so
/// `EXISTENT_OBJECTS:` never matches inside `NONEXISTENT_OBJECTS:`.
fn last_marker(raw: &str, marker: &str) -> Option<usize> {
    raw.rmatch_indices(marker)
        .map(|(i, _)| i)
        .find(|&i| {
            raw[..i]
                .chars()
                .next_back()
                .is_none_or(|c| !(c.is_alphanumeric() || c == '_'))
        })
}

fn rest_of_line(s: &str) -> &str {
    s.split(['\n', '\r']).next().unwrap_or("")
}

/// Returns the trimmed text after the last `FINAL_CAPTION:` on its line.
pub fn parse_image_reply(raw: &str) -> Result<String, ParseError> {
    let at = last_marker(raw, CAPTION_MARKER).ok_or(ParseError::MissingMarker(CAPTION_MARKER))?;
    let caption = rest_of_line(&raw[at + CAPTION_MARKER.len()..]).trim();
    if caption.is_empty() {
        return Err(ParseError::EmptyCaption);
    }
    Ok(caption.to_string())
}

fn clean_objects(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .filter(|s| seen.insert(s.clone()))
        .take(MAX_OBJECTS)
        .collect()
}

fn parse_list(raw: &str, marker: &'static str) -> Result<Vec<String>, ParseError> {
    let at = last_marker(raw, marker).ok_or(ParseError::MissingMarker(marker))?;
    let payload = &raw[at + marker.len()..];
    let not_array = || ParseError::PayloadNotArray {
        marker,
        payload: rest_of_line(payload).trim().chars().take(120).collect(),
    };
    // The array may span several lines; read exactly one JSON value.
    let mut stream = serde_json::Deserializer::from_str(payload).into_iter::<serde_json::Value>();
    match stream.next() {
        Some(Ok(serde_json::Value::Array(items))) => {
            let strings: Option<Vec<String>> = items
                .into_iter()
                .map(|v| match v {
                    serde_json::Value::String(s) => Some(s),
                    _ => None,
                })
                .collect();
            strings.map(clean_objects).ok_or_else(not_array)
        }
        _ => Err(not_array()),
    }
}

/// Returns `(existent, nonexistent)` from the last occurrence of each marker.
pub fn parse_object_reply(raw: &str) -> Result<(Vec<String>, Vec<String>), ParseError> {
    let existent = parse_list(raw, EXISTENT_MARKER)?;
    let nonexistent = parse_list(raw, NONEXISTENT_MARKER)?;
    Ok((existent, nonexistent))
}

/// What a single reply parsed to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PassOutcome {
    Caption {
        caption: String,
    },
    Objects {
        existent: Vec<String>,
        nonexistent: Vec<String>,
    },
    Joint {
        caption: String,
        existent: Vec<String>,
        nonexistent: Vec<String>,
    },
    Failed {
        error: String,
    },
}

impl PassOutcome {
    pub fn is_ok(&self) -> bool {
        !matches!(self, PassOutcome::Failed { .. })
    }
}

pub fn parse_reply(scale: Scale, raw: &str) -> Result<PassOutcome, ParseError> {
    Ok(match scale {
        Scale::Image => PassOutcome::Caption {
            caption: parse_image_reply(raw)?,
        },
        Scale::Object => {
            let (existent, nonexistent) = parse_object_reply(raw)?;
            PassOutcome::Objects {
                existent,
                nonexistent,
            }
        }
        Scale::Joint => {
            let caption = parse_image_reply(raw)?;
            let (existent, nonexistent) = parse_object_reply(raw)?;
            PassOutcome::Joint {
                caption,
                existent,
                nonexistent,
            }
        }
    })
}

fn outcome_of(scale: Scale, raw: &str) -> PassOutcome {
    parse_reply(scale, raw).unwrap_or_else(|e| PassOutcome::Failed {
        error: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryAction {
    /// Re-issue the request with the reminder appended.
    Retry,
    /// Give up and report the parse failure.
    Escalate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub budget: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            budget: DEFAULT_RETRY_BUDGET,
        }
    }
}

impl RetryPolicy {
    /// Decision after the `attempt`-th unparseable reply (1-based).
    pub fn decide(&self, attempt: u32) -> RetryAction {
        if attempt <= self.budget {
            RetryAction::Retry
        } else {
            RetryAction::Escalate
        }
    }

    /// The follow-up request after an unparseable reply: the conversation so
    /// far plus the bad reply and the reminder. Decoding settings are kept.
    pub fn follow_up(&self, request: &ChatRequest, bad_reply: &str) -> ChatRequest {
        let mut next = request.clone();
        next.messages.push(ChatMessage::text(Role::Assistant, bad_reply));
        next.messages.push(ChatMessage::text(Role::User, RETRY_REMINDER));
        next
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassTrace {
    pub scale: Scale,
    /// The initial request, rendered.
    pub request: String,
    /// The reply the outcome was parsed from (the last one received).
    pub reply: String,
    /// Earlier replies that failed to parse.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_replies: Vec<String>,
    pub retries: u32,
    pub outcome: PassOutcome,
    pub backend: String,
    pub timestamp: u64,
}

impl PassTrace {
    pub fn reparse(&self) -> PassOutcome {
        outcome_of(self.scale, &self.reply)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub query_id: String,
    pub reference_image: String,
    pub modification_text: String,
    pub prompt_mode: PromptMode,
    pub process: ProcessPolicy,
    #[serde(default)]
    pub edited: bool,
    pub passes: Vec<PassTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ReasoningTrace {
    pub fn pass(&self, scale: Scale) -> Option<&PassTrace> {
        self.passes.iter().find(|p| p.scale == scale)
    }

    /// Rebuilds the structured output from the stored pass outcomes.
    pub fn output(&self) -> Result<ReasoningOutput, String> {
        let mut caption = None;
        let mut objects = None;
        let mut image_raw = String::new();
        let mut object_raw = String::new();
        for p in &self.passes {
            match &p.outcome {
                PassOutcome::Caption { caption: c } => {
                    caption = Some(c.clone());
                    image_raw = p.reply.clone();
                }
                PassOutcome::Objects {
                    existent,
                    nonexistent,
                } => {
                    objects = Some((existent.clone(), nonexistent.clone()));
                    object_raw = p.reply.clone();
                }
                PassOutcome::Joint {
                    caption: c,
                    existent,
                    nonexistent,
                } => {
                    caption = Some(c.clone());
                    objects = Some((existent.clone(), nonexistent.clone()));
                    image_raw = p.reply.clone();
                    object_raw = p.reply.clone();
                }
                PassOutcome::Failed { error } => return Err(format!("{} pass: {error}", p.scale)),
            }
        }
        let target_caption = caption.ok_or("no caption pass")?;
        let (existent_objects, nonexistent_objects) = objects.ok_or("no object pass")?;
        Ok(ReasoningOutput {
            query_id: self.query_id.clone(),
            target_caption,
            existent_objects,
            nonexistent_objects,
            trace_image_scale: image_raw,
            trace_object_scale: object_raw,
        })
    }

    /// True when every stored reply re-parses to its stored outcome.
    pub fn is_faithful(&self) -> bool {
        self.passes.iter().all(|p| p.reparse() == p.outcome)
    }
}

/// Reasoning result for one query, with its trace.
#[derive(Debug)]
pub struct QueryReasoning {
    pub query_id: String,
    pub result: Result<ReasoningOutput, ReasonError>,
    pub trace: ReasoningTrace,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct Reasoner<'a> {
    pub library: &'a PromptLibrary,
    pub mode: PromptMode,
    pub process: ProcessPolicy,
    pub retry: RetryPolicy,
    pub backend: &'a dyn ChatBackend,
}

impl<'a> Reasoner<'a> {
    pub fn new(library: &'a PromptLibrary, backend: &'a dyn ChatBackend) -> Self {
        Self {
            library,
            mode: PromptMode::default(),
            process: ProcessPolicy::default(),
            retry: RetryPolicy::default(),
            backend,
        }
    }

    fn run_pass(&self, scale: Scale, query: &ComposedQuery) -> Result<PassTrace, BackendError> {
        let request =
            self.library
                .build_prompt(scale, self.mode, &query.reference_image, &query.modification_text);
        let mut current = request.clone();
        let mut rejected = Vec::new();
        let mut attempt = 0u32;
        loop {
            let reply = self.backend.chat(&current)?;
            let outcome = outcome_of(scale, &reply);
            attempt += 1;
            let done = outcome.is_ok() || self.retry.decide(attempt) == RetryAction::Escalate;
            if done {
                return Ok(PassTrace {
                    scale,
                    request: request.render(),
                    reply,
                    rejected_replies: rejected,
                    retries: attempt - 1,
                    outcome,
                    backend: self.backend.backend_id(),
                    timestamp: now_secs(),
                });
            }
            log::debug!("query {}: {scale} reply unparseable, retrying", query.query_id);
            current = self.retry.follow_up(&current, &reply);
            rejected.push(reply);
        }
    }

    /// Runs the reasoning passes for one query. The trace is returned even
    /// when reasoning fails.
    pub fn reason_query(&self, query: &ComposedQuery) -> QueryReasoning {
        let scales: &[Scale] = match self.process {
            ProcessPolicy::TwoProcess => &[Scale::Image, Scale::Object],
            ProcessPolicy::OneProcess => &[Scale::Joint],
        };
        let mut trace = ReasoningTrace {
            query_id: query.query_id.clone(),
            reference_image: query.reference_image.clone(),
            modification_text: query.modification_text.clone(),
            prompt_mode: self.mode,
            process: self.process,
            edited: false,
            passes: Vec::new(),
            failure: None,
        };
        let mut error = None;
        for &scale in scales {
            match self.run_pass(scale, query) {
                Ok(pass) => {
                    if error.is_none() {
                        if let Err(e) = parse_reply(scale, &pass.reply) {
                            let attempts = pass.retries + 1;
                            let raw = pass.reply.clone();
                            error = Some(match e {
                                ParseError::EmptyCaption => ReasonError::EmptyCaption { scale, attempts, raw },
                                error => ReasonError::ParseFailure { scale, error, attempts, raw },
                            });
                        }
                    }
                    trace.passes.push(pass);
                }
                Err(e) => {
                    error = Some(ReasonError::Backend(e));
                    break;
                }
            }
        }
        let result = match error {
            Some(e) => Err(e),
            None => trace.output().map_err(|m| {
                // Unreachable when every pass parsed; kept total.
                ReasonError::Backend(BackendError::Protocol(m))
            }),
        };
        if let Err(e) = &result {
            trace.failure = Some(e.to_string());
        }
        QueryReasoning {
            query_id: query.query_id.clone(),
            result,
            trace,
        }
    }

    /// Reasons one query and appends its trace to `store` before returning.
    pub fn reason(
        &self,
        query: &ComposedQuery,
        store: &TraceStore,
    ) -> Result<ReasoningOutput, ReasonError> {
        let r = self.reason_query(query);
        if let Err(e) = store.append(&r.trace) {
            log::error!("failed to persist trace for {}: {e}", r.query_id);
        }
        r.result
    }

    /// Reasons many queries with at most `concurrency` requests in flight.
    /// Results come back sorted by query id.
    pub fn reason_all(&self, queries: &[ComposedQuery], concurrency: usize) -> Vec<QueryReasoning> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<QueryReasoning>>> =
            Mutex::new((0..queries.len()).map(|_| None).collect());
        let workers = concurrency.max(1).min(queries.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = queries.get(i) else { break };
                    let r = self.reason_query(q);
                    slots.lock().expect("no poisoned workers")[i] = Some(r);
                });
            }
        });
        let mut out: Vec<QueryReasoning> = slots
            .into_inner()
            .expect("no poisoned workers")
            .into_iter()
            .map(|r| r.expect("every query reasoned"))
            .collect();
        out.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        out
    }
}

/// A run directory holding one trace file.
#[derive(Debug)]
pub struct TraceStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl TraceStore {
    /// Creates `dir/traces.jsonl`, replacing any previous run.
    pub fn create(dir: &Path, fingerprint: Option<&Fingerprint>) -> Result<Self, TraceError> {
        std::fs::create_dir_all(dir).map_err(trace_io(dir))?;
        let path = dir.join(TRACE_FILE);
        let mut file = File::create(&path).map_err(trace_io(&path))?;
        writeln!(file, "{}", trace_header(fingerprint)).map_err(trace_io(&path))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, trace: &ReasoningTrace) -> Result<(), TraceError> {
        let line = serde_json::to_string(trace).expect("trace serializes");
        let mut f = self.file.lock().expect("trace file lock");
        writeln!(f, "{line}").map_err(trace_io(&self.path))
    }
}

/// Resolves a trace argument that may name the run directory or the file.
pub fn trace_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(TRACE_FILE)
    } else {
        path.to_path_buf()
    }
}

fn trace_header(fingerprint: Option<&Fingerprint>) -> String {
    let mut header = serde_json::json!({ "format": TRACE_FORMAT });
    if let Some(f) = fingerprint {
        header["fingerprint"] = serde_json::to_value(f).expect("fingerprint serializes");
    }
    header.to_string()
}

pub fn write_traces(
    path: &Path,
    traces: &[ReasoningTrace],
    fingerprint: Option<&Fingerprint>,
) -> Result<(), TraceError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(trace_io(parent))?;
    }
    let mut out = trace_header(fingerprint);
    out.push('\n');
    for t in traces {
        out.push_str(&serde_json::to_string(t).expect("trace serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(trace_io(path))
}

pub fn load_traces(path: &Path) -> Result<Vec<ReasoningTrace>, TraceError> {
    Ok(load_trace_file(path)?.1)
}

/// The fingerprint recorded in a trace file header, if any.
pub fn trace_fingerprint(path: &Path) -> Result<Option<Fingerprint>, TraceError> {
    Ok(load_trace_file(path)?.0)
}

fn load_trace_file(path: &Path) -> Result<(Option<Fingerprint>, Vec<ReasoningTrace>), TraceError> {
    let path = trace_file(path);
    let file = File::open(&path).map_err(trace_io(&path))?;
    let malformed = |line: usize, reason: String| TraceError::Malformed {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut out = Vec::new();
    let mut header_seen = false;
    let mut fingerprint = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(trace_io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let v: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
            if v.get("format").and_then(|f| f.as_str()) != Some(TRACE_FORMAT) {
                return Err(malformed(i + 1, format!("expected header format {TRACE_FORMAT}")));
            }
            if let Some(f) = v.get("fingerprint") {
                fingerprint = Some(
                    serde_json::from_value(f.clone()).map_err(|e| malformed(i + 1, e.to_string()))?,
                );
            }
            header_seen = true;
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?);
    }
    if !header_seen {
        return Err(malformed(1, "empty trace file".into()));
    }
    Ok((fingerprint, out))
}

/// Loads a run's traces with any edited records applied on top.
pub fn load_effective_traces(dir_or_file: &Path) -> Result<Vec<ReasoningTrace>, TraceError> {
    let original = trace_file(dir_or_file);
    let mut traces = load_traces(&original)?;
    let edited_path = original.with_file_name(EDITED_TRACE_FILE);
    if edited_path.exists() {
        let edited: HashMap<String, ReasoningTrace> = load_traces(&edited_path)?
            .into_iter()
            .filter(|t| t.edited)
            .map(|t| (t.query_id.clone(), t))
            .collect();
        for t in &mut traces {
            if let Some(e) = edited.get(&t.query_id) {
                *t = e.clone();
            }
        }
    }
    Ok(traces)
}

/// Replaces the stored reply of one pass, re-parses it and saves the result
/// to `traces.edited.jsonl` next to the original trace file, which is left
/// untouched. Earlier edits in that file are kept.
pub fn edit_and_replay(
    trace_path: &Path,
    query_id: &str,
    scale: Scale,
    edited_reply: &str,
) -> Result<ReasoningOutput, TraceError> {
    let original = trace_file(trace_path);
    let fingerprint = trace_fingerprint(&original)?;
    let mut traces = load_effective_traces(&original)?;
    let trace = traces
        .iter_mut()
        .find(|t| t.query_id == query_id)
        .ok_or_else(|| TraceError::UnknownQuery(query_id.to_string()))?;
    let pass = trace
        .passes
        .iter_mut()
        .find(|p| p.scale == scale)
        .ok_or_else(|| TraceError::UnknownPass {
            query_id: query_id.to_string(),
            scale,
        })?;
    let outcome =
        parse_reply(scale, edited_reply).map_err(|error| TraceError::ParseFailure { scale, error })?;
    pass.reply = edited_reply.to_string();
    pass.outcome = outcome;
    trace.edited = true;
    let output = trace.output();
    trace.failure = output.as_ref().err().cloned();
    let output = output.map_err(|reason| TraceError::Malformed {
        path: original.display().to_string(),
        line: 0,
        reason: format!("query {query_id} still incomplete after edit: {reason}"),
    })?;
    let edited: Vec<ReasoningTrace> = traces.into_iter().filter(|t| t.edited).collect();
    write_traces(&original.with_file_name(EDITED_TRACE_FILE), &edited, fingerprint.as_ref())?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannedReply {
    pub reference_image: String,
    pub scale: Scale,
    /// Reply for the initial request, then for each retry in turn. The last
    /// entry repeats once the list runs out.
    pub replies: Vec<String>,
}

/// In-process chat backend answering from a canned-reply table keyed by
/// (reference image, scale). The reply is a pure function of the request:
/// the retry index is the number of reminders already in the conversation.
#[derive(Debug, Clone, Default)]
pub struct MockChatBackend {
    table: HashMap<(String, Scale), Vec<String>>,
    id: String,
}

impl MockChatBackend {
    pub fn new(replies: Vec<CannedReply>) -> Self {
        Self {
            table: replies
                .into_iter()
                .map(|r| ((r.reference_image, r.scale), r.replies))
                .collect(),
            id: "mock-chat".into(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn insert(&mut self, reference_image: &str, scale: Scale, replies: Vec<String>) {
        self.table.insert((reference_image.to_string(), scale), replies);
    }

    fn scale_of(request: &ChatRequest) -> Option<Scale> {
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.parts.iter().any(|p| matches!(p, Part::Image(_))))?
            .joined_text();
        let caption = prompt.contains(CAPTION_MARKER);
        let objects = prompt.contains(EXISTENT_MARKER);
        match (caption, objects) {
            (true, true) => Some(Scale::Joint),
            (true, false) => Some(Scale::Image),
            (false, true) => Some(Scale::Object),
            (false, false) => None,
        }
    }

    /// Canned replies a perfect model would give on a synthetic split.
    pub fn from_planted(split: &DatasetSplit, planted: &PlantedEmbeddings) -> Self {
        let mut replies = Vec::new();
        for (q, p) in split.queries.iter().zip(&planted.queries) {
            let eo = serde_json::to_string(&p.existent).expect("strings serialize");
            let neo = serde_json::to_string(&p.nonexistent).expect("strings serialize");
            let image = format!(
                "1. Image understanding\nStep 1: The reference image {ref_id} shows the scene before the change.\n\
                 2. Modification text understanding\nStep 1: The text asks to {text}.\n\
                 3. Modification implementation\nStep 1: Apply the change and keep the rest.\n\
                 4. Target image caption generation\nStep 1: Describe the result.\n\
                 {CAPTION_MARKER} {caption}",
                ref_id = q.reference_image,
                text = q.modification_text,
                caption = p.caption
            );
            let object = format!(
                "1. Describe the Reference Image\nStep 1: List the objects.\n\
                 2. Understand the Modification Instructions\nStep 1: The text asks to {text}.\n\
                 3. Apply the Modifications\nStep 1: Keep, add and drop objects.\n\
                 4. Determine the Content of the Target Image\nStep 1: Collect both lists.\n\
                 {EXISTENT_MARKER} {eo}\n{NONEXISTENT_MARKER} {neo}",
                text = q.modification_text
            );
            let joint = format!(
                "1. Image understanding\nStep 1: The reference image {ref_id} shows the scene before the change.\n\
                 2. Modification text understanding\nStep 1: The text asks to {text}.\n\
                 3. Modification implementation\nStep 1: Apply the change and keep the rest.\n\
                 4. Target image caption generation\nStep 1: Describe the result and collect the objects.\n\
                 {CAPTION_MARKER} {caption}\n{EXISTENT_MARKER} {eo}\n{NONEXISTENT_MARKER} {neo}",
                ref_id = q.reference_image,
                text = q.modification_text,
                caption = p.caption
            );
            for (scale, reply) in [(Scale::Image, image), (Scale::Object, object), (Scale::Joint, joint)] {
                replies.push(CannedReply {
                    reference_image: q.reference_image.clone(),
                    scale,
                    replies: vec![reply],
                });
            }
        }
        Self::new(replies)
    }

    pub fn entries(&self) -> Vec<CannedReply> {
        let mut out: Vec<CannedReply> = self
            .table
            .iter()
            .map(|((r, s), replies)| CannedReply {
                reference_image: r.clone(),
                scale: *s,
                replies: replies.clone(),
            })
            .collect();
        out.sort_by(|a, b| (&a.reference_image, a.scale).cmp(&(&b.reference_image, b.scale)));
        out
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{{\"format\":\"{REPLIES_FORMAT}\"}}\n");
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("reply serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or("empty replies file")?;
        let v: serde_json::Value = serde_json::from_str(header).map_err(|e| format!("line 1: {e}"))?;
        if v.get("format").and_then(|f| f.as_str()) != Some(REPLIES_FORMAT) {
            return Err(format!("line 1: expected header format {REPLIES_FORMAT}"));
        }
        let mut replies = Vec::new();
        for (i, line) in lines {
            let r: CannedReply = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            if r.replies.is_empty() {
                return Err(format!("line {}: empty reply list", i + 1));
            }
            replies.push(r);
        }
        Ok(Self::new(replies))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_file_string(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl ChatBackend for MockChatBackend {
    fn backend_id(&self) -> String {
        self.id.clone()
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let image = request
            .image_ids()
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| BackendError::Rejected {
                status: 400,
                message: "request has no image part".into(),
            })?;
        let scale = Self::scale_of(request).ok_or_else(|| BackendError::Rejected {
            status: 400,
            message: "request carries no output contract".into(),
        })?;
        let replies = self
            .table
            .get(&(image.clone(), scale))
            .ok_or_else(|| BackendError::Rejected {
                status: 404,
                message: format!("no canned {scale} reply for {image}"),
            })?;
        let retry = request
            .messages
            .iter()
            .filter(|m| m.role == Role::User && m.joined_text() == RETRY_REMINDER)
            .count();
        Ok(replies[retry.min(replies.len() - 1)].clone())
    }
}
