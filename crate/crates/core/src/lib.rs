//! Training-free composed image retrieval.
//!
//! A query is a reference image plus a modification text. A vision-language
//! model reasons about it at two scales: a caption of the wanted image, and
//! the objects that must and must not appear in it. Gallery images are then
//! ranked by a fused similarity score that rewards the wanted objects and
//! penalizes the unwanted ones.
//!
//! Stages, each producing a file artifact:
//!
//! 1. [`embedding`]: gallery image embeddings.
//! 2. [`reasoning`]: chat-model reasoning traces.
//! 3. [`scoring`]: rankings and score dumps.
//! 4. [`evaluation`]: metric reports.
//!
//! [`pipeline`] wires them together from a [`pipeline::RunConfig`].

pub mod backend;
pub mod contract;
pub mod embedding;
pub mod evaluation;
pub mod pipeline;
pub mod prompting;
pub mod query_model;
pub mod reasoning;
pub mod scoring;

pub use backend::{BackendError, ChatBackend, EmbedBackend, HttpBackend};
pub use embedding::{GalleryIndex, MockEmbedder, TextEncoder};
pub use evaluation::{EvalReport, Fingerprint, MetricPlan};
pub use prompting::{build_prompt, output_contract, ChatRequest, PromptMode, Scale};
pub use query_model::{BenchmarkKind, ComposedQuery, DatasetSplit, GalleryManifest};
pub use reasoning::{MockChatBackend, ProcessPolicy, Reasoner, ReasoningOutput, ReasoningTrace};
pub use scoring::{Aggregation, Components, MgsConfig, Ranking, ScoreBreakdown};
