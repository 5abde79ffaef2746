//! `cotmr`: command-line driver for the retrieval pipeline.
//!
//! Settings come from an optional config file (`--config`, either
//! `key = value` lines or one JSON object) and are then overridden by
//! flags of the same names. Exit codes: 0 success, 1 some queries failed,
//! 2 usage or configuration error, 3 backend unreachable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cotmr_core::backend::HttpBackend;
use cotmr_core::contract::{run_contract, ContractOptions};
use cotmr_core::pipeline::{self, AblationGrid, PipelineError, RunConfig};
use cotmr_core::prompting::Scale;

#[derive(Parser)]
#[command(name = "cotmr", version, about = "Training-free composed image retrieval")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Config keys settable from the command line.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Config file (`key = value` lines or a JSON object).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Queries file (cotmr-queries-v1).
    #[arg(long, global = true)]
    queries: Option<String>,
    /// Gallery manifest (cotmr-gallery-v1).
    #[arg(long, global = true)]
    gallery: Option<String>,
    /// fashioniq, cirr, circo or synthetic.
    #[arg(long, global = true)]
    benchmark: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Gallery embeddings file (default: <out>/embeddings.jsonl).
    #[arg(long, global = true)]
    embeddings: Option<String>,
    /// Trace directory (default: <out>/traces).
    #[arg(long, global = true)]
    traces: Option<String>,
    /// Adapter base URL; mock backends are used when absent.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Canned chat replies (cotmr-replies-v1) for the mock chat backend.
    #[arg(long, global = true)]
    replies: Option<String>,
    /// Locator-keyed embeddings for the mock image encoder.
    #[arg(long, global = true)]
    mock_images: Option<String>,
    /// Text-keyed embeddings for the mock text encoder.
    #[arg(long, global = true)]
    mock_texts: Option<String>,
    /// Dimension of hash-derived mock vectors.
    #[arg(long, global = true)]
    mock_dim: Option<String>,
    /// Directory of prompt data files replacing the built-in ones.
    #[arg(long, global = true)]
    prompts: Option<String>,
    /// no-cot, circot-0 or circot-fs.
    #[arg(long, global = true)]
    prompt_mode: Option<String>,
    /// two or one.
    #[arg(long, global = true)]
    process: Option<String>,
    #[arg(long, global = true)]
    retry_budget: Option<String>,
    /// Maximum requests in flight.
    #[arg(long, global = true)]
    concurrency: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Weight of the existent-object reward.
    #[arg(long, global = true)]
    lambda: Option<String>,
    /// Weight of the nonexistent-object penalty.
    #[arg(long, global = true)]
    mu: Option<String>,
    /// Comma-separated subset of base,pos,neg.
    #[arg(long, global = true)]
    components: Option<String>,
    /// concat or mean.
    #[arg(long, global = true)]
    eo_agg: Option<String>,
    /// mean or concat.
    #[arg(long, global = true)]
    neo_agg: Option<String>,
    /// Metric plan: fashioniq, cirr, circo or synthetic.
    #[arg(long, global = true)]
    plan: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let fields = [
            ("queries", &self.queries),
            ("gallery", &self.gallery),
            ("benchmark", &self.benchmark),
            ("out", &self.out),
            ("embeddings", &self.embeddings),
            ("traces", &self.traces),
            ("backend", &self.backend),
            ("replies", &self.replies),
            ("mock_images", &self.mock_images),
            ("mock_texts", &self.mock_texts),
            ("mock_dim", &self.mock_dim),
            ("prompts", &self.prompts),
            ("prompt_mode", &self.prompt_mode),
            ("process", &self.process),
            ("retry_budget", &self.retry_budget),
            ("concurrency", &self.concurrency),
            ("seed", &self.seed),
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("components", &self.components),
            ("eo_agg", &self.eo_agg),
            ("neo_agg", &self.neo_agg),
            ("plan", &self.plan),
        ];
        fields.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for (k, v) in self.overrides() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic split with mock fixtures and a config file.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long = "n-queries", default_value_t = 200)]
        n_queries: usize,
        #[arg(long, default_value_t = 500)]
        gallery_size: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
    /// Embed the gallery.
    Embed,
    /// Run chat-model reasoning for every query and store traces.
    Reason,
    /// Score and rank the gallery for every reasoned query.
    Retrieve {
        /// Accept traces whose fingerprint differs from the config.
        #[arg(long)]
        force: bool,
    },
    /// Compute metrics for one or more rankings files.
    Evaluate {
        #[arg(long)]
        rankings: Vec<PathBuf>,
        /// Aggregate rankings whose fingerprint differs from the config.
        #[arg(long)]
        force: bool,
    },
    /// Sweep weights and component sets over cached traces.
    Ablate {
        /// Comma-separated lambda values (default: the configured lambda).
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated mu values (default: the configured mu).
        #[arg(long)]
        mus: Option<String>,
        /// `;`-separated component sets, e.g. "base;pos,neg;all".
        #[arg(long)]
        component_sets: Option<String>,
        /// Sweep the five standard component rows A.1 to A.5.
        #[arg(long)]
        standard_rows: bool,
        #[arg(long)]
        force: bool,
    },
    /// Inspect, edit and replay reasoning traces.
    Trace {
        #[command(subcommand)]
        action: TraceAction,
    },
    /// Run embed, reason, retrieve and evaluate in sequence.
    Run,
    /// Check an adapter service against the wire protocol.
    Contract {
        /// Readable image locator for image checks (repeatable).
        #[arg(long)]
        locator: Vec<String>,
    },
}

#[derive(Subcommand)]
enum TraceAction {
    /// Print stored transcripts.
    Show {
        #[arg(long)]
        query: Option<String>,
    },
    /// Replace one stored reply and re-parse it.
    Edit {
        #[arg(long)]
        query: String,
        /// image, object or joint.
        #[arg(long)]
        scale: String,
        #[arg(long, conflicts_with = "reply_file")]
        reply: Option<String>,
        #[arg(long)]
        reply_file: Option<PathBuf>,
    },
    /// Re-score edited queries and re-evaluate.
    Replay {
        #[arg(long)]
        force: bool,
    },
}

fn partial(failed: usize) -> i32 {
    if failed > 0 {
        1
    } else {
        0
    }
}

fn report_failures(failed: &[(String, String)]) {
    for (q, why) in failed {
        eprintln!("failed {q}: {why}");
    }
}

fn run(cli: Cli) -> Result<i32, PipelineError> {
    if let Command::Synth { dir, n_queries, gallery_size, dim } = &cli.command {
        let seed = match &cli.config.seed {
            Some(s) => s.parse().map_err(|e| PipelineError::Usage(format!("invalid seed {s:?}: {e}")))?,
            None => 0,
        };
        let s = pipeline::run_synth(dir, seed, *n_queries, *gallery_size, *dim)?;
        println!(
            "wrote {} queries over {} images; config at {}",
            s.n_queries,
            s.gallery_size,
            s.config_path.display()
        );
        return Ok(0);
    }
    let cfg = cli.config.resolve()?;
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Embed => {
            let s = pipeline::run_embed(&cfg)?;
            println!("embedded {} images (dim {}, model {}) into {}", s.n_images, s.dim, s.model, s.path.display());
            Ok(0)
        }
        Command::Reason => {
            let s = pipeline::run_reason(&cfg)?;
            report_failures(&s.failed);
            println!(
                "reasoned {} queries ({} failed); traces at {}",
                s.n_total,
                s.failed.len(),
                s.trace_path.display()
            );
            Ok(partial(s.failed.len()))
        }
        Command::Retrieve { force } => {
            let s = pipeline::run_retrieve(&cfg, force)?;
            report_failures(&s.failed);
            println!(
                "ranked {} queries ({} failed); rankings at {}",
                s.n_ranked,
                s.failed.len(),
                s.rankings_path.display()
            );
            Ok(partial(s.failed.len()))
        }
        Command::Evaluate { rankings, force } => {
            let report = pipeline::run_evaluate(&cfg, &rankings, force)?;
            let split = cfg.load_split()?;
            print!("{}", report.render_table(&cfg.metric_plan(&split)));
            println!(
                "evaluated {} of {} queries ({} failed); fingerprint {}",
                report.n_evaluated,
                report.n_total,
                report.n_failed,
                report.fingerprint.short()
            );
            Ok(partial(report.n_failed))
        }
        Command::Ablate { lambdas, mus, component_sets, standard_rows, force } => {
            let split = cfg.load_split()?;
            let mgs = cfg.mgs_config(&split)?;
            let mut grid = if standard_rows {
                AblationGrid::standard_rows(mgs.lambda, mgs.mu)
            } else {
                AblationGrid {
                    lambdas: vec![mgs.lambda],
                    mus: vec![mgs.mu],
                    component_sets: vec![(mgs.components().to_string(), mgs.components())],
                }
            };
            if let Some(l) = lambdas {
                grid.lambdas = AblationGrid::parse_weights(&l)?;
            }
            if let Some(m) = mus {
                grid.mus = AblationGrid::parse_weights(&m)?;
            }
            if let Some(c) = component_sets {
                grid.component_sets = AblationGrid::parse_component_sets(&c)?;
            }
            let table = pipeline::run_ablate(&cfg, &grid, force)?;
            print!("{}", table.render_text(&cfg.metric_plan(&split)));
            let failed = table.points.first().map_or(0, |p| p.report.n_failed);
            Ok(partial(failed))
        }
        Command::Trace { action } => match action {
            TraceAction::Show { query } => {
                print!("{}", pipeline::trace_show(&cfg, query.as_deref())?);
                Ok(0)
            }
            TraceAction::Edit { query, scale, reply, reply_file } => {
                let scale: Scale = scale.parse().map_err(PipelineError::Usage)?;
                let reply = match (reply, reply_file) {
                    (Some(r), _) => r,
                    (None, Some(path)) => std::fs::read_to_string(&path)
                        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?,
                    (None, None) => return Err(PipelineError::Usage("give --reply or --reply-file".into())),
                };
                let out = pipeline::trace_edit(&cfg, &query, scale, &reply)?;
                println!("{}", serde_json::to_string_pretty(&out).expect("output serializes"));
                Ok(0)
            }
            TraceAction::Replay { force } => {
                let s = pipeline::trace_replay(&cfg, force)?;
                let split = cfg.load_split()?;
                print!("{}", s.report.render_table(&cfg.metric_plan(&split)));
                println!("re-scored {} edited queries; rankings at {}", s.rescored.len(), s.rankings_path.display());
                Ok(partial(s.report.n_failed))
            }
        },
        Command::Run => {
            let (reason, _, report) = pipeline::run_all(&cfg)?;
            report_failures(&reason.failed);
            let split = cfg.load_split()?;
            print!("{}", report.render_table(&cfg.metric_plan(&split)));
            Ok(partial(report.n_failed))
        }
        Command::Contract { locator } => {
            let url = cfg
                .backend
                .clone()
                .ok_or_else(|| PipelineError::Usage("contract needs --backend URL".into()))?;
            let checks = run_contract(&HttpBackend::new(url), &ContractOptions { image_locators: locator });
            for c in &checks {
                println!("{c}");
            }
            if checks.first().is_some_and(|c| !c.passed()) {
                return Ok(3);
            }
            let failed = checks.iter().filter(|c| matches!(c.outcome, cotmr_core::contract::CheckOutcome::Fail(_))).count();
            Ok(partial(failed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
