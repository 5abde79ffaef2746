//! Stage-level behaviour of the file-based pipeline on small synthetic splits.

use std::path::Path;

use cotmr_core::pipeline::{self, AblationGrid, PipelineError, RankingsFile, RunConfig};
use cotmr_core::query_model::load_split;
use cotmr_core::scoring::Components;
use cotmr_core::{MockChatBackend, Scale};

fn synth(dir: &Path, n: usize, gallery: usize) -> RunConfig {
    let s = pipeline::run_synth(dir, 11, n, gallery, 16).unwrap();
    RunConfig::load(&s.config_path).unwrap()
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 10, 40);
    let (reason, retrieve, report) = pipeline::run_all(&cfg).unwrap();
    assert_eq!(reason.n_total, 10);
    assert_eq!(retrieve.n_ranked, 10);
    assert_eq!(report.n_evaluated, 10);
    for p in [cfg.embeddings_path(), cfg.rankings_path(), cfg.scores_path(), cfg.report_path()] {
        assert!(p.exists(), "{} missing", p.display());
    }
    assert!(cfg.traces_dir().join("traces.jsonl").exists());
    let read_back = pipeline::read_report(&cfg.report_path()).unwrap();
    assert_eq!(read_back, report);
    assert_eq!(report.display["R@1"], "100.00");
}

#[test]
fn embed_is_reproducible_and_needs_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 4, 20);
    pipeline::run_embed(&cfg).unwrap();
    let first = std::fs::read(cfg.embeddings_path()).unwrap();
    pipeline::run_embed(&cfg).unwrap();
    assert_eq!(std::fs::read(cfg.embeddings_path()).unwrap(), first);

    let mut broken = cfg.clone();
    broken.gallery = Some(dir.path().join("missing.jsonl"));
    let err = pipeline::run_embed(&broken).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn retrieve_requires_earlier_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 4, 20);
    let err = pipeline::run_retrieve(&cfg, false).unwrap_err();
    assert!(matches!(err, PipelineError::Usage(ref m) if m.contains("cotmr embed")), "{err}");
    pipeline::run_embed(&cfg).unwrap();
    let err = pipeline::run_retrieve(&cfg, false).unwrap_err();
    assert!(matches!(err, PipelineError::Usage(ref m) if m.contains("cotmr reason")), "{err}");
}

#[test]
fn stale_artifacts_are_refused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 6, 24);
    pipeline::run_all(&cfg).unwrap();

    let mut changed = cfg.clone();
    changed.lambda = Some(0.25);
    let err = pipeline::run_evaluate(&changed, &[], false).unwrap_err();
    assert!(matches!(err, PipelineError::FingerprintMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    pipeline::run_evaluate(&changed, &[], true).unwrap();

    let mut other_mode = cfg.clone();
    other_mode.prompt_mode = cotmr_core::PromptMode::NoCot;
    let err = pipeline::run_retrieve(&other_mode, false).unwrap_err();
    assert!(matches!(err, PipelineError::FingerprintMismatch { .. }), "{err}");
    pipeline::run_retrieve(&other_mode, true).unwrap();
}

#[test]
fn fingerprints_ignore_the_output_location() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = synth(a.path(), 4, 20);
    let cb = synth(b.path(), 4, 20);
    assert_eq!(ca.reason_fingerprint().unwrap(), cb.reason_fingerprint().unwrap());
    assert_eq!(ca.embed_fingerprint().unwrap(), cb.embed_fingerprint().unwrap());
}

#[test]
fn unparseable_replies_fail_only_their_query() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 6, 24);
    let replies = cfg.replies.clone().unwrap();
    let mut mock = MockChatBackend::load(&replies).unwrap();
    let split = load_split(cfg.queries.as_ref().unwrap(), cfg.gallery.as_ref().unwrap(), cfg.benchmark.unwrap()).unwrap();
    let victim = &split.queries[2];
    mock.insert(&victim.reference_image, Scale::Object, vec!["I could not decide.".into()]);
    std::fs::write(&replies, mock.to_file_string()).unwrap();

    pipeline::run_embed(&cfg).unwrap();
    let reason = pipeline::run_reason(&cfg).unwrap();
    assert_eq!(reason.failed.len(), 1);
    assert_eq!(reason.failed[0].0, victim.query_id);
    assert!(reason.failed[0].1.contains("3 attempt"), "{}", reason.failed[0].1);

    let retrieve = pipeline::run_retrieve(&cfg, false).unwrap();
    assert_eq!(retrieve.n_ranked, 5);
    assert_eq!(retrieve.failed.len(), 1);
    let report = pipeline::run_evaluate(&cfg, &[], false).unwrap();
    assert_eq!((report.n_total, report.n_evaluated, report.n_failed), (6, 5, 1));
    assert_eq!(report.failed_queries, vec![victim.query_id.clone()]);

    let shown = pipeline::trace_show(&cfg, Some(&victim.query_id)).unwrap();
    assert!(shown.contains("I could not decide."));
}

#[test]
fn edited_trace_replays_only_that_query() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 8, 30);
    pipeline::run_all(&cfg).unwrap();
    let original_rankings = std::fs::read(cfg.rankings_path()).unwrap();
    let original_traces = std::fs::read(cfg.traces_dir().join("traces.jsonl")).unwrap();

    let out = pipeline::trace_edit(&cfg, "q0003", Scale::Image, "FINAL_CAPTION: something unrelated entirely").unwrap();
    assert_eq!(out.target_caption, "something unrelated entirely");
    let replay = pipeline::trace_replay(&cfg, false).unwrap();
    assert_eq!(replay.rescored, vec!["q0003".to_string()]);

    assert_eq!(std::fs::read(cfg.rankings_path()).unwrap(), original_rankings);
    assert_eq!(std::fs::read(cfg.traces_dir().join("traces.jsonl")).unwrap(), original_traces);
    let before = RankingsFile::read(&cfg.rankings_path()).unwrap();
    let after = RankingsFile::read(&replay.rankings_path).unwrap();
    assert_eq!(before.rankings.len(), after.rankings.len());
    for (b, a) in before.rankings.iter().zip(&after.rankings) {
        if b.query_id == "q0003" {
            assert_ne!(a, b);
        } else {
            assert_eq!(a, b);
        }
    }

    let bad = pipeline::trace_edit(&cfg, "q0003", Scale::Object, "no markers here").unwrap_err();
    assert_eq!(bad.exit_code(), 2);
    assert!(pipeline::trace_edit(&cfg, "q9999", Scale::Image, "FINAL_CAPTION: x").is_err());
}

#[test]
fn ablation_grid_sizes_and_empty_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 6, 24);
    pipeline::run_all(&cfg).unwrap();
    let grid = AblationGrid {
        lambdas: vec![0.0, 1.0],
        mus: vec![0.0],
        component_sets: vec![("all".into(), Components::ALL)],
    };
    let table = pipeline::run_ablate(&cfg, &grid, false).unwrap();
    assert_eq!(table.points.len(), 2);
    assert!(dir.path().join("run").join("ablation.json").exists());

    let empty = AblationGrid { lambdas: vec![], ..grid };
    let err = pipeline::run_ablate(&cfg, &empty, false).unwrap_err();
    assert!(matches!(err, PipelineError::Usage(_)));
    assert_eq!(err.exit_code(), 2);

    let rows = pipeline::run_ablate(&cfg, &AblationGrid::standard_rows(1.0, 0.5), false).unwrap();
    let labels: Vec<&str> = rows.points.iter().map(|p| p.label.as_str()).collect();
    assert_eq!(labels, ["A.1", "A.2", "A.3", "A.4", "A.5"]);
}

#[test]
fn config_files_in_both_syntaxes_agree() {
    let dir = tempfile::tempdir().unwrap();
    let kv = dir.path().join("a.cfg");
    std::fs::write(&kv, "# comment\nqueries = q.jsonl\nlambda = 0.7\ncomponents = base,neg\nplan = cirr\n").unwrap();
    let js = dir.path().join("b.json");
    std::fs::write(&js, r#"{"queries": "q.jsonl", "lambda": 0.7, "components": ["base", "neg"], "plan": "cirr"}"#).unwrap();
    let a = RunConfig::load(&kv).unwrap();
    let b = RunConfig::load(&js).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.queries.as_deref(), Some(dir.path().join("q.jsonl").as_path()));
    assert_eq!(a.lambda, Some(0.7));

    std::fs::write(&kv, "lamda = 1\n").unwrap();
    assert!(matches!(RunConfig::load(&kv), Err(PipelineError::Usage(_))));
    std::fs::write(&kv, "mu = -1\n").unwrap();
    assert!(matches!(RunConfig::load(&kv), Err(PipelineError::Usage(_))));
}
