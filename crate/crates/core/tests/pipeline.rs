use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use memelens_core::corpus::{load_manifest, MemeRecord, Split};
use memelens_core::gateway::{ReplayBackend, ScriptedBackend};
use memelens_core::gateway::read_transcript;
use memelens_core::gateway::{ChatBackend, GatewayError};
use memelens_core::guidelines::{GuidelineRule, GuidelineStore, Principle};
use memelens_core::pipeline::{run_pipeline, PipelineError, RunConfig, RunOptions, RunOutcome};
use memelens_core::runstore::{FixedClock, Stage};
use memelens_core::{ContextId, GuidelineSet};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fhm10")
}

fn config() -> RunConfig {
    RunConfig::load(&fixture().join("run.toml")).unwrap()
}

fn memes(cfg: &RunConfig) -> Vec<MemeRecord> {
    load_manifest(
        cfg.manifest.as_ref().unwrap(),
        &cfg.context.context(),
        Split::Test,
    )
    .unwrap()
    .records
}

fn mock() -> Arc<dyn ChatBackend> {
    Arc::new(ScriptedBackend::load(&fixture().join("mock.toml")).unwrap())
}

fn options(stop_after: Option<Stage>) -> RunOptions {
    RunOptions {
        stop_after,
        skip_preflight: false,
        clock: Arc::new(FixedClock(Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap())),
    }
}

async fn run(cfg: &RunConfig, root: &Path, stop_after: Option<Stage>) -> RunOutcome {
    run_pipeline(cfg, &memes(cfg), mock(), root, options(stop_after))
        .await
        .unwrap()
}

fn record_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.join("records"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[tokio::test]
async fn end_to_end_produces_decisions_and_report() {
    let root = tempfile::tempdir().unwrap();
    let cfg = config();
    let out = run(&cfg, root.path(), None).await;
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.computed[&Stage::Decision], 10);
    assert_eq!(out.computed[&Stage::Report], 1);
    let report = out.report.unwrap();
    assert_eq!(report.meme_count, 10);
    assert!(report.ensemble.is_some());
    assert!(out.dir.join("report.md").exists());
    let log = std::fs::read_to_string(out.dir.join("decisions.log")).unwrap();
    assert_eq!(log.lines().count(), 10);

    // meme 01 has a stereotype caption; U-CoT+ says hateful from both sources
    let line = log.lines().find(|l| l.starts_with("01 ")).unwrap();
    assert!(line.contains("ucotplus=11"), "{line}");
    assert!(line.contains("label=Positive"), "{line}");
}

#[tokio::test]
async fn two_runs_write_identical_records() {
    let cfg = config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&cfg, a.path(), None).await;
    let rb = run(&cfg, b.path(), None).await;
    assert_eq!(record_files(&ra.dir), record_files(&rb.dir));
    assert_eq!(
        std::fs::read(ra.dir.join("report.json")).unwrap(),
        std::fs::read(rb.dir.join("report.json")).unwrap()
    );
}

#[tokio::test]
async fn resume_after_cues_issues_no_duplicate_calls() {
    let cfg = config();
    let fresh = tempfile::tempdir().unwrap();
    let full = run(&cfg, fresh.path(), None).await;
    let full_calls = read_transcript(&full.dir.join("transcript.jsonl")).unwrap().len();

    let root = tempfile::tempdir().unwrap();
    let first = run(&cfg, root.path(), Some(Stage::Cues)).await;
    assert!(!first.computed.contains_key(&Stage::Verdict));
    let after_cues = read_transcript(&first.dir.join("transcript.jsonl")).unwrap().len();
    assert!(after_cues > 0);

    let second = run(&cfg, root.path(), None).await;
    assert_eq!(second.reused[&Stage::Cues], 20);
    assert_eq!(second.computed.get(&Stage::Cues).copied().unwrap_or(0), 0);
    let calls = |dir: &Path| {
        let mut v: Vec<(String, String, Option<String>)> = read_transcript(&dir.join("transcript.jsonl"))
            .unwrap()
            .into_iter()
            .map(|r| (r.endpoint_id, r.request_digest, r.tag))
            .collect();
        v.sort();
        v
    };
    // the resumed run made exactly the calls of an uninterrupted one
    assert_eq!(calls(&second.dir), calls(&full.dir));
    let cue_calls = calls(&second.dir)
        .iter()
        .filter(|c| c.2.as_deref().is_some_and(|t| t.starts_with("cues:")))
        .count();
    assert_eq!(cue_calls, after_cues);
    assert_eq!(record_files(&second.dir), record_files(&full.dir));

    // a completed run resumes to nothing
    let third = run(&cfg, root.path(), None).await;
    assert_eq!(third.computed.values().sum::<usize>(), 0);
    assert_eq!(
        read_transcript(&third.dir.join("transcript.jsonl")).unwrap().len(),
        full_calls
    );
}

#[tokio::test]
async fn disability_questions_go_to_the_override_endpoint() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&config(), root.path(), Some(Stage::Cues)).await;
    let records = read_transcript(&out.dir.join("transcript.jsonl")).unwrap();
    let disability: Vec<_> = records
        .iter()
        .filter(|r| r.tag.as_deref() == Some("cues:disability"))
        .collect();
    assert_eq!(disability.len(), 20);
    assert!(disability.iter().all(|r| r.endpoint_id == "qwen"));
    let race_on_llava = records
        .iter()
        .filter(|r| r.tag.as_deref() == Some("cues:race") && r.endpoint_id == "llava")
        .count();
    assert_eq!(race_on_llava, 10);
}

#[tokio::test]
async fn guideline_change_reschedules_only_dependent_stages() {
    let root = tempfile::tempdir().unwrap();
    let gdir = tempfile::tempdir().unwrap();
    let store = GuidelineStore::open(gdir.path()).unwrap();
    store.seed_packaged().unwrap();

    let mut cfg = config();
    cfg.guidelines_dir = Some(gdir.path().to_path_buf());
    cfg.guideline_version = "1".into();
    let first = run(&cfg, root.path(), None).await;
    assert!(first.failures.is_empty(), "{:?}", first.failures);

    let mut set: GuidelineSet = store.load("fhm", "1").unwrap();
    set.rules.push(GuidelineRule {
        rule_id: "extra".into(),
        principle: Principle::Exception,
        text: "Jokes about cooking in general are not hateful.".into(),
        example_phrases: vec![],
        operator_completable: false,
    });
    let saved = store.save(&set).unwrap();
    assert_eq!(saved.version, "2");
    cfg.guideline_version = "2".into();
    let second = run(&cfg, root.path(), None).await;

    assert_eq!(second.reused[&Stage::Cues], 20);
    assert_eq!(second.reused[&Stage::Description], 20);
    assert_eq!(second.reused[&Stage::Target], 20);
    // mcot and ucot for two sources stay, ucotplus for two sources reruns
    assert_eq!(second.reused[&Stage::Verdict], 40);
    assert_eq!(second.computed[&Stage::Verdict], 20);
    assert_eq!(second.computed[&Stage::Decision], 10);
    assert_eq!(second.computed[&Stage::Report], 1);
}

#[tokio::test]
async fn replayed_transcript_reproduces_records() {
    let cfg = config();
    let a = tempfile::tempdir().unwrap();
    let original = run(&cfg, a.path(), None).await;
    let replay = ReplayBackend::from_records(
        read_transcript(&original.dir.join("transcript.jsonl")).unwrap(),
    );
    let b = tempfile::tempdir().unwrap();
    let mut opts = options(None);
    // probes are not recorded, so the replay cannot answer them
    opts.skip_preflight = true;
    let replayed = run_pipeline(&cfg, &memes(&cfg), Arc::new(replay), b.path(), opts)
        .await
        .unwrap();
    assert!(replayed.failures.is_empty(), "{:?}", replayed.failures);
    assert_eq!(record_files(&original.dir), record_files(&replayed.dir));
}

#[tokio::test]
async fn unreachable_endpoint_fails_before_model_calls() {
    let cfg = config();
    let root = tempfile::tempdir().unwrap();
    let backend = memelens_core::gateway::FnBackend::new(|ep, _| {
        if ep.id == "qwen" {
            Err(GatewayError::Configuration("connection refused".into()))
        } else {
            Ok(memelens_core::gateway::ChatResponse::stop("OK"))
        }
    });
    let err = run_pipeline(&cfg, &memes(&cfg), Arc::new(backend), root.path(), options(None))
        .await
        .unwrap_err();
    match err {
        PipelineError::Preflight(failed) => {
            assert_eq!(failed.len(), 1);
            assert!(failed[0].starts_with("qwen"));
        }
        other => panic!("unexpected {other}"),
    }
    let transcript = root.path().join("fhm10/transcript.jsonl");
    assert!(read_transcript(&transcript).map(|r| r.is_empty()).unwrap_or(true));
}

#[tokio::test]
async fn stage_records_only_name_manifest_memes() {
    let root = tempfile::tempdir().unwrap();
    let cfg = config();
    let out = run(&cfg, root.path(), None).await;
    let ids: BTreeSet<String> = memes(&cfg).into_iter().map(|m| m.meme_id).collect();
    let store = memelens_core::runstore::RunStore::open(root.path(), &out.run_id).unwrap();
    for stage in [Stage::Cues, Stage::Description, Stage::Target, Stage::Verdict, Stage::Decision] {
        for r in store.records(stage) {
            assert!(ids.contains(&r.meme_id), "{stage:?} {}", r.meme_id);
        }
    }
    assert_eq!(store.manifest().contexts, vec![ContextId::Fhm]);
}
