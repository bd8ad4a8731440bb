use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/fhm10")
}

fn memelens(args: &[&str], runs: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memelens"));
    cmd.args(args)
        .arg("--runs")
        .arg(runs)
        .arg("--config")
        .arg(fixture().join("run.toml"))
        .arg("--mock")
        .arg(fixture().join("mock.toml"))
        .env("RUST_LOG", "warn");
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stage_line<'a>(out: &'a str, stage: &str) -> Option<&'a str> {
    out.lines().find(|l| l.trim_start().starts_with(stage))
}

#[test]
fn stage_commands_compose_into_a_full_run() {
    let runs = tempfile::tempdir().unwrap();
    let o = memelens(&["extract"], runs.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(stage_line(&out, "cues").unwrap().contains("computed    20"), "{out}");
    assert!(stage_line(&out, "description").is_none());

    let o = memelens(&["classify", "--resume"], runs.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(stage_line(&out, "cues").unwrap().contains("reused    20"), "{out}");
    assert!(stage_line(&out, "verdict").unwrap().contains("computed    60"), "{out}");
    assert!(stage_line(&out, "decision").is_none());

    let o = memelens(&["eval"], runs.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(stage_line(&out, "report").unwrap().contains("computed     1"), "{out}");
    assert!(out.contains("| Setting |"), "{out}");
    assert!(runs.path().join("fhm10/report.md").exists());

    // rerunning a finished run changes nothing
    let before = std::fs::read(runs.path().join("fhm10/transcript.jsonl")).unwrap();
    let o = memelens(&["run"], runs.path());
    assert!(o.status.success());
    assert!(!stdout(&o).contains("computed     1"));
    assert_eq!(std::fs::read(runs.path().join("fhm10/transcript.jsonl")).unwrap(), before);
}

#[test]
fn overrides_pick_schemes_and_run_id() {
    let runs = tempfile::tempdir().unwrap();
    let o = memelens(
        &["classify", "--run-id", "textonly", "--scheme", "ucot,ucotplus", "--limit", "3"],
        runs.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("run textonly"), "{out}");
    assert!(stage_line(&out, "verdict").unwrap().contains("computed    12"), "{out}");
}

#[test]
fn resume_requires_an_existing_run() {
    let runs = tempfile::tempdir().unwrap();
    let o = memelens(&["run", "--resume", "--run-id", "never-started"], runs.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--resume"));
}

#[test]
fn bad_flags_are_rejected() {
    let runs = tempfile::tempdir().unwrap();
    let o = memelens(&["run", "--perturb", "jiggle"], runs.path());
    assert!(!o.status.success());
    let o = memelens(&["run", "--few-shot", "4"], runs.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("holdout pool"));
}

#[test]
fn manifest_check_reports_mismatch_for_the_fixture() {
    let o = Command::new(env!("CARGO_BIN_EXE_memelens"))
        .args(["manifest-check", "--context", "FHM", "--manifest"])
        .arg(fixture().join("manifest.jsonl"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    let out = stdout(&o);
    assert!(out.contains("positive      4"), "{out}");
    assert!(out.contains("expected 490, found 4"), "{out}");
}
