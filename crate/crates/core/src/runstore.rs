//! Append-only artifact store for pipeline runs.
//!
//! Layout of `<root>/<run_id>/`:
//!
//! ```text
//! manifest.json          RunManifest
//! records/<stage>.jsonl  StageRecord per line, append order
//! index.jsonl            one key line per stored record
//! transcript.jsonl       gateway transcript
//! decisions.log          ensemble audit lines
//! report.json, report.md
//! ```
//!
//! A record is keyed by `(stage, meme_id, slot, input_digest)`. Input digests
//! cover everything a stage consumed, so a changed guideline or template
//! produces a new key and the stage is scheduled again.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::ContextId;
use crate::digest::digest_json;

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RunStoreError {
    #[error("run store i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record in {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("run {0} not found")]
    NotFound(String),
    #[error("invalid run id {0:?}")]
    InvalidRunId(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunStoreError + '_ {
    move |source| RunStoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Cues,
    Description,
    Target,
    Verdict,
    Decision,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Cues,
        Stage::Description,
        Stage::Target,
        Stage::Verdict,
        Stage::Decision,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Cues => "cues",
            Stage::Description => "description",
            Stage::Target => "target",
            Stage::Verdict => "verdict",
            Stage::Decision => "decision",
            Stage::Report => "report",
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always returns the same instant; used for reproducible record files.
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub layout_version: u32,
    pub config_digest: String,
    pub created_at: DateTime<Utc>,
    pub contexts: Vec<ContextId>,
    /// Effective configuration, including template and guideline versions and seeds.
    pub config: Value,
}

impl RunManifest {
    pub fn new(run_id: &str, contexts: Vec<ContextId>, config: Value, created_at: DateTime<Utc>) -> Self {
        Self {
            run_id: run_id.to_string(),
            layout_version: LAYOUT_VERSION,
            config_digest: digest_json(&config),
            created_at,
            contexts,
            config,
        }
    }
}

/// Identifies one unit of stage work.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageKey {
    pub stage: Stage,
    pub meme_id: String,
    /// Distinguishes several records of one stage for a meme, e.g. `ucot/qwen`.
    #[serde(default)]
    pub slot: String,
    pub input_digest: String,
}

impl StageKey {
    pub fn new(stage: Stage, meme_id: &str, slot: &str, input_digest: &str) -> Self {
        Self {
            stage,
            meme_id: meme_id.to_string(),
            slot: slot.to_string(),
            input_digest: input_digest.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub run_id: String,
    pub stage: Stage,
    pub meme_id: String,
    #[serde(default)]
    pub slot: String,
    pub input_digest: String,
    pub payload: Value,
    pub completed_at: DateTime<Utc>,
}

impl StageRecord {
    pub fn key(&self) -> StageKey {
        StageKey::new(self.stage, &self.meme_id, &self.slot, &self.input_digest)
    }
}

#[derive(Serialize)]
struct IndexLine<'a> {
    #[serde(flatten)]
    key: &'a StageKey,
    line: usize,
}

#[derive(Default)]
struct State {
    by_key: HashMap<StageKey, StageRecord>,
    order: HashMap<Stage, Vec<StageKey>>,
}

/// Handle on one run directory. Writes are serialized through an internal
/// lock; reads see everything written so far.
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    state: Mutex<State>,
}

pub fn validate_run_id(run_id: &str) -> Result<(), RunStoreError> {
    let ok = !run_id.is_empty()
        && run_id.len() <= 128
        && run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !run_id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(RunStoreError::InvalidRunId(run_id.to_string()))
    }
}

/// Run ids present under `root`, sorted.
pub fn list_runs(root: &Path) -> Result<Vec<String>, RunStoreError> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.path().join("manifest.json").is_file() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

impl RunStore {
    /// Opens `root/<run_id>`, creating it when absent. An existing manifest
    /// keeps its creation time; its configuration is replaced by `manifest`.
    pub fn open_or_create(root: &Path, manifest: RunManifest) -> Result<Self, RunStoreError> {
        validate_run_id(&manifest.run_id)?;
        let dir = root.join(&manifest.run_id);
        std::fs::create_dir_all(dir.join("records")).map_err(io_err(&dir))?;
        let path = dir.join("manifest.json");
        let mut manifest = manifest;
        if path.exists() {
            let old = read_manifest(&path)?;
            manifest.created_at = old.created_at;
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        let state = load_state(&dir)?;
        Ok(Self {
            dir,
            manifest,
            state: Mutex::new(state),
        })
    }

    /// Opens an existing run.
    pub fn open(root: &Path, run_id: &str) -> Result<Self, RunStoreError> {
        validate_run_id(run_id)?;
        let dir = root.join(run_id);
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(RunStoreError::NotFound(run_id.to_string()));
        }
        let manifest = read_manifest(&path)?;
        let state = load_state(&dir)?;
        Ok(Self {
            dir,
            manifest,
            state: Mutex::new(state),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.dir.join("transcript.jsonl")
    }

    pub fn records_path(&self, stage: Stage) -> PathBuf {
        self.dir.join("records").join(format!("{}.jsonl", stage.as_str()))
    }

    /// Stores `record` unless its key is already present; either way the
    /// stored record is returned.
    pub fn put(&self, record: StageRecord) -> Result<StageRecord, RunStoreError> {
        let key = record.key();
        let mut state = self.state.lock().unwrap();
        if let Some(existing) = state.by_key.get(&key) {
            return Ok(existing.clone());
        }
        let path = self.records_path(record.stage);
        let line = serde_json::to_string(&record).expect("record serializes");
        append_line(&path, &line)?;
        let n = state.order.get(&record.stage).map_or(0, Vec::len);
        let index = serde_json::to_string(&IndexLine { key: &key, line: n }).expect("index serializes");
        append_line(&self.dir.join("index.jsonl"), &index)?;
        state.order.entry(record.stage).or_default().push(key.clone());
        state.by_key.insert(key, record.clone());
        Ok(record)
    }

    /// Builds and stores a record for this run.
    pub fn put_payload(
        &self,
        key: &StageKey,
        payload: Value,
        completed_at: DateTime<Utc>,
    ) -> Result<StageRecord, RunStoreError> {
        self.put(StageRecord {
            run_id: self.manifest.run_id.clone(),
            stage: key.stage,
            meme_id: key.meme_id.clone(),
            slot: key.slot.clone(),
            input_digest: key.input_digest.clone(),
            payload,
            completed_at,
        })
    }

    pub fn get(&self, key: &StageKey) -> Option<StageRecord> {
        self.state.lock().unwrap().by_key.get(key).cloned()
    }

    pub fn contains(&self, key: &StageKey) -> bool {
        self.state.lock().unwrap().by_key.contains_key(key)
    }

    /// Records of one stage in append order.
    pub fn records(&self, stage: Stage) -> Vec<StageRecord> {
        let state = self.state.lock().unwrap();
        state
            .order
            .get(&stage)
            .map(|keys| keys.iter().map(|k| state.by_key[k].clone()).collect())
            .unwrap_or_default()
    }

    /// The most recently stored record for a (stage, meme, slot), whatever its digest.
    pub fn latest(&self, stage: Stage, meme_id: &str, slot: &str) -> Option<StageRecord> {
        let state = self.state.lock().unwrap();
        state.order.get(&stage).and_then(|keys| {
            keys.iter()
                .rev()
                .find(|k| k.meme_id == meme_id && k.slot == slot)
                .map(|k| state.by_key[k].clone())
        })
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Work items without a stored record under the same key.
    pub fn remaining(&self, plan: &[StageKey]) -> Vec<StageKey> {
        let state = self.state.lock().unwrap();
        plan.iter()
            .filter(|k| !state.by_key.contains_key(k))
            .cloned()
            .collect()
    }

    pub fn append_decision_log(&self, line: &str) -> Result<(), RunStoreError> {
        append_line(&self.dir.join("decisions.log"), line)
    }

    pub fn write_file(&self, name: &str, contents: &str) -> Result<PathBuf, RunStoreError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Appends a JSON line to `<run>/<name>`; for annotations kept beside the records.
    pub fn append_jsonl<T: Serialize>(&self, name: &str, value: &T) -> Result<(), RunStoreError> {
        let _guard = self.state.lock().unwrap();
        let line = serde_json::to_string(value).expect("value serializes");
        append_line(&self.dir.join(name), &line)
    }

    pub fn read_jsonl<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<Vec<T>, RunStoreError> {
        let path = self.dir.join(name);
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_lines(&path)
    }
}

fn read_manifest(path: &Path) -> Result<RunManifest, RunStoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunStoreError::Corrupt {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn append_line(path: &Path, line: &str) -> Result<(), RunStoreError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunStoreError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RunStoreError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn load_state(dir: &Path) -> Result<State, RunStoreError> {
    let mut state = State::default();
    for stage in Stage::ALL {
        let path = dir.join("records").join(format!("{}.jsonl", stage.as_str()));
        if !path.exists() {
            continue;
        }
        for record in read_lines::<StageRecord>(&path)? {
            let key = record.key();
            if state.by_key.contains_key(&key) {
                continue;
            }
            state.order.entry(stage).or_default().push(key.clone());
            state.by_key.insert(key, record);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn manifest(id: &str) -> RunManifest {
        RunManifest::new(id, vec![ContextId::Fhm], json!({"seed": 1}), Utc::now())
    }

    #[test]
    fn put_get_round_trip_and_idempotence() {
        let root = tempfile::tempdir().unwrap();
        let store = RunStore::open_or_create(root.path(), manifest("r1")).unwrap();
        let key = StageKey::new(Stage::Cues, "m1", "qwen", "abc");
        let now = Utc::now();
        store.put_payload(&key, json!({"a": 1}), now).unwrap();
        let again = store.put_payload(&key, json!({"a": 2}), now).unwrap();
        assert_eq!(again.payload, json!({"a": 1}));
        assert_eq!(store.get(&key).unwrap().payload, json!({"a": 1}));
        assert_eq!(store.records(Stage::Cues).len(), 1);

        let reopened = RunStore::open(root.path(), "r1").unwrap();
        assert_eq!(reopened.get(&key).unwrap().payload, json!({"a": 1}));
        assert_eq!(list_runs(root.path()).unwrap(), vec!["r1"]);
    }

    #[test]
    fn thousand_records() {
        let root = tempfile::tempdir().unwrap();
        let store = RunStore::open_or_create(root.path(), manifest("bulk")).unwrap();
        let now = Utc::now();
        for i in 0..1000 {
            let key = StageKey::new(Stage::Verdict, &format!("m{i}"), "s", "d");
            store.put_payload(&key, json!(i), now).unwrap();
        }
        let reopened = RunStore::open(root.path(), "bulk").unwrap();
        assert_eq!(reopened.records(Stage::Verdict).len(), 1000);
    }

    #[test]
    fn remaining_skips_completed_and_reschedules_changed_digests() {
        let root = tempfile::tempdir().unwrap();
        let store = RunStore::open_or_create(root.path(), manifest("r")).unwrap();
        let plan: Vec<StageKey> = (0..3)
            .map(|i| StageKey::new(Stage::Description, &format!("m{i}"), "", "v1"))
            .collect();
        assert_eq!(store.remaining(&plan), plan);
        for k in &plan {
            store.put_payload(k, json!(null), Utc::now()).unwrap();
        }
        assert!(store.remaining(&plan).is_empty());
        let bumped: Vec<StageKey> = plan
            .iter()
            .map(|k| StageKey::new(k.stage, &k.meme_id, "", "v2"))
            .collect();
        assert_eq!(store.remaining(&bumped).len(), 3);
        // the old record stays available
        assert_eq!(store.latest(Stage::Description, "m0", "").unwrap().input_digest, "v1");
    }

    #[test]
    fn manifest_digest_is_stable_and_created_at_kept() {
        let root = tempfile::tempdir().unwrap();
        let m = manifest("r");
        let created = m.created_at;
        let digest = m.config_digest.clone();
        let s = RunStore::open_or_create(root.path(), m).unwrap();
        let text = std::fs::read_to_string(s.dir().join("manifest.json")).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(digest_json(&back.config), digest);
        let later = RunManifest::new("r", vec![], json!({"seed": 2}), Utc::now());
        let s2 = RunStore::open_or_create(root.path(), later).unwrap();
        assert_eq!(s2.manifest().created_at, created);
    }

    #[test]
    fn run_ids_are_checked() {
        assert!(validate_run_id("run-2024_01.a").is_ok());
        for bad in ["", "../x", "a/b", ".hidden"] {
            assert!(validate_run_id(bad).is_err(), "{bad}");
        }
    }
}
