use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, DecodingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptOutcome {
    Response(ChatResponse),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub seq: u64,
    pub endpoint_id: String,
    pub model_name: String,
    pub request_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub request: ChatRequest,
    pub decoding: DecodingConfig,
    pub attempts: u32,
    pub elapsed_ms: u64,
    pub outcome: TranscriptOutcome,
}

struct Inner {
    next_seq: u64,
    memory: Vec<TranscriptRecord>,
    file: Option<File>,
}

/// Serialized appender for transcript records, in memory or as a JSON-lines file.
pub struct TranscriptSink {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
    keep_in_memory: bool,
}

impl TranscriptSink {
    pub fn memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                next_seq: 0,
                memory: Vec::new(),
                file: None,
            }),
            path: None,
            keep_in_memory: true,
        }
    }

    /// Appends to `path`, continuing the sequence numbering of any existing records.
    pub fn file(path: &Path) -> std::io::Result<Self> {
        let existing = if path.exists() {
            BufReader::new(File::open(path)?)
                .lines()
                .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
                .count() as u64
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                next_seq: existing,
                memory: Vec::new(),
                file: Some(file),
            }),
            path: Some(path.to_path_buf()),
            keep_in_memory: false,
        })
    }

    pub fn append(&self, mut record: TranscriptRecord) {
        let mut inner = self.inner.lock().expect("transcript lock poisoned");
        record.seq = inner.next_seq;
        inner.next_seq += 1;
        if let Some(f) = inner.file.as_mut() {
            let line = serde_json::to_string(&record).expect("transcript record serializes");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                tracing::error!(error = %e, "failed to append transcript record");
            }
        }
        if self.keep_in_memory {
            inner.memory.push(record);
        }
    }

    /// Number of records appended, including those written by earlier sessions on the same file.
    pub fn count(&self) -> u64 {
        self.inner.lock().expect("transcript lock poisoned").next_seq
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        if let Some(path) = &self.path {
            return read_transcript(path).unwrap_or_default();
        }
        self.inner
            .lock()
            .expect("transcript lock poisoned")
            .memory
            .clone()
    }
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, ChatResponse};

    fn record(tag: &str) -> TranscriptRecord {
        TranscriptRecord {
            seq: 99,
            endpoint_id: "e".into(),
            model_name: "m".into(),
            request_digest: "d".into(),
            tag: Some(tag.into()),
            request: ChatRequest::single(ChatMessage::user("hi")),
            decoding: DecodingConfig::text_default(),
            attempts: 1,
            elapsed_ms: 1,
            outcome: TranscriptOutcome::Response(ChatResponse::stop("ok")),
        }
    }

    #[test]
    fn file_sink_continues_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let a = TranscriptSink::file(&path).unwrap();
        a.append(record("a"));
        a.append(record("b"));
        drop(a);
        let b = TranscriptSink::file(&path).unwrap();
        assert_eq!(b.count(), 2);
        b.append(record("c"));
        let recs = b.records();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs.iter().map(|r| r.seq).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }
}
