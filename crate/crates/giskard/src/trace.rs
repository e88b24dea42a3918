//! Trace records and the JSON-lines trace file.
//!
//! File layout: a header line, one line per record, a footer line. The
//! footer holds the record count and a SHA-256 over every preceding line
//! (each including its trailing newline), so truncation and edits are
//! detected on load.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::NodeId;
use crate::state::Msg;

pub const TRACE_FORMAT: &str = "giskard-trace/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Send,
    Deliver,
    Drop,
    Reject,
    Process,
    Timeout,
    ViewEntry,
    Stage,
}

impl RecordKind {
    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Send => "send",
            RecordKind::Deliver => "deliver",
            RecordKind::Drop => "drop",
            RecordKind::Reject => "reject",
            RecordKind::Process => "process",
            RecordKind::Timeout => "timeout",
            RecordKind::ViewEntry => "view_entry",
            RecordKind::Stage => "stage",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub time: u64,
    pub kind: RecordKind,
    pub node: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg: Option<Msg>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, Value>,
}

impl TraceRecord {
    pub fn detail_u64(&self, key: &str) -> Option<u64> {
        self.detail.get(key).and_then(Value::as_u64)
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.detail.get(key).and_then(Value::as_str)
    }

    pub fn detail_bool(&self, key: &str) -> bool {
        self.detail.get(key).and_then(Value::as_bool).unwrap_or(false)
    }

    /// One JSON line, without the newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub kind: String,
    pub format: String,
    pub seed: u64,
    pub config_digest: String,
    pub config: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub kind: String,
    pub records: u64,
    pub body_digest: String,
}

/// A complete trace: the configuration that produced it plus the records.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace is missing its {0}")]
    Missing(&'static str),
    #[error("unsupported trace format {0:?}")]
    Format(String),
    #[error("record count mismatch: footer says {footer}, file has {actual}")]
    Count { footer: u64, actual: u64 },
    #[error("body digest mismatch: trace was modified or truncated")]
    Digest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl TraceFile {
    /// The exact bytes written to disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = String::new();
        body.push_str(&serde_json::to_string(&self.header).expect("header serializes"));
        body.push('\n');
        for r in &self.records {
            body.push_str(&r.to_line());
            body.push('\n');
        }
        let footer = TraceFooter {
            kind: "footer".into(),
            records: self.records.len() as u64,
            body_digest: sha256_hex(body.as_bytes()),
        };
        body.push_str(&serde_json::to_string(&footer).expect("footer serializes"));
        body.push('\n');
        body.into_bytes()
    }

    pub fn write(&self, path: &Path) -> Result<(), TraceError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<TraceFile, TraceError> {
        let bytes = fs::read(path)?;
        TraceFile::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<TraceFile, TraceError> {
        let mut digest = Sha256::new();
        let mut header: Option<TraceHeader> = None;
        let mut records = Vec::new();
        let mut footer: Option<TraceFooter> = None;
        for (i, line) in bytes.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let perr = |e: serde_json::Error| TraceError::Parse { line: line_no, message: e.to_string() };
            if footer.is_some() {
                return Err(TraceError::Parse { line: line_no, message: "content after footer".into() });
            }
            if header.is_none() {
                let h: TraceHeader = serde_json::from_str(&line).map_err(perr)?;
                if h.kind != "header" {
                    return Err(TraceError::Missing("header"));
                }
                if h.format != TRACE_FORMAT {
                    return Err(TraceError::Format(h.format));
                }
                header = Some(h);
            } else if line.starts_with("{\"kind\":\"footer\"") {
                footer = Some(serde_json::from_str(&line).map_err(perr)?);
                continue;
            } else {
                records.push(serde_json::from_str::<TraceRecord>(&line).map_err(perr)?);
            }
            digest.update(line.as_bytes());
            digest.update(b"\n");
        }
        let header = header.ok_or(TraceError::Missing("header"))?;
        let footer = footer.ok_or(TraceError::Missing("footer"))?;
        if footer.records != records.len() as u64 {
            return Err(TraceError::Count { footer: footer.records, actual: records.len() as u64 });
        }
        let actual: String = digest.finalize().iter().map(|b| format!("{b:02x}")).collect();
        if actual != footer.body_digest {
            return Err(TraceError::Digest);
        }
        Ok(TraceFile { header, records })
    }
}

/// First line at which two encoded traces differ (1-based), if any.
pub fn first_difference(a: &[u8], b: &[u8]) -> Option<usize> {
    let mut la = a.split(|&c| c == b'\n');
    let mut lb = b.split(|&c| c == b'\n');
    let mut n = 0;
    loop {
        n += 1;
        match (la.next(), lb.next()) {
            (None, None) => return None,
            (x, y) if x != y => return Some(n),
            _ => {}
        }
    }
}
