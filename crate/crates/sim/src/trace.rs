//! Trace records, exported one JSON object per line with a fixed key order
//! (`t_us`, `node`, `kind`, `detail`).

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_us: u64,
    pub node: String,
    pub kind: String,
    pub detail: String,
}

pub mod kind {
    pub const CONNECT: &str = "connect";
    pub const DISCONNECT: &str = "disconnect";
    pub const MOVE: &str = "move";
    pub const SAMPLE: &str = "sample";
    pub const SEND: &str = "send";
    pub const DELIVER: &str = "deliver";
    pub const DROP: &str = "drop";
    pub const FAULT: &str = "fault";
    pub const VERDICT: &str = "verdict";
    pub const BLOCK: &str = "block";
    pub const HANDSHAKE: &str = "handshake";
    pub const STOP: &str = "stop";
    pub const REMOVAL: &str = "removal";
}

pub fn write_ndjson<W: Write>(records: &[TraceRecord], mut out: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn to_ndjson(records: &[TraceRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_ndjson(records, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

#[derive(Debug, thiserror::Error)]
pub enum TraceReadError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceReadError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| TraceReadError::Parse {
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-kind counts plus the time span, for `summarize`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSummary {
    pub records: usize,
    pub first_us: Option<u64>,
    pub last_us: Option<u64>,
    pub by_kind: BTreeMap<String, usize>,
    pub messages_by_kind: BTreeMap<String, usize>,
}

pub fn summarize(records: &[TraceRecord]) -> TraceSummary {
    let mut s = TraceSummary {
        records: records.len(),
        first_us: records.first().map(|r| r.t_us),
        last_us: records.last().map(|r| r.t_us),
        ..TraceSummary::default()
    };
    for r in records {
        *s.by_kind.entry(r.kind.clone()).or_default() += 1;
        if r.kind == kind::SEND {
            // detail starts with "#<id> <MessageKind> ..."
            if let Some(msg) = r.detail.split_whitespace().nth(1) {
                *s.messages_by_kind.entry(msg.to_string()).or_default() += 1;
            }
        }
    }
    s
}
