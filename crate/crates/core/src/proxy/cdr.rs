//! Call detail records: one CSV row per finished call.

use std::fs::OpenOptions;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::clock::UnixMs;

pub const CDR_HEADER: [&str; 8] = [
    "call_id",
    "caller",
    "callee",
    "start_ms",
    "answer_ms",
    "end_ms",
    "duration_ms",
    "disposition",
];

#[derive(Debug, Error)]
pub enum CdrError {
    #[error("cdr file: {0}")]
    Csv(#[from] csv::Error),
    #[error("cdr row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Answered,
    NoAnswer,
    Busy,
    Failed,
    Cancelled,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Answered => "Answered",
            Disposition::NoAnswer => "NoAnswer",
            Disposition::Busy => "Busy",
            Disposition::Failed => "Failed",
            Disposition::Cancelled => "Cancelled",
        }
    }

    /// Disposition of a call that never got a 2xx.
    pub fn for_failure(code: u16) -> Self {
        match code {
            486 | 600 => Disposition::Busy,
            408 | 480 => Disposition::NoAnswer,
            487 => Disposition::Cancelled,
            _ => Disposition::Failed,
        }
    }
}

impl FromStr for Disposition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Answered" => Disposition::Answered,
            "NoAnswer" => Disposition::NoAnswer,
            "Busy" => Disposition::Busy,
            "Failed" => Disposition::Failed,
            "Cancelled" => Disposition::Cancelled,
            other => return Err(format!("unknown disposition {other}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cdr {
    pub call_id: String,
    pub caller: String,
    pub callee: String,
    pub start_ms: UnixMs,
    pub answer_ms: Option<UnixMs>,
    pub end_ms: UnixMs,
    pub duration_ms: u64,
    pub disposition: Disposition,
}

impl Cdr {
    pub fn answered(call_id: &str, caller: &str, callee: &str, start: UnixMs, answer: UnixMs, end: UnixMs) -> Self {
        let end = end.max(answer);
        Self {
            call_id: call_id.into(),
            caller: caller.into(),
            callee: callee.into(),
            start_ms: start,
            answer_ms: Some(answer),
            end_ms: end,
            duration_ms: end - answer,
            disposition: Disposition::Answered,
        }
    }

    pub fn unanswered(
        call_id: &str,
        caller: &str,
        callee: &str,
        start: UnixMs,
        end: UnixMs,
        disposition: Disposition,
    ) -> Self {
        Self {
            call_id: call_id.into(),
            caller: caller.into(),
            callee: callee.into(),
            start_ms: start,
            answer_ms: None,
            end_ms: end.max(start),
            duration_ms: 0,
            disposition,
        }
    }

    fn record(&self) -> [String; 8] {
        [
            self.call_id.clone(),
            self.caller.clone(),
            self.callee.clone(),
            self.start_ms.to_string(),
            self.answer_ms.map(|a| a.to_string()).unwrap_or_default(),
            self.end_ms.to_string(),
            self.duration_ms.to_string(),
            self.disposition.as_str().to_string(),
        ]
    }
}

/// Append-only CDR file. The header is written when the file is new.
pub struct CdrWriter {
    path: PathBuf,
}

impl CdrWriter {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, cdr: &Cdr) -> Result<(), CdrError> {
        let fresh = std::fs::metadata(&self.path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(CDR_HEADER)?;
        }
        w.write_record(cdr.record())?;
        w.flush()?;
        Ok(())
    }
}

/// Reads every record of a CDR file; a missing file is empty.
pub fn read_cdrs(path: &Path) -> Result<Vec<Cdr>, CdrError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let bad = |reason: &str| CdrError::BadRow {
            row,
            reason: reason.into(),
        };
        if rec.len() != CDR_HEADER.len() {
            return Err(bad("wrong field count"));
        }
        let num = |j: usize| rec[j].parse::<u64>().map_err(|_| bad(CDR_HEADER[j]));
        out.push(Cdr {
            call_id: rec[0].to_string(),
            caller: rec[1].to_string(),
            callee: rec[2].to_string(),
            start_ms: num(3)?,
            answer_ms: if rec[4].is_empty() { None } else { Some(num(4)?) },
            end_ms: num(5)?,
            duration_ms: num(6)?,
            disposition: rec[7].parse().map_err(|e: String| bad(&e))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cdr.csv");
        let w = CdrWriter::new(&path);
        let a = Cdr::answered("c1", "2001", "2002", 1000, 1500, 3500);
        let b = Cdr::unanswered("c2", "2001", "2003", 4000, 4100, Disposition::for_failure(486));
        w.append(&a).unwrap();
        w.append(&b).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("call_id,caller,callee,start_ms,answer_ms,end_ms,duration_ms,disposition\n"));
        assert_eq!(text.lines().count(), 3);
        let got = read_cdrs(&path).unwrap();
        assert_eq!(got, vec![a.clone(), b]);
        assert_eq!(got[0].duration_ms, 2000);
        assert_eq!(got[1].disposition, Disposition::Busy);
    }

    #[test]
    fn duration_invariants() {
        let c = Cdr::unanswered("x", "a", "b", 10, 5, Disposition::Cancelled);
        assert!(c.end_ms >= c.start_ms);
        assert_eq!(c.duration_ms, 0);
        assert_eq!(Disposition::for_failure(487), Disposition::Cancelled);
        assert_eq!(Disposition::for_failure(480), Disposition::NoAnswer);
    }
}
