//! Mailbox layout: `<vmdir>/<mailbox>/<unix_ms>.wav` plus an `index` file
//! with one `unix_ms,duration_ms,filename` line per message.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;

use crate::clock::UnixMs;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmEntry {
    pub unix_ms: UnixMs,
    pub duration_ms: u64,
    pub filename: String,
}

pub fn append_index(vm_dir: &Path, mailbox: &str, entry: &VmEntry) -> io::Result<()> {
    let dir = vm_dir.join(mailbox);
    std::fs::create_dir_all(&dir)?;
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join("index"))?;
    writeln!(f, "{},{},{}", entry.unix_ms, entry.duration_ms, entry.filename)?;
    f.sync_data()
}

/// Messages of one mailbox in arrival order. Malformed lines are skipped.
pub fn list_mailbox(vm_dir: &Path, mailbox: &str) -> io::Result<Vec<VmEntry>> {
    let text = match std::fs::read_to_string(vm_dir.join(mailbox).join("index")) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut f = l.splitn(3, ',');
            Some(VmEntry {
                unix_ms: f.next()?.parse().ok()?,
                duration_ms: f.next()?.parse().ok()?,
                filename: f.next()?.to_string(),
            })
        })
        .collect())
}

/// Mailbox names that have an index, sorted.
pub fn list_mailboxes(vm_dir: &Path) -> io::Result<Vec<String>> {
    let rd = match std::fs::read_dir(vm_dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out: Vec<String> = rd
        .filter_map(Result::ok)
        .filter(|e| e.path().join("index").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    out.sort();
    Ok(out)
}
