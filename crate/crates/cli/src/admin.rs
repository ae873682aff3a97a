//! Subscriber, CDR and voicemail administration behind `ipts-admin`.
//!
//! Every users-file edit rewrites the whole file through a temp file and a
//! rename. A running proxy notices the new mtime and reloads it.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ipts_core::b2bua::{list_mailbox, VmEntry};
use ipts_core::proxy::{read_cdrs, Cdr, CdrError, ProxyConfig};
use ipts_core::registrar::{
    format_users, load_users, valid_extension, write_atomic_with, Privilege, RegistrarError, Subscriber,
};
use thiserror::Error;
use tracing::info;

/// Milliseconds to stall halfway through a users-file write. Only crash
/// tests set it.
pub const PAUSE_ENV: &str = "IPTS_ADMIN_PAUSE_MS";

#[derive(Debug, Error)]
pub enum AdminError {
    #[error("extension {0} already exists")]
    DuplicateExtension(String),
    #[error("unknown extension {0}")]
    UnknownExtension(String),
    #[error("{0}")]
    BadArgument(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
}

impl AdminError {
    /// 1 for mistakes the operator can fix by retyping, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            AdminError::DuplicateExtension(_) | AdminError::UnknownExtension(_) | AdminError::BadArgument(_) => 1,
            AdminError::Io { .. } | AdminError::Malformed { .. } => 2,
        }
    }
}

/// Files the admin tool works on.
#[derive(Debug, Clone)]
pub struct AdminPaths {
    pub users: PathBuf,
    pub cdr: PathBuf,
    pub vm_dir: PathBuf,
    pub realm: String,
    pub external_prefix: String,
}

impl Default for AdminPaths {
    fn default() -> Self {
        Self {
            users: "users.csv".into(),
            cdr: "cdr.csv".into(),
            vm_dir: "voicemail".into(),
            realm: "ipts".into(),
            external_prefix: "9".into(),
        }
    }
}

impl AdminPaths {
    /// Takes the users file, CDR file, realm and dialing prefix from a
    /// proxy config so the tool edits exactly what the daemon reads.
    pub fn from_proxy(cfg: &ProxyConfig, vm_dir: PathBuf) -> Self {
        let d = Self::default();
        Self {
            users: cfg.users_path.clone().unwrap_or(d.users),
            cdr: cfg.cdr_path.clone().unwrap_or(d.cdr),
            vm_dir,
            realm: cfg.realm.clone(),
            external_prefix: cfg.external_prefix.clone(),
        }
    }
}

fn users_error(path: &Path, e: RegistrarError) -> AdminError {
    match e {
        RegistrarError::Io(source) => AdminError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => AdminError::Malformed {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

pub fn user_list(paths: &AdminPaths) -> Result<Vec<Subscriber>, AdminError> {
    load_users(&paths.users).map_err(|e| users_error(&paths.users, e))
}

pub fn user_add(
    paths: &AdminPaths,
    ext: &str,
    name: &str,
    password: &str,
    privilege: &str,
) -> Result<Subscriber, AdminError> {
    if !valid_extension(ext, &paths.external_prefix) {
        return Err(AdminError::BadArgument(format!(
            "extension {ext:?} must be digits and must not start with {:?}",
            paths.external_prefix
        )));
    }
    if name.is_empty() || name.contains([',', '\n', '\r']) {
        return Err(AdminError::BadArgument(format!(
            "display name {name:?} must be non-empty and free of commas"
        )));
    }
    if password.is_empty() {
        return Err(AdminError::BadArgument("password must not be empty".into()));
    }
    let privilege = Privilege::parse(privilege)
        .ok_or_else(|| AdminError::BadArgument(format!("privilege {privilege:?} is neither internal nor external")))?;
    let mut subs = user_list(paths)?;
    if subs.iter().any(|s| s.extension == ext) {
        return Err(AdminError::DuplicateExtension(ext.to_string()));
    }
    let sub = Subscriber::new(ext, name, &paths.realm, password, privilege);
    subs.push(sub.clone());
    save(paths, &subs)?;
    info!(ext, "user added");
    Ok(sub)
}

pub fn user_del(paths: &AdminPaths, ext: &str) -> Result<Subscriber, AdminError> {
    let mut subs = user_list(paths)?;
    let pos = subs
        .iter()
        .position(|s| s.extension == ext)
        .ok_or_else(|| AdminError::UnknownExtension(ext.to_string()))?;
    let gone = subs.remove(pos);
    save(paths, &subs)?;
    info!(ext, "user removed");
    Ok(gone)
}

fn save(paths: &AdminPaths, subs: &[Subscriber]) -> Result<(), AdminError> {
    let pause = std::env::var(PAUSE_ENV).ok().and_then(|v| v.parse::<u64>().ok());
    write_atomic_with(&paths.users, format_users(subs).as_bytes(), || {
        if let Some(ms) = pause {
            std::thread::sleep(Duration::from_millis(ms));
        }
    })
    .map_err(|source| AdminError::Io {
        path: paths.users.clone(),
        source,
    })
}

/// Records whose call started at or after `since` (Unix ms).
pub fn cdr_list(paths: &AdminPaths, since: Option<u64>) -> Result<Vec<Cdr>, AdminError> {
    let all = read_cdrs(&paths.cdr).map_err(|e| match e {
        CdrError::Io(source) => AdminError::Io {
            path: paths.cdr.clone(),
            source,
        },
        other => AdminError::Malformed {
            path: paths.cdr.clone(),
            reason: other.to_string(),
        },
    })?;
    Ok(all
        .into_iter()
        .filter(|c| since.is_none_or(|t| c.start_ms >= t))
        .collect())
}

pub fn vm_list(paths: &AdminPaths, ext: &str) -> Result<Vec<VmEntry>, AdminError> {
    if !valid_extension(ext, "") {
        return Err(AdminError::BadArgument(format!("mailbox {ext:?} is not an extension")));
    }
    list_mailbox(&paths.vm_dir, ext).map_err(|source| AdminError::Io {
        path: paths.vm_dir.clone(),
        source,
    })
}

pub fn render_users(subs: &[Subscriber]) -> String {
    let mut out = format!("{:<10} {:<20} {}\n", "EXTENSION", "NAME", "PRIVILEGE");
    for s in subs {
        let _ = writeln!(
            out,
            "{:<10} {:<20} {}",
            s.extension,
            s.display_name,
            s.privilege.as_str()
        );
    }
    out
}

pub fn render_cdrs(cdrs: &[Cdr]) -> String {
    let mut out = String::from("call_id,caller,callee,start_ms,answer_ms,end_ms,duration_ms,disposition\n");
    for c in cdrs {
        let answer = c.answer_ms.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{answer},{},{},{}",
            c.call_id,
            c.caller,
            c.callee,
            c.start_ms,
            c.end_ms,
            c.duration_ms,
            c.disposition.as_str()
        );
    }
    out
}

pub fn render_vm(entries: &[VmEntry]) -> String {
    let mut out = format!("{:<16} {:>10}  {}\n", "RECEIVED_MS", "LENGTH_MS", "FILE");
    for e in entries {
        let _ = writeln!(out, "{:<16} {:>10}  {}", e.unix_ms, e.duration_ms, e.filename);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(dir: &Path) -> AdminPaths {
        AdminPaths {
            users: dir.join("users.csv"),
            cdr: dir.join("cdr.csv"),
            vm_dir: dir.join("vm"),
            ..AdminPaths::default()
        }
    }

    #[test]
    fn add_list_delete() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path());
        user_add(&p, "2001", "Alice", "pw", "external").unwrap();
        user_add(&p, "2002", "Bob", "pw", "internal").unwrap();
        assert_eq!(user_list(&p).unwrap().len(), 2);
        assert!(matches!(
            user_add(&p, "2001", "Again", "pw", "internal"),
            Err(AdminError::DuplicateExtension(_))
        ));
        user_del(&p, "2001").unwrap();
        let left = user_list(&p).unwrap();
        assert_eq!(left.len(), 1);
        assert_eq!(left[0].extension, "2002");
        assert!(matches!(user_del(&p, "2001"), Err(AdminError::UnknownExtension(_))));
    }

    #[test]
    fn bad_arguments_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path());
        for (ext, name, privilege) in [
            ("9123", "X", "internal"),
            ("20a1", "X", "internal"),
            ("2001", "A,B", "internal"),
            ("2001", "X", "admin"),
        ] {
            let e = user_add(&p, ext, name, "pw", privilege).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{e}");
        }
        assert!(!p.users.exists());
    }

    #[test]
    fn malformed_users_file_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path());
        std::fs::write(&p.users, "2001,Alice\n").unwrap();
        assert_eq!(user_list(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn stored_credential_is_the_digest_ha1() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path());
        user_add(&p, "2003", "Carol", "secret", "internal").unwrap();
        let c = &user_list(&p).unwrap()[0];
        assert_eq!(c.credential, ipts_core::digest::credential("2003", "ipts", "secret"));
    }

    #[test]
    fn cdr_since_filters_on_start() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path());
        let w = ipts_core::proxy::CdrWriter::new(&p.cdr);
        w.append(&Cdr::answered("a", "2001", "2002", 1_000, 1_500, 3_500))
            .unwrap();
        w.append(&Cdr::unanswered(
            "b",
            "2001",
            "2002",
            5_000,
            6_000,
            ipts_core::proxy::Disposition::Busy,
        ))
        .unwrap();
        assert_eq!(cdr_list(&p, None).unwrap().len(), 2);
        let late = cdr_list(&p, Some(4_000)).unwrap();
        assert_eq!(late.len(), 1);
        assert_eq!(late[0].call_id, "b");
        assert!(render_cdrs(&late).contains(",Busy"));
    }

    #[test]
    fn empty_mailbox_lists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path());
        assert!(vm_list(&p, "2002").unwrap().is_empty());
        assert_eq!(vm_list(&p, "../x").unwrap_err().exit_code(), 1);
    }
}
