//! Subscriber database, location bindings and REGISTER handling.
//!
//! Subscribers come from a plain users file; bindings live in memory and are
//! mirrored to an append-only journal. Several proxies pointed at the same
//! journal converge on the same binding set by tailing it.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use thiserror::Error;
use tracing::{debug, warn};

use crate::clock::UnixMs;
use crate::digest::{self, Challenge, Credentials};
use crate::ids::IdGen;
use crate::sip::{build_response, NameAddr, Request, Response, SipHeaders, SipUri, StatusCode};

#[derive(Debug, Error)]
pub enum RegistrarError {
    #[error("malformed users file at line {0}")]
    MalformedUserFile(usize),
    #[error("corrupt journal record at byte offset {0}")]
    JournalCorrupt(u64),
    #[error("extension {0} already exists")]
    DuplicateExtension(String),
    #[error("unknown extension {0}")]
    UnknownExtension(String),
    #[error("invalid extension {0:?}")]
    InvalidExtension(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Privilege {
    Internal,
    External,
}

impl Privilege {
    pub fn as_str(self) -> &'static str {
        match self {
            Privilege::Internal => "internal",
            Privilege::External => "external",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "internal" => Some(Privilege::Internal),
            "external" => Some(Privilege::External),
            _ => None,
        }
    }

    pub fn may_call_external(self) -> bool {
        self == Privilege::External
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscriber {
    pub extension: String,
    pub display_name: String,
    /// Hex MD5 of `extension:realm:password`.
    pub credential: String,
    pub privilege: Privilege,
}

impl Subscriber {
    pub fn new(extension: &str, display_name: &str, realm: &str, password: &str, privilege: Privilege) -> Self {
        Self {
            extension: extension.to_string(),
            display_name: display_name.to_string(),
            credential: digest::credential(extension, realm, password),
            privilege,
        }
    }
}

/// Checks that `ext` is all digits and does not collide with the external
/// dialing prefix.
pub fn valid_extension(ext: &str, external_prefix: &str) -> bool {
    !ext.is_empty()
        && ext.bytes().all(|b| b.is_ascii_digit())
        && (external_prefix.is_empty() || !ext.starts_with(external_prefix))
}

pub fn parse_users(text: &str) -> Result<Vec<Subscriber>, RegistrarError> {
    let mut out: Vec<Subscriber> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || RegistrarError::MalformedUserFile(i + 1);
        let [ext, name, cred, privilege] = fields.as_slice() else {
            return Err(bad());
        };
        if !valid_extension(ext, "")
            || cred.len() != 32
            || !cred.bytes().all(|b| b.is_ascii_hexdigit())
            || out.iter().any(|s| s.extension == *ext)
        {
            return Err(bad());
        }
        out.push(Subscriber {
            extension: ext.to_string(),
            display_name: name.to_string(),
            credential: cred.to_ascii_lowercase(),
            privilege: Privilege::parse(privilege).ok_or_else(bad)?,
        });
    }
    Ok(out)
}

pub fn format_users(subs: &[Subscriber]) -> String {
    let mut out = String::from("# extension,display_name,digest_hex,privilege\n");
    for s in subs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.extension,
            s.display_name,
            s.credential,
            s.privilege.as_str()
        ));
    }
    out
}

/// Reads a users file. A missing file is an empty subscriber list.
pub fn load_users(path: &Path) -> Result<Vec<Subscriber>, RegistrarError> {
    match fs::read_to_string(path) {
        Ok(text) => parse_users(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

/// Replaces `path` with `contents` so readers see either the old or the new
/// file, never a mix.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    write_atomic_with(path, contents, || {})
}

/// [`write_atomic`] with a hook that runs after half of the temp file is
/// written. Crash tests use it to die at the worst moment.
pub fn write_atomic_with(path: &Path, contents: &[u8], midway: impl FnOnce()) -> io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("users");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        let (head, tail) = contents.split_at(contents.len() / 2);
        f.write_all(head)?;
        f.flush()?;
        midway();
        f.write_all(tail)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Users file plus the mtime it was last read at.
#[derive(Debug)]
pub struct UsersFile {
    path: PathBuf,
    seen: Option<SystemTime>,
}

impl UsersFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            seen: None,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn mtime(&self) -> Option<SystemTime> {
        fs::metadata(&self.path).and_then(|m| m.modified()).ok()
    }

    pub fn load(&mut self) -> Result<Vec<Subscriber>, RegistrarError> {
        self.seen = self.mtime();
        load_users(&self.path)
    }

    /// Returns the new subscriber list when the file changed since the last load.
    pub fn reload_if_changed(&mut self) -> Option<Result<Vec<Subscriber>, RegistrarError>> {
        let now = self.mtime();
        if now == self.seen {
            return None;
        }
        Some(self.load())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding {
    pub aor: SipUri,
    pub contact: SipUri,
    pub expires_at: UnixMs,
    pub registered_at: UnixMs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalRecord {
    Add {
        aor: String,
        contact: String,
        expires_at_s: u64,
    },
    Del {
        aor: String,
        contact: String,
    },
}

impl JournalRecord {
    fn line(&self) -> String {
        match self {
            JournalRecord::Add {
                aor,
                contact,
                expires_at_s,
            } => format!("ADD {aor} {contact} {expires_at_s}\n"),
            JournalRecord::Del { aor, contact } => format!("DEL {aor} {contact} 0\n"),
        }
    }

    fn parse(line: &str) -> Option<Self> {
        let mut it = line.split_whitespace();
        let (op, aor, contact, exp) = (it.next()?, it.next()?, it.next()?, it.next()?);
        if it.next().is_some() {
            return None;
        }
        let expires_at_s = exp.parse().ok()?;
        match op {
            "ADD" => Some(JournalRecord::Add {
                aor: aor.into(),
                contact: contact.into(),
                expires_at_s,
            }),
            "DEL" => Some(JournalRecord::Del {
                aor: aor.into(),
                contact: contact.into(),
            }),
            _ => None,
        }
    }
}

#[derive(Debug)]
struct Journal {
    path: PathBuf,
    /// Bytes of the file already applied to the store.
    offset: u64,
}

/// Expiry rounded up to whole seconds so the journal captures it exactly.
fn round_expiry(ms: UnixMs) -> UnixMs {
    ms.div_ceil(1000) * 1000
}

#[derive(Debug, Default)]
pub struct LocationStore {
    subscribers: BTreeMap<String, Subscriber>,
    bindings: BTreeMap<String, Vec<Binding>>,
    journal: Option<Journal>,
}

fn aor_key(aor: &SipUri) -> String {
    aor.user().unwrap_or_default().to_string()
}

impl LocationStore {
    pub fn new(subscribers: Vec<Subscriber>) -> Self {
        let mut s = Self::default();
        s.set_subscribers(subscribers);
        s
    }

    /// Attaches a journal, replaying whatever it already holds.
    pub fn with_journal(mut self, path: impl Into<PathBuf>, now: UnixMs) -> Result<Self, RegistrarError> {
        self.journal = Some(Journal {
            path: path.into(),
            offset: 0,
        });
        self.sync_journal(now)?;
        Ok(self)
    }

    pub fn subscriber(&self, ext: &str) -> Option<&Subscriber> {
        self.subscribers.get(ext)
    }

    pub fn subscribers(&self) -> impl Iterator<Item = &Subscriber> {
        self.subscribers.values()
    }

    /// Swaps the subscriber set, dropping bindings of removed subscribers.
    pub fn set_subscribers(&mut self, subs: Vec<Subscriber>) {
        self.subscribers = subs.into_iter().map(|s| (s.extension.clone(), s)).collect();
        let subs = &self.subscribers;
        self.bindings.retain(|ext, _| subs.contains_key(ext));
    }

    /// All unexpired bindings for `aor`.
    pub fn lookup(&self, aor: &SipUri, now: UnixMs) -> Vec<Binding> {
        self.lookup_ext(&aor_key(aor), now)
    }

    pub fn lookup_ext(&self, ext: &str, now: UnixMs) -> Vec<Binding> {
        self.bindings
            .get(ext)
            .map(|v| v.iter().filter(|b| b.expires_at > now).cloned().collect())
            .unwrap_or_default()
    }

    /// Binding count including not yet swept expired ones.
    pub fn binding_count(&self) -> usize {
        self.bindings.values().map(Vec::len).sum()
    }

    pub fn add_binding(&mut self, mut b: Binding) -> Result<(), RegistrarError> {
        b.expires_at = round_expiry(b.expires_at);
        let rec = JournalRecord::Add {
            aor: b.aor.to_string(),
            contact: b.contact.to_string(),
            expires_at_s: b.expires_at / 1000,
        };
        self.insert(b);
        self.append(&rec)
    }

    pub fn remove_binding(&mut self, aor: &SipUri, contact: &SipUri) -> Result<(), RegistrarError> {
        self.delete(&aor_key(aor), &contact.to_string());
        self.append(&JournalRecord::Del {
            aor: aor.to_string(),
            contact: contact.to_string(),
        })
    }

    pub fn remove_all(&mut self, aor: &SipUri) -> Result<(), RegistrarError> {
        let contacts: Vec<SipUri> = self
            .bindings
            .get(&aor_key(aor))
            .map(|v| v.iter().map(|b| b.contact.clone()).collect())
            .unwrap_or_default();
        for c in contacts {
            self.remove_binding(aor, &c)?;
        }
        Ok(())
    }

    /// Drops expired bindings, returning how many went.
    pub fn expire_bindings(&mut self, now: UnixMs) -> usize {
        let mut n = 0;
        for list in self.bindings.values_mut() {
            let before = list.len();
            list.retain(|b| b.expires_at > now);
            n += before - list.len();
        }
        self.bindings.retain(|_, v| !v.is_empty());
        n
    }

    fn insert(&mut self, b: Binding) {
        let key = aor_key(&b.aor);
        if !self.subscribers.contains_key(&key) {
            return;
        }
        let list = self.bindings.entry(key).or_default();
        list.retain(|x| x.contact != b.contact);
        list.push(b);
    }

    fn delete(&mut self, key: &str, contact: &str) {
        if let Some(list) = self.bindings.get_mut(key) {
            list.retain(|b| b.contact.to_string() != contact);
            if list.is_empty() {
                self.bindings.remove(key);
            }
        }
    }

    fn apply(&mut self, rec: JournalRecord, now: UnixMs) {
        match rec {
            JournalRecord::Add {
                aor,
                contact,
                expires_at_s,
            } => {
                let (Ok(aor), Ok(contact)) = (aor.parse::<SipUri>(), contact.parse::<SipUri>()) else {
                    return;
                };
                let expires_at = expires_at_s * 1000;
                self.insert(Binding {
                    aor,
                    contact,
                    expires_at,
                    registered_at: now.min(expires_at.saturating_sub(1)),
                });
            }
            JournalRecord::Del { aor, contact } => {
                if let Ok(aor) = aor.parse::<SipUri>() {
                    self.delete(&aor_key(&aor), &contact);
                }
            }
        }
    }

    /// Replays a whole journal text onto the store.
    pub fn replay(&mut self, text: &str, now: UnixMs) -> Result<(), RegistrarError> {
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end();
            if !body.is_empty() {
                let rec = JournalRecord::parse(body).ok_or(RegistrarError::JournalCorrupt(offset))?;
                self.apply(rec, now);
            }
            offset += line.len() as u64;
        }
        self.expire_bindings(now);
        Ok(())
    }

    /// Applies journal lines appended since the last call. Partial trailing
    /// lines are left for the next round.
    pub fn sync_journal(&mut self, now: UnixMs) -> Result<usize, RegistrarError> {
        let Some(j) = self.journal.as_mut() else {
            return Ok(0);
        };
        let mut f = match File::open(&j.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e.into()),
        };
        let len = f.metadata()?.len();
        if len < j.offset {
            // Truncated underneath us: start over.
            j.offset = 0;
        }
        f.seek(SeekFrom::Start(j.offset))?;
        let mut buf = String::new();
        f.read_to_string(&mut buf)?;
        let complete = buf.rfind('\n').map_or(0, |i| i + 1);
        let start = j.offset;
        j.offset += complete as u64;
        let mut applied = 0;
        let mut pos = start;
        let mut recs = Vec::new();
        for line in buf[..complete].split_inclusive('\n') {
            let body = line.trim_end();
            if !body.is_empty() {
                recs.push(JournalRecord::parse(body).ok_or(RegistrarError::JournalCorrupt(pos))?);
            }
            pos += line.len() as u64;
        }
        for rec in recs {
            self.apply(rec, now);
            applied += 1;
        }
        Ok(applied)
    }

    fn append(&mut self, rec: &JournalRecord) -> Result<(), RegistrarError> {
        let Some(j) = self.journal.as_ref() else {
            return Ok(());
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&j.path)?;
        f.write_all(rec.line().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RegistrarConfig {
    pub realm: String,
    pub default_expires: u32,
    pub min_expires: u32,
    pub nonce_ttl_ms: u64,
}

impl Default for RegistrarConfig {
    fn default() -> Self {
        Self {
            realm: "ipts".into(),
            default_expires: 3600,
            min_expires: 60,
            nonce_ttl_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthVerdict {
    Ok,
    Missing,
    BadCredentials,
    StaleNonce,
}

pub struct Registrar {
    pub cfg: RegistrarConfig,
    pub store: LocationStore,
    nonces: HashMap<String, UnixMs>,
    ids: Arc<IdGen>,
}

impl Registrar {
    pub fn new(cfg: RegistrarConfig, store: LocationStore, ids: Arc<IdGen>) -> Self {
        Self {
            cfg,
            store,
            nonces: HashMap::new(),
            ids,
        }
    }

    /// Issues a fresh single-use nonce.
    pub fn challenge(&mut self, now: UnixMs, stale: bool) -> Challenge {
        let ttl = self.cfg.nonce_ttl_ms;
        self.nonces.retain(|_, issued| now < *issued + ttl);
        let nonce = self.ids.nonce();
        self.nonces.insert(nonce.clone(), now);
        Challenge {
            realm: self.cfg.realm.clone(),
            nonce,
            stale,
        }
    }

    /// Checks the digest in `header` ("Authorization" or
    /// "Proxy-Authorization") against `sub`. Nonces are consumed either way.
    pub fn authenticate(&mut self, req: &Request, header: &str, sub: &Subscriber, now: UnixMs) -> AuthVerdict {
        let Some(creds) = req.headers.get(header).and_then(Credentials::parse) else {
            return AuthVerdict::Missing;
        };
        let fresh = self
            .nonces
            .remove(&creds.nonce)
            .is_some_and(|issued| now < issued + self.cfg.nonce_ttl_ms);
        if !fresh {
            return AuthVerdict::StaleNonce;
        }
        if creds.username == sub.extension
            && creds.realm == self.cfg.realm
            && creds.verify(&sub.credential, req.method.as_str())
        {
            AuthVerdict::Ok
        } else {
            AuthVerdict::BadCredentials
        }
    }

    fn reply(&self, req: &Request, code: u16) -> Response {
        build_response(req, StatusCode::new(code), &self.ids.tag())
            .unwrap_or_else(|_| Response::new(StatusCode::new(code)))
    }

    fn unauthorized(&mut self, req: &Request, now: UnixMs, stale: bool) -> Response {
        let ch = self.challenge(now, stale);
        let mut r = self.reply(req, 401);
        r.headers.push("WWW-Authenticate", ch.to_string());
        r
    }

    pub fn handle_register(&mut self, req: &Request, now: UnixMs) -> Response {
        let Some(to) = req.to_hdr() else {
            return self.reply(req, 400);
        };
        let aor = to.uri.clone();
        let ext = aor_key(&aor);
        let Some(sub) = self.store.subscriber(&ext).cloned() else {
            return self.reply(req, 404);
        };
        match self.authenticate(req, "Authorization", &sub, now) {
            AuthVerdict::Ok => {}
            AuthVerdict::Missing | AuthVerdict::BadCredentials => return self.unauthorized(req, now, false),
            AuthVerdict::StaleNonce => return self.unauthorized(req, now, true),
        }

        let header_expires = req.headers.get("Expires").and_then(|v| v.trim().parse::<u32>().ok());
        let contacts: Vec<&str> = req
            .headers
            .get_all("Contact")
            .flat_map(|v| v.split(','))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();

        let result = if contacts == ["*"] {
            if header_expires != Some(0) {
                return self.reply(req, 400);
            }
            self.store.remove_all(&aor)
        } else {
            let mut parsed = Vec::new();
            for c in &contacts {
                let Ok(na) = c.parse::<NameAddr>() else {
                    return self.reply(req, 400);
                };
                let expires = na
                    .params
                    .value("expires")
                    .and_then(|v| v.parse::<u32>().ok())
                    .or(header_expires)
                    .unwrap_or(self.cfg.default_expires);
                if expires != 0 && expires < self.cfg.min_expires {
                    let mut r = self.reply(req, 423);
                    r.headers.push("Min-Expires", self.cfg.min_expires.to_string());
                    return r;
                }
                parsed.push((na.uri, expires));
            }
            parsed.into_iter().try_for_each(|(contact, expires)| {
                if expires == 0 {
                    self.store.remove_binding(&aor, &contact)
                } else {
                    debug!(%aor, %contact, expires, "binding stored");
                    self.store.add_binding(Binding {
                        aor: aor.clone(),
                        contact,
                        expires_at: now + u64::from(expires) * 1000,
                        registered_at: now,
                    })
                }
            })
        };
        if let Err(e) = result {
            warn!(error = %e, "binding journal write failed");
            return self.reply(req, 500);
        }

        let mut ok = self.reply(req, 200);
        for b in self.store.lookup(&aor, now) {
            let left = b.expires_at.saturating_sub(now).div_ceil(1000);
            ok.headers.push("Contact", format!("<{}>;expires={left}", b.contact));
        }
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sip::{parse_uri, Method};

    const REALM: &str = "ipts";

    fn users() -> Vec<Subscriber> {
        vec![
            Subscriber::new("2001", "Alice", REALM, "secret", Privilege::External),
            Subscriber::new("2002", "Bob", REALM, "hunter2", Privilege::Internal),
        ]
    }

    fn register(ext: &str, contact: &str, expires: Option<u32>) -> Request {
        let mut r = Request::new(Method::Register, parse_uri("sip:pbx").unwrap());
        r.headers.push("Via", "SIP/2.0/UDP 127.0.0.1:5001;branch=z9hG4bK-r");
        r.headers.push("Max-Forwards", "70");
        r.headers.push("From", format!("<sip:{ext}@pbx>;tag=a"));
        r.headers.push("To", format!("<sip:{ext}@pbx>"));
        r.headers.push("Call-ID", "reg-1");
        r.headers.push("CSeq", "1 REGISTER");
        r.headers.push("Contact", format!("<{contact}>"));
        if let Some(e) = expires {
            r.headers.push("Expires", e.to_string());
        }
        r
    }

    fn answer(reg: &mut Registrar, mut req: Request, pw: &str, now: UnixMs) -> Response {
        let first = reg.handle_register(&req, now);
        assert_eq!(first.code(), 401);
        let ch = Challenge::parse(first.headers.get("WWW-Authenticate").unwrap()).unwrap();
        let user = req.to_hdr().unwrap().uri.user().unwrap().to_string();
        let creds = Credentials::answer(&ch, &user, pw, "REGISTER", "sip:pbx");
        req.headers.push("Authorization", creds.to_string());
        reg.handle_register(&req, now)
    }

    fn registrar() -> Registrar {
        Registrar::new(
            RegistrarConfig::default(),
            LocationStore::new(users()),
            Arc::new(IdGen::seeded(1)),
        )
    }

    #[test]
    fn users_file_round_trip() {
        let text = format_users(&users());
        assert_eq!(parse_users(&text).unwrap(), users());
        assert!(matches!(
            parse_users("2001,Alice,zz,internal"),
            Err(RegistrarError::MalformedUserFile(1))
        ));
        assert!(parse_users("# nothing\n\n").unwrap().is_empty());
    }

    #[test]
    fn register_then_lookup() {
        let mut reg = registrar();
        let resp = answer(
            &mut reg,
            register("2001", "sip:2001@127.0.0.1:7000", None),
            "secret",
            1_000,
        );
        assert_eq!(resp.code(), 200);
        assert!(resp.to_tag().is_some());
        let found = reg.store.lookup(&parse_uri("sip:2001@pbx").unwrap(), 2_000);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].contact.to_string(), "sip:2001@127.0.0.1:7000");
        assert_eq!(found[0].expires_at, 3_601_000);
    }

    #[test]
    fn zero_expires_removes() {
        let mut reg = registrar();
        answer(&mut reg, register("2001", "sip:2001@127.0.0.1:7000", None), "secret", 0);
        let resp = answer(
            &mut reg,
            register("2001", "sip:2001@127.0.0.1:7000", Some(0)),
            "secret",
            10,
        );
        assert_eq!(resp.code(), 200);
        assert!(reg.store.lookup_ext("2001", 20).is_empty());
    }

    #[test]
    fn wrong_password_and_unknown_user() {
        let mut reg = registrar();
        let resp = answer(&mut reg, register("2001", "sip:a@h", None), "nope", 0);
        assert_eq!(resp.code(), 401);
        assert_eq!(reg.handle_register(&register("2999", "sip:a@h", None), 0).code(), 404);
    }

    #[test]
    fn too_short_expiry_rejected() {
        let mut reg = registrar();
        let resp = answer(&mut reg, register("2001", "sip:a@h", Some(30)), "secret", 0);
        assert_eq!(resp.code(), 423);
        assert_eq!(resp.headers.get("Min-Expires"), Some("60"));
    }

    #[test]
    fn nonce_single_use_and_expiring() {
        let mut reg = registrar();
        let sub = reg.store.subscriber("2001").unwrap().clone();
        let ch = reg.challenge(0, false);
        let mut req = register("2001", "sip:a@h", None);
        let creds = Credentials::answer(&ch, "2001", "secret", "REGISTER", "sip:pbx");
        req.headers.push("Authorization", creds.to_string());
        assert_eq!(reg.authenticate(&req, "Authorization", &sub, 10), AuthVerdict::Ok);
        assert_eq!(
            reg.authenticate(&req, "Authorization", &sub, 20),
            AuthVerdict::StaleNonce
        );

        let ch = reg.challenge(0, false);
        let mut req = register("2001", "sip:a@h", None);
        let creds = Credentials::answer(&ch, "2001", "secret", "REGISTER", "sip:pbx");
        req.headers.push("Authorization", creds.to_string());
        assert_eq!(
            reg.authenticate(&req, "Authorization", &sub, 60_000),
            AuthVerdict::StaleNonce
        );
    }

    #[test]
    fn forked_contacts_and_expiry() {
        let mut store = LocationStore::new(users());
        let aor = parse_uri("sip:2002@pbx").unwrap();
        for (port, exp) in [(7000, 10_000), (7002, 20_000)] {
            store
                .add_binding(Binding {
                    aor: aor.clone(),
                    contact: parse_uri(&format!("sip:2002@127.0.0.1:{port}")).unwrap(),
                    expires_at: exp,
                    registered_at: 0,
                })
                .unwrap();
        }
        assert_eq!(store.lookup(&aor, 0).len(), 2);
        assert_eq!(store.lookup(&aor, 15_000).len(), 1);
        assert_eq!(store.expire_bindings(0), 0);
        assert_eq!(store.expire_bindings(15_000), 1);
        assert!(store.lookup(&aor, 20_000).is_empty());
    }

    #[test]
    fn journal_replay_and_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bindings.journal");
        let mut a = LocationStore::new(users()).with_journal(&path, 0).unwrap();
        let mut b = LocationStore::new(users()).with_journal(&path, 0).unwrap();
        let aor = parse_uri("sip:2001@pbx").unwrap();
        let contact = parse_uri("sip:2001@127.0.0.1:7000").unwrap();
        a.add_binding(Binding {
            aor: aor.clone(),
            contact: contact.clone(),
            expires_at: 100_500,
            registered_at: 0,
        })
        .unwrap();
        assert_eq!(b.sync_journal(10).unwrap(), 1);
        assert_eq!(
            b.lookup(&aor, 10),
            a.lookup(&aor, 10)
                .into_iter()
                .map(|mut x| {
                    x.registered_at = 10;
                    x
                })
                .collect::<Vec<_>>()
        );
        assert_eq!(b.lookup(&aor, 10)[0].expires_at, 101_000);
        a.remove_binding(&aor, &contact).unwrap();
        b.sync_journal(20).unwrap();
        assert!(b.lookup(&aor, 20).is_empty());

        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "ADD sip:2001@pbx sip:2001@127.0.0.1:7000 101\nDEL sip:2001@pbx sip:2001@127.0.0.1:7000 0\n"
        );
    }

    #[test]
    fn corrupt_journal_reports_offset() {
        let mut s = LocationStore::new(users());
        let err = s.replay("ADD sip:2001@pbx sip:x@h 5\nGARBAGE\n", 0).unwrap_err();
        assert!(matches!(err, RegistrarError::JournalCorrupt(27)));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("users");
        write_atomic(&path, b"one\n").unwrap();
        write_atomic(&path, b"two\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn ops() -> impl Strategy<Value = Vec<(bool, u8, u64)>> {
            prop::collection::vec((any::<bool>(), 0u8..4, 1u64..200), 0..40)
        }

        fn build(ops: &[(bool, u8, u64)]) -> LocationStore {
            let mut s = LocationStore::new(users());
            let aor = parse_uri("sip:2001@pbx").unwrap();
            for &(add, c, exp) in ops {
                let contact = parse_uri(&format!("sip:2001@127.0.0.1:{}", 7000 + u16::from(c) * 2)).unwrap();
                if add {
                    s.add_binding(Binding {
                        aor: aor.clone(),
                        contact,
                        expires_at: exp * 1000,
                        registered_at: 0,
                    })
                    .unwrap();
                } else {
                    s.remove_binding(&aor, &contact).unwrap();
                }
            }
            s
        }

        proptest! {
            #[test]
            fn lookup_never_returns_expired(ops in ops(), now in 0u64..250_000) {
                let s = build(&ops);
                for b in s.lookup_ext("2001", now) {
                    prop_assert!(b.expires_at > now);
                }
            }

            #[test]
            fn replay_matches_and_is_idempotent(ops in ops(), now in 0u64..250_000) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("j");
                let mut live = LocationStore::new(users()).with_journal(&path, 0).unwrap();
                let aor = parse_uri("sip:2001@pbx").unwrap();
                for &(add, c, exp) in &ops {
                    let contact = parse_uri(&format!("sip:2001@127.0.0.1:{}", 7000 + u16::from(c) * 2)).unwrap();
                    if add {
                        live.add_binding(Binding { aor: aor.clone(), contact, expires_at: exp * 1000, registered_at: 0 }).unwrap();
                    } else {
                        live.remove_binding(&aor, &contact).unwrap();
                    }
                }
                let text = fs::read_to_string(&path).unwrap_or_default();
                let contacts = |s: &LocationStore| {
                    let mut v: Vec<(String, u64)> = s.lookup_ext("2001", now).into_iter().map(|b| (b.contact.to_string(), b.expires_at)).collect();
                    v.sort();
                    v
                };
                let mut once = LocationStore::new(users());
                once.replay(&text, now).unwrap();
                let mut twice = LocationStore::new(users());
                twice.replay(&text, now).unwrap();
                twice.replay(&text, now).unwrap();
                prop_assert_eq!(contacts(&once), contacts(&live));
                prop_assert_eq!(contacts(&twice), contacts(&once));
            }
        }
    }
}
