//! Routing proxy: sanity checks, dial-string classification, forking relay
//! and call accounting.
//!
//! The decision logic here is pure; [`server`] wires it to the transaction
//! layer and sockets.

mod cdr;
mod server;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

pub use cdr::{read_cdrs, Cdr, CdrError, CdrWriter, Disposition, CDR_HEADER};
pub use server::{load_config, ProxyCore, ProxyNode, ProxyStats};

use crate::clock::UnixMs;
use crate::config::{relative_to, ConfigError, IniDoc};
use crate::registrar::{Binding, LocationStore, Privilege, Subscriber};
use crate::sip::{Request, MAX_MESSAGE_BYTES};
use crate::transaction::TimerConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyConfig {
    pub name: String,
    pub bind: SocketAddr,
    pub tcp: bool,
    pub realm: String,
    pub domain: String,
    pub external_prefix: String,
    pub conference_pattern: String,
    pub voicemail_ext: String,
    pub ivr_ext: String,
    pub moh_ext: String,
    pub max_forwards_default: u32,
    pub max_message_bytes: usize,
    pub b2bua_addr: Option<SocketAddr>,
    pub media_addr: Option<SocketAddr>,
    pub no_answer_ms: u64,
    pub no_answer_overrides: HashMap<String, u64>,
    pub users_path: Option<PathBuf>,
    pub journal_path: Option<PathBuf>,
    pub cdr_path: Option<PathBuf>,
    pub timers: TimerConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            name: "proxy".into(),
            bind: SocketAddr::from(([0, 0, 0, 0], 5060)),
            tcp: true,
            realm: "ipts".into(),
            domain: "pbx".into(),
            external_prefix: "9".into(),
            conference_pattern: "30XX".into(),
            voicemail_ext: "4000".into(),
            ivr_ext: "4100".into(),
            moh_ext: "4200".into(),
            max_forwards_default: 70,
            max_message_bytes: MAX_MESSAGE_BYTES,
            b2bua_addr: None,
            media_addr: None,
            no_answer_ms: 20_000,
            no_answer_overrides: HashMap::new(),
            users_path: None,
            journal_path: None,
            cdr_path: None,
            timers: TimerConfig::default(),
        }
    }
}

impl ProxyConfig {
    /// Reads `[server]`, `[dialplan]` and `[trunk]`. Relative paths are
    /// taken from the directory of `origin` when given.
    pub fn from_ini(text: &str, origin: Option<&Path>) -> Result<Self, ConfigError> {
        let doc = IniDoc::parse(text)?;
        let d = Self::default();
        let path = |key: &str| {
            doc.raw("server", key)
                .filter(|v| !v.is_empty())
                .map(|v| relative_to(origin, v))
        };
        let mut overrides = HashMap::new();
        for (ext, secs) in doc.with_prefix("dialplan", "no_answer_timeout.") {
            let s: f64 = secs.parse().map_err(|_| ConfigError::Invalid {
                section: "dialplan".into(),
                key: format!("no_answer_timeout.{ext}"),
                value: secs.clone(),
            })?;
            overrides.insert(ext, (s * 1000.0) as u64);
        }
        let no_answer_s: f64 = doc.get_or("dialplan", "no_answer_timeout", d.no_answer_ms as f64 / 1000.0)?;
        let t1: u64 = doc.get_or("server", "t1_ms", d.timers.t1.as_millis() as u64)?;
        let cfg = Self {
            name: doc.get_or("server", "name", d.name)?,
            bind: doc.get_or("server", "bind", d.bind)?,
            tcp: doc.get_or("server", "tcp", d.tcp)?,
            realm: doc.get_or("server", "realm", d.realm)?,
            domain: doc.get_or("server", "domain", d.domain)?,
            external_prefix: doc.get_or("dialplan", "external_prefix", d.external_prefix)?,
            conference_pattern: doc.get_or("dialplan", "conference_pattern", d.conference_pattern)?,
            voicemail_ext: doc.get_or("dialplan", "voicemail_ext", d.voicemail_ext)?,
            ivr_ext: doc.get_or("dialplan", "ivr_ext", d.ivr_ext)?,
            moh_ext: doc.get_or("dialplan", "moh_ext", d.moh_ext)?,
            max_forwards_default: doc.get_or("server", "max_forwards", d.max_forwards_default)?,
            max_message_bytes: doc.get_or("server", "max_message_bytes", d.max_message_bytes)?,
            b2bua_addr: doc.get("trunk", "b2bua_addr")?,
            media_addr: doc.get("trunk", "media_addr")?,
            no_answer_ms: (no_answer_s * 1000.0) as u64,
            no_answer_overrides: overrides,
            users_path: path("users"),
            journal_path: path("journal"),
            cdr_path: path("cdr"),
            timers: TimerConfig::from_t1(Duration::from_millis(t1.max(1))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let feats = [&self.voicemail_ext, &self.ivr_ext, &self.moh_ext];
        for (i, a) in feats.iter().enumerate() {
            if a.is_empty() || !a.bytes().all(|b| b.is_ascii_digit()) {
                return Err(ConfigError::Conflict(format!("feature extension {a:?} is not numeric")));
            }
            if feats[i + 1..].contains(a) {
                return Err(ConfigError::Conflict(format!("feature extension {a} used twice")));
            }
            if pattern_matches(&self.conference_pattern, a) || a.starts_with(self.external_prefix.as_str()) {
                return Err(ConfigError::Conflict(format!(
                    "feature extension {a} overlaps another route"
                )));
            }
        }
        Ok(())
    }

    pub fn no_answer_for(&self, ext: &str) -> u64 {
        self.no_answer_overrides.get(ext).copied().unwrap_or(self.no_answer_ms)
    }

    /// Whether `ext` is reserved for a feature and so cannot be a subscriber.
    pub fn is_feature_ext(&self, ext: &str) -> bool {
        [&self.voicemail_ext, &self.ivr_ext, &self.moh_ext]
            .iter()
            .any(|f| f.as_str() == ext)
    }
}

/// Digit pattern match: `X` is any single digit, a trailing `.` is one or
/// more further digits, anything else must match literally.
pub fn pattern_matches(pattern: &str, digits: &str) -> bool {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let (fixed, open) = match pattern.strip_suffix('.') {
        Some(p) => (p, true),
        None => (pattern, false),
    };
    let (p, d) = (fixed.as_bytes(), digits.as_bytes());
    if open {
        if d.len() <= p.len() {
            return false;
        }
    } else if d.len() != p.len() {
        return false;
    }
    p.iter().zip(d).all(|(pc, dc)| match pc {
        b'X' | b'x' => true,
        c => c == dc,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Feature {
    Moh,
    Voicemail,
    Conference(String),
    Ivr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingDecision {
    Internal(Vec<Binding>),
    /// Dialed digits with the external prefix removed.
    External(String),
    Feature(Feature),
    Reject(u16),
}

/// Cheap checks made before any routing work.
pub fn sanity_check(req: &Request, wire_len: usize, cfg: &ProxyConfig) -> Result<(), u16> {
    if wire_len > cfg.max_message_bytes {
        return Err(413);
    }
    if req.check_mandatory().is_err() {
        return Err(400);
    }
    match req.max_forwards() {
        Some(0) => Err(483),
        Some(_) => Ok(()),
        None => Err(400),
    }
}

/// Classifies a dial string. `caller` is the authenticated subscriber, if
/// any; unknown callers get internal privileges.
pub fn route(
    digits: &str,
    caller: Option<&Subscriber>,
    store: &LocationStore,
    cfg: &ProxyConfig,
    now: UnixMs,
) -> RoutingDecision {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return RoutingDecision::Reject(404);
    }
    if !cfg.external_prefix.is_empty() {
        if let Some(rest) = digits.strip_prefix(cfg.external_prefix.as_str()) {
            let privilege = caller.map_or(Privilege::Internal, |c| c.privilege);
            if !privilege.may_call_external() {
                return RoutingDecision::Reject(403);
            }
            if rest.is_empty() {
                return RoutingDecision::Reject(484);
            }
            return RoutingDecision::External(rest.to_string());
        }
    }
    if pattern_matches(&cfg.conference_pattern, digits) {
        return RoutingDecision::Feature(Feature::Conference(digits.to_string()));
    }
    if digits == cfg.voicemail_ext {
        return RoutingDecision::Feature(Feature::Voicemail);
    }
    if digits == cfg.ivr_ext {
        return RoutingDecision::Feature(Feature::Ivr);
    }
    if digits == cfg.moh_ext {
        return RoutingDecision::Feature(Feature::Moh);
    }
    if store.subscriber(digits).is_some() {
        let bindings = store.lookup_ext(digits, now);
        return if bindings.is_empty() {
            RoutingDecision::Feature(Feature::Voicemail)
        } else {
            RoutingDecision::Internal(bindings)
        };
    }
    RoutingDecision::Reject(404)
}

/// Final response forwarded when every fork branch failed: any 6xx wins,
/// otherwise the numerically lowest code.
pub fn best_response(codes: &[u16]) -> Option<u16> {
    codes
        .iter()
        .copied()
        .filter(|c| (600..700).contains(c))
        .min()
        .or_else(|| codes.iter().copied().filter(|c| *c >= 300).min())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> LocationStore {
        let mut s = LocationStore::new(vec![
            Subscriber::new("2001", "Alice", "ipts", "a", Privilege::External),
            Subscriber::new("2002", "Bob", "ipts", "b", Privilege::Internal),
            Subscriber::new("2003", "Carol", "ipts", "c", Privilege::Internal),
        ]);
        s.add_binding(Binding {
            aor: crate::sip::parse_uri("sip:2002@pbx").unwrap(),
            contact: crate::sip::parse_uri("sip:2002@127.0.1.2:5060").unwrap(),
            expires_at: 10_000_000,
            registered_at: 0,
        })
        .unwrap();
        s
    }

    #[test]
    fn routes_each_kind() {
        let s = store();
        let cfg = ProxyConfig::default();
        let alice = s.subscriber("2001").cloned();
        let bob = s.subscriber("2002").cloned();
        assert!(matches!(route("2002", alice.as_ref(), &s, &cfg, 0), RoutingDecision::Internal(b) if b.len() == 1));
        assert_eq!(
            route("913525550123", alice.as_ref(), &s, &cfg, 0),
            RoutingDecision::External("13525550123".into())
        );
        assert_eq!(
            route("913525550123", bob.as_ref(), &s, &cfg, 0),
            RoutingDecision::Reject(403)
        );
        assert_eq!(
            route("3042", bob.as_ref(), &s, &cfg, 0),
            RoutingDecision::Feature(Feature::Conference("3042".into()))
        );
        assert_eq!(
            route("2003", bob.as_ref(), &s, &cfg, 0),
            RoutingDecision::Feature(Feature::Voicemail)
        );
        assert_eq!(
            route("4100", bob.as_ref(), &s, &cfg, 0),
            RoutingDecision::Feature(Feature::Ivr)
        );
        assert_eq!(
            route("4200", bob.as_ref(), &s, &cfg, 0),
            RoutingDecision::Feature(Feature::Moh)
        );
        assert_eq!(route("2999", bob.as_ref(), &s, &cfg, 0), RoutingDecision::Reject(404));
        assert_eq!(route("", bob.as_ref(), &s, &cfg, 0), RoutingDecision::Reject(404));
    }

    #[test]
    fn patterns() {
        assert!(pattern_matches("30XX", "3000"));
        assert!(!pattern_matches("30XX", "300"));
        assert!(!pattern_matches("30XX", "30000"));
        assert!(pattern_matches("9X.", "93525550123"));
        assert!(!pattern_matches("9X.", "93"));
        assert!(!pattern_matches("9X.", "9"));
        assert!(!pattern_matches("9X.", ""));
        assert!(pattern_matches("4000", "4000"));
    }

    #[test]
    fn best_response_table() {
        // Every pairing of the three codes named for fork failures.
        let table: [(&[u16], u16); 9] = [
            (&[486, 486], 486),
            (&[480, 480], 480),
            (&[603, 603], 603),
            (&[486, 480], 480),
            (&[480, 486], 480),
            (&[486, 603], 603),
            (&[603, 486], 603),
            (&[480, 603], 603),
            (&[603, 480], 603),
        ];
        for (codes, want) in table {
            assert_eq!(best_response(codes), Some(want), "{codes:?}");
        }
        assert_eq!(best_response(&[404, 408, 500]), Some(404));
        assert_eq!(best_response(&[]), None);
    }

    #[test]
    fn sanity_codes() {
        let cfg = ProxyConfig::default();
        let raw = b"INVITE sip:2002@pbx SIP/2.0\r\nVia: SIP/2.0/UDP 127.0.0.1:5060;branch=z9hG4bK1\r\nMax-Forwards: 0\r\nFrom: <sip:2001@pbx>;tag=a\r\nTo: <sip:2002@pbx>\r\nCall-ID: c\r\nCSeq: 1 INVITE\r\nContent-Length: 0\r\n\r\n";
        let crate::sip::Message::Request(mut req) = crate::sip::parse_message(raw).unwrap() else {
            panic!()
        };
        assert_eq!(sanity_check(&req, raw.len(), &cfg), Err(483));
        req.headers.set("Max-Forwards", "70");
        assert_eq!(sanity_check(&req, raw.len(), &cfg), Ok(()));
        assert_eq!(sanity_check(&req, 20 * 1024, &cfg), Err(413));
        req.headers.remove("Call-ID");
        assert_eq!(sanity_check(&req, raw.len(), &cfg), Err(400));
    }

    #[test]
    fn config_from_ini() {
        let text = "[server]\nname = proxyA\nbind = 127.0.2.1:5060\nusers = users.csv\nt1_ms = 100\n\
                    [dialplan]\nno_answer_timeout = 5\nno_answer_timeout.2002 = 2.5\n[trunk]\nb2bua_addr = 127.0.3.1:5070\n";
        let cfg = ProxyConfig::from_ini(text, Some(Path::new("/etc/ipts/proxy.ini"))).unwrap();
        assert_eq!(cfg.name, "proxyA");
        assert_eq!(cfg.users_path.as_deref(), Some(Path::new("/etc/ipts/users.csv")));
        assert_eq!(cfg.no_answer_for("2002"), 2500);
        assert_eq!(cfg.no_answer_for("2001"), 5000);
        assert_eq!(cfg.timers.t1, Duration::from_millis(100));
        assert!(ProxyConfig::from_ini("[dialplan]\nvoicemail_ext = 4100\n", None).is_err());
    }

    proptest! {
        #[test]
        fn routing_is_total(digits in "[0-9]{0,14}") {
            let s = store();
            let cfg = ProxyConfig::default();
            // A decision always comes back and never panics.
            let d = route(&digits, s.subscriber("2001"), &s, &cfg, 0);
            if let RoutingDecision::External(rest) = &d {
                prop_assert_eq!(format!("9{rest}"), digits.clone());
            }
            if let RoutingDecision::Feature(Feature::Conference(room)) = &d {
                prop_assert!(pattern_matches(&cfg.conference_pattern, room));
            }
        }

        #[test]
        fn internal_callers_never_go_external(rest in "[0-9]{0,14}") {
            let s = store();
            let cfg = ProxyConfig::default();
            let d = route(&format!("9{rest}"), s.subscriber("2002"), &s, &cfg, 0);
            prop_assert_eq!(d, RoutingDecision::Reject(403));
        }
    }
}
