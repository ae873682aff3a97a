//! Back-to-back user agent: trunk bridging with topology hiding, plus the
//! media features (music on hold, voicemail, conference, IVR).
//!
//! Dialplan matching, SDP rewriting and the IVR menu logic are pure and live
//! here or in small submodules; [`server`] owns sockets and media.

mod ivr;
mod server;
mod voicemail;

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

pub use ivr::{Ivr, IvrAction, IvrMenu, Prompt};
pub use server::{load_config, B2buaCore, B2buaNode, B2buaStats, Side, MOH_TONE_HZ, PROMPT_TONE_HZ};
pub use voicemail::{append_index, list_mailbox, list_mailboxes, VmEntry};

use crate::config::{relative_to, ConfigError, IniDoc};
use crate::proxy::pattern_matches;
use crate::sip::SdpBody;
use crate::transaction::TimerConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Out through the trunk, named by the rule argument.
    Bridge(String),
    Moh,
    Voicemail,
    Conference,
    Ivr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialplanRule {
    pub priority: u32,
    pub pattern: String,
    pub action: Action,
}

impl DialplanRule {
    fn is_literal(&self) -> bool {
        self.pattern.bytes().all(|b| b.is_ascii_digit())
    }

    /// Digits before the first wildcard; a bridge strips them.
    pub fn literal_prefix(&self) -> &str {
        let end = self
            .pattern
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(self.pattern.len());
        &self.pattern[..end]
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DialplanError {
    #[error("dialplan line {line}: {reason}")]
    BadLine { line: usize, reason: String },
}

/// Parses `priority,pattern,action[,arg]` lines. Blank lines and `#`
/// comments are skipped.
pub fn parse_dialplan(text: &str) -> Result<Vec<DialplanRule>, DialplanError> {
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| DialplanError::BadLine {
            line: i + 1,
            reason: reason.into(),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&f.len()) {
            return Err(bad("expected priority,pattern,action[,arg]"));
        }
        let priority = f[0].parse().map_err(|_| bad("priority is not a number"))?;
        let pattern = f[1];
        let body = pattern.strip_suffix('.').unwrap_or(pattern);
        if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit() || b == b'X' || b == b'x') {
            return Err(bad("pattern may hold digits, X and a trailing '.'"));
        }
        let arg = f.get(3).map(|s| s.to_string());
        let action = match f[2] {
            "bridge" => Action::Bridge(arg.unwrap_or_else(|| "trunk0".into())),
            "moh" => Action::Moh,
            "voicemail" => Action::Voicemail,
            "conference" => Action::Conference,
            "ivr" => Action::Ivr,
            other => return Err(bad(&format!("unknown action {other}"))),
        };
        rules.push(DialplanRule {
            priority,
            pattern: pattern.to_string(),
            action,
        });
    }
    Ok(rules)
}

/// Built-in plan matching the proxy's default feature extensions.
pub fn default_dialplan() -> Vec<DialplanRule> {
    parse_dialplan("10,9X.,bridge,trunk0\n20,30XX,conference\n30,4000,voicemail\n30,4100,ivr\n30,4200,moh\n")
        .expect("built-in dialplan parses")
}

/// First matching rule by ascending priority; a literal pattern wins over a
/// wildcard one at equal priority, otherwise file order decides.
pub fn match_dialplan<'a>(digits: &str, rules: &'a [DialplanRule]) -> Option<&'a DialplanRule> {
    let mut order: Vec<(usize, &DialplanRule)> = rules.iter().enumerate().collect();
    order.sort_by_key(|(i, r)| (r.priority, !r.is_literal(), *i));
    order
        .into_iter()
        .map(|(_, r)| r)
        .find(|r| pattern_matches(&r.pattern, digits))
}

/// Points a description at our relay address, hiding where it came from.
pub fn rewrite_topology(sdp: &SdpBody, public: SocketAddr) -> SdpBody {
    let mut out = sdp.clone();
    out.connection_address = public.ip();
    out.media_port = public.port();
    out.origin.address = public.ip();
    out
}

/// Is this re-INVITE offer a hold? Empty body, sendonly/inactive and the
/// 0.0.0.0 connection address all count.
pub fn is_hold(sdp: Option<&SdpBody>) -> bool {
    sdp.is_none_or(SdpBody::is_hold)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkProfile {
    pub provider_addr: SocketAddr,
    pub username: String,
    pub password: String,
    pub from_domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct B2buaConfig {
    pub name: String,
    pub internal_bind: SocketAddr,
    pub external_bind: SocketAddr,
    pub tcp: bool,
    /// Where re-originated internal calls (IVR transfers) are sent.
    pub proxy_addr: Option<SocketAddr>,
    pub domain: String,
    pub media_ports: (u16, u16),
    pub dialplan: Vec<DialplanRule>,
    pub trunk: Option<TrunkProfile>,
    pub vm_dir: PathBuf,
    pub vm_greeting: Option<PathBuf>,
    pub vm_max: Duration,
    pub moh_file: Option<PathBuf>,
    pub conference_max: usize,
    pub ivr: IvrMenu,
    pub timers: TimerConfig,
}

impl Default for B2buaConfig {
    fn default() -> Self {
        Self {
            name: "b2bua".into(),
            internal_bind: SocketAddr::from(([127, 0, 3, 1], 5080)),
            external_bind: SocketAddr::from(([127, 0, 4, 1], 5080)),
            tcp: false,
            proxy_addr: None,
            domain: "pbx".into(),
            media_ports: crate::media::ports::DEFAULT_RANGE,
            dialplan: default_dialplan(),
            trunk: None,
            vm_dir: PathBuf::from("voicemail"),
            vm_greeting: None,
            vm_max: Duration::from_secs(120),
            moh_file: None,
            conference_max: 8,
            ivr: IvrMenu::default(),
            timers: TimerConfig::default(),
        }
    }
}

fn parse_range(v: &str) -> Option<(u16, u16)> {
    let (a, b) = v.split_once('-')?;
    let (a, b) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
    (a < b).then_some((a, b))
}

impl B2buaConfig {
    /// Reads `[server]`, `[trunk]`, `[voicemail]`, `[moh]`, `[conference]`
    /// and `[ivr]`.
    pub fn from_ini(text: &str, origin: Option<&Path>) -> Result<Self, ConfigError> {
        let doc = IniDoc::parse(text)?;
        let d = Self::default();
        let path = |v: Option<String>| v.map(|p| relative_to(origin, &p));
        let dialplan = match doc.get::<String>("server", "dialplan")? {
            Some(p) => {
                let p = relative_to(origin, &p);
                parse_dialplan(&std::fs::read_to_string(&p)?).map_err(|e| ConfigError::Invalid {
                    section: "server".into(),
                    key: "dialplan".into(),
                    value: e.to_string(),
                })?
            }
            None => d.dialplan,
        };
        let media_ports = match doc.raw("server", "media_ports") {
            Some(v) => parse_range(v).ok_or_else(|| ConfigError::Invalid {
                section: "server".into(),
                key: "media_ports".into(),
                value: v.into(),
            })?,
            None => d.media_ports,
        };
        let trunk = match doc.get::<SocketAddr>("trunk", "addr")? {
            Some(provider_addr) => Some(TrunkProfile {
                provider_addr,
                username: doc.get_or("trunk", "username", String::new())?,
                password: doc.get_or("trunk", "password", String::new())?,
                from_domain: doc.get_or("trunk", "from_domain", provider_addr.ip().to_string())?,
            }),
            None => None,
        };
        let mut digit_map = BTreeMap::new();
        for (k, v) in doc.with_prefix("ivr", "digit.") {
            let digit = single_digit(&k).ok_or_else(|| ConfigError::Invalid {
                section: "ivr".into(),
                key: format!("digit.{k}"),
                value: v.clone(),
            })?;
            digit_map.insert(digit, v);
        }
        let t1 = doc.get::<u64>("server", "t1_ms")?;
        let cfg = Self {
            name: doc.get_or("server", "name", d.name)?,
            internal_bind: doc.get_or("server", "internal", d.internal_bind)?,
            external_bind: doc.get_or("server", "external", d.external_bind)?,
            tcp: doc.get_or("server", "tcp", d.tcp)?,
            proxy_addr: doc.get("server", "proxy")?,
            domain: doc.get_or("server", "domain", d.domain)?,
            media_ports,
            dialplan,
            trunk,
            vm_dir: relative_to(origin, &doc.get_or("voicemail", "dir", "voicemail".to_string())?),
            vm_greeting: path(doc.get("voicemail", "greeting")?),
            vm_max: Duration::from_secs(doc.get_or("voicemail", "max_seconds", 120u64)?),
            moh_file: path(doc.get("moh", "file")?),
            conference_max: doc.get_or("conference", "max_participants", d.conference_max)?,
            ivr: IvrMenu {
                greeting_file: path(doc.get("ivr", "greeting")?),
                invalid_file: path(doc.get("ivr", "invalid")?),
                timeout: Duration::from_secs(doc.get_or("ivr", "timeout_s", 5u64)?),
                max_attempts: doc.get_or("ivr", "attempts", 3u32)?,
                digit_map,
            },
            timers: t1
                .map(|ms| TimerConfig::from_t1(Duration::from_millis(ms)))
                .unwrap_or(d.timers),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.internal_bind == self.external_bind {
            return Err(ConfigError::Conflict(
                "internal and external sides must use different addresses".into(),
            ));
        }
        if self.internal_bind.ip() == self.external_bind.ip() {
            // Same IP would make every internal address visible outside.
            return Err(ConfigError::Conflict(
                "internal and external sides need distinct IPs".into(),
            ));
        }
        if self.conference_max == 0 || self.ivr.max_attempts == 0 {
            return Err(ConfigError::Conflict(
                "conference size and IVR attempts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn internal_ip(&self) -> IpAddr {
        self.internal_bind.ip()
    }

    pub fn external_ip(&self) -> IpAddr {
        self.external_bind.ip()
    }
}

fn single_digit(s: &str) -> Option<char> {
    let mut it = s.chars();
    match (it.next(), it.next()) {
        (Some(c), None) if c.is_ascii_digit() => Some(c),
        _ => None,
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moh" => Ok(Action::Moh),
            "voicemail" => Ok(Action::Voicemail),
            "conference" => Ok(Action::Conference),
            "ivr" => Ok(Action::Ivr),
            "bridge" => Ok(Action::Bridge("trunk0".into())),
            other => Err(format!("unknown action {other}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    #[test]
    fn dialplan_examples() {
        let rules = default_dialplan();
        assert_eq!(
            match_dialplan("93525550123", &rules).map(|r| &r.action),
            Some(&Action::Bridge("trunk0".into()))
        );
        assert_eq!(
            match_dialplan("3000", &rules).map(|r| &r.action),
            Some(&Action::Conference)
        );
        assert_eq!(match_dialplan("", &rules), None);
        assert_eq!(match_dialplan("9", &rules), None);
        assert_eq!(match_dialplan("4100", &rules).map(|r| &r.action), Some(&Action::Ivr));
    }

    #[test]
    fn literal_beats_wildcard_at_equal_priority() {
        let rules = parse_dialplan("10,30XX,conference\n10,3011,voicemail\n5,4XXX,ivr\n").unwrap();
        assert_eq!(match_dialplan("3011", &rules).unwrap().action, Action::Voicemail);
        assert_eq!(match_dialplan("3012", &rules).unwrap().action, Action::Conference);
        // Lower priority number still wins over a literal.
        let rules = parse_dialplan("10,4000,voicemail\n5,4XXX,ivr\n").unwrap();
        assert_eq!(match_dialplan("4000", &rules).unwrap().action, Action::Ivr);
    }

    #[test]
    fn dialplan_parse_errors() {
        assert!(parse_dialplan("x,9X.,bridge").is_err());
        assert!(parse_dialplan("10,9Y.,bridge").is_err());
        assert!(parse_dialplan("10,9X.,teleport").is_err());
        assert!(parse_dialplan("10,9X.").is_err());
        let r = parse_dialplan("# comment\n\n10, 9X. , bridge , trunk7\n").unwrap();
        assert_eq!(r[0].action, Action::Bridge("trunk7".into()));
        assert_eq!(r[0].literal_prefix(), "9");
    }

    #[test]
    fn rewrite_hides_private_address() {
        let private = SdpBody::audio(IpAddr::V4(Ipv4Addr::new(192, 168, 1, 10)), 4000, 7);
        let public: SocketAddr = "127.0.4.1:20000".parse().unwrap();
        let out = rewrite_topology(&private, public);
        let text = String::from_utf8(out.to_bytes()).unwrap();
        assert!(text.contains("c=IN IP4 127.0.4.1"));
        assert!(!text.contains("192.168."));
        assert_eq!(out.media_addr(), public);
    }

    #[test]
    fn hold_signals() {
        let mut s = SdpBody::audio(IpAddr::V4(Ipv4Addr::LOCALHOST), 4000, 1);
        assert!(is_hold(None));
        assert!(!is_hold(Some(&s)));
        s.direction = crate::sip::Direction::SendOnly;
        assert!(is_hold(Some(&s)));
        s.direction = crate::sip::Direction::SendRecv;
        s.connection_address = IpAddr::V4(Ipv4Addr::UNSPECIFIED);
        assert!(is_hold(Some(&s)));
    }

    #[test]
    fn config_from_ini() {
        let text = "[server]\ninternal = 127.0.3.1:5090\nexternal = 127.0.4.1:5090\nproxy = 127.0.2.1:5060\nmedia_ports = 30000-30100\n\
                    [trunk]\naddr = 127.0.5.1:5060\nusername = acct\npassword = s3cret\nfrom_domain = itsp.test\n\
                    [ivr]\ndigit.1 = 2001\ndigit.2 = 2002\ntimeout_s = 4\n";
        let cfg = B2buaConfig::from_ini(text, Some(Path::new("/etc/ipts/b2bua.ini"))).unwrap();
        assert_eq!(cfg.media_ports, (30000, 30100));
        assert_eq!(cfg.trunk.as_ref().unwrap().username, "acct");
        assert_eq!(cfg.ivr.digit_map.get(&'2').map(String::as_str), Some("2002"));
        assert_eq!(cfg.ivr.timeout, Duration::from_secs(4));
        assert_eq!(cfg.vm_dir, PathBuf::from("/etc/ipts/voicemail"));
        assert!(B2buaConfig::from_ini("[ivr]\ndigit.12 = 2001\n", None).is_err());
        assert!(B2buaConfig::from_ini("[server]\ninternal = 127.0.3.1:1\nexternal = 127.0.3.1:2\n", None).is_err());
    }

    fn sdp() -> impl Strategy<Value = SdpBody> {
        (any::<[u8; 4]>(), (1u16..30000).prop_map(|p| p * 2), any::<u64>())
            .prop_map(|(ip, port, sid)| SdpBody::audio(IpAddr::V4(Ipv4Addr::from(ip)), port, sid))
    }

    proptest! {
        #[test]
        fn rewrite_is_idempotent(s in sdp(), port in (1u16..30000).prop_map(|p| p * 2)) {
            let public = SocketAddr::from(([127, 0, 4, 1], port));
            let once = rewrite_topology(&s, public);
            prop_assert_eq!(rewrite_topology(&once, public), once.clone());
            let text = String::from_utf8(once.to_bytes()).unwrap();
            let private = s.connection_address.to_string();
            if private != "127.0.4.1" {
                let needle = format!(" {}\r", private);
                prop_assert!(!text.contains(&needle));
            }
        }

        #[test]
        fn first_match_has_lowest_priority(digits in "[0-9]{1,12}") {
            let rules = default_dialplan();
            if let Some(hit) = match_dialplan(&digits, &rules) {
                for r in &rules {
                    if pattern_matches(&r.pattern, &digits) {
                        prop_assert!(hit.priority <= r.priority);
                    }
                }
            } else {
                prop_assert!(rules.iter().all(|r| !pattern_matches(&r.pattern, &digits)));
            }
        }
    }
}
