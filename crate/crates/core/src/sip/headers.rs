use std::fmt;
use std::str::FromStr;

use super::error::SipError;
use super::method::Method;
use super::params::Params;
use super::uri::{parse_uri, SipUri};

/// One header line. Name comparison ignores case (and compact forms); the
/// original spelling is kept for serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub name: String,
    pub value: String,
}

impl Header {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
        }
    }

    pub fn is(&self, name: &str) -> bool {
        names_match(&self.name, name)
    }
}

fn compact_form(name: &str) -> Option<&'static str> {
    Some(match name.to_ascii_lowercase().as_str() {
        "i" | "call-id" => "call-id",
        "m" | "contact" => "contact",
        "l" | "content-length" => "content-length",
        "c" | "content-type" => "content-type",
        "f" | "from" => "from",
        "t" | "to" => "to",
        "v" | "via" => "via",
        "s" | "subject" => "subject",
        "k" | "supported" => "supported",
        "e" | "content-encoding" => "content-encoding",
        _ => return None,
    })
}

pub fn names_match(a: &str, b: &str) -> bool {
    if a.eq_ignore_ascii_case(b) {
        return true;
    }
    matches!((compact_form(a), compact_form(b)), (Some(x), Some(y)) if x == y)
}

/// Ordered header list; duplicates keep their wire order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(Vec<Header>);

impl Headers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.iter().find(|h| h.is(name)).map(|h| h.value.as_str())
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0.iter().filter(move |h| h.is(name)).map(|h| h.value.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|h| h.is(name))
    }

    pub fn push(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.push(Header::new(name, value));
    }

    /// Replaces the first header of that name, or appends.
    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        let value = value.into();
        match self.0.iter_mut().find(|h| h.is(name)) {
            Some(h) => h.value = value,
            None => self.push(name, value),
        }
    }

    /// Inserts above every existing header of the same name (Via, Record-Route).
    pub fn prepend(&mut self, name: &str, value: impl Into<String>) {
        let at = self.0.iter().position(|h| h.is(name)).unwrap_or(0);
        self.0.insert(at, Header::new(name, value));
    }

    pub fn remove(&mut self, name: &str) {
        self.0.retain(|h| !h.is(name));
    }

    /// Removes the first header of that name and returns its value.
    pub fn remove_first(&mut self, name: &str) -> Option<String> {
        let at = self.0.iter().position(|h| h.is(name))?;
        Some(self.0.remove(at).value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Header> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every Via entry, top first. Via is the one header whose values may be
    /// comma-combined on a single line.
    pub fn vias(&self) -> Result<Vec<Via>, SipError> {
        self.get_all("Via").flat_map(|v| v.split(',')).map(str::parse).collect()
    }

    pub fn top_via(&self) -> Result<Via, SipError> {
        let value = self.get("Via").ok_or(SipError::MissingMandatoryHeader("Via"))?;
        value.split(',').next().unwrap_or_default().parse()
    }

    /// Removes the topmost Via entry, splitting a comma-combined line if needed.
    pub fn pop_via(&mut self) -> Option<Via> {
        let at = self.0.iter().position(|h| h.is("Via"))?;
        let value = self.0[at].value.clone();
        match value.split_once(',') {
            Some((first, rest)) => {
                self.0[at].value = rest.trim().to_string();
                first.parse().ok()
            }
            None => {
                self.0.remove(at);
                value.parse().ok()
            }
        }
    }

    /// Every name-addr entry of a header such as Route or Record-Route, in
    /// wire order. Values separated by commas on one line are split.
    pub fn name_addrs(&self, name: &str) -> Result<Vec<NameAddr>, SipError> {
        let mut out = Vec::new();
        for value in self.get_all(name) {
            for part in split_top_level_commas(value) {
                out.push(part.parse()?);
            }
        }
        Ok(out)
    }
}

fn split_top_level_commas(value: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth, mut quoted, mut start) = (0i32, false, 0);
    for (i, c) in value.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '<' if !quoted => depth += 1,
            '>' if !quoted => depth -= 1,
            ',' if !quoted && depth == 0 => {
                parts.push(value[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(value[start..].trim());
    parts.retain(|p| !p.is_empty());
    parts
}

/// `SIP/2.0/UDP host[:port];params`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Via {
    pub transport: String,
    pub host: String,
    pub port: Option<u16>,
    pub params: Params,
}

impl Via {
    pub fn new(transport: &str, host: impl Into<String>, port: u16, branch: &str) -> Self {
        let mut params = Params::new();
        params.set("branch", Some(branch));
        Self {
            transport: transport.to_string(),
            host: host.into(),
            port: Some(port),
            params,
        }
    }

    pub fn branch(&self) -> Option<&str> {
        self.params.value("branch")
    }

    /// Where responses for this hop go: `received`/`rport` override sent-by.
    pub fn response_addr(&self) -> String {
        let host = self.params.value("received").unwrap_or(&self.host);
        let port = self
            .params
            .value("rport")
            .and_then(|p| p.parse::<u16>().ok())
            .or(self.port)
            .unwrap_or(super::uri::DEFAULT_SIP_PORT);
        format!("{host}:{port}")
    }
}

impl FromStr for Via {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SipError::MalformedHeader(format!("Via: {s}"));
        let s = s.trim();
        let (proto, rest) = s.split_once(char::is_whitespace).ok_or_else(bad)?;
        let transport = proto
            .strip_prefix("SIP/2.0/")
            .filter(|t| !t.is_empty())
            .ok_or_else(bad)?;
        let rest = rest.trim();
        let (sent_by, params) = match rest.split_once(';') {
            Some((a, p)) => (a.trim(), Params::parse(p).ok_or_else(bad)?),
            None => (rest, Params::new()),
        };
        let (host, port) = match sent_by.split_once(':') {
            Some((h, p)) => (h, Some(p.parse().map_err(|_| bad())?)),
            None => (sent_by, None),
        };
        if host.is_empty() {
            return Err(bad());
        }
        Ok(Via {
            transport: transport.to_string(),
            host: host.to_string(),
            port,
            params,
        })
    }
}

impl fmt::Display for Via {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SIP/2.0/{} {}", self.transport, self.host)?;
        if let Some(port) = self.port {
            write!(f, ":{port}")?;
        }
        write!(f, "{}", self.params)
    }
}

/// `["Display"] <uri>;params` as used by From, To, Contact and Route.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameAddr {
    pub display: Option<String>,
    pub uri: SipUri,
    pub params: Params,
}

impl NameAddr {
    pub fn new(uri: SipUri) -> Self {
        Self {
            display: None,
            uri,
            params: Params::new(),
        }
    }

    pub fn tag(&self) -> Option<&str> {
        self.params.value("tag")
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.params.set("tag", Some(tag));
        self
    }
}

impl FromStr for NameAddr {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SipError::MalformedHeader(s.to_string());
        let s = s.trim();
        if let Some(open) = s.find('<') {
            let close = s[open..].find('>').ok_or_else(bad)? + open;
            let display = s[..open].trim().trim_matches('"').trim();
            let uri = parse_uri(&s[open + 1..close])?;
            let tail = s[close + 1..].trim();
            let params = match tail.strip_prefix(';') {
                Some(p) => Params::parse(p).ok_or_else(bad)?,
                None if tail.is_empty() => Params::new(),
                None => return Err(bad()),
            };
            Ok(NameAddr {
                display: (!display.is_empty()).then(|| display.to_string()),
                uri,
                params,
            })
        } else {
            // Bare form: parameters belong to the header, not the URI.
            let (uri, params) = match s.split_once(';') {
                Some((u, p)) => (u, Params::parse(p).ok_or_else(bad)?),
                None => (s, Params::new()),
            };
            Ok(NameAddr {
                display: None,
                uri: parse_uri(uri)?,
                params,
            })
        }
    }
}

impl fmt::Display for NameAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(d) = &self.display {
            write!(f, "\"{d}\" ")?;
        }
        write!(f, "<{}>{}", self.uri, self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CSeq {
    pub seq: u32,
    pub method: Method,
}

impl FromStr for CSeq {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SipError::MalformedHeader(format!("CSeq: {s}"));
        let mut parts = s.split_whitespace();
        let seq = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let method = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(CSeq { seq, method })
    }
}

impl fmt::Display for CSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.seq, self.method)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_insensitive_and_compact_lookup() {
        let mut h = Headers::new();
        h.push("call-id", "abc");
        h.push("v", "SIP/2.0/UDP a:1;branch=z9hG4bK1");
        assert_eq!(h.get("Call-ID"), Some("abc"));
        assert_eq!(h.get("VIA").map(|v| v.contains("branch")), Some(true));
    }

    #[test]
    fn duplicates_keep_wire_order() {
        let mut h = Headers::new();
        h.push("Via", "SIP/2.0/UDP a:1;branch=z9hG4bK-a");
        h.push("To", "<sip:x@y>");
        h.push("Via", "SIP/2.0/UDP b:2;branch=z9hG4bK-b");
        h.prepend("Via", "SIP/2.0/UDP c:3;branch=z9hG4bK-c");
        let branches: Vec<_> = h
            .vias()
            .unwrap()
            .iter()
            .map(|v| v.branch().unwrap().to_string())
            .collect();
        assert_eq!(branches, ["z9hG4bK-c", "z9hG4bK-a", "z9hG4bK-b"]);
        assert_eq!(h.pop_via().unwrap().branch(), Some("z9hG4bK-c"));
        assert_eq!(h.top_via().unwrap().branch(), Some("z9hG4bK-a"));
    }

    #[test]
    fn comma_combined_via() {
        let mut h = Headers::new();
        h.push(
            "Via",
            "SIP/2.0/UDP a:1;branch=z9hG4bK-a, SIP/2.0/UDP b:2;branch=z9hG4bK-b",
        );
        assert_eq!(h.vias().unwrap().len(), 2);
        assert_eq!(h.pop_via().unwrap().host, "a");
        assert_eq!(h.get("Via"), Some("SIP/2.0/UDP b:2;branch=z9hG4bK-b"));
    }

    #[test]
    fn via_response_addr_prefers_received_and_rport() {
        let via: Via = "SIP/2.0/UDP 10.0.0.1:5062;branch=z9hG4bKx;received=192.0.2.4;rport=6000"
            .parse()
            .unwrap();
        assert_eq!(via.response_addr(), "192.0.2.4:6000");
        let via: Via = "SIP/2.0/TCP host;branch=z9hG4bKx".parse().unwrap();
        assert_eq!(via.response_addr(), "host:5060");
        assert_eq!(via.transport, "TCP");
    }

    #[test]
    fn name_addr_forms() {
        let a: NameAddr = "\"Alice\" <sip:2001@pbx>;tag=1928".parse().unwrap();
        assert_eq!(a.display.as_deref(), Some("Alice"));
        assert_eq!(a.tag(), Some("1928"));
        let b: NameAddr = "sip:2002@pbx;tag=77".parse().unwrap();
        assert_eq!(b.tag(), Some("77"));
        assert!(b.uri.params.is_empty());
        let c: NameAddr = "<sip:127.0.0.1:5060;lr>".parse().unwrap();
        assert!(c.uri.params.contains("lr"));
        assert_eq!(a.to_string().parse::<NameAddr>().unwrap(), a);
    }

    #[test]
    fn route_list_split() {
        let mut h = Headers::new();
        h.push("Record-Route", "<sip:a;lr>, <sip:b;lr>");
        h.push("Record-Route", "<sip:c;lr>");
        let hosts: Vec<_> = h
            .name_addrs("Record-Route")
            .unwrap()
            .into_iter()
            .map(|n| n.uri.host)
            .collect();
        assert_eq!(hosts, ["a", "b", "c"]);
    }

    #[test]
    fn cseq_parse() {
        let c: CSeq = "314 INVITE".parse().unwrap();
        assert_eq!((c.seq, c.method), (314, Method::Invite));
        assert!("x INVITE".parse::<CSeq>().is_err());
    }
}
