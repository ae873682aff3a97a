use std::fmt;
use std::str::FromStr;

use super::error::SipError;
use super::params::Params;

pub const DEFAULT_SIP_PORT: u16 = 5060;

/// `sip:[user@]host[:port][;params]`. IPv6 literals and URI headers are not
/// part of the supported grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SipUri {
    pub user: Option<String>,
    pub host: String,
    pub port: Option<u16>,
    pub params: Params,
}

impl SipUri {
    pub fn new(user: Option<&str>, host: impl Into<String>, port: Option<u16>) -> Self {
        Self {
            user: user.map(str::to_string),
            host: host.into(),
            port,
            params: Params::new(),
        }
    }

    pub fn port_or_default(&self) -> u16 {
        self.port.unwrap_or(DEFAULT_SIP_PORT)
    }

    pub fn user(&self) -> Option<&str> {
        self.user.as_deref()
    }

    /// `host:port` with the default port filled in.
    pub fn host_port(&self) -> String {
        format!("{}:{}", self.host, self.port_or_default())
    }

    pub fn with_params(mut self, params: Params) -> Self {
        self.params = params;
        self
    }
}

pub fn parse_uri(text: &str) -> Result<SipUri, SipError> {
    let bad = || SipError::MalformedUri(text.to_string());
    let rest = text.trim().strip_prefix("sip:").ok_or_else(bad)?;
    if rest.contains('?') || rest.contains('[') || rest.chars().any(char::is_whitespace) {
        return Err(bad());
    }
    let (addr, params) = match rest.split_once(';') {
        Some((a, p)) => (a, Params::parse(p).ok_or_else(bad)?),
        None => (rest, Params::new()),
    };
    let (user, hostport) = match addr.rsplit_once('@') {
        Some((u, hp)) => {
            if u.is_empty() {
                return Err(bad());
            }
            (Some(u.to_string()), hp)
        }
        None => (None, addr),
    };
    let (host, port) = match hostport.split_once(':') {
        Some((h, p)) => (h, Some(p.parse::<u16>().map_err(|_| bad())?)),
        None => (hostport, None),
    };
    if host.is_empty()
        || !host
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-' || b == b'_')
    {
        return Err(bad());
    }
    Ok(SipUri {
        user,
        host: host.to_string(),
        port,
        params,
    })
}

impl FromStr for SipUri {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_uri(s)
    }
}

impl fmt::Display for SipUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sip:")?;
        if let Some(user) = &self.user {
            write!(f, "{user}@")?;
        }
        f.write_str(&self.host)?;
        if let Some(port) = self.port {
            write!(f, ":{port}")?;
        }
        write!(f, "{}", self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn user_host_port() {
        let uri = parse_uri("sip:2001@10.0.0.5:5060").unwrap();
        assert_eq!(uri.user(), Some("2001"));
        assert_eq!(uri.host, "10.0.0.5");
        assert_eq!(uri.port, Some(5060));
    }

    #[test]
    fn port_defaults_to_5060() {
        let uri = parse_uri("sip:pbx").unwrap();
        assert_eq!(uri.port, None);
        assert_eq!(uri.port_or_default(), 5060);
        assert_eq!(uri.user(), None);
    }

    #[test]
    fn params_are_kept_in_order() {
        let uri = parse_uri("sip:127.0.0.1:5070;lr;transport=udp").unwrap();
        assert!(uri.params.contains("lr"));
        assert_eq!(uri.params.value("transport"), Some("udp"));
        assert_eq!(uri.to_string(), "sip:127.0.0.1:5070;lr;transport=udp");
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "",
            "tel:+123",
            "SIP:pbx",
            "sip:",
            "sip:@pbx",
            "sip:a@",
            "sip:h:99999",
            "sip:[::1]",
            "sip:a b",
        ] {
            assert!(parse_uri(bad).is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn display_reparses(user in proptest::option::of("[0-9a-z]{1,8}"),
                            host in "[a-z][a-z0-9.-]{0,12}",
                            port in proptest::option::of(1u16..),
                            lr in any::<bool>()) {
            let mut uri = SipUri::new(user.as_deref(), host, port);
            if lr { uri.params.set("lr", None); }
            prop_assert_eq!(parse_uri(&uri.to_string()).unwrap(), uri);
        }
    }
}
