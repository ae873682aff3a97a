//! HTTP-digest style authentication (MD5, no qop).
//!
//! The stored credential is `MD5(username:realm:password)`; a client proves
//! knowledge of it with `MD5(credential:nonce:MD5(method:uri))`.

use std::collections::HashMap;
use std::fmt;

use md5::{Digest, Md5};

pub fn md5_hex(data: &str) -> String {
    hex::encode(Md5::digest(data.as_bytes()))
}

pub fn credential(username: &str, realm: &str, password: &str) -> String {
    md5_hex(&format!("{username}:{realm}:{password}"))
}

pub fn response(credential: &str, nonce: &str, method: &str, uri: &str) -> String {
    let ha2 = md5_hex(&format!("{method}:{uri}"));
    md5_hex(&format!("{credential}:{nonce}:{ha2}"))
}

/// Value of a WWW-Authenticate / Proxy-Authenticate header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub realm: String,
    pub nonce: String,
    pub stale: bool,
}

impl fmt::Display for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Digest realm=\"{}\", nonce=\"{}\", algorithm=MD5",
            self.realm, self.nonce
        )?;
        if self.stale {
            f.write_str(", stale=true")?;
        }
        Ok(())
    }
}

impl Challenge {
    pub fn parse(value: &str) -> Option<Self> {
        let fields = parse_fields(value)?;
        Some(Self {
            realm: fields.get("realm")?.clone(),
            nonce: fields.get("nonce")?.clone(),
            stale: fields.get("stale").is_some_and(|s| s.eq_ignore_ascii_case("true")),
        })
    }
}

/// Value of an Authorization / Proxy-Authorization header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub username: String,
    pub realm: String,
    pub nonce: String,
    pub uri: String,
    pub response: String,
}

impl Credentials {
    /// Answers `challenge` for a request `method uri`.
    pub fn answer(challenge: &Challenge, username: &str, password: &str, method: &str, uri: &str) -> Self {
        let ha1 = credential(username, &challenge.realm, password);
        Self {
            username: username.to_string(),
            realm: challenge.realm.clone(),
            nonce: challenge.nonce.clone(),
            uri: uri.to_string(),
            response: response(&ha1, &challenge.nonce, method, uri),
        }
    }

    pub fn parse(value: &str) -> Option<Self> {
        let f = parse_fields(value)?;
        Some(Self {
            username: f.get("username")?.clone(),
            realm: f.get("realm")?.clone(),
            nonce: f.get("nonce")?.clone(),
            uri: f.get("uri")?.clone(),
            response: f.get("response")?.clone(),
        })
    }

    pub fn verify(&self, credential: &str, method: &str) -> bool {
        response(credential, &self.nonce, method, &self.uri) == self.response
    }
}

impl fmt::Display for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Digest username=\"{}\", realm=\"{}\", nonce=\"{}\", uri=\"{}\", response=\"{}\", algorithm=MD5",
            self.username, self.realm, self.nonce, self.uri, self.response
        )
    }
}

fn parse_fields(value: &str) -> Option<HashMap<String, String>> {
    let rest = value.trim().strip_prefix("Digest")?;
    let mut out = HashMap::new();
    for part in rest.split(',') {
        let (k, v) = part.trim().split_once('=')?;
        out.insert(k.trim().to_ascii_lowercase(), v.trim().trim_matches('"').to_string());
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Values computed independently with Python's hashlib:
    //   ha1 = md5(b"2001:ipts:secret").hexdigest()
    //   ha2 = md5(b"REGISTER:sip:pbx").hexdigest()
    //   md5(f"{ha1}:abc123:{ha2}".encode()).hexdigest()
    const HA1: &str = "c48f7194b6adf02b3f56f488109268b3";
    const RESPONSE: &str = "d67766e9b7ae445411217028974d2f79";

    #[test]
    fn fixed_user_and_nonce() {
        assert_eq!(credential("2001", "ipts", "secret"), HA1);
        assert_eq!(response(HA1, "abc123", "REGISTER", "sip:pbx"), RESPONSE);
    }

    #[test]
    fn header_round_trip() {
        let ch = Challenge {
            realm: "ipts".into(),
            nonce: "n1".into(),
            stale: true,
        };
        assert_eq!(Challenge::parse(&ch.to_string()), Some(ch.clone()));
        let cr = Credentials::answer(&ch, "2001", "secret", "INVITE", "sip:2002@pbx");
        let parsed = Credentials::parse(&cr.to_string()).unwrap();
        assert!(parsed.verify(&credential("2001", "ipts", "secret"), "INVITE"));
        assert!(!parsed.verify(&credential("2001", "ipts", "wrong"), "INVITE"));
    }
}
