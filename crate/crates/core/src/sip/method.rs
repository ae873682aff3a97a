use std::fmt;
use std::str::FromStr;

use super::error::SipError;

/// Request method. The six core methods plus an escape hatch for any other
/// well-formed token. Tokens are case-sensitive: `invite` is an extension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Method {
    Invite,
    Ack,
    Options,
    Bye,
    Cancel,
    Register,
    Extension(String),
}

impl Method {
    pub fn as_str(&self) -> &str {
        match self {
            Method::Invite => "INVITE",
            Method::Ack => "ACK",
            Method::Options => "OPTIONS",
            Method::Bye => "BYE",
            Method::Cancel => "CANCEL",
            Method::Register => "REGISTER",
            Method::Extension(name) => name,
        }
    }
}

pub(crate) fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"-.!%*_+`'~".contains(&b))
}

impl FromStr for Method {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "INVITE" => Method::Invite,
            "ACK" => Method::Ack,
            "OPTIONS" => Method::Options,
            "BYE" => Method::Bye,
            "CANCEL" => Method::Cancel,
            "REGISTER" => Method::Register,
            other if is_token(other) => Method::Extension(other.to_string()),
            other => return Err(SipError::MalformedStartLine(format!("bad method {other:?}"))),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_methods_round_trip() {
        for name in ["INVITE", "ACK", "OPTIONS", "BYE", "CANCEL", "REGISTER"] {
            let m: Method = name.parse().unwrap();
            assert!(!matches!(m, Method::Extension(_)));
            assert_eq!(m.to_string(), name);
        }
    }

    #[test]
    fn lowercase_is_an_extension() {
        assert_eq!("invite".parse::<Method>().unwrap(), Method::Extension("invite".into()));
        assert!("IN VITE".parse::<Method>().is_err());
    }
}
