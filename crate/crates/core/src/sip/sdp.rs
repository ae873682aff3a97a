use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::str::FromStr;

use super::error::SipError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    SendRecv,
    SendOnly,
    RecvOnly,
    Inactive,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::SendRecv => "sendrecv",
            Direction::SendOnly => "sendonly",
            Direction::RecvOnly => "recvonly",
            Direction::Inactive => "inactive",
        }
    }

    fn from_attr(attr: &str) -> Option<Self> {
        Some(match attr {
            "sendrecv" => Direction::SendRecv,
            "sendonly" => Direction::SendOnly,
            "recvonly" => Direction::RecvOnly,
            "inactive" => Direction::Inactive,
            _ => return None,
        })
    }

    /// Direction to answer with when the peer offered `self`.
    pub fn answer(self) -> Self {
        match self {
            Direction::SendOnly => Direction::RecvOnly,
            Direction::RecvOnly => Direction::SendOnly,
            d => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub username: String,
    pub session_id: u64,
    pub version: u64,
    pub address: IpAddr,
}

/// One-audio-stream session description. Lines outside the modelled subset
/// are carried verbatim in `session_extra` / `media_extra`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdpBody {
    pub origin: Origin,
    pub session_name: String,
    pub connection_address: IpAddr,
    pub media_port: u16,
    pub payload_types: Vec<u8>,
    pub direction: Direction,
    pub session_extra: Vec<String>,
    pub media_extra: Vec<String>,
}

pub const PCMU: u8 = 0;
pub const TELEPHONE_EVENT: u8 = 101;

impl SdpBody {
    /// PCMU + telephone-event offer for `addr:port`.
    pub fn audio(addr: IpAddr, port: u16, session_id: u64) -> Self {
        Self {
            origin: Origin {
                username: "-".into(),
                session_id,
                version: 1,
                address: addr,
            },
            session_name: "ipts".into(),
            connection_address: addr,
            media_port: port,
            payload_types: vec![PCMU, TELEPHONE_EVENT],
            direction: Direction::SendRecv,
            session_extra: Vec::new(),
            media_extra: vec![
                "a=rtpmap:0 PCMU/8000".into(),
                "a=rtpmap:101 telephone-event/8000".into(),
                "a=fmtp:101 0-15".into(),
                "a=ptime:20".into(),
            ],
        }
    }

    pub fn media_addr(&self) -> std::net::SocketAddr {
        std::net::SocketAddr::new(self.connection_address, self.media_port)
    }

    /// True when the description asks the far end to stop sending to us.
    pub fn is_hold(&self) -> bool {
        matches!(self.direction, Direction::SendOnly | Direction::Inactive)
            || self.connection_address == IpAddr::V4(Ipv4Addr::UNSPECIFIED)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize_sdp(self)
    }

    fn validate(self) -> Result<Self, SipError> {
        if self.payload_types.is_empty() {
            return Err(SipError::MalformedSdp("no payload types".into()));
        }
        if self.direction != Direction::Inactive && (self.media_port == 0 || !self.media_port.is_multiple_of(2)) {
            return Err(SipError::MalformedSdp(format!(
                "media port {} must be even and non-zero",
                self.media_port
            )));
        }
        Ok(self)
    }
}

fn parse_ip(text: &str, raw: &str) -> Result<IpAddr, SipError> {
    let mut it = text.split_whitespace();
    match (it.next(), it.next(), it.next(), it.next()) {
        (Some("IN"), Some("IP4"), Some(addr), None) => addr
            .parse::<Ipv4Addr>()
            .map(IpAddr::V4)
            .map_err(|_| SipError::MalformedSdp(raw.to_string())),
        _ => Err(SipError::MalformedSdp(raw.to_string())),
    }
}

pub fn parse_sdp(bytes: &[u8]) -> Result<SdpBody, SipError> {
    let text = std::str::from_utf8(bytes).map_err(|_| SipError::MalformedSdp("not UTF-8".into()))?;
    let bad = |line: &str| SipError::MalformedSdp(line.to_string());

    let mut origin = None;
    let mut session_name = None;
    let mut connection = None;
    let mut media: Option<(u16, Vec<u8>)> = None;
    let mut direction = Direction::SendRecv;
    let mut session_extra = Vec::new();
    let mut media_extra = Vec::new();
    let mut saw_version = false;

    for line in text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)) {
        if line.is_empty() {
            continue;
        }
        let (kind, value) = line.split_once('=').ok_or_else(|| bad(line))?;
        let in_media = media.is_some();
        match kind {
            "v" => {
                if value != "0" {
                    return Err(bad(line));
                }
                saw_version = true;
            }
            "o" => {
                let f: Vec<&str> = value.split_whitespace().collect();
                if f.len() != 6 {
                    return Err(bad(line));
                }
                origin = Some(Origin {
                    username: f[0].to_string(),
                    session_id: f[1].parse().map_err(|_| bad(line))?,
                    version: f[2].parse().map_err(|_| bad(line))?,
                    address: parse_ip(&f[3..].join(" "), line)?,
                });
            }
            "s" => session_name = Some(value.to_string()),
            "c" => connection = Some(parse_ip(value, line)?),
            "t" if !in_media => {
                if value != "0 0" {
                    session_extra.push(line.to_string());
                }
            }
            "m" => {
                if in_media {
                    return Err(SipError::MalformedSdp("more than one m-line".into()));
                }
                let f: Vec<&str> = value.split_whitespace().collect();
                if f.len() < 4 || f[0] != "audio" || f[2] != "RTP/AVP" {
                    return Err(bad(line));
                }
                let port = f[1].parse().map_err(|_| bad(line))?;
                let pts = f[3..]
                    .iter()
                    .map(|p| p.parse::<u8>().map_err(|_| bad(line)))
                    .collect::<Result<Vec<_>, _>>()?;
                media = Some((port, pts));
            }
            "a" => match Direction::from_attr(value) {
                Some(d) => direction = d,
                None if in_media => media_extra.push(line.to_string()),
                None => session_extra.push(line.to_string()),
            },
            _ if in_media => media_extra.push(line.to_string()),
            _ => session_extra.push(line.to_string()),
        }
    }
    if !saw_version {
        return Err(SipError::MalformedSdp("missing v=".into()));
    }
    let (media_port, payload_types) = media.ok_or_else(|| SipError::MalformedSdp("missing m=audio".into()))?;
    SdpBody {
        origin: origin.ok_or_else(|| SipError::MalformedSdp("missing o=".into()))?,
        session_name: session_name.unwrap_or_else(|| "-".into()),
        connection_address: connection.ok_or_else(|| SipError::MalformedSdp("missing c=".into()))?,
        media_port,
        payload_types,
        direction,
        session_extra,
        media_extra,
    }
    .validate()
}

pub fn serialize_sdp(sdp: &SdpBody) -> Vec<u8> {
    sdp.to_string().into_bytes()
}

impl fmt::Display for SdpBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.origin;
        write!(
            f,
            "v=0\r\no={} {} {} IN IP4 {}\r\n",
            o.username, o.session_id, o.version, o.address
        )?;
        write!(
            f,
            "s={}\r\nc=IN IP4 {}\r\nt=0 0\r\n",
            self.session_name, self.connection_address
        )?;
        for line in &self.session_extra {
            write!(f, "{line}\r\n")?;
        }
        write!(f, "m=audio {} RTP/AVP", self.media_port)?;
        for pt in &self.payload_types {
            write!(f, " {pt}")?;
        }
        f.write_str("\r\n")?;
        for line in &self.media_extra {
            write!(f, "{line}\r\n")?;
        }
        write!(f, "a={}\r\n", self.direction.as_str())
    }
}

impl FromStr for SdpBody {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_sdp(s.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const OFFER: &str = "v=0\r\no=- 42 1 IN IP4 192.168.1.10\r\ns=call\r\nc=IN IP4 192.168.1.10\r\nt=0 0\r\n\
        m=audio 40000 RTP/AVP 0 101\r\na=rtpmap:101 telephone-event/8000\r\na=x-custom:keep me\r\na=sendonly\r\n";

    #[test]
    fn sendonly_direction() {
        let sdp = parse_sdp(OFFER.as_bytes()).unwrap();
        assert_eq!(sdp.direction, Direction::SendOnly);
        assert_eq!(sdp.media_port, 40000);
        assert_eq!(sdp.payload_types, [0, 101]);
        assert_eq!(sdp.connection_address.to_string(), "192.168.1.10");
        assert!(sdp.is_hold());
    }

    #[test]
    fn unknown_attributes_pass_through_verbatim() {
        let sdp = parse_sdp(OFFER.as_bytes()).unwrap();
        let out = String::from_utf8(serialize_sdp(&sdp)).unwrap();
        assert!(out.contains("\r\na=x-custom:keep me\r\n"));
        assert!(out.contains("\r\na=rtpmap:101 telephone-event/8000\r\n"));
        assert_eq!(out, OFFER);
    }

    #[test]
    fn invariants_enforced() {
        let odd = OFFER.replace("40000", "40001");
        assert!(parse_sdp(odd.as_bytes()).is_err());
        let inactive = odd.replace("a=sendonly", "a=inactive");
        assert!(parse_sdp(inactive.as_bytes()).is_ok());
        let two_m = format!("{OFFER}m=audio 5000 RTP/AVP 0\r\n");
        assert!(parse_sdp(two_m.as_bytes()).is_err());
        assert!(parse_sdp(b"v=0\r\n").is_err());
    }

    #[test]
    fn zero_address_is_hold() {
        let mut sdp = SdpBody::audio("0.0.0.0".parse().unwrap(), 4000, 1);
        assert!(sdp.is_hold());
        sdp.connection_address = "10.0.0.1".parse().unwrap();
        assert!(!sdp.is_hold());
    }

    proptest! {
        #[test]
        fn structured_round_trip(a in any::<[u8; 4]>(), half in 1u16..32768, sid in any::<u64>(),
                                 dir in 0usize..4, extra in proptest::collection::vec("a=x-[a-z]{1,6}:[a-z0-9 ]{0,8}", 0..3)) {
            let addr = IpAddr::V4(Ipv4Addr::from(a));
            let mut sdp = SdpBody::audio(addr, half * 2, sid);
            sdp.direction = [Direction::SendRecv, Direction::SendOnly, Direction::RecvOnly, Direction::Inactive][dir];
            sdp.media_extra.extend(extra);
            prop_assert_eq!(parse_sdp(&serialize_sdp(&sdp)).unwrap(), sdp);
        }
    }
}
