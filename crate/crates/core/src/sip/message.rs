use std::fmt::Write as _;

use super::error::SipError;
use super::headers::{CSeq, Headers, NameAddr, Via};
use super::method::Method;
use super::status::StatusCode;
use super::uri::{parse_uri, SipUri};

/// Largest message the system accepts or emits.
pub const MAX_MESSAGE_BYTES: usize = 16 * 1024;

const REQUEST_MANDATORY: [&str; 6] = ["Via", "From", "To", "Call-ID", "CSeq", "Max-Forwards"];

/// Content-Length is never stored in `headers`; it is derived from `body`
/// on serialization and consumed on parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    pub uri: SipUri,
    pub headers: Headers,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: StatusCode,
    pub headers: Headers,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(Request),
    Response(Response),
}

/// Accessors shared by requests and responses.
pub trait SipHeaders {
    fn headers(&self) -> &Headers;
    fn headers_mut(&mut self) -> &mut Headers;
    fn body(&self) -> &[u8];

    fn call_id(&self) -> Option<&str> {
        self.headers().get("Call-ID")
    }

    fn cseq(&self) -> Option<CSeq> {
        self.headers().get("CSeq")?.parse().ok()
    }

    #[allow(clippy::wrong_self_convention)] // the SIP From header
    fn from_hdr(&self) -> Option<NameAddr> {
        self.headers().get("From")?.parse().ok()
    }

    fn to_hdr(&self) -> Option<NameAddr> {
        self.headers().get("To")?.parse().ok()
    }

    #[allow(clippy::wrong_self_convention)] // the SIP From header
    fn from_tag(&self) -> Option<String> {
        self.from_hdr()?.tag().map(str::to_string)
    }

    fn to_tag(&self) -> Option<String> {
        self.to_hdr()?.tag().map(str::to_string)
    }

    fn top_via(&self) -> Option<Via> {
        self.headers().top_via().ok()
    }

    fn branch(&self) -> Option<String> {
        self.top_via()?.branch().map(str::to_string)
    }

    fn contact(&self) -> Option<NameAddr> {
        self.headers().get("Contact")?.split(',').next()?.parse().ok()
    }
}

macro_rules! impl_sip_headers {
    ($t:ty) => {
        impl SipHeaders for $t {
            fn headers(&self) -> &Headers {
                &self.headers
            }
            fn headers_mut(&mut self) -> &mut Headers {
                &mut self.headers
            }
            fn body(&self) -> &[u8] {
                &self.body
            }
        }
    };
}
impl_sip_headers!(Request);
impl_sip_headers!(Response);

impl Request {
    pub fn new(method: Method, uri: SipUri) -> Self {
        Self {
            method,
            uri,
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn max_forwards(&self) -> Option<u32> {
        self.headers.get("Max-Forwards")?.trim().parse().ok()
    }

    /// Checks the headers every routable request must carry and that the
    /// CSeq method agrees with the request line.
    pub fn check_mandatory(&self) -> Result<(), SipError> {
        for name in REQUEST_MANDATORY {
            if !self.headers.contains(name) {
                return Err(SipError::MissingMandatoryHeader(name));
            }
        }
        let cseq = self.cseq().ok_or(SipError::MissingMandatoryHeader("CSeq"))?;
        if cseq.method != self.method {
            return Err(SipError::MalformedHeader(format!(
                "CSeq method {} on {}",
                cseq.method, self.method
            )));
        }
        self.headers.top_via()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{} {} SIP/2.0\r\n", self.method, self.uri);
        write_headers(&mut head, &self.headers, self.body.len());
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }
}

impl Response {
    pub fn new(status: StatusCode) -> Self {
        Self {
            status,
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn code(&self) -> u16 {
        self.status.code()
    }

    pub fn check_mandatory(&self) -> Result<(), SipError> {
        for name in &REQUEST_MANDATORY[..5] {
            if !self.headers.contains(name) {
                return Err(SipError::MissingMandatoryHeader(name));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("SIP/2.0 {} {}\r\n", self.status.code(), self.status.reason());
        write_headers(&mut head, &self.headers, self.body.len());
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }
}

fn write_headers(out: &mut String, headers: &Headers, body_len: usize) {
    for h in headers.iter() {
        let _ = write!(out, "{}: {}\r\n", h.name, h.value);
    }
    let _ = write!(out, "Content-Length: {body_len}\r\n\r\n");
}

impl Message {
    pub fn to_bytes(&self) -> Vec<u8> {
        serialize_message(self)
    }

    pub fn headers(&self) -> &Headers {
        match self {
            Message::Request(r) => &r.headers,
            Message::Response(r) => &r.headers,
        }
    }

    pub fn call_id(&self) -> Option<&str> {
        self.headers().get("Call-ID")
    }

    pub fn cseq(&self) -> Option<CSeq> {
        self.headers().get("CSeq")?.parse().ok()
    }

    pub fn branch(&self) -> Option<String> {
        self.headers().top_via().ok()?.branch().map(str::to_string)
    }

    /// Short summary: method name for requests, numeric code for responses.
    pub fn token(&self) -> String {
        match self {
            Message::Request(r) => r.method.to_string(),
            Message::Response(r) => r.code().to_string(),
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(self, Message::Request(_))
    }
}

impl From<Request> for Message {
    fn from(r: Request) -> Self {
        Message::Request(r)
    }
}

impl From<Response> for Message {
    fn from(r: Response) -> Self {
        Message::Response(r)
    }
}

pub fn serialize_message(msg: &Message) -> Vec<u8> {
    match msg {
        Message::Request(r) => r.to_bytes(),
        Message::Response(r) => r.to_bytes(),
    }
}

fn find_header_end(raw: &[u8]) -> Option<(usize, usize)> {
    if let Some(i) = raw.windows(4).position(|w| w == b"\r\n\r\n") {
        return Some((i, i + 4));
    }
    raw.windows(2).position(|w| w == b"\n\n").map(|i| (i, i + 2))
}

/// Parses one complete message. Content-Length, when present, bounds the
/// body; trailing bytes past it are dropped. Mandatory headers are not
/// checked here, see [`Request::check_mandatory`].
pub fn parse_message(raw: &[u8]) -> Result<Message, SipError> {
    let (head_end, body_start) = find_header_end(raw).ok_or(SipError::Truncated)?;
    let head = std::str::from_utf8(&raw[..head_end])
        .map_err(|_| SipError::MalformedHeader("non-UTF-8 header block".into()))?;
    let mut lines = head.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    let start = lines.next().unwrap_or_default();

    let mut headers = Headers::new();
    let mut content_length = None;
    for line in lines {
        if line.starts_with([' ', '\t']) {
            return Err(SipError::MalformedHeader(format!("folded line {line:?}")));
        }
        let (name, value) = line
            .split_once(':')
            .ok_or_else(|| SipError::MalformedHeader(line.to_string()))?;
        let name = name.trim_end();
        if !super::method::is_token(name) {
            return Err(SipError::MalformedHeader(line.to_string()));
        }
        let value = value.trim();
        if super::headers::names_match(name, "Content-Length") {
            let n = value
                .parse::<usize>()
                .map_err(|_| SipError::MalformedHeader(line.to_string()))?;
            content_length = Some(n);
        } else {
            headers.push(name, value);
        }
    }

    let available = &raw[body_start..];
    let body = match content_length {
        Some(declared) if declared > available.len() => {
            return Err(SipError::BodyLengthMismatch {
                declared,
                actual: available.len(),
            })
        }
        Some(declared) => available[..declared].to_vec(),
        None => available.to_vec(),
    };

    if let Some(rest) = start.strip_prefix("SIP/2.0 ") {
        let (code, reason) = rest.split_once(' ').unwrap_or((rest, ""));
        let bad = || SipError::MalformedStartLine(start.to_string());
        let code: u16 = code.parse().map_err(|_| bad())?;
        let status = StatusCode::try_new(code, reason.trim()).map_err(|_| bad())?;
        return Ok(Message::Response(Response { status, headers, body }));
    }

    let mut parts = start.split(' ');
    let (method, uri, version) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(m), Some(u), Some(v), None) => (m, u, v),
        _ => return Err(SipError::MalformedStartLine(start.to_string())),
    };
    if version != "SIP/2.0" {
        return Err(SipError::MalformedStartLine(start.to_string()));
    }
    Ok(Message::Request(Request {
        method: method.parse()?,
        uri: parse_uri(uri)?,
        headers,
        body,
    }))
}

/// Builds a response that echoes Via, From, To, Call-ID and CSeq. Final
/// responses get a To tag when the request had none.
pub fn build_response(req: &Request, status: StatusCode, to_tag: &str) -> Result<Response, SipError> {
    for name in ["Via", "From", "To", "Call-ID", "CSeq"] {
        if !req.headers.contains(name) {
            return Err(SipError::MissingMandatoryHeader(name));
        }
    }
    let mut headers = Headers::new();
    for h in req.headers.iter() {
        if h.is("Via") || h.is("Record-Route") {
            headers.push(h.name.clone(), h.value.clone());
        }
    }
    let from = req.headers.get("From").unwrap_or_default();
    headers.push("From", from);
    let mut to = req.headers.get("To").unwrap_or_default().to_string();
    if status.is_final() {
        let parsed: NameAddr = to.parse()?;
        if parsed.tag().is_none() {
            to = parsed.with_tag(to_tag).to_string();
        }
    }
    headers.push("To", to);
    headers.push("Call-ID", req.headers.get("Call-ID").unwrap_or_default());
    headers.push("CSeq", req.headers.get("CSeq").unwrap_or_default());
    Ok(Response {
        status,
        headers,
        body: Vec::new(),
    })
}
