use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SipError {
    #[error("malformed start line: {0}")]
    MalformedStartLine(String),
    #[error("malformed header line: {0}")]
    MalformedHeader(String),
    #[error("message has no header terminator")]
    Truncated,
    #[error("missing mandatory header {0}")]
    MissingMandatoryHeader(&'static str),
    #[error("Content-Length {declared} exceeds the {actual} body bytes present")]
    BodyLengthMismatch { declared: usize, actual: usize },
    #[error("malformed uri: {0}")]
    MalformedUri(String),
    #[error("malformed sdp: {0}")]
    MalformedSdp(String),
    #[error("status code {0} outside 100..=699")]
    OutOfRange(u16),
}
