use std::fmt;

use super::error::SipError;

/// Response class, taken from the hundreds digit of the code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatusClass {
    /// 1xx: request received, processing.
    Provisional,
    /// 2xx: action successful.
    Success,
    /// 3xx: further action required.
    Redirection,
    /// 4xx: current server cannot process.
    ClientError,
    /// 5xx: server failed to process request.
    ServerError,
    /// 6xx: no server can process request.
    GlobalFailure,
}

pub fn classify_status(code: u16) -> Result<StatusClass, SipError> {
    Ok(match code {
        100..=199 => StatusClass::Provisional,
        200..=299 => StatusClass::Success,
        300..=399 => StatusClass::Redirection,
        400..=499 => StatusClass::ClientError,
        500..=599 => StatusClass::ServerError,
        600..=699 => StatusClass::GlobalFailure,
        _ => return Err(SipError::OutOfRange(code)),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusCode {
    code: u16,
    reason: String,
}

impl StatusCode {
    /// Builds a status with the conventional reason phrase.
    ///
    /// Panics if `code` is outside 100..=699; use [`StatusCode::try_new`] for
    /// untrusted input.
    pub fn new(code: u16) -> Self {
        Self::try_new(code, default_reason(code)).expect("status code out of range")
    }

    pub fn try_new(code: u16, reason: impl Into<String>) -> Result<Self, SipError> {
        classify_status(code)?;
        Ok(Self {
            code,
            reason: reason.into(),
        })
    }

    pub fn code(&self) -> u16 {
        self.code
    }

    pub fn reason(&self) -> &str {
        &self.reason
    }

    pub fn class(&self) -> StatusClass {
        classify_status(self.code).expect("validated at construction")
    }

    pub fn is_provisional(&self) -> bool {
        self.code < 200
    }

    pub fn is_final(&self) -> bool {
        self.code >= 200
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.code)
    }
}

// Reason phrases carry no semantics; equality of two statuses is on code only.
impl PartialEq<u16> for StatusCode {
    fn eq(&self, other: &u16) -> bool {
        self.code == *other
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.code, self.reason)
    }
}

pub fn default_reason(code: u16) -> &'static str {
    match code {
        100 => "Trying",
        180 => "Ringing",
        181 => "Call Is Being Forwarded",
        182 => "Queued",
        183 => "Session Progress",
        200 => "OK",
        202 => "Accepted",
        301 => "Moved Permanently",
        302 => "Moved Temporarily",
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        407 => "Proxy Authentication Required",
        408 => "Request Timeout",
        413 => "Request Entity Too Large",
        415 => "Unsupported Media Type",
        423 => "Interval Too Brief",
        480 => "Temporarily Unavailable",
        481 => "Call/Transaction Does Not Exist",
        482 => "Loop Detected",
        483 => "Too Many Hops",
        486 => "Busy Here",
        487 => "Request Terminated",
        488 => "Not Acceptable Here",
        491 => "Request Pending",
        500 => "Server Internal Error",
        501 => "Not Implemented",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        504 => "Server Time-out",
        600 => "Busy Everywhere",
        603 => "Decline",
        604 => "Does Not Exist Anywhere",
        606 => "Not Acceptable",
        _ => match code / 100 {
            1 => "Provisional",
            2 => "Success",
            3 => "Redirection",
            4 => "Client Error",
            5 => "Server Error",
            _ => "Global Failure",
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(classify_status(180), Ok(StatusClass::Provisional));
        assert_eq!(classify_status(200), Ok(StatusClass::Success));
        assert_eq!(classify_status(603), Ok(StatusClass::GlobalFailure));
        assert_eq!(classify_status(99), Err(SipError::OutOfRange(99)));
        assert_eq!(classify_status(700), Err(SipError::OutOfRange(700)));
    }

    #[test]
    fn reason_phrase_is_not_semantic() {
        let a = StatusCode::try_new(486, "Busy Here").unwrap();
        let b = StatusCode::try_new(486, "Line engaged").unwrap();
        assert_eq!(a.class(), b.class());
        assert!(a == 486 && b == 486);
    }
}
