//! SIP message model: parsing, serialization, URIs, SDP and status classes.

mod error;
mod headers;
mod message;
mod method;
mod params;
mod sdp;
mod status;
mod uri;

pub use error::SipError;
pub use headers::{names_match, CSeq, Header, Headers, NameAddr, Via};
pub use message::{
    build_response, parse_message, serialize_message, Message, Request, Response, SipHeaders, MAX_MESSAGE_BYTES,
};
pub use method::Method;
pub use params::Params;
pub use sdp::{parse_sdp, serialize_sdp, Direction, Origin, SdpBody, PCMU, TELEPHONE_EVENT};
pub use status::{classify_status, default_reason, StatusClass, StatusCode};
pub use uri::{parse_uri, SipUri, DEFAULT_SIP_PORT};
