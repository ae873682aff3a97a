//! Wire-format conformance over a fixed corpus plus generated messages.

use std::fs;
use std::path::{Path, PathBuf};

use ipts_core::sip::{classify_status, parse_message, Message, StatusClass};
use proptest::prelude::*;

fn corpus(kind: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus").join(kind);
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

fn to_bytes(m: &Message) -> Vec<u8> {
    match m {
        Message::Request(r) => r.to_bytes(),
        Message::Response(r) => r.to_bytes(),
    }
}

/// Parses, serializes and parses again; both parses must agree and the
/// second serialization must be byte-identical to the first.
fn round_trip(raw: &[u8]) -> Result<Message, String> {
    let first = parse_message(raw).map_err(|e| format!("parse: {e}"))?;
    let wire = to_bytes(&first);
    let second = parse_message(&wire).map_err(|e| format!("reparse: {e}"))?;
    if first != second {
        return Err(format!("structure changed:\n{first:?}\n{second:?}"));
    }
    if to_bytes(&second) != wire {
        return Err("serialization not stable".into());
    }
    Ok(first)
}

#[test]
fn corpus_is_large_enough() {
    assert!(corpus("valid").len() >= 50);
}

#[test]
fn every_valid_message_round_trips() {
    for f in corpus("valid") {
        let raw = fs::read(&f).unwrap();
        if let Err(e) = round_trip(&raw) {
            panic!("{}: {e}", f.display());
        }
    }
}

#[test]
fn every_invalid_message_is_rejected() {
    for f in corpus("invalid") {
        let raw = fs::read(&f).unwrap();
        assert!(parse_message(&raw).is_err(), "{} parsed", f.display());
    }
}

#[test]
fn compact_and_long_forms_mean_the_same() {
    let raw = fs::read(
        corpus("valid")
            .into_iter()
            .find(|p| p.to_string_lossy().contains("compact"))
            .unwrap(),
    )
    .unwrap();
    let Message::Request(r) = parse_message(&raw).unwrap() else {
        panic!("request expected")
    };
    assert_eq!(r.headers.get("Call-ID"), Some("compact@10.0.0.5"));
    assert_eq!(r.headers.get("Via").map(|v| v.contains("z9hG4bKcompact")), Some(true));
    assert!(!r.body.is_empty());
}

#[test]
fn body_stops_at_content_length() {
    let raw = fs::read(
        corpus("valid")
            .into_iter()
            .find(|p| p.to_string_lossy().contains("trailing"))
            .unwrap(),
    )
    .unwrap();
    let Message::Request(r) = parse_message(&raw).unwrap() else {
        panic!("request expected")
    };
    assert!(r.body.is_empty());
}

/// Response classes as tabulated: the hundreds digit picks the row.
const CLASS_TABLE: [(u16, StatusClass); 6] = [
    (1, StatusClass::Provisional),
    (2, StatusClass::Success),
    (3, StatusClass::Redirection),
    (4, StatusClass::ClientError),
    (5, StatusClass::ServerError),
    (6, StatusClass::GlobalFailure),
];

#[test]
fn all_six_hundred_codes_classify_per_table() {
    let mut checked = 0;
    for code in 100u16..=699 {
        let expected = CLASS_TABLE
            .iter()
            .find(|(d, _)| *d == code / 100)
            .map(|(_, c)| *c)
            .unwrap();
        assert_eq!(classify_status(code).unwrap(), expected, "{code}");
        checked += 1;
    }
    assert_eq!(checked, 600);
    for code in (0u16..100).chain(700..1000) {
        assert!(classify_status(code).is_err(), "{code}");
    }
}

fn header_name() -> impl Strategy<Value = String> {
    "X-[A-Za-z][A-Za-z0-9-]{0,10}"
}

fn header_value() -> impl Strategy<Value = String> {
    "[!-~]([ -~]{0,30}[!-~])?"
}

fn method() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("INVITE".to_string()),
        Just("ACK".to_string()),
        Just("OPTIONS".to_string()),
        Just("BYE".to_string()),
        Just("CANCEL".to_string()),
        Just("REGISTER".to_string()),
        "[A-Z]{3,9}",
    ]
}

#[allow(clippy::too_many_arguments)]
fn generated(
    is_request: bool,
    method: String,
    code: u16,
    user: String,
    host: String,
    port: u16,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
) -> Vec<u8> {
    let mut out = if is_request {
        format!("{method} sip:{user}@{host}:{port} SIP/2.0\r\n")
    } else {
        format!("SIP/2.0 {code} Reason {code}\r\n")
    };
    out.push_str(&format!("Via: SIP/2.0/UDP {host}:{port};branch=z9hG4bK{user}\r\n"));
    out.push_str(&format!("CSeq: 1 {method}\r\n"));
    for (n, v) in headers {
        out.push_str(&format!("{n}: {v}\r\n"));
    }
    out.push_str(&format!("Content-Length: {}\r\n\r\n", body.len()));
    let mut bytes = out.into_bytes();
    bytes.extend(body);
    bytes
}

proptest! {
    #[test]
    fn generated_messages_round_trip(
        is_request in any::<bool>(),
        method in method(),
        code in 100u16..700,
        user in "[0-9]{1,6}",
        host in "[a-z][a-z0-9]{0,8}(\\.[a-z]{2,4})?",
        port in 1u16..,
        headers in proptest::collection::vec((header_name(), header_value()), 0..8),
        body in proptest::collection::vec(any::<u8>(), 0..200),
    ) {
        let raw = generated(is_request, method, code, user, host, port, headers.clone(), body.clone());
        let m = round_trip(&raw).map_err(TestCaseError::fail)?;
        let (hs, b) = match &m {
            Message::Request(r) => (&r.headers, &r.body),
            Message::Response(r) => (&r.headers, &r.body),
        };
        prop_assert_eq!(b, &body);
        for (n, v) in &headers {
            prop_assert!(hs.get_all(n).any(|x| x == v));
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(raw in proptest::collection::vec(any::<u8>(), 0..400)) {
        let _ = parse_message(&raw);
    }
}
