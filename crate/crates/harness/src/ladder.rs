//! Message ladders: rendering, normalization and sequence matching.
//!
//! Tags, branches and Call-IDs become placeholders (`T1`, `B1`, `C1`, ...)
//! numbered by first appearance, and known addresses become actor names, so
//! a ladder depends on what happened rather than on the run's randomness or
//! the loopback octets it used.

use std::collections::HashMap;
use std::net::IpAddr;

use ipts_core::sip::{Message, SipHeaders};
use ipts_core::ua::LadderEntry;

/// Direction-tagged token: `>INVITE` for sent, `<180` for received.
pub fn tokens(entries: &[LadderEntry]) -> Vec<String> {
    entries
        .iter()
        .map(|e| format!("{}{}", if e.outgoing { '>' } else { '<' }, e.msg.token()))
        .collect()
}

fn token_matches(pat: &str, tok: &str) -> bool {
    let (pat, tok) = match pat.chars().next() {
        Some(d @ ('>' | '<')) => {
            if !tok.starts_with(d) {
                return false;
            }
            (&pat[1..], &tok[1..])
        }
        _ => (pat, tok.trim_start_matches(['>', '<'])),
    };
    if pat == "?" {
        return true;
    }
    if pat.len() != tok.len() {
        return false;
    }
    pat.chars()
        .zip(tok.chars())
        .all(|(p, t)| p == t || (p.eq_ignore_ascii_case(&'x') && t.is_ascii_digit()))
}

/// Whole-sequence match. `*` spans any run of tokens (possibly none), `?`
/// exactly one, `x` inside a code any digit (`18x`, `2xx`). A leading `>`
/// or `<` pins the direction; without it either direction matches.
pub fn sequence_matches(pattern: &[&str], tokens: &[String]) -> bool {
    // reach[j]: the pattern prefix seen so far can consume tokens[..j].
    let mut reach = vec![false; tokens.len() + 1];
    reach[0] = true;
    for p in pattern {
        let mut next = vec![false; tokens.len() + 1];
        if *p == "*" {
            let mut any = false;
            for j in 0..=tokens.len() {
                any |= reach[j];
                next[j] = any;
            }
        } else {
            for j in 0..tokens.len() {
                if reach[j] && token_matches(p, &tokens[j]) {
                    next[j + 1] = true;
                }
            }
        }
        reach = next;
    }
    reach[tokens.len()]
}

#[derive(Default)]
struct Placeholders {
    prefix: &'static str,
    seen: HashMap<String, String>,
}

impl Placeholders {
    fn new(prefix: &'static str) -> Self {
        Self {
            prefix,
            seen: HashMap::new(),
        }
    }

    fn get(&mut self, raw: Option<&str>) -> String {
        let Some(raw) = raw.filter(|r| !r.is_empty()) else {
            return "-".into();
        };
        let n = self.seen.len() + 1;
        self.seen
            .entry(raw.to_string())
            .or_insert_with(|| format!("{}{n}", self.prefix))
            .clone()
    }
}

/// Renders ladders in a run-independent form.
pub struct Normalizer {
    tags: Placeholders,
    branches: Placeholders,
    calls: Placeholders,
    names: Vec<(String, String)>,
}

impl Normalizer {
    /// `names` maps addresses to the actor names that replace them.
    pub fn new(names: impl IntoIterator<Item = (IpAddr, String)>) -> Self {
        let mut names: Vec<(String, String)> = names.into_iter().map(|(ip, n)| (ip.to_string(), n)).collect();
        // Longest first so 127.0.1.12 is not read as 127.0.1.1 plus a digit.
        names.sort_by_key(|n| std::cmp::Reverse(n.0.len()));
        Self {
            tags: Placeholders::new("T"),
            branches: Placeholders::new("B"),
            calls: Placeholders::new("C"),
            names,
        }
    }

    /// Replaces known `ip[:port]` occurrences with `{name}`.
    pub fn addresses(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        'scan: while !rest.is_empty() {
            for (ip, name) in &self.names {
                if let Some(after) = rest.strip_prefix(ip.as_str()) {
                    if after.starts_with(|c: char| c.is_ascii_digit()) {
                        continue;
                    }
                    let after = match after.strip_prefix(':') {
                        Some(p) if p.starts_with(|c: char| c.is_ascii_digit()) => {
                            p.trim_start_matches(|c: char| c.is_ascii_digit())
                        }
                        _ => after,
                    };
                    out.push('{');
                    out.push_str(name);
                    out.push('}');
                    rest = after;
                    continue 'scan;
                }
            }
            let c = rest.chars().next().expect("non-empty");
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
        out
    }

    pub fn line(&mut self, e: &LadderEntry) -> String {
        let dir = if e.outgoing { '>' } else { '<' };
        let (first, h): (String, &dyn SipHeaders) = match &e.msg {
            Message::Request(r) => (format!("{} {}", r.method, self.addresses(&r.uri.to_string())), r),
            Message::Response(r) => (r.status.to_string(), r),
        };
        let cseq = h
            .cseq()
            .map(|c| format!("{} {}", c.seq, c.method))
            .unwrap_or_else(|| "-".into());
        let from = self.tags.get(h.from_tag().as_deref());
        let to = self.tags.get(h.to_tag().as_deref());
        let via = self.branches.get(h.branch().as_deref());
        let call = self.calls.get(h.call_id());
        format!("{dir} {first} | cseq {cseq} | from {from} | to {to} | via {via} | call {call}")
    }

    /// Ladders of several actors as one document, one section each.
    pub fn render(&mut self, sections: &[(String, Vec<LadderEntry>)]) -> String {
        let mut out = String::new();
        for (name, entries) in sections {
            out.push_str(&format!("[{name}]\n"));
            for e in entries {
                out.push_str(&self.line(e));
                out.push('\n');
            }
        }
        out
    }
}

/// First differing line of two renderings, for failure messages.
pub fn first_difference(expected: &str, actual: &str) -> Option<String> {
    let (e, a): (Vec<&str>, Vec<&str>) = (expected.lines().collect(), actual.lines().collect());
    for i in 0..e.len().max(a.len()) {
        let (x, y) = (e.get(i).copied(), a.get(i).copied());
        if x != y {
            return Some(format!(
                "line {}: expected {:?}, got {:?}",
                i + 1,
                x.unwrap_or("<end>"),
                y.unwrap_or("<end>")
            ));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use ipts_core::sip::parse_message;
    use proptest::prelude::*;
    use std::time::Instant;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn pat(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn wildcards() {
        let t = toks(">INVITE <180 <200 >ACK >BYE <200");
        assert!(sequence_matches(&pat("INVITE 180 200 ACK BYE 200"), &t));
        assert!(sequence_matches(&pat(">INVITE <18x <2xx * <200"), &t));
        assert!(sequence_matches(&pat("* BYE ?"), &t));
        assert!(sequence_matches(&pat("*"), &t));
        assert!(!sequence_matches(&pat("<INVITE *"), &t));
        assert!(!sequence_matches(&pat("INVITE 180 200 ACK BYE"), &t));
        assert!(!sequence_matches(&pat("INVITE 4xx *"), &t));
        assert!(sequence_matches(&pat("*"), &[]));
        assert!(!sequence_matches(&pat("?"), &[]));
    }

    fn entry(outgoing: bool, raw: &str) -> LadderEntry {
        LadderEntry {
            outgoing,
            msg: parse_message(raw.replace('\n', "\r\n").as_bytes()).unwrap(),
            at: Instant::now(),
        }
    }

    #[test]
    fn normalizes_ids_and_addresses() {
        let inv = "INVITE sip:2002@127.0.1.12:5060 SIP/2.0\nVia: SIP/2.0/UDP 127.0.2.1:5060;branch=z9hG4bKaaa\nFrom: <sip:2001@pbx>;tag=f1\nTo: <sip:2002@pbx>\nCall-ID: xyz\nCSeq: 1 INVITE\nContent-Length: 0\n\n";
        let ok = "SIP/2.0 200 OK\nVia: SIP/2.0/UDP 127.0.2.1:5060;branch=z9hG4bKaaa\nFrom: <sip:2001@pbx>;tag=f1\nTo: <sip:2002@pbx>;tag=t9\nCall-ID: xyz\nCSeq: 1 INVITE\nContent-Length: 0\n\n";
        let ip = |s: &str| s.parse::<IpAddr>().unwrap();
        let mut n = Normalizer::new([(ip("127.0.1.1"), "alice".into()), (ip("127.0.1.12"), "bob".into())]);
        let text = n.render(&[("bob".into(), vec![entry(false, inv), entry(true, ok)])]);
        assert_eq!(
            text,
            "[bob]\n\
             < INVITE sip:2002@{bob} | cseq 1 INVITE | from T1 | to - | via B1 | call C1\n\
             > 200 OK | cseq 1 INVITE | from T1 | to T2 | via B1 | call C1\n"
        );
        assert_eq!(n.addresses("a 127.0.1.1:5060; 127.0.1.15"), "a {alice}; 127.0.1.15");
    }

    #[test]
    fn reports_first_difference() {
        assert_eq!(first_difference("a\nb\n", "a\nb\n"), None);
        assert_eq!(
            first_difference("a\nb\n", "a\n").unwrap(),
            "line 2: expected \"b\", got \"<end>\""
        );
    }

    fn arb_tokens() -> impl Strategy<Value = Vec<String>> {
        let tok = prop::sample::select(vec![
            ">INVITE", "<INVITE", "<100", "<180", ">200", "<200", ">ACK", "<BYE", ">487",
        ]);
        prop::collection::vec(tok.prop_map(String::from), 0..12)
    }

    proptest! {
        #[test]
        fn a_sequence_matches_itself(t in arb_tokens()) {
            let p: Vec<&str> = t.iter().map(String::as_str).collect();
            prop_assert!(sequence_matches(&p, &t));
        }

        #[test]
        fn stars_absorb_any_prefix_and_suffix(t in arb_tokens(), cut in 0usize..12) {
            let cut = cut.min(t.len());
            let mut p = vec!["*"];
            p.extend(t[cut..].iter().map(String::as_str));
            prop_assert!(sequence_matches(&p, &t));
            let mut q: Vec<&str> = t[..cut].iter().map(String::as_str).collect();
            q.push("*");
            prop_assert!(sequence_matches(&q, &t));
        }

        #[test]
        fn question_marks_count_exactly(t in arb_tokens()) {
            let p = vec!["?"; t.len()];
            prop_assert!(sequence_matches(&p, &t));
            let longer = vec!["?"; t.len() + 1];
            prop_assert!(!sequence_matches(&longer, &t));
        }
    }
}
