//! Scenario files.
//!
//! Declarations name the actors and the network; steps drive them:
//!
//! ```text
//! scenario internal-call
//! proxy proxyA
//! phone alice 2001 tone=440
//! phone bob 2002
//! net loss 0
//!
//! alice register proxyA
//! alice expect registered
//! alice call 2002 timeout=3000
//! ```
//!
//! A step is `actor verb args... [timeout=ms]`. The pseudo-actor `all`
//! stands for every phone and trunk, in declaration order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::HarnessError;

pub const DEFAULT_TIMEOUT_MS: u64 = 2000;
pub const ALL: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActorKind {
    Proxy,
    B2bua,
    Trunk,
    Phone,
}

impl ActorKind {
    fn keyword(s: &str) -> Option<Self> {
        Some(match s {
            "proxy" => Self::Proxy,
            "b2bua" => Self::B2bua,
            "trunk" => Self::Trunk,
            "phone" => Self::Phone,
            _ => return None,
        })
    }
}

/// One declared process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActorDecl {
    pub name: String,
    pub kind: ActorKind,
    /// Extension, for phones.
    pub ext: Option<String>,
    pub options: BTreeMap<String, String>,
}

impl ActorDecl {
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError> {
        match self.options.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| HarnessError::Setup(format!("{}: bad {key}={v}", self.name))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Register,
    Call,
    Answer,
    Hold,
    Unhold,
    Dtmf,
    Hangup,
    Wait,
    Kill,
    Start,
    Expect,
    Assert,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Register => "register",
            Verb::Call => "call",
            Verb::Answer => "answer",
            Verb::Hold => "hold",
            Verb::Unhold => "unhold",
            Verb::Dtmf => "dtmf",
            Verb::Hangup => "hangup",
            Verb::Wait => "wait",
            Verb::Kill => "kill",
            Verb::Start => "start",
            Verb::Expect => "expect",
            Verb::Assert => "assert",
        }
    }

    /// Whether the step judges rather than stimulates.
    pub fn is_check(self) -> bool {
        matches!(self, Verb::Expect | Verb::Assert)
    }
}

impl FromStr for Verb {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "register" => Verb::Register,
            "call" => Verb::Call,
            "answer" => Verb::Answer,
            "hold" => Verb::Hold,
            "unhold" => Verb::Unhold,
            "dtmf" => Verb::Dtmf,
            "hangup" => Verb::Hangup,
            "wait" => Verb::Wait,
            "kill" => Verb::Kill,
            "start" => Verb::Start,
            "expect" => Verb::Expect,
            "assert" => Verb::Assert,
            other => return Err(format!("unknown verb {other}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioStep {
    /// 1-based position among the steps.
    pub number: usize,
    /// Line in the source file.
    pub line: usize,
    pub actor: String,
    pub verb: Verb,
    pub args: Vec<String>,
    pub timeout_ms: u64,
}

impl fmt::Display for ScenarioStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.actor, self.verb.as_str())?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

/// Network conditions requested by the file; run options may override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetDecl {
    pub loss_pct: f64,
    pub delay_ms: u64,
    pub partitions: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub actors: Vec<ActorDecl>,
    pub net: NetDecl,
    pub steps: Vec<ScenarioStep>,
    /// Directory golden files are resolved against.
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn actor(&self, name: &str) -> Option<&ActorDecl> {
        self.actors.iter().find(|a| a.name == name)
    }

    pub fn of_kind(&self, kind: ActorKind) -> impl Iterator<Item = &ActorDecl> {
        self.actors.iter().filter(move |a| a.kind == kind)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::parse(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        if s.name.is_empty() {
            s.name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut s = Scenario {
            name: String::new(),
            actors: Vec::new(),
            net: NetDecl::default(),
            steps: Vec::new(),
            base_dir: None,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or_default();
            let words: Vec<&str> = content.split_whitespace().collect();
            let Some(&first) = words.first() else { continue };
            let bad = |reason: String| HarnessError::Parse { line, reason };
            if first == "scenario" {
                s.name = words[1..].join(" ");
            } else if first == "net" {
                parse_net(&mut s.net, &words[1..]).map_err(bad)?;
            } else if let Some(kind) = ActorKind::keyword(first) {
                let decl = parse_decl(kind, &words[1..]).map_err(bad)?;
                if decl.name == ALL || s.actor(&decl.name).is_some() {
                    return Err(bad(format!("actor {} declared twice or reserved", decl.name)));
                }
                s.actors.push(decl);
            } else {
                let step = parse_step(&words, line, s.steps.len() + 1).map_err(bad)?;
                s.steps.push(step);
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Steps and partitions may only name declared actors.
    fn validate(&self) -> Result<(), HarnessError> {
        for step in &self.steps {
            if step.actor != ALL && self.actor(&step.actor).is_none() {
                return Err(HarnessError::UnknownActor {
                    line: step.line,
                    actor: step.actor.clone(),
                });
            }
            if step.verb == Verb::Register {
                let target = step.args.first().map(String::as_str).unwrap_or_default();
                if !self.actor(target).is_some_and(|a| a.kind == ActorKind::Proxy) {
                    return Err(HarnessError::UnknownActor {
                        line: step.line,
                        actor: target.to_string(),
                    });
                }
            }
        }
        for (a, b) in &self.net.partitions {
            for n in [a, b] {
                if self.actor(n).is_none() {
                    return Err(HarnessError::UnknownActor {
                        line: 0,
                        actor: n.clone(),
                    });
                }
            }
        }
        for kind in [ActorKind::B2bua, ActorKind::Trunk] {
            if self.of_kind(kind).count() > 1 {
                return Err(HarnessError::Setup(format!("at most one {kind:?} per scenario")));
            }
        }
        Ok(())
    }
}

fn parse_net(net: &mut NetDecl, words: &[&str]) -> Result<(), String> {
    match words {
        ["loss", p] => {
            let v: f64 = p.parse().map_err(|_| format!("bad loss {p}"))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(format!("loss {v} outside 0-100"));
            }
            net.loss_pct = v;
        }
        ["delay", d] => net.delay_ms = d.parse().map_err(|_| format!("bad delay {d}"))?,
        ["partition", a, b] => net.partitions.push((a.to_string(), b.to_string())),
        _ => return Err("expected: net loss <pct> | net delay <ms> | net partition <a> <b>".into()),
    }
    Ok(())
}

fn split_options<'a>(words: &[&'a str]) -> Result<(Vec<&'a str>, BTreeMap<String, String>), String> {
    let mut plain = Vec::new();
    let mut opts = BTreeMap::new();
    for w in words {
        match w.split_once('=') {
            Some((k, v)) if !k.is_empty() => {
                opts.insert(k.to_string(), v.to_string());
            }
            Some(_) => return Err(format!("bad option {w}")),
            None => plain.push(*w),
        }
    }
    Ok((plain, opts))
}

fn parse_decl(kind: ActorKind, words: &[&str]) -> Result<ActorDecl, String> {
    let (plain, options) = split_options(words)?;
    let (name, ext) = match (kind, plain.as_slice()) {
        (ActorKind::Phone, [name, ext]) if ext.bytes().all(|b| b.is_ascii_digit()) => (name, Some(ext.to_string())),
        (ActorKind::Phone, _) => return Err("expected: phone <name> <ext> [key=value...]".into()),
        (_, [name]) => (name, None),
        _ => return Err(format!("expected: {kind:?} <name> [key=value...]").to_lowercase()),
    };
    Ok(ActorDecl {
        name: name.to_string(),
        kind,
        ext,
        options,
    })
}

fn parse_step(words: &[&str], line: usize, number: usize) -> Result<ScenarioStep, String> {
    let [actor, verb, rest @ ..] = words else {
        return Err("expected: <actor> <verb> [args...]".into());
    };
    let verb: Verb = verb.parse()?;
    let mut timeout_ms = DEFAULT_TIMEOUT_MS;
    let mut args = Vec::new();
    for w in rest {
        match w.strip_prefix("timeout=") {
            Some(t) => timeout_ms = t.parse().map_err(|_| format!("bad timeout {t}"))?,
            None => args.push(w.to_string()),
        }
    }
    let arity_ok = match verb {
        Verb::Register | Verb::Call | Verb::Dtmf | Verb::Wait => args.len() == 1,
        Verb::Answer | Verb::Hold | Verb::Unhold | Verb::Hangup | Verb::Kill | Verb::Start => args.is_empty(),
        Verb::Expect | Verb::Assert => !args.is_empty(),
    };
    if !arity_ok {
        return Err(format!("wrong number of arguments for {}", verb.as_str()));
    }
    if verb == Verb::Wait && args[0].parse::<u64>().is_err() {
        return Err(format!("wait needs milliseconds, got {}", args[0]));
    }
    Ok(ScenarioStep {
        number,
        line,
        actor: actor.to_string(),
        verb,
        args,
        timeout_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# two phones
scenario demo
proxy proxyA no_answer_ms=1500
phone alice 2001 tone=440 privilege=external
phone bob 2002
net loss 5
net partition alice bob

alice register proxyA
alice call 2002 timeout=3000   # slow
bob expect ringing
all wait 200
";

    #[test]
    fn parses_declarations_and_steps() {
        let s = Scenario::parse(SAMPLE).unwrap();
        assert_eq!(s.name, "demo");
        assert_eq!(s.actors.len(), 3);
        assert_eq!(s.actor("alice").unwrap().ext.as_deref(), Some("2001"));
        assert_eq!(s.actor("proxyA").unwrap().options["no_answer_ms"], "1500");
        assert_eq!(s.net.loss_pct, 5.0);
        assert_eq!(s.net.partitions, vec![("alice".into(), "bob".into())]);
        assert_eq!(s.steps.len(), 4);
        let call = &s.steps[1];
        assert_eq!(
            (call.number, call.line, call.verb, call.timeout_ms),
            (2, 10, Verb::Call, 3000)
        );
        assert_eq!(call.to_string(), "alice call 2002");
        assert_eq!(s.steps[2].timeout_ms, DEFAULT_TIMEOUT_MS);
    }

    #[test]
    fn rejects_undeclared_actor() {
        let err = Scenario::parse("phone a 2001\ncarol call 2001\n").unwrap_err();
        assert!(matches!(err, HarnessError::UnknownActor { line: 2, ref actor } if actor == "carol"));
        let err = Scenario::parse("phone a 2001\na register nowhere\n").unwrap_err();
        assert!(matches!(err, HarnessError::UnknownActor { .. }));
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in [
            "phone a\n",
            "phone a 2001\na fly\n",
            "phone a 2001\na wait soon\n",
            "phone a 2001\na answer now\n",
            "net loss 150\n",
            "phone a 2001\nphone a 2002\n",
        ] {
            assert!(
                matches!(Scenario::parse(bad), Err(HarnessError::Parse { .. })),
                "{bad:?}"
            );
        }
    }
}
