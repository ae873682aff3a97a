//! Softphone command grammar and the state it is checked against.

use crate::clock::UnixMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registration {
    Unregistered,
    Registering,
    Registered { expires_at: UnixMs },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallStatus {
    Idle,
    RingingIn,
    RingingOut,
    Active,
    Held,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SoftphoneCommand {
    Register {
        ext: String,
        password: String,
        proxy: String,
    },
    Call(String),
    Answer,
    Hold,
    Unhold,
    Dtmf(char),
    Transfer(String),
    Forward(Option<String>),
    Hangup,
    Quit,
}

fn digits(s: &str) -> Result<String, String> {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
        Ok(s.to_string())
    } else {
        Err(format!("not a number: {s}"))
    }
}

impl SoftphoneCommand {
    pub fn parse(line: &str) -> Result<Self, String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let usage = |u: &str| Err(format!("usage: {u}"));
        match words.as_slice() {
            ["register", ext, pw, proxy] => Ok(Self::Register {
                ext: digits(ext)?,
                password: pw.to_string(),
                proxy: proxy.to_string(),
            }),
            ["register", ..] => usage("register <ext> <pass> <proxy>"),
            ["call", d] => Ok(Self::Call(digits(d)?)),
            ["call", ..] => usage("call <digits>"),
            ["answer"] => Ok(Self::Answer),
            ["hold"] => Ok(Self::Hold),
            ["unhold"] => Ok(Self::Unhold),
            ["dtmf", d] if d.len() == 1 && crate::media::dtmf::event_code(d.chars().next().unwrap()).is_some() => {
                Ok(Self::Dtmf(d.chars().next().unwrap()))
            }
            ["dtmf", ..] => usage("dtmf <0-9|*|#>"),
            ["transfer", e] => Ok(Self::Transfer(digits(e)?)),
            ["transfer", ..] => usage("transfer <ext>"),
            ["forward", "off"] => Ok(Self::Forward(None)),
            ["forward", e] => Ok(Self::Forward(Some(digits(e)?))),
            ["forward", ..] => usage("forward <ext>|off"),
            ["hangup"] => Ok(Self::Hangup),
            ["quit"] | ["exit"] => Ok(Self::Quit),
            [] => Err("empty command".into()),
            [other, ..] => Err(format!("unknown command: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftphoneState {
    pub registration: Registration,
    pub call: CallStatus,
    /// Unanswered incoming calls are refused after this many seconds; 0 disables.
    pub ring_timeout_s: u32,
    pub forward_target: Option<String>,
}

impl Default for SoftphoneState {
    fn default() -> Self {
        Self {
            registration: Registration::Unregistered,
            call: CallStatus::Idle,
            ring_timeout_s: 0,
            forward_target: None,
        }
    }
}

impl SoftphoneState {
    pub fn is_registered(&self) -> bool {
        matches!(self.registration, Registration::Registered { .. })
    }

    /// Whether `cmd` is allowed right now.
    pub fn admit(&self, cmd: &SoftphoneCommand) -> Result<(), String> {
        use CallStatus::*;
        let ok = match cmd {
            SoftphoneCommand::Register { .. } | SoftphoneCommand::Forward(_) | SoftphoneCommand::Quit => true,
            SoftphoneCommand::Call(_) => {
                if !self.is_registered() {
                    return Err("not registered".into());
                }
                self.call == Idle
            }
            SoftphoneCommand::Answer => self.call == RingingIn,
            SoftphoneCommand::Hold | SoftphoneCommand::Dtmf(_) | SoftphoneCommand::Transfer(_) => self.call == Active,
            SoftphoneCommand::Unhold => self.call == Held,
            SoftphoneCommand::Hangup => self.call != Idle,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("not allowed while {:?}", self.call).to_lowercase())
        }
    }

    /// Local effect of an admitted command, before the network answers.
    pub fn apply(&mut self, cmd: &SoftphoneCommand) {
        match cmd {
            SoftphoneCommand::Register { .. } => self.registration = Registration::Registering,
            SoftphoneCommand::Call(_) => self.call = CallStatus::RingingOut,
            SoftphoneCommand::Answer | SoftphoneCommand::Unhold => self.call = CallStatus::Active,
            SoftphoneCommand::Hold => self.call = CallStatus::Held,
            SoftphoneCommand::Hangup => self.call = CallStatus::Idle,
            SoftphoneCommand::Forward(t) => self.forward_target = t.clone(),
            SoftphoneCommand::Dtmf(_) | SoftphoneCommand::Transfer(_) | SoftphoneCommand::Quit => {}
        }
    }
}
