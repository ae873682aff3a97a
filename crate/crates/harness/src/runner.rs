//! Executes scenarios and reports one verdict per step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ipts_core::b2bua::list_mailbox;
use ipts_core::clock::system;
use ipts_core::proxy::Disposition;
use ipts_core::sip::{Message, Method, SipHeaders};
use ipts_core::ua::{CallStatus, LadderEntry, SoftphoneCommand, SoftphoneState};
use tracing::{info, warn};

use crate::ladder::{first_difference, sequence_matches, tokens, Normalizer};
use crate::scenario::{ActorKind, Scenario, ScenarioStep, Verb, ALL};
use crate::shim::{NetShim, ShimConfig};
use crate::topology::{Actor, AddressPlan, Topology};
use crate::{tone_energy, HarnessError};

const POLL: Duration = Duration::from_millis(20);
/// Level a tone must exceed to count as heard.
const HEARD_DB: f64 = -20.0;
/// Level below which a tone counts as absent.
const ABSENT_DB: f64 = -30.0;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    /// Overrides the scenario's `net loss`.
    pub loss_pct: Option<f64>,
    pub delay_ms: Option<u64>,
    /// Where to write the packet capture, ladders and report.
    pub capture_dir: Option<PathBuf>,
    pub net_base: u8,
    /// Write golden ladders instead of comparing against them.
    pub bless: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            loss_pct: None,
            delay_ms: None,
            capture_dir: None,
            net_base: 1,
            bless: std::env::var_os("IPTS_BLESS").is_some(),
        }
    }
}

#[derive(Debug)]
pub struct StepOutcome {
    pub number: usize,
    pub line: usize,
    pub text: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: u64,
    pub error: Option<HarnessError>,
}

#[derive(Debug)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub loss_pct: f64,
    pub outcomes: Vec<StepOutcome>,
    /// Normalized ladders of every phone and trunk.
    pub ladder: String,
    pub calls_placed: usize,
    pub calls_answered: usize,
    pub packets_dropped: usize,
    pub elapsed: Duration,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    /// Step numbers with their verdicts; equal across runs with one seed.
    pub fn verdicts(&self) -> Vec<(usize, bool)> {
        self.outcomes.iter().map(|o| (o.number, o.passed)).collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = &StepOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    pub fn completion_rate(&self) -> Option<f64> {
        (self.calls_placed > 0).then(|| self.calls_answered as f64 / self.calls_placed as f64)
    }

    /// One `PASS|FAIL step_no detail` line per step.
    pub fn machine_lines(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .map(|o| format!("{} {} {}", if o.passed { "PASS" } else { "FAIL" }, o.number, o.detail))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {} (seed {}, loss {}%)",
            self.scenario, self.seed, self.loss_pct
        );
        for o in &self.outcomes {
            let mark = if o.passed { "ok  " } else { "FAIL" };
            let _ = writeln!(
                s,
                "  {mark} {:>3}  {:<40} {:>6} ms  {}",
                o.number, o.text, o.elapsed_ms, o.detail
            );
        }
        let passed = self.outcomes.iter().filter(|o| o.passed).count();
        let _ = writeln!(
            s,
            "{passed}/{} steps passed in {:.1} s",
            self.outcomes.len(),
            self.elapsed.as_secs_f64()
        );
        match self.completion_rate() {
            Some(r) => {
                let _ = writeln!(
                    s,
                    "calls placed {}, answered {} ({:.0}% completion), {} packets dropped",
                    self.calls_placed,
                    self.calls_answered,
                    r * 100.0,
                    self.packets_dropped
                );
            }
            None => {
                let _ = writeln!(s, "no calls placed, {} packets dropped", self.packets_dropped);
            }
        }
        for l in self.machine_lines() {
            s.push_str(&l);
            s.push('\n');
        }
        s
    }
}

pub fn run_file(path: &Path, opts: &RunOptions) -> Result<Report, HarnessError> {
    run_scenario(&Scenario::load(path)?, opts)
}

enum Failure {
    Timeout(String),
    Assert(String),
    Stimulus(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::CaptureMissing(_) => Failure::Assert(e.to_string()),
            other => Failure::Stimulus(other.to_string()),
        }
    }
}

type StepResult = Result<String, Failure>;

/// Starts the topology, runs every step (a failed step does not stop the
/// run) and tears everything down.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<Report, HarnessError> {
    let started = Instant::now();
    let loss = opts.loss_pct.unwrap_or(scenario.net.loss_pct);
    let shim = Arc::new(NetShim::new(ShimConfig {
        loss_pct: loss,
        delay_ms: opts.delay_ms.unwrap_or(scenario.net.delay_ms),
        partitions: Vec::new(),
        seed: opts.seed,
    }));
    let work = opts.capture_dir.as_ref().map(|d| d.join("work"));
    let plan = AddressPlan { base: opts.net_base };
    let mut topo = Topology::start(scenario, plan, Arc::clone(&shim), system(), opts.seed, work.as_deref())?;
    for (a, b) in &scenario.net.partitions {
        for x in topo.addresses_of(a) {
            for y in topo.addresses_of(b) {
                shim.partition(x, y);
            }
        }
    }
    info!(scenario = %scenario.name, seed = opts.seed, loss, "running");
    let mut ctx = Ctx {
        scenario,
        topo: &mut topo,
        opts,
    };
    let mut outcomes = Vec::new();
    for step in &scenario.steps {
        let t0 = Instant::now();
        let res = ctx.exec(step);
        let elapsed_ms = t0.elapsed().as_millis() as u64;
        let text = step.to_string();
        let outcome = match res {
            Ok(note) => StepOutcome {
                number: step.number,
                line: step.line,
                detail: if note.is_empty() {
                    text.clone()
                } else {
                    format!("{text}: {note}")
                },
                text,
                passed: true,
                elapsed_ms,
                error: None,
            },
            Err(f) => {
                let (detail, error) = match f {
                    Failure::Timeout(d) => (
                        format!("{text}: timed out after {} ms: {d}", step.timeout_ms),
                        HarnessError::StepTimeout {
                            step: step.number,
                            detail: d,
                        },
                    ),
                    Failure::Assert(d) => (
                        format!("{text}: {d}"),
                        HarnessError::AssertFailed {
                            step: step.number,
                            detail: d,
                        },
                    ),
                    Failure::Stimulus(d) => (
                        format!("{text}: {d}"),
                        HarnessError::StepFailed {
                            step: step.number,
                            detail: d,
                        },
                    ),
                };
                warn!(step = step.number, "{detail}");
                StepOutcome {
                    number: step.number,
                    line: step.line,
                    text,
                    passed: false,
                    detail,
                    elapsed_ms,
                    error: Some(error),
                }
            }
        };
        outcomes.push(outcome);
    }
    let ladders = topo.ladders();
    let ladder = Normalizer::new(topo.names().iter().cloned()).render(&ladders);
    let (calls_placed, calls_answered) = completion(&ladders);
    topo.shutdown();
    let report = Report {
        scenario: scenario.name.clone(),
        seed: opts.seed,
        loss_pct: loss,
        outcomes,
        ladder,
        calls_placed,
        calls_answered,
        packets_dropped: shim.dropped(),
        elapsed: started.elapsed(),
    };
    if let Some(dir) = &opts.capture_dir {
        shim.write_capture(dir)?;
        std::fs::write(dir.join("ladder.txt"), &report.ladder)?;
        std::fs::write(dir.join("report.txt"), report.render())?;
    }
    Ok(report)
}

/// Calls placed and answered, counted from the callers' own ladders.
fn completion(ladders: &[(String, Vec<LadderEntry>)]) -> (usize, usize) {
    let mut placed = BTreeSet::new();
    let mut answered = BTreeSet::new();
    for (name, entries) in ladders {
        for e in entries {
            let id = (name.clone(), e.msg.call_id().unwrap_or_default().to_string());
            match &e.msg {
                Message::Request(r) if e.outgoing && r.method == Method::Invite && r.to_tag().is_none() => {
                    placed.insert(id);
                }
                Message::Response(r)
                    if !e.outgoing
                        && (200..300).contains(&r.code())
                        && r.cseq().is_some_and(|c| c.method == Method::Invite) =>
                {
                    answered.insert(id);
                }
                _ => {}
            }
        }
    }
    let answered = answered.intersection(&placed).count();
    (placed.len(), answered)
}

struct Ctx<'a> {
    scenario: &'a Scenario,
    topo: &'a mut Topology,
    opts: &'a RunOptions,
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(|_| Failure::Stimulus(format!("not a number: {s}")))
}

/// Polls `check` until it yields `Ok` or the step's time runs out. The
/// last `Err` explains the timeout.
fn poll(step: &ScenarioStep, mut check: impl FnMut() -> Result<String, String>) -> StepResult {
    let deadline = Instant::now() + Duration::from_millis(step.timeout_ms);
    loop {
        match check() {
            Ok(note) => return Ok(note),
            Err(why) if Instant::now() >= deadline => return Err(Failure::Timeout(why)),
            Err(_) => std::thread::sleep(POLL),
        }
    }
}

fn once(res: Result<String, String>) -> StepResult {
    res.map_err(Failure::Assert)
}

fn state_matches(st: &SoftphoneState, want: &str) -> Result<bool, String> {
    Ok(match want {
        "registered" => st.is_registered(),
        "unregistered" => !st.is_registered(),
        "idle" => st.call == CallStatus::Idle,
        "ringing" => st.call == CallStatus::RingingIn,
        "calling" => st.call == CallStatus::RingingOut,
        "active" => st.call == CallStatus::Active,
        "held" => st.call == CallStatus::Held,
        other => return Err(format!("unknown state {other}")),
    })
}

impl Ctx<'_> {
    fn exec(&mut self, step: &ScenarioStep) -> StepResult {
        let kind = self.scenario.actor(&step.actor).map(|a| a.kind);
        match step.verb {
            Verb::Wait => {
                std::thread::sleep(Duration::from_millis(parse_num(&step.args[0])?));
                Ok(String::new())
            }
            Verb::Kill => {
                self.topo.kill(&step.actor)?;
                Ok(String::new())
            }
            Verb::Start => {
                self.topo.start_actor(&step.actor)?;
                Ok(String::new())
            }
            Verb::Expect => self.expect(step, kind),
            Verb::Assert => self.assert(step, kind),
            _ if kind == Some(ActorKind::Phone) => self.phone_command(step),
            v => Err(Failure::Stimulus(format!("{} only applies to phones", v.as_str()))),
        }
    }

    fn phone_command(&mut self, step: &ScenarioStep) -> StepResult {
        if step.verb == Verb::Register {
            self.topo.register(&step.actor, &step.args[0])?;
            return Ok(String::new());
        }
        let cmd = match step.verb {
            Verb::Call => SoftphoneCommand::Call(step.args[0].clone()),
            Verb::Answer => SoftphoneCommand::Answer,
            Verb::Hold => SoftphoneCommand::Hold,
            Verb::Unhold => SoftphoneCommand::Unhold,
            Verb::Hangup => SoftphoneCommand::Hangup,
            Verb::Dtmf => {
                let mut c = step.args[0].chars();
                match (c.next(), c.next()) {
                    (Some(d), None) => SoftphoneCommand::Dtmf(d),
                    _ => return Err(Failure::Stimulus("dtmf takes one digit".into())),
                }
            }
            _ => unreachable!("handled by exec"),
        };
        let phone = self.topo.running_phone(&step.actor)?;
        phone.command(cmd, None).map_err(Failure::Stimulus)?;
        Ok(String::new())
    }

    fn expect(&mut self, step: &ScenarioStep, kind: Option<ActorKind>) -> StepResult {
        let args: Vec<&str> = step.args.iter().map(String::as_str).collect();
        let topo = &*self.topo;
        match (kind, args.as_slice()) {
            (Some(ActorKind::Phone), ["tone", hz]) => {
                let hz: f64 = parse_num(hz)?;
                poll(step, || {
                    let db = phone_tone(topo, &step.actor, hz)?;
                    if db > HEARD_DB {
                        Ok(format!("{db:.1} dB"))
                    } else {
                        Err(format!("{hz} Hz at {db:.1} dB"))
                    }
                })
            }
            (Some(ActorKind::Phone), ["silence", hz]) => {
                let hz: f64 = parse_num(hz)?;
                poll(step, || {
                    let db = phone_tone(topo, &step.actor, hz).unwrap_or(-200.0);
                    if db < ABSENT_DB {
                        Ok(format!("{db:.1} dB"))
                    } else {
                        Err(format!("{hz} Hz still at {db:.1} dB"))
                    }
                })
            }
            (Some(ActorKind::Phone), ["log", words @ ..]) => {
                let needle = words.join(" ");
                poll(step, || {
                    let p = topo.phone(&step.actor).map_err(|e| e.to_string())?;
                    let log = p.shared().map(|s| s.log()).unwrap_or_default();
                    match log.iter().find(|l| l.contains(&needle)) {
                        Some(l) => Ok(l.clone()),
                        None => Err(format!("no log line contains {needle:?}")),
                    }
                })
            }
            (Some(ActorKind::Phone), [state]) => poll(step, || {
                let st = phone_state(topo, &step.actor)?;
                match state_matches(&st, state) {
                    Ok(true) => Ok(String::new()),
                    Ok(false) => Err(format!("state is {:?} / {:?}", st.call, st.registration)),
                    Err(e) => Err(e),
                }
            }),
            (Some(ActorKind::Trunk), [what, n]) => {
                let n: usize = parse_num(n)?;
                let t = topo.trunk(&step.actor)?;
                let Some(node) = &t.node else {
                    return Err(Failure::Stimulus(format!("{} is not running", step.actor)));
                };
                let stats = Arc::clone(node.stats());
                let counter = match *what {
                    "invites" => &stats.invites,
                    "answered" => &stats.answered,
                    "active" => &stats.active,
                    "ended" => &stats.ended,
                    other => return Err(Failure::Stimulus(format!("unknown trunk counter {other}"))),
                };
                poll(step, || {
                    let v = counter.load(Ordering::Relaxed);
                    if v == n {
                        Ok(String::new())
                    } else {
                        Err(format!("{what} is {v}"))
                    }
                })
            }
            (Some(ActorKind::Proxy), ["cdr", n]) => {
                let n: usize = parse_num(n)?;
                poll(step, || {
                    let got = topo.cdrs().map_err(|e| e.to_string())?.len();
                    if got >= n {
                        Ok(format!("{got} records"))
                    } else {
                        Err(format!("{got} records"))
                    }
                })
            }
            (Some(ActorKind::B2bua), ["vm", mailbox, n]) => {
                let n: usize = parse_num(n)?;
                poll(step, || {
                    let got = list_mailbox(&topo.vm_dir(), mailbox).map_err(|e| e.to_string())?.len();
                    if got >= n {
                        Ok(format!("{got} messages"))
                    } else {
                        Err(format!("{got} messages in {mailbox}"))
                    }
                })
            }
            _ => Err(Failure::Stimulus(format!(
                "cannot expect {:?} of {}",
                step.args, step.actor
            ))),
        }
    }

    fn assert(&mut self, step: &ScenarioStep, kind: Option<ActorKind>) -> StepResult {
        let args: Vec<&str> = step.args.iter().map(String::as_str).collect();
        let topo = &*self.topo;
        match (kind, args.as_slice()) {
            (None, ["ladder", file]) if step.actor == ALL => self.assert_ladder(file),
            (_, ["sequence", pattern @ ..]) => {
                let entries = ladder_of(topo, &step.actor)?;
                let toks = tokens(&entries);
                once(if sequence_matches(pattern, &toks) {
                    Ok(String::new())
                } else {
                    Err(format!("ladder was {}", toks.join(" ")))
                })
            }
            (Some(ActorKind::Phone), ["tone", hz, cmp, db]) => {
                let (hz, limit): (f64, f64) = (parse_num(hz)?, parse_num(db)?);
                let got = phone_tone(topo, &step.actor, hz).map_err(Failure::Assert)?;
                let ok = match *cmp {
                    "above" => got > limit,
                    "below" => got < limit,
                    other => return Err(Failure::Stimulus(format!("expected above|below, got {other}"))),
                };
                once(if ok {
                    Ok(format!("{got:.1} dB"))
                } else {
                    Err(format!("{hz} Hz at {got:.1} dB, wanted {cmp} {limit}"))
                })
            }
            (Some(ActorKind::Phone), ["media-from", peer]) => {
                let p = topo.phone(&step.actor)?;
                let sources = p.shared().map(|s| s.capture.sources()).unwrap_or_default();
                let peer_ips = topo.addresses_of(peer);
                once(if sources.iter().any(|s| peer_ips.contains(&s.ip())) {
                    Ok(String::new())
                } else {
                    Err(format!("audio came from {sources:?}, not {peer}"))
                })
            }
            (Some(ActorKind::Phone), [state]) => {
                let st = phone_state(topo, &step.actor).map_err(Failure::Assert)?;
                once(match state_matches(&st, state) {
                    Ok(true) => Ok(String::new()),
                    Ok(false) => Err(format!("state is {:?} / {:?}", st.call, st.registration)),
                    Err(e) => Err(e),
                })
            }
            (Some(_), ["no-rtp"]) => {
                let n: usize = topo
                    .addresses_of(&step.actor)
                    .iter()
                    .map(|ip| topo.shim().rtp_delivered_to(*ip))
                    .sum();
                once(if n == 0 {
                    Ok(String::new())
                } else {
                    Err(format!("{n} RTP packets arrived"))
                })
            }
            (Some(_), ["rtp"]) => {
                let n: usize = topo
                    .addresses_of(&step.actor)
                    .iter()
                    .map(|ip| topo.shim().rtp_delivered_to(*ip))
                    .sum();
                once(if n > 0 {
                    Ok(format!("{n} RTP packets"))
                } else {
                    Err("no RTP arrived".into())
                })
            }
            (Some(ActorKind::B2bua), ["topology-hidden"]) => once(self.topology_hidden(&step.actor)),
            (Some(ActorKind::Proxy), ["cdr", which, disposition, rest @ ..]) => {
                once(self.check_cdr(which, disposition, rest).map_err(|e| match e {
                    Failure::Assert(s) | Failure::Stimulus(s) | Failure::Timeout(s) => s,
                }))
            }
            _ => Err(Failure::Stimulus(format!(
                "cannot assert {:?} of {}",
                step.args, step.actor
            ))),
        }
    }

    fn assert_ladder(&self, file: &str) -> StepResult {
        let path = match &self.scenario.base_dir {
            Some(d) => d.join(file),
            None => PathBuf::from(file),
        };
        let actual = Normalizer::new(self.topo.names().iter().cloned()).render(&self.topo.ladders());
        if self.opts.bless {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Failure::Stimulus(e.to_string()))?;
            }
            std::fs::write(&path, &actual).map_err(|e| Failure::Stimulus(e.to_string()))?;
            return Ok(format!("blessed {}", path.display()));
        }
        let expected =
            std::fs::read_to_string(&path).map_err(|e| Failure::Stimulus(format!("{}: {e}", path.display())))?;
        match first_difference(&expected, &actual) {
            None => Ok(format!("{} lines match", actual.lines().count())),
            Some(d) => Err(Failure::Assert(d)),
        }
    }

    /// No internal address appears in anything the B2BUA's external side
    /// sent or received.
    fn topology_hidden(&self, b2bua: &str) -> Result<String, String> {
        let Some(Actor::B2bua { cfg, .. }) = self.topo.actor(b2bua) else {
            return Err(format!("{b2bua} is not a b2bua"));
        };
        let external = cfg.external_bind.ip();
        let internal: Vec<IpAddr> = self
            .topo
            .actors()
            .filter(|(_, a)| matches!(a.kind(), ActorKind::Phone | ActorKind::Proxy))
            .flat_map(|(n, _)| self.topo.addresses_of(n))
            .chain([cfg.internal_bind.ip()])
            .collect();
        let packets = self.topo.shim().signaling_touching(external);
        if packets.is_empty() {
            return Err("no external signaling captured".into());
        }
        let needles: Vec<String> = internal.iter().map(IpAddr::to_string).collect();
        for p in &packets {
            let text = String::from_utf8_lossy(p.data.as_deref().unwrap_or_default());
            for n in &needles {
                let leaked = text
                    .match_indices(n.as_str())
                    .any(|(i, _)| !text[i + n.len()..].starts_with(|c: char| c.is_ascii_digit()));
                if leaked {
                    return Err(format!("{n} seen in packet {} -> {}", p.from, p.to));
                }
            }
        }
        Ok(format!("{} external packets scanned", packets.len()))
    }

    fn check_cdr(&self, which: &str, disposition: &str, rest: &[&str]) -> Result<String, Failure> {
        let cdrs = self.topo.cdrs().map_err(|e| Failure::Assert(e.to_string()))?;
        let cdr = match which {
            "last" => cdrs.last(),
            n => cdrs.get(parse_num::<usize>(n)?.saturating_sub(1)),
        }
        .ok_or_else(|| Failure::Assert(format!("no cdr {which} among {}", cdrs.len())))?;
        let want: Disposition = disposition.parse().map_err(Failure::Stimulus)?;
        if cdr.disposition != want {
            return Err(Failure::Assert(format!(
                "disposition {:?}, wanted {want:?}",
                cdr.disposition
            )));
        }
        let opts: BTreeMap<&str, &str> = rest.iter().filter_map(|w| w.split_once('=')).collect();
        if let Some(d) = opts.get("duration") {
            let d: u64 = parse_num(d)?;
            let tol: u64 = parse_num(opts.get("tolerance").unwrap_or(&"100"))?;
            if cdr.duration_ms.abs_diff(d) > tol {
                return Err(Failure::Assert(format!(
                    "duration {} ms, wanted {d}±{tol}",
                    cdr.duration_ms
                )));
            }
        }
        Ok(format!("{} {} ms", cdr.disposition.as_str(), cdr.duration_ms))
    }
}

fn phone_state(topo: &Topology, name: &str) -> Result<SoftphoneState, String> {
    let p = topo.phone(name).map_err(|e| e.to_string())?;
    p.shared()
        .map(|s| s.state())
        .ok_or_else(|| format!("{name} is not running"))
}

fn phone_tone(topo: &Topology, name: &str, hz: f64) -> Result<f64, String> {
    let p = topo.phone(name).map_err(|e| e.to_string())?;
    let s = p.shared().ok_or_else(|| format!("{name} is not running"))?;
    tone_energy(&s.capture, name, hz).map_err(|e| e.to_string())
}

fn ladder_of(topo: &Topology, name: &str) -> Result<Vec<LadderEntry>, Failure> {
    match topo.actor(name) {
        Some(Actor::Phone(p)) => Ok(p.ladder()),
        Some(Actor::Trunk(t)) => Ok(t.ladder()),
        _ => Err(Failure::Stimulus(format!("{name} keeps no ladder"))),
    }
}
