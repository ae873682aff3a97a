//! Softphone runtime: one thread owning a [`UaCore`], its SIP transport and
//! the RTP endpoint of the current call.
//!
//! Transfer is done by the phone itself without REFER: it calls the target
//! offering the current peer's media description, then re-INVITEs the peer
//! with the target's answer and steps out of the media path while keeping
//! both dialogs. A BYE on either side is relayed to the other.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender};
use tracing::{debug, info, warn};

use super::core::{CallRef, UaConfig, UaCore, UaEvent};
use super::ladder::Ladder;
use super::state::{CallStatus, Registration, SoftphoneCommand, SoftphoneState};
use crate::clock::{Clock, UnixMs};
use crate::dialog::new_request;
use crate::digest::{Challenge, Credentials};
use crate::ids::IdGen;
use crate::media::ports::PortAllocator;
use crate::media::{Capture, MediaEvent, MediaHandle, Sink, Source};
use crate::sip::{parse_message, Direction, Method, NameAddr, SdpBody, SipUri};
use crate::transaction::{TimerConfig, TransactionKey};
use crate::transport::{trace_sip, Endpoint, PacketFilter, SipTransport};

#[derive(Clone)]
pub struct PhoneConfig {
    pub name: String,
    pub bind: SocketAddr,
    pub domain: String,
    pub tone_hz: f64,
    pub tone_amplitude: i16,
    pub media_ports: (u16, u16),
    pub timers: TimerConfig,
    pub filter: Option<Arc<dyn PacketFilter>>,
    pub seed: Option<u64>,
    pub register_expires: u32,
    pub ring_timeout_s: u32,
    /// Human-readable status lines are also pushed here.
    pub notify: Option<Sender<String>>,
}

impl PhoneConfig {
    pub fn new(name: &str, bind: SocketAddr) -> Self {
        Self {
            name: name.to_string(),
            bind,
            domain: "pbx".into(),
            tone_hz: 440.0,
            tone_amplitude: 12000,
            media_ports: crate::media::ports::DEFAULT_RANGE,
            timers: TimerConfig::default(),
            filter: None,
            seed: None,
            register_expires: 3600,
            ring_timeout_s: 0,
            notify: None,
        }
    }
}

/// State visible from outside the phone thread.
pub struct PhoneShared {
    state: Mutex<SoftphoneState>,
    log: Mutex<Vec<String>>,
    media_addr: Mutex<Option<SocketAddr>>,
    pub capture: Arc<Capture>,
    pub ladder: Arc<Ladder>,
    notify: Option<Sender<String>>,
}

impl PhoneShared {
    pub fn state(&self) -> SoftphoneState {
        self.state.lock().unwrap().clone()
    }

    pub fn log(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }

    /// RTP address of the current call, if any.
    pub fn media_addr(&self) -> Option<SocketAddr> {
        *self.media_addr.lock().unwrap()
    }

    fn say(&self, line: String) {
        info!(target: "phone", "{line}");
        if let Some(n) = &self.notify {
            let _ = n.send(line.clone());
        }
        self.log.lock().unwrap().push(line);
    }

    fn update(&self, f: impl FnOnce(&mut SoftphoneState)) {
        f(&mut self.state.lock().unwrap());
    }
}

enum PhoneMsg {
    Command(SoftphoneCommand, Option<SocketAddr>, Sender<Result<(), String>>),
    Shutdown,
}

pub struct Phone {
    tx: Sender<PhoneMsg>,
    shared: Arc<PhoneShared>,
    sip_addr: SocketAddr,
    thread: Option<JoinHandle<()>>,
}

impl Phone {
    pub fn start(cfg: PhoneConfig, clock: Arc<dyn Clock>) -> std::io::Result<Self> {
        let (transport, inbound) = SipTransport::bind(cfg.bind, false, cfg.filter.clone())?;
        let sip_addr = transport.local_addr();
        let ids = Arc::new(match cfg.seed {
            Some(s) => IdGen::seeded(s),
            None => IdGen::from_entropy(),
        });
        let ladder = Arc::new(Ladder::default());
        let ua = UaCore::new(
            UaConfig {
                local: Endpoint::udp(sip_addr),
                user: None,
                credentials: None,
            },
            Arc::clone(&ids),
            cfg.timers,
        )
        .with_ladder(Arc::clone(&ladder));
        let shared = Arc::new(PhoneShared {
            state: Mutex::new(SoftphoneState {
                ring_timeout_s: cfg.ring_timeout_s,
                ..SoftphoneState::default()
            }),
            log: Mutex::new(Vec::new()),
            media_addr: Mutex::new(None),
            capture: Capture::new(),
            ladder,
            notify: cfg.notify.clone(),
        });
        let (tx, rx) = unbounded();
        let (media_tx, media_rx) = unbounded();
        let ports = PortAllocator::new(sip_addr.ip(), cfg.media_ports.0, cfg.media_ports.1);
        let inner = Inner {
            tone: cfg.tone_hz,
            cfg,
            shared: Arc::clone(&shared),
            ua,
            ids,
            transport,
            clock,
            proxy: None,
            ext: None,
            password: String::new(),
            reg: None,
            refresh_at: None,
            current: None,
            ring_deadline: None,
            media: None,
            local_sdp: None,
            ports,
            media_tx,
            transfer: None,
            bridges: Vec::new(),
        };
        let thread = thread::Builder::new()
            .name(format!("phone-{}", sip_addr.port()))
            .spawn(move || inner.run(inbound, rx, media_rx))?;
        Ok(Self {
            tx,
            shared,
            sip_addr,
            thread: Some(thread),
        })
    }

    pub fn shared(&self) -> &Arc<PhoneShared> {
        &self.shared
    }

    pub fn sip_addr(&self) -> SocketAddr {
        self.sip_addr
    }

    /// Runs a command. `proxy` resolves the proxy argument of `register`.
    pub fn command(&self, cmd: SoftphoneCommand, proxy: Option<SocketAddr>) -> Result<(), String> {
        let (rtx, rrx) = bounded(1);
        self.tx
            .send(PhoneMsg::Command(cmd, proxy, rtx))
            .map_err(|_| "phone stopped".to_string())?;
        rrx.recv_timeout(Duration::from_secs(5))
            .map_err(|_| "phone not responding".to_string())?
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.tx.send(PhoneMsg::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Phone {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct RegState {
    call_id: String,
    seq: u32,
    key: Option<TransactionKey>,
    auth_tried: bool,
}

struct Transfer {
    original: CallRef,
    consult: CallRef,
    target: String,
}

struct Inner {
    cfg: PhoneConfig,
    shared: Arc<PhoneShared>,
    ua: UaCore,
    ids: Arc<IdGen>,
    transport: Arc<SipTransport>,
    clock: Arc<dyn Clock>,
    proxy: Option<Endpoint>,
    ext: Option<String>,
    password: String,
    reg: Option<RegState>,
    refresh_at: Option<UnixMs>,
    current: Option<CallRef>,
    ring_deadline: Option<UnixMs>,
    media: Option<MediaHandle>,
    local_sdp: Option<SdpBody>,
    ports: PortAllocator,
    media_tx: Sender<MediaEvent>,
    transfer: Option<Transfer>,
    bridges: Vec<(CallRef, CallRef)>,
    tone: f64,
}

impl Inner {
    fn run(
        mut self,
        inbound: Receiver<crate::transport::Inbound>,
        rx: Receiver<PhoneMsg>,
        media_rx: Receiver<MediaEvent>,
    ) {
        loop {
            let now = self.clock.now_ms();
            let wake = [self.ua.next_wakeup(), self.refresh_at, self.ring_deadline]
                .into_iter()
                .flatten()
                .min()
                .map(|t| t.saturating_sub(now))
                .unwrap_or(50)
                .clamp(1, 50);
            select! {
                recv(inbound) -> m => match m {
                    Ok(m) => self.on_inbound(m),
                    Err(_) => break,
                },
                recv(rx) -> m => match m {
                    Ok(PhoneMsg::Command(cmd, proxy, reply)) => {
                        let quit = cmd == SoftphoneCommand::Quit;
                        let r = self.on_command(cmd, proxy);
                        let _ = reply.send(r);
                        if quit {
                            break;
                        }
                    }
                    Ok(PhoneMsg::Shutdown) | Err(_) => break,
                },
                recv(media_rx) -> _ => {},
                default(Duration::from_millis(wake)) => {},
            }
            let now = self.clock.now_ms();
            let events = self.ua.on_tick(now);
            self.handle_events(events);
            self.timers(now);
            self.flush();
        }
        self.media = None;
        self.transport.close();
    }

    fn flush(&mut self) {
        for (msg, to) in self.ua.take_output() {
            let bytes = msg.to_bytes();
            trace_sip(&self.cfg.name, true, to.addr, &bytes);
            if let Err(e) = self.transport.send(&to, &bytes) {
                debug!(error = %e, "send failed");
            }
        }
    }

    fn on_inbound(&mut self, m: crate::transport::Inbound) {
        trace_sip(&self.cfg.name, false, m.source.addr, &m.data);
        match parse_message(&m.data) {
            Ok(msg) => {
                let events = self.ua.on_message(msg, m.source, self.clock.now_ms());
                self.handle_events(events);
            }
            Err(e) => warn!(error = %e, from = %m.source.addr, "unparseable message"),
        }
        self.flush();
    }

    fn domain_uri(&self, user: &str) -> SipUri {
        SipUri::new(Some(user), self.cfg.domain.clone(), None)
    }

    #[allow(clippy::wrong_self_convention)] // the SIP From header
    fn from_addr(&self) -> NameAddr {
        NameAddr::new(self.domain_uri(self.ext.as_deref().unwrap_or("anonymous")))
    }

    fn on_command(&mut self, cmd: SoftphoneCommand, proxy: Option<SocketAddr>) -> Result<(), String> {
        self.shared.state.lock().unwrap().admit(&cmd)?;
        let now = self.clock.now_ms();
        match &cmd {
            SoftphoneCommand::Register { ext, password, .. } => {
                let proxy = proxy.ok_or("unknown proxy")?;
                self.proxy = Some(Endpoint::udp(proxy));
                self.ext = Some(ext.clone());
                self.password = password.clone();
                self.ua.set_user(Some(ext.clone()));
                self.ua.set_credentials(Some((ext.clone(), password.clone())));
                self.reg = Some(RegState {
                    call_id: self.ids.call_id(),
                    seq: 0,
                    key: None,
                    auth_tried: false,
                });
                self.send_register(now, None);
            }
            SoftphoneCommand::Call(digits) => {
                let proxy = self.proxy.ok_or("no proxy")?;
                let sdp = self.open_media()?;
                let target = self.domain_uri(digits);
                let from = self.from_addr();
                let id = self.ua.invite(target, from, Some(sdp), &[], proxy, now);
                self.current = Some(id);
                self.shared.say(format!("calling {digits}"));
            }
            SoftphoneCommand::Answer => {
                let id = self.current.ok_or("no call")?;
                let sdp = self.local_sdp.clone();
                self.ua.answer(id, sdp, now);
                self.ring_deadline = None;
                let remote = self.ua.call(id).and_then(|c| c.remote_sdp.clone());
                self.apply_remote(remote.as_ref());
                self.shared.say("answered".into());
            }
            SoftphoneCommand::Hold => {
                let id = self.current.ok_or("no call")?;
                let mut answer = self.local_sdp.clone().ok_or("no media")?;
                answer.direction = Direction::Inactive;
                self.ua.set_local_sdp(id, Some(answer));
                if !self.ua.reinvite(id, None, now) {
                    return Err("cannot hold now".into());
                }
                if let Some(m) = &self.media {
                    m.set_source(Source::Off);
                }
                self.shared.say("holding".into());
            }
            SoftphoneCommand::Unhold => {
                let id = self.current.ok_or("no call")?;
                let sdp = self.local_sdp.clone().ok_or("no media")?;
                if !self.ua.reinvite(id, Some(sdp), now) {
                    return Err("cannot resume now".into());
                }
                self.send_tone();
                self.shared.say("resuming".into());
            }
            SoftphoneCommand::Dtmf(d) => {
                if let Some(m) = &self.media {
                    m.dtmf(*d);
                }
                self.shared.say(format!("sent dtmf {d}"));
            }
            SoftphoneCommand::Transfer(target) => {
                let id = self.current.ok_or("no call")?;
                let proxy = self.proxy.ok_or("no proxy")?;
                let peer_sdp = self
                    .ua
                    .call(id)
                    .and_then(|c| c.remote_sdp.clone())
                    .ok_or("peer has no media")?;
                let uri = self.domain_uri(target);
                let from = self.from_addr();
                let consult = self.ua.invite(uri, from, Some(peer_sdp), &[], proxy, now);
                self.transfer = Some(Transfer {
                    original: id,
                    consult,
                    target: target.clone(),
                });
                self.shared.say(format!("transferring to {target}"));
            }
            SoftphoneCommand::Forward(t) => {
                self.shared.say(match t {
                    Some(t) => format!("forwarding to {t}"),
                    None => "forwarding off".into(),
                });
            }
            SoftphoneCommand::Hangup => {
                if let Some(id) = self.current.take() {
                    self.ua.hangup(id, now);
                }
                self.close_media();
                self.ring_deadline = None;
                self.shared.say("hung up".into());
            }
            SoftphoneCommand::Quit => {
                if let Some(id) = self.current.take() {
                    self.ua.hangup(id, now);
                }
                self.flush();
            }
        }
        self.shared.update(|s| s.apply(&cmd));
        self.flush();
        Ok(())
    }

    fn send_register(&mut self, now: UnixMs, challenge: Option<Challenge>) {
        let (Some(proxy), Some(ext)) = (self.proxy, self.ext.clone()) else {
            return;
        };
        let Some(reg) = self.reg.as_mut() else {
            return;
        };
        reg.seq += 1;
        reg.auth_tried = challenge.is_some();
        let aor = NameAddr::new(SipUri::new(Some(&ext), self.cfg.domain.clone(), None));
        let registrar = SipUri::new(None, self.cfg.domain.clone(), None);
        let contact = self.ua.contact_uri();
        let mut req = new_request(
            Method::Register,
            registrar.clone(),
            &aor.clone().with_tag(&self.ids.tag()),
            &aor,
            &reg.call_id,
            reg.seq,
            &self.ua.new_branch_via(),
            Some(&contact),
        );
        req.headers.push("Expires", self.cfg.register_expires.to_string());
        if let Some(ch) = challenge {
            let creds = Credentials::answer(&ch, &ext, &self.password, "REGISTER", &registrar.to_string());
            req.headers.push("Authorization", creds.to_string());
        }
        let key = self.ua.send_request(req, proxy, now);
        if let Some(reg) = self.reg.as_mut() {
            reg.key = key;
        }
    }

    fn timers(&mut self, now: UnixMs) {
        if self.refresh_at.is_some_and(|t| now >= t) {
            self.refresh_at = None;
            if let Some(reg) = self.reg.as_mut() {
                reg.auth_tried = false;
            }
            self.send_register(now, None);
        }
        if self.ring_deadline.is_some_and(|t| now >= t) {
            self.ring_deadline = None;
            if let Some(id) = self.current.take() {
                self.ua.reject(id, 480, &[], now);
                self.close_media();
                self.shared.update(|s| s.call = CallStatus::Idle);
                self.shared.say("missed call".into());
            }
        }
    }

    fn open_media(&mut self) -> Result<SdpBody, String> {
        self.close_media();
        let sock = self.ports.allocate().map_err(|e| e.to_string())?;
        let handle =
            MediaHandle::spawn(sock, self.media_tx.clone(), self.cfg.filter.clone()).map_err(|e| e.to_string())?;
        handle.set_sink(Sink::Capture(Arc::clone(&self.shared.capture)));
        let addr = handle.local_addr();
        let sdp = SdpBody::audio(addr.ip(), addr.port(), u64::from(self.ids.u32()));
        *self.shared.media_addr.lock().unwrap() = Some(addr);
        self.media = Some(handle);
        self.local_sdp = Some(sdp.clone());
        Ok(sdp)
    }

    fn close_media(&mut self) {
        self.media = None;
        self.local_sdp = None;
        *self.shared.media_addr.lock().unwrap() = None;
    }

    fn send_tone(&self) {
        if let Some(m) = &self.media {
            m.set_source(Source::Tone {
                hz: self.tone,
                amplitude: self.cfg.tone_amplitude,
            });
        }
    }

    /// Points our media at what the peer described.
    fn apply_remote(&self, sdp: Option<&SdpBody>) {
        let Some(m) = &self.media else {
            return;
        };
        match sdp {
            Some(s) if s.is_hold() => m.set_source(Source::Off),
            Some(s) => {
                m.set_remote(Some(s.media_addr()));
                if self.shared.state().call != CallStatus::Held {
                    self.send_tone();
                }
            }
            None => {}
        }
    }

    fn handle_events(&mut self, events: Vec<UaEvent>) {
        for e in events {
            self.on_event(e);
        }
    }

    fn end_current(&mut self, line: &str) {
        self.current = None;
        self.ring_deadline = None;
        self.close_media();
        self.shared.update(|s| s.call = CallStatus::Idle);
        self.shared.say(line.to_string());
    }

    fn on_event(&mut self, e: UaEvent) {
        let now = self.clock.now_ms();
        match e {
            UaEvent::Response { key, resp } => {
                let ours = self.reg.as_ref().is_some_and(|r| r.key.as_ref() == Some(&key));
                if !ours {
                    return;
                }
                let code = resp.code();
                let auth_tried = self.reg.as_ref().is_some_and(|r| r.auth_tried);
                if code == 401 && !auth_tried {
                    let ch = resp.headers.get("WWW-Authenticate").and_then(Challenge::parse);
                    self.send_register(now, ch);
                } else if (200..300).contains(&code) {
                    let contact = self.ua.contact_uri().to_string();
                    let expires = resp
                        .headers
                        .get_all("Contact")
                        .filter_map(|c| c.parse::<NameAddr>().ok())
                        .find(|c| c.uri.to_string() == contact)
                        .and_then(|c| c.params.value("expires").and_then(|v| v.parse::<u64>().ok()))
                        .unwrap_or(u64::from(self.cfg.register_expires));
                    self.refresh_at = Some(now + expires * 500);
                    self.shared.update(|s| {
                        s.registration = Registration::Registered {
                            expires_at: now + expires * 1000,
                        }
                    });
                    self.shared.say(format!("registered ({expires}s)"));
                } else {
                    self.shared.update(|s| s.registration = Registration::Unregistered);
                    self.shared
                        .say(format!("register failed: {} {}", code, resp.status.reason()));
                }
            }
            UaEvent::Incoming { call } => {
                let state = self.shared.state();
                let from = self.ua.call(call).map(|c| c.remote_display()).unwrap_or_default();
                if let Some(target) = state.forward_target.clone() {
                    let contact = format!("<{}>", self.domain_uri(&target));
                    self.ua.reject(call, 302, &[("Contact".into(), contact)], now);
                    self.shared.say(format!("forwarded call from {from} to {target}"));
                    return;
                }
                if self.current.is_some() || state.call != CallStatus::Idle {
                    self.ua.reject(call, 486, &[], now);
                    return;
                }
                match self.open_media() {
                    Ok(_) => {
                        self.current = Some(call);
                        self.ua.ring(call, 180, now);
                        if state.ring_timeout_s > 0 {
                            self.ring_deadline = Some(now + u64::from(state.ring_timeout_s) * 1000);
                        }
                        self.shared.update(|s| s.call = CallStatus::RingingIn);
                        self.shared.say(format!("incoming call from {from}"));
                    }
                    Err(e) => {
                        warn!(error = %e, "no media port");
                        self.ua.reject(call, 500, &[], now);
                    }
                }
            }
            UaEvent::Progress { call, code } => {
                if Some(call) == self.current {
                    self.shared.say(if code == 180 {
                        "ringing".into()
                    } else {
                        format!("progress {code}")
                    });
                }
            }
            UaEvent::Answered { call, sdp } => {
                if let Some(t) = self.transfer.as_ref().filter(|t| t.consult == call) {
                    // Target picked up: hand the peer over to it.
                    let original = t.original;
                    if !self.ua.reinvite(original, sdp, now) {
                        self.shared.say("transfer failed".into());
                    }
                    return;
                }
                if Some(call) == self.current {
                    self.shared.update(|s| s.call = CallStatus::Active);
                    self.apply_remote(sdp.as_ref());
                    self.shared.say("answered".into());
                }
            }
            UaEvent::Confirmed { call, sdp } => {
                if Some(call) == self.current && sdp.is_some() {
                    self.apply_remote(sdp.as_ref());
                }
            }
            UaEvent::Failed { call, code, resp } => {
                if let Some(t) = self.transfer.as_ref().filter(|t| t.consult == call) {
                    self.shared.say(format!("transfer to {} failed: {code}", t.target));
                    self.transfer = None;
                    return;
                }
                if Some(call) == self.current {
                    self.end_current(&format!("{} {}", code, resp.status.reason()));
                }
            }
            UaEvent::Cancelled { call } => {
                if Some(call) == self.current {
                    self.end_current("call cancelled");
                }
            }
            UaEvent::Terminated { call } => {
                if let Some(pos) = self.bridges.iter().position(|(a, b)| *a == call || *b == call) {
                    let (a, b) = self.bridges.remove(pos);
                    let other = if a == call { b } else { a };
                    self.ua.bye(other, now);
                    self.ua.remove(call);
                    return;
                }
                if Some(call) == self.current {
                    self.end_current("call ended");
                }
                self.ua.remove(call);
            }
            UaEvent::Reinvite { call, sdp } => {
                let held = self.shared.state().call == CallStatus::Held;
                let mut ours = self.ua.call(call).and_then(|c| c.local_sdp.clone());
                if Some(call) == self.current {
                    ours = self.local_sdp.clone().map(|mut s| {
                        if held {
                            s.direction = Direction::Inactive;
                        }
                        s
                    });
                }
                self.ua.answer_reinvite(call, ours, now);
                if Some(call) == self.current {
                    match &sdp {
                        None => self.shared.say("peer put us on hold".into()),
                        Some(s) if s.is_hold() => self.shared.say("peer put us on hold".into()),
                        Some(_) => self.shared.say("media updated".into()),
                    }
                    self.apply_remote(sdp.as_ref());
                }
            }
            UaEvent::ReinviteAnswered { call, sdp } => {
                if let Some(t) = self.transfer.as_ref().filter(|t| t.original == call) {
                    let target = t.target.clone();
                    self.bridges.push((t.original, t.consult));
                    self.transfer = None;
                    self.end_current(&format!("transferred to {target}"));
                    return;
                }
                if Some(call) == self.current {
                    match self.shared.state().call {
                        CallStatus::Held => self.shared.say("held".into()),
                        _ => {
                            self.apply_remote(sdp.as_ref());
                            self.shared.say("resumed".into());
                        }
                    }
                }
            }
            UaEvent::ReinviteFailed { call, code } => {
                if Some(call) == self.current {
                    self.shared.say(format!("re-INVITE failed: {code}"));
                }
            }
        }
    }
}
