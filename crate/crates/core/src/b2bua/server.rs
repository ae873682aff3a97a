//! The B2BUA node: two user-agent cores (internal and external side), one
//! media endpoint per leg, and the feature sessions tying them together.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{select, unbounded, Receiver, Sender};
use tracing::{debug, info, warn};

use super::ivr::{Ivr, IvrAction, Prompt};
use super::voicemail::{append_index, VmEntry};
use super::{is_hold, match_dialplan, Action, B2buaConfig};
use crate::clock::{Clock, UnixMs};
use crate::ids::IdGen;
use crate::media::mixer::Room;
use crate::media::ports::PortAllocator;
use crate::media::wav::{read_wav, WavRecorder};
use crate::media::{MediaError, MediaEvent, MediaHandle, Sink, Source, ToneGen, SAMPLE_RATE};
use crate::node::NodeError;
use crate::sip::{parse_message, Message, NameAddr, SdpBody, SipHeaders, SipUri};
use crate::transport::{trace_sip, Endpoint, Inbound, PacketFilter, SipTransport};
use crate::ua::{CallRef, UaConfig, UaCore, UaEvent};

/// Frequency of the built-in hold music.
pub const MOH_TONE_HZ: f64 = 350.0;
/// Frequency of the built-in voicemail and IVR prompts.
pub const PROMPT_TONE_HZ: f64 = 480.0;
const INVALID_TONE_HZ: f64 = 620.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Internal,
    External,
}

#[derive(Debug, Default)]
pub struct B2buaStats {
    pub sessions: AtomicUsize,
    pub bridges: AtomicU64,
    pub recordings: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct LegRef {
    side: Side,
    call: CallRef,
}

struct Leg {
    r: LegRef,
    media: MediaHandle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BridgeState {
    Setup,
    Bridged,
    Held { by: LegRef },
}

enum Kind {
    Bridge { b: Leg, state: BridgeState },
    Moh,
    Voicemail { mailbox: String },
    Conference { room: String },
    Ivr(Ivr),
}

struct Session {
    a: Leg,
    kind: Kind,
    a_answered: bool,
}

impl Session {
    fn legs(&self) -> Vec<LegRef> {
        match &self.kind {
            Kind::Bridge { b, .. } => vec![self.a.r, b.r],
            _ => vec![self.a.r],
        }
    }

    fn media_ids(&self) -> Vec<u64> {
        match &self.kind {
            Kind::Bridge { b, .. } => vec![self.a.media.id(), b.media.id()],
            _ => vec![self.a.media.id()],
        }
    }
}

struct Prompts {
    vm_greeting: Arc<Vec<i16>>,
    ivr_greeting: Arc<Vec<i16>>,
    ivr_invalid: Arc<Vec<i16>>,
    moh: Arc<Vec<i16>>,
}

fn tone(hz: f64, ms: usize) -> Vec<i16> {
    ToneGen::new(hz, 8000).samples(ms * SAMPLE_RATE as usize / 1000)
}

fn audio_or(path: Option<&Path>, fallback: impl FnOnce() -> Vec<i16>) -> Result<Arc<Vec<i16>>, MediaError> {
    Ok(Arc::new(match path {
        Some(p) => read_wav(p)?,
        None => fallback(),
    }))
}

impl Prompts {
    fn load(cfg: &B2buaConfig) -> Result<Self, MediaError> {
        Ok(Self {
            vm_greeting: audio_or(cfg.vm_greeting.as_deref(), || tone(PROMPT_TONE_HZ, 600))?,
            ivr_greeting: audio_or(cfg.ivr.greeting_file.as_deref(), || tone(PROMPT_TONE_HZ, 600))?,
            ivr_invalid: audio_or(cfg.ivr.invalid_file.as_deref(), || tone(INVALID_TONE_HZ, 300))?,
            moh: audio_or(cfg.moh_file.as_deref(), || tone(MOH_TONE_HZ, 1000))?,
        })
    }
}

/// Protocol and feature logic of the B2BUA. Media endpoints run on their own
/// threads; everything else happens in the caller's thread.
pub struct B2buaCore {
    cfg: B2buaConfig,
    internal: UaCore,
    external: UaCore,
    int_ports: PortAllocator,
    ext_ports: PortAllocator,
    media_events: Sender<MediaEvent>,
    filter: Option<Arc<dyn PacketFilter>>,
    ids: Arc<IdGen>,
    prompts: Prompts,
    sessions: HashMap<u64, Session>,
    by_leg: HashMap<LegRef, u64>,
    by_media: HashMap<u64, u64>,
    rooms: HashMap<String, Arc<Mutex<Room>>>,
    next_session: u64,
    stats: Arc<B2buaStats>,
}

impl B2buaCore {
    pub fn new(
        cfg: B2buaConfig,
        internal_local: SocketAddr,
        external_local: SocketAddr,
        ids: Arc<IdGen>,
        media_events: Sender<MediaEvent>,
        filter: Option<Arc<dyn PacketFilter>>,
    ) -> Result<Self, NodeError> {
        let prompts = Prompts::load(&cfg).map_err(|e| NodeError::Setup(e.to_string()))?;
        let internal = UaCore::new(
            UaConfig {
                local: Endpoint::udp(internal_local),
                user: None,
                credentials: None,
            },
            Arc::clone(&ids),
            cfg.timers,
        );
        let external = UaCore::new(
            UaConfig {
                local: Endpoint::udp(external_local),
                user: cfg.trunk.as_ref().map(|t| t.username.clone()).filter(|u| !u.is_empty()),
                credentials: cfg.trunk.as_ref().map(|t| (t.username.clone(), t.password.clone())),
            },
            Arc::clone(&ids),
            cfg.timers,
        );
        let (lo, hi) = cfg.media_ports;
        Ok(Self {
            int_ports: PortAllocator::new(cfg.internal_ip(), lo, hi),
            ext_ports: PortAllocator::new(cfg.external_ip(), lo, hi),
            cfg,
            internal,
            external,
            media_events,
            filter,
            ids,
            prompts,
            sessions: HashMap::new(),
            by_leg: HashMap::new(),
            by_media: HashMap::new(),
            rooms: HashMap::new(),
            next_session: 1,
            stats: Arc::new(B2buaStats::default()),
        })
    }

    pub fn stats(&self) -> Arc<B2buaStats> {
        Arc::clone(&self.stats)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    fn ua(&mut self, side: Side) -> &mut UaCore {
        match side {
            Side::Internal => &mut self.internal,
            Side::External => &mut self.external,
        }
    }

    pub fn take_output(&mut self) -> Vec<(Side, Message, Endpoint)> {
        let mut out: Vec<_> = self
            .internal
            .take_output()
            .into_iter()
            .map(|(m, e)| (Side::Internal, m, e))
            .collect();
        out.extend(
            self.external
                .take_output()
                .into_iter()
                .map(|(m, e)| (Side::External, m, e)),
        );
        out
    }

    pub fn next_wakeup(&self) -> Option<UnixMs> {
        let ivr = self.sessions.values().filter_map(|s| match &s.kind {
            Kind::Ivr(ivr) => ivr.deadline(),
            _ => None,
        });
        [self.internal.next_wakeup(), self.external.next_wakeup()]
            .into_iter()
            .flatten()
            .chain(ivr)
            .min()
    }

    pub fn on_message(&mut self, side: Side, msg: Message, source: Endpoint, now: UnixMs) {
        let ev = self.ua(side).on_message(msg, source, now);
        self.handle(side, ev, now);
    }

    pub fn on_tick(&mut self, now: UnixMs) {
        let ev = self.internal.on_tick(now);
        self.handle(Side::Internal, ev, now);
        let ev = self.external.on_tick(now);
        self.handle(Side::External, ev, now);
        let due: Vec<(u64, IvrAction)> = self
            .sessions
            .iter_mut()
            .filter_map(|(id, s)| match &mut s.kind {
                Kind::Ivr(ivr) => ivr.tick(now).map(|a| (*id, a)),
                _ => None,
            })
            .collect();
        for (sid, act) in due {
            self.apply_ivr(sid, act, now);
        }
    }

    fn handle(&mut self, side: Side, events: Vec<UaEvent>, now: UnixMs) {
        for e in events {
            match e {
                UaEvent::Incoming { call } => self.on_incoming(LegRef { side, call }, now),
                UaEvent::Progress { call, code } => self.on_progress(LegRef { side, call }, code, now),
                UaEvent::Answered { call, sdp } => self.on_answered(LegRef { side, call }, sdp, now),
                UaEvent::Confirmed { call, sdp } => self.on_confirmed(LegRef { side, call }, sdp),
                UaEvent::Failed { call, code, .. } => self.on_failed(LegRef { side, call }, code, now),
                UaEvent::Cancelled { call } | UaEvent::Terminated { call } => {
                    let r = LegRef { side, call };
                    self.ua(side).remove(call);
                    if let Some(sid) = self.by_leg.get(&r).copied() {
                        self.teardown(sid, Some(r), now);
                    }
                }
                UaEvent::Reinvite { call, sdp } => self.on_reinvite(LegRef { side, call }, sdp, now),
                UaEvent::ReinviteAnswered { .. } | UaEvent::ReinviteFailed { .. } | UaEvent::Response { .. } => {}
            }
        }
        self.stats.sessions.store(self.sessions.len(), Ordering::Relaxed);
    }

    fn open_media(&self, side: Side) -> Result<MediaHandle, MediaError> {
        let ports = match side {
            Side::Internal => &self.int_ports,
            Side::External => &self.ext_ports,
        };
        let socket = ports.allocate()?;
        Ok(MediaHandle::spawn(
            socket,
            self.media_events.clone(),
            self.filter.clone(),
        )?)
    }

    fn sdp_for(&self, media: &MediaHandle) -> SdpBody {
        let a = media.local_addr();
        SdpBody::audio(a.ip(), a.port(), u64::from(self.ids.u32()))
    }

    fn insert(&mut self, s: Session) -> u64 {
        let sid = self.next_session;
        self.next_session += 1;
        for r in s.legs() {
            self.by_leg.insert(r, sid);
        }
        for m in s.media_ids() {
            self.by_media.insert(m, sid);
        }
        self.sessions.insert(sid, s);
        sid
    }

    fn reject(&mut self, r: LegRef, code: u16, now: UnixMs) {
        self.ua(r.side).reject(r.call, code, &[], now);
        self.ua(r.side).remove(r.call);
    }

    fn on_incoming(&mut self, r: LegRef, now: UnixMs) {
        if r.side == Side::External {
            // Inbound trunk calls are not offered.
            return self.reject(r, 403, now);
        }
        let Some(call) = self.internal.call(r.call) else {
            return;
        };
        let invite = call.invite.clone();
        let remote = call.remote_sdp.clone();
        let digits = invite.uri.user().unwrap_or_default().to_string();
        let Some(rule) = match_dialplan(&digits, &self.cfg.dialplan).cloned() else {
            info!(%digits, "no dialplan match");
            return self.reject(r, 404, now);
        };
        let a_media = match self.open_media(Side::Internal) {
            Ok(m) => m,
            Err(e) => {
                warn!(error = %e, "no media port");
                return self.reject(r, 503, now);
            }
        };
        if let Some(s) = remote.as_ref().filter(|s| !s.is_hold()) {
            a_media.set_remote(Some(s.media_addr()));
        }
        let a = Leg { r, media: a_media };
        info!(%digits, action = ?rule.action, "dialplan match");
        match rule.action {
            Action::Bridge(_) => {
                let Some(number) = digits.strip_prefix(rule.literal_prefix()).filter(|n| !n.is_empty()) else {
                    return self.reject(r, 484, now);
                };
                self.bridge_external(a, number.to_string(), now);
            }
            Action::Moh => {
                a.media.set_source(Source::Samples {
                    data: Arc::clone(&self.prompts.moh),
                    looped: true,
                });
                self.answer_feature(a, Kind::Moh, now);
            }
            Action::Voicemail => {
                let mailbox = invite
                    .headers
                    .get("Diversion")
                    .and_then(|v| v.parse::<NameAddr>().ok())
                    .or_else(|| invite.from_hdr())
                    .and_then(|n| n.uri.user().map(str::to_string))
                    .unwrap_or_else(|| "unknown".into());
                if let Err(e) = std::fs::create_dir_all(self.cfg.vm_dir.join(&mailbox)) {
                    warn!(error = %e, %mailbox, "mailbox not writable");
                    return self.reject(r, 480, now);
                }
                a.media.set_source(Source::Samples {
                    data: Arc::clone(&self.prompts.vm_greeting),
                    looped: false,
                });
                self.answer_feature(a, Kind::Voicemail { mailbox }, now);
            }
            Action::Conference => {
                let members = self
                    .sessions
                    .values()
                    .filter(|s| matches!(&s.kind, Kind::Conference { room } if *room == digits))
                    .count();
                if members >= self.cfg.conference_max {
                    return self.reject(r, 486, now);
                }
                let room = Arc::clone(self.rooms.entry(digits.clone()).or_default());
                a.media.set_sink(Sink::Mixer(Arc::clone(&room)));
                a.media.set_source(Source::Mixer(room));
                self.answer_feature(a, Kind::Conference { room: digits }, now);
            }
            Action::Ivr => {
                let (ivr, first) = Ivr::start(self.cfg.ivr.clone());
                let sid = self.answer_feature(a, Kind::Ivr(ivr), now);
                self.apply_ivr(sid, first, now);
            }
        }
    }

    fn answer_feature(&mut self, a: Leg, kind: Kind, now: UnixMs) -> u64 {
        let sdp = self.sdp_for(&a.media);
        self.internal.answer(a.r.call, Some(sdp), now);
        self.insert(Session {
            a,
            kind,
            a_answered: true,
        })
    }

    fn bridge_external(&mut self, a: Leg, number: String, now: UnixMs) {
        let Some(trunk) = self.cfg.trunk.clone() else {
            warn!("bridge requested but no trunk configured");
            return self.reject(a.r, 503, now);
        };
        let b_media = match self.open_media(Side::External) {
            Ok(m) => m,
            Err(e) => {
                warn!(error = %e, "no external media port");
                return self.reject(a.r, 503, now);
            }
        };
        self.internal.ring(a.r.call, 100, now);
        let from = NameAddr::new(SipUri::new(
            Some(trunk.username.as_str()).filter(|u| !u.is_empty()),
            trunk.from_domain.clone(),
            None,
        ));
        let target = SipUri::new(Some(&number), trunk.from_domain.clone(), None);
        let offer = self.sdp_for(&b_media);
        let call = self
            .external
            .invite(target, from, Some(offer), &[], Endpoint::udp(trunk.provider_addr), now);
        info!(%number, "bridging to trunk");
        self.stats.bridges.fetch_add(1, Ordering::Relaxed);
        let b = Leg {
            r: LegRef {
                side: Side::External,
                call,
            },
            media: b_media,
        };
        self.insert(Session {
            a,
            kind: Kind::Bridge {
                b,
                state: BridgeState::Setup,
            },
            a_answered: false,
        });
    }

    fn on_progress(&mut self, r: LegRef, code: u16, now: UnixMs) {
        let Some(sid) = self.by_leg.get(&r).copied() else {
            return;
        };
        let s = &self.sessions[&sid];
        if s.a_answered || s.a.r == r {
            return;
        }
        // Ring-back passes through; no early media is offered.
        let a = s.a.r;
        self.ua(a.side).ring(a.call, code, now);
    }

    fn on_answered(&mut self, r: LegRef, sdp: Option<SdpBody>, now: UnixMs) {
        let Some(sid) = self.by_leg.get(&r).copied() else {
            self.ua(r.side).bye(r.call, now);
            return;
        };
        let s = self.sessions.get_mut(&sid).expect("indexed");
        let Kind::Bridge { b, state } = &mut s.kind else {
            return;
        };
        if let Some(sdp) = sdp.as_ref().filter(|s| !s.is_hold()) {
            b.media.set_remote(Some(sdp.media_addr()));
        }
        MediaHandle::bridge(&s.a.media, &b.media);
        *state = BridgeState::Bridged;
        if !s.a_answered {
            s.a_answered = true;
            let a = s.a.r;
            let ours = self.sdp_for(&self.sessions[&sid].a.media);
            self.ua(a.side).answer(a.call, Some(ours), now);
        }
        info!("call bridged");
    }

    fn on_confirmed(&mut self, r: LegRef, sdp: Option<SdpBody>) {
        let Some(sdp) = sdp.filter(|s| !s.is_hold()) else {
            return;
        };
        if let Some(leg) = self
            .by_leg
            .get(&r)
            .and_then(|sid| self.sessions.get(sid))
            .and_then(|s| leg_of(s, r))
        {
            leg.media.set_remote(Some(sdp.media_addr()));
        }
    }

    fn on_failed(&mut self, r: LegRef, code: u16, now: UnixMs) {
        self.ua(r.side).remove(r.call);
        let Some(sid) = self.by_leg.get(&r).copied() else {
            return;
        };
        let s = &self.sessions[&sid];
        let a = s.a.r;
        if s.a_answered {
            info!(code, "onward call failed; releasing caller");
            self.ua(a.side).bye(a.call, now);
        } else {
            info!(code, "onward call failed; passing code back");
            self.ua(a.side).reject(a.call, code, &[], now);
        }
        // Both legs are answered for now; teardown only releases media.
        self.ua(a.side).remove(a.call);
        self.teardown(sid, Some(r), now);
    }

    fn on_reinvite(&mut self, r: LegRef, sdp: Option<SdpBody>, now: UnixMs) {
        let Some(sid) = self.by_leg.get(&r).copied() else {
            let ours = None;
            return self.ua(r.side).answer_reinvite(r.call, ours, now);
        };
        let hold = is_hold(sdp.as_ref());
        let s = self.sessions.get(&sid).expect("indexed");
        let Some(x) = leg_of(s, r) else {
            return;
        };
        let mut ours = self.sdp_for(&x.media);
        if let Some(offer) = sdp.as_ref() {
            ours.direction = offer.direction.answer();
            if !offer.is_hold() {
                x.media.set_remote(Some(offer.media_addr()));
            }
        }
        self.ua(r.side).answer_reinvite(r.call, Some(ours), now);
        let moh = Arc::clone(&self.prompts.moh);
        let s = self.sessions.get_mut(&sid).expect("indexed");
        let a = &s.a;
        let Kind::Bridge { b, state } = &mut s.kind else {
            return;
        };
        let (x, y) = if a.r == r { (a, &*b) } else { (&*b, a) };
        match (*state, hold) {
            (BridgeState::Bridged, true) => {
                info!("hold: streaming music to the held party");
                y.media.set_sink(Sink::Discard);
                y.media.set_source(Source::Samples {
                    data: moh,
                    looped: true,
                });
                x.media.set_sink(Sink::Discard);
                x.media.set_source(Source::Off);
                *state = BridgeState::Held { by: r };
            }
            (BridgeState::Held { by }, false) if by == r => {
                info!("resume: bridge restored");
                MediaHandle::bridge(&x.media, &y.media);
                *state = BridgeState::Bridged;
            }
            _ => debug!("re-INVITE does not change hold state"),
        }
    }

    /// Ends a session; every leg except `from` gets hung up.
    fn teardown(&mut self, sid: u64, from: Option<LegRef>, now: UnixMs) {
        let Some(s) = self.sessions.remove(&sid) else {
            return;
        };
        for r in s.legs() {
            self.by_leg.remove(&r);
            if Some(r) != from {
                self.ua(r.side).hangup(r.call, now);
            }
        }
        for m in s.media_ids() {
            self.by_media.remove(&m);
        }
        match &s.kind {
            // Closing the sink flushes the recording and reports it.
            Kind::Voicemail { .. } => s.a.media.set_sink(Sink::Discard),
            Kind::Conference { room } => {
                if let Some(r) = self.rooms.get(room) {
                    r.lock().unwrap().leave(s.a.media.id());
                }
                let left = self
                    .sessions
                    .values()
                    .any(|o| matches!(&o.kind, Kind::Conference { room: other } if other == room));
                if !left {
                    self.rooms.remove(room);
                }
            }
            _ => {}
        }
        debug!(session = sid, "session closed");
        drop(s);
    }

    pub fn on_media(&mut self, ev: MediaEvent, now: UnixMs) {
        match ev {
            MediaEvent::SourceFinished { id } => {
                let Some(sid) = self.by_media.get(&id).copied() else {
                    return;
                };
                match &mut self.sessions.get_mut(&sid).expect("indexed").kind {
                    Kind::Voicemail { mailbox } => {
                        let mailbox = mailbox.clone();
                        self.start_recording(sid, &mailbox, now);
                    }
                    Kind::Ivr(ivr) => {
                        if let Some(act) = ivr.prompt_finished(now) {
                            self.apply_ivr(sid, act, now);
                        }
                    }
                    _ => {}
                }
            }
            MediaEvent::Dtmf { id, event } => {
                let Some(sid) = self.by_media.get(&id).copied() else {
                    return;
                };
                if let Kind::Ivr(ivr) = &mut self.sessions.get_mut(&sid).expect("indexed").kind {
                    info!(digit = %event.digit, "IVR digit");
                    if let Some(act) = ivr.digit(event.digit) {
                        self.apply_ivr(sid, act, now);
                    }
                }
            }
            MediaEvent::Recorded {
                id,
                path,
                samples,
                capped,
            } => {
                self.on_recorded(&path, samples);
                if capped {
                    if let Some(sid) = self.by_media.get(&id).copied() {
                        info!("voicemail length cap reached");
                        self.teardown(sid, None, now);
                    }
                }
            }
        }
    }

    fn start_recording(&mut self, sid: u64, mailbox: &str, now: UnixMs) {
        let path = self.cfg.vm_dir.join(mailbox).join(format!("{now}.wav"));
        let cap = self.cfg.vm_max.as_millis() as usize * SAMPLE_RATE as usize / 1000;
        match WavRecorder::create(&path, cap) {
            Ok(rec) => {
                let s = &self.sessions[&sid];
                s.a.media.set_source(Source::Silence);
                s.a.media.set_sink(Sink::Record(rec));
                info!(path = %path.display(), "recording voicemail");
            }
            Err(e) => {
                warn!(error = %e, "cannot record voicemail");
                self.teardown(sid, None, now);
            }
        }
    }

    fn on_recorded(&mut self, path: &Path, samples: usize) {
        if samples == 0 {
            // Nothing said: no message.
            let _ = std::fs::remove_file(path);
            return;
        }
        let (Some(mailbox), Some(name), Some(stamp)) = (
            path.parent().and_then(Path::file_name).and_then(|m| m.to_str()),
            path.file_name().and_then(|n| n.to_str()),
            path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()),
        ) else {
            return;
        };
        let entry = VmEntry {
            unix_ms: stamp,
            duration_ms: samples as u64 * 1000 / u64::from(SAMPLE_RATE),
            filename: name.to_string(),
        };
        match append_index(&self.cfg.vm_dir, mailbox, &entry) {
            Ok(()) => {
                self.stats.recordings.fetch_add(1, Ordering::Relaxed);
                info!(%mailbox, duration_ms = entry.duration_ms, "voicemail stored");
            }
            Err(e) => warn!(error = %e, "cannot update mailbox index"),
        }
    }

    fn apply_ivr(&mut self, sid: u64, act: IvrAction, now: UnixMs) {
        let Some(s) = self.sessions.get(&sid) else {
            return;
        };
        match act {
            IvrAction::Play(p) => {
                let data = match p {
                    Prompt::Greeting => Arc::clone(&self.prompts.ivr_greeting),
                    Prompt::Invalid => Arc::clone(&self.prompts.ivr_invalid),
                };
                s.a.media.set_source(Source::Samples { data, looped: false });
            }
            IvrAction::Hangup => {
                info!("IVR attempts exhausted");
                self.teardown(sid, None, now);
            }
            IvrAction::Transfer(ext) => self.ivr_transfer(sid, ext, now),
        }
    }

    /// Calls `ext` through the proxy on the caller's behalf and bridges the
    /// two legs once it answers.
    fn ivr_transfer(&mut self, sid: u64, ext: String, now: UnixMs) {
        let Some(proxy) = self.cfg.proxy_addr else {
            warn!("IVR transfer without a proxy address");
            return self.teardown(sid, None, now);
        };
        let c_media = match self.open_media(Side::Internal) {
            Ok(m) => m,
            Err(e) => {
                warn!(error = %e, "no media port for transfer");
                return self.teardown(sid, None, now);
            }
        };
        let Some(mut s) = self.sessions.remove(&sid) else {
            return;
        };
        let from = self
            .internal
            .call(s.a.r.call)
            .and_then(|c| c.invite.from_hdr())
            .map(|f| NameAddr {
                params: Default::default(),
                ..f
            })
            .unwrap_or_else(|| NameAddr::new(SipUri::new(None, self.cfg.domain.clone(), None)));
        let target = SipUri::new(Some(&ext), self.cfg.domain.clone(), None);
        let offer = self.sdp_for(&c_media);
        let call = self
            .internal
            .invite(target, from, Some(offer), &[], Endpoint::udp(proxy), now);
        info!(%ext, "IVR transferring caller");
        s.a.media.set_source(Source::Silence);
        s.kind = Kind::Bridge {
            b: Leg {
                r: LegRef {
                    side: Side::Internal,
                    call,
                },
                media: c_media,
            },
            state: BridgeState::Setup,
        };
        self.insert_with_id(sid, s);
    }

    fn insert_with_id(&mut self, sid: u64, s: Session) {
        for r in s.legs() {
            self.by_leg.insert(r, sid);
        }
        for m in s.media_ids() {
            self.by_media.insert(m, sid);
        }
        self.sessions.insert(sid, s);
    }
}

fn leg_of(s: &Session, r: LegRef) -> Option<&Leg> {
    if s.a.r == r {
        return Some(&s.a);
    }
    match &s.kind {
        Kind::Bridge { b, .. } if b.r == r => Some(b),
        _ => None,
    }
}

enum Control {
    Stop,
}

/// A B2BUA running on its own thread with two SIP sockets.
pub struct B2buaNode {
    internal: SocketAddr,
    external: SocketAddr,
    stats: Arc<B2buaStats>,
    control: Sender<Control>,
    thread: Option<JoinHandle<()>>,
}

impl B2buaNode {
    pub fn start(
        cfg: B2buaConfig,
        clock: Arc<dyn Clock>,
        filter: Option<Arc<dyn PacketFilter>>,
        seed: Option<u64>,
    ) -> Result<Self, NodeError> {
        cfg.validate()?;
        let (int_t, int_rx) = SipTransport::bind(cfg.internal_bind, cfg.tcp, filter.clone())?;
        let (ext_t, ext_rx) = SipTransport::bind(cfg.external_bind, false, filter.clone())?;
        let internal = int_t.local_addr();
        let external = ext_t.local_addr();
        let ids = Arc::new(seed.map(IdGen::seeded).unwrap_or_else(IdGen::from_entropy));
        let (media_tx, media_rx) = unbounded();
        let name = cfg.name.clone();
        let core = B2buaCore::new(cfg, internal, external, ids, media_tx, filter)?;
        let stats = core.stats();
        let (tx, rx) = unbounded();
        let io = Io {
            internal: int_t,
            external: ext_t,
            name: name.clone(),
        };
        let thread = thread::Builder::new()
            .name(format!("b2bua-{name}"))
            .spawn(move || run(core, io, int_rx, ext_rx, media_rx, rx, clock))?;
        info!(%name, %internal, %external, "b2bua listening");
        Ok(Self {
            internal,
            external,
            stats,
            control: tx,
            thread: Some(thread),
        })
    }

    pub fn internal_addr(&self) -> SocketAddr {
        self.internal
    }

    pub fn external_addr(&self) -> SocketAddr {
        self.external
    }

    pub fn stats(&self) -> &Arc<B2buaStats> {
        &self.stats
    }

    pub fn stop(&mut self) {
        let _ = self.control.send(Control::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the node stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for B2buaNode {
    fn drop(&mut self) {
        self.stop();
    }
}

struct Io {
    internal: Arc<SipTransport>,
    external: Arc<SipTransport>,
    name: String,
}

impl Io {
    fn deliver(&self, core: &mut B2buaCore, side: Side, m: Inbound, now: UnixMs) {
        trace_sip(&self.name, false, m.source.addr, &m.data);
        match parse_message(&m.data) {
            Ok(msg) => core.on_message(side, msg, m.source, now),
            Err(e) => debug!(error = %e, "dropping unparseable message"),
        }
    }

    fn flush(&self, core: &mut B2buaCore) {
        for (side, msg, to) in core.take_output() {
            let t = match side {
                Side::Internal => &self.internal,
                Side::External => &self.external,
            };
            let bytes = msg.to_bytes();
            trace_sip(&self.name, true, to.addr, &bytes);
            if let Err(e) = t.send(&to, &bytes) {
                debug!(error = %e, to = %to.addr, "send failed");
            }
        }
    }
}

fn run(
    mut core: B2buaCore,
    io: Io,
    int_rx: Receiver<Inbound>,
    ext_rx: Receiver<Inbound>,
    media_rx: Receiver<MediaEvent>,
    control: Receiver<Control>,
    clock: Arc<dyn Clock>,
) {
    loop {
        let now = clock.now_ms();
        let wait = core.next_wakeup().map_or(20, |t| t.saturating_sub(now)).clamp(1, 20);
        select! {
            recv(int_rx) -> m => match m {
                Ok(m) => io.deliver(&mut core, Side::Internal, m, clock.now_ms()),
                Err(_) => break,
            },
            recv(ext_rx) -> m => match m {
                Ok(m) => io.deliver(&mut core, Side::External, m, clock.now_ms()),
                Err(_) => break,
            },
            recv(media_rx) -> ev => {
                if let Ok(ev) = ev {
                    core.on_media(ev, clock.now_ms());
                }
            },
            recv(control) -> _ => break,
            default(Duration::from_millis(wait)) => {},
        }
        core.on_tick(clock.now_ms());
        io.flush(&mut core);
    }
    // Flush whatever recordings the closing endpoints report.
    drop(core);
    io.internal.close();
    io.external.close();
}

/// Loads a B2BUA configuration file.
pub fn load_config(path: &Path) -> Result<B2buaConfig, crate::config::ConfigError> {
    B2buaConfig::from_ini(&std::fs::read_to_string(path)?, Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sip::Direction;

    #[test]
    fn prompts_default_to_tones() {
        let p = Prompts::load(&B2buaConfig::default()).unwrap();
        assert_eq!(p.moh.len(), 8000);
        assert!(crate::media::tone_energy(&p.moh, MOH_TONE_HZ) > -30.0);
        assert!(crate::media::tone_energy(&p.ivr_invalid, INVALID_TONE_HZ) > -30.0);
    }

    #[test]
    fn direction_of_hold_answer() {
        assert_eq!(Direction::SendOnly.answer(), Direction::RecvOnly);
        assert_eq!(Direction::Inactive.answer(), Direction::Inactive);
    }
}
