//! One thread per RTP socket. What the endpoint sends (its [`Source`]) and
//! what it does with received audio (its [`Sink`]) can be swapped at any
//! time through [`MediaHandle`], which is how hold, MOH, voicemail and
//! conference features re-plumb a call without new sockets.

use std::collections::{BTreeSet, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use tracing::{debug, trace};

use super::codec::{decode_samples, encode_pcmu};
use super::dtmf::{press, DtmfDetector, DtmfEvent};
use super::mixer::Room;
use super::rtp::RtpPacket;
use super::wav::WavRecorder;
use super::{AudioFrame, ToneGen, FRAME_MS, FRAME_SAMPLES};
use crate::sip::{PCMU, TELEPHONE_EVENT};
use crate::transport::{filtered_send, PacketFilter};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub enum Source {
    /// Send nothing.
    Off,
    Silence,
    Tone {
        hz: f64,
        amplitude: i16,
    },
    /// Play samples once (then fall silent and report) or forever.
    Samples {
        data: Arc<Vec<i16>>,
        looped: bool,
    },
    /// N-1 mix of a conference room.
    Mixer(Arc<Mutex<Room>>),
    /// Whatever the paired endpoint receives.
    Relay,
}

pub enum Sink {
    Discard,
    Capture(Arc<Capture>),
    Record(WavRecorder),
    Mixer(Arc<Mutex<Room>>),
    /// Hand packets to another endpoint, which sends them with its own
    /// SSRC and sequence numbers.
    Relay(Sender<RtpPacket>),
}

pub enum MediaCommand {
    SetRemote(Option<SocketAddr>),
    SetSource(Source),
    SetSink(Sink),
    SendDtmf(char),
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MediaEvent {
    Dtmf {
        id: u64,
        event: DtmfEvent,
    },
    /// A play-once source ran out.
    SourceFinished {
        id: u64,
    },
    /// A recording was closed, either replaced, stopped or capped.
    Recorded {
        id: u64,
        path: PathBuf,
        samples: usize,
        capped: bool,
    },
}

/// Received audio kept for inspection.
#[derive(Debug, Default)]
pub struct Capture {
    inner: Mutex<CaptureInner>,
}

#[derive(Debug, Default)]
struct CaptureInner {
    frames: VecDeque<(Instant, Vec<i16>)>,
    packets: u64,
    sources: BTreeSet<SocketAddr>,
    dtmf: Vec<DtmfEvent>,
}

/// About 30 s of audio.
const CAPTURE_FRAMES: usize = 1500;

impl Capture {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn push(&self, from: SocketAddr, samples: Vec<i16>, at: Instant) {
        let mut c = self.inner.lock().unwrap();
        c.packets += 1;
        c.sources.insert(from);
        c.frames.push_back((at, samples));
        if c.frames.len() > CAPTURE_FRAMES {
            c.frames.pop_front();
        }
    }

    fn push_dtmf(&self, ev: DtmfEvent) {
        self.inner.lock().unwrap().dtmf.push(ev);
    }

    /// Samples received within the last `window`.
    pub fn recent(&self, window: Duration) -> Vec<i16> {
        let now = Instant::now();
        let c = self.inner.lock().unwrap();
        c.frames
            .iter()
            .filter(|(t, _)| now.saturating_duration_since(*t) <= window)
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }

    /// Audio packets received since `since`.
    pub fn packets_since(&self, since: Instant) -> usize {
        let c = self.inner.lock().unwrap();
        c.frames.iter().filter(|(t, _)| *t >= since).count()
    }

    pub fn total_packets(&self) -> u64 {
        self.inner.lock().unwrap().packets
    }

    pub fn sources(&self) -> Vec<SocketAddr> {
        self.inner.lock().unwrap().sources.iter().copied().collect()
    }

    pub fn dtmf(&self) -> Vec<DtmfEvent> {
        self.inner.lock().unwrap().dtmf.clone()
    }

    pub fn clear(&self) {
        let mut c = self.inner.lock().unwrap();
        c.frames.clear();
        c.sources.clear();
    }
}

pub struct MediaHandle {
    id: u64,
    local: SocketAddr,
    cmd: Sender<MediaCommand>,
    relay_in: Sender<RtpPacket>,
    thread: Option<JoinHandle<()>>,
}

impl MediaHandle {
    /// Starts the endpoint thread on `socket`. Events go to `events`.
    pub fn spawn(
        socket: UdpSocket,
        events: Sender<MediaEvent>,
        filter: Option<Arc<dyn PacketFilter>>,
    ) -> std::io::Result<Self> {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        let local = socket.local_addr()?;
        socket.set_read_timeout(Some(Duration::from_millis(2)))?;
        let (cmd, cmd_rx) = unbounded();
        let (relay_in, relay_rx) = unbounded();
        let ep = Endpoint {
            id,
            socket: Arc::new(socket),
            filter,
            events,
            cmd: cmd_rx,
            relay: relay_rx,
            remote: None,
            source: Source::Off,
            sink: Sink::Discard,
            tx: TxState::new(),
            detector: DtmfDetector::default(),
            tone: None,
            cursor: 0,
            dtmf_queue: VecDeque::new(),
        };
        let thread = thread::Builder::new()
            .name(format!("rtp-{}", local.port()))
            .spawn(move || ep.run())?;
        Ok(Self {
            id,
            local,
            cmd,
            relay_in,
            thread: Some(thread),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn send(&self, c: MediaCommand) {
        let _ = self.cmd.send(c);
    }

    pub fn set_remote(&self, addr: Option<SocketAddr>) {
        self.send(MediaCommand::SetRemote(addr));
    }

    pub fn set_source(&self, s: Source) {
        self.send(MediaCommand::SetSource(s));
    }

    pub fn set_sink(&self, s: Sink) {
        self.send(MediaCommand::SetSink(s));
    }

    pub fn dtmf(&self, digit: char) {
        self.send(MediaCommand::SendDtmf(digit));
    }

    /// Feeds this endpoint's relay input.
    pub fn relay_sender(&self) -> Sender<RtpPacket> {
        self.relay_in.clone()
    }

    /// Cross-connects two endpoints so each forwards what it hears to the other.
    pub fn bridge(a: &MediaHandle, b: &MediaHandle) {
        a.set_sink(Sink::Relay(b.relay_sender()));
        b.set_sink(Sink::Relay(a.relay_sender()));
        a.set_source(Source::Relay);
        b.set_source(Source::Relay);
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.cmd.send(MediaCommand::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MediaHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Outbound header state; sequence numbers advance by exactly one per packet.
struct TxState {
    ssrc: u32,
    seq: u16,
    timestamp: u32,
    marker: bool,
    relay_offset: Option<u32>,
}

impl TxState {
    fn new() -> Self {
        let ssrc = (NEXT_ID.fetch_add(1, Ordering::Relaxed) as u32).wrapping_mul(0x9E37_79B9) ^ std::process::id();
        Self {
            ssrc,
            seq: (ssrc >> 16) as u16,
            timestamp: ssrc.rotate_left(7),
            marker: true,
            relay_offset: None,
        }
    }

    fn next(&mut self, pt: u8, timestamp: u32, payload: Vec<u8>) -> RtpPacket {
        let p = RtpPacket {
            marker: std::mem::take(&mut self.marker),
            payload_type: pt,
            seq: self.seq,
            timestamp,
            ssrc: self.ssrc,
            payload,
        };
        self.seq = self.seq.wrapping_add(1);
        p
    }
}

struct Endpoint {
    id: u64,
    socket: Arc<UdpSocket>,
    filter: Option<Arc<dyn PacketFilter>>,
    events: Sender<MediaEvent>,
    cmd: Receiver<MediaCommand>,
    relay: Receiver<RtpPacket>,
    remote: Option<SocketAddr>,
    source: Source,
    sink: Sink,
    tx: TxState,
    detector: DtmfDetector,
    tone: Option<ToneGen>,
    cursor: usize,
    dtmf_queue: VecDeque<(u32, crate::media::TelephoneEvent)>,
}

impl Endpoint {
    fn run(mut self) {
        let tick = Duration::from_millis(FRAME_MS);
        let mut next_tick = Instant::now() + tick;
        let mut buf = [0u8; 2048];
        loop {
            while let Ok(c) = self.cmd.try_recv() {
                if !self.command(c) {
                    self.close_sink();
                    if let Source::Mixer(room) = &self.source {
                        room.lock().unwrap().leave(self.id);
                    }
                    return;
                }
            }
            while let Ok(p) = self.relay.try_recv() {
                if matches!(self.source, Source::Relay) {
                    self.forward(p);
                }
            }
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) => self.receive(&buf[..n], from),
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => {
                    debug!(error = %e, "media socket error");
                    thread::sleep(Duration::from_millis(2));
                }
            }
            let now = Instant::now();
            if now >= next_tick {
                self.on_tick(now);
                next_tick += tick;
                if now > next_tick + tick * 5 {
                    next_tick = now + tick;
                }
            }
        }
    }

    fn command(&mut self, c: MediaCommand) -> bool {
        match c {
            MediaCommand::SetRemote(r) => self.remote = r,
            MediaCommand::SetSource(s) => {
                self.tone = match &s {
                    Source::Tone { hz, amplitude } => Some(ToneGen::new(*hz, *amplitude)),
                    _ => None,
                };
                self.cursor = 0;
                self.tx.marker = true;
                self.tx.relay_offset = None;
                self.source = s;
            }
            MediaCommand::SetSink(s) => {
                self.close_sink();
                self.sink = s;
            }
            MediaCommand::SendDtmf(d) => {
                let ts = self.tx.timestamp;
                if let Some(events) = press(d, 100) {
                    self.dtmf_queue.extend(events.into_iter().map(|e| (ts, e)));
                }
            }
            MediaCommand::Stop => return false,
        }
        true
    }

    fn close_sink(&mut self) {
        match std::mem::replace(&mut self.sink, Sink::Discard) {
            Sink::Record(rec) => self.finish_recording(rec, false),
            Sink::Mixer(room) => room.lock().unwrap().leave(self.id),
            _ => {}
        }
    }

    fn finish_recording(&self, rec: WavRecorder, capped: bool) {
        let path = rec.path().to_path_buf();
        let samples = rec.finish().unwrap_or(0);
        let _ = self.events.send(MediaEvent::Recorded {
            id: self.id,
            path,
            samples,
            capped,
        });
    }

    fn send_packet(&self, p: &RtpPacket) {
        if let Some(to) = self.remote {
            let _ = filtered_send(&self.socket, self.filter.as_ref(), to, &p.to_bytes());
        }
    }

    fn forward(&mut self, p: RtpPacket) {
        let offset = *self
            .tx
            .relay_offset
            .get_or_insert(self.tx.timestamp.wrapping_sub(p.timestamp));
        let ts = p.timestamp.wrapping_add(offset);
        self.tx.timestamp = ts;
        let marker = p.marker;
        let mut out = self.tx.next(p.payload_type, ts, p.payload);
        out.marker |= marker;
        self.send_packet(&out);
    }

    fn receive(&mut self, data: &[u8], from: SocketAddr) {
        let Ok(p) = RtpPacket::parse(data) else {
            return;
        };
        if p.payload_type == TELEPHONE_EVENT {
            if let Some(ev) = self.detector.push(&p) {
                trace!(id = self.id, digit = %ev.digit, "dtmf");
                if let Sink::Capture(c) = &self.sink {
                    c.push_dtmf(ev);
                }
                let _ = self.events.send(MediaEvent::Dtmf { id: self.id, event: ev });
            }
            if let Sink::Relay(peer) = &self.sink {
                let _ = peer.send(p);
            }
            return;
        }
        if p.payload_type != PCMU {
            return;
        }
        let now = Instant::now();
        match &mut self.sink {
            Sink::Discard => {}
            Sink::Capture(c) => c.push(from, decode_samples(&p.payload), now),
            Sink::Relay(peer) => {
                let _ = peer.send(p);
            }
            Sink::Mixer(room) => {
                if let Ok(frame) = AudioFrame::from_slice(&decode_samples(&p.payload)) {
                    let mut r = room.lock().unwrap();
                    r.join(self.id);
                    r.contribute(self.id, frame, now);
                }
            }
            Sink::Record(rec) => {
                rec.push(&decode_samples(&p.payload));
                if rec.is_full() {
                    if let Sink::Record(rec) = std::mem::replace(&mut self.sink, Sink::Discard) {
                        self.finish_recording(rec, true);
                    }
                }
            }
        }
    }

    fn on_tick(&mut self, now: Instant) {
        if let Some((ts, ev)) = self.dtmf_queue.pop_front() {
            let p = self.tx.next(TELEPHONE_EVENT, ts, ev.to_bytes().to_vec());
            self.send_packet(&p);
            if ev.end {
                // Remaining end retransmissions go out back to back.
                while let Some((ts, ev)) = self.dtmf_queue.front().copied() {
                    if !ev.end {
                        break;
                    }
                    self.dtmf_queue.pop_front();
                    let p = self.tx.next(TELEPHONE_EVENT, ts, ev.to_bytes().to_vec());
                    self.send_packet(&p);
                }
            }
        }
        let frame = match &mut self.source {
            Source::Off | Source::Relay => return,
            Source::Silence => AudioFrame::silence(),
            Source::Tone { .. } => {
                let mut s = [0i16; FRAME_SAMPLES];
                if let Some(t) = self.tone.as_mut() {
                    t.fill(&mut s);
                }
                AudioFrame::from_slice(&s).expect("fixed length")
            }
            Source::Samples { data, looped } => {
                if data.is_empty() {
                    AudioFrame::silence()
                } else {
                    let mut s = [0i16; FRAME_SAMPLES];
                    let mut finished = false;
                    for slot in s.iter_mut() {
                        if self.cursor >= data.len() {
                            if *looped {
                                self.cursor = 0;
                            } else {
                                finished = true;
                                break;
                            }
                        }
                        *slot = data[self.cursor];
                        self.cursor += 1;
                    }
                    if finished || (!*looped && self.cursor >= data.len()) {
                        self.source = Source::Silence;
                        let _ = self.events.send(MediaEvent::SourceFinished { id: self.id });
                    }
                    AudioFrame::from_slice(&s).expect("fixed length")
                }
            }
            Source::Mixer(room) => {
                let mut r = room.lock().unwrap();
                r.join(self.id);
                r.mix_for(self.id, now)
            }
        };
        self.tx.timestamp = self.tx.timestamp.wrapping_add(FRAME_SAMPLES as u32);
        let ts = self.tx.timestamp;
        let p = self.tx.next(PCMU, ts, encode_pcmu(&frame));
        self.send_packet(&p);
    }
}
