//! Simulated provider trunk: a UAS that challenges, rings, answers and
//! loops the caller's audio straight back.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{select, unbounded, Receiver, Sender};
use ipts_core::clock::{Clock, UnixMs};
use ipts_core::ids::IdGen;
use ipts_core::media::{MediaHandle, PortAllocator, Sink, Source};
use ipts_core::registrar::{AuthVerdict, LocationStore, Privilege, Registrar, RegistrarConfig, Subscriber};
use ipts_core::sip::{parse_message, SdpBody};
use ipts_core::transaction::TimerConfig;
use ipts_core::transport::{trace_sip, Endpoint, Inbound, PacketFilter, SipTransport};
use ipts_core::ua::{CallRef, Ladder, UaConfig, UaCore, UaEvent};
use tracing::debug;

#[derive(Clone)]
pub struct TrunkConfig {
    pub bind: SocketAddr,
    pub username: String,
    pub password: String,
    pub realm: String,
    /// Demand digest credentials on every new INVITE.
    pub challenge: bool,
    /// Final failure code instead of answering.
    pub reject: Option<u16>,
    /// Ringing time before the answer or rejection.
    pub answer_ms: u64,
    pub media_ports: (u16, u16),
    pub seed: Option<u64>,
}

impl TrunkConfig {
    pub fn new(bind: SocketAddr) -> Self {
        Self {
            bind,
            username: "trunkuser".into(),
            password: "trunkpw".into(),
            realm: "provider".into(),
            challenge: true,
            reject: None,
            answer_ms: 200,
            media_ports: (20000, 20999),
            seed: None,
        }
    }
}

/// Counters visible to assertions.
#[derive(Debug, Default)]
pub struct TrunkStats {
    pub invites: AtomicUsize,
    pub challenges: AtomicUsize,
    pub answered: AtomicUsize,
    pub active: AtomicUsize,
    pub ended: AtomicUsize,
}

pub struct TrunkSim {
    addr: SocketAddr,
    stats: Arc<TrunkStats>,
    ladder: Arc<Ladder>,
    stop: Sender<()>,
    thread: Option<JoinHandle<()>>,
}

impl TrunkSim {
    pub fn start(
        cfg: TrunkConfig,
        clock: Arc<dyn Clock>,
        filter: Option<Arc<dyn PacketFilter>>,
    ) -> std::io::Result<Self> {
        let (transport, inbound) = SipTransport::bind(cfg.bind, false, filter.clone())?;
        let addr = transport.local_addr();
        let ids = Arc::new(cfg.seed.map(IdGen::seeded).unwrap_or_else(IdGen::from_entropy));
        let ladder = Arc::new(Ladder::default());
        let ua = UaCore::new(
            UaConfig {
                local: Endpoint::udp(addr),
                user: Some(cfg.username.clone()),
                credentials: None,
            },
            Arc::clone(&ids),
            TimerConfig::default(),
        )
        .with_ladder(Arc::clone(&ladder));
        let account = Subscriber::new(&cfg.username, "trunk", &cfg.realm, &cfg.password, Privilege::External);
        let auth = Registrar::new(
            RegistrarConfig {
                realm: cfg.realm.clone(),
                ..RegistrarConfig::default()
            },
            LocationStore::new(vec![account.clone()]),
            Arc::clone(&ids),
        );
        let stats = Arc::new(TrunkStats::default());
        let (stop, stop_rx) = unbounded();
        let inner = Inner {
            ports: PortAllocator::new(addr.ip(), cfg.media_ports.0, cfg.media_ports.1),
            cfg,
            ua,
            auth,
            account,
            transport,
            filter,
            stats: Arc::clone(&stats),
            pending: HashMap::new(),
            media: HashMap::new(),
            session: 1,
        };
        let thread = thread::Builder::new()
            .name(format!("trunk-{}", addr.port()))
            .spawn(move || inner.run(inbound, stop_rx, clock))?;
        Ok(Self {
            addr,
            stats,
            ladder,
            stop,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &Arc<TrunkStats> {
        &self.stats
    }

    pub fn ladder(&self) -> &Arc<Ladder> {
        &self.ladder
    }

    pub fn stop(&mut self) {
        let _ = self.stop.send(());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TrunkSim {
    fn drop(&mut self) {
        self.stop();
    }
}

struct Inner {
    cfg: TrunkConfig,
    ua: UaCore,
    auth: Registrar,
    account: Subscriber,
    transport: Arc<SipTransport>,
    filter: Option<Arc<dyn PacketFilter>>,
    stats: Arc<TrunkStats>,
    ports: PortAllocator,
    /// Calls ringing, with the time they get their final answer.
    pending: HashMap<CallRef, UnixMs>,
    media: HashMap<CallRef, MediaHandle>,
    session: u64,
}

impl Inner {
    fn run(mut self, inbound: Receiver<Inbound>, stop: Receiver<()>, clock: Arc<dyn Clock>) {
        loop {
            select! {
                recv(inbound) -> m => match m {
                    Ok(m) => self.on_inbound(m, clock.now_ms()),
                    Err(_) => break,
                },
                recv(stop) -> _ => break,
                default(Duration::from_millis(10)) => {},
            }
            let now = clock.now_ms();
            let ev = self.ua.on_tick(now);
            self.on_events(ev, now);
            self.answer_due(now);
            self.flush();
        }
        self.transport.close();
    }

    fn on_inbound(&mut self, m: Inbound, now: UnixMs) {
        trace_sip("trunk", false, m.source.addr, &m.data);
        match parse_message(&m.data) {
            Ok(msg) => {
                let ev = self.ua.on_message(msg, m.source, now);
                self.on_events(ev, now);
            }
            Err(e) => debug!(error = %e, "trunk: unparseable message"),
        }
    }

    fn flush(&mut self) {
        for (msg, to) in self.ua.take_output() {
            let bytes = msg.to_bytes();
            trace_sip("trunk", true, to.addr, &bytes);
            if let Err(e) = self.transport.send(&to, &bytes) {
                debug!(error = %e, "trunk send failed");
            }
        }
    }

    fn on_events(&mut self, events: Vec<UaEvent>, now: UnixMs) {
        for e in events {
            match e {
                UaEvent::Incoming { call } => self.on_invite(call, now),
                UaEvent::Cancelled { call } | UaEvent::Terminated { call } => self.end(call),
                UaEvent::Reinvite { call, .. } => {
                    let sdp = self.ua.call(call).and_then(|c| c.local_sdp.clone());
                    self.ua.answer_reinvite(call, sdp, now);
                }
                _ => {}
            }
        }
    }

    fn on_invite(&mut self, call: CallRef, now: UnixMs) {
        self.stats.invites.fetch_add(1, Ordering::Relaxed);
        if self.cfg.challenge {
            let invite = self.ua.call(call).expect("new call").invite.clone();
            let verdict = self
                .auth
                .authenticate(&invite, "Proxy-Authorization", &self.account, now);
            if verdict != AuthVerdict::Ok {
                self.stats.challenges.fetch_add(1, Ordering::Relaxed);
                let ch = self.auth.challenge(now, verdict == AuthVerdict::StaleNonce);
                self.ua
                    .reject(call, 407, &[("Proxy-Authenticate".into(), ch.to_string())], now);
                self.ua.remove(call);
                return;
            }
        }
        self.ua.ring(call, 180, now);
        self.pending.insert(call, now + self.cfg.answer_ms);
    }

    fn answer_due(&mut self, now: UnixMs) {
        let due: Vec<CallRef> = self
            .pending
            .iter()
            .filter(|(_, t)| **t <= now)
            .map(|(c, _)| *c)
            .collect();
        for call in due {
            self.pending.remove(&call);
            if let Some(code) = self.cfg.reject {
                self.ua.reject(call, code, &[], now);
                continue;
            }
            match self.open_echo(call) {
                Ok(sdp) => {
                    self.ua.answer(call, Some(sdp), now);
                    self.stats.answered.fetch_add(1, Ordering::Relaxed);
                    self.stats.active.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    debug!(error = %e, "trunk: no media port");
                    self.ua.reject(call, 503, &[], now);
                }
            }
        }
    }

    /// Media endpoint that sends back whatever it receives.
    fn open_echo(&mut self, call: CallRef) -> Result<SdpBody, String> {
        let remote = self
            .ua
            .call(call)
            .and_then(|c| c.remote_sdp.as_ref())
            .map(SdpBody::media_addr);
        let sock = self.ports.allocate().map_err(|e| e.to_string())?;
        let (events, _) = unbounded();
        let h = MediaHandle::spawn(sock, events, self.filter.clone()).map_err(|e| e.to_string())?;
        h.set_remote(remote);
        h.set_sink(Sink::Relay(h.relay_sender()));
        h.set_source(Source::Relay);
        let local = h.local_addr();
        self.session += 1;
        self.media.insert(call, h);
        Ok(SdpBody::audio(local.ip(), local.port(), self.session))
    }

    fn end(&mut self, call: CallRef) {
        self.pending.remove(&call);
        if self.media.remove(&call).is_some() {
            self.stats.active.fetch_sub(1, Ordering::Relaxed);
            self.stats.ended.fetch_add(1, Ordering::Relaxed);
        }
        self.ua.remove(call);
    }
}
