//! Client and server transaction state machines.
//!
//! The layer is sans-IO: callers feed it received messages and the current
//! time and get back [`TxEvent`]s (messages to send, messages for the
//! transaction user, timeouts). One instance is owned by a single event
//! loop; nothing in here is shared.
//!
//! Requests are never turned into server transactions implicitly. A
//! transaction user that wants stateful handling calls
//! [`TransactionLayer::create_server_tx`]; anything else stays on the
//! stateless path and leaves no table entry behind.

use std::collections::HashMap;
use std::time::Duration;

use thiserror::Error;

use crate::clock::UnixMs;
use crate::sip::{build_response, Message, Method, Request, Response, SipHeaders, StatusCode, Via};
use crate::transport::{Endpoint, Proto};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimerConfig {
    pub t1: Duration,
    pub retransmit_cap: Duration,
    pub tx_lifetime: Duration,
}

impl Default for TimerConfig {
    fn default() -> Self {
        Self {
            t1: Duration::from_millis(500),
            retransmit_cap: Duration::from_secs(4),
            tx_lifetime: Duration::from_secs(32),
        }
    }
}

impl TimerConfig {
    /// Scales every timer from a different T1, keeping the usual 1:8:64 ratios.
    pub fn from_t1(t1: Duration) -> Self {
        Self {
            t1,
            retransmit_cap: t1 * 8,
            tx_lifetime: t1 * 64,
        }
    }

    fn t1_ms(&self) -> u64 {
        self.t1.as_millis().max(1) as u64
    }

    pub fn cap_ms(&self) -> u64 {
        self.retransmit_cap.as_millis() as u64
    }

    pub fn life_ms(&self) -> u64 {
        self.tx_lifetime.as_millis() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransactionKey {
    pub branch: String,
    pub method: Method,
}

impl TransactionKey {
    pub fn new(branch: impl Into<String>, method: Method) -> Self {
        Self {
            branch: branch.into(),
            method,
        }
    }

    /// Key a request would have in the server table. ACK and CANCEL map onto
    /// the INVITE they refer to.
    pub fn for_request(req: &Request) -> Option<Self> {
        let branch = req.branch()?;
        let method = match req.method {
            Method::Ack | Method::Cancel => Method::Invite,
            ref m => m.clone(),
        };
        Some(Self { branch, method })
    }

    pub fn for_response(resp: &Response) -> Option<Self> {
        Some(Self {
            branch: resp.branch()?,
            method: resp.cseq()?.method,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TxState {
    Calling,
    Trying,
    Proceeding,
    Completed,
    Confirmed,
    Terminated,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TxError {
    #[error("transaction {0:?} already exists")]
    DuplicateTransaction(TransactionKey),
    #[error("no such transaction {0:?}")]
    NoSuchTransaction(TransactionKey),
    #[error("request has no Via branch")]
    MissingBranch,
    #[error("{0} requests never create a transaction")]
    NotTransactional(Method),
}

#[derive(Debug, Clone)]
pub enum TxEvent {
    Send {
        msg: Message,
        to: Endpoint,
    },
    /// A request that matched no server transaction.
    Request {
        req: Request,
        source: Endpoint,
    },
    /// A response matched to one of our client transactions.
    Response {
        resp: Response,
        key: TransactionKey,
    },
    /// A response that matched nothing (2xx retransmissions, forwarded traffic).
    StrayResponse {
        resp: Response,
        source: Endpoint,
    },
    /// A client transaction ran out of time; `response` is a local 408.
    Timeout {
        key: TransactionKey,
        response: Response,
    },
}

#[derive(Debug, Clone)]
struct Retransmit {
    next: UnixMs,
    interval: u64,
}

#[derive(Debug, Clone)]
pub struct ClientTransaction {
    pub key: TransactionKey,
    pub state: TxState,
    pub request: Request,
    pub dest: Endpoint,
    pub last_response: Option<Response>,
    created: UnixMs,
    retransmit: Option<Retransmit>,
    ends_at: Option<UnixMs>,
    cancel_pending: bool,
}

#[derive(Debug, Clone)]
pub struct ServerTransaction {
    pub key: TransactionKey,
    pub state: TxState,
    pub request: Request,
    pub source: Endpoint,
    pub last_response: Option<Response>,
    created: UnixMs,
    retransmit: Option<Retransmit>,
    ends_at: Option<UnixMs>,
}

/// A 2xx to an INVITE whose server transaction has finished. Absorbs INVITE
/// retransmissions and, for user agents, retransmits the 2xx until the ACK.
#[derive(Debug, Clone)]
struct Accepted {
    call_id: String,
    cseq: u32,
    response: Response,
    dest: Endpoint,
    retransmit: Option<Retransmit>,
    acked: bool,
    until: UnixMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    /// End point: retransmits its own 2xx and swallows duplicate ACKs.
    UserAgent,
    /// Relay: 2xx and ACK are end-to-end and pass straight through.
    Proxy,
}

pub struct TransactionLayer {
    timers: TimerConfig,
    mode: LayerMode,
    clients: HashMap<TransactionKey, ClientTransaction>,
    servers: HashMap<TransactionKey, ServerTransaction>,
    accepted: HashMap<TransactionKey, Accepted>,
}

fn send(msg: impl Into<Message>, to: Endpoint) -> TxEvent {
    TxEvent::Send { msg: msg.into(), to }
}

/// Where a response goes when no server transaction remembers the source.
pub fn response_target(resp: &Response) -> Option<Endpoint> {
    let via: Via = resp.top_via()?;
    let addr = via.response_addr().parse().ok()?;
    Some(Endpoint {
        addr,
        proto: Proto::from_via(&via.transport),
    })
}

impl TransactionLayer {
    pub fn new(timers: TimerConfig, mode: LayerMode) -> Self {
        Self {
            timers,
            mode,
            clients: HashMap::new(),
            servers: HashMap::new(),
            accepted: HashMap::new(),
        }
    }

    pub fn timers(&self) -> &TimerConfig {
        &self.timers
    }

    /// Live client plus server transactions.
    pub fn len(&self) -> usize {
        self.clients.len() + self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn client_tx(&self, key: &TransactionKey) -> Option<&ClientTransaction> {
        self.clients.get(key)
    }

    pub fn server_tx(&self, key: &TransactionKey) -> Option<&ServerTransaction> {
        self.servers.get(key)
    }

    /// Finds the transaction a message belongs to. Responses match client
    /// transactions by (branch, CSeq method); requests match server
    /// transactions, CANCEL and non-2xx ACK resolving to their INVITE.
    pub fn match_message(&self, msg: &Message) -> Option<TransactionKey> {
        match msg {
            Message::Response(r) => TransactionKey::for_response(r).filter(|k| self.clients.contains_key(k)),
            Message::Request(r) => TransactionKey::for_request(r).filter(|k| self.servers.contains_key(k)),
        }
    }

    pub fn on_message(&mut self, msg: Message, source: Endpoint, now: UnixMs) -> Vec<TxEvent> {
        match msg {
            Message::Request(req) => self.on_request(req, source, now),
            Message::Response(resp) => self.on_response(resp, source, now),
        }
    }

    fn on_request(&mut self, req: Request, source: Endpoint, now: UnixMs) -> Vec<TxEvent> {
        let own_key = req.branch().map(|b| TransactionKey::new(b, req.method.clone()));
        if req.method == Method::Ack {
            return self.on_ack(req, source, now);
        }
        if let Some(key) = own_key {
            if let Some(tx) = self.servers.get(&key) {
                // Retransmission: replay whatever we last said.
                return tx
                    .last_response
                    .clone()
                    .map(|r| vec![send(r, tx.source)])
                    .unwrap_or_default();
            }
            if req.method == Method::Invite {
                if let Some(acc) = self.accepted.get(&key) {
                    return match self.mode {
                        LayerMode::UserAgent => vec![send(acc.response.clone(), acc.dest)],
                        LayerMode::Proxy => Vec::new(),
                    };
                }
            }
        }
        vec![TxEvent::Request { req, source }]
    }

    fn on_ack(&mut self, req: Request, source: Endpoint, now: UnixMs) -> Vec<TxEvent> {
        if let Some(key) = TransactionKey::for_request(&req) {
            if let Some(tx) = self.servers.get_mut(&key) {
                if tx.state == TxState::Completed {
                    tx.state = TxState::Confirmed;
                    tx.retransmit = None;
                    let linger = if tx.source.proto.is_reliable() {
                        0
                    } else {
                        self.timers.cap_ms()
                    };
                    tx.ends_at = Some(now + linger);
                }
                return Vec::new();
            }
        }
        if self.mode == LayerMode::UserAgent {
            let call_id = req.call_id().unwrap_or_default().to_string();
            let seq = req.cseq().map(|c| c.seq).unwrap_or_default();
            if let Some(acc) = self
                .accepted
                .values_mut()
                .find(|a| a.call_id == call_id && a.cseq == seq)
            {
                if acc.acked {
                    return Vec::new();
                }
                acc.acked = true;
                acc.retransmit = None;
            }
        }
        vec![TxEvent::Request { req, source }]
    }

    fn on_response(&mut self, resp: Response, source: Endpoint, now: UnixMs) -> Vec<TxEvent> {
        let Some(key) = TransactionKey::for_response(&resp) else {
            return vec![TxEvent::StrayResponse { resp, source }];
        };
        let timers = self.timers;
        let Some(tx) = self.clients.get_mut(&key) else {
            return vec![TxEvent::StrayResponse { resp, source }];
        };
        let reliable = tx.dest.proto.is_reliable();
        let code = resp.code();
        let mut out = Vec::new();
        let is_invite = key.method == Method::Invite;

        match tx.state {
            TxState::Calling | TxState::Trying | TxState::Proceeding => {
                tx.last_response = Some(resp.clone());
                if code < 200 {
                    tx.state = TxState::Proceeding;
                    tx.retransmit = if is_invite || reliable {
                        None
                    } else {
                        Some(Retransmit {
                            next: now + timers.cap_ms(),
                            interval: timers.cap_ms(),
                        })
                    };
                    if tx.cancel_pending {
                        tx.cancel_pending = false;
                        let cancel = cancel_for(&tx.request);
                        let dest = tx.dest;
                        out.push(TxEvent::Response { resp, key: key.clone() });
                        out.extend(
                            self.start_client(cancel, dest, now)
                                .map(|(_, ev)| ev)
                                .unwrap_or_default(),
                        );
                        return out;
                    }
                } else if is_invite && code < 300 {
                    self.clients.remove(&key);
                } else {
                    tx.state = TxState::Completed;
                    tx.retransmit = None;
                    tx.cancel_pending = false;
                    let linger = match (reliable, is_invite) {
                        (true, _) => 0,
                        (false, true) => timers.life_ms(),
                        (false, false) => timers.cap_ms(),
                    };
                    tx.ends_at = Some((now + linger).min(tx.created + timers.life_ms()));
                    if is_invite {
                        out.push(send(ack_for(&tx.request, &resp), tx.dest));
                    }
                }
                out.push(TxEvent::Response { resp, key });
            }
            TxState::Completed if is_invite && code >= 300 => {
                out.push(send(ack_for(&tx.request, &resp), tx.dest));
            }
            _ => {}
        }
        out
    }

    /// Starts a client transaction for `req` toward `dest` and sends it.
    pub fn create_client_tx(
        &mut self,
        req: Request,
        dest: Endpoint,
        now: UnixMs,
    ) -> Result<(TransactionKey, Vec<TxEvent>), TxError> {
        if req.method == Method::Ack {
            return Err(TxError::NotTransactional(Method::Ack));
        }
        self.start_client(req, dest, now)
    }

    fn start_client(
        &mut self,
        req: Request,
        dest: Endpoint,
        now: UnixMs,
    ) -> Result<(TransactionKey, Vec<TxEvent>), TxError> {
        let branch = req.branch().ok_or(TxError::MissingBranch)?;
        let key = TransactionKey::new(branch, req.method.clone());
        if self.clients.contains_key(&key) {
            return Err(TxError::DuplicateTransaction(key));
        }
        let retransmit = (!dest.proto.is_reliable()).then(|| Retransmit {
            next: now + self.timers.t1_ms(),
            interval: self.timers.t1_ms(),
        });
        let state = if req.method == Method::Invite {
            TxState::Calling
        } else {
            TxState::Trying
        };
        let events = vec![send(req.clone(), dest)];
        self.clients.insert(
            key.clone(),
            ClientTransaction {
                key: key.clone(),
                state,
                request: req,
                dest,
                last_response: None,
                created: now,
                retransmit,
                ends_at: None,
                cancel_pending: false,
            },
        );
        Ok((key, events))
    }

    /// Cancels a pending INVITE client transaction. If no provisional
    /// response has arrived yet the CANCEL is held until one does.
    pub fn cancel(&mut self, invite: &TransactionKey, now: UnixMs) -> Result<Vec<TxEvent>, TxError> {
        let tx = self
            .clients
            .get_mut(invite)
            .filter(|t| matches!(t.state, TxState::Calling | TxState::Proceeding))
            .ok_or_else(|| TxError::NoSuchTransaction(invite.clone()))?;
        if tx.state == TxState::Calling {
            tx.cancel_pending = true;
            return Ok(Vec::new());
        }
        let cancel = cancel_for(&tx.request);
        let dest = tx.dest;
        Ok(self.start_client(cancel, dest, now)?.1)
    }

    /// Opens a server transaction for a request the TU will answer itself.
    pub fn create_server_tx(
        &mut self,
        req: &Request,
        source: Endpoint,
        now: UnixMs,
    ) -> Result<TransactionKey, TxError> {
        if req.method == Method::Ack {
            return Err(TxError::NotTransactional(Method::Ack));
        }
        let branch = req.branch().ok_or(TxError::MissingBranch)?;
        let key = TransactionKey::new(branch, req.method.clone());
        if self.servers.contains_key(&key) {
            return Err(TxError::DuplicateTransaction(key));
        }
        let state = if req.method == Method::Invite {
            TxState::Proceeding
        } else {
            TxState::Trying
        };
        self.servers.insert(
            key.clone(),
            ServerTransaction {
                key: key.clone(),
                state,
                request: req.clone(),
                source,
                last_response: None,
                created: now,
                retransmit: None,
                ends_at: None,
            },
        );
        Ok(key)
    }

    /// Sends `resp` through the server transaction `key`. Without a live
    /// transaction the response goes out statelessly along its Via.
    pub fn respond(&mut self, key: &TransactionKey, resp: Response, now: UnixMs) -> Vec<TxEvent> {
        let timers = self.timers;
        let Some(tx) = self.servers.get_mut(key) else {
            return response_target(&resp)
                .map(|to| vec![send(resp, to)])
                .unwrap_or_default();
        };
        if tx.state >= TxState::Completed {
            return Vec::new();
        }
        let code = resp.code();
        let reliable = tx.source.proto.is_reliable();
        let dest = tx.source;
        let mut out = vec![send(resp.clone(), dest)];
        if code < 200 {
            tx.state = TxState::Proceeding;
            tx.last_response = Some(resp);
            return out;
        }
        let deadline = tx.created + timers.life_ms();
        if key.method == Method::Invite {
            if code < 300 {
                self.servers.remove(key);
                let retransmit = (self.mode == LayerMode::UserAgent && !reliable).then(|| Retransmit {
                    next: now + timers.t1_ms(),
                    interval: timers.t1_ms(),
                });
                self.accepted.insert(
                    key.clone(),
                    Accepted {
                        call_id: resp.call_id().unwrap_or_default().to_string(),
                        cseq: resp.cseq().map(|c| c.seq).unwrap_or_default(),
                        response: resp,
                        dest,
                        retransmit,
                        acked: false,
                        until: now + timers.life_ms(),
                    },
                );
                return out;
            }
            tx.state = TxState::Completed;
            tx.last_response = Some(resp);
            tx.retransmit = (!reliable).then(|| Retransmit {
                next: now + timers.t1_ms(),
                interval: timers.t1_ms(),
            });
            tx.ends_at = Some((now + timers.life_ms()).min(deadline));
        } else {
            tx.state = TxState::Completed;
            tx.last_response = Some(resp);
            let linger = if reliable { 0 } else { timers.life_ms() };
            tx.ends_at = Some((now + linger).min(deadline));
            if linger == 0 {
                self.servers.remove(key);
            }
        }
        out.truncate(1);
        out
    }

    /// Earliest time at which [`TransactionLayer::on_tick`] has work to do.
    pub fn next_wakeup(&self) -> Option<UnixMs> {
        let life = self.timers.life_ms();
        let c = self
            .clients
            .values()
            .flat_map(|t| [t.retransmit.as_ref().map(|r| r.next), t.ends_at, Some(t.created + life)]);
        let s = self
            .servers
            .values()
            .flat_map(|t| [t.retransmit.as_ref().map(|r| r.next), t.ends_at, Some(t.created + life)]);
        let a = self
            .accepted
            .values()
            .flat_map(|a| [a.retransmit.as_ref().map(|r| r.next), Some(a.until)]);
        c.chain(s).chain(a).flatten().min()
    }

    /// Fires every timer due at `now`.
    pub fn on_tick(&mut self, now: UnixMs) -> Vec<TxEvent> {
        let timers = self.timers;
        let cap = timers.cap_ms();
        let mut out = Vec::new();

        let mut dead = Vec::new();
        for (key, tx) in self.clients.iter_mut() {
            let deadline = tx.created + timers.life_ms();
            if tx.ends_at.is_some_and(|t| now >= t) {
                dead.push(key.clone());
                continue;
            }
            if now >= deadline {
                if tx.state < TxState::Completed {
                    let response = build_response(&tx.request, StatusCode::new(408), "local-timeout")
                        .unwrap_or_else(|_| Response::new(StatusCode::new(408)));
                    out.push(TxEvent::Timeout {
                        key: key.clone(),
                        response,
                    });
                }
                dead.push(key.clone());
                continue;
            }
            if let Some(r) = tx.retransmit.as_mut() {
                if now >= r.next {
                    out.push(send(tx.request.clone(), tx.dest));
                    r.interval = (r.interval * 2).min(cap);
                    r.next = now + r.interval;
                }
            }
        }
        for key in dead {
            self.clients.remove(&key);
        }

        let mut dead = Vec::new();
        for (key, tx) in self.servers.iter_mut() {
            let deadline = tx.created + timers.life_ms();
            if tx.ends_at.is_some_and(|t| now >= t) || now >= deadline {
                dead.push(key.clone());
                continue;
            }
            if let (Some(r), Some(resp)) = (tx.retransmit.as_mut(), tx.last_response.as_ref()) {
                if now >= r.next {
                    out.push(send(resp.clone(), tx.source));
                    r.interval = (r.interval * 2).min(cap);
                    r.next = now + r.interval;
                }
            }
        }
        for key in dead {
            self.servers.remove(&key);
        }

        self.accepted.retain(|_, acc| {
            if now >= acc.until {
                return false;
            }
            if let Some(r) = acc.retransmit.as_mut() {
                if now >= r.next {
                    out.push(send(acc.response.clone(), acc.dest));
                    r.interval = (r.interval * 2).min(cap);
                    r.next = now + r.interval;
                }
            }
            true
        });
        out
    }
}

/// Hop-by-hop ACK for a non-2xx final response: same branch and Request-URI
/// as the INVITE, To taken from the response.
pub fn ack_for(invite: &Request, resp: &Response) -> Request {
    let mut ack = Request::new(Method::Ack, invite.uri.clone());
    if let Some(via) = invite.headers.get("Via") {
        ack.headers.push("Via", via.split(',').next().unwrap_or(via).trim());
    }
    ack.headers.push("Max-Forwards", "70");
    for name in ["From"] {
        if let Some(v) = invite.headers.get(name) {
            ack.headers.push(name, v);
        }
    }
    if let Some(to) = resp.headers.get("To") {
        ack.headers.push("To", to);
    }
    if let Some(v) = invite.headers.get("Call-ID") {
        ack.headers.push("Call-ID", v);
    }
    let seq = invite.cseq().map(|c| c.seq).unwrap_or(1);
    ack.headers.push("CSeq", format!("{seq} ACK"));
    for route in invite.headers.get_all("Route") {
        ack.headers.push("Route", route);
    }
    ack
}

/// CANCEL for a pending INVITE: identical Request-URI, top Via, Call-ID,
/// From, To and CSeq number.
pub fn cancel_for(invite: &Request) -> Request {
    let mut cancel = Request::new(Method::Cancel, invite.uri.clone());
    if let Some(via) = invite.headers.get("Via") {
        cancel.headers.push("Via", via.split(',').next().unwrap_or(via).trim());
    }
    cancel.headers.push("Max-Forwards", "70");
    for name in ["From", "To", "Call-ID"] {
        if let Some(v) = invite.headers.get(name) {
            cancel.headers.push(name, v);
        }
    }
    let seq = invite.cseq().map(|c| c.seq).unwrap_or(1);
    cancel.headers.push("CSeq", format!("{seq} CANCEL"));
    for route in invite.headers.get_all("Route") {
        cancel.headers.push("Route", route);
    }
    cancel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sip::{parse_uri, Response};

    fn ep(port: u16) -> Endpoint {
        Endpoint::udp(format!("127.0.0.1:{port}").parse().unwrap())
    }

    fn request(method: Method, branch: &str) -> Request {
        let mut r = Request::new(method.clone(), parse_uri("sip:2002@pbx").unwrap());
        r.headers
            .push("Via", format!("SIP/2.0/UDP 127.0.0.1:5001;branch={branch}"));
        r.headers.push("Max-Forwards", "70");
        r.headers.push("From", "<sip:2001@pbx>;tag=f");
        r.headers.push("To", "<sip:2002@pbx>");
        r.headers.push("Call-ID", "call-1");
        r.headers.push("CSeq", format!("1 {method}"));
        r
    }

    fn reply(req: &Request, code: u16) -> Response {
        build_response(req, StatusCode::new(code), "tt").unwrap()
    }

    fn sends(events: &[TxEvent]) -> Vec<String> {
        events
            .iter()
            .filter_map(|e| match e {
                TxEvent::Send { msg, .. } => Some(msg.token()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn invite_client_retransmits_with_doubling() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::UserAgent);
        let (_, ev) = layer
            .create_client_tx(request(Method::Invite, "z9hG4bK-1"), ep(9), 0)
            .unwrap();
        assert_eq!(sends(&ev), ["INVITE"]);
        let mut fired = Vec::new();
        for t in (0..=7_600).step_by(50) {
            if !layer.on_tick(t).is_empty() {
                fired.push(t);
            }
        }
        // t1, then 2*t1 and 4*t1 later.
        assert_eq!(fired, [500, 1500, 3500, 7500]);
    }

    #[test]
    fn provisional_stops_invite_retransmission() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::UserAgent);
        let req = request(Method::Invite, "z9hG4bK-2");
        let (key, _) = layer.create_client_tx(req.clone(), ep(9), 0).unwrap();
        let ev = layer.on_message(reply(&req, 180).into(), ep(9), 100);
        assert!(matches!(&ev[0], TxEvent::Response { key: k, .. } if *k == key));
        assert_eq!(layer.client_tx(&key).unwrap().state, TxState::Proceeding);
        assert!(sends(&layer.on_tick(5_000)).is_empty());
    }

    #[test]
    fn unreachable_destination_times_out_with_local_408() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::UserAgent);
        let (key, _) = layer
            .create_client_tx(request(Method::Invite, "z9hG4bK-3"), ep(9), 1_000)
            .unwrap();
        let mut timeout = None;
        let mut t = 1_000;
        while timeout.is_none() && t < 40_000 {
            t += 10;
            for e in layer.on_tick(t) {
                if let TxEvent::Timeout { key: k, response } = e {
                    timeout = Some((t, k, response.code()));
                }
            }
        }
        assert_eq!(timeout, Some((33_000, key, 408)));
        assert!(layer.is_empty());
    }

    #[test]
    fn final_error_is_acked_hop_by_hop() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::Proxy);
        let req = request(Method::Invite, "z9hG4bK-4");
        let (key, _) = layer.create_client_tx(req.clone(), ep(9), 0).unwrap();
        let busy = reply(&req, 486);
        let ev = layer.on_message(busy.clone().into(), ep(9), 10);
        let ack = ev
            .iter()
            .find_map(|e| match e {
                TxEvent::Send {
                    msg: Message::Request(r),
                    ..
                } => Some(r.clone()),
                _ => None,
            })
            .unwrap();
        assert_eq!(ack.method, Method::Ack);
        assert_eq!(ack.branch().as_deref(), Some("z9hG4bK-4"));
        assert_eq!(ack.to_tag().as_deref(), Some("tt"));
        // Retransmitted 486 is re-acked but not delivered again.
        let ev = layer.on_message(busy.into(), ep(9), 20);
        assert_eq!(sends(&ev), ["ACK"]);
        assert!(!ev.iter().any(|e| matches!(e, TxEvent::Response { .. })));
        assert_eq!(layer.client_tx(&key).unwrap().state, TxState::Completed);
    }

    #[test]
    fn retransmitted_invite_absorbed_and_replayed() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::UserAgent);
        let req = request(Method::Invite, "z9hG4bK-5");
        let mut delivered = 0;
        for ev in layer.on_message(req.clone().into(), ep(1), 0) {
            if let TxEvent::Request { req, source } = ev {
                delivered += 1;
                let key = layer.create_server_tx(&req, source, 0).unwrap();
                layer.respond(&key, reply(&req, 180), 0);
            }
        }
        let ev = layer.on_message(req.clone().into(), ep(1), 500);
        assert_eq!(sends(&ev), ["180"]);
        assert_eq!(delivered, 1);
    }

    #[test]
    fn ack_for_2xx_is_dialog_level() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::UserAgent);
        let req = request(Method::Invite, "z9hG4bK-6");
        let key = layer.create_server_tx(&req, ep(1), 0).unwrap();
        layer.respond(&key, reply(&req, 200), 0);
        assert!(layer.server_tx(&key).is_none());
        // 2xx retransmitted until the ACK shows up.
        assert_eq!(sends(&layer.on_tick(500)), ["200"]);
        let mut ack = request(Method::Ack, "z9hG4bK-other");
        ack.headers.set("CSeq", "1 ACK");
        assert_eq!(layer.match_message(&ack.clone().into()), None);
        let ev = layer.on_message(ack.clone().into(), ep(1), 600);
        assert!(matches!(ev.as_slice(), [TxEvent::Request { .. }]));
        assert!(layer.on_message(ack.into(), ep(1), 700).is_empty());
        assert!(sends(&layer.on_tick(5_000)).is_empty());
    }

    #[test]
    fn response_matching_by_branch_and_method() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::Proxy);
        let req = request(Method::Invite, "z9hG4bK-7");
        let (key, _) = layer.create_client_tx(req.clone(), ep(9), 0).unwrap();
        let ok = reply(&req, 180);
        assert_eq!(layer.match_message(&ok.clone().into()), Some(key));
        let mut other = ok.clone();
        other.headers.set("CSeq", "1 BYE");
        assert_eq!(layer.match_message(&other.into()), None);
        let mut unknown = ok;
        unknown
            .headers
            .set("Via", "SIP/2.0/UDP 127.0.0.1:5001;branch=z9hG4bK-nope");
        assert_eq!(layer.match_message(&unknown.into()), None);
    }

    #[test]
    fn cancel_matches_invite_with_same_branch() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::UserAgent);
        let invite = request(Method::Invite, "z9hG4bK-8");
        let key = layer.create_server_tx(&invite, ep(1), 0).unwrap();
        let cancel = cancel_for(&invite);
        assert_eq!(layer.match_message(&cancel.into()), Some(key));
    }

    #[test]
    fn cancel_waits_for_provisional() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::Proxy);
        let req = request(Method::Invite, "z9hG4bK-9");
        let (key, _) = layer.create_client_tx(req.clone(), ep(9), 0).unwrap();
        assert!(layer.cancel(&key, 10).unwrap().is_empty());
        let ev = layer.on_message(reply(&req, 180).into(), ep(9), 20);
        assert_eq!(sends(&ev), ["CANCEL"]);
    }

    #[test]
    fn tcp_has_no_retransmissions() {
        let mut layer = TransactionLayer::new(TimerConfig::default(), LayerMode::UserAgent);
        let dest = Endpoint::tcp("127.0.0.1:9".parse().unwrap());
        layer
            .create_client_tx(request(Method::Options, "z9hG4bK-10"), dest, 0)
            .unwrap();
        assert!(sends(&layer.on_tick(10_000)).is_empty());
    }

    #[test]
    fn lifetime_bounds_every_transaction() {
        let t = TimerConfig::default();
        let mut layer = TransactionLayer::new(t, LayerMode::Proxy);
        let req = request(Method::Invite, "z9hG4bK-11");
        let key = layer.create_server_tx(&req, ep(1), 0).unwrap();
        layer.respond(&key, reply(&req, 180), 20_000);
        layer.respond(&key, reply(&req, 486), 30_000);
        layer.on_tick(31_999);
        assert!(layer.server_tx(&key).is_some());
        layer.on_tick(32_000);
        assert!(layer.is_empty());
    }
}
