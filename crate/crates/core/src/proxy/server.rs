//! The proxy node: registrar, stateful INVITE forking, in-dialog relay and
//! the stateless forwarding path.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{select, unbounded, Receiver, Sender};
use tracing::{debug, info, warn};

use super::cdr::{Cdr, CdrWriter, Disposition};
use super::{best_response, route, sanity_check, Feature, ProxyConfig, RoutingDecision};
use crate::clock::{Clock, UnixMs};
use crate::dialog::{addr_uri, literal_endpoint, local_via, route_value, uri_endpoint};
use crate::digest::md5_hex;
use crate::ids::IdGen;
use crate::registrar::{load_users, AuthVerdict, LocationStore, Registrar, RegistrarConfig, RegistrarError, UsersFile};
use crate::sip::{
    build_response, parse_message, parse_sdp, Message, Method, NameAddr, Request, Response, SdpBody, SipHeaders,
    SipUri, StatusCode,
};
use crate::transaction::{response_target, LayerMode, TransactionKey, TransactionLayer, TxEvent};
use crate::transport::{trace_sip, Endpoint, Inbound, PacketFilter, SipTransport};

const USERS_POLL_MS: u64 = 1000;
const JOURNAL_POLL_MS: u64 = 250;

/// Counters readable while the node runs.
#[derive(Debug, Default)]
pub struct ProxyStats {
    /// Live entries in the transaction table.
    pub transactions: AtomicUsize,
    pub stateless_forwards: AtomicU64,
    pub received: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BranchState {
    Pending,
    Ringing,
    Final(u16),
    /// Cancelled by us; its outcome no longer matters.
    Abandoned,
}

struct Branch {
    key: TransactionKey,
    req: Request,
    dest: Endpoint,
    state: BranchState,
    to_b2bua: bool,
    last: Option<Response>,
}

struct InviteCtx {
    req: Request,
    caller: String,
    callee: String,
    start: UnixMs,
    branches: Vec<Branch>,
    answered: bool,
    final_sent: bool,
    redirected: bool,
    no_answer_at: Option<UnixMs>,
}

impl InviteCtx {
    fn live(&self) -> impl Iterator<Item = &Branch> {
        self.branches
            .iter()
            .filter(|b| matches!(b.state, BranchState::Pending | BranchState::Ringing))
    }
}

struct MohLeg {
    call_id: String,
    invite: Request,
    key: TransactionKey,
    dest: Endpoint,
    /// To tag and remote target once answered.
    remote: Option<(String, SipUri)>,
    stop: bool,
}

struct DialogRec {
    caller: String,
    callee: String,
    caller_tag: String,
    start: UnixMs,
    answer: UnixMs,
    caller_sdp: Option<SdpBody>,
    callee_sdp: Option<SdpBody>,
    peer_is_b2bua: bool,
    moh: Option<MohLeg>,
}

enum RelayKind {
    Bye {
        call_id: String,
    },
    Reinvite {
        call_id: String,
        from_caller: bool,
        hold: bool,
    },
}

struct Relay {
    server: TransactionKey,
    kind: RelayKind,
}

/// Sans-IO proxy: feed it datagrams and ticks, drain what it wants sent.
pub struct ProxyCore {
    cfg: ProxyConfig,
    local: Endpoint,
    ids: Arc<IdGen>,
    layer: TransactionLayer,
    registrar: Registrar,
    users: Option<UsersFile>,
    cdr: Option<CdrWriter>,
    invites: HashMap<TransactionKey, InviteCtx>,
    branch_of: HashMap<TransactionKey, TransactionKey>,
    relays: HashMap<TransactionKey, Relay>,
    dialogs: HashMap<String, DialogRec>,
    moh_keys: HashMap<TransactionKey, String>,
    late: HashSet<(String, String)>,
    out: Vec<(Message, Endpoint)>,
    stats: Arc<ProxyStats>,
    next_users_check: UnixMs,
    next_journal_sync: UnixMs,
}

fn sdp_of(body: &[u8]) -> Option<SdpBody> {
    (!body.is_empty()).then(|| parse_sdp(body).ok()).flatten()
}

fn is_hold_offer(req: &Request) -> bool {
    match sdp_of(&req.body) {
        None => true,
        Some(s) => s.is_hold(),
    }
}

impl ProxyCore {
    pub fn new(cfg: ProxyConfig, local: SocketAddr, ids: Arc<IdGen>, now: UnixMs) -> Result<Self, RegistrarError> {
        let subs = match &cfg.users_path {
            Some(p) => load_users(p)?,
            None => Vec::new(),
        };
        let mut store = LocationStore::new(subs);
        if let Some(j) = &cfg.journal_path {
            store = store.with_journal(j, now)?;
        }
        let users = cfg.users_path.as_ref().map(|p| {
            let mut u = UsersFile::new(p);
            let _ = u.reload_if_changed();
            u
        });
        let registrar = Registrar::new(
            RegistrarConfig {
                realm: cfg.realm.clone(),
                ..RegistrarConfig::default()
            },
            store,
            Arc::clone(&ids),
        );
        let cdr = cfg.cdr_path.as_ref().map(CdrWriter::new);
        let layer = TransactionLayer::new(cfg.timers, LayerMode::Proxy);
        Ok(Self {
            cfg,
            local: Endpoint::udp(local),
            ids,
            layer,
            registrar,
            users,
            cdr,
            invites: HashMap::new(),
            branch_of: HashMap::new(),
            relays: HashMap::new(),
            dialogs: HashMap::new(),
            moh_keys: HashMap::new(),
            late: HashSet::new(),
            out: Vec::new(),
            stats: Arc::new(ProxyStats::default()),
            next_users_check: now + USERS_POLL_MS,
            next_journal_sync: now + JOURNAL_POLL_MS,
        })
    }

    pub fn stats(&self) -> Arc<ProxyStats> {
        Arc::clone(&self.stats)
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.cfg
    }

    pub fn store(&self) -> &LocationStore {
        &self.registrar.store
    }

    pub fn store_mut(&mut self) -> &mut LocationStore {
        &mut self.registrar.store
    }

    pub fn transaction_count(&self) -> usize {
        self.layer.len()
    }

    pub fn take_output(&mut self) -> Vec<(Message, Endpoint)> {
        std::mem::take(&mut self.out)
    }

    pub fn next_wakeup(&self) -> Option<UnixMs> {
        let na = self.invites.values().filter_map(|c| c.no_answer_at).min();
        [
            self.layer.next_wakeup(),
            na,
            Some(self.next_journal_sync.min(self.next_users_check)),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    fn via(&self, dest: &Endpoint, branch: &str) -> crate::sip::Via {
        let ep = Endpoint {
            addr: self.local.addr,
            proto: dest.proto,
        };
        local_via(&ep, branch)
    }

    fn is_local(&self, ep: &Endpoint) -> bool {
        ep.addr == self.local.addr
    }

    #[allow(clippy::wrong_self_convention)] // the SIP From header
    fn from_b2bua(&self, source: &Endpoint) -> bool {
        self.cfg.b2bua_addr.is_some_and(|b| b.ip() == source.addr.ip())
    }

    fn sync_store(&mut self, now: UnixMs) {
        if let Err(e) = self.registrar.store.sync_journal(now) {
            warn!(error = %e, "journal sync failed");
        }
        self.next_journal_sync = now + JOURNAL_POLL_MS;
    }

    fn emit(&mut self, events: Vec<TxEvent>, now: UnixMs) {
        for e in events {
            match e {
                TxEvent::Send { msg, to } => self.out.push((msg, to)),
                TxEvent::Request { req, source } => self.on_request(req, source, now),
                TxEvent::Response { resp, key } => self.on_response(resp, key, now),
                TxEvent::StrayResponse { resp, .. } => self.on_stray(resp),
                TxEvent::Timeout { key, response } => self.on_timeout(key, response, now),
            }
        }
        self.stats.transactions.store(self.layer.len(), Ordering::Relaxed);
    }

    /// Handles one received datagram or TCP frame.
    pub fn on_datagram(&mut self, data: &[u8], source: Endpoint, now: UnixMs) {
        self.stats.received.fetch_add(1, Ordering::Relaxed);
        let msg = match parse_message(data) {
            Ok(m) => m,
            Err(e) => {
                debug!(error = %e, from = %source.addr, "dropping unparseable message");
                return;
            }
        };
        if let Message::Request(req) = &msg {
            if let Err(code) = sanity_check(req, data.len(), &self.cfg) {
                if req.method != Method::Ack {
                    self.reply_stateless(req, code);
                }
                return;
            }
        }
        let ev = self.layer.on_message(msg, source, now);
        self.emit(ev, now);
    }

    pub fn on_tick(&mut self, now: UnixMs) {
        let ev = self.layer.on_tick(now);
        self.emit(ev, now);
        if now >= self.next_journal_sync {
            self.sync_store(now);
        }
        if now >= self.next_users_check {
            self.next_users_check = now + USERS_POLL_MS;
            self.reload_users();
        }
        let due: Vec<TransactionKey> = self
            .invites
            .iter()
            .filter(|(_, c)| c.no_answer_at.is_some_and(|t| now >= t) && !c.answered && !c.final_sent)
            .map(|(k, _)| k.clone())
            .collect();
        for key in due {
            self.divert_to_voicemail(&key, now);
        }
        let life = self.cfg.timers.life_ms();
        let done: Vec<TransactionKey> = self
            .invites
            .iter()
            .filter(|(_, c)| ((c.final_sent || c.answered) && c.live().next().is_none()) || now > c.start + 2 * life)
            .map(|(k, _)| k.clone())
            .collect();
        for key in done {
            if let Some(ctx) = self.invites.remove(&key) {
                for b in ctx.branches {
                    self.branch_of.remove(&b.key);
                }
            }
        }
        self.stats.transactions.store(self.layer.len(), Ordering::Relaxed);
    }

    /// Re-reads the users file when it changed on disk.
    pub fn reload_users(&mut self) {
        let Some(u) = self.users.as_mut() else {
            return;
        };
        match u.reload_if_changed() {
            Some(Ok(subs)) => {
                info!(count = subs.len(), "users file reloaded");
                self.registrar.store.set_subscribers(subs);
            }
            Some(Err(e)) => warn!(error = %e, "users file unreadable; keeping previous set"),
            None => {}
        }
    }

    fn reply_stateless(&mut self, req: &Request, code: u16) {
        if let Ok(resp) = build_response(req, StatusCode::new(code), &self.ids.tag()) {
            if let Some(to) = response_target(&resp) {
                self.out.push((resp.into(), to));
            }
        }
    }

    fn respond(&mut self, key: &TransactionKey, resp: Response, now: UnixMs) {
        let ev = self.layer.respond(key, resp, now);
        self.emit(ev, now);
    }

    fn reply(&mut self, key: &TransactionKey, req: &Request, code: u16, now: UnixMs) {
        if let Ok(resp) = build_response(req, StatusCode::new(code), &self.ids.tag()) {
            self.respond(key, resp, now);
        }
    }

    fn on_request(&mut self, req: Request, source: Endpoint, now: UnixMs) {
        match req.method {
            Method::Register => self.on_register(req, source, now),
            Method::Cancel => self.on_cancel(req, source, now),
            Method::Ack => self.on_ack(req),
            _ if req.to_tag().is_some() => self.on_in_dialog(req, source, now),
            Method::Invite => self.on_invite(req, source, now),
            _ => self.on_out_of_dialog(req, source, now),
        }
    }

    fn on_register(&mut self, req: Request, source: Endpoint, now: UnixMs) {
        let Ok(key) = self.layer.create_server_tx(&req, source, now) else {
            return;
        };
        self.sync_store(now);
        let resp = self.registrar.handle_register(&req, now);
        if resp.code() == 200 {
            debug!(aor = %req.to_hdr().map(|t| t.uri.to_string()).unwrap_or_default(), "registered");
        }
        self.respond(&key, resp, now);
    }

    /// Stateless path: one Via in, request out, nothing remembered.
    fn forward_stateless(&mut self, mut req: Request, dest: Endpoint) {
        let mf = req.max_forwards().unwrap_or(self.cfg.max_forwards_default);
        req.headers.set("Max-Forwards", mf.saturating_sub(1).to_string());
        // Deterministic branch so retransmissions follow the same path.
        let seed = format!("{}|{}", req.branch().unwrap_or_default(), req.method);
        let branch = format!("z9hG4bK{}sl", &md5_hex(&seed)[..16]);
        let via = self.via(&dest, &branch);
        req.headers.prepend("Via", via.to_string());
        self.stats.stateless_forwards.fetch_add(1, Ordering::Relaxed);
        self.out.push((req.into(), dest));
    }

    fn on_stray(&mut self, mut resp: Response) {
        let Ok(top) = resp.headers.top_via() else {
            return;
        };
        let ours = top.host == self.local.addr.ip().to_string() && top.port == Some(self.local.addr.port());
        if !ours {
            return;
        }
        if (200..300).contains(&resp.code()) {
            let id = (
                resp.call_id().unwrap_or_default().to_string(),
                resp.to_tag().unwrap_or_default(),
            );
            if self.late.contains(&id) {
                return;
            }
        }
        resp.headers.pop_via();
        if let Some(to) = response_target(&resp) {
            self.out.push((resp.into(), to));
        }
    }

    /// Strips our own Route entry and works out the next hop.
    fn next_hop(&self, req: &mut Request) -> Option<Endpoint> {
        if let Ok(routes) = req.headers.name_addrs("Route") {
            if let Some(first) = routes.first() {
                if uri_endpoint(&first.uri).is_some_and(|ep| self.is_local(&ep)) {
                    let rest: Vec<String> = routes[1..].iter().map(|r| r.to_string()).collect();
                    req.headers.remove("Route");
                    for r in rest {
                        req.headers.push("Route", r);
                    }
                }
            }
        }
        let hop = match req.headers.name_addrs("Route").ok().and_then(|r| r.into_iter().next()) {
            Some(r) => uri_endpoint(&r.uri),
            None => uri_endpoint(&req.uri),
        }?;
        (!self.is_local(&hop)).then_some(hop)
    }

    fn on_ack(&mut self, mut req: Request) {
        let call_id = req.call_id().unwrap_or_default().to_string();
        if let (Some(sdp), Some(d)) = (sdp_of(&req.body), self.dialogs.get_mut(&call_id)) {
            let from_caller = req.from_tag().as_deref() == Some(d.caller_tag.as_str());
            if from_caller {
                d.caller_sdp = Some(sdp);
            } else {
                d.callee_sdp = Some(sdp);
            }
        }
        if let Some(hop) = self.next_hop(&mut req) {
            self.forward_stateless(req, hop);
        }
    }

    fn on_out_of_dialog(&mut self, req: Request, source: Endpoint, now: UnixMs) {
        let user = req.uri.user().map(str::to_string);
        // A named host is our domain or an alias for it; resolving it per
        // request would stall the loop on the resolver.
        let to_us = user.is_none() || literal_endpoint(&req.uri).is_some_and(|ep| self.is_local(&ep));
        if to_us {
            let code = if req.method == Method::Options { 200 } else { 405 };
            return self.reply_stateless(&req, code);
        }
        let _ = source;
        let ext = user.unwrap_or_default();
        if now >= self.next_journal_sync {
            self.sync_store(now);
        }
        let target = self
            .registrar
            .store
            .lookup_ext(&ext, now)
            .into_iter()
            .next()
            .and_then(|b| uri_endpoint(&b.contact).map(|ep| (b.contact, ep)));
        match target {
            Some((contact, ep)) => {
                let mut req = req;
                req.uri = contact;
                self.forward_stateless(req, ep);
            }
            None => self.reply_stateless(&req, 404),
        }
    }

    fn on_in_dialog(&mut self, mut req: Request, source: Endpoint, now: UnixMs) {
        let call_id = req.call_id().unwrap_or_default().to_string();
        let Some(hop) = self.next_hop(&mut req) else {
            // Addressed to us: only our own music-on-hold legs live here.
            return self.on_local_dialog(req, source, now);
        };
        if !matches!(req.method, Method::Bye | Method::Invite) {
            return self.forward_stateless(req, hop);
        }
        let Ok(server) = self.layer.create_server_tx(&req, source, now) else {
            return;
        };
        let kind = match req.method {
            Method::Bye => {
                self.stop_moh(&call_id, now);
                RelayKind::Bye { call_id }
            }
            _ => {
                let from_caller = self
                    .dialogs
                    .get(&call_id)
                    .is_some_and(|d| req.from_tag().as_deref() == Some(d.caller_tag.as_str()));
                if let (Some(sdp), Some(d)) = (sdp_of(&req.body), self.dialogs.get_mut(&call_id)) {
                    if from_caller {
                        d.caller_sdp = Some(sdp);
                    } else {
                        d.callee_sdp = Some(sdp);
                    }
                }
                RelayKind::Reinvite {
                    hold: is_hold_offer(&req),
                    call_id,
                    from_caller,
                }
            }
        };
        let mf = req.max_forwards().unwrap_or(self.cfg.max_forwards_default);
        req.headers.set("Max-Forwards", mf.saturating_sub(1).to_string());
        let via = self.via(&hop, &self.ids.branch());
        req.headers.prepend("Via", via.to_string());
        match self.layer.create_client_tx(req, hop, now) {
            Ok((key, ev)) => {
                self.relays.insert(key, Relay { server, kind });
                self.emit(ev, now);
            }
            Err(e) => {
                warn!(error = %e, "cannot relay in-dialog request");
            }
        }
    }

    fn on_local_dialog(&mut self, req: Request, source: Endpoint, now: UnixMs) {
        let call_id = req.call_id().unwrap_or_default();
        let ours = self
            .dialogs
            .values()
            .any(|d| d.moh.as_ref().is_some_and(|m| m.call_id == call_id));
        let Ok(key) = self.layer.create_server_tx(&req, source, now) else {
            return;
        };
        let code = if ours { 200 } else { 481 };
        if ours && req.method == Method::Bye {
            for d in self.dialogs.values_mut() {
                if d.moh.as_ref().is_some_and(|m| m.call_id == call_id) {
                    d.moh = None;
                }
            }
        }
        self.reply(&key, &req, code, now);
    }

    fn on_cancel(&mut self, req: Request, source: Endpoint, now: UnixMs) {
        let Ok(ckey) = self.layer.create_server_tx(&req, source, now) else {
            return;
        };
        let Some(ikey) = TransactionKey::for_request(&req) else {
            return self.reply(&ckey, &req, 400, now);
        };
        if !self.invites.contains_key(&ikey) {
            return self.reply(&ckey, &req, 481, now);
        }
        self.reply(&ckey, &req, 200, now);
        let ctx = self.invites.get_mut(&ikey).expect("checked");
        if ctx.final_sent || ctx.answered {
            return;
        }
        ctx.final_sent = true;
        ctx.no_answer_at = None;
        let original = ctx.req.clone();
        let (caller, callee, start) = (ctx.caller.clone(), ctx.callee.clone(), ctx.start);
        self.cancel_branches(&ikey, None, now);
        self.reply(&ikey, &original, 487, now);
        self.write_cdr(Cdr::unanswered(
            original.call_id().unwrap_or_default(),
            &caller,
            &callee,
            start,
            now,
            Disposition::Cancelled,
        ));
    }

    fn on_invite(&mut self, req: Request, source: Endpoint, now: UnixMs) {
        let Ok(key) = self.layer.create_server_tx(&req, source, now) else {
            return;
        };
        if let Ok(trying) = build_response(&req, StatusCode::new(100), "") {
            self.respond(&key, trying, now);
        }
        self.sync_store(now);
        let caller = req
            .from_hdr()
            .and_then(|f| f.uri.user().map(str::to_string))
            .unwrap_or_default();
        let sub = self.registrar.store.subscriber(&caller).cloned();
        let trusted = self.from_b2bua(&source)
            || self
                .registrar
                .store
                .lookup_ext(&caller, now)
                .iter()
                .any(|b| uri_endpoint(&b.contact).is_some_and(|ep| ep.addr == source.addr));
        if !trusted {
            let Some(s) = sub.as_ref() else {
                return self.reply(&key, &req, 403, now);
            };
            match self.registrar.authenticate(&req, "Proxy-Authorization", s, now) {
                AuthVerdict::Ok => {}
                verdict => {
                    let ch = self.registrar.challenge(now, verdict == AuthVerdict::StaleNonce);
                    if let Ok(mut resp) = build_response(&req, StatusCode::new(407), &self.ids.tag()) {
                        resp.headers.push("Proxy-Authenticate", ch.to_string());
                        self.respond(&key, resp, now);
                    }
                    return;
                }
            }
        }
        let digits = req.uri.user().unwrap_or_default().to_string();
        let decision = route(&digits, sub.as_ref(), &self.registrar.store, &self.cfg, now);
        info!(caller = %caller, digits = %digits, decision = ?short(&decision), "routing INVITE");
        self.invites.insert(
            key.clone(),
            InviteCtx {
                req,
                caller,
                callee: digits.clone(),
                start: now,
                branches: Vec::new(),
                answered: false,
                final_sent: false,
                redirected: false,
                no_answer_at: None,
            },
        );
        self.dispatch(&key, decision, &digits, now);
    }

    fn b2bua_target(&self, user: &str) -> Option<(SipUri, Endpoint)> {
        let addr = self.cfg.b2bua_addr?;
        let ep = Endpoint::udp(addr);
        Some((addr_uri(Some(user), &ep), ep))
    }

    /// Turns a routing decision into fork branches or a final answer.
    fn dispatch(&mut self, key: &TransactionKey, decision: RoutingDecision, digits: &str, now: UnixMs) {
        let mut extra = Vec::new();
        let targets: Vec<(SipUri, Endpoint, bool)> = match decision {
            RoutingDecision::Reject(code) => return self.finish(key, code, None, now),
            RoutingDecision::Internal(bindings) => {
                let t: Vec<_> = bindings
                    .into_iter()
                    .filter_map(|b| uri_endpoint(&b.contact).map(|ep| (b.contact, ep, false)))
                    .collect();
                if self.cfg.b2bua_addr.is_some() {
                    let wait = self.cfg.no_answer_for(digits);
                    if let Some(ctx) = self.invites.get_mut(key) {
                        ctx.no_answer_at = Some(now + wait);
                    }
                }
                t
            }
            RoutingDecision::External(_) => match self.b2bua_target(digits) {
                Some((u, ep)) => vec![(u, ep, true)],
                None => return self.finish(key, 503, None, now),
            },
            RoutingDecision::Feature(f) => {
                let user = match &f {
                    Feature::Voicemail => {
                        if digits != self.cfg.voicemail_ext {
                            extra.push(("Diversion".to_string(), format!("<sip:{digits}@{}>", self.cfg.domain)));
                        }
                        self.cfg.voicemail_ext.clone()
                    }
                    Feature::Ivr => self.cfg.ivr_ext.clone(),
                    Feature::Moh => self.cfg.moh_ext.clone(),
                    Feature::Conference(room) => room.clone(),
                };
                match self.b2bua_target(&user) {
                    Some((u, ep)) => vec![(u, ep, true)],
                    None => return self.finish(key, 503, None, now),
                }
            }
        };
        if targets.is_empty() {
            return self.finish(key, 480, None, now);
        }
        self.fork(key, targets, &extra, now);
    }

    fn fork(
        &mut self,
        key: &TransactionKey,
        targets: Vec<(SipUri, Endpoint, bool)>,
        extra: &[(String, String)],
        now: UnixMs,
    ) {
        let rr = route_value(&self.local);
        let Some(original) = self.invites.get(key).map(|c| c.req.clone()) else {
            return;
        };
        let mf = original
            .max_forwards()
            .unwrap_or(self.cfg.max_forwards_default)
            .saturating_sub(1);
        for (uri, dest, to_b2bua) in targets {
            let mut req = original.clone();
            req.uri = uri;
            req.headers.set("Max-Forwards", mf.to_string());
            req.headers.remove("Proxy-Authorization");
            req.headers.remove("Route");
            req.headers.prepend("Record-Route", rr.clone());
            for (n, v) in extra {
                req.headers.set(n, v.clone());
            }
            let via = self.via(&dest, &self.ids.branch());
            req.headers.prepend("Via", via.to_string());
            match self.layer.create_client_tx(req.clone(), dest, now) {
                Ok((bkey, ev)) => {
                    self.branch_of.insert(bkey.clone(), key.clone());
                    if let Some(ctx) = self.invites.get_mut(key) {
                        ctx.branches.push(Branch {
                            key: bkey,
                            req,
                            dest,
                            state: BranchState::Pending,
                            to_b2bua,
                            last: None,
                        });
                    }
                    self.emit(ev, now);
                }
                Err(e) => warn!(error = %e, "branch not started"),
            }
        }
        self.check_done(key, now);
    }

    fn cancel_branches(&mut self, key: &TransactionKey, except: Option<&TransactionKey>, now: UnixMs) {
        let Some(ctx) = self.invites.get_mut(key) else {
            return;
        };
        let mut keys = Vec::new();
        for b in ctx.branches.iter_mut() {
            if Some(&b.key) != except && matches!(b.state, BranchState::Pending | BranchState::Ringing) {
                b.state = BranchState::Abandoned;
                keys.push(b.key.clone());
            }
        }
        for k in keys {
            match self.layer.cancel(&k, now) {
                Ok(ev) => self.emit(ev, now),
                Err(e) => debug!(error = %e, "branch already finished"),
            }
        }
    }

    /// Sends a final failure upstream, from a branch response when we have one.
    fn finish(&mut self, key: &TransactionKey, code: u16, resp: Option<Response>, now: UnixMs) {
        let Some(ctx) = self.invites.get_mut(key) else {
            return;
        };
        if ctx.final_sent || ctx.answered {
            return;
        }
        ctx.final_sent = true;
        ctx.no_answer_at = None;
        let (req, caller, callee, start) = (ctx.req.clone(), ctx.caller.clone(), ctx.callee.clone(), ctx.start);
        self.cancel_branches(key, None, now);
        match resp {
            Some(mut r) => {
                r.headers.pop_via();
                self.respond(key, r, now);
            }
            None => self.reply(key, &req, code, now),
        }
        self.write_cdr(Cdr::unanswered(
            req.call_id().unwrap_or_default(),
            &caller,
            &callee,
            start,
            now,
            Disposition::for_failure(code),
        ));
    }

    /// Forwards the best failure once no branch is left pending.
    fn check_done(&mut self, key: &TransactionKey, now: UnixMs) {
        let Some(ctx) = self.invites.get(key) else {
            return;
        };
        if ctx.final_sent || ctx.answered || ctx.live().next().is_some() {
            return;
        }
        let finals: Vec<(u16, Option<Response>)> = ctx
            .branches
            .iter()
            .filter_map(|b| match b.state {
                BranchState::Final(c) => Some((c, b.last.clone())),
                _ => None,
            })
            .collect();
        let codes: Vec<u16> = finals.iter().map(|(c, _)| *c).collect();
        match best_response(&codes) {
            Some(best) => {
                let resp = finals.into_iter().find(|(c, _)| *c == best).and_then(|(_, r)| r);
                self.finish(key, best, resp, now);
            }
            None => self.finish(key, 480, None, now),
        }
    }

    fn divert_to_voicemail(&mut self, key: &TransactionKey, now: UnixMs) {
        let Some(ctx) = self.invites.get_mut(key) else {
            return;
        };
        ctx.no_answer_at = None;
        let callee = ctx.callee.clone();
        info!(callee = %callee, "no answer; diverting to voicemail");
        self.cancel_branches(key, None, now);
        self.dispatch(key, RoutingDecision::Feature(Feature::Voicemail), &callee, now);
    }

    fn on_response(&mut self, resp: Response, key: TransactionKey, now: UnixMs) {
        if let Some(server) = self.branch_of.get(&key).cloned() {
            return self.on_branch_response(&server, &key, resp, now);
        }
        if let Some(relay) = self.relays.get(&key) {
            let server = relay.server.clone();
            let code = resp.code();
            if code >= 200 {
                let relay = self.relays.remove(&key).expect("present");
                self.after_relay(relay.kind, &resp, now);
            }
            let mut up = resp;
            up.headers.pop_via();
            return self.respond(&server, up, now);
        }
        if let Some(call_id) = self.moh_keys.get(&key).cloned() {
            self.on_moh_response(&call_id, &key, resp, now)
        }
    }

    fn on_branch_response(&mut self, server: &TransactionKey, key: &TransactionKey, resp: Response, now: UnixMs) {
        let code = resp.code();
        if code == 100 {
            return;
        }
        let Some(ctx) = self.invites.get_mut(server) else {
            return;
        };
        let Some(idx) = ctx.branches.iter().position(|b| &b.key == key) else {
            return;
        };
        if code < 200 {
            if ctx.final_sent || ctx.answered || ctx.branches[idx].state == BranchState::Abandoned {
                return;
            }
            ctx.branches[idx].state = BranchState::Ringing;
            let mut up = resp;
            up.headers.pop_via();
            return self.respond(server, up, now);
        }
        if code < 300 {
            if ctx.answered || ctx.final_sent {
                let b = &ctx.branches[idx];
                let (req, dest) = (b.req.clone(), b.dest);
                ctx.branches[idx].state = BranchState::Final(code);
                return self.ack_and_bye(&req, &resp, dest, now);
            }
            ctx.answered = true;
            ctx.no_answer_at = None;
            ctx.branches[idx].state = BranchState::Final(code);
            let b = &ctx.branches[idx];
            let rec = DialogRec {
                caller: ctx.caller.clone(),
                callee: ctx.callee.clone(),
                caller_tag: ctx.req.from_tag().unwrap_or_default(),
                start: ctx.start,
                answer: now,
                caller_sdp: sdp_of(&ctx.req.body),
                callee_sdp: sdp_of(&resp.body),
                peer_is_b2bua: b.to_b2bua,
                moh: None,
            };
            self.dialogs.insert(resp.call_id().unwrap_or_default().to_string(), rec);
            self.cancel_branches(server, Some(key), now);
            let mut up = resp;
            up.headers.pop_via();
            return self.respond(server, up, now);
        }
        ctx.branches[idx].last = Some(resp.clone());
        if ctx.branches[idx].state == BranchState::Abandoned {
            return self.check_done(server, now);
        }
        ctx.branches[idx].state = BranchState::Final(code);
        if (300..400).contains(&code) && !ctx.redirected && !ctx.final_sent && !ctx.answered {
            let target = resp
                .contact()
                .and_then(|c| c.uri.user().map(str::to_string))
                .filter(|u| !u.is_empty());
            if let Some(target) = target {
                ctx.redirected = true;
                ctx.branches[idx].state = BranchState::Abandoned;
                ctx.no_answer_at = None;
                info!(to = %target, "following redirect");
                let caller_sub = self.registrar.store.subscriber(&ctx.caller.clone()).cloned();
                let decision = route(&target, caller_sub.as_ref(), &self.registrar.store, &self.cfg, now);
                return self.dispatch(server, decision, &target, now);
            }
        }
        if code >= 600 {
            return self.finish(server, code, Some(resp), now);
        }
        self.check_done(server, now);
    }

    /// A second 2xx on a forked INVITE: confirm it and hang it up.
    fn ack_and_bye(&mut self, branch_req: &Request, resp: &Response, dest: Endpoint, now: UnixMs) {
        let target = resp.contact().map(|c| c.uri).unwrap_or_else(|| branch_req.uri.clone());
        let hop = uri_endpoint(&target).unwrap_or(dest);
        let seq = branch_req.cseq().map(|c| c.seq).unwrap_or(1);
        let call_id = resp.call_id().unwrap_or_default().to_string();
        self.late.insert((call_id.clone(), resp.to_tag().unwrap_or_default()));
        let build = |method: Method, seq: u32, branch: &str, this: &Self| {
            let mut r = Request::new(method.clone(), target.clone());
            r.headers.push("Via", this.via(&hop, branch).to_string());
            r.headers.push("Max-Forwards", "70");
            r.headers
                .push("From", branch_req.headers.get("From").unwrap_or_default());
            r.headers.push("To", resp.headers.get("To").unwrap_or_default());
            r.headers.push("Call-ID", call_id.clone());
            r.headers.push("CSeq", format!("{seq} {method}"));
            r
        };
        let ack = build(Method::Ack, seq, &self.ids.branch(), self);
        self.out.push((ack.into(), hop));
        let bye = build(Method::Bye, seq + 1, &self.ids.branch(), self);
        if let Ok((_, ev)) = self.layer.create_client_tx(bye, hop, now) {
            self.emit(ev, now);
        }
    }

    fn after_relay(&mut self, kind: RelayKind, resp: &Response, now: UnixMs) {
        match kind {
            RelayKind::Bye { call_id } => {
                if let Some(d) = self.dialogs.remove(&call_id) {
                    if let Some(m) = d.moh {
                        self.end_moh_leg(m, now);
                    }
                    self.write_cdr(Cdr::answered(&call_id, &d.caller, &d.callee, d.start, d.answer, now));
                }
            }
            RelayKind::Reinvite {
                call_id,
                from_caller,
                hold,
            } => {
                if !(200..300).contains(&resp.code()) {
                    return;
                }
                let Some(d) = self.dialogs.get_mut(&call_id) else {
                    return;
                };
                // The answer comes from the party that received the re-INVITE.
                if let Some(sdp) = sdp_of(&resp.body) {
                    if from_caller {
                        d.callee_sdp = Some(sdp);
                    } else {
                        d.caller_sdp = Some(sdp);
                    }
                }
                if d.peer_is_b2bua {
                    return;
                }
                if hold {
                    let held_sdp = if from_caller {
                        d.callee_sdp.clone()
                    } else {
                        d.caller_sdp.clone()
                    };
                    let holder = if from_caller {
                        d.caller.clone()
                    } else {
                        d.callee.clone()
                    };
                    if d.moh.is_none() {
                        if let Some(sdp) = held_sdp {
                            self.start_moh(&call_id, &holder, sdp, now);
                        }
                    }
                } else {
                    self.stop_moh(&call_id, now);
                }
            }
        }
    }

    fn start_moh(&mut self, call_id: &str, holder: &str, held_sdp: SdpBody, now: UnixMs) {
        let Some((uri, dest)) = self.b2bua_target(&self.cfg.moh_ext.clone()) else {
            return;
        };
        let moh_call = self.ids.call_id();
        let from = NameAddr::new(SipUri::new(Some(holder), self.cfg.domain.clone(), None)).with_tag(&self.ids.tag());
        let to = NameAddr::new(SipUri::new(Some(&self.cfg.moh_ext), self.cfg.domain.clone(), None));
        let via = self.via(&dest, &self.ids.branch());
        let contact = addr_uri(None, &self.local);
        let mut req = crate::dialog::new_request(Method::Invite, uri, &from, &to, &moh_call, 1, &via, Some(&contact));
        let mut sdp = held_sdp;
        sdp.direction = crate::sip::Direction::SendRecv;
        req.headers.push("Content-Type", "application/sdp");
        req.body = sdp.to_bytes();
        info!(call = %call_id, "starting music on hold");
        match self.layer.create_client_tx(req.clone(), dest, now) {
            Ok((key, ev)) => {
                self.moh_keys.insert(key.clone(), call_id.to_string());
                if let Some(d) = self.dialogs.get_mut(call_id) {
                    d.moh = Some(MohLeg {
                        call_id: moh_call,
                        invite: req,
                        key,
                        dest,
                        remote: None,
                        stop: false,
                    });
                }
                self.emit(ev, now);
            }
            Err(e) => warn!(error = %e, "music on hold not started"),
        }
    }

    fn stop_moh(&mut self, call_id: &str, now: UnixMs) {
        let Some(d) = self.dialogs.get_mut(call_id) else {
            return;
        };
        let Some(m) = d.moh.take() else {
            return;
        };
        if m.remote.is_some() {
            self.end_moh_leg(m, now);
        } else {
            // Still ringing: cancel, and hang up should a 2xx race the CANCEL.
            let key = m.key.clone();
            if let Some(d) = self.dialogs.get_mut(call_id) {
                d.moh = Some(MohLeg { stop: true, ..m });
            }
            if let Ok(ev) = self.layer.cancel(&key, now) {
                self.emit(ev, now);
            }
        }
    }

    fn moh_request(&self, m: &MohLeg, method: Method, seq: u32) -> Option<(Request, Endpoint)> {
        let (tag, target) = m.remote.clone()?;
        let hop = uri_endpoint(&target).unwrap_or(m.dest);
        let mut r = Request::new(method.clone(), target);
        r.headers.push("Via", self.via(&hop, &self.ids.branch()).to_string());
        r.headers.push("Max-Forwards", "70");
        r.headers.push("From", m.invite.headers.get("From").unwrap_or_default());
        let to: NameAddr = m.invite.to_hdr()?.with_tag(&tag);
        r.headers.push("To", to.to_string());
        r.headers.push("Call-ID", m.call_id.clone());
        r.headers.push("CSeq", format!("{seq} {method}"));
        Some((r, hop))
    }

    fn end_moh_leg(&mut self, m: MohLeg, now: UnixMs) {
        self.moh_keys.remove(&m.key);
        if let Some((bye, hop)) = self.moh_request(&m, Method::Bye, 2) {
            if let Ok((_, ev)) = self.layer.create_client_tx(bye, hop, now) {
                self.emit(ev, now);
            }
        }
    }

    fn on_moh_response(&mut self, call_id: &str, key: &TransactionKey, resp: Response, now: UnixMs) {
        let code = resp.code();
        if code < 200 {
            return;
        }
        self.moh_keys.remove(key);
        let leg = match self.dialogs.get_mut(call_id) {
            Some(d) if d.moh.as_ref().is_some_and(|m| &m.key == key) => d.moh.take(),
            _ => None,
        };
        if code >= 300 {
            return;
        }
        let fallback = self.b2bua_target(&self.cfg.moh_ext.clone()).map(|(u, _)| u);
        let Some(target) = resp.contact().map(|c| c.uri).or(fallback) else {
            return;
        };
        let remote = (resp.to_tag().unwrap_or_default(), target);
        let mut m = match leg {
            Some(m) => m,
            None => {
                // Leg already dropped: confirm the answer and hang it up.
                debug!("orphaned music-on-hold answer");
                let Some(invite) = self.moh_orphan_invite(&resp) else {
                    return;
                };
                MohLeg {
                    call_id: resp.call_id().unwrap_or_default().to_string(),
                    invite,
                    key: key.clone(),
                    dest: self.cfg.b2bua_addr.map(Endpoint::udp).unwrap_or(self.local),
                    remote: None,
                    stop: true,
                }
            }
        };
        m.remote = Some(remote);
        if let Some((ack, hop)) = self.moh_request(&m, Method::Ack, 1) {
            self.out.push((ack.into(), hop));
        }
        if m.stop {
            self.end_moh_leg(m, now);
        } else if let Some(d) = self.dialogs.get_mut(call_id) {
            self.moh_keys.insert(key.clone(), call_id.to_string());
            d.moh = Some(m);
        }
    }

    /// Rebuilds enough of an INVITE from its answer to address ACK and BYE.
    fn moh_orphan_invite(&self, resp: &Response) -> Option<Request> {
        let mut r = Request::new(Method::Invite, resp.contact()?.uri);
        r.headers.push("From", resp.headers.get("From")?);
        let to: NameAddr = resp.to_hdr()?;
        r.headers.push("To", NameAddr::new(to.uri).to_string());
        Some(r)
    }

    fn on_timeout(&mut self, key: TransactionKey, response: Response, now: UnixMs) {
        if self.branch_of.contains_key(&key) {
            return self.on_response(response, key, now);
        }
        if let Some(relay) = self.relays.remove(&key) {
            self.after_relay(relay.kind, &response, now);
            let mut up = response;
            up.headers.pop_via();
            return self.respond(&relay.server, up, now);
        }
        if let Some(call_id) = self.moh_keys.remove(&key) {
            if let Some(d) = self.dialogs.get_mut(&call_id) {
                d.moh = None;
            }
        }
    }

    fn write_cdr(&self, cdr: Cdr) {
        info!(call = %cdr.call_id, disposition = cdr.disposition.as_str(), duration_ms = cdr.duration_ms, "call ended");
        if let Some(w) = &self.cdr {
            if let Err(e) = w.append(&cdr) {
                warn!(error = %e, "cannot write CDR");
            }
        }
    }
}

fn short(d: &RoutingDecision) -> String {
    match d {
        RoutingDecision::Internal(b) => format!("internal({})", b.len()),
        RoutingDecision::External(digits) => format!("external({digits})"),
        RoutingDecision::Feature(f) => format!("{f:?}").to_lowercase(),
        RoutingDecision::Reject(c) => format!("reject({c})"),
    }
}

enum Control {
    Stop,
}

/// A proxy running on its own thread with real sockets.
pub struct ProxyNode {
    name: String,
    addr: SocketAddr,
    stats: Arc<ProxyStats>,
    control: Sender<Control>,
    running: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ProxyNode {
    pub fn start(
        cfg: ProxyConfig,
        clock: Arc<dyn Clock>,
        filter: Option<Arc<dyn PacketFilter>>,
        seed: Option<u64>,
    ) -> Result<Self, crate::node::NodeError> {
        let (transport, inbound) = SipTransport::bind(cfg.bind, cfg.tcp, filter)?;
        let addr = transport.local_addr();
        let ids = Arc::new(seed.map(IdGen::seeded).unwrap_or_else(IdGen::from_entropy));
        let name = cfg.name.clone();
        let core = ProxyCore::new(cfg, addr, ids, clock.now_ms())?;
        let stats = core.stats();
        let (tx, rx) = unbounded();
        let running = Arc::new(AtomicBool::new(true));
        let flag = Arc::clone(&running);
        let node_name = name.clone();
        let thread = thread::Builder::new()
            .name(format!("proxy-{name}"))
            .spawn(move || run(core, transport, inbound, rx, clock, &node_name, flag))?;
        info!(%name, %addr, "proxy listening");
        Ok(Self {
            name,
            addr,
            stats,
            control: tx,
            running,
            thread: Some(thread),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &Arc<ProxyStats> {
        &self.stats
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::Relaxed)
    }

    /// Stops the node and closes its sockets. Used for orderly shutdown and
    /// for simulated crashes alike: nothing is flushed on the way out.
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

impl Drop for ProxyNode {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run(
    mut core: ProxyCore,
    transport: Arc<SipTransport>,
    inbound: Receiver<Inbound>,
    control: Receiver<Control>,
    clock: Arc<dyn Clock>,
    name: &str,
    running: Arc<AtomicBool>,
) {
    loop {
        let now = clock.now_ms();
        let wait = core.next_wakeup().map_or(50, |t| t.saturating_sub(now)).clamp(1, 50);
        select! {
            recv(inbound) -> m => match m {
                Ok(m) => {
                    trace_sip(name, false, m.source.addr, &m.data);
                    core.on_datagram(&m.data, m.source, clock.now_ms());
                    // Drain whatever else is queued before ticking.
                    while let Ok(m) = inbound.try_recv() {
                        trace_sip(name, false, m.source.addr, &m.data);
                        core.on_datagram(&m.data, m.source, clock.now_ms());
                        flush(&mut core, &transport, name);
                    }
                }
                Err(_) => break,
            },
            recv(control) -> _ => break,
            default(Duration::from_millis(wait)) => {},
        }
        core.on_tick(clock.now_ms());
        flush(&mut core, &transport, name);
    }
    transport.close();
    running.store(false, Ordering::Relaxed);
}

fn flush(core: &mut ProxyCore, transport: &SipTransport, name: &str) {
    for (msg, to) in core.take_output() {
        let bytes = msg.to_bytes();
        trace_sip(name, true, to.addr, &bytes);
        if let Err(e) = transport.send(&to, &bytes) {
            debug!(error = %e, to = %to.addr, "send failed");
        }
    }
}

/// Loads a proxy configuration file.
pub fn load_config(path: &Path) -> Result<ProxyConfig, crate::config::ConfigError> {
    ProxyConfig::from_ini(&std::fs::read_to_string(path)?, Some(path))
}
