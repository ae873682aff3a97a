//! Sans-IO user agent: INVITE sessions on top of the transaction layer.
//!
//! The application (softphone, B2BUA, trunk simulator) drives calls through
//! methods like [`UaCore::invite`] and [`UaCore::answer`] and reacts to
//! [`UaEvent`]s. Everything to be put on the wire accumulates in an outbox
//! drained with [`UaCore::take_output`].

use std::collections::HashMap;
use std::sync::Arc;

use tracing::debug;

use super::ladder::Ladder;
use crate::clock::UnixMs;
use crate::dialog::{addr_uri, local_via, new_request, uas_response, uri_endpoint, Dialog};
use crate::digest::{Challenge, Credentials};
use crate::ids::IdGen;
use crate::sip::{parse_sdp, Message, Method, NameAddr, Request, Response, SdpBody, SipHeaders, SipUri};
use crate::transaction::{LayerMode, TimerConfig, TransactionKey, TransactionLayer, TxEvent};
use crate::transport::Endpoint;

pub type CallRef = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Uac,
    Uas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallState {
    /// Our INVITE is out, nothing heard yet.
    Calling,
    /// Provisional response received.
    Early,
    /// Their INVITE is waiting for our answer.
    Incoming,
    /// 2xx sent or received.
    Established,
    Terminated,
}

#[derive(Debug, Clone)]
pub struct Call {
    pub id: CallRef,
    pub role: Role,
    pub state: CallState,
    pub invite: Request,
    pub dialog: Option<Dialog>,
    pub local_sdp: Option<SdpBody>,
    pub remote_sdp: Option<SdpBody>,
    pub local_tag: String,
    pub last_provisional: Option<u16>,
    invite_key: TransactionKey,
    next_hop: Endpoint,
    auth_tried: bool,
    cancel_requested: bool,
    acked: bool,
    reinvite_out: Option<(TransactionKey, bool)>,
    reinvite_in: Option<(TransactionKey, Request)>,
    bye_key: Option<TransactionKey>,
}

impl Call {
    pub fn is_live(&self) -> bool {
        self.state != CallState::Terminated
    }

    pub fn remote_display(&self) -> String {
        match self.role {
            Role::Uac => self.invite.uri.user().unwrap_or_default().to_string(),
            Role::Uas => self
                .invite
                .from_hdr()
                .and_then(|f| f.uri.user().map(str::to_string))
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum UaEvent {
    Incoming {
        call: CallRef,
    },
    Progress {
        call: CallRef,
        code: u16,
    },
    Answered {
        call: CallRef,
        sdp: Option<SdpBody>,
    },
    /// ACK for our 2xx arrived.
    Confirmed {
        call: CallRef,
        sdp: Option<SdpBody>,
    },
    Failed {
        call: CallRef,
        code: u16,
        resp: Response,
    },
    Cancelled {
        call: CallRef,
    },
    Terminated {
        call: CallRef,
    },
    Reinvite {
        call: CallRef,
        sdp: Option<SdpBody>,
    },
    ReinviteAnswered {
        call: CallRef,
        sdp: Option<SdpBody>,
    },
    ReinviteFailed {
        call: CallRef,
        code: u16,
    },
    /// Response to a request sent with [`UaCore::send_request`].
    Response {
        key: TransactionKey,
        resp: Response,
    },
}

#[derive(Debug, Clone)]
pub struct UaConfig {
    pub local: Endpoint,
    /// User part used in Contact.
    pub user: Option<String>,
    /// Credentials for answering 401/407 challenges.
    pub credentials: Option<(String, String)>,
}

pub struct UaCore {
    cfg: UaConfig,
    ids: Arc<IdGen>,
    layer: TransactionLayer,
    calls: HashMap<CallRef, Call>,
    next_id: CallRef,
    out: Vec<(Message, Endpoint)>,
    ladder: Option<Arc<Ladder>>,
}

fn body_sdp(body: &[u8]) -> Option<SdpBody> {
    if body.is_empty() {
        None
    } else {
        parse_sdp(body).ok()
    }
}

fn set_body(msg_headers: &mut crate::sip::Headers, body: &mut Vec<u8>, sdp: Option<&SdpBody>) {
    match sdp {
        Some(s) => {
            msg_headers.set("Content-Type", "application/sdp");
            *body = s.to_bytes();
        }
        None => {
            msg_headers.remove("Content-Type");
            body.clear();
        }
    }
}

impl UaCore {
    pub fn new(cfg: UaConfig, ids: Arc<IdGen>, timers: TimerConfig) -> Self {
        Self {
            cfg,
            ids,
            layer: TransactionLayer::new(timers, LayerMode::UserAgent),
            calls: HashMap::new(),
            next_id: 1,
            out: Vec::new(),
            ladder: None,
        }
    }

    pub fn with_ladder(mut self, ladder: Arc<Ladder>) -> Self {
        self.ladder = Some(ladder);
        self
    }

    pub fn config(&self) -> &UaConfig {
        &self.cfg
    }

    pub fn set_credentials(&mut self, creds: Option<(String, String)>) {
        self.cfg.credentials = creds;
    }

    pub fn set_user(&mut self, user: Option<String>) {
        self.cfg.user = user;
    }

    pub fn ids(&self) -> &Arc<IdGen> {
        &self.ids
    }

    pub fn local(&self) -> Endpoint {
        self.cfg.local
    }

    pub fn contact_uri(&self) -> SipUri {
        addr_uri(self.cfg.user.as_deref(), &self.cfg.local)
    }

    pub fn call(&self, id: CallRef) -> Option<&Call> {
        self.calls.get(&id)
    }

    pub fn calls(&self) -> impl Iterator<Item = &Call> {
        self.calls.values()
    }

    pub fn set_local_sdp(&mut self, id: CallRef, sdp: Option<SdpBody>) {
        if let Some(c) = self.calls.get_mut(&id) {
            c.local_sdp = sdp;
        }
    }

    /// Forgets a finished call.
    pub fn remove(&mut self, id: CallRef) {
        self.calls.remove(&id);
    }

    pub fn take_output(&mut self) -> Vec<(Message, Endpoint)> {
        std::mem::take(&mut self.out)
    }

    pub fn next_wakeup(&self) -> Option<UnixMs> {
        self.layer.next_wakeup()
    }

    fn record(&self, outgoing: bool, msg: &Message) {
        if let Some(l) = &self.ladder {
            l.push(outgoing, msg.clone());
        }
    }

    fn emit(&mut self, events: Vec<TxEvent>) {
        for e in events {
            if let TxEvent::Send { msg, to } = e {
                self.out.push((msg, to));
            }
        }
    }

    fn send_response(&mut self, key: &TransactionKey, resp: Response, now: UnixMs) {
        self.record(true, &resp.clone().into());
        let ev = self.layer.respond(key, resp, now);
        self.emit(ev);
    }

    fn send_client(&mut self, req: Request, dest: Endpoint, now: UnixMs) -> Option<TransactionKey> {
        self.record(true, &req.clone().into());
        match self.layer.create_client_tx(req, dest, now) {
            Ok((key, ev)) => {
                self.emit(ev);
                Some(key)
            }
            Err(e) => {
                debug!(error = %e, "client transaction refused");
                None
            }
        }
    }

    /// Sends a standalone request (REGISTER, OPTIONS) and returns its key.
    pub fn send_request(&mut self, req: Request, dest: Endpoint, now: UnixMs) -> Option<TransactionKey> {
        self.send_client(req, dest, now)
    }

    pub fn new_branch_via(&self) -> crate::sip::Via {
        local_via(&self.cfg.local, &self.ids.branch())
    }

    /// Starts an outgoing call.
    pub fn invite(
        &mut self,
        target: SipUri,
        from: NameAddr,
        sdp: Option<SdpBody>,
        extra: &[(String, String)],
        next_hop: Endpoint,
        now: UnixMs,
    ) -> CallRef {
        let local_tag = self.ids.tag();
        let to = NameAddr::new(target.clone());
        let from = from.with_tag(&local_tag);
        let contact = self.contact_uri();
        let mut req = new_request(
            Method::Invite,
            target,
            &from,
            &to,
            &self.ids.call_id(),
            1,
            &self.new_branch_via(),
            Some(&contact),
        );
        for (n, v) in extra {
            req.headers.push(n.clone(), v.clone());
        }
        set_body(&mut req.headers, &mut req.body, sdp.as_ref());
        let id = self.next_id;
        self.next_id += 1;
        let key = self
            .send_client(req.clone(), next_hop, now)
            .unwrap_or_else(|| TransactionKey::new("", Method::Invite));
        self.calls.insert(
            id,
            Call {
                id,
                role: Role::Uac,
                state: CallState::Calling,
                invite: req,
                dialog: None,
                local_sdp: sdp,
                remote_sdp: None,
                local_tag,
                last_provisional: None,
                invite_key: key,
                next_hop,
                auth_tried: false,
                cancel_requested: false,
                acked: false,
                reinvite_out: None,
                reinvite_in: None,
                bye_key: None,
            },
        );
        id
    }

    /// Sends a provisional response (180 unless told otherwise).
    pub fn ring(&mut self, id: CallRef, code: u16, now: UnixMs) {
        let Some(c) = self.calls.get(&id).filter(|c| c.state == CallState::Incoming) else {
            return;
        };
        let mut resp = uas_response(&c.invite, code, &c.local_tag);
        resp.headers.push("Contact", format!("<{}>", self.contact_uri()));
        let key = c.invite_key.clone();
        self.send_response(&key, resp, now);
    }

    pub fn answer(&mut self, id: CallRef, sdp: Option<SdpBody>, now: UnixMs) {
        let contact = self.contact_uri();
        let Some(c) = self.calls.get_mut(&id).filter(|c| c.state == CallState::Incoming) else {
            return;
        };
        let mut resp = uas_response(&c.invite, 200, &c.local_tag);
        resp.headers.push("Contact", format!("<{contact}>"));
        set_body(&mut resp.headers, &mut resp.body, sdp.as_ref());
        c.dialog = Dialog::uas(&c.invite, &c.local_tag);
        c.state = CallState::Established;
        c.local_sdp = sdp;
        let key = c.invite_key.clone();
        self.send_response(&key, resp, now);
    }

    /// Final non-2xx answer to an incoming call.
    pub fn reject(&mut self, id: CallRef, code: u16, extra: &[(String, String)], now: UnixMs) {
        let Some(c) = self.calls.get_mut(&id).filter(|c| c.state == CallState::Incoming) else {
            return;
        };
        let mut resp = uas_response(&c.invite, code, &c.local_tag);
        for (n, v) in extra {
            resp.headers.push(n.clone(), v.clone());
        }
        c.state = CallState::Terminated;
        let key = c.invite_key.clone();
        self.send_response(&key, resp, now);
    }

    /// Ends the call whatever its state: CANCEL, reject or BYE.
    pub fn hangup(&mut self, id: CallRef, now: UnixMs) {
        let Some(state) = self.calls.get(&id).map(|c| c.state) else {
            return;
        };
        match state {
            CallState::Calling | CallState::Early => self.cancel(id, now),
            CallState::Incoming => self.reject(id, 486, &[], now),
            CallState::Established => self.bye(id, now),
            CallState::Terminated => {}
        }
    }

    pub fn cancel(&mut self, id: CallRef, now: UnixMs) {
        let Some(c) = self
            .calls
            .get_mut(&id)
            .filter(|c| matches!(c.state, CallState::Calling | CallState::Early))
        else {
            return;
        };
        c.cancel_requested = true;
        let key = c.invite_key.clone();
        let cancel = crate::transaction::cancel_for(&c.invite);
        self.record(true, &cancel.into());
        match self.layer.cancel(&key, now) {
            Ok(ev) => self.emit(ev),
            Err(e) => debug!(error = %e, "nothing to cancel"),
        }
    }

    pub fn bye(&mut self, id: CallRef, now: UnixMs) {
        let local = self.cfg.local;
        let ids = Arc::clone(&self.ids);
        let Some(c) = self.calls.get_mut(&id).filter(|c| c.state == CallState::Established) else {
            return;
        };
        let Some(d) = c.dialog.as_mut() else {
            return;
        };
        let bye = d.request(Method::Bye, &local, &ids);
        let dest = d.next_hop().unwrap_or(c.next_hop);
        c.state = CallState::Terminated;
        let key = self.send_client(bye, dest, now);
        if let Some(c) = self.calls.get_mut(&id) {
            c.bye_key = key;
        }
    }

    /// Sends a re-INVITE. `sdp` of `None` means an offerless (hold) INVITE;
    /// the answer then goes into the ACK from the call's `local_sdp`.
    pub fn reinvite(&mut self, id: CallRef, sdp: Option<SdpBody>, now: UnixMs) -> bool {
        let local = self.cfg.local;
        let contact = self.contact_uri();
        let ids = Arc::clone(&self.ids);
        let Some(c) = self
            .calls
            .get_mut(&id)
            .filter(|c| c.state == CallState::Established && c.reinvite_out.is_none())
        else {
            return false;
        };
        let Some(d) = c.dialog.as_mut() else {
            return false;
        };
        let mut req = d.request(Method::Invite, &local, &ids);
        req.headers.push("Contact", format!("<{contact}>"));
        set_body(&mut req.headers, &mut req.body, sdp.as_ref());
        let dest = d.next_hop().unwrap_or(c.next_hop);
        let offerless = sdp.is_none();
        if let Some(s) = sdp {
            c.local_sdp = Some(s);
        }
        match self.send_client(req, dest, now) {
            Some(key) => {
                if let Some(c) = self.calls.get_mut(&id) {
                    c.reinvite_out = Some((key, offerless));
                }
                true
            }
            None => false,
        }
    }

    /// Accepts a pending incoming re-INVITE.
    pub fn answer_reinvite(&mut self, id: CallRef, sdp: Option<SdpBody>, now: UnixMs) {
        let contact = self.contact_uri();
        let Some(c) = self.calls.get_mut(&id) else {
            return;
        };
        let Some((key, req)) = c.reinvite_in.take() else {
            return;
        };
        if sdp.is_some() {
            c.local_sdp = sdp;
        }
        let mut resp = uas_response(&req, 200, &c.local_tag);
        resp.headers.push("Contact", format!("<{contact}>"));
        let body = c.local_sdp.clone();
        set_body(&mut resp.headers, &mut resp.body, body.as_ref());
        self.send_response(&key, resp, now);
    }

    pub fn on_tick(&mut self, now: UnixMs) -> Vec<UaEvent> {
        let ev = self.layer.on_tick(now);
        self.process(ev, now)
    }

    pub fn on_message(&mut self, msg: Message, source: Endpoint, now: UnixMs) -> Vec<UaEvent> {
        let ev = self.layer.on_message(msg, source, now);
        self.process(ev, now)
    }

    fn process(&mut self, events: Vec<TxEvent>, now: UnixMs) -> Vec<UaEvent> {
        let mut out = Vec::new();
        for e in events {
            match e {
                TxEvent::Send { msg, to } => self.out.push((msg, to)),
                TxEvent::Request { req, source } => self.on_request(req, source, now, &mut out),
                TxEvent::Response { resp, key } => self.on_response(resp, key, now, &mut out),
                TxEvent::StrayResponse { resp, .. } => self.on_stray(resp, now),
                TxEvent::Timeout { key, response } => self.on_timeout(key, response, &mut out),
            }
        }
        out
    }

    fn find_dialog(&self, req: &Request) -> Option<CallRef> {
        self.calls
            .values()
            .filter(|c| c.dialog.as_ref().is_some_and(|d| d.matches_request(req)))
            .max_by_key(|c| c.id)
            .map(|c| c.id)
    }

    fn reply(&mut self, req: &Request, source: Endpoint, code: u16, now: UnixMs) {
        match self.layer.create_server_tx(req, source, now) {
            Ok(key) => {
                let resp = uas_response(req, code, &self.ids.tag());
                self.send_response(&key, resp, now);
            }
            Err(e) => debug!(error = %e, "cannot answer request"),
        }
    }

    fn on_request(&mut self, req: Request, source: Endpoint, now: UnixMs, out: &mut Vec<UaEvent>) {
        match req.method {
            Method::Ack => {
                let Some(id) = self.find_dialog(&req) else {
                    return;
                };
                self.record(false, &req.clone().into());
                let sdp = body_sdp(&req.body);
                let c = self.calls.get_mut(&id).expect("found");
                if sdp.is_some() {
                    c.remote_sdp = sdp.clone();
                }
                if !c.acked {
                    c.acked = true;
                    out.push(UaEvent::Confirmed { call: id, sdp });
                } else if sdp.is_some() {
                    out.push(UaEvent::Confirmed { call: id, sdp });
                }
            }
            Method::Cancel => {
                self.record(false, &req.clone().into());
                let target = TransactionKey::for_request(&req);
                let call = target.and_then(|k| {
                    self.calls
                        .values()
                        .find(|c| c.role == Role::Uas && c.invite_key == k && c.state == CallState::Incoming)
                        .map(|c| c.id)
                });
                match call {
                    Some(id) => {
                        self.reply(&req, source, 200, now);
                        self.reject(id, 487, &[], now);
                        out.push(UaEvent::Cancelled { call: id });
                    }
                    None => self.reply(&req, source, 481, now),
                }
            }
            Method::Invite if req.to_tag().is_some() => {
                self.record(false, &req.clone().into());
                let Some(id) = self.find_dialog(&req) else {
                    return self.reply(&req, source, 481, now);
                };
                if self.calls[&id].reinvite_in.is_some() || self.calls[&id].reinvite_out.is_some() {
                    return self.reply(&req, source, 491, now);
                }
                let Ok(key) = self.layer.create_server_tx(&req, source, now) else {
                    return;
                };
                let sdp = body_sdp(&req.body);
                let c = self.calls.get_mut(&id).expect("found");
                if let (Some(d), Some(contact)) = (c.dialog.as_mut(), req.contact()) {
                    d.remote_target = contact.uri;
                    d.remote_seq = req.cseq().map(|s| s.seq);
                }
                if sdp.is_some() {
                    c.remote_sdp = sdp.clone();
                }
                c.reinvite_in = Some((key, req));
                out.push(UaEvent::Reinvite { call: id, sdp });
            }
            Method::Invite => {
                self.record(false, &req.clone().into());
                let Ok(key) = self.layer.create_server_tx(&req, source, now) else {
                    return;
                };
                let id = self.next_id;
                self.next_id += 1;
                let remote_sdp = body_sdp(&req.body);
                self.calls.insert(
                    id,
                    Call {
                        id,
                        role: Role::Uas,
                        state: CallState::Incoming,
                        invite: req,
                        dialog: None,
                        local_sdp: None,
                        remote_sdp,
                        local_tag: self.ids.tag(),
                        last_provisional: None,
                        invite_key: key,
                        next_hop: source,
                        auth_tried: false,
                        cancel_requested: false,
                        acked: false,
                        reinvite_out: None,
                        reinvite_in: None,
                        bye_key: None,
                    },
                );
                out.push(UaEvent::Incoming { call: id });
            }
            Method::Bye => {
                self.record(false, &req.clone().into());
                match self.find_dialog(&req) {
                    Some(id) => {
                        self.reply(&req, source, 200, now);
                        let c = self.calls.get_mut(&id).expect("found");
                        if c.state != CallState::Terminated {
                            c.state = CallState::Terminated;
                            out.push(UaEvent::Terminated { call: id });
                        }
                    }
                    None => self.reply(&req, source, 481, now),
                }
            }
            Method::Options => {
                self.record(false, &req.clone().into());
                self.reply(&req, source, 200, now);
            }
            _ => {
                self.record(false, &req.clone().into());
                self.reply(&req, source, 405, now);
            }
        }
    }

    fn on_response(&mut self, resp: Response, key: TransactionKey, now: UnixMs, out: &mut Vec<UaEvent>) {
        let code = resp.code();
        if code == 100 {
            return;
        }
        let initial = self
            .calls
            .values()
            .find(|c| c.invite_key == key && c.role == Role::Uac)
            .map(|c| c.id);
        if let Some(id) = initial {
            return self.on_invite_response(id, resp, now, out);
        }
        let re = self
            .calls
            .values()
            .find(|c| c.reinvite_out.as_ref().is_some_and(|(k, _)| *k == key))
            .map(|c| c.id);
        if let Some(id) = re {
            return self.on_reinvite_response(id, resp, now, out);
        }
        let bye = self
            .calls
            .values()
            .find(|c| c.bye_key.as_ref() == Some(&key))
            .map(|c| c.id);
        if let Some(id) = bye {
            if code >= 200 {
                self.record(false, &resp.into());
                if let Some(c) = self.calls.get_mut(&id) {
                    c.bye_key = None;
                }
                out.push(UaEvent::Terminated { call: id });
            }
            return;
        }
        if key.method == Method::Cancel {
            if code >= 200 {
                self.record(false, &resp.into());
            }
            return;
        }
        self.record(false, &resp.clone().into());
        out.push(UaEvent::Response { key, resp });
    }

    fn on_invite_response(&mut self, id: CallRef, resp: Response, now: UnixMs, out: &mut Vec<UaEvent>) {
        let code = resp.code();
        let local = self.cfg.local;
        let ids = Arc::clone(&self.ids);
        let c = self.calls.get_mut(&id).expect("caller checked");
        if code < 200 {
            if c.last_provisional == Some(code) || c.state == CallState::Terminated {
                return;
            }
            c.last_provisional = Some(code);
            if c.state == CallState::Calling {
                c.state = CallState::Early;
            }
            self.record(false, &resp.into());
            out.push(UaEvent::Progress { call: id, code });
            return;
        }
        self.record(false, &resp.clone().into());
        let c = self.calls.get_mut(&id).expect("caller checked");
        if code < 300 {
            let Some(dialog) = Dialog::uac(&c.invite, &resp) else {
                c.state = CallState::Terminated;
                out.push(UaEvent::Failed {
                    call: id,
                    code: 502,
                    resp,
                });
                return;
            };
            let seq = c.invite.cseq().map(|s| s.seq).unwrap_or(1);
            let mut ack = dialog.ack(seq, &local, &ids);
            let dest = dialog.next_hop().unwrap_or(c.next_hop);
            c.remote_sdp = body_sdp(&resp.body);
            c.dialog = Some(dialog);
            if c.cancel_requested || c.state == CallState::Terminated {
                // Answered despite our CANCEL: confirm then hang up.
                c.state = CallState::Established;
                set_body(&mut ack.headers, &mut ack.body, None);
                self.record(true, &ack.clone().into());
                self.out.push((ack.into(), dest));
                self.bye(id, now);
                return;
            }
            c.state = CallState::Established;
            c.acked = true;
            let sdp = c.remote_sdp.clone();
            self.record(true, &ack.clone().into());
            self.out.push((ack.into(), dest));
            out.push(UaEvent::Answered { call: id, sdp });
            return;
        }
        if matches!(code, 401 | 407) && !c.auth_tried && !c.cancel_requested {
            if let Some((user, pass)) = self.cfg.credentials.clone() {
                let header = if code == 401 {
                    "WWW-Authenticate"
                } else {
                    "Proxy-Authenticate"
                };
                if let Some(ch) = resp.headers.get(header).and_then(Challenge::parse) {
                    let mut req = c.invite.clone();
                    let seq = req.cseq().map(|s| s.seq).unwrap_or(1) + 1;
                    req.headers.set("CSeq", format!("{seq} INVITE"));
                    req.headers.set("Via", local_via(&local, &ids.branch()).to_string());
                    let creds = Credentials::answer(&ch, &user, &pass, "INVITE", &req.uri.to_string());
                    let auth = if code == 401 {
                        "Authorization"
                    } else {
                        "Proxy-Authorization"
                    };
                    req.headers.set(auth, creds.to_string());
                    c.auth_tried = true;
                    c.invite = req.clone();
                    c.last_provisional = None;
                    let dest = c.next_hop;
                    if let Some(key) = self.send_client(req, dest, now) {
                        self.calls.get_mut(&id).expect("exists").invite_key = key;
                    }
                    return;
                }
            }
        }
        c.state = CallState::Terminated;
        if code == 487 && c.cancel_requested {
            out.push(UaEvent::Cancelled { call: id });
        } else {
            out.push(UaEvent::Failed { call: id, code, resp });
        }
    }

    fn on_reinvite_response(&mut self, id: CallRef, resp: Response, _now: UnixMs, out: &mut Vec<UaEvent>) {
        let code = resp.code();
        if code < 200 {
            return;
        }
        self.record(false, &resp.clone().into());
        let local = self.cfg.local;
        let ids = Arc::clone(&self.ids);
        let c = self.calls.get_mut(&id).expect("caller checked");
        let (_, offerless) = c.reinvite_out.take().expect("pending");
        if code >= 300 {
            out.push(UaEvent::ReinviteFailed { call: id, code });
            return;
        }
        let Some(d) = c.dialog.as_ref() else {
            return;
        };
        let seq = resp.cseq().map(|s| s.seq).unwrap_or(d.local_seq);
        let mut ack = d.ack(seq, &local, &ids);
        let dest = d.next_hop().unwrap_or(c.next_hop);
        let sdp = body_sdp(&resp.body);
        if sdp.is_some() {
            c.remote_sdp = sdp.clone();
        }
        if offerless {
            let answer = c.local_sdp.clone();
            set_body(&mut ack.headers, &mut ack.body, answer.as_ref());
        }
        self.record(true, &ack.clone().into());
        self.out.push((ack.into(), dest));
        out.push(UaEvent::ReinviteAnswered { call: id, sdp });
    }

    /// 2xx retransmissions: re-send the ACK without telling anybody.
    fn on_stray(&mut self, resp: Response, _now: UnixMs) {
        if resp.code() < 200 || resp.code() >= 300 || resp.cseq().map(|c| c.method) != Some(Method::Invite) {
            return;
        }
        let seq = resp.cseq().map(|s| s.seq).unwrap_or(0);
        let call_id = resp.call_id().unwrap_or_default();
        let Some(c) = self
            .calls
            .values()
            .find(|c| c.role == Role::Uac && c.invite.call_id() == Some(call_id) && c.dialog.is_some())
        else {
            return;
        };
        let d = c.dialog.as_ref().expect("filtered");
        if d.remote_tag.as_str() != resp.to_tag().unwrap_or_default() {
            return;
        }
        let mut ack = d.ack(seq, &self.cfg.local, &self.ids);
        if let Some((_, true)) = c.reinvite_out {
            let answer = c.local_sdp.clone();
            set_body(&mut ack.headers, &mut ack.body, answer.as_ref());
        }
        let dest = d.next_hop().unwrap_or(c.next_hop);
        self.out.push((ack.into(), dest));
    }

    fn on_timeout(&mut self, key: TransactionKey, response: Response, out: &mut Vec<UaEvent>) {
        if let Some(c) = self
            .calls
            .values_mut()
            .find(|c| c.invite_key == key && c.role == Role::Uac)
        {
            if matches!(c.state, CallState::Calling | CallState::Early) {
                c.state = CallState::Terminated;
                out.push(UaEvent::Failed {
                    call: c.id,
                    code: 408,
                    resp: response,
                });
            }
            return;
        }
        if let Some(c) = self
            .calls
            .values_mut()
            .find(|c| c.reinvite_out.as_ref().is_some_and(|(k, _)| *k == key))
        {
            c.reinvite_out = None;
            out.push(UaEvent::ReinviteFailed { call: c.id, code: 408 });
            return;
        }
        if let Some(c) = self.calls.values_mut().find(|c| c.bye_key.as_ref() == Some(&key)) {
            c.bye_key = None;
            out.push(UaEvent::Terminated { call: c.id });
            return;
        }
        out.push(UaEvent::Response { key, resp: response });
    }
}

/// Looks up where a URI points, falling back to `default`.
pub fn resolve_or(uri: &SipUri, default: Endpoint) -> Endpoint {
    uri_endpoint(uri).unwrap_or(default)
}
