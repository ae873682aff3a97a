//! Dialog state and request construction for user-agent roles.

use std::net::{SocketAddr, ToSocketAddrs};

use crate::ids::IdGen;
use crate::sip::{Method, NameAddr, Request, Response, SipHeaders, SipUri, StatusCode, Via};
use crate::transport::{Endpoint, Proto};

/// Resolves a URI host (IP literal or resolvable name) to a socket address.
pub fn uri_endpoint(uri: &SipUri) -> Option<Endpoint> {
    let addr: SocketAddr = (uri.host.as_str(), uri.port_or_default())
        .to_socket_addrs()
        .ok()?
        .find(|a| a.is_ipv4())?;
    let proto = match uri.params.value("transport") {
        Some(t) if t.eq_ignore_ascii_case("tcp") => Proto::Tcp,
        _ => Proto::Udp,
    };
    Some(Endpoint { addr, proto })
}

/// Like [`uri_endpoint`] but never touches the resolver: names yield `None`.
pub fn literal_endpoint(uri: &SipUri) -> Option<Endpoint> {
    uri.host.trim_matches(['[', ']']).parse::<std::net::IpAddr>().ok()?;
    uri_endpoint(uri)
}

/// URI naming a transport address, e.g. for Contact and Record-Route.
pub fn addr_uri(user: Option<&str>, ep: &Endpoint) -> SipUri {
    let mut uri = SipUri::new(user, ep.addr.ip().to_string(), Some(ep.addr.port()));
    if ep.proto == Proto::Tcp {
        uri.params.set("transport", Some("tcp"));
    }
    uri
}

pub fn local_via(local: &Endpoint, branch: &str) -> Via {
    let mut v = Via::new(
        local.proto.via_name(),
        local.addr.ip().to_string(),
        local.addr.port(),
        branch,
    );
    v.params.set("rport", None);
    v
}

/// Out-of-dialog request with the mandatory header set.
#[allow(clippy::too_many_arguments)]
pub fn new_request(
    method: Method,
    uri: SipUri,
    from: &NameAddr,
    to: &NameAddr,
    call_id: &str,
    seq: u32,
    via: &Via,
    contact: Option<&SipUri>,
) -> Request {
    let mut r = Request::new(method.clone(), uri);
    r.headers.push("Via", via.to_string());
    r.headers.push("Max-Forwards", "70");
    r.headers.push("From", from.to_string());
    r.headers.push("To", to.to_string());
    r.headers.push("Call-ID", call_id);
    r.headers.push("CSeq", format!("{seq} {method}"));
    if let Some(c) = contact {
        r.headers.push("Contact", format!("<{c}>"));
    }
    r
}

/// Response from a UAS: every non-100 response carries the dialog's tag.
pub fn uas_response(req: &Request, code: u16, local_tag: &str) -> Response {
    let mut resp = crate::sip::build_response(req, StatusCode::new(code), local_tag)
        .unwrap_or_else(|_| Response::new(StatusCode::new(code)));
    if code > 100 {
        if let Some(to) = resp.to_hdr() {
            if to.tag().is_none() {
                resp.headers.set("To", to.with_tag(local_tag).to_string());
            }
        }
    }
    resp
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub call_id: String,
    pub local_tag: String,
    pub remote_tag: String,
    pub local_uri: NameAddr,
    pub remote_uri: NameAddr,
    pub local_seq: u32,
    pub remote_seq: Option<u32>,
    pub remote_target: SipUri,
    /// Route header values in the order requests must carry them.
    pub route_set: Vec<String>,
}

fn record_routes(headers: &crate::sip::Headers) -> Vec<String> {
    headers
        .get_all("Record-Route")
        .flat_map(|v| v.split(','))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl Dialog {
    /// Dialog as seen by the caller once `resp` (tagged 1xx or 2xx) arrives.
    pub fn uac(invite: &Request, resp: &Response) -> Option<Self> {
        let from = invite.from_hdr()?;
        let to = resp.to_hdr()?;
        let mut route_set = record_routes(&resp.headers);
        route_set.reverse();
        Some(Self {
            call_id: invite.call_id()?.to_string(),
            local_tag: from.tag()?.to_string(),
            remote_tag: to.tag()?.to_string(),
            local_seq: invite.cseq()?.seq,
            remote_seq: None,
            remote_target: resp.contact().map(|c| c.uri).unwrap_or_else(|| invite.uri.clone()),
            route_set,
            local_uri: NameAddr::new(from.uri),
            remote_uri: NameAddr::new(to.uri),
        })
    }

    /// Dialog as seen by the callee answering `invite` with `local_tag`.
    pub fn uas(invite: &Request, local_tag: &str) -> Option<Self> {
        let from = invite.from_hdr()?;
        let to = invite.to_hdr()?;
        Some(Self {
            call_id: invite.call_id()?.to_string(),
            local_tag: local_tag.to_string(),
            remote_tag: from.tag()?.to_string(),
            local_seq: 0,
            remote_seq: Some(invite.cseq()?.seq),
            remote_target: invite.contact()?.uri,
            route_set: record_routes(&invite.headers),
            local_uri: NameAddr::new(to.uri),
            remote_uri: NameAddr::new(from.uri),
        })
    }

    /// Whether an incoming request belongs to this dialog.
    pub fn matches_request(&self, req: &Request) -> bool {
        req.call_id() == Some(self.call_id.as_str())
            && req.to_tag().as_deref() == Some(self.local_tag.as_str())
            && req.from_tag().as_deref() == Some(self.remote_tag.as_str())
    }

    /// Where in-dialog requests are sent first.
    pub fn next_hop(&self) -> Option<Endpoint> {
        match self.route_set.first() {
            Some(r) => uri_endpoint(&r.parse::<NameAddr>().ok()?.uri),
            None => uri_endpoint(&self.remote_target),
        }
    }

    /// Builds the next in-dialog request. ACK and CANCEL reuse the current
    /// sequence number; everything else takes a new one.
    pub fn request(&mut self, method: Method, local: &Endpoint, ids: &IdGen) -> Request {
        if !matches!(method, Method::Ack | Method::Cancel) {
            self.local_seq += 1;
        }
        let from = self.local_uri.clone().with_tag(&self.local_tag);
        let to = self.remote_uri.clone().with_tag(&self.remote_tag);
        let via = local_via(local, &ids.branch());
        let mut r = new_request(
            method,
            self.remote_target.clone(),
            &from,
            &to,
            &self.call_id,
            self.local_seq,
            &via,
            None,
        );
        for route in &self.route_set {
            r.headers.push("Route", route.clone());
        }
        r
    }

    /// ACK for a 2xx to the INVITE with sequence number `seq`.
    pub fn ack(&self, seq: u32, local: &Endpoint, ids: &IdGen) -> Request {
        let mut d = self.clone();
        d.local_seq = seq;
        d.request(Method::Ack, local, ids)
    }
}

/// The URI form used for routes pointing at `ep`.
pub fn route_value(ep: &Endpoint) -> String {
    let mut uri = addr_uri(None, ep);
    uri.params.set("lr", None);
    format!("<{uri}>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sip::parse_uri;

    fn ep(port: u16) -> Endpoint {
        Endpoint::udp(format!("127.0.0.1:{port}").parse().unwrap())
    }

    fn invite() -> Request {
        let ids = IdGen::seeded(3);
        let from = NameAddr::new(parse_uri("sip:2001@pbx").unwrap()).with_tag("ftag");
        let to = NameAddr::new(parse_uri("sip:2002@pbx").unwrap());
        let contact = addr_uri(Some("2001"), &ep(7000));
        new_request(
            Method::Invite,
            parse_uri("sip:2002@pbx").unwrap(),
            &from,
            &to,
            "cid",
            1,
            &local_via(&ep(7000), &ids.branch()),
            Some(&contact),
        )
    }

    #[test]
    fn both_sides_agree() {
        let mut inv = invite();
        // Proxy added itself on the way.
        inv.headers.prepend("Record-Route", route_value(&ep(5060)));
        let mut ok = uas_response(&inv, 200, "ttag");
        ok.headers
            .push("Contact", format!("<{}>", addr_uri(Some("2002"), &ep(8000))));
        let uac = Dialog::uac(&inv, &ok).unwrap();
        let uas = Dialog::uas(&inv, "ttag").unwrap();
        assert_eq!(uac.local_tag, uas.remote_tag);
        assert_eq!(uac.remote_tag, uas.local_tag);
        assert_eq!(uac.next_hop(), Some(ep(5060)));
        assert_eq!(uas.next_hop(), Some(ep(5060)));
        assert_eq!(uac.remote_target.to_string(), "sip:2002@127.0.0.1:8000");
    }

    #[test]
    fn in_dialog_requests_count_up() {
        let inv = invite();
        let mut ok = uas_response(&inv, 200, "ttag");
        ok.headers.push("Contact", "<sip:2002@127.0.0.1:8000>");
        let ids = IdGen::seeded(1);
        let mut d = Dialog::uac(&inv, &ok).unwrap();
        let ack = d.ack(1, &ep(7000), &ids);
        assert_eq!(ack.cseq().unwrap().seq, 1);
        let bye = d.request(Method::Bye, &ep(7000), &ids);
        assert_eq!(bye.cseq().unwrap().seq, 2);
        assert!(bye.check_mandatory().is_ok());
        let uas = Dialog::uas(&inv, "ttag").unwrap();
        assert!(uas.matches_request(&bye));
        assert_eq!(d.next_hop(), Some(ep(8000)));
    }

    #[test]
    fn provisional_carries_tag_but_trying_does_not() {
        let inv = invite();
        assert_eq!(uas_response(&inv, 180, "t1").to_tag().as_deref(), Some("t1"));
        assert_eq!(uas_response(&inv, 100, "t1").to_tag(), None);
    }
}
