//! UDP and TCP carriage for SIP messages.
//!
//! Every outbound UDP datagram passes through an optional [`PacketFilter`],
//! which is how the test harness injects loss, delay and partitions and
//! captures traffic. TCP is framed by Content-Length and never filtered.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use tracing::{debug, warn};

const POLL: Duration = Duration::from_millis(20);
const MAX_DATAGRAM: usize = 65_535;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Proto {
    Udp,
    Tcp,
}

impl Proto {
    pub fn via_name(self) -> &'static str {
        match self {
            Proto::Udp => "UDP",
            Proto::Tcp => "TCP",
        }
    }

    pub fn from_via(name: &str) -> Self {
        if name.eq_ignore_ascii_case("TCP") {
            Proto::Tcp
        } else {
            Proto::Udp
        }
    }

    pub fn is_reliable(self) -> bool {
        self == Proto::Tcp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub addr: SocketAddr,
    pub proto: Proto,
}

impl Endpoint {
    pub fn udp(addr: SocketAddr) -> Self {
        Self {
            addr,
            proto: Proto::Udp,
        }
    }

    pub fn tcp(addr: SocketAddr) -> Self {
        Self {
            addr,
            proto: Proto::Tcp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Deliver,
    Drop,
    Delay(Duration),
}

/// Hook consulted for every outbound datagram.
pub trait PacketFilter: Send + Sync {
    fn on_send(&self, from: SocketAddr, to: SocketAddr, data: &[u8]) -> Delivery;
}

/// Sends one datagram honouring the filter's verdict.
pub fn filtered_send(
    socket: &Arc<UdpSocket>,
    filter: Option<&Arc<dyn PacketFilter>>,
    to: SocketAddr,
    data: &[u8],
) -> io::Result<()> {
    let verdict = match filter {
        Some(f) => f.on_send(socket.local_addr()?, to, data),
        None => Delivery::Deliver,
    };
    match verdict {
        Delivery::Deliver => socket.send_to(data, to).map(|_| ()),
        Delivery::Drop => Ok(()),
        Delivery::Delay(d) => {
            let socket = Arc::clone(socket);
            let data = data.to_vec();
            thread::spawn(move || {
                thread::sleep(d);
                let _ = socket.send_to(&data, to);
            });
            Ok(())
        }
    }
}

/// Emits one trace line per signaling message under the `sip` target, the
/// feed behind the `--trace-sip` flag.
pub fn trace_sip(node: &str, outgoing: bool, peer: SocketAddr, data: &[u8]) {
    if !tracing::enabled!(target: "sip", tracing::Level::INFO) {
        return;
    }
    let text = String::from_utf8_lossy(data);
    let first = text.lines().next().unwrap_or_default();
    let call_id = text
        .lines()
        .take_while(|l| !l.is_empty())
        .filter_map(|l| l.split_once(':'))
        .find(|(n, _)| crate::sip::names_match(n.trim(), "Call-ID"))
        .map(|(_, v)| v.trim())
        .unwrap_or("-");
    let arrow = if outgoing { "->" } else { "<-" };
    tracing::info!(target: "sip", "{node} {arrow} {peer} | {first} | {call_id}");
}

#[derive(Debug, Clone)]
pub struct Inbound {
    pub data: Vec<u8>,
    pub source: Endpoint,
}

/// Length of the first complete message in a TCP stream buffer.
pub fn frame_len(buf: &[u8]) -> Option<usize> {
    let head_end = buf.windows(4).position(|w| w == b"\r\n\r\n")? + 4;
    let head = std::str::from_utf8(&buf[..head_end]).ok()?;
    let body = head
        .split("\r\n")
        .filter_map(|l| l.split_once(':'))
        .find(|(n, _)| crate::sip::names_match(n.trim(), "Content-Length"))
        .and_then(|(_, v)| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    (buf.len() >= head_end + body).then_some(head_end + body)
}

pub struct SipTransport {
    udp: Arc<UdpSocket>,
    tcp_local: Option<SocketAddr>,
    conns: Mutex<HashMap<SocketAddr, TcpStream>>,
    filter: Option<Arc<dyn PacketFilter>>,
    shutdown: Arc<AtomicBool>,
    inbound: Sender<Inbound>,
}

impl SipTransport {
    /// Binds UDP on `addr` and, when `tcp` is set, a TCP listener on the same
    /// port. Returns the transport and the stream of received messages.
    pub fn bind(
        addr: SocketAddr,
        tcp: bool,
        filter: Option<Arc<dyn PacketFilter>>,
    ) -> io::Result<(Arc<Self>, Receiver<Inbound>)> {
        let (udp, listener) = bind_pair(addr, tcp)?;
        udp.set_read_timeout(Some(POLL))?;
        let (tx, rx) = unbounded();
        let transport = Arc::new(Self {
            udp: Arc::new(udp),
            tcp_local: listener.as_ref().map(|l| l.local_addr()).transpose()?,
            conns: Mutex::new(HashMap::new()),
            filter,
            shutdown: Arc::new(AtomicBool::new(false)),
            inbound: tx,
        });
        transport.spawn_udp_reader();
        if let Some(listener) = listener {
            transport.spawn_acceptor(listener)?;
        }
        Ok((transport, rx))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.udp.local_addr().expect("bound socket")
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp_local
    }

    pub fn send(&self, to: &Endpoint, data: &[u8]) -> io::Result<()> {
        if self.shutdown.load(Ordering::Relaxed) {
            return Err(io::Error::new(io::ErrorKind::NotConnected, "transport closed"));
        }
        match to.proto {
            Proto::Udp => filtered_send(&self.udp, self.filter.as_ref(), to.addr, data),
            Proto::Tcp => self.send_tcp(to.addr, data),
        }
    }

    fn send_tcp(&self, to: SocketAddr, data: &[u8]) -> io::Result<()> {
        let mut conns = self.conns.lock().unwrap();
        if let Some(stream) = conns.get_mut(&to) {
            if stream.write_all(data).is_ok() {
                return Ok(());
            }
            conns.remove(&to);
        }
        let mut stream = TcpStream::connect_timeout(&to, Duration::from_secs(2))?;
        stream.write_all(data)?;
        self.spawn_tcp_reader(stream.try_clone()?, to);
        conns.insert(to, stream);
        Ok(())
    }

    pub fn close(&self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for (_, s) in self.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn spawn_udp_reader(&self) {
        let socket = Arc::clone(&self.udp);
        let stop = Arc::clone(&self.shutdown);
        let tx = self.inbound.clone();
        thread::spawn(move || {
            let mut buf = vec![0u8; MAX_DATAGRAM];
            while !stop.load(Ordering::Relaxed) {
                match socket.recv_from(&mut buf) {
                    Ok((n, from)) => {
                        let msg = Inbound {
                            data: buf[..n].to_vec(),
                            source: Endpoint::udp(from),
                        };
                        if tx.send(msg).is_err() {
                            break;
                        }
                    }
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    // ICMP port-unreachable surfaces here on Linux; not fatal.
                    Err(e) => debug!("udp recv: {e}"),
                }
            }
        });
    }

    fn spawn_acceptor(self: &Arc<Self>, listener: TcpListener) -> io::Result<()> {
        listener.set_nonblocking(true)?;
        let weak = Arc::downgrade(self);
        let stop = Arc::clone(&self.shutdown);
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let Some(this) = weak.upgrade() else { break };
                        let _ = stream.set_nonblocking(false);
                        if let Ok(reader) = stream.try_clone() {
                            this.spawn_tcp_reader(reader, peer);
                            this.conns.lock().unwrap().insert(peer, stream);
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => {
                        warn!("tcp accept: {e}");
                        thread::sleep(POLL);
                    }
                }
            }
        });
        Ok(())
    }

    fn spawn_tcp_reader(&self, mut stream: TcpStream, peer: SocketAddr) {
        let stop = Arc::clone(&self.shutdown);
        let tx = self.inbound.clone();
        let _ = stream.set_read_timeout(Some(POLL));
        thread::spawn(move || {
            let mut buf = Vec::new();
            let mut chunk = [0u8; 8192];
            while !stop.load(Ordering::Relaxed) {
                match stream.read(&mut chunk) {
                    Ok(0) => break,
                    Ok(n) => {
                        buf.extend_from_slice(&chunk[..n]);
                        while let Some(len) = frame_len(&buf) {
                            let data: Vec<u8> = buf.drain(..len).collect();
                            if tx
                                .send(Inbound {
                                    data,
                                    source: Endpoint::tcp(peer),
                                })
                                .is_err()
                            {
                                return;
                            }
                        }
                    }
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    Err(_) => break,
                }
            }
        });
    }
}

impl Drop for SipTransport {
    fn drop(&mut self) {
        self.close();
    }
}

fn bind_pair(addr: SocketAddr, tcp: bool) -> io::Result<(UdpSocket, Option<TcpListener>)> {
    if !tcp {
        return Ok((UdpSocket::bind(addr)?, None));
    }
    if addr.port() != 0 {
        return Ok((UdpSocket::bind(addr)?, Some(TcpListener::bind(addr)?)));
    }
    // Ephemeral port: find one free for both protocols.
    for _ in 0..32 {
        let udp = UdpSocket::bind(addr)?;
        if let Ok(l) = TcpListener::bind(udp.local_addr()?) {
            return Ok((udp, Some(l)));
        }
    }
    Err(io::Error::new(io::ErrorKind::AddrInUse, "no port free for udp and tcp"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_by_content_length() {
        let one = b"OPTIONS sip:a SIP/2.0\r\nContent-Length: 3\r\n\r\nabc";
        let mut stream = one.to_vec();
        stream.extend_from_slice(b"BYE sip:a SIP/2.0\r\n\r\n");
        assert_eq!(frame_len(&stream), Some(one.len()));
        assert_eq!(frame_len(&one[..one.len() - 1]), None);
        assert_eq!(frame_len(b"BYE sip:a SIP/2.0\r\n\r\n"), Some(21));
    }

    #[test]
    fn udp_and_tcp_delivery() {
        let local: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let (a, _arx) = SipTransport::bind(local, true, None).unwrap();
        let (b, brx) = SipTransport::bind(local, true, None).unwrap();
        let msg = b"OPTIONS sip:b SIP/2.0\r\nContent-Length: 0\r\n\r\n";
        a.send(&Endpoint::udp(b.local_addr()), msg).unwrap();
        let got = brx.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(got.data, msg);
        assert_eq!(got.source.proto, Proto::Udp);

        a.send(&Endpoint::tcp(b.tcp_addr().unwrap()), msg).unwrap();
        a.send(&Endpoint::tcp(b.tcp_addr().unwrap()), msg).unwrap();
        for _ in 0..2 {
            let got = brx.recv_timeout(Duration::from_secs(2)).unwrap();
            assert_eq!(got.data, msg);
            assert_eq!(got.source.proto, Proto::Tcp);
        }
    }

    struct DropAll;
    impl PacketFilter for DropAll {
        fn on_send(&self, _: SocketAddr, _: SocketAddr, _: &[u8]) -> Delivery {
            Delivery::Drop
        }
    }

    #[test]
    fn filter_can_drop() {
        let local: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let (a, _) = SipTransport::bind(local, false, Some(Arc::new(DropAll))).unwrap();
        let (b, brx) = SipTransport::bind(local, false, None).unwrap();
        a.send(&Endpoint::udp(b.local_addr()), b"x\r\n\r\n").unwrap();
        assert!(brx.recv_timeout(Duration::from_millis(200)).is_err());
    }
}
