//! Even-port allocation for RTP sockets.

use std::net::{IpAddr, SocketAddr, UdpSocket};
use std::sync::Mutex;

use super::MediaError;

pub const DEFAULT_RANGE: (u16, u16) = (16384, 32767);

/// Hands out sockets on even ports, sequentially with wrap-around. Ports
/// the OS refuses (already bound elsewhere) are skipped.
#[derive(Debug)]
pub struct PortAllocator {
    ip: IpAddr,
    lo: u16,
    hi: u16,
    next: Mutex<u16>,
}

impl PortAllocator {
    pub fn new(ip: IpAddr, lo: u16, hi: u16) -> Self {
        let lo = lo + lo % 2;
        Self {
            ip,
            lo,
            hi: hi.max(lo),
            next: Mutex::new(lo),
        }
    }

    pub fn ip(&self) -> IpAddr {
        self.ip
    }

    pub fn range(&self) -> (u16, u16) {
        (self.lo, self.hi)
    }

    pub fn contains(&self, port: u16) -> bool {
        (self.lo..=self.hi).contains(&port)
    }

    pub fn allocate(&self) -> Result<UdpSocket, MediaError> {
        let mut next = self.next.lock().unwrap();
        let slots = usize::from((self.hi - self.lo) / 2 + 1);
        for _ in 0..slots {
            let port = *next;
            *next = if port >= self.hi - 1 { self.lo } else { port + 2 };
            if let Ok(sock) = UdpSocket::bind(SocketAddr::new(self.ip, port)) {
                return Ok(sock);
            }
        }
        Err(MediaError::MediaPortExhausted)
    }
}
