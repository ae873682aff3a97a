//! Fault-injecting packet filter that also keeps a capture of the run.
//!
//! Verdicts depend only on the seed, the link and the packet bytes plus how
//! many times those exact bytes crossed that link before, so a replayed run
//! loses the same packets no matter how threads interleave.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ipts_core::media::is_rtp;
use ipts_core::transport::{Delivery, PacketFilter};
use md5::{Digest, Md5};

#[derive(Debug, Clone)]
pub struct PacketRecord {
    pub at_ms: u64,
    pub from: SocketAddr,
    pub to: SocketAddr,
    pub len: usize,
    pub rtp: bool,
    pub dropped: bool,
    /// Signaling bytes; RTP payloads are not kept.
    pub data: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Default)]
pub struct ShimConfig {
    pub loss_pct: f64,
    pub delay_ms: u64,
    /// Unordered address pairs that cannot reach each other.
    pub partitions: Vec<(IpAddr, IpAddr)>,
    pub seed: u64,
}

#[derive(Default)]
struct State {
    partitions: HashSet<(IpAddr, IpAddr)>,
    seen: HashMap<[u8; 16], u32>,
    log: Vec<PacketRecord>,
}

pub struct NetShim {
    loss_pct: f64,
    delay: Duration,
    seed: u64,
    started: Instant,
    state: Mutex<State>,
}

fn link(a: IpAddr, b: IpAddr) -> (IpAddr, IpAddr) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl NetShim {
    pub fn new(cfg: ShimConfig) -> Self {
        let partitions = cfg.partitions.iter().map(|&(a, b)| link(a, b)).collect();
        Self {
            loss_pct: cfg.loss_pct.clamp(0.0, 100.0),
            delay: Duration::from_millis(cfg.delay_ms),
            seed: cfg.seed,
            started: Instant::now(),
            state: Mutex::new(State {
                partitions,
                ..State::default()
            }),
        }
    }

    pub fn loss_pct(&self) -> f64 {
        self.loss_pct
    }

    pub fn partition(&self, a: IpAddr, b: IpAddr) {
        self.state.lock().unwrap().partitions.insert(link(a, b));
    }

    pub fn heal(&self, a: IpAddr, b: IpAddr) {
        self.state.lock().unwrap().partitions.remove(&link(a, b));
    }

    /// Maps the packet and its repeat count onto [0, 100).
    fn roll(&self, from: SocketAddr, to: SocketAddr, data: &[u8], nth: u32) -> f64 {
        let mut h = Md5::new();
        h.update(self.seed.to_be_bytes());
        h.update(from.to_string().as_bytes());
        h.update(b">");
        h.update(to.to_string().as_bytes());
        h.update(data);
        h.update(nth.to_be_bytes());
        let d = h.finalize();
        let v = u64::from_be_bytes(d[..8].try_into().expect("16-byte digest"));
        (v >> 11) as f64 / (1u64 << 53) as f64 * 100.0
    }

    pub fn records(&self) -> Vec<PacketRecord> {
        self.state.lock().unwrap().log.clone()
    }

    /// RTP packets that made it onto the wire towards `ip`.
    pub fn rtp_delivered_to(&self, ip: IpAddr) -> usize {
        let st = self.state.lock().unwrap();
        st.log.iter().filter(|r| r.rtp && !r.dropped && r.to.ip() == ip).count()
    }

    /// Signaling packets sent from or to `ip`.
    pub fn signaling_touching(&self, ip: IpAddr) -> Vec<PacketRecord> {
        let st = self.state.lock().unwrap();
        st.log
            .iter()
            .filter(|r| r.data.is_some() && (r.from.ip() == ip || r.to.ip() == ip))
            .cloned()
            .collect()
    }

    pub fn dropped(&self) -> usize {
        self.state.lock().unwrap().log.iter().filter(|r| r.dropped).count()
    }

    /// Writes `packets.tsv` and `signaling.txt` under `dir`.
    pub fn write_capture(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let records = self.records();
        let mut tsv = String::from("at_ms\tfrom\tto\tlen\tkind\tverdict\n");
        let mut sip = String::new();
        for r in &records {
            let kind = if r.rtp { "rtp" } else { "sip" };
            let verdict = if r.dropped { "dropped" } else { "sent" };
            let _ = writeln!(tsv, "{}\t{}\t{}\t{}\t{kind}\t{verdict}", r.at_ms, r.from, r.to, r.len);
            if let Some(d) = &r.data {
                let _ = writeln!(sip, "=== {} ms {} -> {} ({verdict})", r.at_ms, r.from, r.to);
                sip.push_str(&String::from_utf8_lossy(d));
                sip.push('\n');
            }
        }
        std::fs::write(dir.join("packets.tsv"), tsv)?;
        std::fs::write(dir.join("signaling.txt"), sip)
    }
}

impl PacketFilter for NetShim {
    fn on_send(&self, from: SocketAddr, to: SocketAddr, data: &[u8]) -> Delivery {
        let rtp = is_rtp(data);
        let mut st = self.state.lock().unwrap();
        let cut = st.partitions.contains(&link(from.ip(), to.ip()));
        let lost = !cut && self.loss_pct > 0.0 && {
            let mut key = Md5::new();
            key.update(from.to_string().as_bytes());
            key.update(to.to_string().as_bytes());
            key.update(data);
            let nth = st.seen.entry(key.finalize().into()).or_insert(0);
            *nth += 1;
            let n = *nth;
            self.roll(from, to, data, n) < self.loss_pct
        };
        let dropped = cut || lost;
        st.log.push(PacketRecord {
            at_ms: self.started.elapsed().as_millis() as u64,
            from,
            to,
            len: data.len(),
            rtp,
            dropped,
            data: (!rtp).then(|| data.to_vec()),
        });
        if dropped {
            Delivery::Drop
        } else if self.delay.is_zero() {
            Delivery::Deliver
        } else {
            Delivery::Delay(self.delay)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(s: &str) -> SocketAddr {
        s.parse().unwrap()
    }

    fn verdicts(seed: u64, loss: f64, n: usize) -> Vec<bool> {
        let shim = NetShim::new(ShimConfig {
            loss_pct: loss,
            seed,
            ..ShimConfig::default()
        });
        (0..n)
            .map(|i| {
                let data = format!("MSG {} SIP/2.0\r\n\r\n", i % 7);
                shim.on_send(a("127.0.1.1:5060"), a("127.0.2.1:5060"), data.as_bytes()) == Delivery::Drop
            })
            .collect()
    }

    #[test]
    fn partitions_cut_both_directions() {
        let shim = NetShim::new(ShimConfig {
            partitions: vec![(a("127.0.1.1:1").ip(), a("127.0.2.1:1").ip())],
            ..ShimConfig::default()
        });
        assert_eq!(
            shim.on_send(a("127.0.1.1:5060"), a("127.0.2.1:5060"), b"x"),
            Delivery::Drop
        );
        assert_eq!(
            shim.on_send(a("127.0.2.1:5060"), a("127.0.1.1:9"), b"x"),
            Delivery::Drop
        );
        assert_eq!(
            shim.on_send(a("127.0.2.1:5060"), a("127.0.1.2:9"), b"x"),
            Delivery::Deliver
        );
        shim.heal(a("127.0.2.1:1").ip(), a("127.0.1.1:1").ip());
        assert_eq!(
            shim.on_send(a("127.0.1.1:5060"), a("127.0.2.1:5060"), b"x"),
            Delivery::Deliver
        );
        assert_eq!(shim.dropped(), 2);
    }

    #[test]
    fn loss_rate_is_close_to_requested() {
        let v = verdicts(7, 20.0, 5000);
        let rate = v.iter().filter(|d| **d).count() as f64 / v.len() as f64;
        assert!((0.17..0.23).contains(&rate), "{rate}");
    }

    #[test]
    fn retransmissions_get_fresh_rolls() {
        // The same bytes repeated must not share one fate, or a lost INVITE
        // would be lost forever.
        let v = verdicts(3, 50.0, 70);
        let first_of_a_kind: Vec<bool> = v.iter().step_by(7).copied().collect();
        assert!(first_of_a_kind.contains(&true) && first_of_a_kind.contains(&false));
    }

    #[test]
    fn capture_keeps_signaling_only() {
        let shim = NetShim::new(ShimConfig::default());
        let mut rtp = vec![0x80, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 1];
        rtp.extend([0xff; 160]);
        shim.on_send(a("127.0.1.1:16384"), a("127.0.1.2:16384"), &rtp);
        shim.on_send(
            a("127.0.1.1:5060"),
            a("127.0.2.1:5060"),
            b"OPTIONS sip:x SIP/2.0\r\n\r\n",
        );
        let r = shim.records();
        assert!(r[0].rtp && r[0].data.is_none());
        assert!(!r[1].rtp && r[1].data.is_some());
        assert_eq!(shim.rtp_delivered_to(a("127.0.1.2:0").ip()), 1);
        assert_eq!(shim.signaling_touching(a("127.0.2.1:0").ip()).len(), 1);
        let dir = tempfile::tempdir().unwrap();
        shim.write_capture(dir.path()).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("packets.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn same_seed_same_verdicts(seed in any::<u64>(), loss in 0.0f64..100.0) {
            prop_assert_eq!(verdicts(seed, loss, 60), verdicts(seed, loss, 60));
        }

        #[test]
        fn zero_loss_drops_nothing(seed in any::<u64>()) {
            prop_assert!(verdicts(seed, 0.0, 60).iter().all(|d| !d));
        }
    }
}
