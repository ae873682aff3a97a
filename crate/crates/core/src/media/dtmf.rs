//! Telephone-event (named event) DTMF payloads.

use super::rtp::RtpPacket;
use crate::sip::TELEPHONE_EVENT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DtmfEvent {
    pub digit: char,
    pub duration_ms: u32,
}

pub fn event_code(digit: char) -> Option<u8> {
    match digit {
        '0'..='9' => Some(digit as u8 - b'0'),
        '*' => Some(10),
        '#' => Some(11),
        _ => None,
    }
}

pub fn digit_for(code: u8) -> Option<char> {
    match code {
        0..=9 => Some((b'0' + code) as char),
        10 => Some('*'),
        11 => Some('#'),
        _ => None,
    }
}

/// Four-byte event payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TelephoneEvent {
    pub event: u8,
    pub end: bool,
    pub volume: u8,
    /// In timestamp units (1/8000 s).
    pub duration: u16,
}

impl TelephoneEvent {
    pub fn to_bytes(self) -> [u8; 4] {
        let d = self.duration.to_be_bytes();
        [self.event, (u8::from(self.end) << 7) | (self.volume & 0x3F), d[0], d[1]]
    }

    pub fn parse(b: &[u8]) -> Option<Self> {
        let b: &[u8; 4] = b.get(..4)?.try_into().ok()?;
        Some(Self {
            event: b[0],
            end: b[1] & 0x80 != 0,
            volume: b[1] & 0x3F,
            duration: u16::from_be_bytes([b[2], b[3]]),
        })
    }
}

/// Payloads for one key press: progress updates every 20 ms, then the end
/// packet three times.
pub fn press(digit: char, duration_ms: u32) -> Option<Vec<TelephoneEvent>> {
    let event = event_code(digit)?;
    let total = (duration_ms * 8).min(u32::from(u16::MAX)) as u16;
    let mut out = Vec::new();
    let mut d = 160u16;
    while d < total {
        out.push(TelephoneEvent {
            event,
            end: false,
            volume: 10,
            duration: d,
        });
        d += 160;
    }
    for _ in 0..3 {
        out.push(TelephoneEvent {
            event,
            end: true,
            volume: 10,
            duration: total,
        });
    }
    Some(out)
}

/// Turns a packet stream into key presses, one per end-marked run.
#[derive(Debug, Default)]
pub struct DtmfDetector {
    last_reported: Option<(u32, u32)>,
}

impl DtmfDetector {
    pub fn push(&mut self, pkt: &RtpPacket) -> Option<DtmfEvent> {
        if pkt.payload_type != TELEPHONE_EVENT {
            return None;
        }
        let ev = TelephoneEvent::parse(&pkt.payload)?;
        let digit = digit_for(ev.event)?;
        if !ev.end {
            return None;
        }
        let id = (pkt.ssrc, pkt.timestamp);
        if self.last_reported == Some(id) {
            return None;
        }
        self.last_reported = Some(id);
        Some(DtmfEvent {
            digit,
            duration_ms: u32::from(ev.duration) / 8,
        })
    }
}

pub fn detect_dtmf(packets: &[RtpPacket]) -> Vec<DtmfEvent> {
    let mut d = DtmfDetector::default();
    packets.iter().filter_map(|p| d.push(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(seq: u16, ts: u32, pt: u8, payload: Vec<u8>) -> RtpPacket {
        RtpPacket {
            marker: false,
            payload_type: pt,
            seq,
            timestamp: ts,
            ssrc: 9,
            payload,
        }
    }

    fn ev(event: u8, end: bool, duration: u16) -> Vec<u8> {
        TelephoneEvent {
            event,
            end,
            volume: 10,
            duration,
        }
        .to_bytes()
        .to_vec()
    }

    #[test]
    fn five_packet_run_is_one_digit() {
        let pkts: Vec<_> = (0..5u16)
            .map(|i| pkt(i, 800, 101, ev(2, i == 4, 160 * (i + 1))))
            .collect();
        assert_eq!(
            detect_dtmf(&pkts),
            [DtmfEvent {
                digit: '2',
                duration_ms: 100
            }]
        );
    }

    #[test]
    fn repeated_end_packets_and_audio_ignored() {
        let mut pkts = vec![pkt(0, 0, 0, vec![0xFF; 160])];
        pkts.extend((1..4).map(|i| pkt(i, 320, 101, ev(11, true, 800))));
        pkts.push(pkt(5, 480, 0, vec![0xFF; 160]));
        assert_eq!(detect_dtmf(&pkts).len(), 1);
        assert_eq!(detect_dtmf(&pkts)[0].digit, '#');
    }

    #[test]
    fn generated_press_detects() {
        let payloads = press('7', 100).unwrap();
        let pkts: Vec<_> = payloads
            .iter()
            .enumerate()
            .map(|(i, e)| pkt(i as u16, 1600, 101, e.to_bytes().to_vec()))
            .collect();
        assert_eq!(
            detect_dtmf(&pkts),
            [DtmfEvent {
                digit: '7',
                duration_ms: 100
            }]
        );
        assert!(press('x', 100).is_none());
    }
}
