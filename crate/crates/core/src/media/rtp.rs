//! RTP fixed header (no CSRC list, no extensions on output).

use super::MediaError;

pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RtpPacket {
    pub marker: bool,
    pub payload_type: u8,
    pub seq: u16,
    pub timestamp: u32,
    pub ssrc: u32,
    pub payload: Vec<u8>,
}

impl RtpPacket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.push(0x80);
        out.push((u8::from(self.marker) << 7) | (self.payload_type & 0x7F));
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.ssrc.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn parse(data: &[u8]) -> Result<Self, MediaError> {
        if data.len() < HEADER_LEN {
            return Err(MediaError::Truncated);
        }
        if data[0] >> 6 != 2 {
            return Err(MediaError::BadVersion);
        }
        let csrc = usize::from(data[0] & 0x0F) * 4;
        let mut start = HEADER_LEN + csrc;
        if data[0] & 0x10 != 0 {
            let ext = data.get(start + 2..start + 4).ok_or(MediaError::Truncated)?;
            start += 4 + usize::from(u16::from_be_bytes([ext[0], ext[1]])) * 4;
        }
        let mut end = data.len();
        if data[0] & 0x20 != 0 {
            end = end.saturating_sub(usize::from(*data.last().unwrap_or(&0)));
        }
        if start > end {
            return Err(MediaError::Truncated);
        }
        Ok(Self {
            marker: data[1] & 0x80 != 0,
            payload_type: data[1] & 0x7F,
            seq: u16::from_be_bytes([data[2], data[3]]),
            timestamp: u32::from_be_bytes([data[4], data[5], data[6], data[7]]),
            ssrc: u32::from_be_bytes([data[8], data[9], data[10], data[11]]),
            payload: data[start..end].to_vec(),
        })
    }
}

/// Cheap check for "RTP version 2". SIP text always starts with an
/// uppercase ASCII letter, whose top two bits are 01.
pub fn is_rtp(data: &[u8]) -> bool {
    data.len() >= HEADER_LEN && data[0] >> 6 == 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_twelve_bytes() {
        let p = RtpPacket {
            marker: true,
            payload_type: 0,
            seq: 7,
            timestamp: 160,
            ssrc: 0xdead_beef,
            payload: vec![0xFF; 160],
        };
        let b = p.to_bytes();
        assert_eq!(b.len(), 172);
        assert_eq!(&b[..12], &[0x80, 0x80, 0, 7, 0, 0, 0, 160, 0xde, 0xad, 0xbe, 0xef]);
        assert!(is_rtp(&b));
        assert!(!is_rtp(b"INVITE sip:2002@pbx SIP/2.0\r\n"));
    }

    proptest! {
        #[test]
        fn round_trip(marker: bool, pt in 0u8..128, seq: u16, ts: u32, ssrc: u32, payload in prop::collection::vec(any::<u8>(), 0..200)) {
            let p = RtpPacket { marker, payload_type: pt, seq, timestamp: ts, ssrc, payload };
            prop_assert_eq!(RtpPacket::parse(&p.to_bytes()).unwrap(), p);
        }
    }
}
