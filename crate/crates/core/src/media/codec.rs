//! ITU G.711 mu-law companding.

use super::{AudioFrame, MediaError, FRAME_SAMPLES};

const BIAS: i32 = 0x84;
const CLIP: i32 = 32635;

pub fn linear_to_ulaw(sample: i16) -> u8 {
    let mut pcm = i32::from(sample);
    let mask = if pcm < 0 {
        pcm = -pcm;
        0x7F
    } else {
        0xFF
    };
    pcm = pcm.min(CLIP) + BIAS;
    // Segment = position of the highest set bit above bit 7.
    let seg = (0..8).find(|&s| pcm <= (0xFF << s) | ((1 << s) - 1)).unwrap_or(7);
    let uval = (seg << 4) | ((pcm >> (seg + 3)) & 0x0F);
    (uval ^ mask) as u8
}

pub fn ulaw_to_linear(byte: u8) -> i16 {
    let u = !byte;
    let exp = (u >> 4) & 0x07;
    let t = ((i32::from(u & 0x0F) << 3) + BIAS) << exp;
    (if u & 0x80 != 0 { BIAS - t } else { t - BIAS }) as i16
}

pub fn encode_pcmu(frame: &AudioFrame) -> Vec<u8> {
    frame.samples().iter().map(|&s| linear_to_ulaw(s)).collect()
}

pub fn decode_pcmu(bytes: &[u8]) -> Result<AudioFrame, MediaError> {
    if bytes.len() != FRAME_SAMPLES {
        return Err(MediaError::LengthMismatch {
            expected: FRAME_SAMPLES,
            actual: bytes.len(),
        });
    }
    AudioFrame::from_slice(&decode_samples(bytes))
}

/// Decodes a payload of any length.
pub fn decode_samples(bytes: &[u8]) -> Vec<i16> {
    bytes.iter().map(|&b| ulaw_to_linear(b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Decode table written straight from the segment/mantissa formula,
    /// without sharing any code with the codec.
    fn reference_table() -> [i32; 256] {
        let mut t = [0i32; 256];
        for (b, slot) in t.iter_mut().enumerate() {
            let c = !(b as u8);
            let negative = c & 0x80 != 0;
            let e = i32::from((c >> 4) & 7);
            let m = i32::from(c & 0x0F);
            let mag = 4 * ((2 * m + 33) * (1 << e) - 33);
            *slot = if negative { -mag } else { mag };
        }
        t
    }

    fn step(byte: u8) -> i32 {
        8 << ((!byte >> 4) & 7)
    }

    #[test]
    fn decoder_matches_reference_table() {
        let table = reference_table();
        for b in 0..=255u8 {
            assert_eq!(i32::from(ulaw_to_linear(b)), table[b as usize], "byte {b:#04x}");
        }
    }

    #[test]
    fn round_trip_error_within_segment_step() {
        let table = reference_table();
        for s in i16::MIN..=i16::MAX {
            let b = linear_to_ulaw(s);
            let err = (i32::from(s) - table[b as usize]).abs();
            assert!(err <= step(b), "sample {s}: err {err} step {}", step(b));
        }
    }

    #[test]
    fn silence_is_constant_byte() {
        let bytes = encode_pcmu(&AudioFrame::silence());
        assert!(bytes.iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn encode_monotone_in_magnitude() {
        let mut prev = 0u8;
        for s in 0..=i16::MAX {
            // Positive codes count down from 0xFF as magnitude rises.
            let code = !linear_to_ulaw(s) & 0x7F;
            assert!(code >= prev);
            prev = code;
        }
        let mut prev = 0u8;
        for s in (i16::MIN + 1..=0).rev() {
            let code = !linear_to_ulaw(s) & 0x7F;
            assert!(code >= prev);
            prev = code;
        }
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(matches!(
            decode_pcmu(&[0xFF; 80]),
            Err(MediaError::LengthMismatch {
                expected: 160,
                actual: 80
            })
        ));
    }
}
