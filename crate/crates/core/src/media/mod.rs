//! Minimal RTP media engine: G.711 mu-law, packet relay, file playback and
//! recording, conference mixing and telephone-event DTMF.

pub mod analysis;
pub mod codec;
pub mod dtmf;
pub mod mixer;
pub mod ports;
pub mod rtp;
pub mod session;
pub mod wav;

use std::path::PathBuf;

use thiserror::Error;

pub use analysis::{tone_energy, ToneGen};
pub use codec::{decode_pcmu, encode_pcmu, linear_to_ulaw, ulaw_to_linear};
pub use dtmf::{detect_dtmf, DtmfDetector, DtmfEvent, TelephoneEvent};
pub use mixer::{mix, Room};
pub use ports::PortAllocator;
pub use rtp::{is_rtp, RtpPacket};
pub use session::{Capture, MediaCommand, MediaEvent, MediaHandle, Sink, Source};

pub const SAMPLE_RATE: u32 = 8000;
pub const FRAME_SAMPLES: usize = 160;
pub const FRAME_MS: u64 = 20;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("expected {expected} samples, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("audio file missing: {0}")]
    FileMissing(PathBuf),
    #[error("unsupported WAV: {0}")]
    BadWav(String),
    #[error("RTP packet truncated")]
    Truncated,
    #[error("not an RTP version 2 packet")]
    BadVersion,
    #[error("no free media port in range")]
    MediaPortExhausted,
    #[error("media socket closed")]
    SocketClosed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 20 ms of 8 kHz mono audio.
#[derive(Clone, PartialEq, Eq)]
pub struct AudioFrame([i16; FRAME_SAMPLES]);

impl AudioFrame {
    pub fn silence() -> Self {
        Self([0; FRAME_SAMPLES])
    }

    pub fn constant(v: i16) -> Self {
        Self([v; FRAME_SAMPLES])
    }

    pub fn from_slice(s: &[i16]) -> Result<Self, MediaError> {
        let arr: [i16; FRAME_SAMPLES] = s.try_into().map_err(|_| MediaError::LengthMismatch {
            expected: FRAME_SAMPLES,
            actual: s.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn samples(&self) -> &[i16; FRAME_SAMPLES] {
        &self.0
    }
}

impl std::fmt::Debug for AudioFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let peak = self.0.iter().map(|s| s.unsigned_abs()).max().unwrap_or(0);
        write!(f, "AudioFrame(peak={peak})")
    }
}
