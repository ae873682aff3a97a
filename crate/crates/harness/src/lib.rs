//! Scenario-driven integration harness for the telephone system.
//!
//! A scenario declares proxies, a B2BUA, a simulated trunk and phones, then
//! scripts them step by step. Every datagram crosses a [`NetShim`] that can
//! drop, delay or partition traffic and keeps a capture for assertions such
//! as "no RTP ever reached the proxy".

pub mod ladder;
pub mod runner;
pub mod scenario;
pub mod shim;
pub mod topology;
pub mod trunk;

use std::time::Duration;

use ipts_core::media::Capture;
use thiserror::Error;

pub use ladder::{sequence_matches, Normalizer};
pub use runner::{run_file, run_scenario, Report, RunOptions, StepOutcome};
pub use scenario::{ActorKind, Scenario, ScenarioStep, Verb};
pub use shim::{NetShim, PacketRecord, ShimConfig};
pub use topology::{AddressPlan, Topology};
pub use trunk::{TrunkConfig, TrunkSim};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown actor {actor}")]
    UnknownActor { line: usize, actor: String },
    #[error("step {step}: timed out: {detail}")]
    StepTimeout { step: usize, detail: String },
    #[error("step {step}: {detail}")]
    AssertFailed { step: usize, detail: String },
    #[error("step {step}: {detail}")]
    StepFailed { step: usize, detail: String },
    #[error("no audio captured by {0}")]
    CaptureMissing(String),
    #[error("command rejected: {0}")]
    Command(String),
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Window of received audio the tone checks look at.
pub const TONE_WINDOW: Duration = Duration::from_millis(300);

/// Energy at `hz` in the most recent audio of `capture`, in dB relative to
/// a full-scale sine.
pub fn tone_energy(capture: &Capture, who: &str, hz: f64) -> Result<f64, HarnessError> {
    let samples = capture.recent(TONE_WINDOW);
    if samples.is_empty() {
        return Err(HarnessError::CaptureMissing(who.to_string()));
    }
    Ok(ipts_core::media::tone_energy(&samples, hz))
}
