//! User agents: the shared call engine, the softphone and its state model.

mod core;
mod ladder;
mod phone;
mod state;

pub use self::core::{resolve_or, Call, CallRef, CallState, Role, UaConfig, UaCore, UaEvent};
pub use ladder::{Ladder, LadderEntry};
pub use phone::{Phone, PhoneConfig, PhoneShared};
pub use state::{CallStatus, Registration, SoftphoneCommand, SoftphoneState};
