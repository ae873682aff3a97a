//! Core of a distributed SIP telephone system.
//!
//! Signaling lives in [`sip`] and [`transaction`]; call control is split
//! between the stateless-by-default [`proxy`] (with its [`registrar`]) and
//! the media-anchoring [`b2bua`]. End devices are modelled by [`ua`].

pub mod b2bua;
pub mod clock;
pub mod config;
pub mod dialog;
pub mod digest;
pub mod ids;
pub mod media;
pub mod node;
pub mod proxy;
pub mod registrar;
pub mod sip;
pub mod transaction;
pub mod transport;
pub mod ua;
