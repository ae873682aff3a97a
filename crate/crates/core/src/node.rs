//! Errors shared by the long-running server nodes.

use thiserror::Error;

use crate::config::ConfigError;
use crate::registrar::RegistrarError;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("socket: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Registrar(#[from] RegistrarError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
}
