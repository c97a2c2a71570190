//! Knowledge broker: accepts signed packets from trusted teachers, stores
//! them content-addressed, and serves them to students over a framed TCP
//! protocol.

pub mod client;
pub mod protocol;
pub mod registry;
pub mod server;

pub use client::Client;
pub use registry::{load_trusted_keys, PacketSummary, Refusal, Registry};
pub use server::{serve, ServerHandle};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("refused: {0}")]
    Refused(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Core(#[from] m2kt::M2ktError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BrokerError {
    /// Refusal code (`untrusted`, `invalid`, `not-found`, `malformed`) if the broker refused.
    pub fn refusal_code(&self) -> Option<&str> {
        match self {
            BrokerError::Refused(r) => Some(r.split(':').next().unwrap_or(r)),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, BrokerError>;
