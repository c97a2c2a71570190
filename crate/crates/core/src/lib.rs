pub mod adversarial;
pub mod alignment;
mod binio;
pub mod error;
pub mod extract;
pub mod kd;
pub mod numerics;
pub mod packet;
pub mod pipeline;
pub mod substrate;
pub mod task;
pub mod verify;

pub use ed25519_dalek::SigningKey;
pub use error::{M2ktError, Result};
