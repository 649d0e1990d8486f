//! Safety-structured behavior embeddings for trajectory scenarios and
//! crash-grounded adversary selection for closed-loop scenario generation.

pub mod adversary;
pub mod contrastive;
pub mod embed;
pub mod error;
pub mod io;
mod linalg;
pub mod lora;
pub mod metrics;
pub mod rollout;
pub mod safety;
pub mod scenario;

pub use error::{Error, Result};
