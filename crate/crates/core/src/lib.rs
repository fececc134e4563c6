//! Desk-scale edge language-model mechanisms: threshold-gated token routing,
//! clustered sparse attention, hybrid-precision fake quantization with a
//! composite training loss, cross-domain metrics and per-token cost formulas.

pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod router;
pub mod scar;

pub use error::{GemError, Result};
