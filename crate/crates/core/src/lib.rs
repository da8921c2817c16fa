//! Uplink-assisted implicit CSI feedback for FDD massive MIMO.
//!
//! The crate covers the whole chain: paired uplink/downlink channel synthesis,
//! per-subband dominant eigenvectors, correlation enhancement in the
//! eigenspace, angular-delay input alignment, a quantized autoencoder whose
//! decoder is fed uplink magnitudes, and the experiment harness around them.

pub mod bce;
mod binio;
pub mod channel;
pub mod codec;
pub mod dataset;
pub mod eigen;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod ifa;
pub mod metrics;
pub mod pipeline;
pub mod types;

pub use binio::atomic_write;
pub use error::{Error, Result};
pub use exec::Exec;
pub use types::{default_config, desk_config, ChannelPair, ComplexMatrix, Link, SystemConfig, UplinkChannels};
