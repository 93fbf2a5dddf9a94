//! Cooperative UAV detection and localization from the uplink CSI of many
//! base-station / CPE pairs.
//!
//! The crate covers the whole pipeline:
//!
//! - [`scenario`]: scene geometry, array and OFDM configuration, pair indexing
//! - [`channel`]: geometric multipath model, CFR synthesis, labels, dataset files
//! - [`dsp`]: angle-delay preprocessing of CFR tensors
//! - [`tensornet`]: a small reverse-mode autodiff engine with the layers the
//!   networks need, Adam, checkpoints and finite-difference checks
//! - [`detection`]: per-pair embedding network, gated-attention MIL pooling
//!   and joint training with random pair sampling
//! - [`selection`]: attention-guided top-k / threshold pair selection
//! - [`localization`]: per-pair localizer with spatial attention, Transformer
//!   medium fusion and the hard / soft fusion baselines
//! - [`metrics`]: MDP/FAP, APE statistics, correlation and sensing-region maps
//! - [`cli`]: the `fwasense` command line driver and run manifests

pub mod channel;
pub mod cli;
pub mod detection;
pub mod dsp;
pub mod error;
pub mod localization;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod selection;
pub mod tensornet;

pub use error::{Error, Result};
pub use scenario::{PairId, Point3, Scenario};
