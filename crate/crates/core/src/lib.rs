//! Static sparse masks with topology-aware one-shot revival.
//!
//! The crate covers mask construction ([`prune`]), the revival step
//! ([`revival`]), zero-recovery and connectivity analysis ([`coverage`]) and
//! a small deterministic MLP harness for comparing static, revived and
//! dynamic sparse training on a drifting regression task ([`train`]).

pub mod error;
pub mod coverage;
pub mod format;
pub mod mask;
pub mod network;
pub mod prune;
pub mod revival;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use mask::{apply_mask, DensityReport, LayerMask, NetworkMask, Provenance, RevivalMode};
pub use network::{init_params, LayerShape, LayerSpec, NetworkSpec, Params};
pub use rng::Rng;
