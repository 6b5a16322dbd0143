//! Open-world active learning for LiDAR 3D detection pools.
//!
//! The crate scores unlabeled frames with Open Label Conciseness (an entropy
//! over known-class masses plus an unknown mass built from residual
//! confidence) and a set of baseline policies, runs the Open-CRB loop (OLC in
//! the first round, the concise/representative/balanced CRB filter after), and
//! evaluates detectors with 40-point AP, mAP over unknown and known classes,
//! their harmonic mean, and box-count annotation cost.
//!
//! A deterministic simulator stands in for detector training so whole
//! experiments run in seconds.

pub mod crb;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    annotate, unknown_to_known_ratio, BudgetLedger, ClassCatalog, ClassId, FrameId, FrameRecord,
    GroundTruthBox, PoolState, PredictedBox, RoundEntry,
};
pub use scoring::{Policy, ScoredFrame};
