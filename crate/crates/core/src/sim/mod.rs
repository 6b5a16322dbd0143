//! Deterministic open-world environment: world generator, detector stand-in
//! whose competence grows with labeled boxes, and the multi-round driver.
//!
//! Retraining is one competence update per round; epoch counts from real
//! protocols are folded into that update.

pub mod experiment;
pub mod surrogate;
pub mod world;

pub use experiment::{run_experiment, simulation_crb, ExperimentSetup, PolicySpec, Protocol, Trace};
pub use surrogate::{DetectorSurrogate, SurrogateConfig};
pub use world::{generate_world, ClassSpec, World, WorldConfig};
