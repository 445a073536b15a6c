//! Geo-indistinguishable perturbation for high-frequency location streams.
//!
//! * [`mechanisms`]: the planar Laplace and planar staircase samplers.
//! * [`session`]: thresholded release with a per-session budget ledger.
//! * [`ingest`]: trace I/O, clipping, synthetic walks and the attack grid.
//! * [`attack`]: windowed k-NN inference and Bayes-risk estimation.
//! * [`objects`]: AR object fields and catchability.
//! * [`metrics`]: MNE, latency benchmarking and parameter sweeps.
//!
//! Batch work takes an [`Execution`]; see [`exec`] for the parallel and
//! sequential modes.

pub mod attack;
pub mod exec;
pub mod geo;
pub mod ingest;
pub mod lambert;
pub mod mechanisms;
pub mod metrics;
pub mod objects;
pub mod perturb;
pub mod rng;
pub mod session;

pub use exec::Execution;
pub use geo::{distance, GeoPoint, PlanarPoint, Projection};
pub use mechanisms::{Epsilon, StaircaseParams};
pub use perturb::{MechanismConfig, MechanismKind};
pub use rng::{RngSeed, RngStream};
pub use session::{BudgetExhausted, ReleaseDecision, ReleaseKind, TrPsmConfig, TrPsmSession};
