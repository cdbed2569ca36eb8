//! Simulation-based safety verification of affine hybrid automata.
//!
//! A nominal trajectory is simulated from a chosen initial state and a ball of
//! initial conditions around it is certified, in the metric of a quadratic
//! bisimulation function, so that every trajectory starting in the ball avoids
//! the unsafe set over the simulated horizon.
//!
//! Two certificates are provided:
//!
//! * [`robust::robust_neighborhood`]: trajectories from the ball follow the
//!   same event sequence as the nominal one and stay safe.
//! * [`safe::safe_neighborhood`]: trajectories from the ball may take other
//!   branches of the event tree but stay safe. The ball is never smaller than
//!   the robust one and does not collapse on guard-critical trajectories.
//!
//! [`cover::cover_initial_set`] lifts either certificate to a compact initial
//! box by recursive subdivision.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bisim;
pub mod cover;
pub mod interval;
pub mod linalg;
pub mod model;
pub mod qp;
pub mod robust;
pub mod safe;
pub mod search;
pub mod simulate;

pub use bisim::{DistanceResult, Metrics, QuadraticBisimFunction};
pub use cover::{CoverageReport, Mode, Verdict};
pub use model::{
    EventDef, EventId, HybridAutomaton, InitialSet, Location, LocationId, ModelDocument, Polytope, VerificationConfig,
};
pub use robust::{CriticalityClass, Neighborhood, NeighborhoodKind};
pub use safe::{EventTreeNode, SafeSolver};
pub use simulate::{HybridTrajectory, TerminalStatus, TrajectorySegment};

/// Vector type used for continuous states.
pub type Vector = nalgebra::DVector<f64>;
/// Matrix type used for dynamics, resets and metrics.
pub type Matrix = nalgebra::DMatrix<f64>;
