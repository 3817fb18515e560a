//! Closed-loop guidance and control library for crosswind kite flight.
//!
//! The library is organised as a two-level cascade around a spherical
//! kinematic kite model:
//!
//! * [`kinematics`] — line-angle state, unicycle/velocity models, forward-Euler
//!   discretisation and its analytic Jacobians.
//! * [`reference_path`] — periodic figure-of-eight reference generation
//!   consistent with the discrete model and the active heading-rate limit.
//! * [`tracking`] — inner-loop heading control with predictor feedback
//!   compensating the steering input delay.
//! * [`robustness`] — frequency-domain robust-performance analysis and
//!   auto-tuning of the tracking gain and the command rate limit.
//! * [`guidance`] — outer-loop MPC on the deviation system along the
//!   reference, condensed into a dense QP per sample.
//! * [`qp`] — dense strictly-convex QP solver (dual active set) with
//!   warm starting and KKT reporting.
//! * [`estimation`] — online least-squares identification of the kinematic
//!   and steering parameters from measurement windows.
//! * [`simulator`] — truth-model plant, scenarios, and the full closed loop.

pub mod estimation;
pub mod guidance;
pub mod kinematics;
pub mod qp;
pub mod reference_path;
pub mod robustness;
pub mod simulator;
pub mod tracking;

pub use kinematics::{
    CartesianPosition, KinematicParams, KinematicsError, KiteState, LineAngles,
};
pub use qp::{QpProblem, QpSolution, QpStatus};
pub use reference_path::{PathSpec, ReferencePath};
pub use robustness::{FrequencyGrid, PerformanceSpec, UncertaintyBounds};
pub use simulator::{ScenarioConfig, SimLog};
pub use tracking::{DelayBuffer, SteeringParams, TrackingGain};
