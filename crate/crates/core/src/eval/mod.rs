//! Closed-loop evaluation: controllers, episode simulation, metrics,
//! multi-controller comparison and gradient checks.

pub mod closed_loop;
pub mod controllers;
pub mod gradcheck;
pub mod run;

pub use closed_loop::{compute_metrics, run_closed_loop, ClosedLoopResult, MetricSummary, VIOLATION_TOL};
pub use controllers::{
    riccati_gains, ConstantController, Controller, DpcController, LqrController, MppiClosedLoop, StepMppiController,
};
pub use gradcheck::{gradcheck, GradcheckReport, GradcheckScope};
pub use run::{compare, export, initial_states, Comparison, ControllerSpec, OrderingAssertion, ResolvedController, RunConfig};
