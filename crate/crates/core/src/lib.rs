//! Numerical toolkit for stochastic optimal control problems whose terminal
//! time is the first time the mean constraint curve E[Phi(X(t))] reaches a
//! threshold, capped at the horizon.
//!
//! The crate simulates the controlled dynamics, estimates the mean curve and
//! its rate, locates the varying terminal time with its three-case
//! classification, propagates first-order variations (state sensitivity,
//! directional rate, terminal-time derivative, cost variation with the two
//! penalty terms), solves the first-order adjoint equation, certifies
//! candidate controls against the case-dependent variational inequality, and
//! improves controls by conditional-gradient descent built from the same
//! derivative.

pub mod adjoint;
pub mod finitediff;
pub mod forward;
pub mod io;
pub mod optimizer;
pub mod oracles;
pub mod problem;
pub mod registry;
pub mod util;
pub mod variation;
pub mod verifier;

pub use forward::{
    cost_functional, h_curve, hitting_time, mean_phi, mean_rate_crosscheck, resimulate_with_control,
    run_forward, ForwardRun, HittingOptions, Integrator, McConfig, MeanCurve, PathEnsemble,
    SampledCurve, TauCase, TerminalTimeResult,
};
pub use problem::{ControlPath, ProblemError, ProblemSpec, TimeGrid};
pub use registry::{builtin, builtin_with};
