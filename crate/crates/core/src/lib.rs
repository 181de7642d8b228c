//! Joint RF and gradient waveform design for 3D magnetic resonance
//! excitation.
//!
//! The library simulates the discrete-time Bloch equation over a grid of
//! spins, differentiates the final magnetization with respect to every
//! waveform sample with an analytic adjoint pass, keeps waveforms inside
//! RF amplitude and gradient slew limits through a smooth change of
//! variables, and drives the whole pipeline with a limited-memory
//! quasi-Newton optimizer in alternating or simultaneous mode.
//!
//! Units are Gauss, centimeters, and seconds. Modules:
//!
//! - [`model`]: grids, waveforms, hardware limits, physics constants.
//! - [`sim`]: forward simulation with trajectory recording.
//! - [`adjoint`]: reverse-mode waveform gradients and a finite-difference
//!   checker.
//! - [`constraint`]: the limit-enforcing change of variables.
//! - [`objective`]: losses, target patterns, and error metrics.
//! - [`optim`]: the quasi-Newton core and the design drivers.
//! - [`initpulse`]: starting waveforms, constructed or loaded.
//! - [`io`]: CSV and binary file formats.
//! - [`problems`]: built-in benchmarks.

pub mod adjoint;
pub mod constraint;
pub mod error;
pub mod initpulse;
pub mod io;
pub mod model;
pub mod objective;
pub mod optim;
pub mod problems;
pub mod sim;
pub mod vec3;

pub use adjoint::{backprop, fd_check, FdReport, PulseGradient};
pub use constraint::{
    check_gmax, decode, decode_full, encode, AtanSquash, DecodedPulse, DesignVariables,
    GmaxReport, Squash, TanhSquash,
};
pub use error::{Error, Result};
pub use initpulse::{build_initial_pulse, InitSpec, KtPointsParams, LoadedInit};
pub use model::{HardwareLimits, Magnetization, PhysicsConstants, Pulse, SpinGrid};
pub use objective::{
    build_target, evaluate_loss, nrmse, nrmse_normalized, DontCare, LossKind, LossSpec,
    NrmseNormalization, PatternKind, TargetGeometry, TargetPattern, VoxelLabel,
};
pub use optim::{
    minimize, run_design, DesignBlock, DesignMode, DesignOptions, DesignProblem, DesignResult,
    HistoryRecord, LbfgsOptions, LbfgsResult, StopReason,
};
pub use problems::toy_inversion_problem;
pub use sim::{simulate, simulate_final, Trajectory};
