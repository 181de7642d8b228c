//! Numerical optimization: a limited-memory quasi-Newton core and the
//! waveform design drivers built on top of it.

mod design;
mod lbfgs;

pub use design::{
    run_design, DesignBlock, DesignMode, DesignOptions, DesignProblem, DesignResult,
    HistoryRecord,
};
pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult, StopReason};
