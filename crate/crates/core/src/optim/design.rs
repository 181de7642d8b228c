//! Waveform design drivers: alternating and simultaneous minimization of
//! a pattern loss over the constrained design variables.
//!
//! Each outer iteration runs one or two inner quasi-Newton solves. In
//! alternating mode the RF variables are optimized with the gradients
//! frozen, then the slew variables with the RF frozen. In simultaneous
//! mode a single solve moves everything at once. Every inner solve
//! evaluates the same pipeline: decode variables to a waveform, simulate,
//! score, back-propagate, and pull the waveform gradient back onto the
//! active variables.

use std::time::Instant;

use crate::adjoint::backprop;
use crate::constraint::{
    check_gmax, decode_full, encode, DecodedPulse, DesignVariables, GmaxReport,
};
use crate::error::{Error, Result};
use crate::initpulse::{build_initial_pulse, InitSpec};
use crate::model::{HardwareLimits, Magnetization, PhysicsConstants, Pulse, SpinGrid};
use crate::objective::{
    evaluate_loss, nrmse_normalized, LossSpec, NrmseNormalization, TargetPattern,
};
use crate::optim::lbfgs::{minimize, LbfgsOptions};
use crate::sim::{simulate, simulate_final};
use crate::vec3::Vec3;

/// Which variables an optimization record covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignBlock {
    /// The starting waveform, before any optimization.
    Init,
    /// RF magnitude and phase variables only.
    Rf,
    /// Slew variables only.
    Grad,
    /// All variables at once.
    Joint,
}

impl DesignBlock {
    pub fn as_str(&self) -> &'static str {
        match self {
            DesignBlock::Init => "init",
            DesignBlock::Rf => "rf",
            DesignBlock::Grad => "grad",
            DesignBlock::Joint => "joint",
        }
    }
}

/// How the variables are split across inner solves.
///
/// Both modes spend the same inner-iteration budget per outer iteration:
/// the joint solve runs with twice the configured iteration cap, matching
/// the two block solves of alternating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignMode {
    /// RF block then slew block per outer iteration.
    Alternating,
    /// One joint solve per outer iteration.
    Simultaneous,
}

/// Driver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignOptions {
    pub mode: DesignMode,
    /// Outer iterations; each runs the mode's block solves once.
    pub outer_iters: usize,
    /// Settings shared by every inner solve.
    pub lbfgs: LbfgsOptions,
    /// Stop early when one outer iteration improves the loss by no more
    /// than this fraction of its starting value.
    pub early_stop_rel: f64,
    pub nrmse_normalization: NrmseNormalization,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions {
            mode: DesignMode::Alternating,
            outer_iters: 10,
            lbfgs: LbfgsOptions::default(),
            early_stop_rel: 1e-8,
            nrmse_normalization: NrmseNormalization::TargetRms,
        }
    }
}

impl DesignOptions {
    pub fn validate(&self) -> Result<()> {
        self.lbfgs.validate()?;
        if !(self.early_stop_rel.is_finite() && self.early_stop_rel >= 0.0) {
            return Err(Error::Validation(format!(
                "early_stop_rel must be finite and nonnegative, got {}",
                self.early_stop_rel
            )));
        }
        if let NrmseNormalization::Fixed(s) = self.nrmse_normalization {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Validation(format!(
                    "fixed nrmse normalization must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything a design run needs.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub grid: SpinGrid,
    pub target: TargetPattern,
    pub loss: LossSpec,
    pub limits: HardwareLimits,
    pub consts: PhysicsConstants,
    /// Starting magnetization; `None` means thermal equilibrium.
    pub m0: Option<Magnetization>,
    pub init: InitSpec,
}

/// One row of the optimization history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    /// Outer iteration; 0 is the starting waveform.
    pub outer_iter: usize,
    pub block: DesignBlock,
    /// Loss after this block's solve.
    pub loss: f64,
    pub nrmse: f64,
    /// Peak RF magnitude in Gauss.
    pub peak_rf: f64,
    /// Peak per-axis gradient in G/cm.
    pub peak_grad: f64,
    /// Peak per-axis slew rate in G/cm/s.
    pub peak_slew: f64,
    /// Wall time of this block's solve.
    pub seconds: f64,
}

/// Designed waveform with its history and final diagnostics.
#[derive(Debug, Clone)]
pub struct DesignResult {
    pub pulse: Pulse,
    /// Slew trajectory of the final waveform.
    pub slew: Vec<Vec3>,
    pub final_mag: Magnetization,
    pub history: Vec<HistoryRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_nrmse: f64,
    /// Gradient amplitude check on the final waveform; the change of
    /// variables bounds RF and slew but not the gradient itself.
    pub gmax: GmaxReport,
    /// Scale applied to the starting waveform's RF, 1 when none.
    pub rf_scale: f64,
}

fn peak_slew(slew: &[Vec3]) -> f64 {
    slew.iter()
        .flat_map(|s| s.iter())
        .fold(0.0, |acc, &v| acc.max(v.abs()))
}

struct Snapshot {
    decoded: DecodedPulse,
    mag: Magnetization,
    loss: f64,
    nrmse: f64,
}

fn snapshot(
    vars: &DesignVariables,
    problem: &DesignProblem,
    m0: &Magnetization,
    normalization: NrmseNormalization,
) -> Result<Snapshot> {
    let decoded = decode_full(vars, &problem.limits)?;
    let mag = simulate_final(&decoded.pulse, &problem.grid, m0, &problem.consts)?;
    let loss = evaluate_loss(&mag, &problem.target, &decoded.pulse, &problem.loss)?.value;
    let nrmse = nrmse_normalized(&mag, &problem.target, problem.loss.kind, normalization)?;
    Ok(Snapshot {
        decoded,
        mag,
        loss,
        nrmse,
    })
}

fn record(outer_iter: usize, block: DesignBlock, snap: &Snapshot, seconds: f64) -> HistoryRecord {
    HistoryRecord {
        outer_iter,
        block,
        loss: snap.loss,
        nrmse: snap.nrmse,
        peak_rf: snap.decoded.pulse.peak_rf(),
        peak_grad: snap.decoded.pulse.peak_grad(),
        peak_slew: peak_slew(&snap.decoded.slew),
        seconds,
    }
}

/// Loss and gradient of the full pipeline with respect to the variables
/// named by `block`, holding the others at their values in `base`.
fn evaluate_block(
    x: &[f64],
    base: &DesignVariables,
    block: DesignBlock,
    problem: &DesignProblem,
    m0: &Magnetization,
) -> Result<(f64, Vec<f64>)> {
    let mut vars = base.clone();
    match block {
        DesignBlock::Rf => vars.set_rf(x)?,
        DesignBlock::Grad => vars.set_slew(x)?,
        DesignBlock::Joint => vars.set_all(x)?,
        DesignBlock::Init => {
            return Err(Error::Validation(
                "the init block has no variables to evaluate".into(),
            ))
        }
    }
    let decoded = decode_full(&vars, &problem.limits)?;
    let (final_mag, trajectory) = simulate(&decoded.pulse, &problem.grid, m0, &problem.consts)?;
    let lv = evaluate_loss(&final_mag, &problem.target, &decoded.pulse, &problem.loss)?;
    let mut gradient = backprop(
        &trajectory,
        &lv.d_final,
        &problem.grid,
        &decoded.pulse,
        &problem.consts,
    )?;
    for (d, reg) in gradient.d_rf.iter_mut().zip(&lv.d_rf_reg) {
        *d += reg;
    }
    let vg = crate::constraint::chain_to_vars(&gradient, &vars, &problem.limits)?;
    let packed = match block {
        DesignBlock::Rf => vg.pack_rf(),
        DesignBlock::Grad => vg.pack_slew(),
        DesignBlock::Joint => vg.pack_all(),
        DesignBlock::Init => unreachable!(),
    };
    Ok((lv.value, packed))
}

fn pack_block(vars: &DesignVariables, block: DesignBlock) -> Vec<f64> {
    match block {
        DesignBlock::Rf => vars.pack_rf(),
        DesignBlock::Grad => vars.pack_slew(),
        _ => vars.pack_all(),
    }
}

fn set_block(vars: &mut DesignVariables, block: DesignBlock, x: &[f64]) -> Result<()> {
    match block {
        DesignBlock::Rf => vars.set_rf(x),
        DesignBlock::Grad => vars.set_slew(x),
        _ => vars.set_all(x),
    }
}

/// Runs the full design: build the starting waveform, encode it, iterate
/// block solves, and decode the result.
pub fn run_design(problem: &DesignProblem, options: &DesignOptions) -> Result<DesignResult> {
    options.validate()?;
    problem.grid.ensure_valid()?;
    problem.limits.validate()?;
    problem.consts.validate()?;
    problem.loss.validate()?;
    problem.target.validate()?;
    if problem.target.n_voxels() != problem.grid.n_voxels() {
        return Err(Error::Dimension(format!(
            "target has {} voxels but grid has {}",
            problem.target.n_voxels(),
            problem.grid.n_voxels()
        )));
    }
    let m0 = match &problem.m0 {
        Some(m) => {
            if m.len() != problem.grid.n_voxels() {
                return Err(Error::Dimension(format!(
                    "m0 has {} voxels but grid has {}",
                    m.len(),
                    problem.grid.n_voxels()
                )));
            }
            m.clone()
        }
        None => Magnetization::equilibrium(problem.grid.n_voxels()),
    };

    let init = build_initial_pulse(
        &problem.init,
        &problem.grid,
        &problem.target,
        &problem.limits,
        &problem.consts,
    )?;
    let mut vars = encode(&init.pulse, &problem.limits)?;

    let norm = options.nrmse_normalization;
    let snap = snapshot(&vars, problem, &m0, norm)?;
    let initial_loss = snap.loss;
    let mut history = vec![record(0, DesignBlock::Init, &snap, 0.0)];

    let blocks: &[DesignBlock] = match options.mode {
        DesignMode::Alternating => &[DesignBlock::Rf, DesignBlock::Grad],
        DesignMode::Simultaneous => &[DesignBlock::Joint],
    };
    // The joint solve replaces two block solves, so it gets their combined
    // iteration budget and each outer iteration costs the same in both modes.
    let joint_lbfgs = LbfgsOptions {
        max_iters: options.lbfgs.max_iters.saturating_mul(2),
        ..options.lbfgs
    };
    let mut prev_loss = initial_loss;
    for outer in 1..=options.outer_iters {
        let mut cur_loss = prev_loss;
        for &block in blocks {
            let t0 = Instant::now();
            let x0 = pack_block(&vars, block);
            let inner = match block {
                DesignBlock::Joint => &joint_lbfgs,
                _ => &options.lbfgs,
            };
            let solved = minimize(
                |x| evaluate_block(x, &vars, block, problem, &m0),
                x0,
                inner,
            )?;
            set_block(&mut vars, block, &solved.x)?;
            let seconds = t0.elapsed().as_secs_f64();
            let snap = snapshot(&vars, problem, &m0, norm)?;
            cur_loss = snap.loss;
            history.push(record(outer, block, &snap, seconds));
        }
        let improved = prev_loss - cur_loss;
        prev_loss = cur_loss;
        if improved <= options.early_stop_rel * prev_loss.abs() {
            break;
        }
    }

    let snap = snapshot(&vars, problem, &m0, norm)?;
    let gmax = check_gmax(&snap.decoded.pulse, &problem.limits);
    Ok(DesignResult {
        pulse: snap.decoded.pulse,
        slew: snap.decoded.slew,
        final_mag: snap.mag,
        history,
        initial_loss,
        final_loss: snap.loss,
        final_nrmse: snap.nrmse,
        gmax,
        rf_scale: init.rf_scale,
    })
}
