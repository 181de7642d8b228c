//! Analytic adjoint of the forward Bloch recursion.
//!
//! The backward pass propagates the loss cotangent `h[t] = dL/dm[t]`
//! through `h[t] = R_t' * E * h[t+1]` and accumulates the loss gradient
//! with respect to every field sample, then maps field gradients onto the
//! RF and gradient waveforms through the field model. Cost is one sweep
//! over the stored trajectory, so gradients for all `5 * n_T` waveform
//! entries cost about as much as one extra forward simulation.

use num_complex::Complex64;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{PhysicsConstants, Pulse, SpinGrid};
use crate::sim::{decompose, RelaxationTerms, RotationDecomposition, Trajectory};
use crate::vec3::{self, Vec3};

/// Rotation angles below this magnitude (radians) use the zero-angle
/// limit of the field gradient, where the axis direction cancels out.
pub const EPS_ANGLE: f64 = 1e-10;

/// Number of voxels each parallel task accumulates before the ordered
/// sequential merge. Fixed so that results are bit-reproducible for any
/// thread count.
const CHUNK_VOXELS: usize = 64;

/// Loss gradient with respect to every waveform sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseGradient {
    /// `d_rf[t] = dL/dRe(b_t) + i * dL/dIm(b_t)`, in 1/Gauss.
    pub d_rf: Vec<Complex64>,
    /// `d_grad[t]` per axis, in cm/Gauss.
    pub d_grad: Vec<Vec3>,
}

impl PulseGradient {
    pub fn zeros(n: usize) -> PulseGradient {
        PulseGradient {
            d_rf: vec![Complex64::new(0.0, 0.0); n],
            d_grad: vec![vec3::ZERO; n],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.d_rf.len()
    }

    /// Largest absolute entry over both channels.
    pub fn max_abs(&self) -> f64 {
        let rf = self
            .d_rf
            .iter()
            .flat_map(|d| [d.re.abs(), d.im.abs()])
            .fold(0.0, f64::max);
        let grad = self
            .d_grad
            .iter()
            .flat_map(|g| g.iter().map(|x| x.abs()))
            .fold(0.0, f64::max);
        rf.max(grad)
    }
}

/// Pulls the cotangent back through one time step of one voxel.
///
/// `h_next` is `dL/dm[t+1]`, `m` the stored state before the step, `rot`
/// the step's rotation, and `e1`, `e2` the voxel's relaxation factors.
/// Returns `dL/dm[t]` and `dL/dB_t` for this voxel. `consts.dt` must be
/// the pulse sample period the rotation was decomposed with.
pub fn backstep(
    h_next: Vec3,
    m: Vec3,
    rot: &RotationDecomposition,
    e1: f64,
    e2: f64,
    consts: &PhysicsConstants,
) -> (Vec3, Vec3) {
    let w = [e2 * h_next[0], e2 * h_next[1], e1 * h_next[2]];
    let h_prev = rot.apply_transpose(w);
    let gdt = consts.gamma * consts.dt;
    let d_field = if rot.angle.abs() < EPS_ANGLE {
        // In the zero-angle limit the axis dependence cancels and the
        // field gradient reduces to a pure torque term.
        vec3::scale(vec3::cross(m, w), -gdt)
    } else {
        let u = rot.axis;
        let u_dot_m = vec3::dot(u, m);
        let u_dot_w = vec3::dot(u, w);
        // q is dL/du divided by the rotation angle; the angle cancels the
        // 1/angle of the axis-normalization Jacobian, so no small-angle
        // division ever happens here.
        let q = vec3::axpy(
            rot.versine_ratio * u_dot_w,
            m,
            vec3::axpy(
                rot.versine_ratio * u_dot_m,
                w,
                vec3::scale(vec3::cross(m, w), rot.sinc),
            ),
        );
        let d_angle = vec3::dot(vec3::cross(u, rot.apply(m)), w);
        let radial = vec3::dot(u, q) - d_angle;
        vec3::scale(vec3::axpy(radial, u, vec3::scale(q, -1.0)), gdt)
    };
    (h_prev, d_field)
}

fn check_backprop_inputs(
    trajectory: &Trajectory,
    d_final: &[Vec3],
    grid: &SpinGrid,
    pulse: &Pulse,
) -> Result<()> {
    if trajectory.n_voxels() != grid.n_voxels() {
        return Err(Error::Dimension(format!(
            "trajectory has {} voxels but grid has {}",
            trajectory.n_voxels(),
            grid.n_voxels()
        )));
    }
    if d_final.len() != trajectory.n_voxels() {
        return Err(Error::Dimension(format!(
            "cotangent has {} rows but trajectory has {} voxels",
            d_final.len(),
            trajectory.n_voxels()
        )));
    }
    if trajectory.n_steps() != pulse.rf.len() || pulse.rf.len() != pulse.grad.len() {
        return Err(Error::Dimension(format!(
            "trajectory has {} steps but pulse has {} rf and {} gradient samples",
            trajectory.n_steps(),
            pulse.rf.len(),
            pulse.grad.len()
        )));
    }
    if trajectory.n_steps() > 0 && !(pulse.dt.is_finite() && pulse.dt > 0.0) {
        return Err(Error::Validation(format!(
            "pulse dt must be finite and positive, got {}",
            pulse.dt
        )));
    }
    Ok(())
}

/// Back-propagates the final-state cotangent `d_final` through the stored
/// trajectory and accumulates the waveform gradient over all voxels.
///
/// Voxels are processed in fixed-size chunks whose partial sums are merged
/// in index order, so the result does not depend on the rayon thread
/// count. Voxels whose cotangent row is exactly zero are skipped; they
/// contribute exact zeros.
pub fn backprop(
    trajectory: &Trajectory,
    d_final: &[Vec3],
    grid: &SpinGrid,
    pulse: &Pulse,
    consts: &PhysicsConstants,
) -> Result<PulseGradient> {
    check_backprop_inputs(trajectory, d_final, grid, pulse)?;
    let n_steps = trajectory.n_steps();
    let n_voxels = trajectory.n_voxels();
    if n_steps == 0 || n_voxels == 0 {
        return Ok(PulseGradient::zeros(n_steps));
    }
    let relax = RelaxationTerms::from_grid(grid, pulse.dt);
    let step_consts = PhysicsConstants {
        gamma: consts.gamma,
        dt: pulse.dt,
    };
    let n_chunks = n_voxels.div_ceil(CHUNK_VOXELS);
    let partials: Vec<PulseGradient> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK_VOXELS;
            let hi = (lo + CHUNK_VOXELS).min(n_voxels);
            let mut acc = PulseGradient::zeros(n_steps);
            for v in lo..hi {
                if d_final[v] == vec3::ZERO {
                    continue;
                }
                let position = grid.positions[v];
                let mut h = d_final[v];
                for t in (0..n_steps).rev() {
                    let rot = decompose(trajectory.field(v, t), &step_consts);
                    let (h_prev, d_field) =
                        backstep(h, trajectory.state(v, t), &rot, relax.e1[v], relax.e2[v], &step_consts);
                    h = h_prev;
                    acc.d_rf[t] += Complex64::new(d_field[0], d_field[1]);
                    acc.d_grad[t] = vec3::axpy(d_field[2], position, acc.d_grad[t]);
                }
            }
            acc
        })
        .collect();
    let mut total = PulseGradient::zeros(n_steps);
    for part in partials {
        for t in 0..n_steps {
            total.d_rf[t] += part.d_rf[t];
            total.d_grad[t] = vec3::add(total.d_grad[t], part.d_grad[t]);
        }
    }
    Ok(total)
}

/// One waveform entry in the flattened component order used by
/// [`fd_check`]: five entries per time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdComponent {
    RfReal(usize),
    RfImag(usize),
    Grad(usize, usize),
}

impl std::fmt::Display for FdComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            FdComponent::RfReal(t) => write!(f, "rf_real[{t}]"),
            FdComponent::RfImag(t) => write!(f, "rf_imag[{t}]"),
            FdComponent::Grad(t, a) => write!(f, "grad[{t}].{}", ["x", "y", "z"][a]),
        }
    }
}

/// Worst single comparison from a finite-difference probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSample {
    pub component: FdComponent,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// Summary of an analytic-versus-central-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst: Option<FdSample>,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} components checked, max rel err {:.3e}, mean rel err {:.3e}",
            self.n_checked, self.max_rel_err, self.mean_rel_err
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                ", worst at {} (analytic {:.6e}, fd {:.6e})",
                w.component, w.analytic, w.fd
            )?;
        }
        Ok(())
    }
}

fn component_of(index: usize) -> FdComponent {
    let t = index / 5;
    match index % 5 {
        0 => FdComponent::RfReal(t),
        1 => FdComponent::RfImag(t),
        k => FdComponent::Grad(t, k - 2),
    }
}

fn analytic_entry(gradient: &PulseGradient, c: FdComponent) -> f64 {
    match c {
        FdComponent::RfReal(t) => gradient.d_rf[t].re,
        FdComponent::RfImag(t) => gradient.d_rf[t].im,
        FdComponent::Grad(t, a) => gradient.d_grad[t][a],
    }
}

fn perturbed(pulse: &Pulse, c: FdComponent, delta: f64) -> Pulse {
    let mut p = pulse.clone();
    match c {
        FdComponent::RfReal(t) => p.rf[t].re += delta,
        FdComponent::RfImag(t) => p.rf[t].im += delta,
        FdComponent::Grad(t, a) => p.grad[t][a] += delta,
    }
    p
}

/// Compares an analytic waveform gradient against central finite
/// differences of a scalar loss.
///
/// `loss` must evaluate the same objective the analytic gradient was
/// computed for. With `max_samples = None` every component is probed;
/// otherwise `max_samples` components are drawn without replacement using
/// `seed`. Relative error divides by
/// `max(|analytic|, |fd|, 1e-3 * max(1, max_abs))`, where `max_abs` is
/// the largest analytic entry of the probed channel family (RF or
/// gradient). The floor keeps central-difference roundoff, which is
/// absolute in nature, from dominating components that are nearly zero.
pub fn fd_check<F>(
    mut loss: F,
    analytic: &PulseGradient,
    pulse: &Pulse,
    h: f64,
    max_samples: Option<usize>,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&Pulse) -> Result<f64>,
{
    if analytic.d_rf.len() != pulse.rf.len() || analytic.d_grad.len() != pulse.grad.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} samples but pulse has {}",
            analytic.d_rf.len(),
            pulse.rf.len()
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Validation(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let total = 5 * pulse.rf.len();
    if total == 0 {
        return Ok(FdReport {
            n_checked: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            worst: None,
        });
    }
    let indices: Vec<usize> = match max_samples {
        Some(k) if k < total => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, total, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };
    let rf_scale = analytic
        .d_rf
        .iter()
        .flat_map(|d| [d.re.abs(), d.im.abs()])
        .fold(0.0, f64::max);
    let grad_scale = analytic
        .d_grad
        .iter()
        .flat_map(|g| g.iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let floor_of = |c: FdComponent| {
        let family = match c {
            FdComponent::RfReal(_) | FdComponent::RfImag(_) => rf_scale,
            FdComponent::Grad(..) => grad_scale,
        };
        1e-3 * family.max(1.0)
    };
    let mut report = FdReport {
        n_checked: 0,
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        worst: None,
    };
    let mut sum = 0.0;
    for index in indices {
        let c = component_of(index);
        let plus = loss(&perturbed(pulse, c, h))?;
        let minus = loss(&perturbed(pulse, c, -h))?;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic_entry(analytic, c);
        let rel_err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor_of(c));
        report.n_checked += 1;
        sum += rel_err;
        if rel_err >= report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(FdSample {
                component: c,
                analytic: a,
                fd,
                rel_err,
            });
        }
    }
    report.mean_rel_err = sum / report.n_checked as f64;
    Ok(report)
}
