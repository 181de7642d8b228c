//! Forward discrete-time Bloch simulation.
//!
//! Each time step rotates the magnetization about the instantaneous
//! effective field and then applies relaxation toward equilibrium:
//! `m[t+1] = E * R_t * m[t] + e` with `E = diag(e2, e2, e1)` and
//! `e = [0, 0, 1 - e1]`. The rotation angle is `-gamma * dt * |B|`, so a
//! field along +x tips equilibrium magnetization toward +y.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{effective_field_at, Magnetization, PhysicsConstants, Pulse, SpinGrid};
use crate::vec3::{self, Vec3};

/// Field magnitudes below this (in Gauss) are treated as zero field: the
/// rotation axis is undefined there, so the step degenerates to the
/// identity rotation followed by relaxation.
pub const EPS_FIELD: f64 = 1e-12;

/// One time step's rotation about the effective field, stored in the
/// axis-angle quantities the forward and adjoint kernels share.
///
/// `versine_ratio` is `(1 - cos(angle)) / angle` and `sinc` is
/// `sin(angle) / angle`; both stay accurate for small angles and have the
/// limits 0 and 1 at zero field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationDecomposition {
    /// Unit rotation axis. Arbitrary (+z) when the field is below [`EPS_FIELD`].
    pub axis: Vec3,
    /// Signed rotation angle in radians, `-gamma * dt * |B|`, never positive.
    pub angle: f64,
    pub cos_angle: f64,
    pub sin_angle: f64,
    /// `(1 - cos(angle)) / angle`.
    pub versine_ratio: f64,
    /// `sin(angle) / angle`.
    pub sinc: f64,
    /// Magnitude of the effective field in Gauss.
    pub field_norm: f64,
}

impl RotationDecomposition {
    /// Rotates `m` by this decomposition (Rodrigues form).
    #[inline]
    pub fn apply(&self, m: Vec3) -> Vec3 {
        let u = self.axis;
        let one_minus_cos = self.versine_ratio * self.angle;
        let radial = one_minus_cos * vec3::dot(u, m);
        let swirl = vec3::cross(u, m);
        [
            self.cos_angle * m[0] + radial * u[0] + self.sin_angle * swirl[0],
            self.cos_angle * m[1] + radial * u[1] + self.sin_angle * swirl[1],
            self.cos_angle * m[2] + radial * u[2] + self.sin_angle * swirl[2],
        ]
    }

    /// Rotates `v` by the inverse rotation. For a rotation matrix the
    /// transpose is the inverse, so only the cross term changes sign.
    #[inline]
    pub fn apply_transpose(&self, v: Vec3) -> Vec3 {
        let u = self.axis;
        let one_minus_cos = self.versine_ratio * self.angle;
        let radial = one_minus_cos * vec3::dot(u, v);
        let swirl = vec3::cross(u, v);
        [
            self.cos_angle * v[0] + radial * u[0] - self.sin_angle * swirl[0],
            self.cos_angle * v[1] + radial * u[1] - self.sin_angle * swirl[1],
            self.cos_angle * v[2] + radial * u[2] - self.sin_angle * swirl[2],
        ]
    }

    fn identity(field_norm: f64) -> RotationDecomposition {
        RotationDecomposition {
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
            cos_angle: 1.0,
            sin_angle: 0.0,
            versine_ratio: 0.0,
            sinc: 1.0,
            field_norm,
        }
    }
}

/// Axis-angle decomposition of the rotation produced by one field sample
/// over one period `consts.dt`.
pub fn decompose(field: Vec3, consts: &PhysicsConstants) -> RotationDecomposition {
    let field_norm = vec3::norm(field);
    if field_norm < EPS_FIELD {
        return RotationDecomposition::identity(field_norm);
    }
    let axis = vec3::scale(field, 1.0 / field_norm);
    let angle = -consts.gamma * consts.dt * field_norm;
    let (sin_angle, cos_angle) = angle.sin_cos();
    // 1 - cos(x) = 2 sin^2(x/2) avoids cancellation for small angles.
    let half_sin = (0.5 * angle).sin();
    RotationDecomposition {
        axis,
        angle,
        cos_angle,
        sin_angle,
        versine_ratio: 2.0 * half_sin * half_sin / angle,
        sinc: sin_angle / angle,
        field_norm,
    }
}

/// Per-voxel relaxation factors for one sample period.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationTerms {
    /// `exp(-dt / t1)` per voxel.
    pub e1: Vec<f64>,
    /// `exp(-dt / t2)` per voxel.
    pub e2: Vec<f64>,
}

impl RelaxationTerms {
    pub fn from_grid(grid: &SpinGrid, dt: f64) -> RelaxationTerms {
        RelaxationTerms {
            e1: grid.t1.iter().map(|&t1| (-dt / t1).exp()).collect(),
            e2: grid.t2.iter().map(|&t2| (-dt / t2).exp()).collect(),
        }
    }
}

/// Advances one voxel by one time step: rotate, then relax.
#[inline]
pub fn step(m: Vec3, rot: &RotationDecomposition, e1: f64, e2: f64) -> Vec3 {
    let r = rot.apply(m);
    [e2 * r[0], e2 * r[1], e1 * r[2] + (1.0 - e1)]
}

/// Every intermediate magnetization state and effective field sample from
/// one forward simulation, stored voxel-major for the backward pass.
#[derive(Debug, Clone)]
pub struct Trajectory {
    n_voxels: usize,
    n_steps: usize,
    /// `n_steps + 1` states per voxel; index `t` is the state before step `t`.
    states: Vec<Vec3>,
    /// `n_steps` field samples per voxel.
    fields: Vec<Vec3>,
}

impl Trajectory {
    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Magnetization of voxel `v` before step `t`; `t = n_steps` is final.
    #[inline]
    pub fn state(&self, v: usize, t: usize) -> Vec3 {
        self.states[v * (self.n_steps + 1) + t]
    }

    /// Effective field seen by voxel `v` during step `t`.
    #[inline]
    pub fn field(&self, v: usize, t: usize) -> Vec3 {
        self.fields[v * self.n_steps + t]
    }

    pub fn final_state(&self, v: usize) -> Vec3 {
        self.state(v, self.n_steps)
    }

    /// Heap footprint of the stored states and fields in bytes.
    pub fn approx_bytes(&self) -> usize {
        (self.states.capacity() + self.fields.capacity()) * std::mem::size_of::<Vec3>()
    }
}

fn check_sim_inputs(pulse: &Pulse, grid: &SpinGrid, m0: &Magnetization) -> Result<()> {
    if pulse.rf.len() != pulse.grad.len() {
        return Err(Error::Dimension(format!(
            "rf has {} samples but grad has {}",
            pulse.rf.len(),
            pulse.grad.len()
        )));
    }
    if !pulse.rf.is_empty() && !(pulse.dt.is_finite() && pulse.dt > 0.0) {
        return Err(Error::Validation(format!(
            "pulse dt must be finite and positive, got {}",
            pulse.dt
        )));
    }
    let n = grid.n_voxels();
    for (name, len) in [
        ("offres", grid.offres.len()),
        ("t1", grid.t1.len()),
        ("t2", grid.t2.len()),
        ("mask", grid.mask.len()),
    ] {
        if len != n {
            return Err(Error::Dimension(format!(
                "grid {name} has {len} entries but positions has {n}"
            )));
        }
    }
    if m0.len() != n {
        return Err(Error::Dimension(format!(
            "initial magnetization has {} rows but grid has {n} voxels",
            m0.len()
        )));
    }
    Ok(())
}

/// Simulates every voxel through the pulse and records the full state and
/// field history needed by the backward pass.
///
/// The sample period comes from the pulse; `consts` contributes only the
/// gyromagnetic ratio. An empty pulse returns `m0` unchanged.
pub fn simulate(
    pulse: &Pulse,
    grid: &SpinGrid,
    m0: &Magnetization,
    consts: &PhysicsConstants,
) -> Result<(Magnetization, Trajectory)> {
    check_sim_inputs(pulse, grid, m0)?;
    let n_voxels = grid.n_voxels();
    let n_steps = pulse.rf.len();
    if n_steps == 0 {
        return Ok((
            m0.clone(),
            Trajectory {
                n_voxels,
                n_steps: 0,
                states: m0.m.clone(),
                fields: Vec::new(),
            },
        ));
    }
    let relax = RelaxationTerms::from_grid(grid, pulse.dt);
    let step_consts = PhysicsConstants {
        gamma: consts.gamma,
        dt: pulse.dt,
    };
    let mut states = vec![vec3::ZERO; n_voxels * (n_steps + 1)];
    let mut fields = vec![vec3::ZERO; n_voxels * n_steps];
    states
        .par_chunks_mut(n_steps + 1)
        .zip(fields.par_chunks_mut(n_steps))
        .enumerate()
        .for_each(|(v, (state_row, field_row))| {
            let mut m = m0.m[v];
            state_row[0] = m;
            for t in 0..n_steps {
                let b = effective_field_at(
                    pulse.rf[t],
                    pulse.grad[t],
                    grid.positions[v],
                    grid.offres[v],
                    consts.gamma,
                );
                field_row[t] = b;
                let rot = decompose(b, &step_consts);
                m = step(m, &rot, relax.e1[v], relax.e2[v]);
                state_row[t + 1] = m;
            }
        });
    let final_mag = Magnetization {
        m: (0..n_voxels).map(|v| states[v * (n_steps + 1) + n_steps]).collect(),
    };
    Ok((
        final_mag,
        Trajectory {
            n_voxels,
            n_steps,
            states,
            fields,
        },
    ))
}

/// Simulates to the final magnetization without recording the trajectory.
/// Useful when only the end state matters, as in finite-difference probes.
pub fn simulate_final(
    pulse: &Pulse,
    grid: &SpinGrid,
    m0: &Magnetization,
    consts: &PhysicsConstants,
) -> Result<Magnetization> {
    check_sim_inputs(pulse, grid, m0)?;
    let n_steps = pulse.rf.len();
    if n_steps == 0 {
        return Ok(m0.clone());
    }
    let relax = RelaxationTerms::from_grid(grid, pulse.dt);
    let step_consts = PhysicsConstants {
        gamma: consts.gamma,
        dt: pulse.dt,
    };
    let m: Vec<Vec3> = (0..grid.n_voxels())
        .into_par_iter()
        .map(|v| {
            let mut m = m0.m[v];
            for t in 0..n_steps {
                let b = effective_field_at(
                    pulse.rf[t],
                    pulse.grad[t],
                    grid.positions[v],
                    grid.offres[v],
                    consts.gamma,
                );
                let rot = decompose(b, &step_consts);
                m = step(m, &rot, relax.e1[v], relax.e2[v]);
            }
            m
        })
        .collect();
    Ok(Magnetization { m })
}
