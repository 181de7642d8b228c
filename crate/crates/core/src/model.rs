//! Problem data: physics constants, spin grids, waveforms, hardware limits.
//!
//! Units are Gauss, centimeters, and seconds throughout. Off-resonance is
//! rad/s, gyromagnetic ratio rad/s/G, gradients G/cm, slew rate G/cm/s.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};

/// Scalar constants of the simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsConstants {
    /// Gyromagnetic ratio in rad/s/G.
    pub gamma: f64,
    /// Default sample period in seconds used when building pulses.
    pub dt: f64,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        PhysicsConstants {
            gamma: 2.0 * std::f64::consts::PI * 4257.6,
            dt: 4e-6,
        }
    }
}

impl PhysicsConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Validation(format!(
                "gamma must be finite and positive, got {}",
                self.gamma
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!(
                "dt must be finite and positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Spatial sample points with per-voxel tissue and field properties.
///
/// All vectors have one entry per voxel, in the same order. Voxels with
/// `mask[v] == false` are still simulated but carry zero weight in every
/// loss and target built from the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinGrid {
    /// Voxel positions in cm.
    pub positions: Vec<Vec3>,
    /// Off-resonance in rad/s.
    pub offres: Vec<f64>,
    /// Longitudinal relaxation time in seconds.
    pub t1: Vec<f64>,
    /// Transverse relaxation time in seconds.
    pub t2: Vec<f64>,
    /// Voxels that participate in design objectives.
    pub mask: Vec<bool>,
}

impl SpinGrid {
    /// Regular centered grid of `dims` voxels spanning `fov_cm` per axis,
    /// with uniform relaxation times, zero off-resonance, and a full mask.
    ///
    /// Row order is x fastest, then y, then z. Voxel centers sit at
    /// `(i - (n-1)/2) * fov/n`, so the grid is symmetric about the origin.
    pub fn regular(dims: [usize; 3], fov_cm: Vec3, t1_s: f64, t2_s: f64) -> SpinGrid {
        let n = dims[0] * dims[1] * dims[2];
        let mut positions = Vec::with_capacity(n);
        let pitch = [
            fov_cm[0] / dims[0] as f64,
            fov_cm[1] / dims[1] as f64,
            fov_cm[2] / dims[2] as f64,
        ];
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let center = |i: usize, n: usize, p: f64| (i as f64 - (n as f64 - 1.0) / 2.0) * p;
                    positions.push([
                        center(ix, dims[0], pitch[0]),
                        center(iy, dims[1], pitch[1]),
                        center(iz, dims[2], pitch[2]),
                    ]);
                }
            }
        }
        SpinGrid {
            positions,
            offres: vec![0.0; n],
            t1: vec![t1_s; n],
            t2: vec![t2_s; n],
            mask: vec![true; n],
        }
    }

    /// Recomputes the off-resonance map as a function of position.
    pub fn set_offres_with(&mut self, f: impl Fn(Vec3) -> f64) {
        for (w, &p) in self.offres.iter_mut().zip(&self.positions) {
            *w = f(p);
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.positions.len()
    }

    /// Errors with the first few issues if the grid is not well formed.
    pub fn ensure_valid(&self) -> Result<()> {
        let issues = validate_grid(self);
        if issues.is_empty() {
            return Ok(());
        }
        let shown: Vec<String> = issues.iter().take(5).map(|i| i.to_string()).collect();
        let suffix = if issues.len() > 5 {
            format!(" (and {} more)", issues.len() - 5)
        } else {
            String::new()
        };
        Err(Error::Validation(format!(
            "grid has {} issue(s): {}{}",
            issues.len(),
            shown.join("; "),
            suffix
        )))
    }
}

/// One problem found by [`validate_grid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridIssue {
    /// Voxel index, or `None` for grid-level problems.
    pub voxel: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for GridIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.voxel {
            Some(v) => write!(f, "voxel {}: {}", v, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Checks per-voxel containers for equal lengths, finite positions and
/// off-resonance, and physically meaningful relaxation times.
pub fn validate_grid(grid: &SpinGrid) -> Vec<GridIssue> {
    let mut issues = Vec::new();
    let n = grid.positions.len();
    for (name, len) in [
        ("offres", grid.offres.len()),
        ("t1", grid.t1.len()),
        ("t2", grid.t2.len()),
        ("mask", grid.mask.len()),
    ] {
        if len != n {
            issues.push(GridIssue {
                voxel: None,
                message: format!("{name} has {len} entries but positions has {n}"),
            });
        }
    }
    if !issues.is_empty() {
        return issues;
    }
    for v in 0..n {
        if !vec3::is_finite(grid.positions[v]) {
            issues.push(GridIssue {
                voxel: Some(v),
                message: format!("position {:?} is not finite", grid.positions[v]),
            });
        }
        if !grid.offres[v].is_finite() {
            issues.push(GridIssue {
                voxel: Some(v),
                message: "off-resonance is not finite".into(),
            });
        }
        if !(grid.t1[v].is_finite() && grid.t1[v] > 0.0) {
            issues.push(GridIssue {
                voxel: Some(v),
                message: format!("t1 must be positive, got {}", grid.t1[v]),
            });
        }
        if !(grid.t2[v].is_finite() && grid.t2[v] > 0.0) {
            issues.push(GridIssue {
                voxel: Some(v),
                message: format!("t2 must be positive, got {}", grid.t2[v]),
            });
        }
        if grid.t1[v] > 0.0 && grid.t2[v] > grid.t1[v] {
            issues.push(GridIssue {
                voxel: Some(v),
                message: format!("t2 ({}) exceeds t1 ({})", grid.t2[v], grid.t1[v]),
            });
        }
    }
    issues
}

/// A complex RF waveform and three gradient channels on a uniform raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Pulse {
    /// RF samples in Gauss.
    pub rf: Vec<Complex64>,
    /// Gradient samples in G/cm, one `[gx, gy, gz]` triple per time step.
    pub grad: Vec<Vec3>,
    /// Sample period in seconds.
    pub dt: f64,
}

impl Pulse {
    /// An all-zero pulse of `n` samples.
    pub fn zeros(n: usize, dt: f64) -> Pulse {
        Pulse {
            rf: vec![Complex64::new(0.0, 0.0); n],
            grad: vec![vec3::ZERO; n],
            dt,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.rf.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.dt * self.rf.len() as f64
    }

    /// Largest RF magnitude in Gauss.
    pub fn peak_rf(&self) -> f64 {
        self.rf.iter().map(|b| b.norm()).fold(0.0, f64::max)
    }

    /// Largest per-axis gradient magnitude in G/cm.
    pub fn peak_grad(&self) -> f64 {
        self.grad
            .iter()
            .flat_map(|g| g.iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }

    /// Checks sample counts, positivity of `dt`, and finiteness. Design
    /// entry points require at least one sample; `simulate` alone also
    /// accepts an empty pulse.
    pub fn validate(&self) -> Result<()> {
        if self.rf.len() != self.grad.len() {
            return Err(Error::Dimension(format!(
                "rf has {} samples but grad has {}",
                self.rf.len(),
                self.grad.len()
            )));
        }
        if self.rf.is_empty() {
            return Err(Error::Validation("pulse has no samples".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!(
                "dt must be finite and positive, got {}",
                self.dt
            )));
        }
        for (t, b) in self.rf.iter().enumerate() {
            if !(b.re.is_finite() && b.im.is_finite()) {
                return Err(Error::Validation(format!("rf sample {t} is not finite")));
            }
        }
        for (t, g) in self.grad.iter().enumerate() {
            if !vec3::is_finite(*g) {
                return Err(Error::Validation(format!("gradient sample {t} is not finite")));
            }
        }
        Ok(())
    }
}

/// Scanner hardware limits. There is no default; every scanner differs,
/// so callers must state the limits they design for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardwareLimits {
    /// Peak RF magnitude in Gauss.
    pub b_max: f64,
    /// Peak per-axis gradient in G/cm.
    pub g_max: f64,
    /// Peak per-axis slew rate in G/cm/s.
    pub s_max: f64,
}

impl HardwareLimits {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("b_max", self.b_max),
            ("g_max", self.g_max),
            ("s_max", self.s_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-voxel magnetization vectors in units of the equilibrium value.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnetization {
    pub m: Vec<Vec3>,
}

impl Magnetization {
    /// Thermal equilibrium `[0, 0, 1]` for every voxel.
    pub fn equilibrium(n_voxels: usize) -> Magnetization {
        Magnetization {
            m: vec![[0.0, 0.0, 1.0]; n_voxels],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Effective field seen by one voxel at one time step, in Gauss.
///
/// The x and y components are the real and imaginary parts of the RF
/// sample; the z component combines the gradient field at the voxel
/// position with its off-resonance expressed as a field.
#[inline]
pub fn effective_field_at(
    rf: Complex64,
    grad: Vec3,
    position: Vec3,
    offres_rad_s: f64,
    gamma: f64,
) -> Vec3 {
    [
        rf.re,
        rf.im,
        vec3::dot(grad, position) + offres_rad_s / gamma,
    ]
}

/// Effective field for every voxel at every time step, voxel-major.
pub fn effective_field(pulse: &Pulse, grid: &SpinGrid, consts: &PhysicsConstants) -> Vec<Vec<Vec3>> {
    (0..grid.n_voxels())
        .map(|v| {
            pulse
                .rf
                .iter()
                .zip(&pulse.grad)
                .map(|(&b, &g)| {
                    effective_field_at(b, g, grid.positions[v], grid.offres[v], consts.gamma)
                })
                .collect()
        })
        .collect()
}
