//! Design targets and loss functions.
//!
//! Both losses are weighted least squares on the final magnetization plus
//! an RF power penalty `lambda * sum |b_t|^2`. The saturation loss acts
//! on the transverse magnitude so the RF phase stays free; the inversion
//! loss acts on the longitudinal component directly.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{Magnetization, Pulse, SpinGrid};
use crate::vec3::Vec3;

/// Smoothing floor inside the transverse magnitude,
/// `|m|_eps = sqrt(mx^2 + my^2 + eps^2)`, which keeps the saturation loss
/// differentiable where the transverse magnetization vanishes.
pub const MAGNITUDE_EPS: f64 = 1e-12;

/// Which component of the final magnetization the fit term acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Least squares on the smoothed transverse magnitude `|m_xy|`.
    /// Suits excitation and saturation targets where phase is free.
    SaturationMls,
    /// Least squares on the longitudinal component `m_z`. Suits
    /// inversion targets, where the transverse component is ignored.
    InversionLongitudinal,
}

/// Loss configuration: fit component and RF power weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// RF power penalty weight in 1/Gauss^2.
    pub lambda: f64,
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Validation(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Desired final magnetization and per-voxel fit weights.
///
/// Voxels with zero weight do not contribute to any loss or metric; this
/// is how masked voxels and don't-care regions are represented.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPattern {
    pub m_desired: Vec<Vec3>,
    pub weight: Vec<f64>,
}

impl TargetPattern {
    pub fn n_voxels(&self) -> usize {
        self.m_desired.len()
    }

    /// Number of voxels with positive weight.
    pub fn n_counted(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_desired.len() != self.weight.len() {
            return Err(Error::Dimension(format!(
                "target has {} desired rows but {} weights",
                self.m_desired.len(),
                self.weight.len()
            )));
        }
        if let Some(w) = self.weight.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Validation(format!(
                "weights must be finite and nonnegative, got {w}"
            )));
        }
        Ok(())
    }
}

/// Loss value with the pieces the optimizer needs: the cotangent of the
/// final magnetization for the backward pass, and the RF power penalty
/// gradient that attaches directly to the RF samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// `dL/dM_T`, one row per voxel; exactly zero where weight is zero.
    pub d_final: Vec<Vec3>,
    /// `dL/db_t` of the power penalty alone: `2 lambda b_t`.
    pub d_rf_reg: Vec<Complex64>,
}

fn smoothed_transverse(m: Vec3) -> f64 {
    (m[0] * m[0] + m[1] * m[1] + MAGNITUDE_EPS * MAGNITUDE_EPS).sqrt()
}

fn check_loss_inputs(final_mag: &Magnetization, target: &TargetPattern) -> Result<()> {
    target.validate()?;
    if final_mag.len() != target.n_voxels() {
        return Err(Error::Dimension(format!(
            "final magnetization has {} rows but target has {}",
            final_mag.len(),
            target.n_voxels()
        )));
    }
    Ok(())
}

/// Weighted least squares on the smoothed transverse magnitude plus the
/// RF power penalty.
pub fn saturation_mls_loss(
    final_mag: &Magnetization,
    target: &TargetPattern,
    pulse: &Pulse,
    lambda: f64,
) -> Result<LossValue> {
    evaluate_loss(
        final_mag,
        target,
        pulse,
        &LossSpec {
            kind: LossKind::SaturationMls,
            lambda,
        },
    )
}

/// Weighted least squares on the longitudinal component plus the RF
/// power penalty.
pub fn inversion_longitudinal_loss(
    final_mag: &Magnetization,
    target: &TargetPattern,
    pulse: &Pulse,
    lambda: f64,
) -> Result<LossValue> {
    evaluate_loss(
        final_mag,
        target,
        pulse,
        &LossSpec {
            kind: LossKind::InversionLongitudinal,
            lambda,
        },
    )
}

/// Evaluates the configured loss and its analytic derivatives.
pub fn evaluate_loss(
    final_mag: &Magnetization,
    target: &TargetPattern,
    pulse: &Pulse,
    spec: &LossSpec,
) -> Result<LossValue> {
    check_loss_inputs(final_mag, target)?;
    spec.validate()?;
    let n = final_mag.len();
    let mut value = 0.0;
    let mut d_final = vec![crate::vec3::ZERO; n];
    for v in 0..n {
        let w = target.weight[v];
        if w == 0.0 {
            continue;
        }
        let m = final_mag.m[v];
        let d = target.m_desired[v];
        match spec.kind {
            LossKind::SaturationMls => {
                let mag = smoothed_transverse(m);
                let want = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let r = mag - want;
                value += w * r * r;
                let k = 2.0 * w * r / mag;
                d_final[v] = [k * m[0], k * m[1], 0.0];
            }
            LossKind::InversionLongitudinal => {
                let r = m[2] - d[2];
                value += w * r * r;
                d_final[v] = [0.0, 0.0, 2.0 * w * r];
            }
        }
    }
    let power: f64 = pulse.rf.iter().map(|b| b.norm_sqr()).sum();
    value += spec.lambda * power;
    let d_rf_reg = pulse
        .rf
        .iter()
        .map(|&b| 2.0 * spec.lambda * b)
        .collect();
    Ok(LossValue {
        value,
        d_final,
        d_rf_reg,
    })
}

/// How the error norm is scaled into a relative figure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NrmseNormalization {
    /// Divide by the weighted RMS of the target's fit component.
    TargetRms,
    /// Divide by a caller-supplied scale.
    Fixed(f64),
}

/// Normalized RMS error of the fit component over positively weighted
/// voxels, normalized by the target's own RMS.
pub fn nrmse(final_mag: &Magnetization, target: &TargetPattern, kind: LossKind) -> Result<f64> {
    nrmse_normalized(final_mag, target, kind, NrmseNormalization::TargetRms)
}

pub fn nrmse_normalized(
    final_mag: &Magnetization,
    target: &TargetPattern,
    kind: LossKind,
    normalization: NrmseNormalization,
) -> Result<f64> {
    check_loss_inputs(final_mag, target)?;
    let mut err_sq = 0.0;
    let mut ref_sq = 0.0;
    let mut weight_sum = 0.0;
    for v in 0..final_mag.len() {
        let w = target.weight[v];
        if w == 0.0 {
            continue;
        }
        let m = final_mag.m[v];
        let d = target.m_desired[v];
        let (got, want) = match kind {
            LossKind::SaturationMls => (
                (m[0] * m[0] + m[1] * m[1]).sqrt(),
                (d[0] * d[0] + d[1] * d[1]).sqrt(),
            ),
            LossKind::InversionLongitudinal => (m[2], d[2]),
        };
        let e = got - want;
        err_sq += w * e * e;
        ref_sq += w * want * want;
        weight_sum += w;
    }
    if weight_sum == 0.0 {
        return Err(Error::EmptyRegion(
            "no voxel has positive weight, so the error metric is undefined".into(),
        ));
    }
    let rms_err = (err_sq / weight_sum).sqrt();
    let scale = match normalization {
        NrmseNormalization::TargetRms => {
            let rms_ref = (ref_sq / weight_sum).sqrt();
            if rms_ref == 0.0 {
                return Err(Error::Validation(
                    "target fit component is identically zero over weighted voxels; \
                     use a fixed normalization instead"
                        .into(),
                ));
            }
            rms_ref
        }
        NrmseNormalization::Fixed(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Validation(format!(
                    "fixed normalization must be positive, got {s}"
                )));
            }
            s
        }
    };
    Ok(rms_err / scale)
}

/// Region classification for one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelLabel {
    Outer,
    Inner,
    DontCare,
}

/// Which excitation pattern the target encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    /// Tip the outer volume into the transverse plane, keep the inner
    /// volume longitudinal.
    SaturateOuter,
    /// Invert the inner volume, keep the outer volume at equilibrium.
    InvertInner,
}

impl PatternKind {
    /// The loss component this pattern is usually fit with.
    pub fn default_loss_kind(&self) -> LossKind {
        match self {
            PatternKind::SaturateOuter => LossKind::SaturationMls,
            PatternKind::InvertInner => LossKind::InversionLongitudinal,
        }
    }
}

/// How the inner region is described.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetGeometry {
    /// Axis-aligned box; voxels inside are the inner region.
    Cuboid { center_cm: Vec3, size_cm: Vec3 },
    /// Explicit per-voxel labels.
    Labels(Vec<VoxelLabel>),
}

/// Optional transition band around the inner region boundary that is
/// excluded from the fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DontCare {
    None,
    /// Voxels within this distance of the cuboid surface (per axis, cm)
    /// are excluded. Only meaningful with a cuboid geometry; label
    /// geometries carry their own don't-care voxels.
    Shell { thickness_cm: Vec3 },
}

const BOUNDARY_TOL: f64 = 1e-9;

fn inside_box(p: Vec3, center: Vec3, half: Vec3) -> bool {
    (0..3).all(|k| (p[k] - center[k]).abs() <= half[k] + BOUNDARY_TOL)
}

/// Labels every voxel of the grid as inner, outer, or don't-care.
pub fn classify_voxels(
    grid: &SpinGrid,
    geometry: &TargetGeometry,
    dont_care: &DontCare,
) -> Result<Vec<VoxelLabel>> {
    match geometry {
        TargetGeometry::Labels(labels) => {
            if labels.len() != grid.n_voxels() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} voxels",
                    labels.len(),
                    grid.n_voxels()
                )));
            }
            if matches!(dont_care, DontCare::Shell { .. }) {
                return Err(Error::Validation(
                    "a don't-care shell requires a cuboid geometry; \
                     label geometries mark don't-care voxels explicitly"
                        .into(),
                ));
            }
            Ok(labels.clone())
        }
        TargetGeometry::Cuboid { center_cm, size_cm } => {
            if size_cm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
                return Err(Error::Validation(format!(
                    "cuboid size must be positive, got {size_cm:?}"
                )));
            }
            let half = [size_cm[0] / 2.0, size_cm[1] / 2.0, size_cm[2] / 2.0];
            let shell = match dont_care {
                DontCare::None => None,
                DontCare::Shell { thickness_cm } => {
                    if thickness_cm.iter().any(|&t| !(t.is_finite() && t >= 0.0)) {
                        return Err(Error::Validation(format!(
                            "shell thickness must be nonnegative, got {thickness_cm:?}"
                        )));
                    }
                    let grown = [
                        half[0] + thickness_cm[0],
                        half[1] + thickness_cm[1],
                        half[2] + thickness_cm[2],
                    ];
                    let shrunk = [
                        (half[0] - thickness_cm[0]).max(0.0),
                        (half[1] - thickness_cm[1]).max(0.0),
                        (half[2] - thickness_cm[2]).max(0.0),
                    ];
                    Some((grown, shrunk))
                }
            };
            Ok(grid
                .positions
                .iter()
                .map(|&p| {
                    if let Some((grown, shrunk)) = shell {
                        let near_boundary =
                            inside_box(p, *center_cm, grown) && !inside_box(p, *center_cm, shrunk);
                        if near_boundary {
                            return VoxelLabel::DontCare;
                        }
                    }
                    if inside_box(p, *center_cm, half) {
                        VoxelLabel::Inner
                    } else {
                        VoxelLabel::Outer
                    }
                })
                .collect())
        }
    }
}

/// Builds the desired magnetization and weights for a pattern over a
/// grid. Masked and don't-care voxels get zero weight. Fails if either
/// region ends up with no weighted voxels.
pub fn build_target(
    grid: &SpinGrid,
    kind: PatternKind,
    geometry: &TargetGeometry,
    dont_care: &DontCare,
) -> Result<TargetPattern> {
    let labels = classify_voxels(grid, geometry, dont_care)?;
    let (inner_m, outer_m) = match kind {
        PatternKind::SaturateOuter => ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        PatternKind::InvertInner => ([0.0, 0.0, -1.0], [0.0, 0.0, 1.0]),
    };
    let mut m_desired = Vec::with_capacity(labels.len());
    let mut weight = Vec::with_capacity(labels.len());
    let mut n_inner = 0usize;
    let mut n_outer = 0usize;
    for (v, label) in labels.iter().enumerate() {
        let (m, w) = match label {
            VoxelLabel::Inner => (inner_m, 1.0),
            VoxelLabel::Outer => (outer_m, 1.0),
            VoxelLabel::DontCare => ([0.0, 0.0, 1.0], 0.0),
        };
        let w = if grid.mask[v] { w } else { 0.0 };
        if w > 0.0 {
            match label {
                VoxelLabel::Inner => n_inner += 1,
                VoxelLabel::Outer => n_outer += 1,
                VoxelLabel::DontCare => {}
            }
        }
        m_desired.push(m);
        weight.push(w);
    }
    if n_inner == 0 {
        return Err(Error::EmptyRegion(
            "no weighted voxel falls in the inner region".into(),
        ));
    }
    if n_outer == 0 {
        return Err(Error::EmptyRegion(
            "no weighted voxel falls in the outer region".into(),
        ));
    }
    Ok(TargetPattern { m_desired, weight })
}
