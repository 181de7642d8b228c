//! Built-in benchmark problems.

use std::f64::consts::PI;

use crate::error::Result;
use crate::initpulse::{InitSpec, KtPointsParams};
use crate::model::{HardwareLimits, PhysicsConstants, SpinGrid};
use crate::objective::{
    build_target, DontCare, LossKind, LossSpec, PatternKind, TargetGeometry,
};
use crate::optim::{DesignOptions, DesignProblem};
use crate::vec3;

/// Small inversion benchmark that a design run should solve in seconds.
///
/// An 8x8x4 grid spans a 24 cm cube. The target inverts a centered
/// 12 cm cuboid while leaving everything else at equilibrium, with a
/// half-voxel don't-care shell absorbing the first layer outside the
/// cuboid boundary (32 inner, 112 don't-care, 112 outer voxels). A
/// quadratic off-resonance bowl reaching about 30 Hz at the corners
/// makes the problem realistic enough to exercise the full pipeline.
pub fn toy_inversion_problem() -> Result<(DesignProblem, DesignOptions)> {
    let mut grid = SpinGrid::regular([8, 8, 4], [24.0, 24.0, 24.0], 1.47, 0.07);
    grid.set_offres_with(|p| 2.0 * PI * 15.0 * vec3::dot(p, p) / 144.0);
    let target = build_target(
        &grid,
        PatternKind::InvertInner,
        &TargetGeometry::Cuboid {
            center_cm: vec3::ZERO,
            size_cm: [12.0, 12.0, 12.0],
        },
        &DontCare::Shell {
            thickness_cm: [1.5, 1.5, 3.0],
        },
    )?;
    let problem = DesignProblem {
        grid,
        target,
        loss: LossSpec {
            kind: LossKind::InversionLongitudinal,
            lambda: 0.1,
        },
        limits: HardwareLimits {
            b_max: 0.25,
            g_max: 5.0,
            s_max: 12_000.0,
        },
        consts: PhysicsConstants::default(),
        m0: None,
        init: InitSpec::KtPoints(KtPointsParams {
            n_points: 5,
            subpulse_samples: 40,
            margin: 0.9,
        }),
    };
    let options = DesignOptions {
        outer_iters: 30,
        early_stop_rel: 1e-8,
        ..Default::default()
    };
    Ok((problem, options))
}
