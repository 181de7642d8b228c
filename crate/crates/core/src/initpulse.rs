//! Starting waveforms for the design drivers.
//!
//! Two sources are supported. A waveform file is read, rescaled into the
//! RF amplitude limit if needed, and checked against the slew limit. Or a
//! subpulse train is constructed from the target pattern: a few dominant
//! spatial frequencies of the demanded flip-angle map are visited by
//! triangular gradient blips, with a constant hard RF subpulse at each
//! stop whose complex weight comes from a small-tip least-squares fit.
//! The construction stays strictly inside every hardware limit by a
//! caller-chosen margin, so encoding it into design variables always
//! succeeds.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::constraint::encode;
use crate::error::{Error, Result};
use crate::io::read_pulse_csv;
use crate::model::{HardwareLimits, PhysicsConstants, Pulse, SpinGrid};
use crate::objective::TargetPattern;
use crate::vec3::{self, Vec3};

/// Where the starting waveform comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    /// Read the waveform from a file in the [`crate::io::read_pulse_csv`]
    /// layout.
    File(PathBuf),
    /// Construct a subpulse train from the target pattern.
    KtPoints(KtPointsParams),
}

/// Parameters of the constructed subpulse train.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KtPointsParams {
    /// Number of spatial-frequency points to visit, DC included. Capped
    /// at the number of candidate frequencies the grid can resolve.
    pub n_points: usize,
    /// Samples per constant RF subpulse.
    pub subpulse_samples: usize,
    /// Fraction of each hardware limit the construction may use,
    /// strictly between 0 and 1 so the result is strictly feasible.
    pub margin: f64,
}

impl Default for KtPointsParams {
    fn default() -> Self {
        KtPointsParams {
            n_points: 5,
            subpulse_samples: 30,
            margin: 0.9,
        }
    }
}

impl KtPointsParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::Validation("n_points must be at least 1".into()));
        }
        if self.subpulse_samples == 0 {
            return Err(Error::Validation(
                "subpulse_samples must be at least 1".into(),
            ));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::Validation(format!(
                "margin must lie strictly between 0 and 1, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// A starting waveform plus the scale factor that was applied to its RF
/// to bring it inside the amplitude limit (1 when none was needed).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedInit {
    pub pulse: Pulse,
    pub rf_scale: f64,
}

/// Reads a waveform file and makes it a usable starting point: RF at or
/// above the amplitude limit is scaled to just under it, and a waveform
/// whose implied slew rate reaches the slew limit is rejected, since no
/// RF scaling can repair the gradients.
pub fn init_from_file(path: &Path, limits: &HardwareLimits) -> Result<LoadedInit> {
    limits.validate()?;
    let mut pulse = read_pulse_csv(path)?;
    let peak = pulse.peak_rf();
    let mut rf_scale = 1.0;
    if peak >= limits.b_max {
        rf_scale = limits.b_max * (1.0 - 1e-6) / peak;
        for b in &mut pulse.rf {
            *b *= rf_scale;
        }
    }
    encode(&pulse, limits)?;
    Ok(LoadedInit { pulse, rf_scale })
}

struct AxisStats {
    distinct: usize,
    fov: f64,
}

fn axis_stats(mut coords: Vec<f64>) -> AxisStats {
    coords.sort_by(f64::total_cmp);
    let span = coords[coords.len() - 1] - coords[0];
    let tol = 1e-9 * span.max(1.0);
    let mut distinct = 1usize;
    let mut pitch = f64::INFINITY;
    let mut prev = coords[0];
    for &c in &coords[1..] {
        if c - prev > tol {
            pitch = pitch.min(c - prev);
            distinct += 1;
            prev = c;
        }
    }
    let fov = if distinct >= 2 { span + pitch } else { 1.0 };
    AxisStats { distinct, fov }
}

#[derive(Debug, Clone)]
struct Candidate {
    /// Integer frequency index per axis; DC is `[0, 0, 0]`.
    index: [i64; 3],
    /// Spatial frequency in cycles/cm.
    k: Vec3,
    /// Magnitude of the demand pattern's transform at `k`.
    score: f64,
}

struct Blip {
    /// Samples in the rising half; the full blip spans `2 * half - 1`.
    half: usize,
    /// Per-axis peak amplitude in G/cm, signed.
    peak: Vec3,
}

fn solve_dense_complex(
    mut a: Vec<Vec<Complex64>>,
    mut b: Vec<Complex64>,
) -> Result<Vec<Complex64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].norm_sqr().total_cmp(&a[j][col].norm_sqr()))
            .unwrap();
        if !(a[pivot][col].norm_sqr() > 0.0) {
            return Err(Error::Numerical(
                "singular normal equations in the subpulse weight solve".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = a[col].clone();
        let rhs_col = b[col];
        for row in col + 1..n {
            let f = a[row][col] / pivot_row[col];
            for k in col..n {
                a[row][k] -= f * pivot_row[k];
            }
            b[row] -= f * rhs_col;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
        if !(x[col].re.is_finite() && x[col].im.is_finite()) {
            return Err(Error::Numerical(
                "subpulse weight solve produced a non-finite weight".into(),
            ));
        }
    }
    Ok(x)
}

/// Constructs a subpulse train tailored to the target pattern.
///
/// The demanded flip angle at each weighted voxel is `acos` of the
/// desired longitudinal component. Its discrete transform over a small
/// grid of spatial frequencies ranks candidate points; the top
/// `n_points` are visited in order of decreasing frequency magnitude so
/// the train ends at DC and needs no trailing blip. Complex subpulse
/// weights then solve a ridge-regularized weighted least-squares fit of
/// the demand, and the whole train is scaled to respect the RF limit.
pub fn init_kt_points(
    params: &KtPointsParams,
    grid: &SpinGrid,
    target: &TargetPattern,
    limits: &HardwareLimits,
    consts: &PhysicsConstants,
) -> Result<LoadedInit> {
    params.validate()?;
    limits.validate()?;
    consts.validate()?;
    grid.ensure_valid()?;
    target.validate()?;
    if target.n_voxels() != grid.n_voxels() {
        return Err(Error::Dimension(format!(
            "target has {} voxels but grid has {}",
            target.n_voxels(),
            grid.n_voxels()
        )));
    }
    let counted: Vec<usize> = (0..grid.n_voxels())
        .filter(|&v| target.weight[v] > 0.0)
        .collect();
    if counted.is_empty() {
        return Err(Error::EmptyRegion(
            "target has no weighted voxels to initialize from".into(),
        ));
    }
    let theta: Vec<f64> = counted
        .iter()
        .map(|&v| target.m_desired[v][2].clamp(-1.0, 1.0).acos())
        .collect();

    let stats: Vec<AxisStats> = (0..3)
        .map(|a| axis_stats(counted.iter().map(|&v| grid.positions[v][a]).collect()))
        .collect();
    let reach: Vec<i64> = stats
        .iter()
        .map(|s| (s.distinct as i64 / 2).min(5))
        .collect();

    let mut candidates = Vec::new();
    for nx in -reach[0]..=reach[0] {
        for ny in -reach[1]..=reach[1] {
            for nz in -reach[2]..=reach[2] {
                let k = [
                    nx as f64 / stats[0].fov,
                    ny as f64 / stats[1].fov,
                    nz as f64 / stats[2].fov,
                ];
                let mut f = Complex64::new(0.0, 0.0);
                for (row, &v) in counted.iter().enumerate() {
                    let phase = 2.0 * PI * vec3::dot(k, grid.positions[v]);
                    f += Complex64::from_polar(target.weight[v] * theta[row], phase);
                }
                candidates.push(Candidate {
                    index: [nx, ny, nz],
                    k,
                    score: f.norm(),
                });
            }
        }
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.index.cmp(&b.index)));
    let n_sel = params.n_points.min(candidates.len());
    let mut selected: Vec<Candidate> = candidates.into_iter().take(n_sel).collect();
    if !selected.iter().any(|c| c.index == [0, 0, 0]) {
        selected.pop();
        selected.push(Candidate {
            index: [0, 0, 0],
            k: vec3::ZERO,
            score: 0.0,
        });
    }
    selected.sort_by(|a, b| {
        let (na, nb) = (vec3::dot(a.k, a.k), vec3::dot(b.k, b.k));
        nb.total_cmp(&na).then_with(|| a.index.cmp(&b.index))
    });
    let n_sel = selected.len();

    let dt = consts.dt;
    let gamma_bar = consts.gamma / (2.0 * PI);
    let s_eff = params.margin * limits.s_max;
    let g_eff = params.margin * limits.g_max;
    let mut blips = Vec::with_capacity(n_sel.saturating_sub(1));
    for j in 0..n_sel - 1 {
        let area = vec3::scale(vec3::sub(selected[j].k, selected[j + 1].k), 1.0 / gamma_bar);
        let mut half = 1usize;
        for a in 0..3 {
            let by_slew = (area[a].abs() / (s_eff * dt * dt)).sqrt().ceil() as usize;
            let by_amp = (area[a].abs() / (g_eff * dt)).ceil() as usize;
            half = half.max(by_slew).max(by_amp);
        }
        blips.push(Blip {
            half,
            peak: vec3::scale(area, 1.0 / (dt * half as f64)),
        });
    }

    let n_sub = params.subpulse_samples;
    let mut starts = Vec::with_capacity(n_sel);
    let mut n_total = 0usize;
    for j in 0..n_sel {
        starts.push(n_total);
        n_total += n_sub;
        if j < blips.len() {
            n_total += 2 * blips[j].half - 1;
        }
    }

    let t_end = n_total as f64 * dt;
    let centers: Vec<f64> = starts
        .iter()
        .map(|&s| (s as f64 + n_sub as f64 / 2.0) * dt)
        .collect();
    let atoms: Vec<Vec<Complex64>> = counted
        .iter()
        .map(|&v| {
            (0..n_sel)
                .map(|j| {
                    let phase = -(2.0 * PI * vec3::dot(selected[j].k, grid.positions[v])
                        + grid.offres[v] * (t_end - centers[j]));
                    Complex64::from_polar(1.0, phase)
                })
                .collect()
        })
        .collect();

    let w_tot: f64 = counted.iter().map(|&v| target.weight[v]).sum();
    let mut gram = vec![vec![Complex64::new(0.0, 0.0); n_sel]; n_sel];
    let mut rhs = vec![Complex64::new(0.0, 0.0); n_sel];
    for (row, &v) in counted.iter().enumerate() {
        let w = target.weight[v];
        for i in 0..n_sel {
            let wi = atoms[row][i].conj() * w;
            rhs[i] += wi * theta[row];
            for j in 0..n_sel {
                gram[i][j] += wi * atoms[row][j];
            }
        }
    }
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += Complex64::new(1e-6 * w_tot, 0.0);
    }
    let weights = solve_dense_complex(gram, rhs)?;

    let sub_area = consts.gamma * n_sub as f64 * dt;
    let mut amps: Vec<Complex64> = weights.iter().map(|x| x / sub_area).collect();
    let peak = amps.iter().map(|b| b.norm()).fold(0.0, f64::max);
    let b_eff = params.margin * limits.b_max;
    let rf_scale = if peak > b_eff { b_eff / peak } else { 1.0 };
    for b in &mut amps {
        *b *= rf_scale;
    }

    let mut pulse = Pulse::zeros(n_total, dt);
    for j in 0..n_sel {
        for i in 0..n_sub {
            pulse.rf[starts[j] + i] = amps[j];
        }
        if j < blips.len() {
            let blip = &blips[j];
            let base = starts[j] + n_sub;
            let denom = blip.half as f64;
            for i in 1..2 * blip.half {
                let level = i.min(2 * blip.half - i) as f64 / denom;
                pulse.grad[base + i - 1] = vec3::scale(blip.peak, level);
            }
        }
    }
    pulse.validate()?;
    encode(&pulse, limits)?;
    Ok(LoadedInit { pulse, rf_scale })
}

/// Builds the starting waveform a design run begins from.
pub fn build_initial_pulse(
    spec: &InitSpec,
    grid: &SpinGrid,
    target: &TargetPattern,
    limits: &HardwareLimits,
    consts: &PhysicsConstants,
) -> Result<LoadedInit> {
    match spec {
        InitSpec::File(path) => init_from_file(path, limits),
        InitSpec::KtPoints(params) => init_kt_points(params, grid, target, limits, consts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Magnetization;
    use crate::objective::{build_target, DontCare, PatternKind, TargetGeometry};
    use crate::sim::simulate_final;

    fn limits() -> HardwareLimits {
        HardwareLimits {
            b_max: 0.25,
            g_max: 5.0,
            s_max: 12_000.0,
        }
    }

    fn toy_problem() -> (SpinGrid, TargetPattern) {
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
        )
        .unwrap();
        (grid, target)
    }

    #[test]
    fn single_point_train_is_a_hard_pulse() {
        let grid = SpinGrid::regular([2, 2, 1], [4.0, 4.0, 2.0], 1.47, 0.07);
        let target = TargetPattern {
            m_desired: vec![[0.0, 0.0, -1.0]; 4],
            weight: vec![1.0; 4],
        };
        let params = KtPointsParams {
            n_points: 1,
            subpulse_samples: 25,
            margin: 0.9,
        };
        let init =
            init_kt_points(&params, &grid, &target, &limits(), &PhysicsConstants::default())
                .unwrap();
        assert_eq!(init.pulse.n_samples(), 25);
        assert!(init.pulse.grad.iter().all(|g| *g == vec3::ZERO));
        let first = init.pulse.rf[0];
        assert!(first.norm() > 0.0);
        assert!(init.pulse.rf.iter().all(|b| *b == first));
        assert!(init.rf_scale <= 1.0);
    }

    #[test]
    fn construction_is_deterministic() {
        let (grid, target) = toy_problem();
        let params = KtPointsParams::default();
        let consts = PhysicsConstants::default();
        let a = init_kt_points(&params, &grid, &target, &limits(), &consts).unwrap();
        let b = init_kt_points(&params, &grid, &target, &limits(), &consts).unwrap();
        assert_eq!(a.pulse, b.pulse);
        assert_eq!(a.rf_scale.to_bits(), b.rf_scale.to_bits());
    }

    #[test]
    fn train_is_feasible_and_tips_the_inner_region() {
        let (grid, target) = toy_problem();
        let params = KtPointsParams::default();
        let consts = PhysicsConstants::default();
        let lim = limits();
        let init = init_kt_points(&params, &grid, &target, &lim, &consts).unwrap();
        assert!(encode(&init.pulse, &lim).is_ok());
        assert!(init.pulse.peak_rf() <= params.margin * lim.b_max * (1.0 + 1e-12));
        assert!(init.pulse.peak_grad() <= params.margin * lim.g_max * (1.0 + 1e-12));

        let m0 = Magnetization::equilibrium(grid.n_voxels());
        let final_mag = simulate_final(&init.pulse, &grid, &m0, &consts).unwrap();
        let mut inner_sum = 0.0;
        let mut inner_n = 0.0;
        for v in 0..grid.n_voxels() {
            if target.weight[v] > 0.0 && target.m_desired[v][2] < 0.0 {
                inner_sum += final_mag.m[v][2];
                inner_n += 1.0;
            }
        }
        assert!(inner_n > 0.0);
        let inner_mean = inner_sum / inner_n;
        assert!(
            inner_mean < 0.5,
            "inner region barely tipped, mean m_z = {inner_mean}"
        );
    }

    #[test]
    fn flat_grid_never_uses_the_through_plane_axis() {
        let mut grid = SpinGrid::regular([6, 6, 1], [12.0, 12.0, 2.0], 1.47, 0.07);
        grid.set_offres_with(|_| 0.0);
        let target = build_target(
            &grid,
            PatternKind::InvertInner,
            &TargetGeometry::Cuboid {
                center_cm: [-3.0, 0.0, 0.0],
                size_cm: [6.0, 12.0, 2.0],
            },
            &DontCare::None,
        )
        .unwrap();
        let init = init_kt_points(
            &KtPointsParams::default(),
            &grid,
            &target,
            &limits(),
            &PhysicsConstants::default(),
        )
        .unwrap();
        assert!(init.pulse.grad.iter().all(|g| g[2] == 0.0));
        assert!(init.pulse.grad.iter().any(|g| g[0] != 0.0 || g[1] != 0.0));
    }

    #[test]
    fn file_init_rescales_hot_rf() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init.csv");
        let mut pulse = Pulse::zeros(10, 4e-6);
        for (t, b) in pulse.rf.iter_mut().enumerate() {
            *b = Complex64::new(0.03 * (t + 1) as f64, 0.0);
        }
        crate::io::write_pulse_csv(&path, &pulse).unwrap();
        let init = init_from_file(&path, &limits()).unwrap();
        let expect_scale = 0.25 * (1.0 - 1e-6) / 0.3;
        assert!((init.rf_scale - expect_scale).abs() < 1e-15);
        assert!((init.pulse.peak_rf() - 0.25 * (1.0 - 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn file_init_keeps_cool_rf_unscaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init.csv");
        let mut pulse = Pulse::zeros(8, 4e-6);
        pulse.rf[3] = Complex64::new(0.0, 0.1);
        crate::io::write_pulse_csv(&path, &pulse).unwrap();
        let init = init_from_file(&path, &limits()).unwrap();
        assert_eq!(init.rf_scale, 1.0);
        assert_eq!(init.pulse, pulse);
    }

    #[test]
    fn file_init_rejects_infeasible_slew() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init.csv");
        let mut pulse = Pulse::zeros(8, 4e-6);
        pulse.grad[0] = [5.0, 0.0, 0.0];
        crate::io::write_pulse_csv(&path, &pulse).unwrap();
        let err = init_from_file(&path, &limits()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "got {err:?}");
    }

    #[test]
    fn file_init_propagates_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init.csv");
        std::fs::write(&path, "not a waveform\n").unwrap();
        let err = init_from_file(&path, &limits()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");
    }

    #[test]
    fn rejects_bad_params() {
        let (grid, target) = toy_problem();
        let consts = PhysicsConstants::default();
        for params in [
            KtPointsParams {
                n_points: 0,
                ..Default::default()
            },
            KtPointsParams {
                subpulse_samples: 0,
                ..Default::default()
            },
            KtPointsParams {
                margin: 1.0,
                ..Default::default()
            },
        ] {
            assert!(init_kt_points(&params, &grid, &target, &limits(), &consts).is_err());
        }
    }
}
