//! JSON design configuration and its translation into library types.
//!
//! One document describes a whole design problem. Keys carry their units
//! (`b_max_gauss`, `fov_cm`) and unknown keys are rejected, so a typo
//! fails loudly instead of silently falling back to a default. Only the
//! gyromagnetic ratio and the sample period have defaults; every other
//! physical quantity must be stated. File paths are resolved relative to
//! the directory containing the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use blochdesign::io::{read_grid, read_labels_csv, read_magnetization_csv};
use blochdesign::{
    build_target, DesignMode, DesignOptions, DesignProblem, DontCare, Error, HardwareLimits,
    InitSpec, KtPointsParams, LbfgsOptions, LossKind, LossSpec, PatternKind, PhysicsConstants,
    Result, SpinGrid, TargetGeometry,
};

/// Top-level design configuration document.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub grid: GridSpec,
    #[serde(default)]
    pub constants: ConstantsSpec,
    pub limits: LimitsSpec,
    pub loss: LossConfig,
    pub target: TargetSpec,
    pub init: InitConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    /// Starting magnetization file; thermal equilibrium when omitted.
    #[serde(default)]
    pub m0_file: Option<PathBuf>,
    /// Default output directory, relative to the working directory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Seed for randomized diagnostics such as gradient-check sampling.
    #[serde(default)]
    pub seed: u64,
}

/// Either a grid file or an analytic regular grid.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub dims: Option<[usize; 3]>,
    #[serde(default)]
    pub fov_cm: Option<[f64; 3]>,
    #[serde(default)]
    pub t1_s: Option<f64>,
    #[serde(default)]
    pub t2_s: Option<f64>,
    #[serde(default)]
    pub off_resonance: Option<OffResonanceSpec>,
}

/// Analytic off-resonance map for regular grids.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffResonanceSpec {
    /// Quadratic bowl `w(p) = c * |p|^2` with this coefficient.
    pub quadratic_rad_per_s_cm2: f64,
}

/// Physical constants; both fields have conventional defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    #[serde(default = "default_gamma")]
    pub gamma_rad_per_s_gauss: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
}

fn default_gamma() -> f64 {
    PhysicsConstants::default().gamma
}

fn default_dt() -> f64 {
    PhysicsConstants::default().dt
}

impl Default for ConstantsSpec {
    fn default() -> Self {
        ConstantsSpec {
            gamma_rad_per_s_gauss: default_gamma(),
            dt_s: default_dt(),
        }
    }
}

/// Hardware limits; all three are required.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSpec {
    pub b_max_gauss: f64,
    pub g_max_gauss_per_cm: f64,
    pub s_max_gauss_per_cm_per_s: f64,
}

/// Loss selection. `kind` defaults to the target pattern's natural fit.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub kind: Option<String>,
    pub lambda_per_gauss2: f64,
}

/// Target pattern and geometry: a cuboid with an optional don't-care
/// shell, or an explicit per-voxel label file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub pattern: String,
    #[serde(default)]
    pub cuboid: Option<CuboidSpec>,
    #[serde(default)]
    pub labels_file: Option<PathBuf>,
    #[serde(default)]
    pub dont_care_shell_cm: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuboidSpec {
    pub center_cm: [f64; 3],
    pub size_cm: [f64; 3],
}

/// Initial waveform: a pulse file or kt-points parameters.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub kt_points: Option<KtPointsSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KtPointsSpec {
    pub n_points: usize,
    pub subpulse_samples: usize,
    pub margin: f64,
}

/// Optimizer settings; every field has the library default.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub mode: String,
    pub outer_iters: usize,
    pub early_stop_rel: f64,
    pub lbfgs: LbfgsSpec,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let d = DesignOptions::default();
        OptimizerSpec {
            mode: "alternating".into(),
            outer_iters: d.outer_iters,
            early_stop_rel: d.early_stop_rel,
            lbfgs: LbfgsSpec::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsSpec {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub ls_max_evals: usize,
}

impl Default for LbfgsSpec {
    fn default() -> Self {
        let d = LbfgsOptions::default();
        LbfgsSpec {
            memory: d.memory,
            max_iters: d.max_iters,
            grad_tol: d.grad_tol,
            c1: d.c1,
            c2: d.c2,
            ls_max_evals: d.ls_max_evals,
        }
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn parse_loss_kind(name: &str) -> Result<LossKind> {
    match name {
        "iv180" | "inversion" | "inversion_longitudinal" => Ok(LossKind::InversionLongitudinal),
        "ov90" | "saturation" | "saturation_mls" => Ok(LossKind::SaturationMls),
        other => Err(Error::Validation(format!(
            "unknown loss kind {other:?}; use iv180/inversion or ov90/saturation_mls"
        ))),
    }
}

fn parse_pattern(name: &str) -> Result<PatternKind> {
    match name {
        "invert_inner" => Ok(PatternKind::InvertInner),
        "saturate_outer" => Ok(PatternKind::SaturateOuter),
        other => Err(Error::Validation(format!(
            "unknown target pattern {other:?}; use invert_inner or saturate_outer"
        ))),
    }
}

fn parse_mode(name: &str) -> Result<DesignMode> {
    match name {
        "alternating" => Ok(DesignMode::Alternating),
        "simultaneous" => Ok(DesignMode::Simultaneous),
        other => Err(Error::Validation(format!(
            "unknown optimizer mode {other:?}; use alternating or simultaneous"
        ))),
    }
}

impl DesignConfig {
    /// Reads and parses a config file. The returned base directory is the
    /// config file's parent, against which relative paths resolve.
    pub fn load(path: &Path) -> Result<(DesignConfig, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let config: DesignConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((config, base))
    }

    fn build_grid(&self, base: &Path) -> Result<SpinGrid> {
        let spec = &self.grid;
        if let Some(file) = &spec.file {
            if spec.dims.is_some() || spec.fov_cm.is_some() || spec.t1_s.is_some()
                || spec.t2_s.is_some() || spec.off_resonance.is_some()
            {
                return Err(Error::Validation(
                    "grid: give either a file or an analytic spec, not both".into(),
                ));
            }
            return read_grid(&resolve(base, file));
        }
        match (spec.dims, spec.fov_cm, spec.t1_s, spec.t2_s) {
            (Some(dims), Some(fov), Some(t1), Some(t2)) => {
                let mut grid = SpinGrid::regular(dims, fov, t1, t2);
                if let Some(off) = &spec.off_resonance {
                    let c = off.quadratic_rad_per_s_cm2;
                    grid.set_offres_with(|p| c * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
                }
                Ok(grid)
            }
            _ => Err(Error::Validation(
                "grid: an analytic spec needs dims, fov_cm, t1_s, and t2_s".into(),
            )),
        }
    }

    fn build_target_pattern(&self, base: &Path, grid: &SpinGrid) -> Result<(PatternKind, blochdesign::TargetPattern)> {
        let pattern = parse_pattern(&self.target.pattern)?;
        let geometry = match (&self.target.cuboid, &self.target.labels_file) {
            (Some(cuboid), None) => TargetGeometry::Cuboid {
                center_cm: cuboid.center_cm,
                size_cm: cuboid.size_cm,
            },
            (None, Some(file)) => TargetGeometry::Labels(read_labels_csv(&resolve(base, file))?),
            _ => {
                return Err(Error::Validation(
                    "target: give exactly one of cuboid or labels_file".into(),
                ))
            }
        };
        if self.target.dont_care_shell_cm.is_some() && self.target.labels_file.is_some() {
            return Err(Error::Validation(
                "target: dont_care_shell_cm only applies to a cuboid; label files carry their own don't-care voxels".into(),
            ));
        }
        let dont_care = match self.target.dont_care_shell_cm {
            Some(thickness) => DontCare::Shell {
                thickness_cm: thickness,
            },
            None => DontCare::None,
        };
        let target = build_target(grid, pattern, &geometry, &dont_care)?;
        Ok((pattern, target))
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        let pattern = parse_pattern(&self.target.pattern)?;
        let kind = match &self.loss.kind {
            Some(name) => parse_loss_kind(name)?,
            None => pattern.default_loss_kind(),
        };
        Ok(LossSpec {
            kind,
            lambda: self.loss.lambda_per_gauss2,
        })
    }

    /// Assembles the full design problem this config describes.
    pub fn problem(&self, base: &Path) -> Result<DesignProblem> {
        let grid = self.build_grid(base)?;
        let (_, target) = self.build_target_pattern(base, &grid)?;
        let loss = self.loss_spec()?;
        let limits = HardwareLimits {
            b_max: self.limits.b_max_gauss,
            g_max: self.limits.g_max_gauss_per_cm,
            s_max: self.limits.s_max_gauss_per_cm_per_s,
        };
        let consts = PhysicsConstants {
            gamma: self.constants.gamma_rad_per_s_gauss,
            dt: self.constants.dt_s,
        };
        let init = match (&self.init.file, &self.init.kt_points) {
            (Some(file), None) => InitSpec::File(resolve(base, file)),
            (None, Some(kt)) => InitSpec::KtPoints(KtPointsParams {
                n_points: kt.n_points,
                subpulse_samples: kt.subpulse_samples,
                margin: kt.margin,
            }),
            _ => {
                return Err(Error::Validation(
                    "init: give exactly one of file or kt_points".into(),
                ))
            }
        };
        let m0 = match &self.m0_file {
            Some(file) => Some(read_magnetization_csv(&resolve(base, file))?),
            None => None,
        };
        Ok(DesignProblem {
            grid,
            target,
            loss,
            limits,
            consts,
            m0,
            init,
        })
    }

    pub fn options(&self) -> Result<DesignOptions> {
        let o = &self.optimizer;
        let options = DesignOptions {
            mode: parse_mode(&o.mode)?,
            outer_iters: o.outer_iters,
            lbfgs: LbfgsOptions {
                memory: o.lbfgs.memory,
                max_iters: o.lbfgs.max_iters,
                grad_tol: o.lbfgs.grad_tol,
                c1: o.lbfgs.c1,
                c2: o.lbfgs.c2,
                ls_max_evals: o.lbfgs.ls_max_evals,
            },
            early_stop_rel: o.early_stop_rel,
            ..Default::default()
        };
        options.validate()?;
        Ok(options)
    }
}
