//! The five subcommand implementations.
//!
//! Each command returns the process exit code on success; errors bubble
//! up as library errors and are mapped to exit codes in `main`. Designs
//! are exported with a slew-feasible gradient ramp-down appended after
//! the optimized samples, so the waveform on disk ends at zero gradient,
//! and the reported NRMSE is recomputed from that exported waveform to
//! keep the files and the report consistent with each other.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use serde::Serialize;

use blochdesign::constraint::SlewOperator;
use blochdesign::io::{
    read_grid, read_magnetization_csv, read_pulse_csv, write_history_csv,
    write_magnetization_csv, write_pulse_csv,
};
use blochdesign::{
    backprop, build_initial_pulse, evaluate_loss, fd_check, nrmse, run_design, simulate,
    simulate_final, vec3, DesignProblem, Error, HardwareLimits, Magnetization, PhysicsConstants,
    Pulse, Result,
};

use crate::config::DesignConfig;

/// Largest finite-difference relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn starting_magnetization(problem: &DesignProblem) -> Magnetization {
    problem
        .m0
        .clone()
        .unwrap_or_else(|| Magnetization::equilibrium(problem.grid.n_voxels()))
}

/// Appends a linear gradient ramp from the final sample down to zero,
/// with zero RF, sized so the per-axis slew stays strictly inside the
/// limit. Returns the extended pulse and the number of appended samples.
fn append_ramp_down(pulse: &Pulse, limits: &HardwareLimits) -> (Pulse, usize) {
    let end = pulse.grad.last().copied().unwrap_or(vec3::ZERO);
    let peak = end.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
    if peak == 0.0 {
        return (pulse.clone(), 0);
    }
    let per_step = 0.999 * limits.s_max * pulse.dt;
    let n = (peak / per_step).ceil() as usize;
    let mut out = pulse.clone();
    for k in 1..=n {
        out.rf.push(Complex64::new(0.0, 0.0));
        out.grad.push(vec3::scale(end, (n - k) as f64 / n as f64));
    }
    (out, n)
}

/// Shifts the gradient channels by whole samples relative to the RF,
/// zero-padding the exposed end. Positive delays play the gradient late.
fn shift_gradient(pulse: &Pulse, delay_samples: i64) -> Pulse {
    let n = pulse.grad.len();
    let mut grad = vec![vec3::ZERO; n];
    for t in 0..n {
        let src = t as i64 - delay_samples;
        if src >= 0 && (src as usize) < n {
            grad[t] = pulse.grad[src as usize];
        }
    }
    Pulse {
        rf: pulse.rf.clone(),
        grad,
        dt: pulse.dt,
    }
}

#[derive(Serialize)]
struct DesignReport {
    final_loss: f64,
    initial_loss: f64,
    /// NRMSE of the exported waveform, ramp-down included; matches a
    /// recomputation from pulse.csv and final_mag.csv exactly.
    nrmse: f64,
    /// NRMSE at the last accepted iterate, before the ramp-down.
    design_nrmse: f64,
    peak_rf_gauss: f64,
    peak_grad_gauss_per_cm: f64,
    peak_slew_gauss_per_cm_per_s: f64,
    n_samples: usize,
    ramp_samples: usize,
    duration_s: f64,
    rf_scale: f64,
    mode: String,
    outer_iters: usize,
    runtime_s: f64,
}

pub fn cmd_design(config_path: &Path, out_override: Option<PathBuf>) -> Result<i32> {
    let (config, base) = DesignConfig::load(config_path)?;
    let out_dir = out_override
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let problem = config.problem(&base)?;
    let options = config.options()?;

    let start = Instant::now();
    let result = run_design(&problem, &options)?;
    let runtime_s = start.elapsed().as_secs_f64();
    if result.gmax.exceeded {
        return Err(Error::Infeasible(format!(
            "designed waveform fails the gradient amplitude check: {}",
            result.gmax
        )));
    }

    let (exported, ramp_samples) = append_ramp_down(&result.pulse, &problem.limits);
    let m0 = starting_magnetization(&problem);
    let final_mag = simulate_final(&exported, &problem.grid, &m0, &problem.consts)?;
    let export_nrmse = nrmse(&final_mag, &problem.target, problem.loss.kind)?;
    let peak_slew = SlewOperator { dt: exported.dt }
        .apply(&exported.grad)
        .iter()
        .flatten()
        .fold(0.0f64, |a, &s| a.max(s.abs()));

    ensure_dir(&out_dir)?;
    write_pulse_csv(&out_dir.join("pulse.csv"), &exported)?;
    write_history_csv(&out_dir.join("history.csv"), &result.history)?;
    write_magnetization_csv(&out_dir.join("final_mag.csv"), &final_mag)?;
    let report = DesignReport {
        final_loss: result.final_loss,
        initial_loss: result.initial_loss,
        nrmse: export_nrmse,
        design_nrmse: result.final_nrmse,
        peak_rf_gauss: exported.peak_rf(),
        peak_grad_gauss_per_cm: exported.peak_grad(),
        peak_slew_gauss_per_cm_per_s: peak_slew,
        n_samples: exported.n_samples(),
        ramp_samples,
        duration_s: exported.duration_s(),
        rf_scale: result.rf_scale,
        mode: config.optimizer.mode.clone(),
        outer_iters: options.outer_iters,
        runtime_s,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out_dir.join("report.json"), &(json + "\n"))?;

    println!(
        "{} design finished in {runtime_s:.1} s: loss {:.6} -> {:.6}, nrmse {:.4}",
        config.optimizer.mode, result.initial_loss, result.final_loss, export_nrmse
    );
    println!(
        "peak rf {:.4} G, peak gradient {:.4} G/cm, peak slew {:.0} G/cm/s, {} samples ({} ramp-down)",
        report.peak_rf_gauss,
        report.peak_grad_gauss_per_cm,
        report.peak_slew_gauss_per_cm_per_s,
        report.n_samples,
        ramp_samples
    );
    if result.rf_scale != 1.0 {
        println!("initial rf was rescaled by {:.6} to fit the amplitude limit", result.rf_scale);
    }
    println!(
        "wrote pulse.csv, history.csv, final_mag.csv, report.json to {}",
        out_dir.display()
    );
    Ok(0)
}

pub fn cmd_simulate(
    grid_path: &Path,
    pulse_path: &Path,
    m0_path: Option<&Path>,
    out_dir: &Path,
) -> Result<i32> {
    let grid = read_grid(grid_path)?;
    let pulse = read_pulse_csv(pulse_path)?;
    let m0 = match m0_path {
        Some(path) => read_magnetization_csv(path)?,
        None => Magnetization::equilibrium(grid.n_voxels()),
    };
    let consts = PhysicsConstants::default();
    let final_mag = simulate_final(&pulse, &grid, &m0, &consts)?;
    ensure_dir(out_dir)?;
    let out = out_dir.join("final_mag.csv");
    write_magnetization_csv(&out, &final_mag)?;
    println!(
        "simulated {} voxels through {} samples; wrote {}",
        grid.n_voxels(),
        pulse.n_samples(),
        out.display()
    );
    Ok(0)
}

pub fn cmd_gradcheck(
    config_path: &Path,
    samples: Option<usize>,
    h: f64,
    seed: Option<u64>,
) -> Result<i32> {
    let (config, base) = DesignConfig::load(config_path)?;
    let problem = config.problem(&base)?;
    let init = build_initial_pulse(
        &problem.init,
        &problem.grid,
        &problem.target,
        &problem.limits,
        &problem.consts,
    )?;
    let pulse = init.pulse;
    let m0 = starting_magnetization(&problem);

    let (final_mag, trajectory) = simulate(&pulse, &problem.grid, &m0, &problem.consts)?;
    let loss = evaluate_loss(&final_mag, &problem.target, &pulse, &problem.loss)?;
    let mut analytic = backprop(&trajectory, &loss.d_final, &problem.grid, &pulse, &problem.consts)?;
    for t in 0..analytic.n_samples() {
        analytic.d_rf[t] += loss.d_rf_reg[t];
    }
    let report = fd_check(
        |p| {
            let m = simulate_final(p, &problem.grid, &m0, &problem.consts)?;
            Ok(evaluate_loss(&m, &problem.target, p, &problem.loss)?.value)
        },
        &analytic,
        &pulse,
        h,
        samples,
        seed.unwrap_or(config.seed),
    )?;
    println!("{report}");
    if report.max_rel_err > GRADCHECK_TOLERANCE {
        println!("FAIL: max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}", report.max_rel_err);
        Ok(4)
    } else {
        println!("OK: within {GRADCHECK_TOLERANCE:e}");
        Ok(0)
    }
}

fn parse_perturbation(text: &str) -> Result<(i64, f64)> {
    let invalid = || {
        Error::Validation(format!(
            "perturbation {text:?} is not of the form <delay_samples>:<offres_scale>, e.g. -1:1 or 0:3"
        ))
    };
    let (delay, scale) = text.split_once(':').ok_or_else(invalid)?;
    let delay: i64 = delay.trim().parse().map_err(|_| invalid())?;
    let scale: f64 = scale.trim().parse().map_err(|_| invalid())?;
    if !scale.is_finite() {
        return Err(invalid());
    }
    Ok((delay, scale))
}

pub fn cmd_eval(
    config_path: &Path,
    pulse_path: &Path,
    perturbations: &[String],
    out_dir: &Path,
) -> Result<i32> {
    let (config, base) = DesignConfig::load(config_path)?;
    let problem = config.problem(&base)?;
    let pulse = read_pulse_csv(pulse_path)?;
    let m0 = starting_magnetization(&problem);
    let kind = problem.loss.kind;

    let cases: Vec<(i64, f64)> = if perturbations.is_empty() {
        vec![(0, 1.0), (-1, 1.0), (1, 1.0), (0, 3.0)]
    } else {
        perturbations
            .iter()
            .map(|p| parse_perturbation(p))
            .collect::<Result<_>>()?
    };
    let n = pulse.n_samples() as i64;
    if let Some((delay, _)) = cases.iter().find(|(delay, _)| delay.abs() >= n) {
        return Err(Error::Validation(format!(
            "gradient delay of {delay} samples exceeds the pulse length of {n}"
        )));
    }

    let baseline = {
        let mag = simulate_final(&pulse, &problem.grid, &m0, &problem.consts)?;
        nrmse(&mag, &problem.target, kind)?
    };
    println!("baseline nrmse {baseline:.6}");
    println!("{:>13} {:>12} {:>10} {:>12}", "delay_samples", "offres_scale", "nrmse", "delta_points");
    let mut csv = String::from("delay_samples,offres_scale,nrmse,delta_points\n");
    for &(delay, scale) in &cases {
        let shifted = shift_gradient(&pulse, delay);
        let mut grid = problem.grid.clone();
        for w in &mut grid.offres {
            *w *= scale;
        }
        let mag = simulate_final(&shifted, &grid, &m0, &problem.consts)?;
        let value = nrmse(&mag, &problem.target, kind)?;
        let delta = 100.0 * (value - baseline);
        println!("{delay:>13} {scale:>12} {value:>10.6} {delta:>+12.4}");
        csv.push_str(&format!("{delay},{scale},{value:.16e},{delta:.16e}\n"));
    }
    ensure_dir(out_dir)?;
    let out = out_dir.join("eval.csv");
    write_text(&out, &csv)?;
    println!("wrote {}", out.display());
    Ok(0)
}

pub fn cmd_init(config_path: &Path, out_override: Option<PathBuf>) -> Result<i32> {
    let (config, base) = DesignConfig::load(config_path)?;
    let out_dir = out_override
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let problem = config.problem(&base)?;
    let init = build_initial_pulse(
        &problem.init,
        &problem.grid,
        &problem.target,
        &problem.limits,
        &problem.consts,
    )?;
    ensure_dir(&out_dir)?;
    let out = out_dir.join("pulse.csv");
    write_pulse_csv(&out, &init.pulse)?;
    println!(
        "initial pulse: {} samples ({:.2} ms), peak rf {:.4} G, peak gradient {:.4} G/cm",
        init.pulse.n_samples(),
        1e3 * init.pulse.duration_s(),
        init.pulse.peak_rf(),
        init.pulse.peak_grad()
    );
    if init.rf_scale != 1.0 {
        println!("rf was rescaled by {:.6} to fit the amplitude limit", init.rf_scale);
    }
    println!("wrote {}", out.display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_down_ends_at_zero_within_the_slew_limit() {
        let limits = HardwareLimits {
            b_max: 0.25,
            g_max: 5.0,
            s_max: 12000.0,
        };
        let mut pulse = Pulse::zeros(4, 4e-6);
        pulse.grad[3] = [0.3, -0.2, 0.05];
        let (ramped, n) = append_ramp_down(&pulse, &limits);
        assert!(n > 0);
        assert_eq!(ramped.n_samples(), 4 + n);
        assert_eq!(*ramped.grad.last().unwrap(), [0.0, 0.0, 0.0]);
        let slew = SlewOperator { dt: pulse.dt }.apply(&ramped.grad);
        for s in &slew[4..] {
            for axis in 0..3 {
                assert!(s[axis].abs() < limits.s_max, "ramp slew {} too steep", s[axis]);
            }
        }
        for t in 4..ramped.n_samples() {
            assert_eq!(ramped.rf[t], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn zero_terminal_gradient_needs_no_ramp() {
        let limits = HardwareLimits {
            b_max: 0.25,
            g_max: 5.0,
            s_max: 12000.0,
        };
        let pulse = Pulse::zeros(4, 4e-6);
        let (ramped, n) = append_ramp_down(&pulse, &limits);
        assert_eq!(n, 0);
        assert_eq!(ramped, pulse);
    }

    #[test]
    fn gradient_shift_zero_pads_each_direction() {
        let mut pulse = Pulse::zeros(3, 4e-6);
        pulse.grad = vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let late = shift_gradient(&pulse, 1);
        assert_eq!(late.grad, vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let early = shift_gradient(&pulse, -1);
        assert_eq!(early.grad, vec![[2.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0; 3]]);
        let same = shift_gradient(&pulse, 0);
        assert_eq!(same.grad, pulse.grad);
    }

    #[test]
    fn perturbation_strings_parse_or_fail_clearly() {
        assert_eq!(parse_perturbation("-1:1").unwrap(), (-1, 1.0));
        assert_eq!(parse_perturbation("0:3.5").unwrap(), (0, 3.5));
        assert_eq!(parse_perturbation(" 2 : 0.5 ").unwrap(), (2, 0.5));
        assert!(parse_perturbation("1").is_err());
        assert!(parse_perturbation("a:b").is_err());
        assert!(parse_perturbation("0:inf").is_err());
    }
}
