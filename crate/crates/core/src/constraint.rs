//! Hardware limits by change of variables.
//!
//! RF magnitude and per-axis slew rate are reparameterized through a
//! smooth odd bijection from the real line onto (-1, 1), scaled by the
//! corresponding limit. Any real-valued design variables therefore decode
//! to waveforms that respect the RF and slew limits by construction, and
//! unconstrained optimizers can run directly on the variables. Gradients
//! are integrated from slew, so the slew limit is exact while the
//! gradient amplitude limit remains a separate check.

use num_complex::Complex64;

use crate::adjoint::PulseGradient;
use crate::error::{Error, Result};
use crate::model::{HardwareLimits, Pulse};
use crate::vec3::{self, Vec3};

/// Strictly increasing odd bijection from the real line onto (-1, 1).
pub trait Squash {
    fn value(&self, x: f64) -> f64;
    fn deriv(&self, x: f64) -> f64;
    /// Inverse of [`Squash::value`]; defined for `|y| < 1`.
    fn inverse(&self, y: f64) -> f64;
}

/// `y = (2/pi) atan(x)`: heavy tails keep gradients alive far from zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct AtanSquash;

impl Squash for AtanSquash {
    fn value(&self, x: f64) -> f64 {
        std::f64::consts::FRAC_2_PI * x.atan()
    }

    fn deriv(&self, x: f64) -> f64 {
        std::f64::consts::FRAC_2_PI / (1.0 + x * x)
    }

    fn inverse(&self, y: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * y).tan()
    }
}

/// `y = tanh(x)`: an alternative squash with exponentially tight tails.
#[derive(Debug, Clone, Copy, Default)]
pub struct TanhSquash;

impl Squash for TanhSquash {
    fn value(&self, x: f64) -> f64 {
        x.tanh()
    }

    fn deriv(&self, x: f64) -> f64 {
        let t = x.tanh();
        1.0 - t * t
    }

    fn inverse(&self, y: f64) -> f64 {
        y.atanh()
    }
}

/// Unconstrained design variables for one pulse.
///
/// `rf_mag[t]` squashes to the signed RF magnitude in units of the peak
/// limit (a negative value flips the phase by pi; the limit applies to
/// the absolute value), `rf_phase[t]` is the RF phase in radians, and
/// `slew[t]` squashes per axis to slew rate in units of the slew limit.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVariables {
    pub rf_mag: Vec<f64>,
    pub rf_phase: Vec<f64>,
    pub slew: Vec<Vec3>,
    /// Sample period in seconds, carried so decoding can integrate slew.
    pub dt: f64,
}

impl DesignVariables {
    pub fn zeros(n: usize, dt: f64) -> DesignVariables {
        DesignVariables {
            rf_mag: vec![0.0; n],
            rf_phase: vec![0.0; n],
            slew: vec![vec3::ZERO; n],
            dt,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.rf_mag.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rf_mag.len();
        if self.rf_phase.len() != n || self.slew.len() != n {
            return Err(Error::Dimension(format!(
                "variable channels disagree: {} magnitudes, {} phases, {} slew rows",
                n,
                self.rf_phase.len(),
                self.slew.len()
            )));
        }
        if n == 0 {
            return Err(Error::Validation("design variables have no samples".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!(
                "dt must be finite and positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    /// RF block in optimizer layout: all magnitudes, then all phases.
    pub fn pack_rf(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.n_samples());
        x.extend_from_slice(&self.rf_mag);
        x.extend_from_slice(&self.rf_phase);
        x
    }

    pub fn set_rf(&mut self, x: &[f64]) -> Result<()> {
        let n = self.n_samples();
        if x.len() != 2 * n {
            return Err(Error::Dimension(format!(
                "rf block needs {} entries, got {}",
                2 * n,
                x.len()
            )));
        }
        self.rf_mag.copy_from_slice(&x[..n]);
        self.rf_phase.copy_from_slice(&x[n..]);
        Ok(())
    }

    /// Slew block in optimizer layout: sample-major `[sx, sy, sz]` triples.
    pub fn pack_slew(&self) -> Vec<f64> {
        self.slew.iter().flatten().copied().collect()
    }

    pub fn set_slew(&mut self, x: &[f64]) -> Result<()> {
        let n = self.n_samples();
        if x.len() != 3 * n {
            return Err(Error::Dimension(format!(
                "slew block needs {} entries, got {}",
                3 * n,
                x.len()
            )));
        }
        for (t, row) in x.chunks_exact(3).enumerate() {
            self.slew[t] = [row[0], row[1], row[2]];
        }
        Ok(())
    }

    /// Full variable vector: RF block followed by slew block.
    pub fn pack_all(&self) -> Vec<f64> {
        let mut x = self.pack_rf();
        x.extend(self.pack_slew());
        x
    }

    pub fn set_all(&mut self, x: &[f64]) -> Result<()> {
        let n = self.n_samples();
        if x.len() != 5 * n {
            return Err(Error::Dimension(format!(
                "variable vector needs {} entries, got {}",
                5 * n,
                x.len()
            )));
        }
        self.set_rf(&x[..2 * n])?;
        self.set_slew(&x[2 * n..])
    }
}

/// Loss gradient with respect to the design variables, mirroring
/// [`DesignVariables`] in shape and packing order.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableGradient {
    pub d_rf_mag: Vec<f64>,
    pub d_rf_phase: Vec<f64>,
    pub d_slew: Vec<Vec3>,
}

impl VariableGradient {
    pub fn pack_rf(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.d_rf_mag.len());
        x.extend_from_slice(&self.d_rf_mag);
        x.extend_from_slice(&self.d_rf_phase);
        x
    }

    pub fn pack_slew(&self) -> Vec<f64> {
        self.d_slew.iter().flatten().copied().collect()
    }

    pub fn pack_all(&self) -> Vec<f64> {
        let mut x = self.pack_rf();
        x.extend(self.pack_slew());
        x
    }
}

/// Forward difference and cumulative sum between gradient and slew.
///
/// The convention is `s[t] = (g[t] - g[t-1]) / dt` with an implicit
/// `g[-1] = 0`, so integration starts from zero and a pulse whose final
/// gradient sample is nonzero encodes a trailing step the hardware must
/// absorb after the pulse.
#[derive(Debug, Clone, Copy)]
pub struct SlewOperator {
    pub dt: f64,
}

impl SlewOperator {
    /// Differentiates gradient into slew.
    pub fn apply(&self, grad: &[Vec3]) -> Vec<Vec3> {
        let mut prev = vec3::ZERO;
        grad.iter()
            .map(|&g| {
                let s = vec3::scale(vec3::sub(g, prev), 1.0 / self.dt);
                prev = g;
                s
            })
            .collect()
    }

    /// Integrates slew into gradient, the inverse of [`SlewOperator::apply`].
    pub fn integrate(&self, slew: &[Vec3]) -> Vec<Vec3> {
        let mut g = vec3::ZERO;
        slew.iter()
            .map(|&s| {
                g = vec3::axpy(self.dt, s, g);
                g
            })
            .collect()
    }

    /// Adjoint of [`SlewOperator::integrate`]: scaled suffix sums, used to
    /// pull gradient-waveform cotangents back onto slew.
    pub fn integrate_transpose(&self, d_grad: &[Vec3]) -> Vec<Vec3> {
        let mut acc = vec3::ZERO;
        let mut out = vec![vec3::ZERO; d_grad.len()];
        for (slot, &d) in out.iter_mut().zip(d_grad).rev() {
            acc = vec3::add(acc, d);
            *slot = vec3::scale(acc, self.dt);
        }
        out
    }
}

/// A decoded waveform together with the slew trajectory it was built
/// from, before any finite-precision re-differencing.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPulse {
    pub pulse: Pulse,
    pub slew: Vec<Vec3>,
}

/// Maps a strictly feasible pulse into design variables using the atan
/// squash. Fails with the offending sample index if any RF magnitude or
/// slew value reaches or exceeds its limit.
pub fn encode(pulse: &Pulse, limits: &HardwareLimits) -> Result<DesignVariables> {
    encode_with(pulse, limits, &AtanSquash)
}

pub fn encode_with(
    pulse: &Pulse,
    limits: &HardwareLimits,
    squash: &impl Squash,
) -> Result<DesignVariables> {
    pulse.validate()?;
    limits.validate()?;
    let n = pulse.n_samples();
    let mut vars = DesignVariables::zeros(n, pulse.dt);
    for t in 0..n {
        let amp = pulse.rf[t].norm();
        if amp >= limits.b_max {
            return Err(Error::Infeasible(format!(
                "rf sample {t} magnitude {amp} reaches the limit {}",
                limits.b_max
            )));
        }
        vars.rf_mag[t] = squash.inverse(amp / limits.b_max);
        vars.rf_phase[t] = if amp > 0.0 { pulse.rf[t].arg() } else { 0.0 };
    }
    let slew = SlewOperator { dt: pulse.dt }.apply(&pulse.grad);
    for (t, s) in slew.iter().enumerate() {
        for axis in 0..3 {
            if s[axis].abs() >= limits.s_max {
                return Err(Error::Infeasible(format!(
                    "slew sample {t} axis {} rate {} reaches the limit {}",
                    ["x", "y", "z"][axis],
                    s[axis],
                    limits.s_max
                )));
            }
            vars.slew[t][axis] = squash.inverse(s[axis] / limits.s_max);
        }
    }
    Ok(vars)
}

/// Decodes design variables into a pulse using the atan squash. The
/// result satisfies the RF and slew limits for any finite variables.
pub fn decode(vars: &DesignVariables, limits: &HardwareLimits) -> Result<Pulse> {
    Ok(decode_full_with(vars, limits, &AtanSquash)?.pulse)
}

/// Like [`decode`] but also returns the slew trajectory the gradient was
/// integrated from, which is the quantity the slew limit bounds.
pub fn decode_full(vars: &DesignVariables, limits: &HardwareLimits) -> Result<DecodedPulse> {
    decode_full_with(vars, limits, &AtanSquash)
}

pub fn decode_full_with(
    vars: &DesignVariables,
    limits: &HardwareLimits,
    squash: &impl Squash,
) -> Result<DecodedPulse> {
    vars.validate()?;
    limits.validate()?;
    let n = vars.n_samples();
    let mut rf = Vec::with_capacity(n);
    for t in 0..n {
        let amp = limits.b_max * squash.value(vars.rf_mag[t]);
        let (sin, cos) = vars.rf_phase[t].sin_cos();
        rf.push(Complex64::new(amp * cos, amp * sin));
    }
    let slew: Vec<Vec3> = vars
        .slew
        .iter()
        .map(|row| {
            [
                limits.s_max * squash.value(row[0]),
                limits.s_max * squash.value(row[1]),
                limits.s_max * squash.value(row[2]),
            ]
        })
        .collect();
    let grad = SlewOperator { dt: vars.dt }.integrate(&slew);
    Ok(DecodedPulse {
        pulse: Pulse {
            rf,
            grad,
            dt: vars.dt,
        },
        slew,
    })
}

/// Pulls a waveform gradient back through the decoding map onto the
/// design variables.
pub fn chain_to_vars(
    gradient: &PulseGradient,
    vars: &DesignVariables,
    limits: &HardwareLimits,
) -> Result<VariableGradient> {
    chain_to_vars_with(gradient, vars, limits, &AtanSquash)
}

pub fn chain_to_vars_with(
    gradient: &PulseGradient,
    vars: &DesignVariables,
    limits: &HardwareLimits,
    squash: &impl Squash,
) -> Result<VariableGradient> {
    vars.validate()?;
    limits.validate()?;
    let n = vars.n_samples();
    if gradient.n_samples() != n {
        return Err(Error::Dimension(format!(
            "waveform gradient has {} samples but variables have {n}",
            gradient.n_samples()
        )));
    }
    let mut out = VariableGradient {
        d_rf_mag: vec![0.0; n],
        d_rf_phase: vec![0.0; n],
        d_slew: vec![vec3::ZERO; n],
    };
    for t in 0..n {
        let (sin, cos) = vars.rf_phase[t].sin_cos();
        let d_re = gradient.d_rf[t].re;
        let d_im = gradient.d_rf[t].im;
        let d_amp = d_re * cos + d_im * sin;
        let amp = limits.b_max * squash.value(vars.rf_mag[t]);
        out.d_rf_mag[t] = d_amp * limits.b_max * squash.deriv(vars.rf_mag[t]);
        out.d_rf_phase[t] = amp * (d_im * cos - d_re * sin);
    }
    let d_slew_raw = SlewOperator { dt: vars.dt }.integrate_transpose(&gradient.d_grad);
    for t in 0..n {
        for axis in 0..3 {
            out.d_slew[t][axis] =
                d_slew_raw[t][axis] * limits.s_max * squash.deriv(vars.slew[t][axis]);
        }
    }
    Ok(out)
}

/// Result of checking a pulse's gradient amplitude against the limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmaxReport {
    /// Largest absolute gradient per axis over the pulse, in G/cm.
    pub peak_per_axis: Vec3,
    pub g_max: f64,
    /// Sample and axis of the overall peak, if the pulse is nonempty.
    pub peak_at: Option<(usize, usize)>,
    pub exceeded: bool,
}

impl std::fmt::Display for GmaxReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let peak = self.peak_per_axis.iter().fold(0.0f64, |a, &b| a.max(b));
        write!(
            f,
            "peak gradient {:.6} G/cm against limit {:.6} G/cm ({})",
            peak,
            self.g_max,
            if self.exceeded { "exceeded" } else { "ok" }
        )
    }
}

/// Checks the gradient amplitude limit, which the change of variables
/// does not enforce by construction.
pub fn check_gmax(pulse: &Pulse, limits: &HardwareLimits) -> GmaxReport {
    let mut peak_per_axis = vec3::ZERO;
    let mut peak_at = None;
    let mut peak = 0.0;
    for (t, g) in pulse.grad.iter().enumerate() {
        for axis in 0..3 {
            let a = g[axis].abs();
            if a > peak_per_axis[axis] {
                peak_per_axis[axis] = a;
            }
            if a > peak || peak_at.is_none() {
                peak = a;
                peak_at = Some((t, axis));
            }
        }
    }
    GmaxReport {
        peak_per_axis,
        g_max: limits.g_max,
        peak_at,
        exceeded: peak > limits.g_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn limits() -> HardwareLimits {
        HardwareLimits {
            b_max: 0.25,
            g_max: 5.0,
            s_max: 12000.0,
        }
    }

    #[test]
    fn atan_squash_slope_at_zero() {
        let s = AtanSquash;
        assert!((s.deriv(0.0) - std::f64::consts::FRAC_2_PI).abs() < 1e-15);
        assert_eq!(s.value(0.0), 0.0);
        assert_eq!(s.inverse(0.0), 0.0);
    }

    #[test]
    fn encode_zero_pulse_gives_zero_variables() {
        let pulse = Pulse::zeros(6, 4e-6);
        let vars = encode(&pulse, &limits()).unwrap();
        assert_eq!(vars, DesignVariables::zeros(6, 4e-6));
    }

    #[test]
    fn encode_half_amplitude_hits_unit_variable() {
        let mut pulse = Pulse::zeros(1, 4e-6);
        pulse.rf[0] = Complex64::new(0.125, 0.0);
        let vars = encode(&pulse, &limits()).unwrap();
        assert!((vars.rf_mag[0] - 1.0).abs() < 1e-12, "tan(pi/4) = 1");
    }

    #[test]
    fn encode_ninety_percent_slew_matches_tangent() {
        let l = limits();
        let dt = 4e-6;
        let mut pulse = Pulse::zeros(2, dt);
        pulse.grad[0] = [0.9 * l.s_max * dt, 0.0, 0.0];
        pulse.grad[1] = pulse.grad[0];
        let vars = encode(&pulse, &l).unwrap();
        let want = (0.45 * std::f64::consts::PI).tan();
        assert!((want - 6.3137515).abs() < 1e-6);
        assert!((vars.slew[0][0] - want).abs() / want < 1e-12);
        assert!(vars.slew[1][0].abs() < 1e-9, "second sample holds the plateau");
    }

    #[test]
    fn encode_rejects_rf_at_the_limit() {
        let l = limits();
        let mut pulse = Pulse::zeros(3, 4e-6);
        pulse.rf[2] = Complex64::new(0.0, l.b_max);
        let err = encode(&pulse, &l).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        assert!(err.to_string().contains("rf sample 2"));
    }

    #[test]
    fn encode_rejects_excess_slew() {
        let l = limits();
        let dt = 4e-6;
        let mut pulse = Pulse::zeros(2, dt);
        pulse.grad[0] = [0.0, 1.01 * l.s_max * dt, 0.0];
        let err = encode(&pulse, &l).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        assert!(err.to_string().contains("slew sample 0 axis y"));
    }

    #[test]
    fn extreme_variables_approach_but_respect_limits() {
        let l = HardwareLimits {
            b_max: 1.0,
            g_max: 5.0,
            s_max: 1.0,
        };
        let mut vars = DesignVariables::zeros(1, 4e-6);
        vars.rf_mag[0] = 1e12;
        vars.slew[0] = [1e12, -1e12, 0.0];
        let decoded = decode_full(&vars, &l).unwrap();
        let amp = decoded.pulse.rf[0].norm();
        assert!(amp < l.b_max);
        assert!((amp - l.b_max).abs() < 1e-9);
        assert!(decoded.slew[0][0] < l.s_max);
        assert!((decoded.slew[0][0] - l.s_max).abs() < 1e-9);
        assert!((decoded.slew[0][1] + l.s_max).abs() < 1e-9);

        // At realistic slew scale only the relative gap is meaningful.
        let lr = limits();
        let decoded = decode_full(&vars, &lr).unwrap();
        assert!(decoded.slew[0][0] < lr.s_max);
        assert!((decoded.slew[0][0] - lr.s_max).abs() / lr.s_max < 1e-9);
    }

    #[test]
    fn decode_integrates_slew_into_gradient() {
        let l = limits();
        let dt = 4e-6;
        let mut vars = DesignVariables::zeros(3, dt);
        let s_half = AtanSquash.inverse(0.5);
        vars.slew[0][2] = s_half;
        vars.slew[1][2] = s_half;
        vars.slew[2][2] = -s_half;
        let decoded = decode_full(&vars, &l).unwrap();
        let step = 0.5 * l.s_max * dt;
        assert!((decoded.pulse.grad[0][2] - step).abs() < 1e-12);
        assert!((decoded.pulse.grad[1][2] - 2.0 * step).abs() < 1e-12);
        assert!((decoded.pulse.grad[2][2] - step).abs() < 1e-12);
    }

    #[test]
    fn integrate_transpose_is_the_adjoint() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let op = SlewOperator { dt: 4e-6 };
        for _ in 0..10 {
            let n = rng.gen_range(1..20);
            let s: Vec<Vec3> = (0..n)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect();
            let y: Vec<Vec3> = (0..n)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect();
            let lhs: f64 = op
                .integrate(&s)
                .iter()
                .zip(&y)
                .map(|(a, b)| vec3::dot(*a, *b))
                .sum();
            let rhs: f64 = s
                .iter()
                .zip(op.integrate_transpose(&y))
                .map(|(a, b)| vec3::dot(*a, b))
                .sum();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn redifferencing_decoded_gradient_stays_within_rounding() {
        use rand::{Rng, SeedableRng};
        let l = limits();
        let dt = 4e-6;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut vars = DesignVariables::zeros(200, dt);
        for row in vars.slew.iter_mut() {
            *row = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
        }
        let decoded = decode_full(&vars, &l).unwrap();
        let recon = SlewOperator { dt }.apply(&decoded.pulse.grad);
        let g_peak = decoded.pulse.peak_grad();
        // Differencing the running sum reintroduces cancellation noise of
        // order eps * |g| / dt, which is the attainable bound here.
        let bound = 4.0 * f64::EPSILON * g_peak / dt;
        for (a, b) in recon.iter().zip(&decoded.slew) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= bound);
            }
        }
    }

    #[test]
    fn chain_matches_finite_differences_through_decode() {
        use rand::{Rng, SeedableRng};
        let l = limits();
        let dt = 4e-6;
        let n = 6;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut vars = DesignVariables::zeros(n, dt);
        for t in 0..n {
            vars.rf_mag[t] = rng.gen_range(-1.5..1.5);
            vars.rf_phase[t] = rng.gen_range(-3.0..3.0);
            vars.slew[t] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
        }
        // Synthetic smooth objective on the waveform with a known
        // waveform gradient; scale gradient terms so both channels matter.
        let loss_of = |p: &Pulse| -> f64 {
            let mut s = 0.0;
            for t in 0..p.rf.len() {
                let k = 1.0 + t as f64;
                s += k * p.rf[t].norm_sqr();
                s += 1e4 * k * vec3::dot(p.grad[t], p.grad[t]);
            }
            s
        };
        let decoded = decode_full(&vars, &l).unwrap();
        let pg = PulseGradient {
            d_rf: decoded
                .pulse
                .rf
                .iter()
                .enumerate()
                .map(|(t, b)| 2.0 * (1.0 + t as f64) * b)
                .collect(),
            d_grad: decoded
                .pulse
                .grad
                .iter()
                .enumerate()
                .map(|(t, g)| vec3::scale(*g, 2e4 * (1.0 + t as f64)))
                .collect(),
        };
        let analytic = chain_to_vars(&pg, &vars, &l).unwrap();
        let packed = analytic.pack_all();
        let x0 = vars.pack_all();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let mut vp = vars.clone();
            vp.set_all(&xp).unwrap();
            let mut vm = vars.clone();
            vm.set_all(&xm).unwrap();
            let fp = loss_of(&decode(&vp, &l).unwrap());
            let fm = loss_of(&decode(&vm, &l).unwrap());
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(packed[i].abs()).max(1e-3);
            assert!(
                (fd - packed[i]).abs() / denom < 1e-5,
                "component {i}: analytic {} fd {fd}",
                packed[i]
            );
        }
    }

    #[test]
    fn chain_slope_at_zero_magnitude() {
        let l = limits();
        let vars = DesignVariables::zeros(1, 4e-6);
        let pg = PulseGradient {
            d_rf: vec![Complex64::new(1.0, 0.0)],
            d_grad: vec![vec3::ZERO],
        };
        let g = chain_to_vars(&pg, &vars, &l).unwrap();
        let want = l.b_max * std::f64::consts::FRAC_2_PI;
        assert!((g.d_rf_mag[0] - want).abs() < 1e-15);
        assert_eq!(g.d_rf_phase[0], 0.0);
    }

    #[test]
    fn gmax_check_reports_the_peak() {
        let l = limits();
        let mut pulse = Pulse::zeros(4, 4e-6);
        pulse.grad[1] = [0.0, -5.1, 0.0];
        pulse.grad[3] = [4.0, 0.0, 0.0];
        let report = check_gmax(&pulse, &l);
        assert!(report.exceeded);
        assert_eq!(report.peak_at, Some((1, 1)));
        assert_eq!(report.peak_per_axis[1], 5.1);
        let ok = check_gmax(&Pulse::zeros(2, 4e-6), &l);
        assert!(!ok.exceeded);
    }

    #[test]
    fn packing_round_trips() {
        let mut vars = DesignVariables::zeros(3, 4e-6);
        vars.rf_mag = vec![1.0, 2.0, 3.0];
        vars.rf_phase = vec![-0.5, 0.25, 0.75];
        vars.slew = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let mut copy = DesignVariables::zeros(3, 4e-6);
        copy.set_all(&vars.pack_all()).unwrap();
        assert_eq!(copy, vars);
        assert!(copy.set_all(&[0.0; 7]).is_err());
    }

    proptest! {
        // The two squashes get different ranges: tanh saturates to 1.0 in
        // f64 beyond |x| of about 19, while atan stays strictly inside
        // (-1, 1) even for astronomically large inputs.
        #[test]
        fn atan_squash_is_bounded_monotone_and_invertible(
            x in -50.0f64..50.0,
            dx in 1e-6f64..1.0,
        ) {
            let s = AtanSquash;
            let y = s.value(x);
            prop_assert!(y > -1.0 && y < 1.0);
            prop_assert!(s.value(x + dx) > y);
            prop_assert!((s.value(-x) + y).abs() < 1e-15);
            prop_assert!((s.inverse(y) - x).abs() < 1e-8 * x.abs().max(1.0));
            let fd = (s.value(x + 1e-6) - s.value(x - 1e-6)) / 2e-6;
            prop_assert!((s.deriv(x) - fd).abs() < 1e-6);
        }

        #[test]
        fn tanh_squash_is_bounded_monotone_and_invertible(
            x in -3.0f64..3.0,
            dx in 1e-6f64..1.0,
        ) {
            let s = TanhSquash;
            let y = s.value(x);
            prop_assert!(y > -1.0 && y < 1.0);
            prop_assert!(s.value(x + dx) > y);
            prop_assert!((s.value(-x) + y).abs() < 1e-15);
            prop_assert!((s.inverse(y) - x).abs() < 1e-8 * x.abs().max(1.0));
            let fd = (s.value(x + 1e-6) - s.value(x - 1e-6)) / 2e-6;
            prop_assert!((s.deriv(x) - fd).abs() < 1e-6);
        }

        #[test]
        fn any_variables_decode_to_feasible_waveforms(
            seed in 0u64..500,
            n in 1usize..40,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let l = limits();
            let mut vars = DesignVariables::zeros(n, 4e-6);
            for t in 0..n {
                vars.rf_mag[t] = rng.gen_range(-1e6..1e6);
                vars.rf_phase[t] = rng.gen_range(-10.0..10.0);
                vars.slew[t] = [
                    rng.gen_range(-1e6..1e6),
                    rng.gen_range(-1e6..1e6),
                    rng.gen_range(-1e6..1e6),
                ];
            }
            let decoded = decode_full(&vars, &l).unwrap();
            for t in 0..n {
                prop_assert!(decoded.pulse.rf[t].norm() < l.b_max * (1.0 + 1e-15));
                for axis in 0..3 {
                    prop_assert!(decoded.slew[t][axis].abs() < l.s_max * (1.0 + 1e-15));
                }
            }
        }

        #[test]
        fn encode_then_decode_round_trips(
            seed in 0u64..500,
            n in 1usize..30,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let l = limits();
            let dt = 4e-6;
            let mut pulse = Pulse::zeros(n, dt);
            let op = SlewOperator { dt };
            let slew: Vec<Vec3> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-0.95..0.95) * l.s_max,
                        rng.gen_range(-0.95..0.95) * l.s_max,
                        rng.gen_range(-0.95..0.95) * l.s_max,
                    ]
                })
                .collect();
            pulse.grad = op.integrate(&slew);
            for t in 0..n {
                let amp = rng.gen_range(0.0..0.95) * l.b_max;
                let phase = rng.gen_range(-3.1..3.1);
                pulse.rf[t] = Complex64::from_polar(amp, phase);
            }
            let vars = encode(&pulse, &l).unwrap();
            let back = decode(&vars, &l).unwrap();
            for t in 0..n {
                prop_assert!((back.rf[t] - pulse.rf[t]).norm() < 1e-9);
                for axis in 0..3 {
                    prop_assert!((back.grad[t][axis] - pulse.grad[t][axis]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn decode_then_encode_recovers_variables(
            seed in 0u64..500,
            n in 1usize..20,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let l = limits();
            let mut vars = DesignVariables::zeros(n, 4e-6);
            for t in 0..n {
                vars.rf_mag[t] = rng.gen_range(0.01..3.0);
                vars.rf_phase[t] = rng.gen_range(-3.1..3.1);
                vars.slew[t] = [
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ];
            }
            let pulse = decode(&vars, &l).unwrap();
            let back = encode(&pulse, &l).unwrap();
            for t in 0..n {
                prop_assert!((back.rf_mag[t] - vars.rf_mag[t]).abs() < 1e-9 * vars.rf_mag[t].max(1.0));
                prop_assert!((back.rf_phase[t] - vars.rf_phase[t]).abs() < 1e-9);
                for axis in 0..3 {
                    let got = back.slew[t][axis];
                    let want = vars.slew[t][axis];
                    prop_assert!((got - want).abs() < 1e-6 * want.abs().max(1.0));
                }
            }
        }
    }
}
