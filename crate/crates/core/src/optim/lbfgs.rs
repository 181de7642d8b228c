//! Limited-memory BFGS with a strong Wolfe line search.
//!
//! The objective is a closure that returns the loss and its gradient at a
//! point. Every accepted iterate satisfies both Wolfe conditions, so the
//! accepted loss sequence is strictly decreasing. When no acceptable step
//! exists within the evaluation budget the optimizer first drops its
//! curvature memory and retries with steepest descent; if that also
//! fails it stops at the last accepted iterate rather than moving to an
//! unvetted point.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Tuning knobs for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Maximum accepted iterations.
    pub max_iters: usize,
    /// Stop when the gradient sup-norm falls to or below this.
    pub grad_tol: f64,
    /// Sufficient-decrease constant, `0 < c1 < c2 < 1`.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub ls_max_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 20,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            ls_max_evals: 25,
        }
    }
}

impl LbfgsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Validation("memory must be at least 1".into()));
        }
        if !(self.grad_tol.is_finite() && self.grad_tol >= 0.0) {
            return Err(Error::Validation(format!(
                "grad_tol must be finite and nonnegative, got {}",
                self.grad_tol
            )));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Validation(format!(
                "need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if self.ls_max_evals < 2 {
            return Err(Error::Validation(
                "ls_max_evals must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Why the optimizer returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient sup-norm reached `grad_tol`.
    GradientTolerance,
    /// Iteration budget exhausted.
    MaxIterations,
    /// No step satisfying the Wolfe conditions was found, even after a
    /// steepest-descent restart. The returned point is the last accepted
    /// iterate.
    LineSearchStalled,
}

/// Final iterate and bookkeeping from a [`minimize`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub loss: f64,
    /// Gradient sup-norm at the final iterate.
    pub grad_norm: f64,
    /// Accepted iterations performed.
    pub iterations: usize,
    /// Total objective evaluations, the initial one included.
    pub n_evals: usize,
    /// Loss at the start followed by the loss of each accepted iterate.
    pub accepted_losses: Vec<f64>,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

fn check_finite(f: f64, g: &[f64], n: usize) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::Numerical(format!(
            "objective returned a non-finite loss: {f}"
        )));
    }
    if g.len() != n {
        return Err(Error::Dimension(format!(
            "objective returned a gradient of length {} for {} variables",
            g.len(),
            n
        )));
    }
    if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "objective returned a non-finite gradient entry: {bad}"
        )));
    }
    Ok(())
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: applies the inverse Hessian estimate to `g` and
/// negates, giving the search direction.
fn direction(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (pair, &alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (alpha - beta) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

#[derive(Clone)]
struct LinePoint {
    t: f64,
    f: f64,
    /// Directional derivative along the search direction.
    df: f64,
    g: Vec<f64>,
    x: Vec<f64>,
}

/// Minimizer of the cubic through two points with known slopes. Returns
/// NaN when the cubic has no interior minimizer, which the caller treats
/// as a bisection fallback.
fn cubic_minimizer(ta: f64, fa: f64, da: f64, tb: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (ta - tb);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return f64::NAN;
    }
    let sign = if tb >= ta { 1.0 } else { -1.0 };
    let d2 = sign * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return f64::NAN;
    }
    tb - (tb - ta) * (db + d2 - d1) / denom
}

struct LineSearch<'a, F> {
    obj: &'a mut F,
    x0: &'a [f64],
    d: &'a [f64],
    f0: f64,
    df0: f64,
    c1: f64,
    c2: f64,
    evals_left: usize,
    total_evals: &'a mut usize,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn probe(&mut self, t: f64) -> Result<Option<LinePoint>> {
        if self.evals_left == 0 {
            return Ok(None);
        }
        self.evals_left -= 1;
        *self.total_evals += 1;
        let x: Vec<f64> = self
            .x0
            .iter()
            .zip(self.d)
            .map(|(xi, di)| xi + t * di)
            .collect();
        let (f, g) = (self.obj)(&x)?;
        check_finite(f, &g, self.x0.len())?;
        let df = dot(&g, self.d);
        Ok(Some(LinePoint { t, f, df, g, x }))
    }

    fn armijo(&self, p: &LinePoint) -> bool {
        p.f <= self.f0 + self.c1 * p.t * self.df0
    }

    fn curvature(&self, p: &LinePoint) -> bool {
        p.df.abs() <= -self.c2 * self.df0
    }

    /// Bracketing phase: doubles the step until the minimum is bracketed
    /// or a point satisfies both Wolfe conditions.
    fn run(&mut self) -> Result<Option<LinePoint>> {
        if !(self.df0 < 0.0) {
            return Ok(None);
        }
        let mut prev = LinePoint {
            t: 0.0,
            f: self.f0,
            df: self.df0,
            g: Vec::new(),
            x: Vec::new(),
        };
        let mut t = 1.0;
        loop {
            let Some(cur) = self.probe(t)? else {
                return Ok(None);
            };
            if !self.armijo(&cur) || (prev.t > 0.0 && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.df >= 0.0 {
                return self.zoom(cur, prev);
            }
            t *= 2.0;
            if t > 1e10 {
                return Ok(None);
            }
            prev = cur;
        }
    }

    /// Shrinks a bracket `[lo, hi]` that is known to contain a Wolfe
    /// point: `lo` satisfies the sufficient-decrease condition and the
    /// function increases toward `hi`.
    fn zoom(&mut self, mut lo: LinePoint, mut hi: LinePoint) -> Result<Option<LinePoint>> {
        loop {
            let width = (hi.t - lo.t).abs();
            if width <= 1e-16 * lo.t.abs().max(hi.t.abs()).max(1.0) {
                return Ok(None);
            }
            let mut t = cubic_minimizer(lo.t, lo.f, lo.df, hi.t, hi.f, hi.df);
            let (t_min, t_max) = (lo.t.min(hi.t), lo.t.max(hi.t));
            let margin = 0.1 * width;
            if !t.is_finite() || t < t_min + margin || t > t_max - margin {
                t = 0.5 * (lo.t + hi.t);
            }
            let Some(cur) = self.probe(t)? else {
                return Ok(None);
            };
            if !self.armijo(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature(&cur) {
                    return Ok(Some(cur));
                }
                if cur.df * (hi.t - lo.t) >= 0.0 {
                    hi = lo.clone();
                }
                lo = cur;
            }
        }
    }
}

/// Minimizes the objective starting from `x0`.
///
/// The objective receives a point and returns its loss and gradient.
/// Non-finite losses or gradients are reported as numerical errors, and
/// any error from the objective aborts the run unchanged.
pub fn minimize<F>(mut obj: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    opts.validate()?;
    if x0.is_empty() {
        return Err(Error::Validation("cannot minimize over zero variables".into()));
    }
    if let Some(bad) = x0.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "starting point has a non-finite entry: {bad}"
        )));
    }
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = obj(&x)?;
    check_finite(f, &g, n)?;
    let mut n_evals = 1usize;
    let mut accepted_losses = vec![f];
    let mut history: VecDeque<Pair> = VecDeque::new();
    let mut iterations = 0usize;
    let mut stop = StopReason::MaxIterations;

    if inf_norm(&g) <= opts.grad_tol {
        return Ok(LbfgsResult {
            grad_norm: inf_norm(&g),
            x,
            loss: f,
            iterations,
            n_evals,
            accepted_losses,
            stop: StopReason::GradientTolerance,
        });
    }

    for _ in 0..opts.max_iters {
        let mut d = direction(&g, &history);
        let mut df0 = dot(&d, &g);
        if !(df0 < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            df0 = dot(&d, &g);
        }
        let mut found = LineSearch {
            obj: &mut obj,
            x0: &x,
            d: &d,
            f0: f,
            df0,
            c1: opts.c1,
            c2: opts.c2,
            evals_left: opts.ls_max_evals,
            total_evals: &mut n_evals,
        }
        .run()?;
        if found.is_none() && !history.is_empty() {
            history.clear();
            let d = g.iter().map(|v| -v).collect::<Vec<_>>();
            let df0 = dot(&d, &g);
            found = LineSearch {
                obj: &mut obj,
                x0: &x,
                d: &d,
                f0: f,
                df0,
                c1: opts.c1,
                c2: opts.c2,
                evals_left: opts.ls_max_evals,
                total_evals: &mut n_evals,
            }
            .run()?;
        }
        let Some(pt) = found else {
            stop = StopReason::LineSearchStalled;
            break;
        };

        let s: Vec<f64> = pt.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = pt.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            history.push_back(Pair { rho: 1.0 / sy, s, y });
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        x = pt.x;
        f = pt.f;
        g = pt.g;
        accepted_losses.push(f);
        iterations += 1;
        if inf_norm(&g) <= opts.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
    }

    Ok(LbfgsResult {
        grad_norm: inf_norm(&g),
        x,
        loss: f,
        iterations,
        n_evals,
        accepted_losses,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_1d(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((x[0] * x[0], vec![2.0 * x[0]]))
    }

    #[test]
    fn one_dimensional_quadratic_lands_exactly() {
        let res = minimize(quadratic_1d, vec![1.0], &LbfgsOptions::default()).unwrap();
        assert_eq!(res.x[0], 0.0);
        assert_eq!(res.loss, 0.0);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.n_evals, 3);
        assert_eq!(res.stop, StopReason::GradientTolerance);
        assert_eq!(res.accepted_losses, vec![1.0, 0.0]);
    }

    #[test]
    fn anisotropic_quadratic_converges_fast() {
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((
                x[0] * x[0] + 10.0 * x[1] * x[1],
                vec![2.0 * x[0], 20.0 * x[1]],
            ))
        };
        let opts = LbfgsOptions {
            max_iters: 50,
            grad_tol: 1e-10,
            ..Default::default()
        };
        let res = minimize(obj, vec![1.0, 1.0], &opts).unwrap();
        assert_eq!(res.stop, StopReason::GradientTolerance);
        assert!(res.iterations <= 10, "took {} iterations", res.iterations);
        assert!(res.x[0].abs() < 1e-8 && res.x[1].abs() < 1e-8);
        assert_eq!(res.accepted_losses.len(), res.iterations + 1);
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((f, g))
    }

    #[test]
    fn rosenbrock_reaches_the_minimum() {
        let opts = LbfgsOptions {
            max_iters: 200,
            grad_tol: 1e-10,
            ..Default::default()
        };
        let res = minimize(rosenbrock, vec![-1.2, 1.0], &opts).unwrap();
        assert_eq!(res.stop, StopReason::GradientTolerance);
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
        for pair in res.accepted_losses.windows(2) {
            assert!(pair[1] < pair[0], "accepted losses must strictly decrease");
        }
    }

    #[test]
    fn converged_start_returns_immediately() {
        let res = minimize(quadratic_1d, vec![0.0], &LbfgsOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.n_evals, 1);
        assert_eq!(res.stop, StopReason::GradientTolerance);
        assert_eq!(res.accepted_losses, vec![0.0]);
    }

    #[test]
    fn zero_iteration_budget_keeps_the_start() {
        let opts = LbfgsOptions {
            max_iters: 0,
            ..Default::default()
        };
        let res = minimize(quadratic_1d, vec![1.0], &opts).unwrap();
        assert_eq!(res.x, vec![1.0]);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.stop, StopReason::MaxIterations);
    }

    #[test]
    fn linear_objective_stalls_in_place() {
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((x.iter().sum(), vec![1.0; x.len()]))
        };
        let res = minimize(obj, vec![0.0, 0.0], &LbfgsOptions::default()).unwrap();
        assert_eq!(res.stop, StopReason::LineSearchStalled);
        assert_eq!(res.x, vec![0.0, 0.0]);
        assert_eq!(res.loss, 0.0);
        assert_eq!(res.accepted_losses, vec![0.0]);
    }

    #[test]
    fn invalid_options_are_rejected() {
        let bad = [
            LbfgsOptions {
                memory: 0,
                ..Default::default()
            },
            LbfgsOptions {
                c1: 0.95,
                ..Default::default()
            },
            LbfgsOptions {
                c2: 1.0,
                ..Default::default()
            },
            LbfgsOptions {
                ls_max_evals: 1,
                ..Default::default()
            },
            LbfgsOptions {
                grad_tol: f64::NAN,
                ..Default::default()
            },
        ];
        for opts in bad {
            let err = minimize(quadratic_1d, vec![1.0], &opts).unwrap_err();
            assert!(matches!(err, Error::Validation(_)), "got {err:?}");
        }
    }

    #[test]
    fn objective_errors_propagate() {
        let mut calls = 0;
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            calls += 1;
            if calls >= 2 {
                return Err(Error::Validation("boom".into()));
            }
            quadratic_1d(x)
        };
        let err = minimize(obj, vec![1.0], &LbfgsOptions::default()).unwrap_err();
        assert!(err.to_string().contains("boom"));
    }

    #[test]
    fn non_finite_loss_is_a_numerical_error() {
        let obj = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![1.0])) };
        let err = minimize(obj, vec![1.0], &LbfgsOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
    }

    #[test]
    fn empty_start_is_rejected() {
        let err = minimize(quadratic_1d, vec![], &LbfgsOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
