//! Unconstrained L-BFGS with a strong-Wolfe line search, plus a central
//! finite-difference gradient checker.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::csvio::{fmt_f64, write_row};
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, norm2, norm_inf, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory_pairs: usize,
    pub max_iterations: usize,
    /// Stop once `‖∇f‖∞` falls to this value.
    pub grad_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory_pairs: 10,
            max_iterations: 500,
            grad_tolerance: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_steps: 50,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "line search needs 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if self.memory_pairs == 0 || self.max_line_search_steps == 0 {
            return Err(Error::InvalidParameter("memory and line-search budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTol,
    MaxIter,
    LineSearchFailure,
}

/// Line-search data of an accepted step, enough to re-check the strong Wolfe conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeRecord {
    pub f0: f64,
    pub slope0: f64,
    pub f_new: f64,
    pub slope_new: f64,
}

impl WolfeRecord {
    pub fn satisfies(&self, step: f64, c1: f64, c2: f64) -> bool {
        let curvature = self.slope_new.abs() <= -c2 * self.slope0;
        let armijo = self.f_new <= self.f0 + c1 * step * self.slope0
            || approximate_armijo(self.f0, self.f_new, self.slope0, self.slope_new, c1);
        armijo && curvature
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub objective: f64,
    pub grad_norm: f64,
    /// Step length along the search direction; 0 for the initial point.
    pub step_len: f64,
    pub wolfe: Option<WolfeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    /// Entry 0 is the starting point; entry `k` follows the `k`-th accepted step.
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub evaluations: usize,
}

impl OptimizationTrace {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write_row(w, &["iter", "objective", "grad_norm", "step_len"].map(String::from))?;
        for (k, it) in self.iterations.iter().enumerate() {
            write_row(w, &[k.to_string(), fmt_f64(it.objective), fmt_f64(it.grad_norm), fmt_f64(it.step_len)])?;
        }
        Ok(())
    }

    pub fn final_objective(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.objective)
    }
}

/// Sufficient decrease in the form that survives rounding once `f` stalls at
/// machine precision: no increase, a change within `1e-10·|f0|`, and the slope
/// reduced as it would be on a quadratic satisfying the Armijo test.
fn approximate_armijo<T: Scalar>(f0: T, f_new: T, slope0: T, slope_new: T, c1: T) -> bool {
    let two = T::one() + T::one();
    f_new <= f0 && (f0 - f_new) <= T::of(1e-10) * f0.abs() && slope_new <= (two * c1 - T::one()) * slope0
}

/// Relative band around `f0` inside which the line search brackets by slope sign alone.
const FLAT_TOLERANCE: f64 = 1e-8;

struct Evaluator<'a, T, F> {
    f: &'a mut F,
    count: usize,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar, F: FnMut(&[T]) -> (T, Vec<T>)> Evaluator<'_, T, F> {
    fn eval(&mut self, x: &[T]) -> (T, Vec<T>) {
        self.count += 1;
        (self.f)(x)
    }
}

/// Minimizes `objective`, which returns the value and gradient at a point.
///
/// Returns the final point and its trace. A failed line search is not an error:
/// the trace records [`Termination::LineSearchFailure`] and the best point found
/// is returned. Only a non-finite objective at `x0` is rejected.
pub fn minimize<T, F>(objective: F, x0: &[T], cfg: &LbfgsConfig) -> Result<(Vec<T>, OptimizationTrace)>
where
    T: Scalar,
    F: FnMut(&[T]) -> (T, Vec<T>),
{
    minimize_observed(objective, x0, cfg, |_, _, _| {})
}

/// [`minimize`], calling `observe(k, x_k, f_k)` at the start point (`k = 0`) and
/// after every accepted step.
pub fn minimize_observed<T, F, O>(
    mut objective: F,
    x0: &[T],
    cfg: &LbfgsConfig,
    mut observe: O,
) -> Result<(Vec<T>, OptimizationTrace)>
where
    T: Scalar,
    F: FnMut(&[T]) -> (T, Vec<T>),
    O: FnMut(usize, &[T], T),
{
    cfg.validate()?;
    let mut ev = Evaluator { f: &mut objective, count: 0, _t: std::marker::PhantomData };
    let mut x = x0.to_vec();
    let (mut fx, mut g) = ev.eval(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    let mut history: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(cfg.memory_pairs);
    let mut records = vec![IterationRecord {
        objective: fx.as_f64(),
        grad_norm: norm_inf(&g).as_f64(),
        step_len: 0.0,
        wolfe: None,
    }];
    observe(0, &x, fx);
    let tol = T::of(cfg.grad_tolerance);
    let termination = loop {
        if norm_inf(&g) <= tol {
            break Termination::GradientTol;
        }
        if records.len() > cfg.max_iterations {
            break Termination::MaxIter;
        }
        let mut direction = two_loop(&g, &history);
        let mut slope = dot(&g, &direction);
        if !(slope < T::zero()) {
            history.clear();
            direction = g.iter().map(|&v| -v).collect();
            slope = dot(&g, &direction);
        }
        let first_step = if history.is_empty() { (T::one() / norm2(&g)).min(T::one()) } else { T::one() };
        let mut found = line_search(&mut ev, &x, fx, slope, &direction, first_step, cfg);
        if found.is_none() && !history.is_empty() {
            // stale curvature can produce a poor direction; retry with steepest descent
            history.clear();
            direction = g.iter().map(|&v| -v).collect();
            slope = dot(&g, &direction);
            found = line_search(&mut ev, &x, fx, slope, &direction, (T::one() / norm2(&g)).min(T::one()), cfg);
        }
        let Some(accepted) = found else {
            break Termination::LineSearchFailure;
        };
        let s: Vec<T> = direction.iter().map(|&d| accepted.step * d).collect();
        let y: Vec<T> = accepted.grad.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::of(1e-10) * norm2(&s) * norm2(&y) {
            if history.len() == cfg.memory_pairs {
                history.pop_front();
            }
            history.push_back((s.clone(), y, T::one() / sy));
        }
        axpy(T::one(), &s, &mut x);
        records.push(IterationRecord {
            objective: accepted.value.as_f64(),
            grad_norm: norm_inf(&accepted.grad).as_f64(),
            step_len: accepted.step.as_f64(),
            wolfe: Some(WolfeRecord {
                f0: fx.as_f64(),
                slope0: slope.as_f64(),
                f_new: accepted.value.as_f64(),
                slope_new: dot(&accepted.grad, &direction).as_f64(),
            }),
        });
        fx = accepted.value;
        g = accepted.grad;
        observe(records.len() - 1, &x, fx);
    };
    Ok((x, OptimizationTrace { iterations: records, termination, evaluations: ev.count }))
}

/// `-H·g` from the stored curvature pairs, with initial scaling `sᵀy / yᵀy`.
fn two_loop<T: Scalar>(g: &[T], history: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let mut q: Vec<T> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = *rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Accepted<T> {
    step: T,
    value: T,
    grad: Vec<T>,
}

struct Probe<T> {
    step: T,
    value: T,
    slope: T,
}

/// Bracketing phase followed by `zoom`, with cubic interpolation safeguarded
/// towards bisection.
fn line_search<T, F>(
    ev: &mut Evaluator<'_, T, F>,
    x: &[T],
    f0: T,
    slope0: T,
    direction: &[T],
    first_step: T,
    cfg: &LbfgsConfig,
) -> Option<Accepted<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> (T, Vec<T>),
{
    let c1 = T::of(cfg.c1);
    let c2 = T::of(cfg.c2);
    let mut budget = cfg.max_line_search_steps;
    let mut trial = vec![T::zero(); x.len()];
    let mut evaluate = |step: T, budget: &mut usize| -> Option<(Probe<T>, Vec<T>)> {
        if *budget == 0 {
            return None;
        }
        *budget -= 1;
        for ((t, &xi), &d) in trial.iter_mut().zip(x).zip(direction) {
            *t = xi + step * d;
        }
        let (value, grad) = ev.eval(&trial);
        let slope = dot(&grad, direction);
        Some((Probe { step, value, slope }, grad))
    };
    let armijo = |p: &Probe<T>| {
        p.value <= f0 + c1 * p.step * slope0 || approximate_armijo(f0, p.value, slope0, p.slope, c1)
    };
    let curvature = |p: &Probe<T>| p.slope.abs() <= -c2 * slope0;
    // values this close to f0 are within rounding of each other; trust slopes instead
    let flat = |p: &Probe<T>| (p.value - f0).abs() <= T::of(FLAT_TOLERANCE) * f0.abs();

    let mut prev = Probe { step: T::zero(), value: f0, slope: slope0 };
    let mut step = first_step;
    let mut first = true;
    let (mut lo, mut hi) = loop {
        let (p, grad) = evaluate(step, &mut budget)?;
        if !p.value.is_finite() || p.slope.is_nan() {
            // overshoot into a non-finite region: shrink towards the last good point
            step = prev.step + (step - prev.step) * T::of(0.1);
            continue;
        }
        if !flat(&p) && (!armijo(&p) || (!first && p.value >= prev.value)) {
            break (prev, p);
        }
        if armijo(&p) && curvature(&p) {
            return Some(Accepted { step: p.step, value: p.value, grad });
        }
        if p.slope >= T::zero() {
            break (p, prev);
        }
        first = false;
        step = p.step * T::of(2.0);
        prev = p;
    };

    loop {
        let width = hi.step - lo.step;
        if width.abs() <= T::epsilon() * lo.step.abs().max(T::epsilon()) {
            return None;
        }
        let lower = lo.step.min(hi.step);
        let upper = lo.step.max(hi.step);
        let margin = T::of(0.1) * (upper - lower);
        let step = match cubic_minimizer(&lo, &hi) {
            Some(c) if c > lower + margin && c < upper - margin => c,
            _ => (lo.step + hi.step) / T::of(2.0),
        };
        let (p, grad) = evaluate(step, &mut budget)?;
        if !p.value.is_finite() || (!flat(&p) && (!armijo(&p) || p.value >= lo.value)) {
            hi = p;
        } else {
            if armijo(&p) && curvature(&p) {
                return Some(Accepted { step: p.step, value: p.value, grad });
            }
            if p.slope * (hi.step - lo.step) >= T::zero() {
                hi = lo;
            }
            lo = p;
        }
    }
}

/// Minimizer of the cubic interpolating values and slopes at both ends.
fn cubic_minimizer<T: Scalar>(a: &Probe<T>, b: &Probe<T>) -> Option<T> {
    if !b.value.is_finite() || !b.slope.is_finite() {
        return None;
    }
    let d1 = a.slope + b.slope - T::of(3.0) * (a.value - b.value) / (a.step - b.step);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < T::zero() {
        return None;
    }
    let d2 = (b.step - a.step).signum() * disc.sqrt();
    let denom = b.slope - a.slope + T::of(2.0) * d2;
    if denom == T::zero() {
        return None;
    }
    let c = b.step - (b.step - a.step) * (b.slope + d2 - d1) / denom;
    c.is_finite().then_some(c)
}

/// Largest relative discrepancy between the analytic gradient and the
/// fourth-order central difference `(8(f(x+s/2) - f(x-s/2)) - (f(x+s) - f(x-s))) / 6s`.
///
/// The difference is taken at steps `h, h/10, h/100, h/1000`; per direction the
/// estimate used is the finer one of the two consecutive steps that agree best,
/// which balances truncation against rounding without consulting the analytic value.
///
/// Up to 200 parameters every coordinate is probed; beyond that, 50 random unit
/// directions. Each discrepancy is `|fd - g| / max(|fd|, |g|, 1e-6·max|g|)`.
pub fn check_gradient<T, F>(mut objective: F, x: &[T], h: T) -> T
where
    T: Scalar,
    F: FnMut(&[T]) -> (T, Vec<T>),
{
    assert!(h > T::zero(), "finite-difference step must be positive");
    let (_, g) = objective(x);
    let floor = T::of(1e-6) * norm_inf(&g).max(T::min_positive_value());
    let directions: Vec<Vec<T>> = if x.len() <= 200 {
        (0..x.len())
            .map(|i| {
                let mut e = vec![T::zero(); x.len()];
                e[i] = T::one();
                e
            })
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        (0..50)
            .map(|_| {
                let mut v: Vec<T> =
                    (0..x.len()).map(|_| T::of(StandardNormal.sample(&mut rng))).collect::<Vec<T>>();
                let n = norm2(&v);
                v.iter_mut().for_each(|c| *c /= n);
                v
            })
            .collect()
    };
    let mut worst = T::zero();
    let mut probe = x.to_vec();
    let mut at = |t: T, v: &[T]| {
        for ((p, &xi), &vi) in probe.iter_mut().zip(x).zip(v) {
            *p = xi + t * vi;
        }
        objective(&probe).0
    };
    for v in &directions {
        let mut estimates = [T::zero(); 4];
        let mut step = h;
        for e in estimates.iter_mut() {
            let half = step / T::of(2.0);
            let near = at(half, v) - at(-half, v);
            let far = at(step, v) - at(-step, v);
            *e = (T::of(8.0) * near - far) / (T::of(6.0) * step);
            step /= T::of(10.0);
        }
        let fd = estimates
            .windows(2)
            .min_by(|a, b| (a[0] - a[1]).abs().partial_cmp(&(b[0] - b[1]).abs()).unwrap_or(std::cmp::Ordering::Equal))
            .map(|w| w[1])
            .expect("four estimates");
        let analytic = dot(&g, v);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    fn assert_trace_invariants(trace: &OptimizationTrace, cfg: &LbfgsConfig) {
        for w in trace.iterations.windows(2) {
            assert!(w[1].objective <= w[0].objective, "objective increased");
        }
        for it in &trace.iterations[1..] {
            let wolfe = it.wolfe.expect("accepted steps carry line-search data");
            assert!(wolfe.satisfies(it.step_len, cfg.c1, cfg.c2), "{wolfe:?} step {}", it.step_len);
        }
        if trace.termination == Termination::GradientTol {
            assert!(trace.iterations.last().unwrap().grad_norm <= cfg.grad_tolerance);
        }
    }

    #[test]
    fn shifted_quadratic() {
        let a = [1.5, -2.0, 0.25, 7.0];
        let f = |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x - a).collect();
            (dot(&d, &d), d.iter().map(|v| 2.0 * v).collect())
        };
        let cfg = LbfgsConfig::default();
        let (x, trace) = minimize(f, &[0.0; 4], &cfg).unwrap();
        for (xi, ai) in x.iter().zip(a) {
            assert!((xi - ai).abs() < 1e-10);
        }
        assert!(trace.iterations.len() - 1 <= 5);
        assert_trace_invariants(&trace, &cfg);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let cfg = LbfgsConfig { grad_tolerance: 1e-10, ..LbfgsConfig::default() };
        let (x, trace) = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(trace.termination, Termination::GradientTol);
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
        assert_trace_invariants(&trace, &cfg);
    }

    #[test]
    fn constant_objective_stops_immediately() {
        let (x, trace) = minimize(|x: &[f64]| (3.0, vec![0.0; x.len()]), &[1.0, 2.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        assert_eq!(trace.termination, Termination::GradientTol);
        assert_eq!(trace.iterations.len(), 1);
    }

    #[test]
    fn convex_quadratic_converges_in_dimension_plus_one() {
        // diag-dominant SPD matrix, d = 6 ≤ memory
        let d = 6;
        let a: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 3.0 + i as f64 } else { 0.3 / (1.0 + (i + j) as f64) }).collect())
            .collect();
        let b: Vec<f64> = (0..d).map(|i| (i as f64).sin()).collect();
        let f = |x: &[f64]| {
            let ax: Vec<f64> = a.iter().map(|r| dot(r, x)).collect();
            let val = 0.5 * dot(x, &ax) - dot(&b, x);
            (val, ax.iter().zip(&b).map(|(p, q)| p - q).collect())
        };
        // finite termination needs a near-exact line search; a tight curvature
        // constant makes the cubic interpolation step do that
        let cfg = LbfgsConfig { grad_tolerance: 1e-10, c2: 0.01, ..LbfgsConfig::default() };
        let (_, trace) = minimize(f, &vec![0.0; d], &cfg).unwrap();
        assert_eq!(trace.termination, Termination::GradientTol);
        assert!(trace.iterations.len() - 1 <= d + 1, "{} iterations", trace.iterations.len() - 1);
        assert_trace_invariants(&trace, &cfg);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let r = minimize(|_: &[f64]| (f64::NAN, vec![0.0]), &[0.0], &LbfgsConfig::default());
        assert!(matches!(r, Err(Error::NonFiniteObjective)));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = LbfgsConfig { c1: 0.95, c2: 0.9, ..LbfgsConfig::default() };
        assert!(minimize(rosenbrock, &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn max_iterations_is_reported() {
        let cfg = LbfgsConfig { max_iterations: 3, ..LbfgsConfig::default() };
        let (_, trace) = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(trace.termination, Termination::MaxIter);
        assert_eq!(trace.iterations.len(), 4);
    }

    #[test]
    fn line_search_failure_keeps_best_point() {
        // the reported gradient points the wrong way, so no step decreases f
        let f = |x: &[f64]| (x[0] * x[0], vec![-2.0 * x[0] - 1.0]);
        let (x, trace) = minimize(f, &[1.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(trace.termination, Termination::LineSearchFailure);
        assert_eq!(x, vec![1.0]);
    }

    #[test]
    fn single_precision_quadratic() {
        let f = |x: &[f32]| ((x[0] - 2.0).powi(2), vec![2.0 * (x[0] - 2.0)]);
        let cfg = LbfgsConfig { grad_tolerance: 1e-5, ..LbfgsConfig::default() };
        let (x, _) = minimize(f, &[0.0_f32], &cfg).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn trace_csv_header() {
        let (_, trace) = minimize(rosenbrock, &[-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,objective,grad_norm,step_len\n"));
        assert_eq!(text.lines().count(), trace.iterations.len() + 1);
    }

    #[test]
    fn gradient_check_on_quadratic() {
        let f = |x: &[f64]| {
            let v = x.iter().enumerate().map(|(i, &xi)| (i as f64 + 1.0) * xi * xi + xi).sum::<f64>();
            (v, x.iter().enumerate().map(|(i, &xi)| 2.0 * (i as f64 + 1.0) * xi + 1.0).collect())
        };
        let x = [0.3, -1.2, 2.5, 0.7];
        assert!(check_gradient(f, &x, 1e-2) < 1e-8);
    }

    #[test]
    fn gradient_check_detects_corruption() {
        let f = |x: &[f64]| {
            let v = x.iter().map(|&xi| xi * xi).sum::<f64>();
            let mut g: Vec<f64> = x.iter().map(|&xi| 2.0 * xi).collect();
            g[1] *= 2.0;
            (v, g)
        };
        assert!(check_gradient(f, &[0.5, 1.0, -0.3], 1e-6) > 0.1);
    }

    #[test]
    fn gradient_check_random_directions() {
        let n = 300;
        let f = |x: &[f64]| (x.iter().map(|v| v.powi(4)).sum::<f64>(), x.iter().map(|v| 4.0 * v.powi(3)).collect());
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        assert!(check_gradient(f, &x, 1e-2) < 1e-6);
    }
}
