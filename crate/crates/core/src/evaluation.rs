//! Forecast skill: normalized error, predictability horizon in Lyapunov times,
//! and ensembles over initial conditions drawn along a reference trajectory.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvio::{fmt_f64, write_row};
use crate::dynamics::{generate_trajectory, Scheme, SystemModel, Trajectory, DIVERGENCE_BOUND};
use crate::error::{ensure, Error, Result};
use crate::linalg::DenseMatrix;
use crate::reservoir::{run_autonomous, Reservoir};
use crate::scalar::Scalar;

pub const HORIZON_THRESHOLD: f64 = 0.2;
pub const DEFAULT_SYNC_STEPS: usize = 100;
const MAX_REFERENCE_ATTEMPTS: u64 = 5;

/// `E(n) = ‖u(n) - û(n)‖ / sqrt(mean_square_norm)` for each row.
///
/// `mean_square_norm` is the time average of `‖u‖²` over whatever reference
/// series normalizes the error; see [`Trajectory::mean_square_norm`].
pub fn normalized_error<T: Scalar>(
    pred: &DenseMatrix<T>,
    truth: &DenseMatrix<T>,
    mean_square_norm: T,
) -> Result<Vec<f64>> {
    ensure!(
        pred.shape() == truth.shape(),
        DimensionMismatch,
        "prediction {:?} and truth {:?} differ in shape",
        pred.shape(),
        truth.shape()
    );
    ensure!(
        mean_square_norm > T::zero() && mean_square_norm.is_finite(),
        InvalidParameter,
        "normalization must be positive and finite"
    );
    let denom = mean_square_norm.as_f64().sqrt();
    Ok(pred
        .row_iter()
        .zip(truth.row_iter())
        .map(|(p, u)| {
            let sq: f64 = p.iter().zip(u).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
            sq.sqrt() / denom
        })
        .collect())
}

/// Normalized error of `pred` against `truth`, normalized by `truth` itself.
pub fn normalized_error_self<T: Scalar>(pred: &Trajectory<T>, truth: &Trajectory<T>) -> Result<Vec<f64>> {
    normalized_error(pred.states(), truth.states(), truth.mean_square_norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub horizon_lt: f64,
    /// The closed-loop forecast left the divergence bound.
    pub diverged: bool,
    /// The error never exceeded the threshold inside the evaluated window.
    pub censored: bool,
    /// Time the forecast stayed inside the divergence bound, in Lyapunov times.
    pub bounded_lt: f64,
    /// Per-step error; a divergent step is recorded as infinity and ends the series.
    pub error_series: Vec<f64>,
}

/// `horizon = k·dt·λ_max` with `k` the first index where `E(k) > threshold`.
///
/// A series that never crosses is censored at its own length.
pub fn predictability_horizon(errors: &[f64], dt: f64, lambda_max: f64, threshold: f64) -> HorizonResult {
    assert!(threshold > 0.0, "threshold must be positive");
    let k = errors.iter().position(|&e| !(e <= threshold));
    let lt = |n: usize| n as f64 * dt * lambda_max;
    HorizonResult {
        horizon_lt: lt(k.unwrap_or(errors.len())),
        diverged: false,
        censored: k.is_none(),
        bounded_lt: lt(errors.len()),
        error_series: errors.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEnsemble {
    pub per_ic: Vec<HorizonResult>,
    pub mean_lt: f64,
    /// Population standard deviation.
    pub std_lt: f64,
    pub count: usize,
    pub n_censored: usize,
    /// Mean over members that crossed the threshold, if any did.
    pub uncensored_mean_lt: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl HorizonEnsemble {
    pub fn from_members(per_ic: Vec<HorizonResult>) -> Result<Self> {
        ensure!(!per_ic.is_empty(), InvalidParameter, "empty ensemble");
        let horizons: Vec<f64> = per_ic.iter().map(|r| r.horizon_lt).collect();
        let (mean_lt, std_lt) = mean_std(&horizons);
        let uncensored: Vec<f64> = per_ic.iter().filter(|r| !r.censored).map(|r| r.horizon_lt).collect();
        Ok(Self {
            count: per_ic.len(),
            n_censored: per_ic.len() - uncensored.len(),
            uncensored_mean_lt: (!uncensored.is_empty()).then(|| mean_std(&uncensored).0),
            mean_lt,
            std_lt,
            per_ic,
        })
    }

    pub fn n_diverged(&self) -> usize {
        self.per_ic.iter().filter(|r| r.diverged).count()
    }

    /// Fraction of members whose forecast stayed bounded for at least `lt` Lyapunov times.
    pub fn bounded_fraction(&self, lt: f64) -> f64 {
        self.per_ic.iter().filter(|r| r.bounded_lt >= lt).count() as f64 / self.count as f64
    }

    /// Writes `ic_index,horizon_lt,diverged,censored`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write_row(w, &["ic_index", "horizon_lt", "diverged", "censored"].map(String::from))?;
        for (i, r) in self.per_ic.iter().enumerate() {
            write_row(
                w,
                &[i.to_string(), fmt_f64(r.horizon_lt), r.diverged.to_string(), r.censored.to_string()],
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_ics: usize,
    /// Length of each autonomous forecast; members that never cross are censored here.
    pub prediction_lt: f64,
    pub sync_steps: usize,
    /// Minimum distance between consecutive initial conditions.
    pub spacing_lt: f64,
    pub threshold: f64,
    pub scheme: Scheme,
    pub divergence_bound: f64,
}

impl EnsembleConfig {
    /// 20 LT windows for Lorenz, 12 LT for CDV.
    pub fn for_model<T: Scalar>(model: &SystemModel<T>, n_ics: usize) -> Self {
        Self {
            n_ics,
            prediction_lt: if model.name() == "lorenz" { 20.0 } else { 12.0 },
            sync_steps: DEFAULT_SYNC_STEPS,
            spacing_lt: 1.0,
            threshold: HORIZON_THRESHOLD,
            scheme: Scheme::Euler,
            divergence_bound: DIVERGENCE_BOUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_ics >= 1, InvalidParameter, "need at least one initial condition");
        ensure!(self.prediction_lt > 0.0, InvalidParameter, "prediction window must be positive");
        ensure!(self.sync_steps >= 1, InvalidParameter, "need at least one synchronization step");
        ensure!(self.spacing_lt >= 0.0, InvalidParameter, "spacing must be nonnegative");
        ensure!(self.threshold > 0.0, InvalidParameter, "threshold must be positive");
        Ok(())
    }
}

/// Long reference run and the row index of each member's first forecast.
#[derive(Debug, Clone)]
pub struct ReferencePlan<T> {
    pub trajectory: Trajectory<T>,
    pub ic_rows: Vec<usize>,
    pub n_predict: usize,
}

/// Integrates the reference model from `start` and places initial conditions
/// `spacing_lt` plus a seeded jitter of up to one more spacing apart, leaving
/// `sync_steps` of history before the first one.
pub fn plan_reference<T: Scalar>(
    model: &SystemModel<T>,
    start: &[T],
    dt: T,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<ReferencePlan<T>> {
    cfg.validate()?;
    let steps_per_lt = 1.0 / (dt.as_f64() * model.lambda_max.as_f64());
    let n_predict = (cfg.prediction_lt * steps_per_lt).ceil() as usize;
    let spacing = ((cfg.spacing_lt * steps_per_lt).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ic_rows = Vec::with_capacity(cfg.n_ics);
    let mut row = cfg.sync_steps + rng.random_range(0..spacing);
    for _ in 0..cfg.n_ics {
        ic_rows.push(row);
        row += spacing + rng.random_range(0..spacing);
    }
    let n_samples = ic_rows.last().unwrap() + n_predict;
    let bound = T::of(cfg.divergence_bound);
    let mut u0 = start.to_vec();
    for attempt in 0..MAX_REFERENCE_ATTEMPTS {
        match generate_trajectory(model, &u0, dt, n_samples, cfg.scheme, bound) {
            Ok(trajectory) => return Ok(ReferencePlan { trajectory, ic_rows, n_predict }),
            Err(Error::Diverged { .. }) => {
                let mut kick = ChaCha8Rng::seed_from_u64(seed ^ (attempt + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                for u in &mut u0 {
                    *u += *u * T::of(kick.random_range(-1e-6..1e-6));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Diverged { step: n_samples, bound: cfg.divergence_bound })
}

/// Synchronizes `net` on `sync_steps` true samples, then forecasts `n_predict`
/// steps from row `ic` of the reference and scores the forecast.
pub fn evaluate_member<T: Scalar, R: Reservoir<T>>(
    net: &R,
    plan: &ReferencePlan<T>,
    ic: usize,
    mean_square_norm: T,
    lambda_max: f64,
    cfg: &EnsembleConfig,
) -> Result<HorizonResult> {
    ensure!(
        ic >= cfg.sync_steps && ic + plan.n_predict <= plan.trajectory.len(),
        InvalidParameter,
        "initial condition {ic} lacks history or truth"
    );
    let states = plan.trajectory.states();
    let sync = states.slice_rows(ic - cfg.sync_steps, ic);
    let start = net.drive(&net.zero_state(), &sync);
    let pred = run_autonomous(net, &start, plan.n_predict, T::of(cfg.divergence_bound));
    let n_ok = pred.outputs.rows();
    let truth = states.slice_rows(ic, ic + n_ok);
    let mut errors = normalized_error(&pred.outputs, &truth, mean_square_norm)?;
    if pred.diverged() {
        errors.push(f64::INFINITY);
    }
    let dt = plan.trajectory.dt().as_f64();
    let mut result = predictability_horizon(&errors, dt, lambda_max, cfg.threshold);
    result.diverged = pred.diverged();
    result.bounded_lt = n_ok as f64 * dt * lambda_max;
    Ok(result)
}

/// Scores `net` on `cfg.n_ics` initial conditions along a reference run of `model`
/// starting at `start`. Members run in parallel; the result depends only on the inputs.
pub fn run_ensemble<T, R>(
    net: &R,
    model: &SystemModel<T>,
    start: &[T],
    dt: T,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<HorizonEnsemble>
where
    T: Scalar,
    R: Reservoir<T> + Sync,
{
    let plan = plan_reference(model, start, dt, cfg, seed)?;
    run_ensemble_on(net, &plan, model.lambda_max.as_f64(), cfg)
}

/// [`run_ensemble`] against an existing reference plan, so several networks can
/// share the same truth.
pub fn run_ensemble_on<T, R>(net: &R, plan: &ReferencePlan<T>, lambda_max: f64, cfg: &EnsembleConfig) -> Result<HorizonEnsemble>
where
    T: Scalar,
    R: Reservoir<T> + Sync,
{
    let msn = plan.trajectory.mean_square_norm();
    let members: Result<Vec<_>> = plan
        .ic_rows
        .par_iter()
        .map(|&ic| evaluate_member(net, plan, ic, msn, lambda_max, cfg))
        .collect();
    HorizonEnsemble::from_members(members?)
}
