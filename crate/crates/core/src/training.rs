//! Readout training: ridge regression for conventional and hybrid networks, and
//! physics-informed training that adds the mean-squared Euler residual of a
//! closed-loop forecast beyond the training window to the data loss.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::csvio::{fmt_f64, write_row};
use crate::dynamics::{SystemModel, Trajectory, DIVERGENCE_BOUND};
use crate::error::{ensure, Result};
use crate::linalg::{Cholesky, DenseMatrix};
use crate::optimizer::{minimize_observed, LbfgsConfig, OptimizationTrace, Termination};
use crate::reservoir::{run_teacher_forced, EsnState, EsnWeights, Reservoir, TeacherForced};
use crate::scalar::{dot, norm_inf, Scalar};

/// Objective value assigned to a closed-loop rollout that leaves the divergence bound.
pub const DIVERGENCE_PENALTY: f64 = 1e12;

/// Training series; targets are the inputs shifted by one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<T> {
    pub inputs: Trajectory<T>,
    pub washout: usize,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(inputs: Trajectory<T>, washout: usize) -> Result<Self> {
        ensure!(
            washout < inputs.len() - 1,
            InvalidParameter,
            "washout {washout} leaves no training states from {} samples",
            inputs.len()
        );
        Ok(Self { inputs, washout })
    }

    pub fn dt(&self) -> T {
        self.inputs.dt()
    }

    /// Samples `1..N_t`, the one-step-ahead targets of samples `0..N_t-1`.
    pub fn targets(&self) -> DenseMatrix<T> {
        self.inputs.states().slice_rows(1, self.inputs.len())
    }
}

/// How the physics-loss gradient treats the collocation states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Differentiates through the feedback loop: every forecast re-enters the
    /// reservoir, so later states depend on the readout too.
    #[default]
    Recurrent,
    /// Freezes the collocation reservoir states at the rollout of the initial
    /// readout; the forecasts are then linear in `W_out`.
    FixedStates,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsConfig<T> {
    /// Number of collocation points N_p.
    pub n_collocation: usize,
    pub model: SystemModel<T>,
    pub dt: T,
    /// Multiplier of the physics loss in the total loss.
    pub weight: T,
    pub gradient: GradientMode,
    pub divergence_bound: T,
}

impl<T: Scalar> PhysicsConfig<T> {
    pub fn new(model: SystemModel<T>, dt: T, n_collocation: usize) -> Self {
        Self {
            n_collocation,
            model,
            dt,
            weight: T::one(),
            gradient: GradientMode::Recurrent,
            divergence_bound: T::of(DIVERGENCE_BOUND),
        }
    }

    /// Benchmark defaults: 1000 collocation points for Lorenz, 3000 for CDV.
    pub fn for_model(model: SystemModel<T>, dt: T) -> Self {
        let n_p = if model.name() == "lorenz" { 1000 } else { 3000 };
        Self::new(model, dt, n_p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_collocation >= 1, InvalidParameter, "need at least one collocation point");
        ensure!(self.dt > T::zero(), InvalidParameter, "dt must be positive");
        ensure!(self.weight >= T::zero(), InvalidParameter, "physics weight must be nonnegative");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub e_data: f64,
    pub e_physics: f64,
    pub e_total: f64,
}

impl LossReport {
    pub fn new(e_data: f64, e_physics: f64) -> Self {
        Self { e_data, e_physics, e_total: e_data + e_physics }
    }
}

/// Writes `iter,e_data,e_physics,e_total`.
pub fn write_loss_history<W: Write>(history: &[LossReport], w: &mut W) -> Result<()> {
    write_row(w, &["iter", "e_data", "e_physics", "e_total"].map(String::from))?;
    for (k, r) in history.iter().enumerate() {
        write_row(w, &[k.to_string(), fmt_f64(r.e_data), fmt_f64(r.e_physics), fmt_f64(r.e_total)])?;
    }
    Ok(())
}

/// `Σ_n x_n x_nᵀ` over the rows of a time-major state matrix.
pub fn gram<T: Scalar>(states: &DenseMatrix<T>) -> DenseMatrix<T> {
    let n = states.cols();
    let mut g = DenseMatrix::zeros(n, n);
    for x in states.row_iter() {
        for i in 0..n {
            let xi = x[i];
            if xi == T::zero() {
                continue;
            }
            let row = &mut g.row_mut(i)[..=i];
            for (gij, &xj) in row.iter_mut().zip(&x[..=i]) {
                *gij += xi * xj;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g[(j, i)] = g[(i, j)];
        }
    }
    g
}

/// `W_out = Y Xᵀ (X Xᵀ + γI)⁻¹` through a Cholesky solve.
///
/// `states` and `targets` are time-major: row `k` holds column `k` of `X` and `Y`.
pub fn ridge_train<T: Scalar>(states: &DenseMatrix<T>, targets: &DenseMatrix<T>, gamma: T) -> Result<DenseMatrix<T>> {
    ensure!(
        states.rows() == targets.rows(),
        DimensionMismatch,
        "{} state columns but {} target columns",
        states.rows(),
        targets.rows()
    );
    ensure!(gamma >= T::zero(), InvalidParameter, "Tikhonov weight must be nonnegative");
    let mut a = gram(states);
    for i in 0..a.rows() {
        a[(i, i)] += gamma;
    }
    let chol = Cholesky::factor(&a)?;
    let n_x = states.cols();
    let n_y = targets.cols();
    let mut w_out = DenseMatrix::zeros(n_y, n_x);
    for i in 0..n_y {
        let mut rhs = vec![T::zero(); n_x];
        for (x, y) in states.row_iter().zip(targets.row_iter()) {
            let yi = y[i];
            for (r, &xj) in rhs.iter_mut().zip(x) {
                *r += yi * xj;
            }
        }
        chol.solve_in_place(&mut rhs);
        w_out.row_mut(i).copy_from_slice(&rhs);
    }
    Ok(w_out)
}

/// Mean squared one-step error `(1/N_y) Σ_i (1/N) Σ_n (ŷ_i(n) - y_i(n))²`.
pub fn data_loss<T: Scalar>(w_out: &DenseMatrix<T>, states: &DenseMatrix<T>, targets: &DenseMatrix<T>) -> T {
    let mut acc = T::zero();
    let mut y_hat = vec![T::zero(); w_out.rows()];
    for (x, y) in states.row_iter().zip(targets.row_iter()) {
        w_out.mul_vec_into(x, &mut y_hat);
        acc += y_hat.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
    }
    acc / T::of((states.rows() * w_out.rows()) as f64)
}

/// Ridge objective `(1/N_y) Σ_i (Σ_n (ŷ_i(n) - y_i(n))² + γ‖w_i‖²)` and its gradient.
///
/// Its minimizer is the closed form of [`ridge_train`].
pub fn ridge_objective<T: Scalar>(
    w_out: &DenseMatrix<T>,
    states: &DenseMatrix<T>,
    targets: &DenseMatrix<T>,
    gamma: T,
) -> (T, DenseMatrix<T>) {
    let n_y = w_out.rows();
    let scale = T::one() / T::of(n_y as f64);
    let mut value = T::zero();
    let mut grad = DenseMatrix::zeros(n_y, w_out.cols());
    let mut y_hat = vec![T::zero(); n_y];
    for (x, y) in states.row_iter().zip(targets.row_iter()) {
        w_out.mul_vec_into(x, &mut y_hat);
        for i in 0..n_y {
            let e = y_hat[i] - y[i];
            value += e * e;
            let two_e = T::of(2.0) * e;
            for (g, &xj) in grad.row_mut(i).iter_mut().zip(x) {
                *g += two_e * xj;
            }
        }
    }
    value += gamma * dot(w_out.as_slice(), w_out.as_slice());
    for (g, &w) in grad.as_mut_slice().iter_mut().zip(w_out.as_slice()) {
        *g = (*g + T::of(2.0) * gamma * w) * scale;
    }
    (value * scale, grad)
}

/// Data loss expanded around a reference readout `W0`:
/// `E_d(W0 + Δ) = E_d(W0) + s Σ_i (Δ_iᵀ G Δ_i + 2 Δ_i·m_i)` with `G = Σ x xᵀ`,
/// `m_i = Σ_n x_n (ŷ_i(n) - y_i(n))` at `W0`, and `s = 1/(N_y N)`.
///
/// Algebraically identical to [`data_loss`]; each evaluation costs `N_y N_x²`
/// instead of `N_y N_x N`.
#[derive(Debug, Clone)]
pub struct DataTerm<T> {
    gram: DenseMatrix<T>,
    center: DenseMatrix<T>,
    w0: DenseMatrix<T>,
    base: T,
    scale: T,
}

impl<T: Scalar> DataTerm<T> {
    pub fn new(states: &DenseMatrix<T>, targets: &DenseMatrix<T>, w0: &DenseMatrix<T>) -> Self {
        let n_y = w0.rows();
        let mut center = DenseMatrix::zeros(n_y, states.cols());
        let mut y_hat = vec![T::zero(); n_y];
        let mut sq = T::zero();
        for (x, y) in states.row_iter().zip(targets.row_iter()) {
            w0.mul_vec_into(x, &mut y_hat);
            for i in 0..n_y {
                let e = y_hat[i] - y[i];
                sq += e * e;
                for (c, &xj) in center.row_mut(i).iter_mut().zip(x) {
                    *c += e * xj;
                }
            }
        }
        let scale = T::one() / T::of((n_y * states.rows()) as f64);
        Self { gram: gram(states), center, w0: w0.clone(), base: sq * scale, scale }
    }

    /// `(E_d, ∂E_d/∂W_out)` at a row-major readout.
    pub fn eval(&self, w_out: &[T]) -> (T, Vec<T>) {
        let n_x = self.gram.rows();
        let mut value = self.base;
        let mut grad = vec![T::zero(); w_out.len()];
        let mut delta = vec![T::zero(); n_x];
        let mut g_delta = vec![T::zero(); n_x];
        let two = T::of(2.0);
        for (i, gi) in grad.chunks_exact_mut(n_x).enumerate() {
            for ((d, &w), &w0) in delta.iter_mut().zip(&w_out[i * n_x..(i + 1) * n_x]).zip(self.w0.row(i)) {
                *d = w - w0;
            }
            self.gram.mul_vec_into(&delta, &mut g_delta);
            let m = self.center.row(i);
            value += self.scale * (dot(&delta, &g_delta) + two * dot(&delta, m));
            for ((g, &gd), &mi) in gi.iter_mut().zip(&g_delta).zip(m) {
                *g = self.scale * two * (gd + mi);
            }
        }
        (value, grad)
    }
}

/// Closed-loop rollout used by the physics loss.
#[derive(Debug, Clone)]
pub struct Rollout<T> {
    /// Row `k` is the reservoir state producing forecast `k`; row 0 is `x_T`.
    pub states: DenseMatrix<T>,
    /// Row `k` is the forecast for time `T + (k + 1)·dt`.
    pub outputs: DenseMatrix<T>,
    pub diverged: bool,
    /// Largest output magnitude reached (past the bound when diverged).
    pub peak: T,
}

/// Runs the loop `ŷ = W_out x`, `x ← tanh(W_in ŷ + W x)` for `n_outputs` forecasts from `x_t`.
pub fn rollout<T: Scalar>(
    w_out: &DenseMatrix<T>,
    weights: &EsnWeights<T>,
    x_t: &EsnState<T>,
    n_outputs: usize,
    bound: T,
) -> Rollout<T> {
    let n_x = x_t.0.len();
    let n_y = w_out.rows();
    let mut states = DenseMatrix::zeros(n_outputs, n_x);
    let mut outputs = DenseMatrix::zeros(n_outputs, n_y);
    let mut x = x_t.0.clone();
    let mut pre = vec![T::zero(); n_x];
    let mut peak = T::zero();
    for k in 0..n_outputs {
        states.row_mut(k).copy_from_slice(&x);
        let y = outputs.row_mut(k);
        w_out.mul_vec_into(&x, y);
        let m = norm_inf(y);
        peak = if m.is_nan() { T::infinity() } else { peak.max(m) };
        if !(m <= bound) {
            return Rollout { states, outputs, diverged: true, peak };
        }
        if k + 1 < n_outputs {
            weights.w.mul_vec_into(&x, &mut pre);
            for (p, row) in pre.iter_mut().zip(weights.w_in.row_iter()) {
                *p += dot(row, outputs.row(k));
            }
            for (xi, &p) in x.iter_mut().zip(&pre) {
                *xi = p.tanh();
            }
        }
    }
    Rollout { states, outputs, diverged: false, peak }
}

/// Physics loss over the collocation forecasts.
#[derive(Debug, Clone)]
pub struct PhysicsEval<T> {
    pub e_physics: T,
    /// `N_p + 1` forecasts starting at `T + dt`.
    pub predictions: DenseMatrix<T>,
    pub diverged: bool,
}

fn divergence_penalty<T: Scalar>(peak: T, bound: T) -> T {
    let excess = if peak.is_finite() { (peak - bound).max(T::zero()) } else { T::of(DIVERGENCE_PENALTY) };
    T::of(DIVERGENCE_PENALTY) + excess.min(T::of(DIVERGENCE_PENALTY))
}

/// Mean squared Euler residual `(1/N_y) Σ_i (1/N_p) Σ_p r_i(p)²` of an explicit sequence.
pub fn residual_loss<T: Scalar>(sequence: &DenseMatrix<T>, dt: T, model: &SystemModel<T>) -> T {
    let r = crate::dynamics::physics_residual(sequence, dt, model);
    dot(r.as_slice(), r.as_slice()) / T::of((r.rows() * r.cols()) as f64)
}

/// `E_p` of the closed loop started at `x_t`: `N_p + 1` forecasts, `N_p` residual rows.
pub fn physics_loss<T: Scalar>(
    w_out: &DenseMatrix<T>,
    weights: &EsnWeights<T>,
    x_t: &EsnState<T>,
    cfg: &PhysicsConfig<T>,
) -> PhysicsEval<T> {
    let roll = rollout(w_out, weights, x_t, cfg.n_collocation + 1, cfg.divergence_bound);
    let e_physics = if roll.diverged {
        divergence_penalty(roll.peak, cfg.divergence_bound)
    } else {
        residual_loss(&roll.outputs, cfg.dt, &cfg.model)
    };
    PhysicsEval { e_physics, predictions: roll.outputs, diverged: roll.diverged }
}

/// `E_p` of an explicit forecast sequence and `∂E_p/∂ŷ_k` for every row.
fn residual_sensitivity<T: Scalar>(outputs: &DenseMatrix<T>, cfg: &PhysicsConfig<T>) -> (T, DenseMatrix<T>) {
    let (n_out, n_y) = outputs.shape();
    let inv_dt = cfg.dt.recip();
    let residual = crate::dynamics::physics_residual(outputs, cfg.dt, &cfg.model);
    let scale = T::one() / T::of((residual.rows() * n_y) as f64);
    let e_physics = dot(residual.as_slice(), residual.as_slice()) * scale;
    let mut direct = DenseMatrix::zeros(n_out, n_y);
    let two_scale = T::of(2.0) * scale;
    let mut jt_r = vec![T::zero(); n_y];
    for p in 0..residual.rows() {
        let r = residual.row(p);
        jt_r.fill(T::zero());
        cfg.model.jacobian(outputs.row(p)).tr_mul_vec_acc(r, &mut jt_r);
        for i in 0..n_y {
            direct[(p + 1, i)] += two_scale * r[i] * inv_dt;
            direct[(p, i)] -= two_scale * (r[i] * inv_dt + jt_r[i]);
        }
    }
    (e_physics, direct)
}

/// `E_p` with the collocation reservoir states held at `states` (row `k` produces
/// forecast `k`), so that `ŷ_k = W_out x_k` is linear in the readout. Exact
/// gradient of that frozen objective.
pub fn frozen_physics_loss_gradient<T: Scalar>(
    w_out: &DenseMatrix<T>,
    states: &DenseMatrix<T>,
    cfg: &PhysicsConfig<T>,
) -> (T, DenseMatrix<T>) {
    let (n_y, n_x) = w_out.shape();
    let mut outputs = DenseMatrix::zeros(states.rows(), n_y);
    for (k, x) in states.row_iter().enumerate() {
        w_out.mul_vec_into(x, outputs.row_mut(k));
    }
    let (e_physics, direct) = residual_sensitivity(&outputs, cfg);
    let mut grad = DenseMatrix::zeros(n_y, n_x);
    for (a, x) in direct.row_iter().zip(states.row_iter()) {
        for i in 0..n_y {
            for (g, &xj) in grad.row_mut(i).iter_mut().zip(x) {
                *g += a[i] * xj;
            }
        }
    }
    (e_physics, grad)
}

/// `E_p` and its exact derivative with respect to `W_out`.
///
/// Reverse sweep over the stored rollout. With `a_k = ∂E_p/∂ŷ_k` through the
/// residuals and `δ_{k+1}` the adjoint of the pre-activation feeding state `k+1`:
///
/// ```text
/// G_k   = a_k + W_inᵀ δ_{k+1}
/// ∇W   += G_k x_kᵀ
/// δ_k   = (W_outᵀ G_k + Wᵀ δ_{k+1}) ⊙ (1 - x_k²)
/// ```
///
/// `x_0 = x_T` does not depend on the readout, so the sweep stops there. In
/// [`GradientMode::FixedStates`] every `δ` is zero, which is the gradient of
/// [`frozen_physics_loss_gradient`] at the current rollout. A divergent rollout
/// returns the penalty value with a zero gradient.
pub fn physics_loss_gradient<T: Scalar>(
    w_out: &DenseMatrix<T>,
    weights: &EsnWeights<T>,
    x_t: &EsnState<T>,
    cfg: &PhysicsConfig<T>,
) -> (PhysicsEval<T>, DenseMatrix<T>) {
    let n_out = cfg.n_collocation + 1;
    let roll = rollout(w_out, weights, x_t, n_out, cfg.divergence_bound);
    let (n_y, n_x) = w_out.shape();
    let mut grad = DenseMatrix::zeros(n_y, n_x);
    if roll.diverged {
        let e_physics = divergence_penalty(roll.peak, cfg.divergence_bound);
        return (PhysicsEval { e_physics, predictions: roll.outputs, diverged: true }, grad);
    }
    let (e_physics, direct) = residual_sensitivity(&roll.outputs, cfg);

    let recurrent = cfg.gradient == GradientMode::Recurrent;
    let mut delta_next = vec![T::zero(); n_x];
    let mut g_k = vec![T::zero(); n_y];
    let mut lambda = vec![T::zero(); n_x];
    for k in (0..n_out).rev() {
        g_k.copy_from_slice(direct.row(k));
        if recurrent && k + 1 < n_out {
            weights.w_in.tr_mul_vec_acc(&delta_next, &mut g_k);
        }
        let x_k = roll.states.row(k);
        for i in 0..n_y {
            let gi = g_k[i];
            for (g, &xj) in grad.row_mut(i).iter_mut().zip(x_k) {
                *g += gi * xj;
            }
        }
        if !recurrent || k == 0 {
            continue;
        }
        lambda.fill(T::zero());
        w_out.tr_mul_vec_acc(&g_k, &mut lambda);
        if k + 1 < n_out {
            weights.w.tr_mul_vec_acc(&delta_next, &mut lambda);
        }
        for ((d, &l), &x) in delta_next.iter_mut().zip(&lambda).zip(x_k) {
            *d = l * (T::one() - x * x);
        }
    }
    (PhysicsEval { e_physics, predictions: roll.outputs, diverged: false }, grad)
}

/// Fits the readout of `net` by ridge regression on its teacher-forced features.
pub fn train_readout<T: Scalar, R: Reservoir<T> + Clone>(
    net: &R,
    data: &TrainingSet<T>,
    gamma: T,
) -> Result<(R, LossReport, TeacherForced<T, R::State>)> {
    let tf = run_teacher_forced(net, &data.inputs, data.washout)?;
    let w_out = ridge_train(&tf.states, &tf.targets, gamma)?;
    let e_data = data_loss(&w_out, &tf.states, &tf.targets).as_f64();
    let mut trained = net.clone();
    trained.set_w_out(w_out);
    Ok((trained, LossReport::new(e_data, 0.0), tf))
}

/// Conventional network: ridge regression only.
pub fn train_esn<T: Scalar>(weights: &EsnWeights<T>, data: &TrainingSet<T>, gamma: T) -> Result<(EsnWeights<T>, LossReport)> {
    let (net, loss, _) = train_readout(weights, data, gamma)?;
    Ok((net, loss))
}

/// Hybrid network: ridge regression on `[x(n); ỹ(n)]` features.
pub fn train_hybrid<T: Scalar>(
    weights: &crate::reservoir::HybridEsnWeights<T>,
    data: &TrainingSet<T>,
    gamma: T,
) -> Result<(crate::reservoir::HybridEsnWeights<T>, LossReport)> {
    let (net, loss, _) = train_readout(weights, data, gamma)?;
    Ok((net, loss))
}

#[derive(Debug, Clone)]
pub struct PiEsnOutcome<T> {
    pub weights: EsnWeights<T>,
    /// Ridge solution used as the starting point.
    pub initial_w_out: DenseMatrix<T>,
    /// Loss at the start point and after every accepted optimizer step.
    pub history: Vec<LossReport>,
    pub trace: OptimizationTrace,
    /// Final closed-loop rollout diverged.
    pub diverged: bool,
}

impl<T> PiEsnOutcome<T> {
    pub fn line_search_failed(&self) -> bool {
        self.trace.termination == Termination::LineSearchFailure
    }
}

/// `E_tot = E_d + weight·E_p` and its gradient at a row-major readout.
pub struct TotalLoss<'a, T> {
    pub data: DataTerm<T>,
    pub weights: &'a EsnWeights<T>,
    pub x_t: EsnState<T>,
    pub cfg: PhysicsConfig<T>,
    /// Collocation states for [`GradientMode::FixedStates`].
    pub frozen: Option<DenseMatrix<T>>,
}

impl<T: Scalar> TotalLoss<'_, T> {
    /// `(E_tot, gradient, E_d, E_p)`
    pub fn eval(&self, w_flat: &[T]) -> (T, Vec<T>, T, T) {
        let (n_y, n_x) = self.weights.w_out.shape();
        let w_out = DenseMatrix::from_row_major(n_y, n_x, w_flat.to_vec()).expect("readout shape");
        let (e_d, mut grad) = self.data.eval(w_flat);
        let (e_p, g_p) = match &self.frozen {
            Some(states) => frozen_physics_loss_gradient(&w_out, states, &self.cfg),
            None => {
                let (phys, g) = physics_loss_gradient(&w_out, self.weights, &self.x_t, &self.cfg);
                (phys.e_physics, g)
            }
        };
        let w = self.cfg.weight;
        for (g, &gp) in grad.iter_mut().zip(g_p.as_slice()) {
            *g += w * gp;
        }
        (e_d + w * e_p, grad, e_d, e_p)
    }
}

/// Ridge initial guess, then L-BFGS on `E_d + E_p` over the readout.
///
/// `E_d` runs over the post-washout teacher-forced states; the collocation
/// rollout starts from the state after the last training sample. The Tikhonov
/// weight only enters the initial guess.
pub fn train_pi_esn<T: Scalar>(
    weights: &EsnWeights<T>,
    data: &TrainingSet<T>,
    gamma: T,
    cfg: &PhysicsConfig<T>,
    opt: &LbfgsConfig,
) -> Result<PiEsnOutcome<T>> {
    cfg.validate()?;
    ensure!(
        data.inputs.dim() == cfg.model.dim() && weights.w_out.rows() == cfg.model.dim(),
        DimensionMismatch,
        "data, network and model dimensions disagree"
    );
    let tf = run_teacher_forced(weights, &data.inputs, data.washout)?;
    let w0 = ridge_train(&tf.states, &tf.targets, gamma)?;
    let frozen = match cfg.gradient {
        GradientMode::Recurrent => None,
        GradientMode::FixedStates => {
            let roll = rollout(&w0, weights, &tf.end_state, cfg.n_collocation + 1, cfg.divergence_bound);
            if roll.diverged {
                return Err(crate::Error::Diverged { step: roll.states.rows(), bound: cfg.divergence_bound.as_f64() });
            }
            Some(roll.states)
        }
    };
    let loss = TotalLoss {
        data: DataTerm::new(&tf.states, &tf.targets, &w0),
        weights,
        x_t: tf.end_state,
        cfg: *cfg,
        frozen,
    };

    // components of every evaluation, matched to accepted points by value
    let mut evaluated: Vec<(T, T, T)> = Vec::new();
    let mut history = Vec::new();
    let objective = |w: &[T]| {
        let (f, g, e_d, e_p) = loss.eval(w);
        evaluated.push((f, e_d, e_p));
        (f, g)
    };
    let (w_opt, trace) = minimize_observed(objective, w0.as_slice(), opt, |_, _, f| history.push(f))?;
    let history = history
        .into_iter()
        .map(|f| {
            let &(_, e_d, e_p) = evaluated
                .iter()
                .rev()
                .find(|(v, _, _)| v.to_bits_eq(f))
                .expect("accepted point was evaluated");
            LossReport::new(e_d.as_f64(), (cfg.weight * e_p).as_f64())
        })
        .collect();

    let (n_y, n_x) = weights.w_out.shape();
    let mut trained = weights.clone();
    trained.w_out = DenseMatrix::from_row_major(n_y, n_x, w_opt)?;
    let diverged = physics_loss(&trained.w_out, &trained, &loss.x_t, cfg).diverged;
    Ok(PiEsnOutcome { weights: trained, initial_w_out: w0, history, trace, diverged })
}

trait BitsEq {
    fn to_bits_eq(&self, other: Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(&self, other: T) -> bool {
        *self == other || (self.is_nan() && other.is_nan())
    }
}
