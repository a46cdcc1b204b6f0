//! Benchmark ODE systems, explicit integrators, the discrete physics residual
//! and measurement-noise injection.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::csvio::{fmt_f64, write_row, Table};
use crate::error::{ensure, Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::{norm2, Scalar};

/// State-norm bound beyond which an integration or rollout counts as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

pub const LORENZ_LAMBDA_MAX: f64 = 0.934;
pub const CDV_LAMBDA_MAX: f64 = 0.033791;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams<T> {
    pub sigma: T,
    pub rho: T,
    pub beta: T,
}

impl<T: Scalar> Default for LorenzParams<T> {
    fn default() -> Self {
        Self { sigma: T::of(10.0), rho: T::of(28.0), beta: T::of(8.0) / T::of(3.0) }
    }
}

/// Parameters of the six-mode Charney-DeVore truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdvParams<T> {
    pub u1_star: T,
    pub u4_star: T,
    pub damping_c: T,
    pub beta: T,
    pub gamma: T,
    pub channel_b: T,
}

impl<T: Scalar> Default for CdvParams<T> {
    fn default() -> Self {
        Self {
            u1_star: T::of(0.95),
            u4_star: T::of(-0.76095),
            damping_c: T::of(0.1),
            beta: T::of(1.25),
            gamma: T::of(0.2),
            channel_b: T::of(0.5),
        }
    }
}

/// Mode coefficients of the CDV equations; index 0 is `m = 1`, index 1 is `m = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdvCoefficients<T> {
    pub alpha: [T; 2],
    pub beta: [T; 2],
    pub delta: [T; 2],
    pub gamma: [T; 2],
    pub gamma_star: [T; 2],
    pub epsilon: T,
}

pub fn cdv_coefficients<T: Scalar>(p: &CdvParams<T>) -> Result<CdvCoefficients<T>> {
    ensure!(
        p.channel_b > T::zero() && p.channel_b.is_finite(),
        InvalidParameter,
        "channel_b must be positive, got {}",
        p.channel_b
    );
    let pi = T::PI();
    let sqrt2 = T::SQRT_2();
    let b = p.channel_b;
    let b2 = b * b;
    let coef = |m: usize| {
        let m = T::of(m as f64);
        let m2 = m * m;
        let four_m2_1 = T::of(4.0) * m2 - T::one();
        let alpha = T::of(8.0) * sqrt2 * m2 * (b2 + m2 - T::one()) / (pi * four_m2_1 * (b2 + m2));
        let beta = p.beta * b2 / (b2 + m2);
        let delta = T::of(64.0) * sqrt2 / (T::of(15.0) * pi) * (b2 - m2 + T::one()) / (b2 + m2);
        let gamma_star = p.gamma * T::of(4.0) * sqrt2 * m * b / (pi * four_m2_1);
        let gamma = p.gamma * T::of(4.0) * sqrt2 * m2 * m * b / (pi * four_m2_1 * (b2 + m2));
        (alpha, beta, delta, gamma, gamma_star)
    };
    let (a1, b1, d1, g1, gs1) = coef(1);
    let (a2, b2m, d2, g2, gs2) = coef(2);
    Ok(CdvCoefficients {
        alpha: [a1, a2],
        beta: [b1, b2m],
        delta: [d1, d2],
        gamma: [g1, g2],
        gamma_star: [gs1, gs2],
        epsilon: T::of(16.0) * sqrt2 / (T::of(5.0) * pi),
    })
}

#[inline]
pub fn lorenz_rhs<T: Scalar>(u: &[T], p: &LorenzParams<T>, out: &mut [T]) {
    out[0] = p.sigma * (u[1] - u[0]);
    out[1] = u[0] * (p.rho - u[2]) - u[1];
    out[2] = u[0] * u[1] - p.beta * u[2];
}

#[inline]
pub fn cdv_rhs<T: Scalar>(u: &[T], p: &CdvParams<T>, c: &CdvCoefficients<T>, out: &mut [T]) {
    let cd = p.damping_c;
    let (u1, u2, u3, u4, u5, u6) = (u[0], u[1], u[2], u[3], u[4], u[5]);
    let m1 = c.alpha[0] * u1 - c.beta[0];
    let m2 = c.alpha[1] * u1 - c.beta[1];
    out[0] = c.gamma_star[0] * u3 - cd * (u1 - p.u1_star);
    out[1] = -m1 * u3 - cd * u2 - c.delta[0] * u4 * u6;
    out[2] = m1 * u2 - c.gamma[0] * u1 - cd * u3 + c.delta[0] * u4 * u5;
    out[3] = c.gamma_star[1] * u6 - cd * (u4 - p.u4_star) + c.epsilon * (u2 * u6 - u3 * u5);
    out[4] = -m2 * u6 - cd * u5 - c.delta[1] * u4 * u3;
    out[5] = m2 * u5 - c.gamma[1] * u4 - cd * u6 + c.delta[1] * u4 * u2;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum SystemKind<T> {
    Lorenz(LorenzParams<T>),
    Cdv { params: CdvParams<T>, coefficients: CdvCoefficients<T> },
}

/// The parameter a hybrid network's approximate model perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbedParam {
    Rho,
    #[serde(rename = "b")]
    ChannelB,
    #[serde(rename = "C")]
    DampingC,
}

/// A named autonomous ODE with its largest Lyapunov exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemModel<T> {
    pub kind: SystemKind<T>,
    pub lambda_max: T,
}

impl<T: Scalar> SystemModel<T> {
    pub fn lorenz() -> Self {
        Self::lorenz_with(LorenzParams::default())
    }

    pub fn lorenz_with(params: LorenzParams<T>) -> Self {
        Self { kind: SystemKind::Lorenz(params), lambda_max: T::of(LORENZ_LAMBDA_MAX) }
    }

    pub fn cdv() -> Self {
        Self::cdv_with(CdvParams::default()).expect("default CDV parameters are valid")
    }

    pub fn cdv_with(params: CdvParams<T>) -> Result<Self> {
        let coefficients = cdv_coefficients(&params)?;
        Ok(Self { kind: SystemKind::Cdv { params, coefficients }, lambda_max: T::of(CDV_LAMBDA_MAX) })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SystemKind::Lorenz(_) => "lorenz",
            SystemKind::Cdv { .. } => "cdv",
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            SystemKind::Lorenz(_) => 3,
            SystemKind::Cdv { .. } => 6,
        }
    }

    /// One Lyapunov time, `1 / lambda_max`.
    pub fn lyapunov_time(&self) -> T {
        self.lambda_max.recip()
    }

    #[inline]
    pub fn rhs_into(&self, u: &[T], out: &mut [T]) {
        match &self.kind {
            SystemKind::Lorenz(p) => lorenz_rhs(u, p, out),
            SystemKind::Cdv { params, coefficients } => cdv_rhs(u, params, coefficients, out),
        }
    }

    pub fn rhs(&self, u: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.rhs_into(u, &mut out);
        out
    }

    /// Jacobian of the right-hand side, `J[i][j] = ∂f_i/∂u_j`.
    pub fn jacobian(&self, u: &[T]) -> DenseMatrix<T> {
        let n = self.dim();
        let mut j = DenseMatrix::zeros(n, n);
        match &self.kind {
            SystemKind::Lorenz(p) => {
                j[(0, 0)] = -p.sigma;
                j[(0, 1)] = p.sigma;
                j[(1, 0)] = p.rho - u[2];
                j[(1, 1)] = -T::one();
                j[(1, 2)] = -u[0];
                j[(2, 0)] = u[1];
                j[(2, 1)] = u[0];
                j[(2, 2)] = -p.beta;
            }
            SystemKind::Cdv { params: p, coefficients: c } => {
                let cd = p.damping_c;
                let (u1, u2, u3, u4, u5, u6) = (u[0], u[1], u[2], u[3], u[4], u[5]);
                let m1 = c.alpha[0] * u1 - c.beta[0];
                let m2 = c.alpha[1] * u1 - c.beta[1];
                j[(0, 0)] = -cd;
                j[(0, 2)] = c.gamma_star[0];

                j[(1, 0)] = -c.alpha[0] * u3;
                j[(1, 1)] = -cd;
                j[(1, 2)] = -m1;
                j[(1, 3)] = -c.delta[0] * u6;
                j[(1, 5)] = -c.delta[0] * u4;

                j[(2, 0)] = c.alpha[0] * u2 - c.gamma[0];
                j[(2, 1)] = m1;
                j[(2, 2)] = -cd;
                j[(2, 3)] = c.delta[0] * u5;
                j[(2, 4)] = c.delta[0] * u4;

                j[(3, 1)] = c.epsilon * u6;
                j[(3, 2)] = -c.epsilon * u5;
                j[(3, 3)] = -cd;
                j[(3, 4)] = -c.epsilon * u3;
                j[(3, 5)] = c.gamma_star[1] + c.epsilon * u2;

                j[(4, 0)] = -c.alpha[1] * u6;
                j[(4, 2)] = -c.delta[1] * u4;
                j[(4, 3)] = -c.delta[1] * u3;
                j[(4, 4)] = -cd;
                j[(4, 5)] = -m2;

                j[(5, 0)] = c.alpha[1] * u5;
                j[(5, 1)] = c.delta[1] * u4;
                j[(5, 3)] = -c.gamma[1] + c.delta[1] * u2;
                j[(5, 4)] = m2;
                j[(5, 5)] = -cd;
            }
        }
        j
    }

    /// Copy of the model with one parameter multiplied by `1 + epsilon`.
    pub fn perturbed(&self, param: PerturbedParam, epsilon: T) -> Result<Self> {
        let factor = T::one() + epsilon;
        let kind = match (&self.kind, param) {
            (SystemKind::Lorenz(p), PerturbedParam::Rho) => {
                SystemKind::Lorenz(LorenzParams { rho: p.rho * factor, ..*p })
            }
            (SystemKind::Cdv { params, .. }, PerturbedParam::ChannelB | PerturbedParam::DampingC) => {
                let mut q = *params;
                if param == PerturbedParam::ChannelB {
                    q.channel_b *= factor;
                } else {
                    q.damping_c *= factor;
                }
                SystemKind::Cdv { params: q, coefficients: cdv_coefficients(&q)? }
            }
            (_, param) => {
                return Err(Error::InvalidParameter(format!(
                    "{param:?} is not a parameter of the {} system",
                    self.name()
                )))
            }
        };
        Ok(Self { kind, lambda_max: self.lambda_max })
    }

    pub fn euler_step(&self, u: &[T], dt: T) -> Vec<T> {
        euler_step(u, dt, |x, o| self.rhs_into(x, o))
    }

    /// Default integration timestep of the benchmark dataset.
    pub fn default_dt(&self) -> T {
        match self.kind {
            SystemKind::Lorenz(_) => T::of(0.01),
            SystemKind::Cdv { .. } => T::of(0.1),
        }
    }

    /// Starting point of the spin-up used before recording datasets.
    pub fn spinup_start(&self) -> Vec<T> {
        match &self.kind {
            SystemKind::Lorenz(_) => vec![T::one(); 3],
            SystemKind::Cdv { params, .. } => {
                vec![params.u1_star, T::zero(), T::zero(), params.u4_star, T::zero(), T::zero()]
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> SystemModel<U> {
        let c = |v: T| U::of(v.as_f64());
        let c2 = |v: [T; 2]| [c(v[0]), c(v[1])];
        let kind = match &self.kind {
            SystemKind::Lorenz(p) => {
                SystemKind::Lorenz(LorenzParams { sigma: c(p.sigma), rho: c(p.rho), beta: c(p.beta) })
            }
            SystemKind::Cdv { params: p, coefficients: k } => SystemKind::Cdv {
                params: CdvParams {
                    u1_star: c(p.u1_star),
                    u4_star: c(p.u4_star),
                    damping_c: c(p.damping_c),
                    beta: c(p.beta),
                    gamma: c(p.gamma),
                    channel_b: c(p.channel_b),
                },
                coefficients: CdvCoefficients {
                    alpha: c2(k.alpha),
                    beta: c2(k.beta),
                    delta: c2(k.delta),
                    gamma: c2(k.gamma),
                    gamma_star: c2(k.gamma_star),
                    epsilon: c(k.epsilon),
                },
            },
        };
        SystemModel { kind, lambda_max: c(self.lambda_max) }
    }
}

/// `u + dt * rhs(u)`
pub fn euler_step<T: Scalar>(u: &[T], dt: T, rhs: impl Fn(&[T], &mut [T])) -> Vec<T> {
    let mut f = vec![T::zero(); u.len()];
    rhs(u, &mut f);
    u.iter().zip(&f).map(|(&x, &d)| x + dt * d).collect()
}

/// Classical fourth-order Runge-Kutta step.
pub fn rk4_step<T: Scalar>(u: &[T], dt: T, rhs: impl Fn(&[T], &mut [T])) -> Vec<T> {
    let n = u.len();
    let half = dt / T::of(2.0);
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    rhs(u, &mut k1);
    for i in 0..n {
        tmp[i] = u[i] + half * k1[i];
    }
    rhs(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = u[i] + half * k2[i];
    }
    rhs(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = u[i] + dt * k3[i];
    }
    rhs(&tmp, &mut k4);
    let sixth = dt / T::of(6.0);
    (0..n)
        .map(|i| u[i] + sixth * (k1[i] + T::of(2.0) * (k2[i] + k3[i]) + k4[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Euler,
    Rk4,
}

/// Uniformly sampled states; row `n` is the state at time `n * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    dt: T,
    states: DenseMatrix<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(dt: T, states: DenseMatrix<T>) -> Result<Self> {
        ensure!(dt > T::zero(), InvalidParameter, "dt must be positive");
        ensure!(states.rows() >= 2, InvalidParameter, "a trajectory needs at least 2 samples");
        ensure!(states.is_finite(), InvalidParameter, "trajectory contains non-finite values");
        Ok(Self { dt, states })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn states(&self) -> &DenseMatrix<T> {
        &self.states
    }

    pub fn into_states(self) -> DenseMatrix<T> {
        self.states
    }

    pub fn row(&self, n: usize) -> &[T] {
        self.states.row(n)
    }

    /// Samples `start..end`, keeping `dt`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(
            start < end && end <= self.len(),
            InvalidParameter,
            "slice {start}..{end} outside a trajectory of {} samples",
            self.len()
        );
        Self::new(self.dt, self.states.slice_rows(start, end))
    }

    /// Population variance of each component.
    pub fn component_variance(&self) -> Vec<T> {
        let n = T::of(self.len() as f64);
        (0..self.dim())
            .map(|j| {
                let mean = self.states.row_iter().map(|r| r[j]).sum::<T>() / n;
                self.states.row_iter().map(|r| (r[j] - mean).powi(2)).sum::<T>() / n
            })
            .collect()
    }

    /// Time average of the squared state norm.
    pub fn mean_square_norm(&self) -> T {
        self.states.row_iter().map(|r| r.iter().map(|&v| v * v).sum::<T>()).sum::<T>()
            / T::of(self.len() as f64)
    }

    /// Writes `t,u1,...,uN` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("u{i}")));
        write_row(w, &header)?;
        let dt = self.dt.as_f64();
        for (n, row) in self.states.row_iter().enumerate() {
            let mut fields = vec![fmt_f64(n as f64 * dt)];
            fields.extend(row.iter().map(|v| fmt_f64(v.as_f64())));
            write_row(w, &fields)?;
        }
        Ok(())
    }

    /// Reads the format of [`Trajectory::write_csv`]; `dt` is taken from the first two
    /// time stamps.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let table = Table::read(r)?;
        let dim = table.header.len().saturating_sub(1);
        let mut expected = vec!["t".to_string()];
        expected.extend((1..=dim).map(|i| format!("u{i}")));
        if table.header != expected || dim == 0 {
            return Err(Error::Parse(format!("unexpected trajectory header {:?}", table.header)));
        }
        if table.rows.len() < 2 {
            return Err(Error::Parse("trajectory CSV needs at least 2 rows".into()));
        }
        let dt = table.f64_at(1, 0)? - table.f64_at(0, 0)?;
        let mut data = Vec::with_capacity(table.rows.len() * dim);
        for i in 0..table.rows.len() {
            for j in 1..=dim {
                data.push(T::of(table.f64_at(i, j)?));
            }
        }
        Self::new(T::of(dt), DenseMatrix::from_row_major(table.rows.len(), dim, data)?)
    }
}

/// Integrates `n_samples - 1` steps from `u0`; row 0 is `u0`.
pub fn generate_trajectory<T: Scalar>(
    model: &SystemModel<T>,
    u0: &[T],
    dt: T,
    n_samples: usize,
    scheme: Scheme,
    divergence_bound: T,
) -> Result<Trajectory<T>> {
    ensure!(n_samples >= 2, InvalidParameter, "need at least 2 samples, got {n_samples}");
    ensure!(dt > T::zero(), InvalidParameter, "dt must be positive");
    ensure!(
        u0.len() == model.dim(),
        DimensionMismatch,
        "initial state has {} components, model needs {}",
        u0.len(),
        model.dim()
    );
    let n = model.dim();
    let mut data = Vec::with_capacity(n_samples * n);
    data.extend_from_slice(u0);
    let mut u = u0.to_vec();
    for step in 1..n_samples {
        u = match scheme {
            Scheme::Euler => euler_step(&u, dt, |x, o| model.rhs_into(x, o)),
            Scheme::Rk4 => rk4_step(&u, dt, |x, o| model.rhs_into(x, o)),
        };
        let norm = norm2(&u);
        if !(norm <= divergence_bound) {
            return Err(Error::Diverged { step, bound: divergence_bound.as_f64() });
        }
        data.extend_from_slice(&u);
    }
    Trajectory::new(dt, DenseMatrix::from_row_major(n_samples, n, data)?)
}

/// State reached after `spinup_steps` steps from the model's spin-up start.
pub fn spun_up_state<T: Scalar>(model: &SystemModel<T>, dt: T, spinup_steps: usize, scheme: Scheme) -> Result<Vec<T>> {
    let u0 = model.spinup_start();
    if spinup_steps == 0 {
        return Ok(u0);
    }
    let traj = generate_trajectory(model, &u0, dt, spinup_steps + 1, scheme, T::of(DIVERGENCE_BOUND))?;
    Ok(traj.row(spinup_steps).to_vec())
}

/// Euler defect of a sequence: row `p` is `(y(p+1) - y(p)) / dt - f(y(p))`.
pub fn physics_residual<T: Scalar>(y_seq: &DenseMatrix<T>, dt: T, model: &SystemModel<T>) -> DenseMatrix<T> {
    assert!(y_seq.rows() >= 2, "residual needs at least two states");
    let n = y_seq.cols();
    let mut out = DenseMatrix::zeros(y_seq.rows() - 1, n);
    let mut f = vec![T::zero(); n];
    for p in 0..y_seq.rows() - 1 {
        let (cur, next) = (y_seq.row(p), y_seq.row(p + 1));
        model.rhs_into(cur, &mut f);
        for (i, o) in out.row_mut(p).iter_mut().enumerate() {
            *o = (next[i] - cur[i]) / dt - f[i];
        }
    }
    out
}

/// Adds independent Gaussian noise to each component with variance
/// `var_i / 10^(snr_db / 10)`, `var_i` being the component's variance over the series.
pub fn add_measurement_noise<T: Scalar>(traj: &Trajectory<T>, snr_db: f64, seed: u64) -> Result<Trajectory<T>> {
    ensure!(!snr_db.is_nan(), InvalidParameter, "SNR must be a number");
    let variance = traj.component_variance();
    if let Some(i) = variance.iter().position(|&v| !(v > T::zero())) {
        return Err(Error::InvalidParameter(format!("component {} has zero variance", i + 1)));
    }
    let power_ratio = 10f64.powf(snr_db / 10.0);
    let sd: Vec<f64> = variance.iter().map(|v| (v.as_f64() / power_ratio).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = traj.states().clone();
    for n in 0..states.rows() {
        for (v, &s) in states.row_mut(n).iter_mut().zip(&sd) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += T::of(s * z);
        }
    }
    Trajectory::new(traj.dt(), states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lorenz() -> SystemModel<f64> {
        SystemModel::lorenz()
    }

    #[test]
    fn lorenz_rhs_examples() {
        let m = lorenz();
        assert_eq!(m.rhs(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        let f = m.rhs(&[1.0, 1.0, 1.0]);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert_relative_eq!(f[2], 1.0 - 8.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn lorenz_equilibria_are_fixed_points() {
        let m = lorenz();
        let c = (8.0_f64 / 3.0 * 27.0).sqrt();
        for s in [1.0, -1.0] {
            let f = m.rhs(&[s * c, s * c, 27.0]);
            assert!(f.iter().all(|v| v.abs() < 1e-13), "{f:?}");
        }
        assert_relative_eq!(c, 72.0_f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn cdv_coefficient_examples() {
        let c = cdv_coefficients(&CdvParams::<f64>::default()).unwrap();
        assert_relative_eq!(c.epsilon, 1.440_506, epsilon = 1e-6);
        assert_relative_eq!(c.epsilon, 16.0 * 2f64.sqrt() / (5.0 * std::f64::consts::PI), epsilon = 1e-15);
        assert_relative_eq!(c.gamma_star[0], 0.060_021, epsilon = 1e-6);

        let flat = CdvParams { gamma: 0.0, ..CdvParams::default() };
        let c = cdv_coefficients(&flat).unwrap();
        assert_eq!(c.gamma, [0.0, 0.0]);
        assert_eq!(c.gamma_star, [0.0, 0.0]);
    }

    #[test]
    fn cdv_coefficients_reject_bad_channel_width() {
        for b in [0.0, -0.5] {
            let p = CdvParams { channel_b: b, ..CdvParams::<f64>::default() };
            assert!(cdv_coefficients(&p).is_err());
        }
    }

    #[test]
    fn cdv_rhs_at_origin_is_forcing() {
        let m = SystemModel::<f64>::cdv();
        let f = m.rhs(&[0.0; 6]);
        let expected = [0.095, 0.0, 0.0, -0.076095, 0.0, 0.0];
        for (a, b) in f.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn cdv_rhs_at_forcing_state() {
        let m = SystemModel::<f64>::cdv();
        let SystemKind::Cdv { params: p, coefficients: c } = m.kind else { unreachable!() };
        let f = m.rhs(&[p.u1_star, 0.0, 0.0, p.u4_star, 0.0, 0.0]);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
        assert_relative_eq!(f[2], -c.gamma[0] * p.u1_star, epsilon = 1e-15);
        assert_eq!(f[3], 0.0);
        assert_eq!(f[4], 0.0);
        assert_relative_eq!(f[5], -c.gamma[1] * p.u4_star, epsilon = 1e-15);
    }

    #[test]
    fn cdv_damping_is_linear() {
        let p = CdvParams::<f64>::default();
        let u = [0.3, -0.2, 0.1, 0.4, 0.05, -0.1];
        let zero_c = SystemModel::cdv_with(CdvParams { damping_c: 0.0, ..p }).unwrap().rhs(&u);
        let one_c = SystemModel::cdv_with(p).unwrap().rhs(&u);
        let two_c = SystemModel::cdv_with(CdvParams { damping_c: 2.0 * p.damping_c, ..p }).unwrap().rhs(&u);
        for i in 0..6 {
            assert_relative_eq!(two_c[i] - zero_c[i], 2.0 * (one_c[i] - zero_c[i]), epsilon = 1e-14);
        }
    }

    #[test]
    fn jacobians_match_central_differences() {
        let cases: [(SystemModel<f64>, Vec<f64>); 2] = [
            (lorenz(), vec![-3.1, 2.7, 21.0]),
            (SystemModel::cdv(), vec![0.8, -0.1, 0.25, -0.6, 0.2, 0.15]),
        ];
        for (m, u) in cases {
            let j = m.jacobian(&u);
            let h = 1e-6;
            for col in 0..m.dim() {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[col] += h;
                dn[col] -= h;
                let (fp, fm) = (m.rhs(&up), m.rhs(&dn));
                for row in 0..m.dim() {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    assert!((fd - j[(row, col)]).abs() < 1e-7, "{} J[{row}][{col}]", m.name());
                }
            }
        }
    }

    #[test]
    fn euler_step_example() {
        let u = lorenz().euler_step(&[1.0, 1.0, 1.0], 0.01);
        assert_relative_eq!(u[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(u[1], 1.26, epsilon = 1e-15);
        assert_relative_eq!(u[2], 0.983_333_333_333_333_3, epsilon = 1e-15);
        let still = euler_step(&[4.0, 5.0], 123.0, |_, o: &mut [f64]| o.fill(0.0));
        assert_eq!(still, vec![4.0, 5.0]);
    }

    /// Global error at one Lyapunov time against a fine RK4 reference; returns the fitted order.
    fn convergence_order(scheme: Scheme, base_dt: f64) -> f64 {
        let m = lorenz();
        let u0 = [-8.0, 7.0, 27.0];
        let horizon = 1.0 / LORENZ_LAMBDA_MAX;
        let reference_steps = 2_usize.pow(16);
        let reference =
            generate_trajectory(&m, &u0, horizon / reference_steps as f64, reference_steps + 1, Scheme::Rk4, 1e6)
                .unwrap();
        let truth = reference.row(reference_steps);
        let mut errs = Vec::new();
        for k in 0..3 {
            let dt = base_dt / 2f64.powi(k);
            let steps = (horizon / dt).round() as usize;
            let t = generate_trajectory(&m, &u0, horizon / steps as f64, steps + 1, scheme, 1e6).unwrap();
            let end = t.row(steps);
            errs.push(end.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
        // least-squares slope of log(err) against log(dt)
        let xs: Vec<f64> = (0..3).map(|k| (base_dt / 2f64.powi(k)).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn euler_is_first_order() {
        let order = convergence_order(Scheme::Euler, 1e-3);
        assert!((0.8..=1.2).contains(&order), "Euler order {order}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let order = convergence_order(Scheme::Rk4, 1e-2);
        assert!((3.5..=4.5).contains(&order), "RK4 order {order}");
    }

    #[test]
    fn two_sample_trajectory_is_one_step() {
        let m = lorenz();
        let t = generate_trajectory(&m, &[1.0, 1.0, 1.0], 0.01, 2, Scheme::Euler, 1e6).unwrap();
        assert_eq!(t.row(1), m.euler_step(&[1.0, 1.0, 1.0], 0.01).as_slice());
        assert!(generate_trajectory(&m, &[1.0, 1.0, 1.0], 0.01, 1, Scheme::Euler, 1e6).is_err());
        assert!(generate_trajectory(&m, &[1.0, 1.0, 1.0], -0.01, 5, Scheme::Euler, 1e6).is_err());
    }

    #[test]
    fn lorenz_default_run_is_bounded() {
        let m = lorenz();
        let u0 = spun_up_state(&m, 0.01, 1000, Scheme::Euler).unwrap();
        let t = generate_trajectory(&m, &u0, 0.01, 1000, Scheme::Euler, 1e6).unwrap();
        assert!(t.states().as_slice().iter().all(|v| v.abs() < 100.0));
    }

    #[test]
    fn cdv_default_run_alternates_regimes() {
        let m = SystemModel::<f64>::cdv();
        let u0 = spun_up_state(&m, 0.1, 1000, Scheme::Euler).unwrap();
        let t = generate_trajectory(&m, &u0, 0.1, 9000, Scheme::Euler, 1e6).unwrap();
        let u1 = t.states().column(0);
        let (lo, hi) = u1.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        // zonal episodes sit near u1* = 0.95, blocked episodes dip below 0.8
        assert!(hi > 0.9 && lo < 0.8, "u1 range {lo}..{hi}");
        assert!(t.states().as_slice().iter().all(|v| v.abs() < 10.0));
    }

    #[test]
    fn divergence_is_detected() {
        // unstable linear growth through an enormous rho
        let m = SystemModel::lorenz_with(LorenzParams { sigma: 10.0, rho: 1e9, beta: 8.0 / 3.0 });
        let err = generate_trajectory(&m, &[1.0, 1.0, 1.0], 0.01, 1000, Scheme::Euler, 1e6).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn residual_vanishes_on_euler_sequences() {
        for m in [lorenz(), SystemModel::cdv()] {
            let dt = m.default_dt();
            let u0 = spun_up_state(&m, dt, 200, Scheme::Euler).unwrap();
            let t = generate_trajectory(&m, &u0, dt, 300, Scheme::Euler, 1e6).unwrap();
            let r = physics_residual(t.states(), dt, &m);
            let scale = t.states().row_iter().map(|u| norm2(&m.rhs(u))).fold(0.0, f64::max);
            let bound = 10.0 * f64::EPSILON * scale.max(1.0) / dt * 10.0;
            assert!(r.as_slice().iter().all(|v| v.abs() <= bound), "{} residual too large", m.name());
        }
    }

    #[test]
    fn residual_of_constant_sequence() {
        let m = lorenz();
        let c = [2.0, -1.0, 5.0];
        let seq = DenseMatrix::from_rows(&[c.to_vec(), c.to_vec(), c.to_vec()]).unwrap();
        let r = physics_residual(&seq, 0.01, &m);
        let f = m.rhs(&c);
        for p in 0..2 {
            for i in 0..3 {
                assert_eq!(r[(p, i)], -f[i]);
            }
        }
    }

    #[test]
    fn residual_stencil_is_local() {
        let m = lorenz();
        let t = generate_trajectory(&m, &[1.0, 2.0, 20.0], 0.01, 8, Scheme::Euler, 1e6).unwrap();
        let base = physics_residual(t.states(), 0.01, &m);
        let mut pert = t.states().clone();
        pert[(4, 1)] += 1e-3;
        let changed = physics_residual(&pert, 0.01, &m);
        for p in 0..base.rows() {
            let differs = base.row(p) != changed.row(p);
            assert_eq!(differs, p == 3 || p == 4, "row {p}");
        }
    }

    fn noisy_source(n: usize) -> Trajectory<f64> {
        let m = lorenz();
        let u0 = spun_up_state(&m, 0.01, 1000, Scheme::Euler).unwrap();
        generate_trajectory(&m, &u0, 0.01, n, Scheme::Euler, 1e6).unwrap()
    }

    #[test]
    fn infinite_snr_adds_nothing() {
        let t = noisy_source(500);
        let n = add_measurement_noise(&t, 400.0, 3).unwrap();
        assert!(t.states().max_abs_diff(n.states()) < 1e-12);
    }

    #[test]
    fn noise_standard_deviation_for_variance_four() {
        // two-point alternating series has population variance exactly 4
        let rows: Vec<Vec<f64>> = (0..100_000).map(|n| vec![if n % 2 == 0 { 2.0 } else { -2.0 }]).collect();
        let t = Trajectory::new(1.0, DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(t.component_variance(), vec![4.0]);
        let noisy = add_measurement_noise(&t, 20.0, 11).unwrap();
        let noise: Vec<f64> = (0..t.len()).map(|n| noisy.row(n)[0] - t.row(n)[0]).collect();
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let sd = (noise.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / noise.len() as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.003, "noise sd {sd}");
    }

    #[test]
    fn empirical_snr_matches_target() {
        let t = noisy_source(100_000);
        for snr in [20.0, 30.0] {
            let noisy = add_measurement_noise(&t, snr, 5).unwrap();
            let var = t.component_variance();
            for j in 0..3 {
                let noise_power =
                    (0..t.len()).map(|n| (noisy.row(n)[j] - t.row(n)[j]).powi(2)).sum::<f64>() / t.len() as f64;
                let measured = 10.0 * (var[j] / noise_power).log10();
                assert!((measured - snr).abs() < 0.5, "component {j}: {measured} dB");
            }
        }
    }

    #[test]
    fn noise_is_seed_deterministic_and_decorrelated() {
        let t = noisy_source(10_000);
        let a = add_measurement_noise(&t, 20.0, 1).unwrap();
        let b = add_measurement_noise(&t, 20.0, 1).unwrap();
        let c = add_measurement_noise(&t, 20.0, 2).unwrap();
        assert_eq!(a, b);
        let na: Vec<f64> = (0..t.len()).map(|n| a.row(n)[0] - t.row(n)[0]).collect();
        let nc: Vec<f64> = (0..t.len()).map(|n| c.row(n)[0] - t.row(n)[0]).collect();
        let corr = na.iter().zip(&nc).map(|(x, y)| x * y).sum::<f64>()
            / (na.iter().map(|x| x * x).sum::<f64>() * nc.iter().map(|y| y * y).sum::<f64>()).sqrt();
        assert!(corr.abs() < 0.05, "correlation {corr}");
    }

    #[test]
    fn zero_variance_is_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 4.0]];
        let t = Trajectory::new(0.1, DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!(add_measurement_noise(&t, 20.0, 0).is_err());
    }

    #[test]
    fn perturbed_models() {
        let m = lorenz().perturbed(PerturbedParam::Rho, 0.05).unwrap();
        let SystemKind::Lorenz(p) = m.kind else { unreachable!() };
        assert_relative_eq!(p.rho, 29.4, epsilon = 1e-12);
        let big = lorenz().perturbed(PerturbedParam::Rho, 1.0).unwrap();
        assert_eq!(big.rhs(&[1.0, 1.0, 1.0])[1], 54.0);
        assert!(lorenz().perturbed(PerturbedParam::ChannelB, 0.05).is_err());
        let cdv = SystemModel::<f64>::cdv().perturbed(PerturbedParam::DampingC, 1.0).unwrap();
        let SystemKind::Cdv { params, .. } = cdv.kind else { unreachable!() };
        assert_relative_eq!(params.damping_c, 0.2, epsilon = 1e-15);
        assert!(SystemModel::<f64>::cdv().perturbed(PerturbedParam::Rho, 0.05).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = noisy_source(50);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,u1,u2,u3\n"));
        let back = Trajectory::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.states(), t.states());
        assert_relative_eq!(back.dt(), 0.01, epsilon = 1e-15);
    }

    #[test]
    fn single_precision_integration() {
        let m = SystemModel::<f32>::lorenz();
        let u = m.euler_step(&[1.0, 1.0, 1.0], 0.01);
        assert!((u[1] - 1.26).abs() < 1e-6);
    }
}
