//! Echo state network weights, state updates, teacher forcing, closed-loop
//! prediction, and the hybrid variant driven by an approximate model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{SystemModel, Trajectory};
use crate::error::{ensure, Error, Result};
use crate::linalg::{spectral_radius, DenseMatrix, SparseMatrix, POWER_MAX_ITER, POWER_TOLERANCE};
use crate::scalar::{norm_inf, Scalar};

/// Regeneration attempts when a sampled recurrent matrix has zero spectral radius.
pub const MAX_GENERATION_ATTEMPTS: usize = 5;

/// Default number of discarded teacher-forced states.
pub const DEFAULT_WASHOUT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsnHyperParams {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub sigma_in: f64,
    /// Target spectral radius Λ of the recurrent matrix.
    pub spectral_radius: f64,
    /// Expected nonzeros per row of the recurrent matrix.
    pub avg_connectivity: f64,
    pub tikhonov_gamma: f64,
    pub seed: u64,
}

impl EsnHyperParams {
    pub fn lorenz(n_x: usize, seed: u64) -> Self {
        Self {
            n_x,
            n_u: 3,
            n_y: 3,
            sigma_in: 0.15,
            spectral_radius: 0.4,
            avg_connectivity: 3.0,
            tikhonov_gamma: 1e-4,
            seed,
        }
    }

    pub fn cdv(n_x: usize, seed: u64) -> Self {
        Self {
            n_x,
            n_u: 6,
            n_y: 6,
            sigma_in: 2.0,
            spectral_radius: 0.9,
            avg_connectivity: 3.0,
            tikhonov_gamma: 1e-4,
            seed,
        }
    }

    /// Benchmark defaults for a model by name.
    pub fn for_system<T: Scalar>(model: &SystemModel<T>, n_x: usize, seed: u64) -> Self {
        match model.name() {
            "lorenz" => Self::lorenz(n_x, seed),
            _ => Self::cdv(n_x, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_x >= 1 && self.n_u >= 1 && self.n_y >= 1, InvalidParameter, "dimensions must be positive");
        ensure!(
            self.spectral_radius > 0.0 && self.spectral_radius <= 1.0,
            InvalidParameter,
            "spectral radius must lie in (0, 1], got {}",
            self.spectral_radius
        );
        ensure!(
            self.avg_connectivity >= 1.0 && self.avg_connectivity <= self.n_x as f64,
            InvalidParameter,
            "average connectivity must lie in [1, n_x], got {}",
            self.avg_connectivity
        );
        ensure!(self.tikhonov_gamma >= 0.0, InvalidParameter, "Tikhonov weight must be nonnegative");
        ensure!(self.sigma_in > 0.0 && self.sigma_in.is_finite(), InvalidParameter, "sigma_in must be positive");
        Ok(())
    }
}

/// A network's reservoir activation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EsnState<T>(pub Vec<T>);

impl<T: Scalar> EsnState<T> {
    pub fn zeros(n_x: usize) -> Self {
        Self(vec![T::zero(); n_x])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsnWeights<T> {
    /// `n_x × n_u`, one nonzero per row.
    pub w_in: DenseMatrix<T>,
    /// `n_x × n_x` recurrent matrix.
    pub w: SparseMatrix<T>,
    /// `n_y × n_x` readout.
    pub w_out: DenseMatrix<T>,
}

/// Samples an input matrix with one nonzero per row and a sparse recurrent matrix
/// rescaled to the target spectral radius. Returned in `f64`; callers cast.
fn sample_reservoir(hp: &EsnHyperParams, n_in: usize) -> Result<(DenseMatrix<f64>, SparseMatrix<f64>)> {
    hp.validate()?;
    let n = hp.n_x;
    let p = hp.avg_connectivity / n as f64;
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let seed = hp.seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_in = DenseMatrix::zeros(n, n_in);
        for i in 0..n {
            let j = rng.random_range(0..n_in);
            w_in[(i, j)] = rng.random_range(-hp.sigma_in..=hp.sigma_in);
        }
        let mut triplets = Vec::with_capacity((hp.avg_connectivity * n as f64 * 1.2) as usize + 8);
        for i in 0..n {
            for j in 0..n {
                if rng.random_bool(p) {
                    triplets.push((i, j, rng.random_range(-1.0..=1.0)));
                }
            }
        }
        let mut w = SparseMatrix::from_triplets(n, n, &triplets)?;
        let est = spectral_radius(&w, POWER_TOLERANCE, POWER_MAX_ITER);
        if est.radius > 1e-12 {
            w.scale(hp.spectral_radius / est.radius);
            return Ok((w_in, w));
        }
    }
    Err(Error::DegenerateReservoir { attempts: MAX_GENERATION_ATTEMPTS })
}

pub fn generate_weights<T: Scalar>(hp: &EsnHyperParams) -> Result<EsnWeights<T>> {
    let (w_in, w) = sample_reservoir(hp, hp.n_u)?;
    Ok(EsnWeights { w_in: w_in.cast(), w: w.cast(), w_out: DenseMatrix::zeros(hp.n_y, hp.n_x) })
}

/// `tanh(W_in · input + W · x)`
pub fn step<T: Scalar>(state: &EsnState<T>, input: &[T], w_in: &DenseMatrix<T>, w: &SparseMatrix<T>) -> EsnState<T> {
    let mut pre = w.mul_vec(&state.0);
    for (p, row) in pre.iter_mut().zip(w_in.row_iter()) {
        *p += crate::scalar::dot(row, input);
    }
    pre.iter_mut().for_each(|v| *v = v.tanh());
    EsnState(pre)
}

/// `W_out · x`
pub fn readout<T: Scalar>(state: &EsnState<T>, w_out: &DenseMatrix<T>) -> Vec<T> {
    w_out.mul_vec(&state.0)
}

/// Anything that can be driven by inputs and read out linearly from a feature vector.
pub trait Reservoir<T: Scalar> {
    type State: Clone;

    fn zero_state(&self) -> Self::State;
    fn advance(&self, state: &Self::State, input: &[T]) -> Self::State;
    /// Vector the readout acts on.
    fn features(&self, state: &Self::State) -> Vec<T>;
    fn w_out(&self) -> &DenseMatrix<T>;
    fn set_w_out(&mut self, w_out: DenseMatrix<T>);
    fn input_dim(&self) -> usize;

    fn output(&self, state: &Self::State) -> Vec<T> {
        self.w_out().mul_vec(&self.features(state))
    }

    fn feature_dim(&self) -> usize {
        self.w_out().cols()
    }

    fn output_dim(&self) -> usize {
        self.w_out().rows()
    }

    /// Feeds every row of `inputs` in order.
    fn drive(&self, state: &Self::State, inputs: &DenseMatrix<T>) -> Self::State {
        inputs.row_iter().fold(state.clone(), |s, u| self.advance(&s, u))
    }
}

impl<T: Scalar> Reservoir<T> for EsnWeights<T> {
    type State = EsnState<T>;

    fn zero_state(&self) -> EsnState<T> {
        EsnState::zeros(self.w_in.rows())
    }

    fn advance(&self, state: &EsnState<T>, input: &[T]) -> EsnState<T> {
        step(state, input, &self.w_in, &self.w)
    }

    fn features(&self, state: &EsnState<T>) -> Vec<T> {
        state.0.clone()
    }

    fn output(&self, state: &EsnState<T>) -> Vec<T> {
        readout(state, &self.w_out)
    }

    fn w_out(&self) -> &DenseMatrix<T> {
        &self.w_out
    }

    fn set_w_out(&mut self, w_out: DenseMatrix<T>) {
        self.w_out = w_out;
    }

    fn input_dim(&self) -> usize {
        self.w_in.cols()
    }
}

/// Hybrid network: an approximate model's one-step Euler forecast is appended
/// to both the reservoir input and the readout features.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridEsnWeights<T> {
    /// `n_x × (n_u + n_y)`
    pub w_in: DenseMatrix<T>,
    pub w: SparseMatrix<T>,
    /// `n_y × (n_x + n_y)`
    pub w_out: DenseMatrix<T>,
    pub approx_model: SystemModel<T>,
    pub epsilon: T,
    pub dt: T,
}

/// Reservoir activations together with the approximate model's forecast made
/// from the input that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState<T> {
    pub x: EsnState<T>,
    pub model_forecast: Vec<T>,
}

pub fn generate_hybrid_weights<T: Scalar>(
    hp: &EsnHyperParams,
    approx_model: SystemModel<T>,
    epsilon: T,
    dt: T,
) -> Result<HybridEsnWeights<T>> {
    ensure!(
        approx_model.dim() == hp.n_u && hp.n_u == hp.n_y,
        DimensionMismatch,
        "hybrid networks need n_u = n_y = model dimension"
    );
    let (w_in, w) = sample_reservoir(hp, hp.n_u + hp.n_y)?;
    Ok(HybridEsnWeights {
        w_in: w_in.cast(),
        w: w.cast(),
        w_out: DenseMatrix::zeros(hp.n_y, hp.n_x + hp.n_y),
        approx_model,
        epsilon,
        dt,
    })
}

/// `ỹ = euler(input)`, `x' = tanh(W_in [input; ỹ] + W x)`, `ŷ = W_out [x'; ỹ]`.
pub fn hybrid_step_and_readout<T: Scalar>(
    weights: &HybridEsnWeights<T>,
    state: &HybridState<T>,
    input: &[T],
) -> (HybridState<T>, Vec<T>) {
    let next = weights.advance(state, input);
    let y = weights.output(&next);
    (next, y)
}

impl<T: Scalar> Reservoir<T> for HybridEsnWeights<T> {
    type State = HybridState<T>;

    fn zero_state(&self) -> HybridState<T> {
        HybridState { x: EsnState::zeros(self.w_in.rows()), model_forecast: vec![T::zero(); self.w_out.rows()] }
    }

    fn advance(&self, state: &HybridState<T>, input: &[T]) -> HybridState<T> {
        let model_forecast = self.approx_model.euler_step(input, self.dt);
        let mut augmented = input.to_vec();
        augmented.extend_from_slice(&model_forecast);
        HybridState { x: step(&state.x, &augmented, &self.w_in, &self.w), model_forecast }
    }

    fn features(&self, state: &HybridState<T>) -> Vec<T> {
        let mut f = state.x.0.clone();
        f.extend_from_slice(&state.model_forecast);
        f
    }

    fn w_out(&self) -> &DenseMatrix<T> {
        &self.w_out
    }

    fn set_w_out(&mut self, w_out: DenseMatrix<T>) {
        self.w_out = w_out;
    }

    fn input_dim(&self) -> usize {
        self.w_in.cols() - self.w_out.rows()
    }
}

/// Result of driving a network with the training inputs.
#[derive(Debug, Clone)]
pub struct TeacherForced<T, S> {
    /// Row `k` is the feature vector (column `k` of `X`) after `k + washout + 1` inputs.
    pub states: DenseMatrix<T>,
    /// Row `k` is the target `u(k + washout + 1)`.
    pub targets: DenseMatrix<T>,
    /// State after feeding every sample, including the last one; closed-loop
    /// prediction beyond the training window starts here.
    pub end_state: S,
}

/// Drives the network from the zero state with samples `0..N_t-1`, discards the
/// first `washout` states, and aligns each kept state with the next sample.
pub fn run_teacher_forced<T: Scalar, R: Reservoir<T>>(
    net: &R,
    inputs: &Trajectory<T>,
    washout: usize,
) -> Result<TeacherForced<T, R::State>> {
    run_teacher_forced_from(net, net.zero_state(), inputs, washout)
}

pub fn run_teacher_forced_from<T: Scalar, R: Reservoir<T>>(
    net: &R,
    initial: R::State,
    inputs: &Trajectory<T>,
    washout: usize,
) -> Result<TeacherForced<T, R::State>> {
    let n_t = inputs.len();
    ensure!(
        washout < n_t - 1,
        InvalidParameter,
        "washout {washout} leaves no states from {n_t} samples"
    );
    ensure!(
        inputs.dim() == net.input_dim(),
        DimensionMismatch,
        "inputs have {} components, network expects {}",
        inputs.dim(),
        net.input_dim()
    );
    let kept = n_t - 1 - washout;
    let mut states = DenseMatrix::zeros(kept, net.feature_dim());
    let mut targets = DenseMatrix::zeros(kept, inputs.dim());
    let mut s = initial;
    for n in 0..n_t - 1 {
        s = net.advance(&s, inputs.row(n));
        if n >= washout {
            let k = n - washout;
            states.row_mut(k).copy_from_slice(&net.features(&s));
            targets.row_mut(k).copy_from_slice(inputs.row(n + 1));
        }
    }
    let end_state = net.advance(&s, inputs.row(n_t - 1));
    Ok(TeacherForced { states, targets, end_state })
}

/// Closed-loop forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// Row `n` is `ŷ(n)`; truncated at the first divergent output.
    pub outputs: DenseMatrix<T>,
    pub diverged_at: Option<usize>,
}

impl<T> Prediction<T> {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Iterates `ŷ(n) = readout(s(n))`, `s(n+1) = advance(s(n), ŷ(n))` from `s(0) = start`.
///
/// Stops early, with `diverged_at` set, as soon as an output component exceeds
/// `bound` in magnitude or becomes non-finite.
pub fn run_autonomous<T: Scalar, R: Reservoir<T>>(
    net: &R,
    start: &R::State,
    n_steps: usize,
    bound: T,
) -> Prediction<T> {
    let n_y = net.output_dim();
    let mut data = Vec::with_capacity(n_steps * n_y);
    let mut s = start.clone();
    let mut diverged_at = None;
    for n in 0..n_steps {
        let y = net.output(&s);
        if !(norm_inf(&y) <= bound) {
            diverged_at = Some(n);
            break;
        }
        data.extend_from_slice(&y);
        if n + 1 < n_steps {
            s = net.advance(&s, &y);
        }
    }
    let rows = data.len() / n_y.max(1);
    Prediction {
        outputs: DenseMatrix::from_row_major(rows, n_y, data).expect("row-major buffer"),
        diverged_at,
    }
}
