use approx::assert_relative_eq;
use pi_esn::dynamics::{generate_trajectory, spun_up_state, Scheme, DIVERGENCE_BOUND};
use pi_esn::evaluation::{normalized_error, predictability_horizon, run_ensemble, EnsembleConfig, HorizonEnsemble, HorizonResult};
use pi_esn::optimizer::LbfgsConfig;
use pi_esn::persist::{ModelFile, Network, Variant};
use pi_esn::reservoir::{generate_weights, run_autonomous, run_teacher_forced, EsnHyperParams, Reservoir};
use pi_esn::training::{gram, ridge_train, train_esn, train_pi_esn};
use pi_esn::{Data, Esn, Esn32, Matrix, Model, Model32, Physics, Series};
use proptest::prelude::*;

fn lorenz_data(n: usize, washout: usize) -> Data {
    let m = Model::lorenz();
    let u0 = spun_up_state(&m, 0.01, 1000, Scheme::Euler).unwrap();
    Data::new(generate_trajectory(&m, &u0, 0.01, n, Scheme::Euler, DIVERGENCE_BOUND).unwrap(), washout).unwrap()
}

#[test]
fn ridge_solutions_satisfy_normal_equations() {
    let data = lorenz_data(600, 100);
    for seed in 0..5 {
        let net: Esn = generate_weights(&EsnHyperParams::lorenz(60, seed)).unwrap();
        let tf = run_teacher_forced(&net, &data.inputs, data.washout).unwrap();
        let gamma = 1e-4;
        let w = ridge_train(&tf.states, &tf.targets, gamma).unwrap();
        // (X Xᵀ + γI) W_outᵀ = X Yᵀ, checked row by row of W_out
        let mut lhs = gram(&tf.states);
        (0..lhs.rows()).for_each(|i| lhs[(i, i)] += gamma);
        for i in 0..3 {
            let left = lhs.mul_vec(w.row(i));
            let mut right = vec![0.0; 60];
            tf.states.tr_mul_vec_acc(&tf.targets.column(i), &mut right);
            let scale = right.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
            let resid = left.iter().zip(&right).fold(0.0_f64, |a, (l, r)| a.max((l - r).abs()));
            assert!(resid / scale < 1e-10, "relative residual {}", resid / scale);
        }
    }
}

#[test]
fn pi_training_trace_is_monotone_and_wolfe() {
    let data = lorenz_data(500, 100);
    let net: Esn = generate_weights(&EsnHyperParams::lorenz(40, 2)).unwrap();
    let opt = LbfgsConfig { max_iterations: 40, ..LbfgsConfig::default() };
    let out = train_pi_esn(&net, &data, 1e-4, &Physics::new(Model::lorenz(), 0.01, 100), &opt).unwrap();
    let its = &out.trace.iterations;
    assert!(its.len() > 2);
    for pair in its.windows(2) {
        assert!(pair[1].objective <= pair[0].objective);
        assert!(pair[1].wolfe.unwrap().satisfies(pair[1].step_len, opt.c1, opt.c2));
    }
    assert_eq!(out.history.len(), its.len());
    for (h, it) in out.history.iter().zip(its) {
        assert_eq!(h.e_total, it.objective);
    }
}

#[test]
fn single_collocation_point_run_descends() {
    let data = lorenz_data(300, 50);
    let net: Esn = generate_weights(&EsnHyperParams::lorenz(20, 4)).unwrap();
    let out = train_pi_esn(&net, &data, 1e-4, &Physics::new(Model::lorenz(), 0.01, 1), &LbfgsConfig::default()).unwrap();
    assert!(out.history.last().unwrap().e_total <= out.history[0].e_total);
    assert!(!out.diverged);
}

#[test]
fn saved_pi_esn_forecasts_identically() {
    let data = lorenz_data(400, 50);
    let hp = EsnHyperParams::lorenz(30, 9);
    let net: Esn = generate_weights(&hp).unwrap();
    let opt = LbfgsConfig { max_iterations: 10, ..LbfgsConfig::default() };
    let trained = train_pi_esn(&net, &data, 1e-4, &Physics::new(Model::lorenz(), 0.01, 50), &opt).unwrap().weights;
    let file = ModelFile::from_esn(Variant::PiEsn, Model::lorenz(), hp, 50, 0.01, &trained);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    file.save(&path).unwrap();
    let Network::Esn(loaded) = ModelFile::load(&path).unwrap().network().unwrap() else { panic!("expected a plain ESN") };
    let start = trained.drive(&trained.zero_state(), data.inputs.states());
    let a = run_autonomous(&trained, &start, 500, DIVERGENCE_BOUND);
    let b = run_autonomous(&loaded, &loaded.drive(&loaded.zero_state(), data.inputs.states()), 500, DIVERGENCE_BOUND);
    assert_eq!(a, b);
}

#[test]
fn single_precision_pipeline_tracks_double() {
    let m32 = Model32::lorenz();
    let u0 = spun_up_state(&m32, 0.01, 1000, Scheme::Euler).unwrap();
    let traj = generate_trajectory(&m32, &u0, 0.01, 800, Scheme::Euler, 1e6).unwrap();
    let net32: Esn32 = generate_weights(&EsnHyperParams::lorenz(50, 1)).unwrap();
    // single precision needs a stronger penalty for the Cholesky factor to exist
    let gamma = 1e-2;
    let (trained32, loss32) = train_esn(&net32, &pi_esn::training::TrainingSet::new(traj, 100).unwrap(), gamma).unwrap();

    let data = lorenz_data(800, 100);
    let net: Esn = generate_weights(&EsnHyperParams::lorenz(50, 1)).unwrap();
    let (_, loss) = train_esn(&net, &data, gamma as f64).unwrap();
    assert!(trained32.w_out.as_slice().iter().all(|v| v.is_finite()));
    assert_relative_eq!(loss32.e_data, loss.e_data, max_relative = 0.25);
}

#[test]
fn ensemble_is_reproducible_and_self_consistent() {
    let data = lorenz_data(1000, 100);
    let net: Esn = generate_weights(&EsnHyperParams::lorenz(50, 3)).unwrap();
    let (trained, _) = train_esn(&net, &data, 1e-4).unwrap();
    let cfg = EnsembleConfig { prediction_lt: 5.0, ..EnsembleConfig::for_model(&Model::lorenz(), 6) };
    let start = data.inputs.row(data.inputs.len() - 1);
    let a = run_ensemble(&trained, &Model::lorenz(), start, 0.01, &cfg, 11).unwrap();
    let b = run_ensemble(&trained, &Model::lorenz(), start, 0.01, &cfg, 11).unwrap();
    assert_eq!(a, b);
    let again = HorizonEnsemble::from_members(a.per_ic.clone()).unwrap();
    assert_eq!(again.mean_lt.to_bits(), a.mean_lt.to_bits());
    assert_eq!(again.std_lt.to_bits(), a.std_lt.to_bits());
    assert_eq!(a.count, 6);
    let single = run_ensemble(&trained, &Model::lorenz(), start, 0.01, &EnsembleConfig { n_ics: 1, ..cfg }, 11).unwrap();
    assert_eq!(single.mean_lt, single.per_ic[0].horizon_lt);
}

fn series(values: &[f64], dim: usize) -> Matrix {
    Matrix::from_row_major(values.len() / dim, dim, values.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn normalized_error_is_scale_invariant(
        raw in proptest::collection::vec(-50.0..50.0_f64, 60),
        noise in proptest::collection::vec(-1.0..1.0_f64, 60),
        c in 0.01..100.0_f64,
    ) {
        let truth = series(&raw, 3);
        let pred = series(&raw.iter().zip(&noise).map(|(a, b)| a + b).collect::<Vec<_>>(), 3);
        let msn = Series::new(0.01, truth.clone()).unwrap().mean_square_norm();
        prop_assume!(msn > 1e-6);
        let e = normalized_error(&pred, &truth, msn).unwrap();
        let mut tc = truth.clone();
        tc.scale(c);
        let mut pc = pred.clone();
        pc.scale(c);
        let ec = normalized_error(&pc, &tc, msn * c * c).unwrap();
        for (a, b) in e.iter().zip(&ec) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn horizon_grows_with_threshold_and_window(
        errors in proptest::collection::vec(0.0..1.0_f64, 1..300),
        lo in 0.05..0.5_f64,
        extra in 0.0..0.5_f64,
        cut in 0usize..300,
    ) {
        let a = predictability_horizon(&errors, 0.01, 0.934, lo);
        let b = predictability_horizon(&errors, 0.01, 0.934, lo + extra);
        prop_assert!(b.horizon_lt >= a.horizon_lt);
        let short = &errors[..cut.min(errors.len())];
        let s = predictability_horizon(short, 0.01, 0.934, lo);
        prop_assert!(a.horizon_lt >= s.horizon_lt);
        prop_assert!(a.horizon_lt >= 0.0);
    }

    #[test]
    fn ensemble_statistics_recompute_exactly(horizons in proptest::collection::vec(0.0..20.0_f64, 1..40)) {
        let members: Vec<HorizonResult> = horizons
            .iter()
            .map(|&h| HorizonResult { horizon_lt: h, diverged: false, censored: h > 15.0, bounded_lt: 20.0, error_series: vec![] })
            .collect();
        let ens = HorizonEnsemble::from_members(members).unwrap();
        let n = horizons.len() as f64;
        let mean = horizons.iter().sum::<f64>() / n;
        let std = (horizons.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert_eq!(ens.mean_lt, mean);
        prop_assert_eq!(ens.std_lt, std);
        prop_assert_eq!(ens.n_censored, horizons.iter().filter(|&&h| h > 15.0).count());
    }
}
