//! The CLI subcommands as library functions. Each pure step (`build_dataset`,
//! `train_variant`, `ensemble_for`, `sweep_cell`) is separate from the
//! `cmd_*` wrapper that reads and writes files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use pi_esn::csvio::{fmt_f64, write_row};
use pi_esn::dynamics::{add_measurement_noise, generate_trajectory, spun_up_state, Scheme, Trajectory};
use pi_esn::evaluation::{normalized_error, plan_reference, predictability_horizon, run_ensemble_on, HorizonEnsemble};
use pi_esn::linalg::DenseMatrix;
use pi_esn::optimizer::OptimizationTrace;
use pi_esn::persist::{ModelFile, Network, Variant};
use pi_esn::reservoir::{generate_hybrid_weights, generate_weights, run_autonomous, Reservoir};
use pi_esn::training::{train_esn, train_hybrid, train_pi_esn, write_loss_history, LossReport, TrainingSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SystemName};
use crate::manifest::{config_hash, Manifest, Seeds};

pub const DATA_DIR: &str = "data";
pub const MODELS_DIR: &str = "models";
pub const SWEEP_DIR: &str = "sweep";
pub const MANIFEST: &str = "manifest.json";
pub const TRUTH_CSV: &str = "truth.csv";
pub const TRAIN_CSV: &str = "train.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_HEADER: [&str; 6] = ["model", "n_x", "noise_db", "mean_lt", "std_lt", "n_censored"];

fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> pi_esn::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

/// Clean truth (training window plus continuation) and the series used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: SystemName,
    pub n_train: usize,
    pub snr_db: Option<f64>,
    pub truth: Trajectory<f64>,
    /// First `n_train` truth samples, with measurement noise when `snr_db` is set.
    pub train: Trajectory<f64>,
}

impl Dataset {
    pub fn dt(&self) -> f64 {
        self.truth.dt()
    }

    pub fn training_set(&self, washout: usize) -> Result<TrainingSet<f64>> {
        Ok(TrainingSet::new(self.train.clone(), washout)?)
    }

    /// Clean state at the last training sample.
    pub fn end_of_training(&self) -> &[f64] {
        self.truth.row(self.n_train - 1)
    }

    /// Truth samples after the training window.
    pub fn continuation(&self) -> DenseMatrix<f64> {
        self.truth.states().slice_rows(self.n_train, self.truth.len())
    }
}

pub fn build_dataset(cfg: &ExperimentConfig, seeds: &Seeds) -> Result<Dataset> {
    let model = cfg.model();
    let u0 = spun_up_state(&model, cfg.dt, cfg.spinup_steps, Scheme::Euler)?;
    let n = cfg.n_train + cfg.n_continuation;
    let truth = generate_trajectory(&model, &u0, cfg.dt, n, Scheme::Euler, pi_esn::dynamics::DIVERGENCE_BOUND)?;
    let clean = truth.slice(0, cfg.n_train)?;
    let train = match cfg.snr_db {
        Some(db) => add_measurement_noise(&clean, db, seeds.noise)?,
        None => clean,
    };
    Ok(Dataset { system: cfg.system, n_train: cfg.n_train, snr_db: cfg.snr_db, truth, train })
}

/// Writes `truth.csv`, `train.csv` and a manifest into `<root>/data`.
pub fn cmd_generate(cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<PathBuf> {
    let dir = root.join(DATA_DIR);
    for name in [TRUTH_CSV, TRAIN_CSV, MANIFEST] {
        check_writable(&dir.join(name), force)?;
    }
    let seeds = Seeds::expand(cfg.master_seed());
    let data = build_dataset(cfg, &seeds)?;
    write_with(&dir.join(TRUTH_CSV), |w| data.truth.write_csv(w))?;
    write_with(&dir.join(TRAIN_CSV), |w| data.train.write_csv(w))?;
    let mut m = Manifest::new("generate", cfg, seeds);
    m.detail("system", cfg.system);
    m.detail("dt", cfg.dt);
    m.detail("n_train", cfg.n_train);
    m.detail("n_continuation", cfg.n_continuation);
    m.detail("spinup_steps", cfg.spinup_steps);
    m.detail("snr_db", cfg.snr_db);
    m.detail("scheme", Scheme::Euler);
    m.record(&dir, &dir.join(TRUTH_CSV))?;
    m.record(&dir, &dir.join(TRAIN_CSV))?;
    m.save(&dir.join(MANIFEST))?;
    Ok(dir)
}

/// Reads a dataset directory written by [`cmd_generate`] and checks it against `cfg`.
pub fn load_dataset(dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let m = Manifest::load(&dir.join(MANIFEST))?;
    let gen = &m.config;
    if gen.system != cfg.system || gen.dt != cfg.dt {
        bail!(
            "dataset in {} is {:?} with dt {}, config asks for {:?} with dt {}",
            dir.display(),
            gen.system,
            gen.dt,
            cfg.system,
            cfg.dt
        );
    }
    let read = |name: &str| -> Result<Trajectory<f64>> {
        let path = dir.join(name);
        let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        Trajectory::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
    };
    // the time column only approximates dt; the manifest value is exact
    let with_dt = |t: Trajectory<f64>| Trajectory::new(gen.dt, t.into_states());
    let truth = with_dt(read(TRUTH_CSV)?)?;
    let train = with_dt(read(TRAIN_CSV)?)?;
    if train.len() != gen.n_train || truth.len() != gen.n_train + gen.n_continuation {
        bail!("dataset files in {} do not match their manifest", dir.display());
    }
    Ok(Dataset { system: gen.system, n_train: gen.n_train, snr_db: gen.snr_db, truth, train })
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub label: String,
    pub file: ModelFile,
    pub history: Vec<LossReport>,
    pub trace: Option<OptimizationTrace>,
    pub line_search_failed: bool,
}

/// Trains one network; `epsilon` only matters for hybrids.
pub fn train_variant(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variant: Variant,
    epsilon: f64,
    n_x: usize,
    seeds: &Seeds,
) -> Result<Trained> {
    let model = cfg.model();
    let hp = cfg.hyperparams(n_x, seeds.weights);
    let set = data.training_set(cfg.washout)?;
    let label = cfg.model_label(variant, epsilon);
    let mut trace = None;
    let mut line_search_failed = false;
    let (mut file, history) = match variant {
        Variant::Esn => {
            let (net, loss) = train_esn(&generate_weights(&hp)?, &set, hp.tikhonov_gamma)?;
            (ModelFile::from_esn(variant, model, hp, cfg.washout, cfg.dt, &net), vec![loss])
        }
        Variant::PiEsn => {
            let out = train_pi_esn(&generate_weights(&hp)?, &set, hp.tikhonov_gamma, &cfg.physics(), &cfg.lbfgs())?;
            line_search_failed = out.line_search_failed();
            let mut file = ModelFile::from_esn(variant, model, hp, cfg.washout, cfg.dt, &out.weights);
            file.provenance.insert("termination".into(), format!("{:?}", out.trace.termination));
            file.provenance.insert("iterations".into(), (out.trace.iterations.len() - 1).to_string());
            file.provenance.insert("collocation_diverged".into(), out.diverged.to_string());
            trace = Some(out.trace);
            (file, out.history)
        }
        Variant::Hybrid => {
            let param = cfg.hybrid_perturbed_param;
            let approx = model.perturbed(param, epsilon)?;
            let net = generate_hybrid_weights(&hp, approx, epsilon, cfg.dt)?;
            let (net, loss) = train_hybrid(&net, &set, hp.tikhonov_gamma)?;
            (ModelFile::from_hybrid(model, hp, cfg.washout, param, &net), vec![loss])
        }
    };
    file.final_loss = history.last().copied();
    file.provenance.insert("master_seed".into(), seeds.master.to_string());
    file.provenance.insert("n_train".into(), data.n_train.to_string());
    file.provenance.insert("snr_db".into(), fmt_noise(data.snr_db));
    Ok(Trained { label, file, history, trace, line_search_failed })
}

pub fn fmt_noise(snr_db: Option<f64>) -> String {
    snr_db.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn model_stem(label: &str, n_x: usize, master: u64) -> String {
    format!("{label}_nx{n_x}_seed{master}")
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model_path: PathBuf,
    pub loss_path: PathBuf,
    pub trained: Trained,
}

/// Trains `cfg.variant` at `cfg.n_x` and writes the model, loss history,
/// optimizer trace and manifest under `<root>/models`.
pub fn cmd_train(cfg: &ExperimentConfig, root: &Path, data_dir: &Path, force: bool) -> Result<TrainOutput> {
    let seeds = Seeds::expand(cfg.master_seed());
    let data = load_dataset(data_dir, cfg)?;
    let stem = model_stem(&cfg.model_label(cfg.variant, cfg.hybrid_epsilon), cfg.n_x, seeds.master);
    let dir = root.join(MODELS_DIR);
    let model_path = dir.join(format!("{stem}.json"));
    let loss_path = dir.join(format!("{stem}_loss.csv"));
    let trace_path = dir.join(format!("{stem}_trace.csv"));
    let manifest_path = dir.join(format!("{stem}_manifest.json"));
    for p in [&model_path, &loss_path, &manifest_path] {
        check_writable(p, force)?;
    }
    let trained = train_variant(cfg, &data, cfg.variant, cfg.hybrid_epsilon, cfg.n_x, &seeds)?;
    std::fs::create_dir_all(&dir)?;
    trained.file.save(&model_path)?;
    write_with(&loss_path, |w| write_loss_history(&trained.history, w))?;
    let mut m = Manifest::new("train", cfg, seeds);
    m.detail("dataset", data_dir);
    m.detail("variant", cfg.variant);
    m.detail("n_x", cfg.n_x);
    if cfg.variant == Variant::Hybrid {
        let approx = trained.file.hybrid.as_ref().expect("hybrid section").approx_model;
        m.detail("hybrid_perturbed_param", cfg.hybrid_perturbed_param);
        m.detail("hybrid_epsilon", cfg.hybrid_epsilon);
        m.detail("approx_model", approx);
    }
    if let Some(trace) = &trained.trace {
        write_with(&trace_path, |w| trace.write_csv(w))?;
        m.record(&dir, &trace_path)?;
        m.detail("termination", trace.termination);
    }
    m.detail("final_loss", trained.history.last());
    m.record(&dir, &model_path)?;
    m.record(&dir, &loss_path)?;
    m.save(&manifest_path)?;
    Ok(TrainOutput { model_path, loss_path, trained })
}

fn horizons<R: Reservoir<f64> + Sync>(
    net: &R,
    cfg: &ExperimentConfig,
    data: &Dataset,
    seeds: &Seeds,
) -> Result<HorizonEnsemble> {
    let model = cfg.model();
    let plan = plan_reference(&model, data.end_of_training(), cfg.dt, &cfg.ensemble(), seeds.ensemble)?;
    Ok(run_ensemble_on(net, &plan, model.lambda_max, &cfg.ensemble())?)
}

/// Ensemble over initial conditions along a reference run that starts at the
/// end of the (clean) training window.
pub fn ensemble_for(file: &ModelFile, cfg: &ExperimentConfig, data: &Dataset, seeds: &Seeds) -> Result<HorizonEnsemble> {
    match file.network()? {
        Network::Esn(net) => horizons(&net, cfg, data, seeds),
        Network::Hybrid(net) => horizons(&net, cfg, data, seeds),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub n_x: usize,
    pub noise_db: String,
    pub mean_lt: f64,
    pub std_lt: f64,
    pub n_censored: usize,
}

impl SummaryRow {
    pub fn new(model: &str, n_x: usize, snr_db: Option<f64>, ens: &HorizonEnsemble) -> Self {
        Self {
            model: model.into(),
            n_x,
            noise_db: fmt_noise(snr_db),
            mean_lt: ens.mean_lt,
            std_lt: ens.std_lt,
            n_censored: ens.n_censored,
        }
    }

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.model.clone(),
            self.n_x.to_string(),
            self.noise_db.clone(),
            fmt_f64(self.mean_lt),
            fmt_f64(self.std_lt),
            self.n_censored.to_string(),
        ]
    }
}

pub fn write_summary_header<W: Write>(w: &mut W) -> pi_esn::Result<()> {
    write_row(w, &SUMMARY_HEADER.map(String::from))
}

fn model_from(path: &Path, cfg: &ExperimentConfig) -> Result<ModelFile> {
    let file = ModelFile::load(path).with_context(|| format!("loading model {}", path.display()))?;
    if file.system.name() != cfg.model().name() || file.dt != cfg.dt {
        bail!("model {} was trained for {} with dt {}", path.display(), file.system.name(), file.dt);
    }
    Ok(file)
}

fn label_of(file: &ModelFile) -> String {
    match &file.hybrid {
        Some(h) => format!("hybrid_eps{}", h.epsilon),
        None => file.variant.name().to_string(),
    }
}

/// Writes `<stem>_ensemble.csv`, a one-row `<stem>_summary.csv` and a manifest next to the model.
pub fn cmd_ensemble(
    cfg: &ExperimentConfig,
    root: &Path,
    model_path: &Path,
    data_dir: &Path,
    force: bool,
) -> Result<HorizonEnsemble> {
    let seeds = Seeds::expand(cfg.master_seed());
    let file = model_from(model_path, cfg)?;
    let data = load_dataset(data_dir, cfg)?;
    let stem = model_path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let dir = root.join("ensembles");
    let ens_path = dir.join(format!("{stem}_ensemble.csv"));
    let sum_path = dir.join(format!("{stem}_summary.csv"));
    let manifest_path = dir.join(format!("{stem}_manifest.json"));
    for p in [&ens_path, &sum_path, &manifest_path] {
        check_writable(p, force)?;
    }
    let ens = ensemble_for(&file, cfg, &data, &seeds)?;
    write_with(&ens_path, |w| ens.write_csv(w))?;
    let row = SummaryRow::new(&label_of(&file), file.hyperparameters.n_x, data.snr_db, &ens);
    write_with(&sum_path, |w| {
        write_summary_header(w)?;
        write_row(w, &row.fields())
    })?;
    let mut m = Manifest::new("ensemble", cfg, seeds);
    m.detail("model", model_path);
    m.detail("dataset", data_dir);
    m.detail("n_diverged", ens.n_diverged());
    m.detail("uncensored_mean_lt", ens.uncensored_mean_lt);
    m.record(&dir, &ens_path)?;
    m.record(&dir, &sum_path)?;
    m.save(&manifest_path)?;
    Ok(ens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Row `k` forecasts the truth `k + 1` steps after the training window ends.
    pub outputs: DenseMatrix<f64>,
    pub errors: Vec<f64>,
    pub diverged_at: Option<usize>,
    pub horizon_lt: f64,
}

fn forecast_with<R: Reservoir<f64>>(net: &R, data: &Dataset, n_steps: usize, lambda_max: f64) -> Result<Forecast> {
    let cont = data.continuation();
    if n_steps > cont.rows() {
        bail!("{n_steps} steps requested but the dataset continues for only {}", cont.rows());
    }
    let n_y = net.output_dim();
    if n_steps == 0 {
        return Ok(Forecast { outputs: DenseMatrix::zeros(0, n_y), errors: vec![], diverged_at: None, horizon_lt: 0.0 });
    }
    let state = net.drive(&net.zero_state(), data.train.states());
    let pred = run_autonomous(net, &state, n_steps, pi_esn::dynamics::DIVERGENCE_BOUND);
    let truth = cont.slice_rows(0, pred.outputs.rows());
    let mut errors = normalized_error(&pred.outputs, &truth, data.truth.mean_square_norm())?;
    if pred.diverged() {
        errors.push(f64::INFINITY);
    }
    let horizon_lt = predictability_horizon(&errors, data.dt(), lambda_max, pi_esn::evaluation::HORIZON_THRESHOLD).horizon_lt;
    errors.truncate(pred.outputs.rows());
    Ok(Forecast { outputs: pred.outputs, errors, diverged_at: pred.diverged_at, horizon_lt })
}

/// Drives the network through the whole training series, then forecasts `n_steps` autonomously.
pub fn forecast(file: &ModelFile, data: &Dataset, n_steps: usize) -> Result<Forecast> {
    let lambda = file.system.lambda_max;
    match file.network()? {
        Network::Esn(net) => forecast_with(&net, data, n_steps, lambda),
        Network::Hybrid(net) => forecast_with(&net, data, n_steps, lambda),
    }
}

/// Writes `<stem>_prediction.csv` (`t,t_lt,u1..`), `<stem>_error.csv`
/// (`t,t_lt,error`) and a manifest with the divergence flag and horizon.
/// Time counts from the end of the training window.
pub fn cmd_predict(
    cfg: &ExperimentConfig,
    root: &Path,
    model_path: &Path,
    data_dir: &Path,
    n_steps: usize,
    force: bool,
) -> Result<Forecast> {
    let file = model_from(model_path, cfg)?;
    let data = load_dataset(data_dir, cfg)?;
    let stem = model_path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let dir = root.join("predictions");
    let pred_path = dir.join(format!("{stem}_prediction.csv"));
    let err_path = dir.join(format!("{stem}_error.csv"));
    let manifest_path = dir.join(format!("{stem}_manifest.json"));
    for p in [&pred_path, &err_path, &manifest_path] {
        check_writable(p, force)?;
    }
    let fc = forecast(&file, &data, n_steps)?;
    let dt = data.dt();
    let lambda = file.system.lambda_max;
    let time = |k: usize| ((k + 1) as f64 * dt, (k + 1) as f64 * dt * lambda);
    write_with(&pred_path, |w| {
        let mut header = vec!["t".to_string(), "t_lt".to_string()];
        header.extend((1..=fc.outputs.cols()).map(|i| format!("u{i}")));
        write_row(w, &header)?;
        for (k, row) in fc.outputs.row_iter().enumerate() {
            let (t, t_lt) = time(k);
            let mut fields = vec![fmt_f64(t), fmt_f64(t_lt)];
            fields.extend(row.iter().map(|&v| fmt_f64(v)));
            write_row(w, &fields)?;
        }
        Ok(())
    })?;
    write_with(&err_path, |w| {
        write_row(w, &["t", "t_lt", "error"].map(String::from))?;
        for (k, &e) in fc.errors.iter().enumerate() {
            let (t, t_lt) = time(k);
            write_row(w, &[fmt_f64(t), fmt_f64(t_lt), fmt_f64(e)])?;
        }
        Ok(())
    })?;
    let mut m = Manifest::new("predict", cfg, Seeds::expand(cfg.master_seed()));
    m.detail("model", model_path);
    m.detail("dataset", data_dir);
    m.detail("n_steps", n_steps);
    m.detail("diverged", fc.diverged_at.is_some());
    m.detail("diverged_at", fc.diverged_at);
    m.detail("horizon_lt", fc.horizon_lt);
    m.record(&dir, &pred_path)?;
    m.record(&dir, &err_path)?;
    m.save(&manifest_path)?;
    Ok(fc)
}

/// One sweep cell: a variant at one reservoir size and master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub epsilon: f64,
    pub n_x: usize,
    pub master_seed: u64,
}

impl Cell {
    pub fn key(&self, cfg: &ExperimentConfig) -> String {
        format!("{}_nx{}_seed{}", cfg.model_label(self.variant, self.epsilon), self.n_x, self.master_seed)
    }
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &master_seed in &cfg.seeds {
        for &n_x in &cfg.sweep_n_x {
            for &variant in &cfg.sweep_variants {
                let eps: &[f64] = if variant == Variant::Hybrid { &cfg.sweep_hybrid_epsilons } else { &[0.0] };
                for &epsilon in eps {
                    cells.push(Cell { variant, epsilon, n_x, master_seed });
                }
            }
        }
    }
    cells
}

/// Train and score one cell; the same composition as `cmd_train` + `cmd_ensemble`.
pub fn sweep_cell(cfg: &ExperimentConfig, data: &Dataset, cell: &Cell) -> Result<(SummaryRow, HorizonEnsemble)> {
    let seeds = Seeds::expand(cell.master_seed);
    let trained = train_variant(cfg, data, cell.variant, cell.epsilon, cell.n_x, &seeds)?;
    let ens = ensemble_for(&trained.file, cfg, data, &seeds)?;
    Ok((SummaryRow::new(&trained.label, cell.n_x, data.snr_db, &ens), ens))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub ran: usize,
    pub skipped: usize,
    /// Cell key → error message.
    pub failed: Vec<(String, String)>,
    pub rows: Vec<SummaryRow>,
}

const COMPLETED: &str = "completed";
const FAILED: &str = "failed";

/// Runs every cell not yet recorded as completed in `<root>/sweep/manifest.json`,
/// appending one summary row per finished cell. Cells run on the current rayon
/// pool; results are written by the calling thread as they arrive.
pub fn cmd_sweep(cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<SweepReport> {
    let dir = root.join(SWEEP_DIR);
    let manifest_path = dir.join(MANIFEST);
    let summary_path = dir.join(SUMMARY_CSV);
    let seeds = Seeds::expand(cfg.master_seed());
    let mut manifest = if manifest_path.exists() && !force {
        let m = Manifest::load(&manifest_path)?;
        if m.config_hash != config_hash(cfg) {
            bail!("{} belongs to a different configuration; pass --force to restart", manifest_path.display());
        }
        m
    } else {
        if summary_path.exists() && !force {
            bail!("{} exists without a sweep manifest; pass --force to restart", summary_path.display());
        }
        std::fs::create_dir_all(&dir)?;
        write_with(&summary_path, write_summary_header)?;
        let mut m = Manifest::new("sweep", cfg, seeds);
        m.detail(COMPLETED, Vec::<String>::new());
        m.save(&manifest_path)?;
        m
    };
    let mut completed: BTreeSet<String> = serde_json::from_value(manifest.details[COMPLETED].clone())?;
    let cells: Vec<Cell> = sweep_cells(cfg).into_iter().filter(|c| !completed.contains(&c.key(cfg))).collect();
    let mut report = SweepReport { skipped: sweep_cells(cfg).len() - cells.len(), ..Default::default() };

    let datasets: Vec<(u64, Dataset)> = cfg
        .seeds
        .iter()
        .filter(|s| cells.iter().any(|c| c.master_seed == **s))
        .map(|&s| Ok((s, build_dataset(cfg, &Seeds::expand(s))?)))
        .collect::<Result<_>>()?;
    let data_for = |seed: u64| &datasets.iter().find(|(s, _)| *s == seed).expect("dataset built").1;

    let mut summary = std::fs::OpenOptions::new().append(true).open(&summary_path)?;
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| -> Result<()> {
        let cells = &cells;
        scope.spawn(move || {
            cells.par_iter().for_each_with(tx, |tx, cell| {
                let result = sweep_cell(cfg, data_for(cell.master_seed), cell);
                let _ = tx.send((cell.clone(), result));
            });
        });
        for (cell, result) in rx {
            let key = cell.key(cfg);
            match result {
                Ok((row, ens)) => {
                    let ens_path = dir.join("cells").join(format!("{key}_ensemble.csv"));
                    write_with(&ens_path, |w| ens.write_csv(w))?;
                    let mut line = Vec::new();
                    write_row(&mut line, &row.fields())?;
                    summary.write_all(&line)?;
                    summary.flush()?;
                    completed.insert(key);
                    manifest.detail(COMPLETED, &completed);
                    manifest.save(&manifest_path)?;
                    report.ran += 1;
                    report.rows.push(row);
                }
                Err(e) => {
                    let msg = format!("{e:#}");
                    let mut failed: std::collections::BTreeMap<String, String> = manifest
                        .details
                        .get(FAILED)
                        .map(|v| serde_json::from_value(v.clone()))
                        .transpose()?
                        .unwrap_or_default();
                    failed.insert(key.clone(), msg.clone());
                    manifest.detail(FAILED, &failed);
                    manifest.save(&manifest_path)?;
                    report.failed.push((key, msg));
                }
            }
        }
        Ok(())
    })?;
    manifest.record(&dir, &summary_path)?;
    manifest.save(&manifest_path)?;
    Ok(report)
}

/// Parses a summary CSV into rows.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let table = pi_esn::csvio::Table::read(BufReader::new(File::open(path)?))?;
    table.expect_header(&SUMMARY_HEADER)?;
    table
        .rows
        .iter()
        .map(|r| {
            Ok(SummaryRow {
                model: r[0].clone(),
                n_x: r[1].parse()?,
                noise_db: r[2].clone(),
                mean_lt: r[3].parse()?,
                std_lt: r[4].parse()?,
                n_censored: r[5].parse()?,
            })
        })
        .collect()
}
