use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pi_esn::persist::Variant;
use pi_esn_harness::commands::{self, DATA_DIR};
use pi_esn_harness::config::{ExperimentConfig, SystemName};
use pi_esn_harness::manifest::{output_root, OUT_ENV};

#[derive(Parser)]
#[command(name = "pi-esn", version, about = "Physics-informed echo state network experiments")]
struct Cli {
    /// TOML experiment configuration; omitted keys take the system defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// System to use when no config file is given.
    #[arg(long, global = true)]
    system: Option<SystemName>,
    /// Master seed; replaces the config's `seeds` list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (default: config `output`, then $PI_ESN_OUT, then ./runs).
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs, or restart a sweep.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for ensembles and sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the system and write the training and truth series.
    Generate {
        /// Measurement noise as a signal-to-noise ratio in dB.
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Train one network on a generated dataset.
    Train {
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        n_x: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Dataset directory (default: <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Forecast autonomously from the end of the training window.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: usize,
    },
    /// Predictability horizons over an ensemble of initial conditions.
    Ensemble {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        members: Option<usize>,
    },
    /// Train and evaluate every variant over the configured reservoir sizes and seeds.
    Sweep,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: pi_esn::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::defaults(cli.system.unwrap_or(SystemName::Lorenz)),
    };
    if let Some(s) = cli.system {
        if s != cfg.system {
            anyhow::bail!("--system {s:?} contradicts the config's system {:?}", cfg.system);
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring worker threads")?;
    }
    let mut cfg = load_config(&cli)?;
    let root = output_root(cli.out.as_deref(), &cfg);
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| root.join(DATA_DIR));
    match &cli.command {
        Command::Generate { snr_db } => {
            if snr_db.is_some() {
                cfg.snr_db = *snr_db;
            }
            cfg.validate()?;
            let dir = commands::cmd_generate(&cfg, &root, cli.force)?;
            println!("wrote {}", dir.display());
        }
        Command::Train { variant, n_x, epsilon, data } => {
            cfg.variant = variant.unwrap_or(cfg.variant);
            cfg.n_x = n_x.unwrap_or(cfg.n_x);
            cfg.hybrid_epsilon = epsilon.unwrap_or(cfg.hybrid_epsilon);
            cfg.validate()?;
            let out = commands::cmd_train(&cfg, &root, &data_dir(data), cli.force)?;
            println!("wrote {}", out.model_path.display());
            if let Some(loss) = out.trained.history.last() {
                println!("E_d {:e}  E_p {:e}  E_tot {:e}", loss.e_data, loss.e_physics, loss.e_total);
            }
            if out.trained.line_search_failed {
                eprintln!("error: line search failed; the last accepted iterate was saved");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Predict { model, data, steps } => {
            let fc = commands::cmd_predict(&cfg, &root, model, &data_dir(data), *steps, cli.force)?;
            match fc.diverged_at {
                Some(k) => println!("diverged at step {k}; horizon {:.3} LT", fc.horizon_lt),
                None => println!("horizon {:.3} LT", fc.horizon_lt),
            }
        }
        Command::Ensemble { model, data, members } => {
            cfg.ensemble_size = members.unwrap_or(cfg.ensemble_size);
            cfg.validate()?;
            let ens = commands::cmd_ensemble(&cfg, &root, model, &data_dir(data), cli.force)?;
            println!(
                "mean {:.3} LT  std {:.3} LT  censored {}/{}  diverged {}",
                ens.mean_lt,
                ens.std_lt,
                ens.n_censored,
                ens.count,
                ens.n_diverged()
            );
        }
        Command::Sweep => {
            let report = commands::cmd_sweep(&cfg, &root, cli.force)?;
            println!("ran {} cells, skipped {} completed", report.ran, report.skipped);
            for (key, msg) in &report.failed {
                eprintln!("cell {key} failed: {msg}");
            }
            if !report.failed.is_empty() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
