//! Experiment configuration: per-system defaults overlaid with a TOML file and
//! command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use pi_esn::dynamics::{PerturbedParam, SystemModel};
use pi_esn::evaluation::{EnsembleConfig, DEFAULT_SYNC_STEPS};
use pi_esn::optimizer::LbfgsConfig;
use pi_esn::persist::Variant;
use pi_esn::reservoir::{EsnHyperParams, DEFAULT_WASHOUT};
use pi_esn::training::{GradientMode, PhysicsConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Lorenz,
    Cdv,
}

impl SystemName {
    pub fn model(self) -> SystemModel<f64> {
        match self {
            SystemName::Lorenz => SystemModel::lorenz(),
            SystemName::Cdv => SystemModel::cdv(),
        }
    }
}

impl std::str::FromStr for SystemName {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lorenz" => Ok(SystemName::Lorenz),
            "cdv" => Ok(SystemName::Cdv),
            _ => bail!("unknown system {s:?} (expected lorenz or cdv)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemName,
    pub variant: Variant,
    pub hybrid_perturbed_param: PerturbedParam,
    pub hybrid_epsilon: f64,
    pub n_x: usize,
    /// Training samples N_t.
    pub n_train: usize,
    /// Samples generated after the training window for prediction and evaluation.
    pub n_continuation: usize,
    pub dt: f64,
    pub n_p: usize,
    pub washout: usize,
    /// Euler steps from the model's spin-up start before the training window.
    pub spinup_steps: usize,
    pub snr_db: Option<f64>,
    /// Master seeds; each expands into weight, noise and ensemble seeds.
    pub seeds: Vec<u64>,
    pub ensemble_size: usize,
    pub prediction_lt: f64,
    pub sync_steps: usize,
    /// Reservoir sizes visited by `sweep`.
    pub sweep_n_x: Vec<usize>,
    /// Variants trained in every sweep cell; hybrids use every `sweep_hybrid_epsilons` value.
    pub sweep_variants: Vec<Variant>,
    pub sweep_hybrid_epsilons: Vec<f64>,
    pub physics_weight: f64,
    pub gradient: GradientMode,
    pub max_iterations: usize,
    pub memory_pairs: usize,
    pub grad_tolerance: f64,
    pub output: Option<std::path::PathBuf>,
}

impl ExperimentConfig {
    pub fn defaults(system: SystemName) -> Self {
        let lorenz = system == SystemName::Lorenz;
        Self {
            system,
            variant: Variant::PiEsn,
            hybrid_perturbed_param: if lorenz { PerturbedParam::Rho } else { PerturbedParam::ChannelB },
            hybrid_epsilon: 0.05,
            n_x: if lorenz { 200 } else { 600 },
            n_train: if lorenz { 1000 } else { 9000 },
            n_continuation: if lorenz { 3000 } else { 4000 },
            dt: if lorenz { 0.01 } else { 0.1 },
            n_p: if lorenz { 1000 } else { 3000 },
            washout: DEFAULT_WASHOUT,
            spinup_steps: if lorenz { 1000 } else { 10_000 },
            snr_db: None,
            seeds: vec![0],
            ensemble_size: 100,
            prediction_lt: if lorenz { 20.0 } else { 12.0 },
            sync_steps: DEFAULT_SYNC_STEPS,
            sweep_n_x: vec![50, 100, 200, 400, 600, 1000],
            sweep_variants: vec![Variant::Esn, Variant::PiEsn, Variant::Hybrid],
            sweep_hybrid_epsilons: vec![0.05, 1.0],
            physics_weight: 1.0,
            gradient: GradientMode::Recurrent,
            max_iterations: 500,
            memory_pairs: 10,
            grad_tolerance: 1e-8,
            output: None,
        }
    }

    /// Parses a TOML document; keys it omits take the defaults of its `system`
    /// (Lorenz if absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let system = match user.get("system") {
            Some(v) => v.as_str().context("`system` must be a string")?.parse()?,
            None => SystemName::Lorenz,
        };
        let mut merged = toml::Table::try_from(Self::defaults(system))?;
        merged.extend(user);
        let cfg: Self = merged.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("`seeds` must list at least one master seed");
        }
        if self.n_train <= self.washout + 1 {
            bail!("n_train {} leaves no samples after washout {}", self.n_train, self.washout);
        }
        if self.n_p == 0 {
            bail!("n_p must be at least 1");
        }
        if self.ensemble_size == 0 {
            bail!("ensemble_size must be at least 1");
        }
        if !(self.dt > 0.0) {
            bail!("dt must be positive");
        }
        if self.n_continuation < 2 {
            bail!("n_continuation must be at least 2");
        }
        self.hyperparams(self.n_x, 0).validate()?;
        self.lbfgs().validate()?;
        Ok(())
    }

    pub fn model(&self) -> SystemModel<f64> {
        self.system.model()
    }

    pub fn master_seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn hyperparams(&self, n_x: usize, seed: u64) -> EsnHyperParams {
        EsnHyperParams::for_system(&self.model(), n_x, seed)
    }

    pub fn physics(&self) -> PhysicsConfig<f64> {
        PhysicsConfig {
            weight: self.physics_weight,
            gradient: self.gradient,
            ..PhysicsConfig::new(self.model(), self.dt, self.n_p)
        }
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iterations: self.max_iterations,
            memory_pairs: self.memory_pairs,
            grad_tolerance: self.grad_tolerance,
            ..LbfgsConfig::default()
        }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            n_ics: self.ensemble_size,
            prediction_lt: self.prediction_lt,
            sync_steps: self.sync_steps,
            ..EnsembleConfig::for_model(&self.model(), self.ensemble_size)
        }
    }

    /// Label used in file names and the summary `model` column.
    pub fn model_label(&self, variant: Variant, epsilon: f64) -> String {
        match variant {
            Variant::Hybrid => format!("hybrid_eps{epsilon}"),
            v => v.name().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_system_defaults() {
        let l = ExperimentConfig::defaults(SystemName::Lorenz);
        assert_eq!((l.n_train, l.dt, l.n_p, l.ensemble_size), (1000, 0.01, 1000, 100));
        let c = ExperimentConfig::defaults(SystemName::Cdv);
        assert_eq!((c.n_train, c.dt, c.n_p, c.ensemble_size), (9000, 0.1, 3000, 100));
        assert_eq!(c.hybrid_perturbed_param, PerturbedParam::ChannelB);
    }

    #[test]
    fn toml_overrides_system_defaults() {
        let cfg = ExperimentConfig::from_toml("system = \"cdv\"\nn_x = 50\nsnr_db = 20.0\nseeds = [3, 4]\n").unwrap();
        assert_eq!(cfg.system, SystemName::Cdv);
        assert_eq!(cfg.n_x, 50);
        assert_eq!(cfg.dt, 0.1);
        assert_eq!(cfg.snr_db, Some(20.0));
        assert_eq!(cfg.seeds, vec![3, 4]);
        let empty = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(empty, ExperimentConfig::defaults(SystemName::Lorenz));
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml("n_xx = 3").is_err());
        assert!(ExperimentConfig::from_toml("system = \"rossler\"").is_err());
        assert!(ExperimentConfig::from_toml("n_p = 0").is_err());
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("variant = \"pi_esn\"\nhybrid_perturbed_param = \"C\"").is_ok());
    }
}
