//! Self-describing JSON model files. Floats are written with shortest
//! round-trip formatting and parsed exactly, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{PerturbedParam, SystemModel};
use crate::error::{ensure, Result};
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::reservoir::{EsnHyperParams, EsnWeights, HybridEsnWeights};
use crate::training::LossReport;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Esn,
    PiEsn,
    Hybrid,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Esn => "esn",
            Variant::PiEsn => "pi_esn",
            Variant::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esn" => Ok(Variant::Esn),
            "pi_esn" | "pi-esn" => Ok(Variant::PiEsn),
            "hybrid" => Ok(Variant::Hybrid),
            _ => Err(crate::Error::Parse(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTriplets {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl From<&SparseMatrix<f64>> for SparseTriplets {
    fn from(m: &SparseMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        Self { rows, cols, entries: m.triplets() }
    }
}

impl SparseTriplets {
    pub fn to_matrix(&self) -> Result<SparseMatrix<f64>> {
        SparseMatrix::from_triplets(self.rows, self.cols, &self.entries)
    }
}

/// Approximate model of a hybrid network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridSpec {
    pub perturbed: PerturbedParam,
    pub epsilon: f64,
    pub approx_model: SystemModel<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub variant: Variant,
    pub system: SystemModel<f64>,
    pub hyperparameters: EsnHyperParams,
    pub washout: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<HybridSpec>,
    /// Free-form training record: data source, noise level, optimizer outcome.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<LossReport>,
    pub w_in: DenseMatrix<f64>,
    pub w: SparseTriplets,
    pub w_out: DenseMatrix<f64>,
}

/// A loaded network ready to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Esn(EsnWeights<f64>),
    Hybrid(HybridEsnWeights<f64>),
}

impl ModelFile {
    pub fn from_esn(
        variant: Variant,
        system: SystemModel<f64>,
        hyperparameters: EsnHyperParams,
        washout: usize,
        dt: f64,
        net: &EsnWeights<f64>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            variant,
            system,
            hyperparameters,
            washout,
            dt,
            hybrid: None,
            provenance: BTreeMap::new(),
            final_loss: None,
            w_in: net.w_in.clone(),
            w: (&net.w).into(),
            w_out: net.w_out.clone(),
        }
    }

    pub fn from_hybrid(
        system: SystemModel<f64>,
        hyperparameters: EsnHyperParams,
        washout: usize,
        perturbed: PerturbedParam,
        net: &HybridEsnWeights<f64>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            variant: Variant::Hybrid,
            system,
            hyperparameters,
            washout,
            dt: net.dt,
            hybrid: Some(HybridSpec { perturbed, epsilon: net.epsilon, approx_model: net.approx_model }),
            provenance: BTreeMap::new(),
            final_loss: None,
            w_in: net.w_in.clone(),
            w: (&net.w).into(),
            w_out: net.w_out.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.format_version == FORMAT_VERSION,
            Parse,
            "model format version {} is not supported (expected {FORMAT_VERSION})",
            self.format_version
        );
        let hp = &self.hyperparameters;
        hp.validate()?;
        let extra = if self.variant == Variant::Hybrid { hp.n_y } else { 0 };
        ensure!(
            self.w_in.shape() == (hp.n_x, hp.n_u + extra)
                && (self.w.rows, self.w.cols) == (hp.n_x, hp.n_x)
                && self.w_out.shape() == (hp.n_y, hp.n_x + extra),
            DimensionMismatch,
            "matrix shapes disagree with the hyperparameters"
        );
        ensure!(
            (self.variant == Variant::Hybrid) == self.hybrid.is_some(),
            Parse,
            "hybrid section must be present exactly for hybrid models"
        );
        ensure!(self.dt > 0.0, InvalidParameter, "dt must be positive");
        Ok(())
    }

    pub fn network(&self) -> Result<Network> {
        self.validate()?;
        let w = self.w.to_matrix()?;
        Ok(match &self.hybrid {
            None => Network::Esn(EsnWeights { w_in: self.w_in.clone(), w, w_out: self.w_out.clone() }),
            Some(h) => Network::Hybrid(HybridEsnWeights {
                w_in: self.w_in.clone(),
                w,
                w_out: self.w_out.clone(),
                approx_model: h.approx_model,
                epsilon: h.epsilon,
                dt: self.dt,
            }),
        })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let file: Self = serde_json::from_reader(r)?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::{generate_hybrid_weights, generate_weights};

    #[test]
    fn esn_round_trip_is_bit_exact() {
        let hp = EsnHyperParams::lorenz(40, 7);
        let mut net: EsnWeights<f64> = generate_weights(&hp).unwrap();
        net.w_out = DenseMatrix::from_fn(3, 40, |i, j| ((i * 40 + j) as f64).sin() / 3.0 + 1e-300);
        let mut file = ModelFile::from_esn(Variant::PiEsn, SystemModel::lorenz(), hp, 100, 0.01, &net);
        file.provenance.insert("snr_db".into(), "none".into());
        file.final_loss = Some(LossReport::new(1.0 / 3.0, 0.1));
        let mut buf = Vec::new();
        file.write(&mut buf).unwrap();
        let back = ModelFile::read(&buf[..]).unwrap();
        assert_eq!(back, file);
        let Network::Esn(loaded) = back.network().unwrap() else { panic!("wrong variant") };
        let bits = |m: &DenseMatrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded.w_out), bits(&net.w_out));
        assert_eq!(bits(&loaded.w_in), bits(&net.w_in));
        assert_eq!(loaded.w, net.w);
    }

    #[test]
    fn hybrid_round_trip() {
        let hp = EsnHyperParams::cdv(30, 2);
        let approx = SystemModel::cdv().perturbed(PerturbedParam::ChannelB, 0.05).unwrap();
        let net = generate_hybrid_weights(&hp, approx, 0.05, 0.1).unwrap();
        let file = ModelFile::from_hybrid(SystemModel::cdv(), hp, 100, PerturbedParam::ChannelB, &net);
        let mut buf = Vec::new();
        file.write(&mut buf).unwrap();
        let Network::Hybrid(loaded) = ModelFile::read(&buf[..]).unwrap().network().unwrap() else {
            panic!("wrong variant")
        };
        assert_eq!(loaded, net);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let hp = EsnHyperParams::lorenz(10, 1);
        let net: EsnWeights<f64> = generate_weights(&hp).unwrap();
        let file = ModelFile::from_esn(Variant::Esn, SystemModel::lorenz(), hp, 10, 0.01, &net);
        let mut wrong_version = file.clone();
        wrong_version.format_version = 99;
        assert!(wrong_version.validate().is_err());
        let mut wrong_shape = file.clone();
        wrong_shape.w_out = DenseMatrix::zeros(3, 11);
        assert!(wrong_shape.validate().is_err());
        assert!(ModelFile::read(&b"{\"format_version\": 1}"[..]).is_err());
    }
}
