//! Seeded ensembles and their confidence bands.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_model, write_model, Architecture, LossRecord, Regressor, TrainConfig};
use crate::closure::{FeatureSet, TrainingSet};
use crate::error::{Error, Result};
use crate::solver::{Closure, ClosureInput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    /// `μ ± 3σ`
    #[default]
    Conventional,
    /// `(μ ± 3σ)/N`, the formula taken literally.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    #[serde(with = "crate::metrics::lossless_f64::vec")]
    pub mean: Vec<f64>,
    #[serde(with = "crate::metrics::lossless_f64::vec")]
    pub lower: Vec<f64>,
    #[serde(with = "crate::metrics::lossless_f64::vec")]
    pub upper: Vec<f64>,
}

/// Componentwise band over member values, population standard deviation.
pub fn band(members: &[Vec<f64>], kind: BandKind) -> Result<Band> {
    let n = members.len();
    if n == 0 {
        return Err(Error::Data("band of an empty ensemble".into()));
    }
    let d = members[0].len();
    if members.iter().any(|m| m.len() != d) {
        return Err(Error::dim("ensemble members disagree in length"));
    }
    let nf = n as f64;
    let mut out = Band {
        mean: vec![0.0; d],
        lower: vec![0.0; d],
        upper: vec![0.0; d],
    };
    for i in 0..d {
        let mu = members.iter().map(|m| m[i]).sum::<f64>() / nf;
        let sigma = (members.iter().map(|m| (m[i] - mu).powi(2)).sum::<f64>() / nf).sqrt();
        let (lo, hi) = (mu - 3.0 * sigma, mu + 3.0 * sigma);
        out.mean[i] = mu;
        match kind {
            BandKind::Conventional => {
                out.lower[i] = lo;
                out.upper[i] = hi;
            }
            BandKind::Literal => {
                out.lower[i] = lo / nf;
                out.upper[i] = hi / nf;
            }
        }
    }
    Ok(out)
}

/// Members share architecture and training data; member `i` uses seed
/// `base_seed + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Regressor>,
}

impl Ensemble {
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        ts: &TrainingSet,
        architecture: &Architecture,
        features: FeatureSet,
        r: usize,
        q: usize,
        cfg: &TrainConfig,
        n_networks: usize,
        base_seed: u64,
    ) -> Result<(Self, Vec<Vec<LossRecord>>)> {
        if n_networks == 0 {
            return Err(Error::config("an ensemble needs at least one network"));
        }
        let fitted = (0..n_networks)
            .into_par_iter()
            .map(|i| Regressor::fit(ts, architecture.clone(), features, r, q, cfg, base_seed + i as u64))
            .collect::<Result<Vec<_>>>()?;
        let (members, histories) = fitted.into_iter().unzip();
        Ok((Self { members }, histories))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn predict(&self, input: &ClosureInput<'_>, kind: BandKind) -> Result<Band> {
        let outs = self
            .members
            .iter()
            .map(|m| m.evaluate(input))
            .collect::<Result<Vec<_>>>()?;
        band(&outs, kind)
    }
}

/// The ensemble mean.
impl Closure for Ensemble {
    fn output_dim(&self) -> usize {
        self.members.first().map_or(0, |m| m.output_dim())
    }

    fn evaluate(&self, input: &ClosureInput<'_>) -> Result<Vec<f64>> {
        Ok(self.predict(input, BandKind::Conventional)?.mean)
    }
}

/// `member_XX.model` files in `dir`.
pub fn write_ensemble(ens: &Ensemble, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in ens.members.iter().enumerate() {
        write_model(m, dir.join(format!("member_{i:02}.model")))?;
    }
    Ok(())
}

pub fn read_ensemble(dir: impl AsRef<Path>) -> Result<Ensemble> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "model"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no model files in {}", dir.display())));
    }
    Ok(Ensemble {
        members: paths.iter().map(read_model).collect::<Result<_>>()?,
    })
}
