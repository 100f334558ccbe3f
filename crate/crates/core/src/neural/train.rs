//! Full-batch Adam.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::solver::csv_error;

/// Multiply the learning rate by `gamma` every `every` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub gamma: f64,
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// ω in `MSE + ω‖θ‖²`; biases are not penalised.
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_step: Option<LrStep>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-6,
            epochs: 10000,
            lr_step: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if let Some(s) = &self.lr_step {
            if s.every == 0 || !(s.gamma > 0.0) {
                return Err(Error::config("learning-rate step needs every ≥ 1 and gamma > 0"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_step {
            Some(s) => self.lr * s.gamma.powi((epoch / s.every) as i32),
            None => self.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
}

/// Trains in place; one loss record per epoch (loss before the update).
pub fn train(net: &mut Network, x: &DMatrix<f64>, t: &DMatrix<f64>, cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let n = net.n_params();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut b1t, mut b2t) = (1.0, 1.0);
    for epoch in 0..cfg.epochs {
        let (loss, mse, g) = net.loss_grad(x, t, cfg.weight_decay)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            let param_norm = net.params().iter().map(|p| p * p).sum::<f64>().sqrt();
            return Err(Error::TrainingDiverged { epoch, param_norm });
        }
        let lr = cfg.lr_at(epoch);
        history.push(LossRecord { epoch, lr, loss, mse });
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for (((p, gi), mi), vi) in net.params_mut().iter_mut().zip(&g).zip(&mut m).zip(&mut v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / (1.0 - b1t);
            let vh = *vi / (1.0 - b2t);
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(history)
}

pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for rec in history {
        w.serialize(rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
