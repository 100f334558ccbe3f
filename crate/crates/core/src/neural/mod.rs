//! Small dense regressors (MLP, LSTM, SinNN) with hand-written reverse-mode
//! gradients, Adam training and seeded ensembles.

mod ensemble;
mod lstm;
mod mlp;
mod sinnn;
mod train;

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closure::{FeatureSet, Scaler, TrainingSet};
use crate::error::{Error, Result};
use crate::solver::{Closure, ClosureInput};

pub use ensemble::{band, write_ensemble, read_ensemble, Band, BandKind, Ensemble};
pub use lstm::LstmShape;
pub use mlp::MlpShape;
pub use sinnn::SinNNShape;
pub use train::{train, write_loss_csv, LossRecord, LrStep, TrainConfig};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Relu,
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softplus" => Ok(Self::Softplus),
            "relu" => Ok(Self::Relu),
            "leaky_relu" | "leakyrelu" => Ok(Self::LeakyRelu),
            "tanh" => Ok(Self::Tanh),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Network family and hyperparameters, independent of input/output sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    Lstm {
        hidden: Vec<usize>,
        n_seq: usize,
    },
    SinNn {
        nn1_hidden: Vec<usize>,
        nn2_hidden: Vec<usize>,
        activation: Activation,
        n1: f64,
        n2: f64,
        n_harmonics: usize,
    },
}

impl Architecture {
    /// Eddy-viscosity map: three Softplus layers of 20.
    pub fn eddy_viscosity_default() -> Self {
        Architecture::Mlp {
            hidden: vec![20, 20, 20],
            activation: Activation::Softplus,
        }
    }

    /// Correction map: three ReLU layers of 20.
    pub fn correction_default() -> Self {
        Architecture::Mlp {
            hidden: vec![20, 20, 20],
            activation: Activation::Relu,
        }
    }

    pub fn lstm_default(n_seq: usize) -> Self {
        Architecture::Lstm {
            hidden: vec![20, 20],
            n_seq,
        }
    }

    pub fn sinnn_default() -> Self {
        Architecture::SinNn {
            nn1_hidden: vec![5, 5],
            nn2_hidden: vec![20, 20],
            activation: Activation::LeakyRelu,
            n1: 50.0,
            n2: 1000.0,
            n_harmonics: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths_ok = |w: &[usize]| w.iter().all(|&n| n >= 1);
        match self {
            Architecture::Mlp { hidden, .. } if !widths_ok(hidden) => Err(Error::config("MLP widths must be ≥ 1")),
            Architecture::Lstm { hidden, n_seq } => {
                if hidden.is_empty() || !widths_ok(hidden) {
                    Err(Error::config("LSTM needs at least one layer of width ≥ 1"))
                } else if *n_seq == 0 {
                    Err(Error::config("LSTM sequence length must be ≥ 1"))
                } else {
                    Ok(())
                }
            }
            Architecture::SinNn {
                nn1_hidden,
                nn2_hidden,
                n1,
                n2,
                n_harmonics,
                ..
            } => {
                if !widths_ok(nn1_hidden) || !widths_ok(nn2_hidden) {
                    Err(Error::config("SinNN widths must be ≥ 1"))
                } else if *n_harmonics == 0 {
                    Err(Error::config("SinNN needs at least one harmonic"))
                } else if !(*n1 > 0.0 && *n2 > 0.0) {
                    Err(Error::config("SinNN constants N1, N2 must be positive"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn sequence_length(&self) -> usize {
        match self {
            Architecture::Lstm { n_seq, .. } => *n_seq,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Shape {
    Mlp(MlpShape),
    Lstm(LstmShape),
    SinNn(SinNNShape),
}

/// A network with its flat parameter vector. Inputs are columns; an LSTM
/// column is the window of `n_seq` feature rows stacked oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    architecture: Architecture,
    n_in: usize,
    n_out: usize,
    shape: Shape,
    params: Vec<f64>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn new(architecture: Architecture, n_in: usize, n_out: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(architecture, n_in, n_out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &net.shape {
            Shape::Mlp(s) => s.init(&mut rng, &mut net.params),
            Shape::Lstm(s) => s.init(&mut rng, &mut net.params),
            Shape::SinNn(s) => s.init(&mut rng, &mut net.params),
        }
        Ok(net)
    }

    pub fn zeros(architecture: Architecture, n_in: usize, n_out: usize) -> Result<Self> {
        architecture.validate()?;
        if n_in == 0 || n_out == 0 {
            return Err(Error::config("networks need at least one input and one output"));
        }
        let shape = match &architecture {
            Architecture::Mlp { hidden, activation } => {
                let mut w = vec![n_in];
                w.extend(hidden);
                w.push(n_out);
                Shape::Mlp(MlpShape::new(w, *activation))
            }
            Architecture::Lstm { hidden, n_seq } => Shape::Lstm(LstmShape {
                n_feat: n_in,
                hidden: hidden.clone(),
                n_seq: *n_seq,
                n_out,
            }),
            Architecture::SinNn {
                nn1_hidden,
                nn2_hidden,
                activation,
                n1,
                n2,
                n_harmonics,
            } => {
                if n_in < 2 {
                    return Err(Error::config("SinNN needs parameter inputs followed by time"));
                }
                let mut w1 = vec![n_in - 1];
                w1.extend(nn1_hidden);
                w1.push(2);
                let mut w2 = vec![2 * n_harmonics];
                w2.extend(nn2_hidden);
                w2.push(n_out);
                Shape::SinNn(SinNNShape {
                    nn1: MlpShape::new(w1, *activation),
                    nn2: MlpShape::new(w2, *activation),
                    n1: *n1,
                    n2: *n2,
                    n_harmonics: *n_harmonics,
                })
            }
        };
        let n = match &shape {
            Shape::Mlp(s) => s.n_params(),
            Shape::Lstm(s) => s.n_params(),
            Shape::SinNn(s) => s.n_params(),
        };
        Ok(Self {
            architecture,
            n_in,
            n_out,
            shape,
            params: vec![0.0; n],
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    /// Features per sample (per time step for an LSTM).
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Length of one input column.
    pub fn input_len(&self) -> usize {
        self.n_in * self.architecture.sequence_length()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: Vec<f64>) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dim(format!("network has {} parameters, got {}", self.params.len(), p.len())));
        }
        self.params = p;
        Ok(())
    }

    /// `true` for weights (penalised), `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.params.len()];
        match &self.shape {
            Shape::Mlp(s) => s.weight_mask(&mut m),
            Shape::Lstm(s) => s.weight_mask(&mut m),
            Shape::SinNn(s) => s.weight_mask(&mut m),
        }
        m
    }

    pub fn weight_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .zip(self.weight_mask())
            .filter(|(_, w)| *w)
            .map(|(p, _)| p * p)
            .sum()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_len() {
            return Err(Error::dim(format!(
                "network expects inputs of length {}, got {}",
                self.input_len(),
                x.nrows()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(match &self.shape {
            Shape::Mlp(s) => s.forward(&self.params, x).0,
            Shape::Lstm(s) => s.forward(&self.params, x).0,
            Shape::SinNn(s) => s.forward(&self.params, x).0,
        })
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.forward(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(y.iter().copied().collect())
    }

    /// Mean squared error over all samples and outputs and its gradient.
    pub fn mse_grad(&self, x: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if t.nrows() != self.n_out || t.ncols() != x.ncols() {
            return Err(Error::dim(format!(
                "targets are {}×{}, expected {}×{}",
                t.nrows(),
                t.ncols(),
                self.n_out,
                x.ncols()
            )));
        }
        let scale = 1.0 / (t.nrows() * t.ncols()) as f64;
        let mut g = vec![0.0; self.params.len()];
        let p = &self.params;
        let mse = match &self.shape {
            Shape::Mlp(s) => {
                let (y, c) = s.forward(p, x);
                let diff = y - t;
                s.backward(p, &c, &diff * (2.0 * scale), &mut g);
                diff.norm_squared() * scale
            }
            Shape::Lstm(s) => {
                let (y, c) = s.forward(p, x);
                let diff = y - t;
                s.backward(p, &c, &diff * (2.0 * scale), &mut g);
                diff.norm_squared() * scale
            }
            Shape::SinNn(s) => {
                let (y, c) = s.forward(p, x);
                let diff = y - t;
                s.backward(p, &c, &diff * (2.0 * scale), &mut g);
                diff.norm_squared() * scale
            }
        };
        Ok((mse, g))
    }

    /// `MSE + ω‖weights‖²`, returned as `(loss, mse, gradient)`.
    pub fn loss_grad(&self, x: &DMatrix<f64>, t: &DMatrix<f64>, omega: f64) -> Result<(f64, f64, Vec<f64>)> {
        let (mse, mut g) = self.mse_grad(x, t)?;
        let mask = self.weight_mask();
        let mut reg = 0.0;
        for ((gi, p), w) in g.iter_mut().zip(&self.params).zip(mask) {
            if w {
                reg += p * p;
                *gi += 2.0 * omega * p;
            }
        }
        Ok((mse + omega * reg, mse, g))
    }

    pub fn loss(&self, x: &DMatrix<f64>, t: &DMatrix<f64>, omega: f64) -> Result<f64> {
        let y = self.forward(x)?;
        let mse = (y - t).norm_squared() / (t.nrows() * t.ncols()) as f64;
        Ok(mse + omega * self.weight_norm_sq())
    }

    /// NN1 output `(p_1, p_2)` of a SinNN for the parameter features `x`.
    pub fn sinnn_frequencies(&self, x: &[f64]) -> Option<[f64; 2]> {
        match &self.shape {
            Shape::SinNn(s) => {
                let p = s.frequencies(&self.params, &DMatrix::from_column_slice(x.len(), 1, x));
                Some([p[(0, 0)], p[(1, 0)]])
            }
            _ => None,
        }
    }
}

/// Samples as matrix columns.
pub fn columns(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, rows.len(), |i, j| rows[j][i])
}

/// Stacks the last `n_seq` rows ending at each sample of every group,
/// repeating the first row of the group where the window reaches before it.
pub fn windows(rows: &[Vec<f64>], groups: &[std::ops::Range<usize>], n_seq: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for g in groups {
        for k in g.clone() {
            let mut w = Vec::with_capacity(n_seq * rows[k].len());
            for s in 0..n_seq {
                let back = n_seq - 1 - s;
                let idx = if k >= g.start + back { k - back } else { g.start };
                w.extend_from_slice(&rows[idx]);
            }
            out.push(w);
        }
    }
    out
}

/// A trained network with the feature choice and scalers used to train it.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    pub network: Network,
    pub features: FeatureSet,
    pub r: usize,
    pub q: usize,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
    pub train_config: TrainConfig,
    pub seed: u64,
}

impl Regressor {
    /// Standardizes inputs and targets, then trains `architecture` with
    /// Adam from `seed`.
    pub fn fit(
        ts: &TrainingSet,
        architecture: Architecture,
        features: FeatureSet,
        r: usize,
        q: usize,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<(Self, Vec<LossRecord>)> {
        if ts.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if matches!(architecture, Architecture::Lstm { .. }) && features.t {
            return Err(Error::config("sequence models cannot take time as a feature"));
        }
        if matches!(architecture, Architecture::SinNn { .. }) && (!features.t || features.a || features.b) {
            return Err(Error::config("SinNN inputs are the parameter features followed by time only"));
        }
        let input_scaler = Scaler::fit(&ts.input_names, &ts.inputs)?;
        let output_scaler = Scaler::fit(&ts.target_names, &ts.targets)?;
        let xs: Vec<Vec<f64>> = ts.inputs.iter().map(|x| input_scaler.normalize(x)).collect();
        let ys: Vec<Vec<f64>> = ts.targets.iter().map(|y| output_scaler.normalize(y)).collect();
        let n_seq = architecture.sequence_length();
        let x = if n_seq > 1 || matches!(architecture, Architecture::Lstm { .. }) {
            let groups: Vec<_> = ts.groups().into_iter().map(|(_, g)| g).collect();
            columns(&windows(&xs, &groups, n_seq))
        } else {
            columns(&xs)
        };
        let y = columns(&ys);
        let mut network = Network::new(architecture, ts.input_names.len(), ts.target_names.len(), seed)?;
        let history = train(&mut network, &x, &y, cfg)?;
        Ok((
            Self {
                network,
                features,
                r,
                q,
                input_scaler,
                output_scaler,
                train_config: cfg.clone(),
                seed,
            },
            history,
        ))
    }

    /// Prediction for raw (unscaled) feature rows, oldest first for
    /// sequence models; shorter histories are padded with the oldest row.
    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n_seq = self.network.architecture().sequence_length();
        let last = rows.last().ok_or_else(|| Error::Closure("no input rows".into()))?;
        let mut x = Vec::with_capacity(n_seq * last.len());
        if matches!(self.network.architecture(), Architecture::Lstm { .. }) {
            let start = rows.len().saturating_sub(n_seq);
            let window = &rows[start..];
            for _ in window.len()..n_seq {
                x.extend(self.input_scaler.normalize(&window[0]));
            }
            for row in window {
                x.extend(self.input_scaler.normalize(row));
            }
        } else {
            x = self.input_scaler.normalize(last);
        }
        let y = self.network.forward_one(&x)?;
        let mut out = self.output_scaler.denormalize(&y);
        // targets without spread are reproduced exactly
        for ((o, &c), &m) in out.iter_mut().zip(&self.output_scaler.constant).zip(&self.output_scaler.mean) {
            if c {
                *o = m;
            }
        }
        Ok(out)
    }

    /// Feature rows of the closure input window.
    fn rows_for(&self, input: &ClosureInput<'_>) -> Vec<Vec<f64>> {
        let n_seq = self.network.architecture().sequence_length();
        let mut rows = Vec::with_capacity(n_seq);
        if n_seq > 1 || matches!(self.network.architecture(), Architecture::Lstm { .. }) {
            let start = input.history.len().saturating_sub(n_seq - 1);
            for (a, b) in &input.history[start..] {
                rows.push(self.features.assemble(a, b, input.nu, input.t));
            }
        }
        rows.push(self.features.assemble(input.a, input.b, input.nu, input.t));
        rows
    }
}

impl Closure for Regressor {
    fn output_dim(&self) -> usize {
        self.network.n_out()
    }

    fn evaluate(&self, input: &ClosureInput<'_>) -> Result<Vec<f64>> {
        self.predict_rows(&self.rows_for(input))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    architecture: Architecture,
    n_in: usize,
    n_out: usize,
    n_params: usize,
    features: FeatureSet,
    r: usize,
    q: usize,
    input_scaler: Scaler,
    output_scaler: Scaler,
    train_config: TrainConfig,
    seed: u64,
}

const MODEL_FORMAT: &str = "DDROM-MODEL v1";

/// One JSON header line followed by the little-endian `f64` parameters.
pub fn write_model(model: &Regressor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        architecture: model.network.architecture().clone(),
        n_in: model.network.n_in(),
        n_out: model.network.n_out(),
        n_params: model.network.n_params(),
        features: model.features,
        r: model.r,
        q: model.q,
        input_scaler: model.input_scaler.clone(),
        output_scaler: model.output_scaler.clone(),
        train_config: model.train_config.clone(),
        seed: model.seed,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for p in model.network.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Regressor> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = std::io::BufReader::new(f);
    let mut line = String::new();
    rd.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: ModelHeader = serde_json::from_str(line.trim_end())?;
    if header.format != MODEL_FORMAT {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected `{MODEL_FORMAT}`, found `{}`", header.format),
        });
    }
    let mut bytes = Vec::new();
    rd.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 8 * header.n_params {
        return Err(Error::Format {
            offset: line.len() as u64,
            message: format!("expected {} weight bytes, found {}", 8 * header.n_params, bytes.len()),
        });
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut network = Network::zeros(header.architecture, header.n_in, header.n_out)?;
    network.set_params(params)?;
    Ok(Regressor {
        network,
        features: header.features,
        r: header.r,
        q: header.q,
        input_scaler: header.input_scaler,
        output_scaler: header.output_scaler,
        train_config: header.train_config,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central differences on `n_check` components; returns the worst
    /// relative error.
    fn gradient_check(net: &Network, x: &DMatrix<f64>, t: &DMatrix<f64>, omega: f64, n_check: usize, seed: u64) -> f64 {
        let (_, _, g) = net.loss_grad(x, t, omega).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let h = 1e-6;
        for _ in 0..n_check {
            let k = rng.random_range(0..net.n_params());
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let lp = p.loss(x, t, omega).unwrap();
            p.params_mut()[k] -= 2.0 * h;
            let lm = p.loss(x, t, omega).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            // components below this are at finite-difference round-off
            let floor = 1e-8;
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(floor);
            worst = worst.max(rel);
        }
        worst
    }

    fn random_batch(rows: usize, out: usize, m: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            DMatrix::from_fn(rows, m, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(out, m, |_, _| rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for act in [Activation::Softplus, Activation::Relu, Activation::LeakyRelu, Activation::Tanh] {
            let net = Network::new(Architecture::Mlp { hidden: vec![6, 5], activation: act }, 3, 2, 11).unwrap();
            let (x, t) = random_batch(3, 2, 7, 1);
            let e = gradient_check(&net, &x, &t, 1e-3, 100, 2);
            assert!(e <= 1e-5, "{act:?}: {e}");
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for n_seq in [1, 4] {
            let net = Network::new(Architecture::Lstm { hidden: vec![4, 3], n_seq }, 2, 2, 5).unwrap();
            let (x, t) = random_batch(2 * n_seq, 2, 5, 3);
            let e = gradient_check(&net, &x, &t, 1e-3, 100, 4);
            assert!(e <= 1e-5, "n_seq {n_seq}: {e}");
        }
    }

    #[test]
    fn sinnn_gradients_match_finite_differences() {
        let arch = Architecture::SinNn {
            nn1_hidden: vec![3, 3],
            nn2_hidden: vec![5],
            activation: Activation::Tanh,
            n1: 2.0,
            n2: 3.0,
            n_harmonics: 3,
        };
        let net = Network::new(arch, 2, 2, 9).unwrap();
        let (x, t) = random_batch(2, 2, 6, 5);
        let e = gradient_check(&net, &x, &t, 1e-3, 100, 6);
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn linear_network_gradient_is_closed_form() {
        let mut net = Network::zeros(Architecture::Mlp { hidden: vec![], activation: Activation::Identity }, 3, 1).unwrap();
        let theta = [0.5, -1.0, 2.0];
        net.params_mut()[..3].copy_from_slice(&theta);
        let (x, t) = random_batch(3, 1, 8, 7);
        let (_, _, g) = net.loss_grad(&x, &t, 0.0).unwrap();
        let xt = x.transpose();
        let resid = &xt * DMatrix::from_column_slice(3, 1, &theta) - t.transpose();
        let expected = xt.transpose() * resid * (2.0 / 8.0);
        for i in 0..3 {
            assert!((g[i] - expected[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn trivial_forward_and_loss_values() {
        let net = Network::zeros(Architecture::correction_default(), 3, 2).unwrap();
        assert_eq!(net.forward_one(&[1.0, -4.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let x = DMatrix::from_element(3, 4, 0.3);
        let ones = DMatrix::from_element(2, 4, 1.0);
        assert_eq!(net.loss(&x, &ones, 0.0).unwrap(), 1.0);

        let mut id = Network::zeros(Architecture::Mlp { hidden: vec![], activation: Activation::Identity }, 2, 2).unwrap();
        id.params_mut()[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(id.forward_one(&[0.7, -0.2]).unwrap(), vec![0.7, -0.2]);
        let (_, _, g) = id.loss_grad(&columns(&[vec![0.7, -0.2]]), &columns(&[vec![0.7, -0.2]]), 0.0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));

        let mut one = Network::zeros(Architecture::Mlp { hidden: vec![], activation: Activation::Identity }, 1, 1).unwrap();
        one.params_mut()[0] = 2.0;
        let x = columns(&[vec![1.0]]);
        let t = columns(&[vec![2.0]]);
        assert_eq!(one.loss(&x, &t, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn initialization_is_seeded() {
        let a = Network::new(Architecture::eddy_viscosity_default(), 4, 3, 42).unwrap();
        let b = Network::new(Architecture::eddy_viscosity_default(), 4, 3, 42).unwrap();
        let c = Network::new(Architecture::eddy_viscosity_default(), 4, 3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(a.forward_one(&x).unwrap(), b.forward_one(&x).unwrap());
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(a.params()[..80].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn sinnn_is_periodic_in_time() {
        let net = Network::new(Architecture::sinnn_default(), 2, 3, 3).unwrap();
        let nu_feat = 0.37;
        let [p1, _] = net.sinnn_frequencies(&[nu_feat]).unwrap();
        let period = 2.0 * std::f64::consts::PI / (50.0 * p1);
        for t in [0.1, 0.45, 1.3] {
            let y0 = net.forward_one(&[nu_feat, t]).unwrap();
            let y1 = net.forward_one(&[nu_feat, t + period]).unwrap();
            for (a, b) in y0.iter().zip(&y1) {
                assert!((a - b).abs() <= 1e-10, "{a} {b}");
            }
        }
    }

    #[test]
    fn lstm_sees_only_its_window() {
        let ts = TrainingSet {
            input_names: vec!["a_1".into(), "log_nu".into()],
            target_names: vec!["tau_1".into()],
            nu: vec![1e-3; 12],
            t: (0..12).map(|k| k as f64).collect(),
            inputs: (0..12).map(|k| vec![(k as f64 * 0.3).sin(), (1e-3f64).ln()]).collect(),
            targets: (0..12).map(|k| vec![(k as f64 * 0.3).cos()]).collect(),
        };
        let features = FeatureSet { a: true, b: false, log_nu: true, t: false };
        let cfg = TrainConfig { epochs: 5, ..Default::default() };
        let (model, _) = Regressor::fit(&ts, Architecture::lstm_default(3), features, 1, 0, &cfg, 1).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..6).map(|k| vec![0.1 * k as f64, (1e-3f64).ln()]).collect();
        let y0 = model.predict_rows(&rows).unwrap();
        rows[1][0] = 50.0;
        assert_eq!(model.predict_rows(&rows).unwrap(), y0);
        rows[4][0] = 50.0;
        assert_ne!(model.predict_rows(&rows).unwrap(), y0);
    }

    #[test]
    fn windows_pad_with_the_first_row_of_each_group() {
        let rows: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64]).collect();
        let w = windows(&rows, &[0..2, 2..5], 3);
        assert_eq!(w[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(w[1], vec![0.0, 0.0, 1.0]);
        assert_eq!(w[2], vec![2.0, 2.0, 2.0]);
        assert_eq!(w[4], vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn model_file_round_trip() {
        let ts = TrainingSet {
            input_names: vec!["a_1".into(), "log_nu".into()],
            target_names: vec!["g_1".into()],
            nu: vec![1e-3, 1e-3, 2e-3, 2e-3],
            t: vec![0.0, 1.0, 0.0, 1.0],
            inputs: vec![vec![0.1, -6.9], vec![0.2, -6.9], vec![0.3, -6.2], vec![0.4, -6.2]],
            targets: vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
        };
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let (m, _) = Regressor::fit(&ts, Architecture::eddy_viscosity_default(), FeatureSet::default(), 1, 0, &cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.model");
        write_model(&m, &p).unwrap();
        assert_eq!(read_model(&p).unwrap(), m);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_model(&p), Err(Error::Format { .. })));
    }
}
