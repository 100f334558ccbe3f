//! Fully connected layers with a linear output layer, batched over columns.

use nalgebra::{DMatrix, DMatrixView, DVectorView};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Activation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    /// `[in, hidden…, out]`
    pub widths: Vec<usize>,
    pub activation: Activation,
}

pub(crate) struct MlpCache {
    /// Input of every layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
}

impl MlpShape {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        Self { widths, activation }
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Offsets of `W_l` (column-major `out × in`) and `b_l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.widths.windows(2).take(l).map(|w| w[1] * (w[0] + 1)).sum();
        (off, off + self.widths[l + 1] * self.widths[l])
    }

    fn weight<'a>(&self, p: &'a [f64], l: usize) -> DMatrixView<'a, f64> {
        let (w, _) = self.offsets(l);
        let (rows, cols) = (self.widths[l + 1], self.widths[l]);
        DMatrixView::from_slice(&p[w..w + rows * cols], rows, cols)
    }

    fn bias<'a>(&self, p: &'a [f64], l: usize) -> DVectorView<'a, f64> {
        let (_, b) = self.offsets(l);
        DVectorView::from_slice(&p[b..b + self.widths[l + 1]], self.widths[l + 1])
    }

    pub fn init(&self, rng: &mut impl Rng, p: &mut [f64]) {
        for l in 0..self.n_layers() {
            let (w, b) = self.offsets(l);
            let (fan_out, fan_in) = (self.widths[l + 1], self.widths[l]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p[w..b] {
                *v = rng.random_range(-bound..bound);
            }
            p[b..b + fan_out].fill(0.0);
        }
    }

    pub fn weight_mask(&self, mask: &mut [bool]) {
        for l in 0..self.n_layers() {
            let (w, b) = self.offsets(l);
            mask[w..b].fill(true);
            mask[b..b + self.widths[l + 1]].fill(false);
        }
    }

    pub(crate) fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.n_layers()),
            pre: Vec::with_capacity(self.n_layers()),
        };
        let mut a = x.clone();
        for l in 0..self.n_layers() {
            let mut z = self.weight(p, l) * &a;
            let b = self.bias(p, l);
            for mut col in z.column_iter_mut() {
                col += &b;
            }
            cache.inputs.push(a);
            if l + 1 < self.n_layers() {
                let act = self.activation;
                a = z.map(|v| act.apply(v));
                cache.pre.push(z);
            } else {
                a = z;
            }
        }
        (a, cache)
    }

    /// Accumulates the parameter gradient into `g`, returns `∂L/∂x`.
    pub(crate) fn backward(&self, p: &[f64], cache: &MlpCache, dy: DMatrix<f64>, g: &mut [f64]) -> DMatrix<f64> {
        let mut dz = dy;
        let act = self.activation;
        for l in (0..self.n_layers()).rev() {
            let (w, b) = self.offsets(l);
            let gw = &dz * cache.inputs[l].transpose();
            for (gi, v) in g[w..b].iter_mut().zip(gw.as_slice()) {
                *gi += v;
            }
            for (i, gi) in g[b..b + self.widths[l + 1]].iter_mut().enumerate() {
                *gi += dz.row(i).sum();
            }
            let da = self.weight(p, l).transpose() * &dz;
            if l == 0 {
                return da;
            }
            dz = da.zip_map(&cache.pre[l - 1], |d, z| d * act.derivative(z));
        }
        unreachable!("an MLP has at least one layer")
    }
}
