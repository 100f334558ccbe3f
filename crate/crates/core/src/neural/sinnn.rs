//! Two MLPs joined by a harmonic feature stage: NN1 maps the parameter
//! features to `p = (p_1, p_2)`, the stage emits
//! `sin(N1·p_1·k·t + N2·p_2)`, `cos(…)` for `k = 1..n`, and NN2 maps those
//! to the output. The last input row is time.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{MlpCache, MlpShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinNNShape {
    pub nn1: MlpShape,
    pub nn2: MlpShape,
    pub n1: f64,
    pub n2: f64,
    pub n_harmonics: usize,
}

pub(crate) struct SinNNCache {
    nn1: MlpCache,
    nn2: MlpCache,
    p: DMatrix<f64>,
    t: Vec<f64>,
}

impl SinNNShape {
    pub fn n_params(&self) -> usize {
        self.nn1.n_params() + self.nn2.n_params()
    }

    pub fn init(&self, rng: &mut impl Rng, p: &mut [f64]) {
        let k = self.nn1.n_params();
        self.nn1.init(rng, &mut p[..k]);
        self.nn2.init(rng, &mut p[k..]);
    }

    pub fn weight_mask(&self, mask: &mut [bool]) {
        let k = self.nn1.n_params();
        self.nn1.weight_mask(&mut mask[..k]);
        self.nn2.weight_mask(&mut mask[k..]);
    }

    fn phase(&self, p: &DMatrix<f64>, j: usize, k: usize, t: f64) -> f64 {
        self.n1 * p[(0, j)] * k as f64 * t + self.n2 * p[(1, j)]
    }

    /// `(p_1, p_2)` per column of parameter features (no time row).
    pub(crate) fn frequencies(&self, params: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        self.nn1.forward(&params[..self.nn1.n_params()], x).0
    }

    pub(crate) fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> (DMatrix<f64>, SinNNCache) {
        let k1 = self.nn1.n_params();
        let n_nu = x.nrows() - 1;
        let (p, c1) = self.nn1.forward(&params[..k1], &x.rows(0, n_nu).into_owned());
        let t: Vec<f64> = x.row(n_nu).iter().copied().collect();
        let m = x.ncols();
        let mut feat = DMatrix::zeros(2 * self.n_harmonics, m);
        for j in 0..m {
            for k in 1..=self.n_harmonics {
                let (s, c) = self.phase(&p, j, k, t[j]).sin_cos();
                feat[(2 * (k - 1), j)] = s;
                feat[(2 * (k - 1) + 1, j)] = c;
            }
        }
        let (y, c2) = self.nn2.forward(&params[k1..], &feat);
        (y, SinNNCache { nn1: c1, nn2: c2, p, t })
    }

    pub(crate) fn backward(&self, params: &[f64], cache: &SinNNCache, dy: DMatrix<f64>, g: &mut [f64]) {
        let k1 = self.nn1.n_params();
        let (g1, g2) = g.split_at_mut(k1);
        let dfeat = self.nn2.backward(&params[k1..], &cache.nn2, dy, g2);
        let m = dfeat.ncols();
        let mut dp = DMatrix::zeros(2, m);
        for j in 0..m {
            let t = cache.t[j];
            for k in 1..=self.n_harmonics {
                let (s, c) = self.phase(&cache.p, j, k, t).sin_cos();
                let dphi = c * dfeat[(2 * (k - 1), j)] - s * dfeat[(2 * (k - 1) + 1, j)];
                dp[(0, j)] += dphi * self.n1 * k as f64 * t;
                dp[(1, j)] += dphi * self.n2;
            }
        }
        self.nn1.backward(&params[..k1], &cache.nn1, dp, g1);
    }
}
