//! Stacked LSTM over a fixed window with a linear readout of the last
//! hidden state. Gate order in the stacked weights: input, forget, cell,
//! output.

use nalgebra::{DMatrix, DMatrixView, DVectorView};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmShape {
    /// Features per time step.
    pub n_feat: usize,
    pub hidden: Vec<usize>,
    pub n_seq: usize,
    pub n_out: usize,
}

struct StepCache {
    x: DMatrix<f64>,
    h_prev: DMatrix<f64>,
    c_prev: DMatrix<f64>,
    i: DMatrix<f64>,
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    o: DMatrix<f64>,
    tc: DMatrix<f64>,
}

pub(crate) struct LstmCache {
    steps: Vec<Vec<StepCache>>,
    h_top: DMatrix<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Clone, Copy)]
struct LayerOffsets {
    w: usize,
    u: usize,
    b: usize,
    end: usize,
}

impl LstmShape {
    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.n_feat
        } else {
            self.hidden[l - 1]
        }
    }

    fn layer_offsets(&self, l: usize) -> LayerOffsets {
        let mut off = 0;
        for k in 0..=l {
            let (n, h) = (self.layer_input(k), self.hidden[k]);
            let o = LayerOffsets {
                w: off,
                u: off + 4 * h * n,
                b: off + 4 * h * (n + h),
                end: off + 4 * h * (n + h + 1),
            };
            if k == l {
                return o;
            }
            off = o.end;
        }
        unreachable!()
    }

    fn readout_offset(&self) -> usize {
        self.layer_offsets(self.hidden.len() - 1).end
    }

    fn h_last(&self) -> usize {
        *self.hidden.last().expect("at least one layer")
    }

    pub fn n_params(&self) -> usize {
        self.readout_offset() + self.n_out * (self.h_last() + 1)
    }

    pub fn input_len(&self) -> usize {
        self.n_feat * self.n_seq
    }

    pub fn init(&self, rng: &mut impl Rng, p: &mut [f64]) {
        for l in 0..self.hidden.len() {
            let o = self.layer_offsets(l);
            let (n, h) = (self.layer_input(l), self.hidden[l]);
            let bw = (6.0 / (n + h) as f64).sqrt();
            let bu = (6.0 / (2 * h) as f64).sqrt();
            for v in &mut p[o.w..o.u] {
                *v = rng.random_range(-bw..bw);
            }
            for v in &mut p[o.u..o.b] {
                *v = rng.random_range(-bu..bu);
            }
            p[o.b..o.end].fill(0.0);
        }
        let r = self.readout_offset();
        let h = self.h_last();
        let bv = (6.0 / (h + self.n_out) as f64).sqrt();
        for v in &mut p[r..r + self.n_out * h] {
            *v = rng.random_range(-bv..bv);
        }
        p[r + self.n_out * h..].fill(0.0);
    }

    pub fn weight_mask(&self, mask: &mut [bool]) {
        for l in 0..self.hidden.len() {
            let o = self.layer_offsets(l);
            mask[o.w..o.b].fill(true);
            mask[o.b..o.end].fill(false);
        }
        let r = self.readout_offset();
        let h = self.h_last();
        mask[r..r + self.n_out * h].fill(true);
        mask[r + self.n_out * h..].fill(false);
    }

    pub(crate) fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> (DMatrix<f64>, LstmCache) {
        let m = x.ncols();
        let nl = self.hidden.len();
        let mut h: Vec<DMatrix<f64>> = self.hidden.iter().map(|&n| DMatrix::zeros(n, m)).collect();
        let mut c = h.clone();
        let mut steps = Vec::with_capacity(self.n_seq);
        for s in 0..self.n_seq {
            let mut input = x.rows(s * self.n_feat, self.n_feat).into_owned();
            let mut cache = Vec::with_capacity(nl);
            for l in 0..nl {
                let o = self.layer_offsets(l);
                let (n, hl) = (self.layer_input(l), self.hidden[l]);
                let w = DMatrixView::from_slice(&p[o.w..o.u], 4 * hl, n);
                let u = DMatrixView::from_slice(&p[o.u..o.b], 4 * hl, hl);
                let b = DVectorView::from_slice(&p[o.b..o.end], 4 * hl);
                let mut z = w * &input + u * &h[l];
                for mut col in z.column_iter_mut() {
                    col += &b;
                }
                let i = z.rows(0, hl).map(sigmoid);
                let f = z.rows(hl, hl).map(sigmoid);
                let g = z.rows(2 * hl, hl).map(f64::tanh);
                let og = z.rows(3 * hl, hl).map(sigmoid);
                let c_new = f.component_mul(&c[l]) + i.component_mul(&g);
                let tc = c_new.map(f64::tanh);
                let h_new = og.component_mul(&tc);
                let c_prev = std::mem::replace(&mut c[l], c_new);
                let h_prev = std::mem::replace(&mut h[l], h_new.clone());
                cache.push(StepCache {
                    x: input,
                    h_prev,
                    c_prev,
                    i,
                    f,
                    g,
                    o: og,
                    tc,
                });
                input = h_new;
            }
            steps.push(cache);
        }
        let r = self.readout_offset();
        let hl = self.h_last();
        let v = DMatrixView::from_slice(&p[r..r + self.n_out * hl], self.n_out, hl);
        let bias = DVectorView::from_slice(&p[r + self.n_out * hl..], self.n_out);
        let h_top = h.pop().expect("at least one layer");
        let mut y = v * &h_top;
        for mut col in y.column_iter_mut() {
            col += &bias;
        }
        (y, LstmCache { steps, h_top })
    }

    pub(crate) fn backward(&self, p: &[f64], cache: &LstmCache, dy: DMatrix<f64>, g: &mut [f64]) {
        let nl = self.hidden.len();
        let r = self.readout_offset();
        let hl = self.h_last();
        let v = DMatrixView::from_slice(&p[r..r + self.n_out * hl], self.n_out, hl);
        let gv = &dy * cache.h_top.transpose();
        for (gi, x) in g[r..r + self.n_out * hl].iter_mut().zip(gv.as_slice()) {
            *gi += x;
        }
        for (k, gi) in g[r + self.n_out * hl..].iter_mut().enumerate() {
            *gi += dy.row(k).sum();
        }
        let m = dy.ncols();
        let mut dh_rec: Vec<DMatrix<f64>> = self.hidden.iter().map(|&n| DMatrix::zeros(n, m)).collect();
        let mut dc_rec = dh_rec.clone();
        let mut dh_top = Some(v.transpose() * &dy);
        for s in (0..self.n_seq).rev() {
            let mut dh_above = if s + 1 == self.n_seq { dh_top.take() } else { None };
            for l in (0..nl).rev() {
                let sc = &cache.steps[s][l];
                let o = self.layer_offsets(l);
                let (n, h) = (self.layer_input(l), self.hidden[l]);
                let mut dh = dh_rec[l].clone();
                if let Some(d) = dh_above.take() {
                    dh += d;
                }
                let dc = &dc_rec[l] + dh.component_mul(&sc.o).zip_map(&sc.tc, |v, t| v * (1.0 - t * t));
                let mut dz = DMatrix::zeros(4 * h, m);
                dz.rows_mut(0, h)
                    .copy_from(&dc.component_mul(&sc.g).zip_map(&sc.i, |d, i| d * i * (1.0 - i)));
                dz.rows_mut(h, h)
                    .copy_from(&dc.component_mul(&sc.c_prev).zip_map(&sc.f, |d, f| d * f * (1.0 - f)));
                dz.rows_mut(2 * h, h)
                    .copy_from(&dc.component_mul(&sc.i).zip_map(&sc.g, |d, g| d * (1.0 - g * g)));
                dz.rows_mut(3 * h, h)
                    .copy_from(&dh.component_mul(&sc.tc).zip_map(&sc.o, |d, o| d * o * (1.0 - o)));
                let gw = &dz * sc.x.transpose();
                let gu = &dz * sc.h_prev.transpose();
                for (gi, x) in g[o.w..o.u].iter_mut().zip(gw.as_slice()) {
                    *gi += x;
                }
                for (gi, x) in g[o.u..o.b].iter_mut().zip(gu.as_slice()) {
                    *gi += x;
                }
                for (k, gi) in g[o.b..o.end].iter_mut().enumerate() {
                    *gi += dz.row(k).sum();
                }
                dc_rec[l] = dc.component_mul(&sc.f);
                let w = DMatrixView::from_slice(&p[o.w..o.u], 4 * h, n);
                let u = DMatrixView::from_slice(&p[o.u..o.b], 4 * h, h);
                dh_rec[l] = u.transpose() * &dz;
                if l > 0 {
                    dh_above = Some(w.transpose() * &dz);
                }
            }
        }
    }
}
