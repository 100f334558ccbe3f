//! Dense rank-3 tensor used for the quadratic reduced operators.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n0: usize, n1: usize, n2: usize) -> Self {
        Self {
            dims: [n0, n1, n2],
            data: vec![0.0; n0 * n1 * n2],
        }
    }

    pub fn from_fn(n0: usize, n1: usize, n2: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n0, n1, n2);
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    t.data[(i * n1 + j) * n2 + k] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::dim(format!(
                "tensor of shape {dims:?} needs {} entries, got {}",
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = (i * self.dims[1] + j) * self.dims[2] + k;
        self.data[idx] = v;
    }

    /// `out_i = Σ_jk T_ijk x_j y_k`; `x`, `y` may be longer than the tensor
    /// (extra entries ignored) but not shorter.
    pub fn contract(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let [n0, n1, n2] = self.dims;
        debug_assert!(x.len() >= n1 && y.len() >= n2);
        (0..n0)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n1 {
                    let row = &self.data[(i * n1 + j) * n2..(i * n1 + j + 1) * n2];
                    let inner: f64 = row.iter().zip(y).map(|(t, y)| t * y).sum();
                    s += x[j] * inner;
                }
                s
            })
            .collect()
    }

    /// Leading `[m0, m1, m2]` block.
    pub fn restrict(&self, m0: usize, m1: usize, m2: usize) -> Result<Self> {
        if m0 > self.dims[0] || m1 > self.dims[1] || m2 > self.dims[2] {
            return Err(Error::dim(format!(
                "cannot restrict tensor of shape {:?} to [{m0}, {m1}, {m2}]",
                self.dims
            )));
        }
        Ok(Self::from_fn(m0, m1, m2, |i, j, k| self.get(i, j, k)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contraction_matches_loops() {
        let t = Tensor3::from_fn(2, 3, 3, |i, j, k| (i + 2 * j + 3 * k) as f64 - 2.5);
        let x = [1.0, -2.0, 0.5];
        let y = [0.25, 3.0, -1.0];
        let out = t.contract(&x, &y);
        for (i, o) in out.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..3 {
                for k in 0..3 {
                    s += t.get(i, j, k) * x[j] * y[k];
                }
            }
            assert_eq!(*o, s);
        }
    }

    #[test]
    fn restriction_keeps_leading_block() {
        let t = Tensor3::from_fn(3, 3, 3, |i, j, k| (100 * i + 10 * j + k) as f64);
        let r = t.restrict(2, 1, 2).unwrap();
        assert_eq!(r.get(1, 0, 1), 101.0);
        assert!(t.restrict(4, 1, 1).is_err());
    }
}
