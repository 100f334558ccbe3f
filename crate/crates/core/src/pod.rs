//! Weighted proper orthogonal decomposition, projection and reconstruction.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{weighted_dot, ScalarField, StructuredGrid2D, VectorField2D};
use crate::io::{fmt_f64, ContainerReader, ContainerWriter};
use crate::snapshots::{FieldKind, SnapshotSet};

const POD_MAGIC: &str = "DDROM-POD";
const POD_VERSION: &str = "v1";

/// Relative singular value below which directions count as numerically absent.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// How the decomposition is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodMethod {
    /// Thin SVD of `W^{1/2} S`. Singular values keep full relative precision.
    #[default]
    Svd,
    /// Eigendecomposition of the `N_μ × N_μ` correlation matrix `Sᵀ W S`.
    /// Cheaper for very tall matrices, but squaring the data limits the
    /// resolvable `σ_i/σ_1` to roughly `1e-8`.
    Snapshots,
}

/// L²(Ω)-orthonormal modes for one field family.
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    kind: FieldKind,
    grid: StructuredGrid2D,
    /// Columns of length `components · nx · ny`.
    modes: Vec<Vec<f64>>,
    /// Full retained spectrum (may be longer than `modes`).
    singular_values: Vec<f64>,
}

/// Quadrature weights for a field family, repeated per component.
pub fn field_weights(grid: &StructuredGrid2D, kind: FieldKind) -> Vec<f64> {
    let w = grid.quadrature_weights();
    let mut out = Vec::with_capacity(w.len() * kind.components());
    for _ in 0..kind.components() {
        out.extend_from_slice(&w);
    }
    out
}

fn check_columns(columns: &[&[f64]], weights: &[f64]) -> Result<()> {
    if columns.is_empty() {
        return Err(Error::Data("snapshot matrix has no columns".into()));
    }
    for (j, c) in columns.iter().enumerate() {
        if c.len() != weights.len() {
            return Err(Error::dim(format!(
                "snapshot column {j} has length {}, weights have {}",
                c.len(),
                weights.len()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("snapshot column {j} contains a non-finite value")));
        }
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::dim(format!("quadrature weights must be positive, found {w}")));
    }
    Ok(())
}

/// Singular values and (unnormalised-sign) modes from a weighted snapshot
/// matrix. Returns every direction above the rank tolerance.
pub fn decompose(
    columns: &[&[f64]],
    weights: &[f64],
    method: PodMethod,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_columns(columns, weights)?;
    let nh = weights.len();
    let nm = columns.len();
    let (sigma, mut modes) = match method {
        PodMethod::Svd => {
            let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
            let x = DMatrix::from_fn(nh, nm, |i, j| sw[i] * columns[j][i]);
            let svd = x.svd(true, false);
            let u = svd.u.expect("requested U");
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            let sigma: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
            let modes: Vec<Vec<f64>> = order
                .iter()
                .map(|&k| (0..nh).map(|i| u[(i, k)] / sw[i]).collect())
                .collect();
            (sigma, modes)
        }
        PodMethod::Snapshots => {
            let mut k = DMatrix::zeros(nm, nm);
            let entries: Vec<(usize, usize, f64)> = (0..nm)
                .into_par_iter()
                .flat_map_iter(|i| {
                    (i..nm).map(move |j| (i, j, weighted_dot(weights, columns[i], columns[j])))
                })
                .collect();
            for (i, j, v) in entries {
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            let eig = SymmetricEigen::new(k);
            let mut order: Vec<usize> = (0..nm).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let sigma: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0).sqrt()).collect();
            let modes = order
                .iter()
                .zip(&sigma)
                .map(|(&k, &s)| {
                    let mut m = vec![0.0; nh];
                    if s > 0.0 {
                        for (j, c) in columns.iter().enumerate() {
                            let f = eig.eigenvectors[(j, k)] / s;
                            for (mi, ci) in m.iter_mut().zip(c.iter()) {
                                *mi += f * ci;
                            }
                        }
                    }
                    m
                })
                .collect();
            (sigma, modes)
        }
    };
    let s1 = sigma.first().copied().unwrap_or(0.0);
    let rank = if s1 > 0.0 {
        sigma.iter().take_while(|s| **s / s1 > RANK_TOLERANCE).count()
    } else {
        0
    };
    modes.truncate(rank);
    if method == PodMethod::Snapshots {
        reorthonormalize(&mut modes, weights);
    }
    for m in &mut modes {
        fix_sign(m);
    }
    Ok((sigma[..rank].to_vec(), modes))
}

/// Two passes of weighted modified Gram–Schmidt.
fn reorthonormalize(modes: &mut [Vec<f64>], weights: &[f64]) {
    for _ in 0..2 {
        for i in 0..modes.len() {
            let (done, rest) = modes.split_at_mut(i);
            let m = &mut rest[0];
            for prev in done.iter() {
                let c = weighted_dot(weights, m, prev);
                for (a, b) in m.iter_mut().zip(prev) {
                    *a -= c * b;
                }
            }
            let n = weighted_dot(weights, m, m).sqrt();
            if n > 0.0 {
                m.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

fn fix_sign(m: &mut [f64]) {
    if let Some(first) = m.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            m.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// POD of raw (uncentred) snapshot columns, truncated to `n_max` modes.
pub fn compute_pod(
    columns: &[&[f64]],
    grid: StructuredGrid2D,
    kind: FieldKind,
    n_max: usize,
    method: PodMethod,
) -> Result<PodBasis> {
    let weights = field_weights(&grid, kind);
    let (sigma, mut modes) = decompose(columns, &weights, method)?;
    modes.truncate(n_max);
    Ok(PodBasis {
        kind,
        grid,
        modes,
        singular_values: sigma,
    })
}

pub fn compute_pod_from_set(
    set: &SnapshotSet,
    kind: FieldKind,
    n_max: usize,
    method: PodMethod,
) -> Result<PodBasis> {
    compute_pod(&set.field_columns(kind), *set.grid(), kind, n_max, method)
}

/// Partial sums of `σ_i²` over the total.
pub fn cumulative_energy(sigma: &[f64]) -> Result<Vec<f64>> {
    if sigma.is_empty() {
        return Err(Error::Data("cumulative energy of an empty spectrum".into()));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    Ok(sigma
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect())
}

impl PodBasis {
    /// Assembles a basis from given modes (no orthonormality check).
    pub fn from_modes(
        kind: FieldKind,
        grid: StructuredGrid2D,
        modes: Vec<Vec<f64>>,
        singular_values: Vec<f64>,
    ) -> Result<Self> {
        let nh = grid.len() * kind.components();
        if let Some(m) = modes.iter().find(|m| m.len() != nh) {
            return Err(Error::dim(format!("mode length {} does not match {nh}", m.len())));
        }
        if singular_values.len() < modes.len() {
            return Err(Error::dim("fewer singular values than modes"));
        }
        Ok(Self {
            kind,
            grid,
            modes,
            singular_values,
        })
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn grid(&self) -> &StructuredGrid2D {
        &self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> &[f64] {
        &self.modes[i]
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Rank of the snapshot data (length of the retained spectrum).
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        field_weights(&self.grid, self.kind)
    }

    pub fn cumulative_energy(&self) -> Result<Vec<f64>> {
        cumulative_energy(&self.singular_values)
    }

    pub fn truncated(&self, n: usize) -> Result<PodBasis> {
        if n > self.n_modes() {
            return Err(Error::dim(format!(
                "requested {n} modes, basis holds {}",
                self.n_modes()
            )));
        }
        Ok(PodBasis {
            kind: self.kind,
            grid: self.grid,
            modes: self.modes[..n].to_vec(),
            singular_values: self.singular_values.clone(),
        })
    }

    pub fn vector_mode(&self, i: usize) -> Result<VectorField2D> {
        if self.kind != FieldKind::Velocity {
            return Err(Error::dim("vector_mode on a scalar basis"));
        }
        Ok(VectorField2D::from_raw(self.grid, self.modes[i].clone()))
    }

    pub fn scalar_mode(&self, i: usize) -> Result<ScalarField> {
        if self.kind == FieldKind::Velocity {
            return Err(Error::dim("scalar_mode on a velocity basis"));
        }
        Ok(ScalarField::from_raw(self.grid, self.modes[i].clone()))
    }

    /// Max over `i, j` of `|(m_i, m_j) − δ_ij|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let w = self.weights();
        let mut worst: f64 = 0.0;
        for i in 0..self.n_modes() {
            for j in 0..=i {
                let g = weighted_dot(&w, &self.modes[i], &self.modes[j]);
                let d = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - d).abs());
            }
        }
        worst
    }

    /// First `n` coefficients `(field, mode_i)_w` of a raw field.
    pub fn project_values(&self, field: &[f64], n: usize) -> Result<Vec<f64>> {
        if n > self.n_modes() {
            return Err(Error::dim(format!(
                "projection onto {n} modes, basis holds {}",
                self.n_modes()
            )));
        }
        let w = self.weights();
        if field.len() != w.len() {
            return Err(Error::dim(format!(
                "field length {} does not match basis length {}",
                field.len(),
                w.len()
            )));
        }
        Ok(self.modes[..n].iter().map(|m| weighted_dot(&w, field, m)).collect())
    }

    /// `Σ c_i mode_i`.
    pub fn reconstruct_values(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() > self.n_modes() {
            return Err(Error::dim(format!(
                "{} coefficients for a basis of {} modes",
                coeffs.len(),
                self.n_modes()
            )));
        }
        let mut out = vec![0.0; self.grid.len() * self.kind.components()];
        for (c, m) in coeffs.iter().zip(&self.modes) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += c * v;
            }
        }
        Ok(out)
    }
}

/// Reduced coefficients of one viscosity over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTrajectory {
    pub nu: f64,
    pub times: Vec<f64>,
    /// One row per time.
    pub coeffs: Vec<Vec<f64>>,
}

impl CoefficientTrajectory {
    pub fn n_coeffs(&self) -> usize {
        self.coeffs.first().map_or(0, Vec::len)
    }
}

/// Projects every snapshot of `set` (field family of `basis`) onto the first
/// `n` modes; one trajectory per viscosity.
pub fn project(set: &SnapshotSet, basis: &PodBasis, n: usize) -> Result<Vec<CoefficientTrajectory>> {
    set.grid().check_same(basis.grid())?;
    if n > basis.n_modes() {
        return Err(Error::dim(format!(
            "projection onto {n} modes, basis holds {}",
            basis.n_modes()
        )));
    }
    let cols = set.field_columns(basis.kind());
    let rows = cols
        .par_iter()
        .map(|c| basis.project_values(c, n))
        .collect::<Result<Vec<_>>>()?;
    let times = set.times();
    Ok(rows
        .chunks(set.n_t())
        .zip(set.viscosities())
        .map(|(block, nu)| CoefficientTrajectory {
            nu,
            times: times.clone(),
            coeffs: block.to_vec(),
        })
        .collect())
}

pub fn reconstruct(coeffs: &[f64], basis: &PodBasis) -> Result<Vec<f64>> {
    basis.reconstruct_values(coeffs)
}

/// Header `DDROM-POD v1 kind nx ny lx ly n_modes n_sigma`, then the
/// singular values, then the modes column by column.
pub fn write_basis(basis: &PodBasis, path: impl AsRef<Path>) -> Result<()> {
    let g = basis.grid;
    let header = format!(
        "{POD_MAGIC} {POD_VERSION} {} {} {} {} {} {} {}",
        basis.kind.name(),
        g.nx(),
        g.ny(),
        fmt_f64(g.lx()),
        fmt_f64(g.ly()),
        basis.n_modes(),
        basis.singular_values.len()
    );
    let mut w = ContainerWriter::new(&header);
    w.slice(&basis.singular_values);
    for m in &basis.modes {
        w.slice(m);
    }
    w.write_to(path.as_ref())
}

pub fn read_basis(path: impl AsRef<Path>) -> Result<PodBasis> {
    let mut r = ContainerReader::open(path.as_ref(), POD_MAGIC, POD_VERSION)?;
    r.expect_field_count(7)?;
    let kind: FieldKind = r.field(0, "kind")?;
    let grid = StructuredGrid2D::new(
        r.field(1, "nx")?,
        r.field(2, "ny")?,
        r.field(3, "lx")?,
        r.field(4, "ly")?,
    )
    .map_err(|e| Error::Format {
        offset: 0,
        message: format!("invalid grid in header: {e}"),
    })?;
    let n_modes: usize = r.field(5, "n_modes")?;
    let n_sigma: usize = r.field(6, "n_sigma")?;
    let sigma = r.vec(n_sigma)?;
    let nh = grid.len() * kind.components();
    let mut modes = Vec::with_capacity(n_modes);
    for _ in 0..n_modes {
        modes.push(r.vec(nh)?);
    }
    r.finish()?;
    PodBasis::from_modes(kind, grid, modes, sigma).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snapshots::{generate_synthetic_wake, SampleSet, Smagorinsky, WakeConfig};
    use rand::{Rng, SeedableRng};

    fn wake_set(wake: &WakeConfig, n_t: usize) -> SnapshotSet {
        let grid = StructuredGrid2D::new(33, 17, 2.0, 1.0).unwrap();
        let s = SampleSet {
            nus: vec![8e-5, 1e-4, 1.5e-4],
            t0: 0.0,
            dt: 0.05,
            n_t,
        };
        generate_synthetic_wake(grid, &s, wake, &Smagorinsky::default()).unwrap()
    }

    #[test]
    fn single_snapshot_gives_normalised_mode() {
        let grid = StructuredGrid2D::unit_square(9).unwrap();
        let s = ScalarField::from_fn(grid, |x, y| 1.0 + x * y);
        let w = grid.quadrature_weights();
        let norm = weighted_dot(&w, s.values(), s.values()).sqrt();
        for method in [PodMethod::Svd, PodMethod::Snapshots] {
            let b = compute_pod(&[s.values()], grid, FieldKind::Pressure, 5, method).unwrap();
            assert_eq!(b.n_modes(), 1);
            assert!((b.singular_values()[0] - norm).abs() < 1e-13 * norm);
            for (m, v) in b.mode(0).iter().zip(s.values()) {
                assert!((m - v / norm).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn two_orthogonal_snapshots() {
        // sin(πx) and sin(2πx) are orthogonal under the trapezoid rule on a uniform grid
        let grid = StructuredGrid2D::unit_square(17).unwrap();
        let f1 = ScalarField::from_fn(grid, |x, _| (std::f64::consts::PI * x).sin());
        let f2 = ScalarField::from_fn(grid, |x, _| (2.0 * std::f64::consts::PI * x).sin());
        let w = grid.quadrature_weights();
        let n1 = weighted_dot(&w, f1.values(), f1.values()).sqrt();
        let n2 = weighted_dot(&w, f2.values(), f2.values()).sqrt();
        assert!(weighted_dot(&w, f1.values(), f2.values()).abs() < 1e-14);
        let s1: Vec<f64> = f1.values().iter().map(|v| 2.0 * v / n1).collect();
        let s2: Vec<f64> = f2.values().iter().map(|v| v / n2).collect();
        let b = compute_pod(&[&s1, &s2], grid, FieldKind::Pressure, 5, PodMethod::Svd).unwrap();
        let sv = b.singular_values();
        assert!((sv[0] - 2.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12);
        let e = b.cumulative_energy().unwrap();
        assert!((e[0] - 0.8).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumulative_energy_cases() {
        assert_eq!(cumulative_energy(&[1.0]).unwrap(), vec![1.0]);
        let e = cumulative_energy(&[1.0; 4]).unwrap();
        for (a, b) in e.iter().zip([0.25, 0.5, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(cumulative_energy(&[]).is_err());
    }

    #[test]
    fn zero_snapshots_give_empty_basis() {
        let grid = StructuredGrid2D::unit_square(5).unwrap();
        let z = vec![0.0; grid.len()];
        let b = compute_pod(&[&z, &z], grid, FieldKind::Pressure, 3, PodMethod::Svd).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn nan_is_a_data_error() {
        let grid = StructuredGrid2D::unit_square(5).unwrap();
        let mut z = vec![0.0; grid.len()];
        z[3] = f64::NAN;
        assert!(matches!(
            compute_pod(&[&z], grid, FieldKind::Pressure, 3, PodMethod::Svd),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn wake_basis_orthonormal_and_parseval() {
        let set = wake_set(&WakeConfig::default(), 41);
        let cols = set.field_columns(FieldKind::Velocity);
        let b = compute_pod_from_set(&set, FieldKind::Velocity, 50, PodMethod::Svd).unwrap();
        assert!(b.orthonormality_residual() <= 1e-10, "{}", b.orthonormality_residual());
        let w = b.weights();
        let energy: f64 = cols.iter().map(|c| weighted_dot(&w, c, c)).sum();
        let spectrum: f64 = b.singular_values().iter().map(|s| s * s).sum();
        assert!(((energy - spectrum) / energy).abs() < 1e-8);
        // stream + two harmonics, each a sin/cos pair
        assert_eq!(b.rank(), 5);
    }

    #[test]
    fn single_harmonic_has_rank_two() {
        let wake = WakeConfig {
            amplitudes: [0.3, 0.0],
            beta: 0.0,
            ..Default::default()
        };
        let set = wake_set(&wake, 41);
        let fluct: Vec<Vec<f64>> = set
            .snapshots()
            .iter()
            .map(|s| {
                let n = set.grid().len();
                s.u.values().iter().enumerate().map(|(k, v)| if k < n { v - wake.u_inf } else { *v }).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = fluct.iter().map(Vec::as_slice).collect();
        let w = field_weights(set.grid(), FieldKind::Velocity);
        // independent oracle: full SVD of the weighted matrix
        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let x = DMatrix::from_fn(w.len(), refs.len(), |i, j| sw[i] * refs[j][i]);
        let mut sv: Vec<f64> = x.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[2] / sv[0] < 1e-10, "{:?}", &sv[..4]);
        let b = compute_pod(&refs, *set.grid(), FieldKind::Velocity, 10, PodMethod::Svd).unwrap();
        assert_eq!(b.n_modes(), 2);
    }

    #[test]
    fn leading_coefficient_oscillates_with_wake_period() {
        let wake = WakeConfig {
            amplitudes: [0.3, 0.0],
            ..Default::default()
        };
        let grid = StructuredGrid2D::new(33, 17, 2.0, 1.0).unwrap();
        let nu = 1e-4;
        let period = wake.period(nu);
        let dt = period / 200.0;
        let n_t = 2001;
        let s = SampleSet { nus: vec![nu], t0: 0.0, dt, n_t };
        let set = generate_synthetic_wake(grid, &s, &wake, &Smagorinsky::default()).unwrap();
        let fluct: Vec<Vec<f64>> = set
            .snapshots()
            .iter()
            .map(|s| s.u.values().iter().enumerate().map(|(k, v)| if k < grid.len() { v - 1.0 } else { *v }).collect())
            .collect();
        let refs: Vec<&[f64]> = fluct.iter().map(Vec::as_slice).collect();
        let b = compute_pod(&refs, grid, FieldKind::Velocity, 2, PodMethod::Svd).unwrap();
        let a: Vec<f64> = refs.iter().map(|c| b.project_values(c, 1).unwrap()[0]).collect();
        let crossings: Vec<f64> = a
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] < 0.0 && w[1] >= 0.0)
            .map(|(k, w)| (k as f64 + w[0] / (w[0] - w[1])) * dt)
            .collect();
        let n = crossings.len();
        assert!(n >= 5);
        let measured = (crossings[n - 1] - crossings[0]) / (n - 1) as f64;
        assert!(((measured - period) / period).abs() < 0.01, "{measured} vs {period}");
    }

    #[test]
    fn methods_agree() {
        let set = wake_set(&WakeConfig::default(), 21);
        let a = compute_pod_from_set(&set, FieldKind::Velocity, 3, PodMethod::Svd).unwrap();
        let b = compute_pod_from_set(&set, FieldKind::Velocity, 3, PodMethod::Snapshots).unwrap();
        for (x, y) in a.singular_values().iter().zip(b.singular_values()).take(3) {
            assert!((x - y).abs() < 1e-8 * a.singular_values()[0]);
        }
        for i in 0..3 {
            let d = a.mode(i).iter().zip(b.mode(i)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6, "mode {i}: {d}");
        }
    }

    #[test]
    fn projection_round_trips() {
        let set = wake_set(&WakeConfig::default(), 21);
        let b = compute_pod_from_set(&set, FieldKind::Velocity, 10, PodMethod::Svd).unwrap();
        let m0 = b.mode(0).to_vec();
        let c = b.project_values(&m0, b.n_modes()).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-10 && c[1..].iter().all(|v| v.abs() < 1e-10));
        let combo: Vec<f64> = b.mode(0).iter().zip(b.mode(1)).map(|(x, y)| 2.0 * x + 3.0 * y).collect();
        let c = b.project_values(&combo, 3).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-10 && (c[1] - 3.0).abs() < 1e-10 && c[2].abs() < 1e-10);

        let trajs = project(&set, &b, b.rank()).unwrap();
        let cols = set.field_columns(FieldKind::Velocity);
        let w = b.weights();
        for (k, col) in cols.iter().enumerate() {
            let row = &trajs[k / set.n_t()].coeffs[k % set.n_t()];
            let rec = reconstruct(row, &b).unwrap();
            let d: Vec<f64> = rec.iter().zip(col.iter()).map(|(a, b)| a - b).collect();
            assert!(weighted_dot(&w, &d, &d).sqrt() <= 1e-8 * weighted_dot(&w, col, col).sqrt());
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = b.project_values(&reconstruct(&c, &b).unwrap(), 5).unwrap();
        for (x, y) in c.iter().zip(&back) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(reconstruct(&[0.0; 3], &b).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(reconstruct(&[1.0], &b).unwrap(), b.mode(0));
    }

    #[test]
    fn projection_error_nonincreasing_in_r() {
        let set = wake_set(&WakeConfig::default(), 21);
        let b = compute_pod_from_set(&set, FieldKind::Velocity, 10, PodMethod::Svd).unwrap();
        let w = b.weights();
        for col in set.field_columns(FieldKind::Velocity).iter().step_by(7) {
            let mut prev = f64::INFINITY;
            for r in 0..=b.n_modes() {
                let rec = reconstruct(&b.project_values(col, r).unwrap(), &b).unwrap();
                let d: Vec<f64> = rec.iter().zip(col.iter()).map(|(a, b)| a - b).collect();
                let e = weighted_dot(&w, &d, &d).sqrt();
                assert!(e <= prev + 1e-12);
                prev = e;
            }
        }
    }

    #[test]
    fn deterministic_and_sign_fixed() {
        let set = wake_set(&WakeConfig::default(), 21);
        let a = compute_pod_from_set(&set, FieldKind::Pressure, 4, PodMethod::Svd).unwrap();
        let b = compute_pod_from_set(&set, FieldKind::Pressure, 4, PodMethod::Svd).unwrap();
        assert_eq!(a, b);
        for m in a.modes() {
            assert!(*m.iter().find(|v| v.abs() > 1e-12).unwrap() > 0.0);
        }
    }

    #[test]
    fn basis_file_round_trip() {
        let set = wake_set(&WakeConfig::default(), 11);
        let b = compute_pod_from_set(&set, FieldKind::Velocity, 3, PodMethod::Svd).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.pod");
        write_basis(&b, &p).unwrap();
        assert_eq!(read_basis(&p).unwrap(), b);
    }
}
