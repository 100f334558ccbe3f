//! Exact corrections, the quadratic correction ansatz and the training
//! datasets for the learned closures.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{EnrichedOperators, ReducedOperators};
use crate::pod::{project, PodBasis};
use crate::snapshots::{FieldKind, SnapshotSet};
use crate::solver::{csv_error, residual, ClosureValues, TimeScheme};

/// Which right-hand side is compared between dimensions `d` and `r`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionVariant {
    /// Only the quadratic pair `aᵀCa`, `aᵀGa`.
    Nonlinear,
    /// Every operator of the steady residual, `[𝒩_d(a_d, b_h)]_{r,q} − 𝒩_r(a_r, b_q)`.
    #[default]
    FullOperator,
    /// `τ = −res_r(a_r, b_q)` including the discrete time derivative, so the
    /// projected trajectory solves the corrected reduced system exactly.
    SnapshotReferenced,
}

impl std::str::FromStr for CorrectionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlinear" => Ok(Self::Nonlinear),
            "full_operator" => Ok(Self::FullOperator),
            "snapshot_referenced" => Ok(Self::SnapshotReferenced),
            other => Err(Error::config(format!("unknown correction variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionOptions {
    pub variant: CorrectionVariant,
    /// Include the `gᵀC_T a` terms (needs eddy-viscosity tensors and data).
    pub include_turbulence: bool,
    pub penalty: f64,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        Self {
            variant: CorrectionVariant::FullOperator,
            include_turbulence: true,
            penalty: 0.0,
        }
    }
}

/// Projected coefficients of one viscosity block.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedBlock {
    pub nu: f64,
    pub times: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub g: Option<Vec<Vec<f64>>>,
}

impl ProjectedBlock {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Projects every viscosity block onto `n_u` velocity, `n_p` pressure and
/// `n_nut` eddy-viscosity modes.
pub fn project_blocks(
    set: &SnapshotSet,
    velocity: &PodBasis,
    pressure: &PodBasis,
    eddy_viscosity: Option<&PodBasis>,
    n_u: usize,
    n_p: usize,
    n_nut: usize,
) -> Result<Vec<ProjectedBlock>> {
    check_kind(velocity, FieldKind::Velocity)?;
    check_kind(pressure, FieldKind::Pressure)?;
    let a = project(set, velocity, n_u)?;
    let b = project(set, pressure, n_p)?;
    let g = match eddy_viscosity {
        Some(basis) if n_nut > 0 => {
            check_kind(basis, FieldKind::EddyViscosity)?;
            Some(project(set, basis, n_nut)?)
        }
        _ => None,
    };
    Ok(a
        .into_iter()
        .zip(b)
        .enumerate()
        .map(|(m, (a, b))| ProjectedBlock {
            nu: a.nu,
            times: a.times,
            a: a.coeffs,
            b: b.coeffs,
            g: g.as_ref().map(|g| g[m].coeffs.clone()),
        })
        .collect())
}

fn check_kind(basis: &PodBasis, kind: FieldKind) -> Result<()> {
    if basis.kind() != kind {
        return Err(Error::Data(format!(
            "expected a {} basis, got {}",
            kind.name(),
            basis.kind().name()
        )));
    }
    Ok(())
}

/// Exact corrections of one block, one row of length `r + q` per time.
/// `block` must hold at least `d`/`h` coefficients for the enriched
/// variants and at least `r`/`q` for the snapshot-referenced one.
pub fn exact_corrections(ops: &EnrichedOperators, block: &ProjectedBlock, opts: &CorrectionOptions) -> Result<Vec<Vec<f64>>> {
    let red = &ops.reduced;
    let enr = &ops.enriched;
    let (r, q, d, h) = (red.r(), red.q(), enr.r(), enr.q());
    let needed = match opts.variant {
        CorrectionVariant::SnapshotReferenced => (r, q),
        _ => (d, h),
    };
    if block.a.iter().any(|a| a.len() < needed.0) || block.b.iter().any(|b| b.len() < needed.1) {
        return Err(Error::dim(format!(
            "projected block has fewer than ({}, {}) coefficients",
            needed.0, needed.1
        )));
    }
    let g_rows = if opts.include_turbulence && red.turbulence.is_some() {
        let g = block.g.as_ref().ok_or_else(|| {
            Error::Data("turbulent exact corrections need projected eddy-viscosity coefficients".into())
        })?;
        Some(g)
    } else {
        None
    };
    let n = block.len();
    match opts.variant {
        CorrectionVariant::Nonlinear => Ok((0..n)
            .map(|k| {
                let ad = &block.a[k][..d];
                let cd = enr.momentum.c.contract(ad, ad);
                let gd = enr.ppe.g.contract(ad, ad);
                let ar = &ad[..r];
                let cr = red.momentum.c.contract(ar, ar);
                let gr = red.ppe.g.contract(ar, ar);
                let mut tau: Vec<f64> = (0..r).map(|i| cd[i] - cr[i]).collect();
                tau.extend((0..q).map(|i| gd[i] - gr[i]));
                if let Some(g) = g_rows {
                    add_turbulence_difference(&mut tau, red, enr, ad, &g[k]);
                }
                tau
            })
            .collect()),
        CorrectionVariant::FullOperator => Ok((0..n)
            .map(|k| {
                let (ad, bh) = (&block.a[k][..d], &block.b[k][..h]);
                let g = g_rows.map(|g| g[k].as_slice());
                let full = residual(enr, block.nu, opts.penalty, ad, bh, TimeScheme::Steady, 1.0, ClosureValues { g, tau: None });
                let part = residual(red, block.nu, opts.penalty, &ad[..r], &bh[..q], TimeScheme::Steady, 1.0, ClosureValues { g, tau: None });
                let mut tau: Vec<f64> = (0..r).map(|i| full[i] - part[i]).collect();
                tau.extend((0..q).map(|i| full[d + i] - part[r + i]));
                tau
            })
            .collect()),
        CorrectionVariant::SnapshotReferenced => {
            if n < 3 {
                return Err(Error::Data("snapshot-referenced corrections need at least 3 times".into()));
            }
            let dt = block.times[1] - block.times[0];
            let ar: Vec<&[f64]> = block.a.iter().map(|a| &a[..r]).collect();
            Ok((0..n)
                .map(|k| {
                    let g = g_rows.map(|g| g[k].as_slice());
                    let b = &block.b[k][..q];
                    let res = match k {
                        // second-order forward difference
                        0 => {
                            let mut res = residual(red, block.nu, opts.penalty, ar[0], b, TimeScheme::Steady, dt, ClosureValues { g, tau: None });
                            let adot: Vec<f64> = (0..r)
                                .map(|i| (-3.0 * ar[0][i] + 4.0 * ar[1][i] - ar[2][i]) / (2.0 * dt))
                                .collect();
                            for i in 0..r {
                                let m_adot: f64 = (0..r).map(|j| red.momentum.m[(i, j)] * adot[j]).sum();
                                res[i] += m_adot;
                            }
                            res
                        }
                        1 => residual(red, block.nu, opts.penalty, ar[1], b, TimeScheme::BackwardEuler { a_prev: ar[0] }, dt, ClosureValues { g, tau: None }),
                        _ => residual(
                            red,
                            block.nu,
                            opts.penalty,
                            ar[k],
                            b,
                            TimeScheme::Bdf2 { a_prev: ar[k - 1], a_prev2: ar[k - 2] },
                            dt,
                            ClosureValues { g, tau: None },
                        ),
                    };
                    res.into_iter().map(|v| -v).collect()
                })
                .collect())
        }
    }
}

/// Adds `−[gᵀC_T a_d]_{r,q} + gᵀC_T a_r` to a nonlinear correction.
fn add_turbulence_difference(tau: &mut [f64], red: &ReducedOperators, enr: &ReducedOperators, ad: &[f64], g: &[f64]) {
    let (r, q) = (red.r(), red.q());
    let (Some(tr), Some(te)) = (&red.turbulence, &enr.turbulence) else {
        return;
    };
    let ar = &ad[..r];
    let sum = |x: Vec<f64>, y: Vec<f64>| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a + b).collect() };
    let e12 = sum(te.ct1.contract(g, ad), te.ct2.contract(g, ad));
    let e34 = sum(te.ct3.contract(g, ad), te.ct4.contract(g, ad));
    let r12 = sum(tr.ct1.contract(g, ar), tr.ct2.contract(g, ar));
    let r34 = sum(tr.ct3.contract(g, ar), tr.ct4.contract(g, ar));
    for i in 0..r {
        tau[i] -= e12[i] - r12[i];
    }
    for i in 0..q {
        tau[r + i] -= e34[i] - r34[i];
    }
}

/// Per-feature standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero spread; their std is stored as 1.
    pub constant: Vec<bool>,
}

impl Scaler {
    pub fn fit(names: &[String], rows: &[Vec<f64>]) -> Result<Self> {
        let n = names.len();
        if rows.is_empty() {
            return Err(Error::Data("cannot fit a scaler on zero rows".into()));
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim(format!("scaler expects rows of length {n}")));
        }
        let m = rows.len() as f64;
        let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m).collect();
        let mut std = vec![0.0; n];
        let mut constant = vec![false; n];
        for j in 0..n {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / m;
            let s = var.sqrt();
            if s > 1e-14 * mean[j].abs().max(1e-300) && s > 0.0 {
                std[j] = s;
            } else {
                std[j] = 1.0;
                constant[j] = true;
            }
        }
        Ok(Self {
            names: names.to_vec(),
            mean,
            std,
            constant,
        })
    }

    /// Scaler that leaves values unchanged.
    pub fn identity(names: &[String]) -> Self {
        let n = names.len();
        Self {
            names: names.to_vec(),
            mean: vec![0.0; n],
            std: vec![1.0; n],
            constant: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Which inputs a learned closure sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSet {
    pub a: bool,
    pub b: bool,
    pub log_nu: bool,
    pub t: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self {
            a: true,
            b: false,
            log_nu: true,
            t: false,
        }
    }
}

impl FeatureSet {
    pub fn names(&self, r: usize, q: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.a {
            out.extend((1..=r).map(|i| format!("a_{i}")));
        }
        if self.b {
            out.extend((1..=q).map(|i| format!("b_{i}")));
        }
        if self.log_nu {
            out.push("log_nu".into());
        }
        if self.t {
            out.push("t".into());
        }
        out
    }

    pub fn assemble(&self, a: &[f64], b: &[f64], nu: f64, t: f64) -> Vec<f64> {
        let mut out = Vec::new();
        if self.a {
            out.extend_from_slice(a);
        }
        if self.b {
            out.extend_from_slice(b);
        }
        if self.log_nu {
            out.push(nu.ln());
        }
        if self.t {
            out.push(t);
        }
        out
    }
}

/// Inputs and targets of a supervised regression, grouped by viscosity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub input_names: Vec<String>,
    pub target_names: Vec<String>,
    pub nu: Vec<f64>,
    pub t: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Contiguous `(ν, range)` groups.
    pub fn groups(&self) -> Vec<(f64, std::ops::Range<usize>)> {
        let mut out: Vec<(f64, std::ops::Range<usize>)> = Vec::new();
        for (i, &nu) in self.nu.iter().enumerate() {
            match out.last_mut() {
                Some((n, range)) if *n == nu => range.end = i + 1,
                _ => out.push((nu, i..i + 1)),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub nu: f64,
    pub t: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub g: Option<Vec<f64>>,
    pub tau: Vec<f64>,
}

/// Projected coefficients paired with exact corrections.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionDataset {
    pub r: usize,
    pub q: usize,
    pub n_nut: usize,
    pub records: Vec<CorrectionRecord>,
}

impl CorrectionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn viscosities(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for rec in &self.records {
            if out.last() != Some(&rec.nu) {
                out.push(rec.nu);
            }
        }
        out
    }

    /// Exact corrections of one viscosity, one row per time.
    pub fn table(&self, nu: f64) -> Vec<Vec<f64>> {
        self.records.iter().filter(|r| r.nu == nu).map(|r| r.tau.clone()).collect()
    }

    pub fn max_abs_target(&self) -> f64 {
        self.records.iter().flat_map(|r| r.tau.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Inputs chosen by `features`, targets `τ`.
    pub fn training_set(&self, features: FeatureSet) -> TrainingSet {
        TrainingSet {
            input_names: features.names(self.r, self.q),
            target_names: (1..=self.r + self.q).map(|i| format!("tau_{i}")).collect(),
            nu: self.records.iter().map(|r| r.nu).collect(),
            t: self.records.iter().map(|r| r.t).collect(),
            inputs: self.records.iter().map(|r| features.assemble(&r.a, &r.b, r.nu, r.t)).collect(),
            targets: self.records.iter().map(|r| r.tau.clone()).collect(),
        }
    }

    /// Inputs chosen by `features`, targets the projected eddy-viscosity
    /// coefficients.
    pub fn eddy_viscosity_training_set(&self, features: FeatureSet) -> Result<TrainingSet> {
        let targets = self
            .records
            .iter()
            .map(|r| r.g.clone().ok_or_else(|| Error::Data("dataset holds no eddy-viscosity coefficients".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            input_names: features.names(self.r, self.q),
            target_names: (1..=self.n_nut).map(|i| format!("g_{i}")).collect(),
            nu: self.records.iter().map(|r| r.nu).collect(),
            t: self.records.iter().map(|r| r.t).collect(),
            inputs: self.records.iter().map(|r| features.assemble(&r.a, &r.b, r.nu, r.t)).collect(),
            targets,
        })
    }

    fn column_names(&self) -> Vec<String> {
        let mut h = vec!["nu".to_string(), "t".to_string()];
        h.extend((1..=self.r).map(|i| format!("a_{i}")));
        h.extend((1..=self.q).map(|i| format!("b_{i}")));
        h.extend((1..=self.n_nut).map(|i| format!("g_{i}")));
        h.extend((1..=self.r + self.q).map(|i| format!("tau_{i}")));
        h
    }

    fn row(&self, rec: &CorrectionRecord) -> Vec<f64> {
        let mut row = vec![rec.nu, rec.t];
        row.extend_from_slice(&rec.a);
        row.extend_from_slice(&rec.b);
        match &rec.g {
            Some(g) => row.extend_from_slice(g),
            None => row.extend(std::iter::repeat(0.0).take(self.n_nut)),
        }
        row.extend_from_slice(&rec.tau);
        row
    }

    /// Per-column scaler over every numeric column (ν as `ln ν`).
    pub fn scaler(&self) -> Result<Scaler> {
        let names = self.column_names();
        let rows: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| {
                let mut row = self.row(r);
                row[0] = row[0].ln();
                row
            })
            .collect();
        let mut s = Scaler::fit(&names, &rows)?;
        s.names[0] = "log_nu".into();
        Ok(s)
    }
}

pub fn scaler_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("scaler.json")
}

/// Writes the dataset CSV and its scaler JSON sidecar.
pub fn write_dataset(ds: &CorrectionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(ds.column_names()).map_err(|e| csv_error(path, e))?;
    for rec in &ds.records {
        w.write_record(ds.row(rec).iter().map(|v| format!("{v:?}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    if !ds.is_empty() {
        ds.scaler()?.write_json(scaler_sidecar_path(path))?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<CorrectionDataset> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rd.headers().map_err(|e| csv_error(path, e))?.clone();
    let count = |p: &str| headers.iter().filter(|h| h.starts_with(p)).count();
    let (r, q, n_nut, n_tau) = (count("a_"), count("b_"), count("g_"), count("tau_"));
    if n_tau != r + q || headers.len() != 2 + r + q + n_nut + n_tau {
        return Err(Error::Data(format!("{}: malformed dataset header", path.display())));
    }
    let mut records = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Data(format!("bad number `{s}` in {}", path.display()))))
            .collect::<Result<_>>()?;
        let mut o = 2;
        let mut take = |n: usize| {
            let s = v[o..o + n].to_vec();
            o += n;
            s
        };
        let a = take(r);
        let b = take(q);
        let g = take(n_nut);
        let tau = take(n_tau);
        records.push(CorrectionRecord {
            nu: v[0],
            t: v[1],
            a,
            b,
            g: if n_nut > 0 { Some(g) } else { None },
            tau,
        });
    }
    Ok(CorrectionDataset { r, q, n_nut, records })
}

/// Builds the dataset of exact corrections over every block of `set`.
pub fn compute_exact_corrections(
    set: &SnapshotSet,
    velocity: &PodBasis,
    pressure: &PodBasis,
    eddy_viscosity: Option<&PodBasis>,
    ops: &EnrichedOperators,
    opts: &CorrectionOptions,
) -> Result<CorrectionDataset> {
    let (r, q, d, h) = (ops.reduced.r(), ops.reduced.q(), ops.enriched.r(), ops.enriched.q());
    if d > velocity.n_modes() || h > pressure.n_modes() {
        return Err(Error::dim(format!(
            "enrichment (d = {d}, h = {h}) exceeds the available modes ({}, {})",
            velocity.n_modes(),
            pressure.n_modes()
        )));
    }
    let n_nut = ops.reduced.n_nut();
    let blocks = project_blocks(set, velocity, pressure, eddy_viscosity, d, h, n_nut)?;
    let taus = blocks
        .par_iter()
        .map(|b| exact_corrections(ops, b, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(set.len());
    for (block, tau) in blocks.iter().zip(taus) {
        for (k, tau) in tau.into_iter().enumerate() {
            records.push(CorrectionRecord {
                nu: block.nu,
                t: block.times[k],
                a: block.a[k][..r].to_vec(),
                b: block.b[k][..q].to_vec(),
                g: block.g.as_ref().map(|g| g[k].clone()),
                tau,
            });
        }
    }
    Ok(CorrectionDataset { r, q, n_nut, records })
}

/// `(a_r, ν, t) → g` records from projected eddy-viscosity snapshots.
pub fn build_g_dataset(
    set: &SnapshotSet,
    velocity: &PodBasis,
    pressure: &PodBasis,
    eddy_viscosity: &PodBasis,
    r: usize,
    q: usize,
    n_nut: usize,
) -> Result<CorrectionDataset> {
    let blocks = project_blocks(set, velocity, pressure, Some(eddy_viscosity), r, q, n_nut)?;
    let mut records = Vec::with_capacity(set.len());
    for block in &blocks {
        for k in 0..block.len() {
            records.push(CorrectionRecord {
                nu: block.nu,
                t: block.times[k],
                a: block.a[k].clone(),
                b: block.b[k].clone(),
                g: block.g.as_ref().map(|g| g[k].clone()),
                tau: vec![0.0; r + q],
            });
        }
    }
    Ok(CorrectionDataset { r, q, n_nut, records })
}

/// `τ ≈ Ã x + xᵀB̃x` with `x = [a; b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticAnsatz {
    pub n: usize,
    /// Row-major `n × n`.
    pub a_tilde: Vec<f64>,
    /// `B̃_ijk` at `(i * n + j) * n + k`, symmetric in `j, k`.
    pub b_tilde: Vec<f64>,
    /// Root-mean-square fit residual over all targets.
    pub residual: f64,
    /// Feature matrix was rank deficient; minimum-norm solution taken.
    pub rank_deficient: bool,
}

fn monomials(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut f = x.to_vec();
    for i in 0..n {
        for j in i..n {
            f.push(x[i] * x[j]);
        }
    }
    f
}

impl QuadraticAnsatz {
    pub fn n_features(n: usize) -> usize {
        n + n * (n + 1) / 2
    }

    /// Least squares in the monomials `[x, x_i x_j (i ≤ j)]`, all outputs
    /// jointly.
    pub fn fit(states: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let m = states.len();
        if m == 0 || targets.len() != m {
            return Err(Error::Data(format!("ansatz fit needs matching rows ({m} states, {} targets)", targets.len())));
        }
        let n = states[0].len();
        if states.iter().any(|s| s.len() != n) || targets.iter().any(|t| t.len() != n) {
            return Err(Error::dim(format!("ansatz states and targets must have length {n}")));
        }
        let p = Self::n_features(n);
        let feats: Vec<Vec<f64>> = states.iter().map(|x| monomials(x)).collect();
        // column scaling keeps the SVD threshold meaningful
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let s = feats.iter().map(|f| f[j] * f[j]).sum::<f64>().sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let f = DMatrix::from_fn(m, p, |i, j| feats[i][j] / scale[j]);
        let y = DMatrix::from_fn(m, n, |i, j| targets[i][j]);
        let svd = f.clone().svd(true, true);
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let eps = smax * 1e-12 * (m.max(p) as f64);
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        let rank_deficient = m < p || rank < p;
        let coef = if smax == 0.0 {
            DMatrix::zeros(p, n)
        } else {
            svd.solve(&y, eps).map_err(|e| Error::Closure(format!("least squares failed: {e}")))?
        };
        let fitted = &f * &coef;
        let residual = ((&fitted - &y).norm_squared() / (m * n) as f64).sqrt();
        let mut a_tilde = vec![0.0; n * n];
        let mut b_tilde = vec![0.0; n * n * n];
        for out in 0..n {
            for j in 0..n {
                a_tilde[out * n + j] = coef[(j, out)] / scale[j];
            }
            let mut col = n;
            for j in 0..n {
                for k in j..n {
                    let c = coef[(col, out)] / scale[col];
                    if j == k {
                        b_tilde[(out * n + j) * n + k] = c;
                    } else {
                        b_tilde[(out * n + j) * n + k] = 0.5 * c;
                        b_tilde[(out * n + k) * n + j] = 0.5 * c;
                    }
                    col += 1;
                }
            }
        }
        Ok(Self {
            n,
            a_tilde,
            b_tilde,
            residual,
            rank_deficient,
        })
    }

    pub fn fit_dataset(ds: &CorrectionDataset) -> Result<Self> {
        let states: Vec<Vec<f64>> = ds.records.iter().map(|r| r.a.iter().chain(&r.b).copied().collect()).collect();
        let targets: Vec<Vec<f64>> = ds.records.iter().map(|r| r.tau.clone()).collect();
        Self::fit(&states, &targets)
    }

    pub fn evaluate(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    s += self.a_tilde[i * n + j] * x[j];
                    for k in 0..n {
                        s += self.b_tilde[(i * n + j) * n + k] * x[j] * x[k];
                    }
                }
                s
            })
            .collect()
    }
}

impl crate::solver::Closure for QuadraticAnsatz {
    fn output_dim(&self) -> usize {
        self.n
    }

    fn evaluate(&self, input: &crate::solver::ClosureInput<'_>) -> Result<Vec<f64>> {
        if input.a.len() + input.b.len() != self.n {
            return Err(Error::dim(format!(
                "ansatz expects {} coefficients, got {}",
                self.n,
                input.a.len() + input.b.len()
            )));
        }
        Ok(QuadraticAnsatz::evaluate(self, input.a, input.b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{MomentumOperators, PpeOperators};
    use crate::tensor::Tensor3;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ops(rng: &mut ChaCha8Rng, r: usize, q: usize) -> ReducedOperators {
        let mut m = |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let (b, bt, h, d, n) = (m(r, r), m(r, r), m(r, q), m(q, q) + DMatrix::identity(q, q) * 3.0, m(q, r));
        let c = Tensor3::from_fn(r, r, r, |i, j, k| ((i * 7 + j * 3 + k) % 5) as f64 * 0.1 - 0.2);
        let g = Tensor3::from_fn(q, r, r, |i, j, k| ((i + j * 2 + k * 5) % 4) as f64 * 0.1 - 0.15);
        ReducedOperators {
            momentum: MomentumOperators {
                m: DMatrix::identity(r, r),
                b,
                bt,
                c,
                h,
                penalty: vec![],
            },
            ppe: PpeOperators {
                d,
                g,
                n,
                l: DVector::from_element(q, 0.05),
            },
            turbulence: None,
        }
    }

    fn block(rng: &mut ChaCha8Rng, d: usize, h: usize, n: usize) -> ProjectedBlock {
        ProjectedBlock {
            nu: 1e-2,
            times: (0..n).map(|k| k as f64 * 0.1).collect(),
            a: (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            b: (0..n).map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            g: None,
        }
    }

    #[test]
    fn no_enrichment_gives_zero_corrections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ops = random_ops(&mut rng, 3, 2);
        let eo = EnrichedOperators {
            reduced: ops.clone(),
            enriched: ops,
        };
        let blk = block(&mut rng, 3, 2, 5);
        for variant in [CorrectionVariant::Nonlinear, CorrectionVariant::FullOperator] {
            let opts = CorrectionOptions { variant, ..Default::default() };
            for tau in exact_corrections(&eo, &blk, &opts).unwrap() {
                assert!(tau.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn hand_sized_nonlinear_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enr = random_ops(&mut rng, 2, 1);
        enr.momentum.c = Tensor3::from_fn(2, 2, 2, |_, _, _| 1.0);
        let red = enr.restrict(1, 1).unwrap();
        let eo = EnrichedOperators { reduced: red, enriched: enr };
        let blk = ProjectedBlock {
            nu: 1.0,
            times: vec![0.0],
            a: vec![vec![1.0, 1.0]],
            b: vec![vec![0.0]],
            g: None,
        };
        let opts = CorrectionOptions {
            variant: CorrectionVariant::Nonlinear,
            ..Default::default()
        };
        let tau = exact_corrections(&eo, &blk, &opts).unwrap();
        assert_eq!(tau[0][0], 3.0);
    }

    #[test]
    fn full_operator_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enr = random_ops(&mut rng, 5, 3);
        let red = enr.restrict(2, 1).unwrap();
        let eo = EnrichedOperators { reduced: red.clone(), enriched: enr.clone() };
        let blk = block(&mut rng, 5, 3, 4);
        let taus = exact_corrections(&eo, &blk, &CorrectionOptions::default()).unwrap();
        for (k, tau) in taus.iter().enumerate() {
            let full = residual(&enr, blk.nu, 0.0, &blk.a[k], &blk.b[k], TimeScheme::Steady, 1.0, ClosureValues::default());
            let part = residual(&red, blk.nu, 0.0, &blk.a[k][..2], &blk.b[k][..1], TimeScheme::Steady, 1.0, ClosureValues { g: None, tau: Some(tau) });
            assert!((part[0] - full[0]).abs() < 1e-12 && (part[1] - full[1]).abs() < 1e-12);
            assert!((part[2] - full[5]).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_referenced_closes_the_reduced_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let red = random_ops(&mut rng, 2, 2);
        let eo = EnrichedOperators { reduced: red.clone(), enriched: red.clone() };
        let blk = block(&mut rng, 2, 2, 6);
        let opts = CorrectionOptions {
            variant: CorrectionVariant::SnapshotReferenced,
            ..Default::default()
        };
        let taus = exact_corrections(&eo, &blk, &opts).unwrap();
        let dt = 0.1;
        for k in 2..6 {
            let res = residual(
                &red,
                blk.nu,
                0.0,
                &blk.a[k],
                &blk.b[k],
                TimeScheme::Bdf2 { a_prev: &blk.a[k - 1], a_prev2: &blk.a[k - 2] },
                dt,
                ClosureValues { g: None, tau: Some(&taus[k]) },
            );
            assert!(res.iter().all(|v| v.abs() < 1e-12), "{res:?}");
        }
    }

    fn planted(n: usize, linear_only: bool, seed: u64) -> (QuadraticAnsatz, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_tilde: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b_tilde = vec![0.0; n * n * n];
        if !linear_only {
            for i in 0..n {
                for j in 0..n {
                    for k in j..n {
                        let v = rng.random_range(-1.0..1.0);
                        b_tilde[(i * n + j) * n + k] = v;
                        b_tilde[(i * n + k) * n + j] = v;
                    }
                }
            }
        }
        let truth = QuadraticAnsatz {
            n,
            a_tilde,
            b_tilde,
            residual: 0.0,
            rank_deficient: false,
        };
        let m = 10 * QuadraticAnsatz::n_features(n);
        let states: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let targets = states.iter().map(|x| truth.evaluate(x, &[])).collect();
        (truth, states, targets)
    }

    #[test]
    fn planted_model_is_recovered() {
        let (truth, states, targets) = planted(4, false, 5);
        let fit = QuadraticAnsatz::fit(&states, &targets).unwrap();
        assert!(!fit.rank_deficient);
        let da = fit.a_tilde.iter().zip(&truth.a_tilde).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let db = fit.b_tilde.iter().zip(&truth.b_tilde).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(da <= 1e-8 && db <= 1e-8, "{da} {db}");
    }

    #[test]
    fn linear_plant_gives_vanishing_quadratic_part() {
        let (_, states, targets) = planted(3, true, 6);
        let fit = QuadraticAnsatz::fit(&states, &targets).unwrap();
        assert!(fit.b_tilde.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn zero_targets_and_trivial_evaluations() {
        let states = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.1], vec![-1.0, -1.0], vec![0.2, 0.7], vec![2.0, 2.0]];
        let targets = vec![vec![0.0, 0.0]; 6];
        let fit = QuadraticAnsatz::fit(&states, &targets).unwrap();
        assert!(fit.a_tilde.iter().chain(&fit.b_tilde).all(|v| *v == 0.0));
        assert_eq!(fit.evaluate(&[0.0], &[0.0]), vec![0.0, 0.0]);
        let id = QuadraticAnsatz {
            n: 2,
            a_tilde: vec![1.0, 0.0, 0.0, 1.0],
            b_tilde: vec![0.0; 8],
            residual: 0.0,
            rank_deficient: false,
        };
        assert_eq!(id.evaluate(&[0.3], &[-0.7]), vec![0.3, -0.7]);
    }

    #[test]
    fn underdetermined_fit_is_flagged() {
        let states = vec![vec![1.0, 2.0], vec![0.5, -1.0]];
        let targets = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let fit = QuadraticAnsatz::fit(&states, &targets).unwrap();
        assert!(fit.rank_deficient);
        for (s, t) in states.iter().zip(&targets) {
            let e = fit.evaluate(s, &[]);
            assert!((e[0] - t[0]).abs() < 1e-10 && (e[1] - t[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn scaler_round_trip_and_constant_flags() {
        let names: Vec<String> = vec!["x".into(), "y".into()];
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![-2.0, 5.0]];
        let s = Scaler::fit(&names, &rows).unwrap();
        assert_eq!(s.constant, vec![false, true]);
        for r in &rows {
            let back = s.denormalize(&s.normalize(r));
            assert!(back.iter().zip(r).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let ds = CorrectionDataset {
            r: 2,
            q: 1,
            n_nut: 1,
            records: (0..4)
                .map(|k| CorrectionRecord {
                    nu: if k < 2 { 1e-3 } else { 2e-3 },
                    t: (k % 2) as f64 * 0.1,
                    a: vec![0.1 * k as f64, 1.0 / 3.0],
                    b: vec![-0.2],
                    g: Some(vec![1e-4]),
                    tau: vec![1.0, 2.0, std::f64::consts::PI],
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        write_dataset(&ds, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), ds);
        let s = Scaler::read_json(scaler_sidecar_path(&p)).unwrap();
        assert_eq!(s.len(), 2 + 2 + 1 + 1 + 3);
        let ts = ds.training_set(FeatureSet::default());
        assert_eq!(ts.input_names, vec!["a_1", "a_2", "log_nu"]);
        assert_eq!(ts.groups().len(), 2);
    }
}
