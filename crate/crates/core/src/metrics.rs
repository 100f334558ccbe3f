//! Relative field errors, their time integrals and report files.
//!
//! All norms are the grid-weighted L² norms used by the POD inner product.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{band, Band, BandKind};
use crate::pod::PodBasis;
use crate::snapshots::{FieldKind, SnapshotSet};
use crate::solver::{csv_error, RomState};

pub const NORM_DESCRIPTION: &str = "grid-weighted L2(Omega) norm with trapezoidal quadrature weights";

/// `‖approx − truth‖_w / ‖truth‖_w`.
pub fn relative_l2_error(approx: &[f64], truth: &[f64], weights: &[f64]) -> Result<f64> {
    if approx.len() != truth.len() || truth.len() != weights.len() {
        return Err(Error::dim(format!(
            "field lengths differ ({}, {}, {} weights)",
            approx.len(),
            truth.len(),
            weights.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, t), w) in approx.iter().zip(truth).zip(weights) {
        num += w * (a - t) * (a - t);
        den += w * t * t;
    }
    if den == 0.0 {
        return Err(Error::UndefinedError);
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub nu: f64,
    pub field: FieldKind,
    /// `standard`, `physics`, `purely`, `hybrid`, `projection`, …
    pub label: String,
    pub times: Vec<f64>,
    #[serde(with = "lossless_f64::vec")]
    pub values: Vec<f64>,
}

fn time_tolerance(set: &SnapshotSet) -> f64 {
    1e-6 * set.dt()
}

/// Snapshot times in `[t0, t1]` that lie on the ROM grid `t0 + kΔt`.
pub fn evaluation_times(set: &SnapshotSet, t0: f64, t1: f64, dt_rom: f64) -> Vec<f64> {
    let tol = time_tolerance(set).min(1e-6 * dt_rom);
    set.times()
        .into_iter()
        .filter(|&t| t >= t0 - tol && t <= t1 + tol)
        .filter(|&t| {
            let k = (t - t0) / dt_rom;
            (k - k.round()).abs() * dt_rom <= tol
        })
        .collect()
}

fn snapshot_index(set: &SnapshotSet, t: f64) -> Result<usize> {
    let tol = time_tolerance(set);
    set.times()
        .iter()
        .position(|s| (s - t).abs() <= tol)
        .ok_or_else(|| Error::Data(format!("no snapshot at t = {t}")))
}

/// Error of the reconstructed trajectory against the snapshots of viscosity
/// `nu` at `times`. Times the trajectory never reached (blow-up) get an
/// infinite error.
pub fn error_series(
    states: &[RomState],
    basis: &PodBasis,
    set: &SnapshotSet,
    nu: f64,
    times: &[f64],
    label: &str,
) -> Result<ErrorSeries> {
    let field = basis.kind();
    if field == FieldKind::EddyViscosity {
        return Err(Error::config("error series are defined for velocity and pressure"));
    }
    let m = block_index(set, nu)?;
    let last = states.last().ok_or_else(|| Error::Data("empty trajectory".into()))?;
    let tol = time_tolerance(set);
    let cols = set.field_columns(field);
    let w = basis.weights();
    let values = times
        .par_iter()
        .map(|&t| {
            let k = snapshot_index(set, t)?;
            if t > last.t + tol {
                return Ok(f64::INFINITY);
            }
            let s = states
                .iter()
                .find(|s| (s.t - t).abs() <= tol)
                .ok_or_else(|| Error::Data(format!("trajectory has no state at t = {t}")))?;
            let coeffs = match field {
                FieldKind::Velocity => &s.a,
                _ => &s.b,
            };
            if coeffs.iter().any(|v| !v.is_finite()) {
                return Ok(f64::INFINITY);
            }
            let approx = basis.reconstruct_values(coeffs)?;
            relative_l2_error(&approx, cols[m * set.n_t() + k], &w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorSeries {
        nu,
        field,
        label: label.to_string(),
        times: times.to_vec(),
        values,
    })
}

/// Error of the best approximation in the first `n` modes.
pub fn projection_series(basis: &PodBasis, set: &SnapshotSet, nu: f64, n: usize, times: &[f64]) -> Result<ErrorSeries> {
    let m = block_index(set, nu)?;
    let cols = set.field_columns(basis.kind());
    let w = basis.weights();
    let values = times
        .par_iter()
        .map(|&t| {
            let truth = cols[m * set.n_t() + snapshot_index(set, t)?];
            let c = basis.project_values(truth, n)?;
            let approx = basis.reconstruct_values(&c)?;
            relative_l2_error(&approx, truth, &w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorSeries {
        nu,
        field: basis.kind(),
        label: "projection".into(),
        times: times.to_vec(),
        values,
    })
}

fn block_index(set: &SnapshotSet, nu: f64) -> Result<usize> {
    set.viscosities()
        .iter()
        .position(|&v| (v - nu).abs() <= 1e-12 * nu.abs())
        .ok_or_else(|| Error::Data(format!("no snapshots for ν = {nu}")))
}

/// Trapezoidal rule.
pub fn time_integral(series: &ErrorSeries) -> f64 {
    series
        .times
        .windows(2)
        .zip(series.values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Mean series across ensemble members plus the pointwise band.
pub fn ensemble_error_band(members: &[ErrorSeries], kind: BandKind) -> Result<(ErrorSeries, Band)> {
    let first = members.first().ok_or_else(|| Error::Data("no ensemble members".into()))?;
    if members.iter().any(|m| m.times != first.times) {
        return Err(Error::Data("ensemble series have different time grids".into()));
    }
    let n = first.times.len();
    let mut rows = vec![vec![0.0; n]; members.len()];
    for (row, m) in rows.iter_mut().zip(members) {
        row.copy_from_slice(&m.values);
    }
    let b = band(&rows, kind)?;
    let mean = ErrorSeries {
        nu: first.nu,
        field: first.field,
        label: format!("{}_mean", first.label),
        times: first.times.clone(),
        values: b.mean.clone(),
    };
    Ok((mean, b))
}

/// `t, <label>…` columns; every series must share the time grid.
pub fn write_series_csv(series: &[ErrorSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = series.first().ok_or_else(|| Error::Data("nothing to write".into()))?;
    if series.iter().any(|s| s.times != first.times) {
        return Err(Error::Data("series have different time grids".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend(series.iter().map(|s| s.label.clone()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (k, t) in first.times.iter().enumerate() {
        let mut rec = vec![format!("{t:?}")];
        rec.extend(series.iter().map(|s| format!("{:?}", s.values[k])));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Same columns as the CSV, whitespace separated with a `#` header.
pub fn write_series_dat(series: &[ErrorSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = series.first().ok_or_else(|| Error::Data("nothing to write".into()))?;
    let mut out = String::from("# t");
    for s in series {
        out.push(' ');
        out.push_str(&s.label);
    }
    out.push('\n');
    for (k, t) in first.times.iter().enumerate() {
        out.push_str(&format!("{t:.10e}"));
        for s in series {
            out.push_str(&format!(" {:.10e}", s.values[k]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub nu: f64,
    pub field: FieldKind,
    pub label: String,
    #[serde(with = "lossless_f64")]
    pub integral: f64,
    #[serde(with = "lossless_f64")]
    pub max: f64,
    pub blow_up: bool,
}

impl SummaryEntry {
    pub fn from_series(s: &ErrorSeries) -> Self {
        Self {
            nu: s.nu,
            field: s.field,
            label: s.label.clone(),
            integral: time_integral(s),
            max: s.values.iter().copied().fold(0.0, f64::max),
            blow_up: s.values.iter().any(|v| !v.is_finite()),
        }
    }
}

/// JSON has no infinities: non-finite values are written as strings.
pub(crate) mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(Deserialize)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                if x.is_finite() {
                    seq.serialize_element(x)?;
                } else {
                    seq.serialize_element(&x.to_string())?;
                }
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub norm: String,
    pub entries: Vec<SummaryEntry>,
}

impl Summary {
    pub fn new(series: &[ErrorSeries]) -> Self {
        Self {
            norm: NORM_DESCRIPTION.into(),
            entries: series.iter().map(SummaryEntry::from_series).collect(),
        }
    }

    pub fn find(&self, nu: f64, field: FieldKind, label: &str) -> Option<&SummaryEntry> {
        self.entries
            .iter()
            .find(|e| e.field == field && e.label == label && (e.nu - nu).abs() <= 1e-12 * nu.abs())
    }

    /// Plain-text table, one row per entry.
    pub fn table(&self) -> String {
        let mut out = format!("# errors in the {}\n", self.norm);
        out.push_str(&format!("{:>12} {:>9} {:>16} {:>14} {:>14}\n", "nu", "field", "model", "integral", "max"));
        for e in &self.entries {
            out.push_str(&format!(
                "{:>12.4e} {:>9} {:>16} {:>14.6e} {:>14.6e}\n",
                e.nu,
                e.field.name(),
                e.label,
                e.integral,
                e.max
            ));
        }
        out
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::StructuredGrid2D;
    use crate::pod::{compute_pod_from_set, project, PodMethod};
    use crate::snapshots::{generate_synthetic_wake, ParameterGrid, Smagorinsky, WakeConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_error_values() {
        let w = [0.5, 1.0, 0.25];
        let t = [1.0, -2.0, 3.0];
        assert_eq!(relative_l2_error(&t, &t, &w).unwrap(), 0.0);
        let two: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!((relative_l2_error(&two, &t, &w).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relative_l2_error(&[0.0; 3], &t, &w).unwrap(), 1.0);
        for alpha in [-1.5, 0.3, 4.0] {
            let s: Vec<f64> = t.iter().map(|v| alpha * v).collect();
            assert!((relative_l2_error(&s, &t, &w).unwrap() - (alpha - 1.0f64).abs()).abs() < 1e-14);
        }
        assert!(matches!(relative_l2_error(&t, &[0.0; 3], &w), Err(Error::UndefinedError)));
    }

    fn series(times: Vec<f64>, values: Vec<f64>) -> ErrorSeries {
        ErrorSeries {
            nu: 1.0,
            field: FieldKind::Velocity,
            label: "x".into(),
            times,
            values,
        }
    }

    #[test]
    fn trapezoid_values() {
        let t: Vec<f64> = (0..=10).map(|k| 2.0 + 0.3 * k as f64).collect();
        assert!((time_integral(&series(t.clone(), vec![0.7; 11])) - 0.7 * 3.0).abs() < 1e-14);
        let ramp: Vec<f64> = (0..=4).map(|k| k as f64 / 4.0).collect();
        assert_eq!(time_integral(&series(ramp.clone(), ramp)), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut oracle = 0.0;
        for k in 0..49 {
            oracle += (v[k] + v[k + 1]) * 0.05;
        }
        assert!((time_integral(&series(t, v)) - oracle).abs() < 1e-12);
    }

    fn wake() -> (SnapshotSet, PodBasis) {
        let grid = StructuredGrid2D::new(25, 13, 2.0, 1.0).unwrap();
        let pg = ParameterGrid {
            t_offline: [0.0, 1.0],
            t_online: [0.0, 1.0],
            dt_offline: 0.1,
            dt_online: 0.1,
            nu_train: vec![1e-4, 2e-4],
            nu_test: vec![1.5e-4],
        };
        let set = generate_synthetic_wake(grid, &pg.offline().unwrap(), &WakeConfig::default(), &Smagorinsky::default()).unwrap();
        let basis = compute_pod_from_set(&set, FieldKind::Velocity, 5, PodMethod::Svd).unwrap();
        (set, basis)
    }

    #[test]
    fn projected_trajectory_reproduces_projection_baseline() {
        let (set, basis) = wake();
        let r = 3;
        let proj = project(&set, &basis, basis.n_modes()).unwrap();
        let nu = set.viscosities()[1];
        let states: Vec<RomState> = proj[1]
            .times
            .iter()
            .zip(&proj[1].coeffs)
            .map(|(t, c)| {
                let mut a = c[..r].to_vec();
                a.resize(basis.n_modes(), 0.0);
                RomState { t: *t, a, b: vec![] }
            })
            .collect();
        let times = evaluation_times(&set, 0.0, 1.0, 0.1);
        assert_eq!(times.len(), set.n_t());
        assert_eq!(evaluation_times(&set, 0.0, 1.0, 0.2).len(), 6);
        let s = error_series(&states, &basis, &set, nu, &times, "standard").unwrap();
        let p = projection_series(&basis, &set, nu, r, &times).unwrap();
        for (a, b) in s.values.iter().zip(&p.values) {
            assert!((a - b).abs() <= 1e-12);
        }
        // direct field-by-field recomputation at three times
        let w = basis.weights();
        let cols = set.field_columns(FieldKind::Velocity);
        for k in [0, 4, 9] {
            let mut approx = vec![0.0; w.len()];
            for (i, c) in states[k].a.iter().enumerate() {
                for (x, m) in approx.iter_mut().zip(basis.mode(i)) {
                    *x += c * m;
                }
            }
            let truth = &cols[set.n_t() + k];
            let num: f64 = approx.iter().zip(truth.iter()).zip(&w).map(|((a, t), w)| w * (a - t) * (a - t)).sum();
            let den: f64 = truth.iter().zip(&w).map(|(t, w)| w * t * t).sum();
            assert!((s.values[k] - (num / den).sqrt()).abs() <= 1e-12);
        }
        let zero: Vec<RomState> = states.iter().map(|s| RomState { t: s.t, a: vec![0.0; 5], b: vec![] }).collect();
        let z = error_series(&zero, &basis, &set, nu, &times, "standard").unwrap();
        assert!(z.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        // a truncated trajectory counts as infinite error
        let z = error_series(&zero[..4], &basis, &set, nu, &times, "standard").unwrap();
        assert!(time_integral(&z).is_infinite());
    }

    #[test]
    fn ensemble_band_of_series() {
        let a = series(vec![0.0, 1.0], vec![0.0, 1.0]);
        let b = series(vec![0.0, 1.0], vec![2.0, 1.0]);
        let (mean, band) = ensemble_error_band(&[a.clone(), b], BandKind::Conventional).unwrap();
        assert_eq!(mean.values, vec![1.0, 1.0]);
        assert_eq!(band.lower, vec![-2.0, 1.0]);
        assert_eq!(band.upper, vec![4.0, 1.0]);
        let (_, same) = ensemble_error_band(&[a.clone(), a], BandKind::Conventional).unwrap();
        assert_eq!(same.lower, same.upper);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![series(vec![0.0, 0.5], vec![0.1, 0.2]), ErrorSeries { label: "y".into(), ..series(vec![0.0, 0.5], vec![0.3, f64::INFINITY]) }];
        write_series_csv(&s, dir.path().join("e.csv")).unwrap();
        write_series_dat(&s, dir.path().join("e.dat")).unwrap();
        let sum = Summary::new(&s);
        assert!(sum.find(1.0, FieldKind::Velocity, "y").unwrap().blow_up);
        sum.write_json(dir.path().join("s.json")).unwrap();
        assert_eq!(Summary::read_json(dir.path().join("s.json")).unwrap(), sum);
        assert!(sum.table().contains("grid-weighted"));
    }
}
