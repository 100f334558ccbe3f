//! Parametric snapshot database: analytic Taylor–Green vortex, a synthetic
//! two-harmonic periodic wake, a Smagorinsky eddy viscosity and the binary
//! snapshot file.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{velocity_gradient, ScalarField, StructuredGrid2D, VectorField2D};
use crate::io::{fmt_f64, ContainerReader, ContainerWriter};

const SNAP_MAGIC: &str = "DDROM-SNAP";
const SNAP_VERSION: &str = "v1";

/// Time windows and viscosity sets for the offline (training) and online
/// (testing) stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterGrid {
    /// `[t0, t1]`
    pub t_offline: [f64; 2],
    /// `[t0, t2]`, `t2 ≥ t1`
    pub t_online: [f64; 2],
    pub dt_offline: f64,
    pub dt_online: f64,
    pub nu_train: Vec<f64>,
    pub nu_test: Vec<f64>,
}

/// A set of `(t, ν)` samples: viscosities outer, uniformly spaced times inner.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub nus: Vec<f64>,
    pub t0: f64,
    pub dt: f64,
    pub n_t: usize,
}

impl SampleSet {
    pub fn times(&self) -> Vec<f64> {
        (0..self.n_t).map(|i| self.t0 + i as f64 * self.dt).collect()
    }
}

fn steps_in(window: [f64; 2], dt: f64, what: &str) -> Result<usize> {
    let n = (window[1] - window[0]) / dt;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::config(format!(
            "{what}: window [{}, {}] is not a multiple of dt = {dt}",
            window[0], window[1]
        )));
    }
    Ok(rounded as usize + 1)
}

fn check_viscosities(nus: &[f64], what: &str) -> Result<()> {
    if nus.is_empty() {
        return Err(Error::config(format!("{what} must not be empty")));
    }
    for w in nus.windows(2) {
        if w[1] == w[0] {
            return Err(Error::config(format!("{what} contains duplicate viscosity {}", w[0])));
        }
        if w[1] < w[0] {
            return Err(Error::config(format!("{what} must be sorted ascending")));
        }
    }
    if let Some(nu) = nus.iter().find(|nu| !(nu.is_finite() && **nu > 0.0)) {
        return Err(Error::config(format!("{what} contains non-positive viscosity {nu}")));
    }
    Ok(())
}

impl ParameterGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_offline > 0.0 && self.dt_online > 0.0) {
            return Err(Error::config("dt_offline and dt_online must be positive"));
        }
        let [t0, t1] = self.t_offline;
        let [s0, t2] = self.t_online;
        if !(t1 > t0) {
            return Err(Error::config("t_offline must satisfy t1 > t0"));
        }
        if s0 != t0 || t2 < t1 {
            return Err(Error::config(
                "t_online must start at the offline start time and end no earlier than t_offline",
            ));
        }
        check_viscosities(&self.nu_train, "nu_train")?;
        if !self.nu_test.is_empty() {
            check_viscosities(&self.nu_test, "nu_test")?;
        }
        steps_in(self.t_offline, self.dt_offline, "t_offline")?;
        steps_in(self.t_online, self.dt_online, "t_online")?;
        Ok(())
    }

    pub fn offline(&self) -> Result<SampleSet> {
        self.validate()?;
        Ok(SampleSet {
            nus: self.nu_train.clone(),
            t0: self.t_offline[0],
            dt: self.dt_offline,
            n_t: steps_in(self.t_offline, self.dt_offline, "t_offline")?,
        })
    }

    /// Online window at the test viscosities (the reference solutions the
    /// ROMs are scored against).
    pub fn online(&self) -> Result<SampleSet> {
        self.validate()?;
        if self.nu_test.is_empty() {
            return Err(Error::config("nu_test is empty"));
        }
        Ok(SampleSet {
            nus: self.nu_test.clone(),
            t0: self.t_online[0],
            dt: self.dt_online,
            n_t: steps_in(self.t_online, self.dt_online, "t_online")?,
        })
    }
}

/// Velocity, pressure and eddy viscosity at one `(t, ν)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSnapshot {
    pub t: f64,
    pub nu: f64,
    pub u: VectorField2D,
    pub p: ScalarField,
    pub nu_t: ScalarField,
}

/// Ordered snapshots, viscosity-major then time.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    grid: StructuredGrid2D,
    n_t: usize,
    n_m: usize,
    dt: f64,
    t0: f64,
    snapshots: Vec<FieldSnapshot>,
}

impl SnapshotSet {
    pub fn new(
        grid: StructuredGrid2D,
        n_t: usize,
        n_m: usize,
        dt: f64,
        t0: f64,
        snapshots: Vec<FieldSnapshot>,
    ) -> Result<Self> {
        let set = Self {
            grid,
            n_t,
            n_m,
            dt,
            t0,
            snapshots,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.snapshots.len() != self.n_t * self.n_m {
            return Err(Error::Data(format!(
                "snapshot set holds {} snapshots, expected N_T·N_M = {}",
                self.snapshots.len(),
                self.n_t * self.n_m
            )));
        }
        if self.n_t > 1 && !(self.dt > 0.0) {
            return Err(Error::Data("snapshot spacing dt must be positive".into()));
        }
        let tol = 1e-9 * self.dt.abs().max(1e-300) + 1e-12 * self.t0.abs();
        for (m, block) in self.snapshots.chunks(self.n_t.max(1)).enumerate() {
            let nu = block[0].nu;
            for (k, s) in block.iter().enumerate() {
                self.grid.check_same(s.u.grid())?;
                self.grid.check_same(s.p.grid())?;
                self.grid.check_same(s.nu_t.grid())?;
                if s.nu != nu {
                    return Err(Error::Data(format!(
                        "viscosity block {m} mixes viscosities {nu} and {}",
                        s.nu
                    )));
                }
                let expected = self.t0 + k as f64 * self.dt;
                if (s.t - expected).abs() > tol.max(1e-12 * expected.abs()) {
                    return Err(Error::Data(format!(
                        "snapshot {k} of viscosity block {m} at t = {} breaks the uniform spacing (expected {expected})",
                        s.t
                    )));
                }
                if let Some(v) = s.nu_t.values().iter().find(|v| **v < 0.0) {
                    return Err(Error::Data(format!("negative eddy viscosity {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &StructuredGrid2D {
        &self.grid
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_m(&self) -> usize {
        self.n_m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[FieldSnapshot] {
        &self.snapshots
    }

    pub fn viscosities(&self) -> Vec<f64> {
        self.snapshots.chunks(self.n_t.max(1)).map(|b| b[0].nu).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots[..self.n_t].iter().map(|s| s.t).collect()
    }

    /// Snapshots of the `m`-th viscosity, in time order.
    pub fn block(&self, m: usize) -> &[FieldSnapshot] {
        &self.snapshots[m * self.n_t..(m + 1) * self.n_t]
    }

    pub fn field_columns(&self, kind: FieldKind) -> Vec<&[f64]> {
        self.snapshots
            .iter()
            .map(|s| match kind {
                FieldKind::Velocity => s.u.values(),
                FieldKind::Pressure => s.p.values(),
                FieldKind::EddyViscosity => s.nu_t.values(),
            })
            .collect()
    }
}

/// Field family a snapshot column or POD basis belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Velocity,
    Pressure,
    EddyViscosity,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Velocity => "velocity",
            FieldKind::Pressure => "pressure",
            FieldKind::EddyViscosity => "eddy_viscosity",
        }
    }

    pub fn components(self) -> usize {
        match self {
            FieldKind::Velocity => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "velocity" => Ok(FieldKind::Velocity),
            "pressure" => Ok(FieldKind::Pressure),
            "eddy_viscosity" => Ok(FieldKind::EddyViscosity),
            other => Err(Error::config(format!("unknown field kind `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Eddy viscosity
// ---------------------------------------------------------------------------

/// Smagorinsky constant and filter width; `delta = None` uses `√(dx·dy)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Smagorinsky {
    pub cs: f64,
    pub delta: Option<f64>,
}

impl Default for Smagorinsky {
    fn default() -> Self {
        Self {
            cs: 0.17,
            delta: None,
        }
    }
}

/// `ν_t = (cs·Δ)² √(2 E_ij E_ij)` with `E = ½(∇u + ∇uᵀ)`.
pub fn compute_eddy_viscosity(u: &VectorField2D, cs: f64, delta: f64) -> Result<ScalarField> {
    if !(cs > 0.0 && delta > 0.0) {
        return Err(Error::config(format!(
            "Smagorinsky needs cs > 0 and delta > 0, got cs = {cs}, delta = {delta}"
        )));
    }
    let g = velocity_gradient(u);
    let c2 = (cs * delta).powi(2);
    let values = (0..u.grid().len())
        .map(|k| {
            let exx = g.dudx[k];
            let eyy = g.dvdy[k];
            let exy = 0.5 * (g.dudy[k] + g.dvdx[k]);
            let ee = exx * exx + eyy * eyy + 2.0 * exy * exy;
            c2 * (2.0 * ee).sqrt()
        })
        .collect();
    ScalarField::new(*u.grid(), values)
}

impl Smagorinsky {
    pub fn apply(&self, u: &VectorField2D) -> Result<ScalarField> {
        let g = u.grid();
        let delta = self.delta.unwrap_or_else(|| (g.dx() * g.dy()).sqrt());
        compute_eddy_viscosity(u, self.cs, delta)
    }
}

// ---------------------------------------------------------------------------
// Taylor–Green
// ---------------------------------------------------------------------------

pub fn taylor_green_velocity(grid: StructuredGrid2D, nu: f64, t: f64) -> VectorField2D {
    let f = (-8.0 * PI * PI * nu * t).exp();
    VectorField2D::from_fn(grid, |x, y| {
        let (sx, cx) = (2.0 * PI * x).sin_cos();
        let (sy, cy) = (2.0 * PI * y).sin_cos();
        [cx * sy * f, -sx * cy * f]
    })
}

pub fn taylor_green_pressure(grid: StructuredGrid2D, nu: f64, t: f64) -> ScalarField {
    let f = (-16.0 * PI * PI * nu * t).exp();
    ScalarField::from_fn(grid, |x, y| -0.25 * ((4.0 * PI * x).cos() + (4.0 * PI * y).cos()) * f)
}

fn check_unit_square(grid: &StructuredGrid2D) -> Result<()> {
    if grid.lx() != 1.0 || grid.ly() != 1.0 {
        return Err(Error::config(format!(
            "Taylor–Green generator needs the unit square, got {}x{}",
            grid.lx(),
            grid.ly()
        )));
    }
    Ok(())
}

/// Exact decaying Taylor–Green vortex sampled at every `(t, ν)` of `samples`.
pub fn generate_taylor_green(
    grid: StructuredGrid2D,
    samples: &SampleSet,
    eddy: &Smagorinsky,
) -> Result<SnapshotSet> {
    check_unit_square(&grid)?;
    let times = samples.times();
    let pairs: Vec<(f64, f64)> = samples
        .nus
        .iter()
        .flat_map(|&nu| times.iter().map(move |&t| (nu, t)))
        .collect();
    let snaps = pairs
        .par_iter()
        .map(|&(nu, t)| {
            let u = taylor_green_velocity(grid, nu, t);
            let nu_t = eddy.apply(&u)?;
            Ok(FieldSnapshot {
                t,
                nu,
                p: taylor_green_pressure(grid, nu, t),
                u,
                nu_t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SnapshotSet::new(grid, samples.n_t, samples.nus.len(), samples.dt, samples.t0, snaps)
}

// ---------------------------------------------------------------------------
// Synthetic wake
// ---------------------------------------------------------------------------

/// Two-harmonic travelling wave on a uniform stream, with a Gaussian
/// cross-stream envelope:
///
/// `u = (U∞, 0) + Σ_m A_m(ν) [sin(m k x − m Ω t), β cos(m k x − m Ω t)] g(y)`
///
/// with `A_m(ν) = A_m (ν_ref/ν)^α`, `Ω(ν) = Ω₀ (ν_ref/ν)^γ` and
/// `g(y) = exp(−((y − y_c)/σ(ν))²)`, `σ(ν) = σ₀ (ν/ν_ref)^κ`. The pressure
/// is `p = −A_1(ν) cos(k x − Ω t) g(y)`.
///
/// With `κ = 0` every harmonic spans exactly two spatial directions, so the
/// velocity snapshot matrix has rank ≤ 5 including the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WakeConfig {
    pub u_inf: f64,
    /// Number of wavelengths across `lx`; `k = 2π·periods/lx`.
    pub periods: f64,
    pub omega0: f64,
    pub nu_ref: f64,
    pub omega_exponent: f64,
    pub amplitudes: [f64; 2],
    pub amplitude_exponent: f64,
    pub beta: f64,
    pub envelope_width: f64,
    pub width_exponent: f64,
    /// Envelope centre; `None` is mid-height.
    pub center: Option<f64>,
}

impl Default for WakeConfig {
    fn default() -> Self {
        Self {
            u_inf: 1.0,
            periods: 1.0,
            omega0: 7.5,
            nu_ref: 1e-4,
            omega_exponent: 0.15,
            amplitudes: [0.3, 0.1],
            amplitude_exponent: 0.2,
            beta: 0.5,
            envelope_width: 0.15,
            width_exponent: 0.0,
            center: None,
        }
    }
}

impl WakeConfig {
    pub fn omega(&self, nu: f64) -> f64 {
        self.omega0 * (self.nu_ref / nu).powf(self.omega_exponent)
    }

    pub fn amplitude(&self, m: usize, nu: f64) -> f64 {
        self.amplitudes[m] * (self.nu_ref / nu).powf(self.amplitude_exponent)
    }

    pub fn width(&self, nu: f64) -> f64 {
        self.envelope_width * (nu / self.nu_ref).powf(self.width_exponent)
    }

    pub fn wavenumber(&self, lx: f64) -> f64 {
        2.0 * PI * self.periods / lx
    }

    /// Oscillation period of the leading harmonic.
    pub fn period(&self, nu: f64) -> f64 {
        2.0 * PI / self.omega(nu)
    }

    fn validate(&self, nus: &[f64]) -> Result<()> {
        if self.amplitudes.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config("wake amplitudes must be non-negative"));
        }
        if !(self.periods > 0.0) {
            return Err(Error::config("wake needs a positive number of spatial periods"));
        }
        if !(self.envelope_width > 0.0 && self.nu_ref > 0.0) {
            return Err(Error::config("wake envelope width and nu_ref must be positive"));
        }
        for &nu in nus {
            let om = self.omega(nu);
            if !(om.is_finite() && om > 0.0) {
                return Err(Error::config(format!(
                    "wake frequency Ω(ν = {nu}) = {om} gives no finite period"
                )));
            }
        }
        Ok(())
    }

    pub fn velocity(&self, grid: StructuredGrid2D, nu: f64, t: f64) -> VectorField2D {
        let k = self.wavenumber(grid.lx());
        let om = self.omega(nu);
        let yc = self.center.unwrap_or(0.5 * grid.ly());
        let sigma = self.width(nu);
        let amps = [self.amplitude(0, nu), self.amplitude(1, nu)];
        VectorField2D::from_fn(grid, |x, y| {
            let g = (-((y - yc) / sigma).powi(2)).exp();
            let mut u = self.u_inf;
            let mut v = 0.0;
            for (m, a) in amps.iter().enumerate() {
                let mm = (m + 1) as f64;
                let (s, c) = (mm * k * x - mm * om * t).sin_cos();
                u += a * s * g;
                v += a * self.beta * c * g;
            }
            [u, v]
        })
    }

    pub fn pressure(&self, grid: StructuredGrid2D, nu: f64, t: f64) -> ScalarField {
        let k = self.wavenumber(grid.lx());
        let om = self.omega(nu);
        let yc = self.center.unwrap_or(0.5 * grid.ly());
        let sigma = self.width(nu);
        let a1 = self.amplitude(0, nu);
        ScalarField::from_fn(grid, |x, y| {
            let g = (-((y - yc) / sigma).powi(2)).exp();
            -a1 * (k * x - om * t).cos() * g
        })
    }
}

pub fn generate_synthetic_wake(
    grid: StructuredGrid2D,
    samples: &SampleSet,
    wake: &WakeConfig,
    eddy: &Smagorinsky,
) -> Result<SnapshotSet> {
    wake.validate(&samples.nus)?;
    let times = samples.times();
    let pairs: Vec<(f64, f64)> = samples
        .nus
        .iter()
        .flat_map(|&nu| times.iter().map(move |&t| (nu, t)))
        .collect();
    let snaps = pairs
        .par_iter()
        .map(|&(nu, t)| {
            let u = wake.velocity(grid, nu, t);
            let nu_t = eddy.apply(&u)?;
            Ok(FieldSnapshot {
                t,
                nu,
                p: wake.pressure(grid, nu, t),
                u,
                nu_t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SnapshotSet::new(grid, samples.n_t, samples.nus.len(), samples.dt, samples.t0, snaps)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// Writes `DDROM-SNAP v1 nx ny lx ly N_T N_M dt t0`, then per snapshot
/// `t, ν, u (2·nx·ny), p (nx·ny), ν_t (nx·ny)` as little-endian `f64`.
pub fn write_snapshots(set: &SnapshotSet, path: impl AsRef<Path>) -> Result<()> {
    let g = set.grid;
    let header = format!(
        "{SNAP_MAGIC} {SNAP_VERSION} {} {} {} {} {} {} {} {}",
        g.nx(),
        g.ny(),
        fmt_f64(g.lx()),
        fmt_f64(g.ly()),
        set.n_t,
        set.n_m,
        fmt_f64(set.dt),
        fmt_f64(set.t0)
    );
    let mut w = ContainerWriter::new(&header);
    for s in &set.snapshots {
        w.f64(s.t);
        w.f64(s.nu);
        w.slice(s.u.values());
        w.slice(s.p.values());
        w.slice(s.nu_t.values());
    }
    w.write_to(path.as_ref())
}

pub fn read_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let mut r = ContainerReader::open(path.as_ref(), SNAP_MAGIC, SNAP_VERSION)?;
    r.expect_field_count(8)?;
    let nx: usize = r.field(0, "nx")?;
    let ny: usize = r.field(1, "ny")?;
    let lx: f64 = r.field(2, "lx")?;
    let ly: f64 = r.field(3, "ly")?;
    let n_t: usize = r.field(4, "N_T")?;
    let n_m: usize = r.field(5, "N_M")?;
    let dt: f64 = r.field(6, "dt")?;
    let t0: f64 = r.field(7, "t0")?;
    let grid = StructuredGrid2D::new(nx, ny, lx, ly).map_err(|e| Error::Format {
        offset: 0,
        message: format!("invalid grid in header: {e}"),
    })?;
    let n = grid.len();
    let mut snaps = Vec::with_capacity(n_t * n_m);
    for _ in 0..n_t * n_m {
        let start = r.offset();
        let t = r.f64()?;
        let nu = r.f64()?;
        let to_format = |e: Error| match e {
            Error::Format { .. } => e,
            other => Error::Format {
                offset: start,
                message: other.to_string(),
            },
        };
        let u = VectorField2D::new(grid, r.vec(2 * n)?).map_err(to_format)?;
        let p = ScalarField::new(grid, r.vec(n)?).map_err(to_format)?;
        let nu_t = ScalarField::new(grid, r.vec(n)?).map_err(to_format)?;
        snaps.push(FieldSnapshot { t, nu, u, p, nu_t });
    }
    r.finish()?;
    SnapshotSet::new(grid, n_t, n_m, dt, t0, snaps)
}
