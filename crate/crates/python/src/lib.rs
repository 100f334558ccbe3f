//! Python bindings: snapshot generation, POD, operator assembly, the ROM
//! solver, the quadratic ansatz and the staged pipeline.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use ddrom::closure::QuadraticAnsatz;
use ddrom::grid::{BoundaryTag, StructuredGrid2D};
use ddrom::operators::{self, BoundaryConditions, DirichletBoundary, ReducedOperators};
use ddrom::pipeline::{self, RunConfig, Stage};
use ddrom::pod::{self, PodMethod};
use ddrom::snapshots::{self, FieldKind, SampleSet, Smagorinsky, WakeConfig};
use ddrom::solver::{self, ClosureHooks, ConstantClosure, Outcome, RomMode, RomState, SolverConfig};
use ddrom::tensor::Tensor3;

create_exception!(ddrom, DdromError, PyException);

fn err(e: ddrom::Error) -> PyErr {
    DdromError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = ddrom::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn nested(t: &Tensor3) -> Vec<Vec<Vec<f64>>> {
    let [n0, n1, n2] = t.dims();
    (0..n0).map(|i| (0..n1).map(|j| (0..n2).map(|k| t.get(i, j, k)).collect()).collect()).collect()
}

#[pyclass(name = "Grid", module = "ddrom", frozen, from_py_object)]
#[derive(Clone)]
struct PyGrid(StructuredGrid2D);

#[pymethods]
impl PyGrid {
    #[new]
    fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> PyResult<Self> {
        StructuredGrid2D::new(nx, ny, lx, ly).map(Self).map_err(err)
    }

    #[getter]
    fn nx(&self) -> usize {
        self.0.nx()
    }

    #[getter]
    fn ny(&self) -> usize {
        self.0.ny()
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.0.dx()
    }

    #[getter]
    fn dy(&self) -> f64 {
        self.0.dy()
    }

    fn quadrature_weights(&self) -> Vec<f64> {
        self.0.quadrature_weights()
    }

    fn __repr__(&self) -> String {
        format!("Grid(nx={}, ny={}, lx={}, ly={})", self.0.nx(), self.0.ny(), self.0.lx(), self.0.ly())
    }
}

#[pyclass(name = "SnapshotSet", module = "ddrom", frozen)]
struct PySnapshotSet(snapshots::SnapshotSet);

#[pymethods]
impl PySnapshotSet {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        snapshots::read_snapshots(path).map(Self).map_err(err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        snapshots::write_snapshots(&self.0, path).map_err(err)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(*self.0.grid())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn viscosities(&self) -> Vec<f64> {
        self.0.viscosities()
    }

    fn times(&self) -> Vec<f64> {
        self.0.times()
    }

    /// Snapshot columns of one field (`velocity`, `pressure`, `eddy_viscosity`).
    fn columns(&self, field: &str) -> PyResult<Vec<Vec<f64>>> {
        let kind: FieldKind = parse(field)?;
        Ok(self.0.field_columns(kind).into_iter().map(<[f64]>::to_vec).collect())
    }
}

fn samples(nus: Vec<f64>, t0: f64, dt: f64, n_t: usize) -> SampleSet {
    SampleSet { nus, t0, dt, n_t }
}

#[pyfunction]
#[pyo3(signature = (grid, nus, t0, dt, n_t, cs = 0.17))]
fn taylor_green(grid: &PyGrid, nus: Vec<f64>, t0: f64, dt: f64, n_t: usize, cs: f64) -> PyResult<PySnapshotSet> {
    let smag = Smagorinsky { cs, ..Smagorinsky::default() };
    snapshots::generate_taylor_green(grid.0, &samples(nus, t0, dt, n_t), &smag)
        .map(PySnapshotSet)
        .map_err(err)
}

/// Synthetic wake; `wake` is an optional JSON object overriding wake settings.
#[pyfunction]
#[pyo3(signature = (grid, nus, t0, dt, n_t, wake = None, cs = 0.17))]
fn synthetic_wake(
    grid: &PyGrid,
    nus: Vec<f64>,
    t0: f64,
    dt: f64,
    n_t: usize,
    wake: Option<&str>,
    cs: f64,
) -> PyResult<PySnapshotSet> {
    let wake: WakeConfig = match wake {
        Some(s) => serde_json::from_str(s).map_err(|e| DdromError::new_err(format!("wake settings: {e}")))?,
        None => WakeConfig::default(),
    };
    let smag = Smagorinsky { cs, ..Smagorinsky::default() };
    snapshots::generate_synthetic_wake(grid.0, &samples(nus, t0, dt, n_t), &wake, &smag)
        .map(PySnapshotSet)
        .map_err(err)
}

#[pyclass(name = "PodBasis", module = "ddrom", frozen)]
struct PyPodBasis(pod::PodBasis);

#[pymethods]
impl PyPodBasis {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        pod::read_basis(path).map(Self).map_err(err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        pod::write_basis(&self.0, path).map_err(err)
    }

    #[getter]
    fn field(&self) -> &'static str {
        self.0.kind().name()
    }

    #[getter]
    fn n_modes(&self) -> usize {
        self.0.n_modes()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.rank()
    }

    fn singular_values(&self) -> Vec<f64> {
        self.0.singular_values().to_vec()
    }

    fn cumulative_energy(&self) -> PyResult<Vec<f64>> {
        self.0.cumulative_energy().map_err(err)
    }

    fn mode(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.0.n_modes() {
            return Err(DdromError::new_err(format!("mode {i} out of range ({} modes)", self.0.n_modes())));
        }
        Ok(self.0.mode(i).to_vec())
    }

    fn orthonormality_residual(&self) -> f64 {
        self.0.orthonormality_residual()
    }

    fn project(&self, field: Vec<f64>, n: usize) -> PyResult<Vec<f64>> {
        self.0.project_values(&field, n).map_err(err)
    }

    fn reconstruct(&self, coeffs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.reconstruct_values(&coeffs).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (snapshots, field, n_modes, method = "svd"))]
fn compute_pod(snapshots: &PySnapshotSet, field: &str, n_modes: usize, method: &str) -> PyResult<PyPodBasis> {
    let kind: FieldKind = parse(field)?;
    let method = match method {
        "svd" => PodMethod::Svd,
        "snapshots" => PodMethod::Snapshots,
        other => return Err(DdromError::new_err(format!("unknown POD method `{other}`"))),
    };
    pod::compute_pod_from_set(&snapshots.0, kind, n_modes, method)
        .map(PyPodBasis)
        .map_err(err)
}

#[pyclass(name = "Operators", module = "ddrom", frozen)]
struct PyOperators(Arc<ReducedOperators>);

#[pymethods]
impl PyOperators {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        operators::read_operators(path).map(|o| Self(Arc::new(o))).map_err(err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        operators::write_operators(&self.0, path).map_err(err)
    }

    #[getter]
    fn r(&self) -> usize {
        self.0.r()
    }

    #[getter]
    fn q(&self) -> usize {
        self.0.q()
    }

    #[getter]
    fn n_nut(&self) -> usize {
        self.0.n_nut()
    }

    /// A matrix operator by name: `M`, `B`, `BT`, `H`, `D`, `N`.
    fn matrix(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let (m, p) = (&self.0.momentum, &self.0.ppe);
        let mat = match name {
            "M" => &m.m,
            "B" => &m.b,
            "BT" => &m.bt,
            "H" => &m.h,
            "D" => &p.d,
            "N" => &p.n,
            other => return Err(DdromError::new_err(format!("unknown matrix operator `{other}`"))),
        };
        Ok(rows(mat))
    }

    /// A third-order operator by name: `C`, `G`, `CT1` … `CT4`.
    fn tensor(&self, name: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let turb = || {
            self.0
                .turbulence
                .as_ref()
                .ok_or_else(|| DdromError::new_err("operators were assembled without eddy viscosity"))
        };
        let t = match name {
            "C" => &self.0.momentum.c,
            "G" => &self.0.ppe.g,
            "CT1" => &turb()?.ct1,
            "CT2" => &turb()?.ct2,
            "CT3" => &turb()?.ct3,
            "CT4" => &turb()?.ct4,
            other => return Err(DdromError::new_err(format!("unknown tensor operator `{other}`"))),
        };
        Ok(nested(t))
    }

    fn ppe_boundary(&self) -> Vec<f64> {
        let l: &DVector<f64> = &self.0.ppe.l;
        l.iter().copied().collect()
    }

    fn restrict(&self, r: usize, q: usize) -> PyResult<Self> {
        self.0.restrict(r, q).map(|o| Self(Arc::new(o))).map_err(err)
    }
}

/// Assemble reduced operators. `dirichlet` lists `(side, ux, uy)` with side
/// one of `inlet`, `outlet`, `bottom`, `top`.
#[pyfunction]
#[pyo3(signature = (velocity, pressure, r, q, eddy_viscosity = None, n_nut = 0, dirichlet = vec![]))]
fn assemble(
    velocity: &PyPodBasis,
    pressure: &PyPodBasis,
    r: usize,
    q: usize,
    eddy_viscosity: Option<&PyPodBasis>,
    n_nut: usize,
    dirichlet: Vec<(String, f64, f64)>,
) -> PyResult<PyOperators> {
    let dirichlet = dirichlet
        .into_iter()
        .map(|(side, ux, uy)| Ok(DirichletBoundary { tag: parse::<BoundaryTag>(&side)?, value: [ux, uy] }))
        .collect::<PyResult<Vec<_>>>()?;
    let bc = BoundaryConditions { dirichlet, pressure_flux: None };
    let bases = operators::Bases {
        velocity: &velocity.0,
        pressure: &pressure.0,
        eddy_viscosity: eddy_viscosity.map(|b| &b.0),
    };
    operators::assemble(bases, r, q, n_nut, &bc)
        .map(|o| PyOperators(Arc::new(o)))
        .map_err(err)
}

#[pyclass(name = "Trajectory", module = "ddrom", frozen)]
struct PyTrajectory(solver::Trajectory);

#[pymethods]
impl PyTrajectory {
    fn times(&self) -> Vec<f64> {
        self.0.states.iter().map(|s| s.t).collect()
    }

    fn velocity_coefficients(&self) -> Vec<Vec<f64>> {
        self.0.states.iter().map(|s| s.a.clone()).collect()
    }

    fn pressure_coefficients(&self) -> Vec<Vec<f64>> {
        self.0.states.iter().map(|s| s.b.clone()).collect()
    }

    #[getter]
    fn blew_up(&self) -> bool {
        self.0.is_blowup()
    }

    /// `None` for a completed run, else the blow-up reason.
    #[getter]
    fn blowup_reason(&self) -> Option<String> {
        match &self.0.outcome {
            Outcome::Completed => None,
            Outcome::BlowUp { reason, .. } => Some(reason.clone()),
        }
    }

    #[getter]
    fn max_condition(&self) -> f64 {
        self.0.max_condition
    }

    #[getter]
    fn ill_conditioned(&self) -> bool {
        self.0.ill_conditioned
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        solver::write_trajectory_csv(&self.0, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.states.len()
    }
}

/// Integrate the reduced system with BDF2. A constant `correction` of length
/// `r + q` runs the purely data-driven mode with that fixed closure.
#[pyfunction]
#[pyo3(signature = (operators, a0, b0, nu, dt, n_steps, t0 = 0.0, penalty = 0.0, correction = None))]
#[allow(clippy::too_many_arguments)]
fn solve(
    operators: &PyOperators,
    a0: Vec<f64>,
    b0: Vec<f64>,
    nu: f64,
    dt: f64,
    n_steps: usize,
    t0: f64,
    penalty: f64,
    correction: Option<Vec<f64>>,
) -> PyResult<PyTrajectory> {
    let hooks = match correction {
        Some(tau) => ClosureHooks {
            mode: RomMode::Purely,
            correction: Some(Arc::new(ConstantClosure(tau))),
            ..ClosureHooks::default()
        },
        None => ClosureHooks::default(),
    };
    let cfg = SolverConfig { dt, n_steps, penalty, ..SolverConfig::default() };
    let init = RomState { t: t0, a: a0, b: b0 };
    pipeline::solve_or_report(&init, &operators.0, &hooks, nu, &cfg)
        .map(PyTrajectory)
        .map_err(err)
}

#[pyclass(name = "QuadraticAnsatz", module = "ddrom", frozen)]
struct PyQuadraticAnsatz(QuadraticAnsatz);

#[pymethods]
impl PyQuadraticAnsatz {
    /// Least-squares fit of `τ = Ã x + xᵀ B̃ x` to `(state, target)` rows.
    #[staticmethod]
    fn fit(states: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<Self> {
        QuadraticAnsatz::fit(&states, &targets).map(Self).map_err(err)
    }

    fn evaluate(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.0.n {
            return Err(DdromError::new_err(format!("expected {} components, got {}", self.0.n, x.len())));
        }
        Ok(self.0.evaluate(&x, &[]))
    }

    #[getter]
    fn a_tilde(&self) -> Vec<f64> {
        self.0.a_tilde.clone()
    }

    #[getter]
    fn b_tilde(&self) -> Vec<f64> {
        self.0.b_tilde.clone()
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.0.residual
    }

    #[getter]
    fn rank_deficient(&self) -> bool {
        self.0.rank_deficient
    }
}

#[pyclass(name = "RunConfig", module = "ddrom")]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        RunConfig::from_file(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text).map(Self).map_err(err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml_string().map_err(err)
    }

    #[getter]
    fn output_dir(&self) -> String {
        self.0.output_dir.display().to_string()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: &str) {
        self.0.output_dir = dir.into();
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }
}

/// Run the pipeline through `stage` and return the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config, stage = "report"))]
fn run_pipeline(py: Python<'_>, config: &PyRunConfig, stage: &str) -> PyResult<String> {
    let stage: Stage = parse(stage)?;
    let cfg = config.0.clone();
    let manifest = py.detach(move || pipeline::run_pipeline(&cfg, stage)).map_err(err)?;
    serde_json::to_string(&manifest).map_err(|e| DdromError::new_err(e.to_string()))
}

/// Evaluated error series, bands and outcomes of a run directory as JSON.
#[pyfunction]
fn read_evaluation(run_dir: &str) -> PyResult<String> {
    let eval = pipeline::read_evaluation(run_dir).map_err(err)?;
    serde_json::to_string(&eval).map_err(|e| DdromError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "ddrom")]
pub fn ddrom_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DdromError", m.py().get_type::<DdromError>())?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PySnapshotSet>()?;
    m.add_class::<PyPodBasis>()?;
    m.add_class::<PyOperators>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyQuadraticAnsatz>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(taylor_green, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_wake, m)?)?;
    m.add_function(wrap_pyfunction!(compute_pod, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(read_evaluation, m)?)?;
    Ok(())
}
