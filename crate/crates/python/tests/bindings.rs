use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &std::ffi::CStr) -> PyResult<()> {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "ddrom")?;
        ddrom_py::ddrom_module(&m)?;
        let globals = PyDict::new(py);
        globals.set_item("ddrom", m)?;
        py.run(code, Some(&globals), None)
    })
}

#[test]
fn taylor_green_round_trip() {
    run(c"
import math
grid = ddrom.Grid(13, 13, 1.0, 1.0)
snaps = ddrom.taylor_green(grid, [1e-2], 0.0, 0.05, 5)
u = ddrom.compute_pod(snaps, 'velocity', 1)
p = ddrom.compute_pod(snaps, 'pressure', 1)
ops = ddrom.assemble(u, p, 1, 1)
assert len(ops.matrix('B')) == 1 and len(ops.tensor('C')) == 1
a0 = u.project(snaps.columns('velocity')[0], 1)
b0 = p.project(snaps.columns('pressure')[0], 1)
traj = ddrom.solve(ops, a0, b0, 1e-2, 1e-3, 50)
assert len(traj) == 51 and not traj.blew_up
")
    .unwrap();
}

#[test]
fn errors_surface_as_python_exceptions() {
    run(c"
grid = ddrom.Grid(9, 9, 1.0, 1.0)
snaps = ddrom.taylor_green(grid, [1e-2], 0.0, 0.05, 3)
try:
    ddrom.compute_pod(snaps, 'vorticity', 1)
    raise AssertionError('accepted')
except ddrom.DdromError as e:
    assert 'vorticity' in str(e)
try:
    ddrom.Grid(1, 9, 1.0, 1.0)
    raise AssertionError('accepted')
except ddrom.DdromError:
    pass
")
    .unwrap();
}

#[test]
fn ansatz_fit_recovers_planted_terms() {
    run(c"
states = [[0.3 * i - 1.0, 0.1 * i * i - 0.5] for i in range(20)]
targets = [[x + 2 * y * y, x * y] for x, y in states]
fit = ddrom.QuadraticAnsatz.fit(states, targets)
assert not fit.rank_deficient
assert max(abs(v) for v in (fit.a_tilde[0] - 1.0, fit.a_tilde[1], fit.residual)) < 1e-10
")
    .unwrap();
}
