"""Smoke test for the ddrom extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/ddrom-*.whl
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import ddrom


def main() -> int:
    grid = ddrom.Grid(17, 17, 1.0, 1.0)
    snaps = ddrom.taylor_green(grid, [1e-2], 0.0, 0.05, 11)
    assert len(snaps) == 11

    u = ddrom.compute_pod(snaps, "velocity", 1)
    p = ddrom.compute_pod(snaps, "pressure", 1)
    assert u.orthonormality_residual() < 1e-10

    ops = ddrom.assemble(u, p, 1, 1)
    a0 = u.project(snaps.columns("velocity")[0], 1)
    b0 = p.project(snaps.columns("pressure")[0], 1)
    traj = ddrom.solve(ops, a0, b0, 1e-2, 1e-3, 200)
    assert not traj.blew_up
    t_end = traj.times()[-1]
    a_end = traj.velocity_coefficients()[-1][0]
    exact = a0[0] * math.exp(-8 * math.pi**2 * 1e-2 * t_end)
    assert abs(a_end - exact) / abs(exact) < 5e-3, (a_end, exact)

    blown = ddrom.solve(ops, a0, b0, 1e-8, 0.02, 400, correction=[1e6, -1e6])
    print("large correction:", blown.blowup_reason or "completed")

    states = [[0.3 * i - 1.0, 0.1 * i * i - 0.5] for i in range(20)]
    targets = [[x + 2 * y * y, x * y] for x, y in states]
    fit = ddrom.QuadraticAnsatz.fit(states, targets)
    assert max(abs(a - b) for a, b in zip(fit.evaluate([0.2, 0.4]), [0.2 + 0.32, 0.08])) < 1e-10

    config = Path(__file__).resolve().parent.parent / "configs" / "taylor_green.toml"
    cfg = ddrom.RunConfig.from_file(str(config))
    with tempfile.TemporaryDirectory() as out:
        cfg.output_dir = out
        manifest = json.loads(ddrom.run_pipeline(cfg, "pod"))
        assert [s["stage"] for s in manifest["stages"]] == ["generate", "pod"]

    try:
        ddrom.compute_pod(snaps, "vorticity", 1)
    except ddrom.DdromError as e:
        print("rejected unknown field:", e)
    else:
        raise AssertionError("unknown field accepted")

    print("ddrom smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
