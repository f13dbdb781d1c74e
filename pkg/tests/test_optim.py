import math

import numpy as np
import pytest

from vishape import fem, lab, optim, vi
from vishape.mesh import CellInversionError, deform_mesh, generate_disk_mesh, interface_length, read_mesh, \
    unit_square_mesh

from conftest import F


def test_objective_examples(disk, square):
    y = np.sin(disk.vertices[:, 0])
    assert optim.evaluate_objective(disk, y, y, 0.0) == (0.0, 0.0, interface_length(disk))
    J, tr, per = optim.evaluate_objective(disk, y, y, 1e-5)
    assert tr == 0.0
    assert J == pytest.approx(1e-5 * 2 * np.pi * 0.15, rel=0.02)
    plain = unit_square_mesh(6)
    J, tr, _ = optim.evaluate_objective(plain, np.ones(plain.n_vertices), np.zeros(plain.n_vertices), 0.0)
    assert J == pytest.approx(0.5, abs=1e-14) and tr == J


def test_objective_with_reference_field(disk, square):
    ref = fem.ReferenceField(square, square.vertices[:, 0])
    J, tr, per = optim.evaluate_objective(disk, disk.vertices[:, 0], ref, 1e-5)
    assert tr == pytest.approx(0.0, abs=1e-28)
    assert J == pytest.approx(tr + 1e-5 * per, abs=1e-12)


def test_config_defaults_and_validation():
    cfg = optim.RunConfig()
    assert (cfg.nu, cfg.ls_shrink, cfg.ls_accept, cfg.ls_max_halvings) == (1e-5, 0.5, 0.995, 30)
    assert (cfg.eps_state, cfg.eps_adj, cfg.mu_min, cfg.mu_max, cfg.lambda_elas) == (3e-4, 1e-9, 0.0, 25.0, 0.0)
    assert cfg.eps_shape == 1e-6
    for bad in ({"ls_shrink": 1.0}, {"ls_accept": 0.0}, {"eps_shape": 0.0}, {"eps_adj": -1.0},
                {"mu_min": 5.0, "mu_max": 1.0}, {"gamma": -1.0}, {"max_iters": -1}, {"active_term": "x"}):
        with pytest.raises(ValueError):
            optim.RunConfig(**bad)
    assert set(cfg.to_dict()) == set(optim.RunConfig.field_names())


def _fixed_objective(value):
    return lambda mesh, y: value


def test_linesearch_accepts_full_step(disk):
    cfg = optim.RunConfig()
    U = np.zeros_like(disk.vertices)
    U[disk.interface_vertices()] = [1e-3, 0.0]
    res = optim.linesearch(disk, U, 1.0, lambda m: np.zeros(m.n_vertices), cfg, _fixed_objective(0.9))
    assert res is not None and res.halvings == 0 and res.value == 0.9
    assert np.allclose(res.mesh.vertices - disk.vertices, U)


def test_linesearch_zero_step_fails(disk):
    cfg = optim.RunConfig()
    calls = []

    def objective(mesh, y):
        calls.append(1)
        return 1.0

    res = optim.linesearch(disk, np.zeros_like(disk.vertices), 1.0, lambda m: np.zeros(m.n_vertices), cfg, objective)
    assert res is None
    assert len(calls) == cfg.ls_max_halvings + 1


def _inverting_step(mesh):
    """A displacement that inverts a cell at full length but not at half length."""
    v = int(mesh.interface_vertices()[0])
    w = np.array([0.6, 0.8])
    star = np.flatnonzero((mesh.cells == v).any(axis=1))
    ts = []
    for c in star:
        a, b = [int(i) for i in mesh.cells[c] if i != v]
        pa, pb, pv = mesh.vertices[a], mesh.vertices[b], mesh.vertices[v]
        e = pb - pa
        n = np.array([-e[1], e[0]])
        denom = n @ w
        if abs(denom) > 1e-14:
            t = n @ (pa - pv) / denom
            if t > 0:
                ts.append(t)
    U = np.zeros_like(mesh.vertices)
    U[v] = 1.5 * min(ts) * w
    return U


def test_linesearch_inversion_counts_as_rejection(disk):
    cfg = optim.RunConfig()
    U = _inverting_step(disk)
    with pytest.raises(CellInversionError):
        deform_mesh(disk, U)
    res = optim.linesearch(disk, U, 1.0, lambda m: np.zeros(m.n_vertices), cfg, _fixed_objective(0.9))
    assert res is not None and res.halvings == 1


def test_linesearch_solver_failure_counts_as_rejection(disk):
    cfg = optim.RunConfig(ls_max_halvings=3)
    U = np.zeros_like(disk.vertices)
    U[disk.interface_vertices()] = [1e-3, 0.0]

    def failing(mesh):
        raise fem.SolverError("no")

    assert optim.linesearch(disk, U, 1.0, failing, cfg, _fixed_objective(0.5)) is None


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    mesh = generate_disk_mesh(0.15, 0.05)
    tmesh, ref = lab.default_target(vi.phi1(), h=0.05)
    cfg = optim.RunConfig(max_iters=6, snapshot_every=3)
    seen = []
    res = optim.optimize(cfg, mesh, ref, vi.phi1(), F, output_dir=out, keep_meshes=True, callback=seen.append)
    return cfg, res, out, seen


def test_short_run_records(short_run):
    cfg, res, out, seen = short_run
    assert res.status == "max_iters" and not res.converged
    assert [r.step for r in res.history] == list(range(7))
    assert seen == res.history
    assert len(res.meshes) == 7
    for r in res.history:
        assert r.J == pytest.approx(r.tracking + cfg.nu * r.perimeter, abs=1e-12)
        assert r.grad_norm >= 0
    for a, b in zip(res.history, res.history[1:]):
        assert b.tracking <= cfg.ls_accept * a.tracking
    assert np.all(res.mesh.areas() > 0)


def test_short_run_snapshots(short_run):
    cfg, res, out, _ = short_run
    snaps = [r.snapshot for r in res.history if r.snapshot]
    assert snaps == ["mesh_00000.txt", "mesh_00003.txt", "mesh_00006.txt"]
    back = read_mesh(out / snaps[-1])
    assert np.array_equal(back.vertices, res.mesh.vertices)


def test_history_roundtrip(tmp_path, short_run):
    _, res, _, _ = short_run
    path = tmp_path / "history.csv"
    optim.write_history(path, res.history)
    rows = optim.read_history(path)
    assert list(rows[0]) == list(optim.IterationRecord.CSV_FIELDS)
    assert [float(r["J"]) for r in rows] == [r.J for r in res.history]
    assert all(r["safeguard"] in ("0", "1") for r in rows)


def test_write_interfaces(tmp_path, short_run):
    _, res, _, _ = short_run
    path = tmp_path / "interfaces.csv"
    optim.write_interfaces(path, [(0, res.meshes[0]), (6, res.mesh)])
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loop,x,y"
    steps = {int(l.split(",")[0]) for l in lines[1:]}
    assert steps == {0, 6}


def test_stationary_start_terminates():
    mesh = generate_disk_mesh(0.15, 0.05)
    ref = fem.ReferenceField(mesh, lab.generate_target(mesh, vi.phi1(), F))
    cfg = optim.RunConfig(nu=0.0, eps_state=1e-10, eps_shape=1e-6, max_iters=5)
    res = optim.optimize(cfg, mesh, ref, vi.phi1(), F)
    assert res.history[0].grad_norm <= cfg.eps_shape
    assert res.converged and len(res.history) <= 3
    assert not math.isnan(res.history[-1].grad_norm_reg)
