import json
import subprocess
import sys

import numpy as np
import pytest

from vishape import cli, fem
from vishape.mesh import read_mesh

FAST = ["mesh.h=0.05", "mesh.target_h=0.05"]


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = cli.run([args[0], "--output", str(out), *args[1:]])
    return code, out


def summary(out):
    return json.loads((out / "summary.json").read_text())


def test_solve_state_zero_load(tmp_path):
    code, out = run(tmp_path, "s", "solve-state", *FAST, "f_outer=0", "f_inner=0")
    assert code == 0
    y = fem.read_field(out / "state.txt")
    assert not np.any(y)
    assert len(y) == read_mesh(out / "mesh.txt").n_vertices
    s = summary(out)
    assert s["exit_code"] == 0 and s["status"] == "ok" and "wall_time" in s


@pytest.mark.parametrize("model", ["vi", "penalized", "smoothed"])
def test_solve_state_models_and_vtk(tmp_path, model):
    code, out = run(tmp_path, model, "solve-state", "--vtk", *FAST, f"problem.model={model}",
                    "run.eps_state=1e-10")
    assert code == 0
    assert (out / "state.vtk").exists()
    assert fem.read_field(out / "state.txt").max() <= 0.5 + 1e-3


def test_resolved_config_reproduces_run(tmp_path):
    code, a = run(tmp_path, "a", "solve-state", *FAST, "--obstacle", "phi2")
    assert code == 0
    code, b = run(tmp_path, "b", "solve-state", "--config", str(a / "resolved_config.ini"))
    assert code == 0
    assert (a / "state.txt").read_bytes() == (b / "state.txt").read_bytes()
    assert "obstacle = phi2" in (a / "resolved_config.ini").read_text()


def test_unknown_key_exit_code(tmp_path):
    code, _ = run(tmp_path, "x", "solve-state", "run.no_such_key=1")
    assert code == cli.EXIT_CONFIG
    code, _ = run(tmp_path, "y", "solve-state", "nonsense")
    assert code == cli.EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nwhatever = 3\n")
    code, _ = run(tmp_path, "z", "solve-state", "--config", str(bad))
    assert code == cli.EXIT_CONFIG


def test_invalid_values_exit_code(tmp_path):
    assert run(tmp_path, "a", "solve-state", "run.ls_shrink=2")[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "b", "solve-state", "problem.obstacle=x3")[0] == cli.EXIT_CONFIG
    code, out = run(tmp_path, "c", "solve-state", *FAST, "problem.model=bogus")
    assert code == cli.EXIT_CONFIG
    assert summary(out)["exit_code"] == cli.EXIT_CONFIG


def test_missing_mesh_file_is_io_error(tmp_path):
    code, out = run(tmp_path, "m", "solve-state", f"mesh.mesh_file={tmp_path / 'nope.txt'}")
    assert code == cli.EXIT_IO


def test_bad_mesh_parameters_are_solver_errors(tmp_path):
    code, _ = run(tmp_path, "m", "solve-state", "mesh.radius=0.7")
    assert code == cli.EXIT_SOLVER


def test_study_sign_single_row(tmp_path):
    code, out = run(tmp_path, "s", "study-sign", *FAST, "c_list=1e3", "gamma_list=1e2")
    assert code == 0
    (csv,) = out.glob("study_sign_*.csv")
    rows = [l for l in csv.read_text().splitlines() if not l.startswith("#")]
    assert rows[0] == "c,gamma,l1_sign,status" and len(rows) == 2
    assert summary(out)["rows"] == 1


def test_study_convergence_and_refinement(tmp_path):
    code, out = run(tmp_path, "c", "study-convergence", *FAST, "c_list=1e2", "gamma_list=10 100")
    assert code == 0 and summary(out)["rows"] == 2
    code, out = run(tmp_path, "r", "study-refinement", *FAST, "levels=2")
    assert code == 0
    (csv,) = out.glob("study_refinement_*.csv")
    assert "# gamma = 100000000.0" in csv.read_text()


def test_generate_target_then_adjoint_and_gradient(tmp_path):
    code, t = run(tmp_path, "t", "generate-target", *FAST)
    assert code == 0
    files = [f"mesh.target_mesh_file={t / 'target_mesh.txt'}", f"mesh.target_file={t / 'target.txt'}"]
    code, a = run(tmp_path, "a", "solve-adjoint", *FAST, *files)
    assert code == 0
    p = fem.read_field(a / "adjoint.txt")
    assert np.any(p) and summary(a)["n_active"] > 0
    code, g = run(tmp_path, "g", "gradient", *FAST, *files)
    assert code == 0
    U = fem.read_field(g / "shape_gradient.txt")
    assert U.shape[1] == 2 and summary(g)["grad_norm"] > 0


def test_optimize_short(tmp_path):
    code, out = run(tmp_path, "o", "optimize", *FAST, "max_iters=3", "interfaces_every=1", "snapshot_every=2")
    assert code == 0
    s = summary(out)
    assert s["iterations"] == 3 and s["status"] == "max_iters"
    lines = (out / "history.csv").read_text().splitlines()
    assert lines[0].startswith("step,J,tracking,perimeter,grad_norm,halvings,safeguard")
    tracking = [float(l.split(",")[2]) for l in lines[1:]]
    assert all(b <= 0.995 * a for a, b in zip(tracking, tracking[1:]))
    assert (out / "interfaces.csv").exists() and (out / "mesh_00002.txt").exists()


def test_output_root_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.run(["generate-target", *FAST]) == 0
    (d,) = (tmp_path / "root").iterdir()
    assert d.name.startswith("generate_target_")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vishape.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in cli.COMMANDS:
        assert name in proc.stdout
