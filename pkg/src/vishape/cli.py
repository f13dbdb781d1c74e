"""Command-line interface: ``vishape <subcommand> [--config FILE] [key=value ...]``.

Configuration files are INI-style with the sections listed in ``DEFAULTS``;
overrides use ``section.key=value`` or a bare ``key=value`` when the key is
unique. Every run writes ``resolved_config.ini`` and ``summary.json`` into its
output directory; feeding the echo back through ``--config`` reproduces the
run. Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import adjoint as adj
from . import fem, lab, optim, shape, vi
from .fem import ReferenceField, SolverError
from .mesh import MeshError, read_mesh, write_mesh, write_vtk

log = logging.getLogger("vishape")

OUTPUT_ROOT_ENV = "VISHAPE_OUTPUT_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

_RUN = optim.RunConfig()
DEFAULTS = {
    "problem": {
        "obstacle": "phi1",
        "f_outer": "-10.0",
        "f_inner": "100.0",
        "model": "vi",          # vi | penalized | smoothed (solve-state / solve-adjoint)
    },
    "mesh": {
        "h": "0.025",
        "radius": str(lab.INITIAL_RADIUS),
        "seed": "0",
        "mesh_file": "",
        "target_h": "0.025",
        "target_cx": str(lab.TARGET_SHAPE["center"][0]),
        "target_cy": str(lab.TARGET_SHAPE["center"][1]),
        "target_a": str(lab.TARGET_SHAPE["axes"][0]),
        "target_b": str(lab.TARGET_SHAPE["axes"][1]),
        "target_angle": str(lab.TARGET_SHAPE["angle"]),
        "target_mesh_file": "",
        "target_file": "",
    },
    "run": {k: str(v) for k, v in _RUN.to_dict().items()},
    "study": {
        "c_list": "1e2, 1e3, 1e4, 1e5",
        "gamma_list": "10, 1e2, 1e3, 1e4, 1e5",
        "levels": "3",
        "refine_gamma": "1e8",
        "refine_c": "1e5",
        "vertex_cap": "50000",
        "tol": "1e-11",
    },
    "output": {
        "vtk": "false",
        "interfaces_every": "10",
    },
}

COMMANDS = ("solve-state", "solve-adjoint", "gradient", "optimize", "study-sign",
            "study-convergence", "study-refinement", "generate-target")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    if path:
        user = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                user.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in user.sections():
            for key, value in user.items(section):
                _set(cfg, section, key, value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        section, dot, name = key.strip().rpartition(".")
        if not dot:
            owners = [s for s in DEFAULTS if name in DEFAULTS[s]]
            if len(owners) != 1:
                raise ConfigError(f"unknown or ambiguous key {name!r}")
            section = owners[0]
        _set(cfg, section, name, value.strip())
    return cfg


def _set(cfg, section, key, value):
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    cfg.set(section, key, value)


def _float(cfg, section, key):
    try:
        return cfg.getfloat(section, key)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def _floats(cfg, section, key):
    try:
        return [float(v) for v in cfg.get(section, key).replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def run_config(cfg) -> optim.RunConfig:
    kwargs = {}
    for name, default in _RUN.to_dict().items():
        raw = cfg.get("run", name)
        try:
            if isinstance(default, bool):
                kwargs[name] = cfg.getboolean("run", name)
            elif isinstance(default, int):
                kwargs[name] = int(raw)
            elif isinstance(default, float):
                kwargs[name] = float(raw)
            else:
                kwargs[name] = raw
        except ValueError as exc:
            raise ConfigError(f"run.{name}: {exc}") from exc
    try:
        return optim.RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def problem_data(cfg):
    try:
        obstacle = vi.get_obstacle(cfg.get("problem", "obstacle"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    f = (_float(cfg, "problem", "f_outer"), _float(cfg, "problem", "f_inner"))
    return obstacle, f


def _mesh(cfg):
    path = cfg.get("mesh", "mesh_file")
    if path:
        return read_mesh(path)
    return lab.initial_mesh(_float(cfg, "mesh", "h"), _float(cfg, "mesh", "radius"),
                            cfg.getint("mesh", "seed"))


def _target(cfg, obstacle, f):
    mesh_path = cfg.get("mesh", "target_mesh_file")
    if mesh_path:
        tmesh = read_mesh(mesh_path)
    else:
        shape_ = {"center": (_float(cfg, "mesh", "target_cx"), _float(cfg, "mesh", "target_cy")),
                  "axes": (_float(cfg, "mesh", "target_a"), _float(cfg, "mesh", "target_b")),
                  "angle": _float(cfg, "mesh", "target_angle")}
        from .mesh import generate_ellipse_mesh
        tmesh = generate_ellipse_mesh(shape_["axes"], _float(cfg, "mesh", "target_h"),
                                      center=shape_["center"], angle=shape_["angle"],
                                      seed=cfg.getint("mesh", "seed"))
    values_path = cfg.get("mesh", "target_file")
    values = fem.read_field(values_path) if values_path else lab.generate_target(tmesh, obstacle, f)
    return tmesh, ReferenceField(tmesh, values)


# --------------------------------------------------------------------------
# commands


class _Run:
    def __init__(self, outdir: Path, cfg):
        self.outdir, self.cfg = outdir, cfg
        self.vtk = cfg.getboolean("output", "vtk")
        self.outputs = []
        self.summary = {}

    def field(self, name, mesh, values):
        path = self.outdir / f"{name}.txt"
        fem.write_field(path, values)
        self.outputs.append(path.name)
        if self.vtk:
            vpath = self.outdir / f"{name}.vtk"
            write_vtk(mesh, vpath, {name: values})
            self.outputs.append(vpath.name)

    def mesh(self, name, mesh):
        path = self.outdir / f"{name}.txt"
        write_mesh(mesh, path)
        self.outputs.append(path.name)


def _state(cfg, mesh, obstacle, f, model, tol):
    if model == "vi":
        return vi.solve_vi_pdas(mesh, f, obstacle, tol=tol)
    rc = run_config(cfg)
    reg = vi.Regularization(rc.c, vi.lambda_bar(mesh, f, obstacle))
    if model == "penalized":
        return vi.solve_state_regularized(mesh, f, obstacle, reg, tol=tol), None
    if model == "smoothed":
        return vi.solve_state_smoothed(mesh, f, obstacle, reg, vi.Smoother(rc.gamma), tol=tol), None
    raise ConfigError(f"problem.model must be vi, penalized or smoothed, not {model!r}")


def cmd_solve_state(run: _Run):
    cfg = run.cfg
    obstacle, f = problem_data(cfg)
    mesh = _mesh(cfg)
    model = cfg.get("problem", "model")
    y, lam = _state(cfg, mesh, obstacle, f, model, run_config(cfg).eps_state)
    run.mesh("mesh", mesh)
    run.field("state", mesh, y)
    if lam is not None:
        run.field("multiplier", mesh, lam)
    run.summary.update(model=model, n_vertices=mesh.n_vertices, max_state=float(np.max(y)),
                       n_active=int(np.count_nonzero(lam > 0)) if lam is not None else None)


def _adjoint(cfg, mesh, obstacle, f, ybar):
    rc = run_config(cfg)
    model = cfg.get("problem", "model")
    y, _ = _state(cfg, mesh, obstacle, f, model, rc.eps_state)
    if model == "vi":
        A = adj.detect_active_set(mesh, y, obstacle, rc.eps_adj)
        return model, y, adj.solve_adjoint_limit(mesh, y, ybar, A), A
    reg = vi.Regularization(rc.c, vi.lambda_bar(mesh, f, obstacle))
    if model == "penalized":
        A = adj.detect_active_set_c(mesh, y, reg, obstacle)
        return model, y, adj.solve_adjoint_regularized_limit(mesh, y, ybar, reg, A), A
    return model, y, adj.solve_adjoint_smoothed(mesh, y, ybar, reg, vi.Smoother(rc.gamma), obstacle), None


def cmd_solve_adjoint(run: _Run):
    cfg = run.cfg
    obstacle, f = problem_data(cfg)
    mesh = _mesh(cfg)
    _, ref = _target(cfg, obstacle, f)
    model, y, p, A = _adjoint(cfg, mesh, obstacle, f, ref.nodal(mesh))
    run.mesh("mesh", mesh)
    run.field("state", mesh, y)
    run.field("adjoint", mesh, p)
    run.summary.update(model=model, n_active=len(A) if A is not None else None,
                       adjoint_max_abs=float(np.max(np.abs(p))))


def cmd_gradient(run: _Run):
    cfg = run.cfg
    rc = run_config(cfg)
    obstacle, f = problem_data(cfg)
    mesh = _mesh(cfg)
    _, ref = _target(cfg, obstacle, f)
    model = optim.GradientModel(rc, ref, obstacle, f, fem.LAPLACIAN)
    if cfg.get("problem", "model") == "smoothed":
        dj, U, norm = model.smoothed_gradient(mesh, full=True)
    else:
        y = model.state(mesh)
        dj, U, norm = model.limit_gradient(mesh, y, full=True)
    run.mesh("mesh", mesh)
    run.field("shape_derivative", mesh, dj.values)
    run.field("shape_gradient", mesh, U)
    run.summary.update(grad_norm=norm)


def cmd_optimize(run: _Run):
    cfg = run.cfg
    rc = run_config(cfg)
    obstacle, f = problem_data(cfg)
    mesh = _mesh(cfg)
    _, ref = _target(cfg, obstacle, f)
    every = cfg.getint("output", "interfaces_every")
    res = optim.optimize(rc, mesh, ref, obstacle, f, output_dir=run.outdir, keep_meshes=every > 0)
    path = run.outdir / "history.csv"
    optim.write_history(path, res.history)
    run.outputs.append(path.name)
    if every > 0:
        pairs = [(r.step, m) for r, m in zip(res.history, res.meshes)
                 if r.step % every == 0 or r.step == res.history[-1].step]
        path = run.outdir / "interfaces.csv"
        optim.write_interfaces(path, pairs)
        run.outputs.append(path.name)
    run.outputs += [r.snapshot for r in res.history if r.snapshot]
    run.mesh("final_mesh", res.mesh)
    run.field("final_state", res.mesh, res.y)
    last = res.history[-1]
    run.summary.update(status=res.status, iterations=last.step, final_J=last.J,
                       final_tracking=last.tracking, initial_tracking=res.history[0].tracking,
                       final_grad_norm=last.grad_norm,
                       safeguard_steps=sum(r.safeguard_activated for r in res.history))


def _study_out(run, table):
    path = run.outdir / table.default_filename()
    table.write_csv(path)
    run.outputs.append(path.name)
    run.summary.update(rows=len(table.rows), failed_rows=len(table.failures))


def cmd_study_sign(run: _Run):
    cfg = run.cfg
    obstacle, f = problem_data(cfg)
    table = lab.study_sign_convergence(_mesh(cfg), obstacle, f, _floats(cfg, "study", "c_list"),
                                       _floats(cfg, "study", "gamma_list"),
                                       tol=_float(cfg, "study", "tol"))
    _study_out(run, table)


def cmd_study_convergence(run: _Run):
    cfg = run.cfg
    obstacle, f = problem_data(cfg)
    mesh = _mesh(cfg)
    _, ref = _target(cfg, obstacle, f)
    table = lab.study_state_adjoint_convergence(
        mesh, obstacle, f, ref, _floats(cfg, "study", "c_list"), _floats(cfg, "study", "gamma_list"),
        tol=_float(cfg, "study", "tol"), eps_adj=run_config(cfg).eps_adj)
    _study_out(run, table)


def cmd_study_refinement(run: _Run):
    cfg = run.cfg
    obstacle, f = problem_data(cfg)
    table = lab.study_mesh_refinement_sign(
        cfg.getint("study", "levels"), gamma=_float(cfg, "study", "refine_gamma"),
        c=_float(cfg, "study", "refine_c"), obstacle=obstacle, f=f, mesh=_mesh(cfg),
        vertex_cap=cfg.getint("study", "vertex_cap"), tol=_float(cfg, "study", "tol"))
    _study_out(run, table)


def cmd_generate_target(run: _Run):
    cfg = run.cfg
    obstacle, f = problem_data(cfg)
    tmesh, ref = _target(cfg, obstacle, f)
    run.mesh("target_mesh", tmesh)
    run.field("target", tmesh, ref.values)
    run.summary.update(n_vertices=tmesh.n_vertices, max_target=float(ref.values.max()))


HANDLERS = {
    "solve-state": cmd_solve_state,
    "solve-adjoint": cmd_solve_adjoint,
    "gradient": cmd_gradient,
    "optimize": cmd_optimize,
    "study-sign": cmd_study_sign,
    "study-convergence": cmd_study_convergence,
    "study-refinement": cmd_study_refinement,
    "generate-target": cmd_generate_target,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vishape", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI configuration file")
        s.add_argument("--output", help="output directory (default: $%s/<command>_<time>)" % OUTPUT_ROOT_ENV)
        s.add_argument("--obstacle", help="shorthand for problem.obstacle")
        s.add_argument("--vtk", action="store_true", help="also write legacy VTK files")
        s.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def _outdir(args) -> Path:
    if args.output:
        return Path(args.output)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "vishape_runs"))
    stamp = _dt.datetime.now().strftime("%Y%m%d_%H%M%S_%f")
    return root / f"{args.command.replace('-', '_')}_{stamp}"


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.obstacle:
        overrides.append(f"problem.obstacle={args.obstacle}")
    if args.vtk:
        overrides.append("output.vtk=true")
    try:
        cfg = load_config(args.config, overrides)
        run_config(cfg)
        problem_data(cfg)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        outdir = _outdir(args)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "resolved_config.ini", "w") as fh:
            cfg.write(fh)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    job = _Run(outdir, cfg)
    t0 = time.perf_counter()
    code, status = EXIT_OK, "ok"
    try:
        HANDLERS[args.command](job)
    except ConfigError as exc:
        code, status = EXIT_CONFIG, f"config error: {exc}"
    except (SolverError, MeshError, np.linalg.LinAlgError) as exc:
        code, status = EXIT_SOLVER, f"solver failure: {exc}"
    except OSError as exc:
        code, status = EXIT_IO, f"I/O error: {exc}"
    summary = {"command": args.command, "status": status, "exit_code": code,
               "wall_time": time.perf_counter() - t0, "outputs": job.outputs, **job.summary}
    try:
        with open(outdir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, default=float)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if code:
        print(status, file=sys.stderr)
    else:
        print(outdir)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
