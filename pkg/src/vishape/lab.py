"""Target generation and parameter studies written as CSV tables."""

from __future__ import annotations

import csv
import datetime as _dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import adjoint as adj
from . import fem, vi
from .fem import LAPLACIAN, ReferenceField, SolverError
from .mesh import TriangleMesh, generate_disk_mesh, generate_ellipse_mesh, refine

log = logging.getLogger(__name__)

# default analytic target interface: a tilted ellipse around the domain centre
TARGET_SHAPE = {"center": (0.5, 0.5), "axes": (0.2, 0.12), "angle": 0.4}
INITIAL_RADIUS = 0.15
DEFAULT_F = (-10.0, 100.0)


def generate_target(target_mesh: TriangleMesh, obstacle, f, tol: float = 1e-10,
                    coeffs=LAPLACIAN) -> np.ndarray:
    """Unregularized VI solution on the target mesh (the tracking data)."""
    y, _ = vi.solve_vi_pdas(target_mesh, f, obstacle, tol=tol, coeffs=coeffs)
    return y


def default_target(obstacle, h: float = 0.025, f=DEFAULT_F, shape=None, seed: int = 0):
    """Mesh the default target ellipse and return ``(mesh, ReferenceField)``."""
    shape = dict(TARGET_SHAPE, **(shape or {}))
    mesh = generate_ellipse_mesh(shape["axes"], h, center=shape["center"], angle=shape["angle"],
                                 seed=seed)
    return mesh, ReferenceField(mesh, generate_target(mesh, obstacle, f))


def initial_mesh(h: float = 0.025, radius: float = INITIAL_RADIUS, seed: int = 0) -> TriangleMesh:
    return generate_disk_mesh(radius, h, seed=seed)


@dataclass
class StudyTable:
    name: str
    columns: List[str]
    rows: List[list] = field(default_factory=list)
    config: Dict[str, object] = field(default_factory=dict)

    def column(self, name: str, ok_only: bool = True) -> np.ndarray:
        i = self.columns.index(name)
        s = self.columns.index("status")
        return np.array([r[i] for r in self.rows if not ok_only or r[s] == "ok"], dtype=float)

    @property
    def failures(self) -> List[list]:
        s = self.columns.index("status")
        return [r for r in self.rows if r[s] != "ok"]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            for key in sorted(self.config):
                fh.write(f"# {key} = {self.config[key]}\n")
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        return path

    def default_filename(self, when=None) -> str:
        when = when or _dt.datetime.now()
        return f"study_{self.name}_{when.strftime('%Y%m%d_%H%M%S')}.csv"


def read_study(path):
    """Return ``(config, header, rows)`` of a study CSV."""
    config, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            config[key.strip()] = value.strip()
        else:
            lines.append(line)
    reader = list(csv.reader(lines))
    return config, reader[0], reader[1:]


def _failed(exc) -> str:
    return f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")


def study_sign_convergence(mesh: TriangleMesh, obstacle, f, c_list: Sequence[float],
                           gamma_list: Sequence[float], tol: float = 1e-11,
                           coeffs=LAPLACIAN) -> StudyTable:
    """L1 distance between sign_gamma of the smoothed state and sign of the penalised state."""
    if not len(c_list) or not len(gamma_list):
        raise ValueError("parameter lists must be nonempty")
    table = StudyTable("sign", ["c", "gamma", "l1_sign", "status"],
                       config={"obstacle": obstacle.name, "f": f, "n_vertices": mesh.n_vertices,
                               "tol": tol, "c_list": list(c_list), "gamma_list": list(gamma_list)})
    lb = vi.lambda_bar(mesh, f, obstacle)
    problem = vi.DiscreteProblem.build(mesh, f, obstacle, coeffs)
    for c in c_list:
        reg = vi.Regularization(c, lb)
        try:
            y_c = vi.solve_state_regularized(mesh, f, obstacle, reg, tol=tol, problem=problem)
        except (SolverError, ValueError) as exc:
            table.rows += [[float(c), float(g), math.nan, _failed(exc)] for g in gamma_list]
            continue
        for g in gamma_list:
            try:
                sm = vi.Smoother(g)
                y_g = vi.solve_state_smoothed(mesh, f, obstacle, reg, sm, tol=tol, problem=problem)
                l1 = adj.sign_l1_distance(mesh, y_g, y_c, reg, sm, obstacle)
                table.rows.append([float(c), float(g), l1, "ok"])
            except (SolverError, ValueError) as exc:
                table.rows.append([float(c), float(g), math.nan, _failed(exc)])
    return table


def state_error_bound(gamma: float, volume: float = 1.0, coercivity: float = 1.0) -> float:
    """(1 / (4 gamma)) vol^(1/2) / K: the a priori bound on ||y_gc - y_c||_H1."""
    return volume ** 0.5 / (4.0 * gamma * coercivity)


def study_state_adjoint_convergence(mesh: TriangleMesh, obstacle, f, ybar, c_list: Sequence[float],
                                    gamma_list: Sequence[float], tol: float = 1e-11,
                                    eps_adj: float = 1e-9, coeffs=LAPLACIAN) -> StudyTable:
    """H1 distances between smoothed, penalised and unregularized states and adjoints.

    ``ybar`` is a :class:`ReferenceField` or nodal values on ``mesh``.
    """
    if not len(c_list) or not len(gamma_list):
        raise ValueError("parameter lists must be nonempty")
    ybar = ybar.nodal(mesh) if isinstance(ybar, ReferenceField) else np.asarray(ybar, dtype=float)
    cols = ["c", "gamma", "state_gc_c", "state_c", "adjoint_gc_c", "adjoint_c", "bound",
            "ac_in_a", "status"]
    table = StudyTable("convergence", cols,
                       config={"obstacle": obstacle.name, "f": f, "n_vertices": mesh.n_vertices,
                               "tol": tol, "eps_adj": eps_adj, "c_list": list(c_list),
                               "gamma_list": list(gamma_list)})
    volume = float(fem.geometry(mesh).areas.sum())
    problem = vi.DiscreteProblem.build(mesh, f, obstacle, coeffs)
    y, _ = vi.solve_vi_pdas(mesh, f, obstacle, tol=tol, problem=problem)
    A = adj.detect_active_set(mesh, y, obstacle, eps_adj)
    p = adj.solve_adjoint_limit(mesh, y, ybar, A, coeffs=coeffs)
    lb = vi.lambda_bar(mesh, f, obstacle)
    amask = A.mask(mesh.n_vertices)
    for c in c_list:
        reg = vi.Regularization(c, lb)
        try:
            y_c = vi.solve_state_regularized(mesh, f, obstacle, reg, tol=tol, problem=problem)
            Ac = adj.detect_active_set_c(mesh, y_c, reg, obstacle)
            p_c = adj.solve_adjoint_regularized_limit(mesh, y_c, ybar, reg, Ac, coeffs=coeffs)
        except (SolverError, ValueError) as exc:
            table.rows += [[float(c), float(g)] + [math.nan] * 6 + [_failed(exc)] for g in gamma_list]
            continue
        # inclusion of the penalty active set in the limit active set is reported, not enforced
        inside = bool(np.all(amask[Ac.vertices]))
        e_state_c = fem.h1_norm(mesh, y_c - y)
        e_adj_c = fem.h1_norm(mesh, p_c - p)
        for g in gamma_list:
            try:
                sm = vi.Smoother(g)
                y_g = vi.solve_state_smoothed(mesh, f, obstacle, reg, sm, tol=tol, problem=problem)
                p_g = adj.solve_adjoint_smoothed(mesh, y_g, ybar, reg, sm, obstacle, coeffs=coeffs)
                table.rows.append([float(c), float(g), fem.h1_norm(mesh, y_g - y_c), e_state_c,
                                   fem.h1_norm(mesh, p_g - p_c), e_adj_c,
                                   state_error_bound(g, volume), int(inside), "ok"])
            except (SolverError, ValueError) as exc:
                table.rows.append([float(c), float(g)] + [math.nan] * 6 + [_failed(exc)])
    return table


def free_boundary_cells(mesh: TriangleMesh, active_mask: np.ndarray) -> np.ndarray:
    """Cells with both active and inactive vertices."""
    k = active_mask[mesh.cells].sum(axis=1)
    return np.flatnonzero((k > 0) & (k < 3))


def free_boundary_vertices(mesh: TriangleMesh, active_mask: np.ndarray) -> np.ndarray:
    """Active vertices sharing a cell with an inactive vertex."""
    cells = mesh.cells[free_boundary_cells(mesh, active_mask)]
    v = np.unique(cells)
    return v[active_mask[v]]


def study_mesh_refinement_sign(levels: int, gamma: float = 1e8, c: float = 1e5, obstacle=None,
                               f=DEFAULT_F, h: float = 0.025, mesh: TriangleMesh = None,
                               vertex_cap: int = 50_000, tol: float = 1e-11,
                               coeffs=LAPLACIAN) -> StudyTable:
    """Sign L1 distance on meshes refined around the penalty free boundary.

    Each level refines the cells cut by the free boundary of the penalised
    state plus their neighbours. Stops with a flagged row when the next mesh
    would exceed ``vertex_cap``.
    """
    if levels < 2:
        raise ValueError("levels must be at least 2")
    obstacle = obstacle or vi.phi2()
    mesh = mesh or initial_mesh(h)
    table = StudyTable("refinement", ["level", "n_vertices", "n_free_boundary", "l1_sign", "status"],
                       config={"obstacle": obstacle.name, "f": f, "gamma": gamma, "c": c,
                               "levels": levels, "vertex_cap": vertex_cap, "tol": tol})
    for level in range(levels):
        if mesh.n_vertices > vertex_cap:
            table.rows.append([level, mesh.n_vertices, -1, math.nan,
                               f"failed: vertex cap {vertex_cap} exceeded"])
            break
        try:
            reg = vi.Regularization(c, vi.lambda_bar(mesh, f, obstacle))
            sm = vi.Smoother(gamma)
            problem = vi.DiscreteProblem.build(mesh, f, obstacle, coeffs)
            y_c = vi.solve_state_regularized(mesh, f, obstacle, reg, tol=tol, problem=problem)
            y_g = vi.solve_state_smoothed(mesh, f, obstacle, reg, sm, tol=tol, problem=problem)
            l1 = adj.sign_l1_distance(mesh, y_g, y_c, reg, sm, obstacle)
            active = np.zeros(mesh.n_vertices, dtype=bool)
            active[adj.detect_active_set_c(mesh, y_c, reg, obstacle).vertices] = True
            nfb = len(free_boundary_vertices(mesh, active))
            table.rows.append([level, mesh.n_vertices, nfb, l1, "ok"])
        except (SolverError, ValueError) as exc:
            table.rows.append([level, mesh.n_vertices, -1, math.nan, _failed(exc)])
            break
        if level + 1 < levels:
            cut = free_boundary_cells(mesh, active)
            ring = np.flatnonzero(np.isin(mesh.cells, np.unique(mesh.cells[cut])).any(axis=1))
            mesh = refine(mesh, ring)
    return table
