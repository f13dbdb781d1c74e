"""Objective evaluation, backtracking linesearch and the safeguarded descent loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import adjoint as adj
from . import fem, shape, vi
from .fem import LAPLACIAN, ReferenceField, SolverError
from .mesh import CellInversionError, TriangleMesh, deform_mesh, interface_length, interface_polylines, write_mesh

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    nu: float = 1e-5
    gamma: float = 1e8
    c: float = 1e7
    eps_state: float = 3e-4
    eps_adj: float = 1e-9
    eps_shape: float = 1e-6
    mu_min: float = 0.0
    mu_max: float = 25.0
    lambda_elas: float = 0.0
    max_iters: int = 500
    ls_shrink: float = 0.5
    ls_accept: float = 0.995
    ls_max_halvings: int = 30
    step_scale: float = 4.0
    accept_with_perimeter: bool = False
    active_term: str = "nodal"
    snapshot_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        for name in ("gamma", "c", "eps_state", "eps_shape", "step_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.nu < 0 or self.eps_adj < 0:
            raise ValueError("nu and eps_adj must be non-negative")
        if not 0 < self.ls_shrink < 1 or not 0 < self.ls_accept < 1:
            raise ValueError("ls_shrink and ls_accept must lie in (0, 1)")
        if self.mu_max < self.mu_min or self.mu_min < 0 or self.mu_max <= 0:
            raise ValueError("need mu_max > 0 and mu_max >= mu_min >= 0")
        if self.max_iters < 0 or self.ls_max_halvings < 0 or self.snapshot_every < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.active_term not in ("nodal", "volume"):
            raise ValueError("active_term must be 'nodal' or 'volume'")
        return self

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationRecord:
    step: int
    J: float
    tracking: float
    perimeter: float
    grad_norm: float
    halvings: int = 0
    safeguard_activated: bool = False
    grad_norm_reg: float = float("nan")
    safeguard_reason: str = ""
    snapshot: str = ""

    CSV_FIELDS = ("step", "J", "tracking", "perimeter", "grad_norm", "halvings", "safeguard",
                  "grad_norm_reg", "safeguard_reason", "snapshot")

    def row(self):
        return [self.step, repr(self.J), repr(self.tracking), repr(self.perimeter),
                repr(self.grad_norm), self.halvings, int(self.safeguard_activated),
                repr(self.grad_norm_reg), self.safeguard_reason, self.snapshot]


@dataclass
class OptimizationResult:
    history: List[IterationRecord]
    mesh: TriangleMesh
    y: np.ndarray
    status: str
    meshes: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def tracking_value(mesh: TriangleMesh, y, ybar_nodal) -> float:
    r = np.asarray(y) - np.asarray(ybar_nodal)
    return float(0.5 * r @ (fem.assemble_mass(mesh) @ r))


def evaluate_objective(mesh: TriangleMesh, y, ybar_ref, nu: float):
    """Return ``(J, tracking, perimeter)`` with J = tracking + nu * perimeter.

    ``ybar_ref`` is a :class:`ReferenceField` or nodal values on ``mesh``.
    """
    ybar = ybar_ref.nodal(mesh) if isinstance(ybar_ref, ReferenceField) else ybar_ref
    tr = tracking_value(mesh, y, ybar)
    per = interface_length(mesh)
    return tr + nu * per, tr, per


@dataclass
class LinesearchResult:
    mesh: TriangleMesh
    y: np.ndarray
    value: float
    halvings: int


def linesearch(mesh: TriangleMesh, U, J_current: float, state_solver: Callable,
               config: RunConfig, objective: Callable) -> Optional[LinesearchResult]:
    """Backtracking on the displacement ``U`` (already oriented downhill).

    ``state_solver(mesh)`` returns the state on a trial mesh and
    ``objective(mesh, y)`` the value compared against
    ``config.ls_accept * J_current``. Inverted cells and failed solves count as
    rejections. Returns None after ``config.ls_max_halvings`` halvings.
    """
    step = np.array(U, dtype=float)
    for halvings in range(config.ls_max_halvings + 1):
        try:
            trial = deform_mesh(mesh, step)
            y = state_solver(trial)
            value = objective(trial, y)
        except (CellInversionError, SolverError) as exc:
            log.debug("trial rejected after %d halvings: %s", halvings, exc)
        else:
            if value <= config.ls_accept * J_current:
                return LinesearchResult(trial, y, value, halvings)
        step *= config.ls_shrink
    return None


class GradientModel:
    """State, adjoint and gradient evaluation on the current mesh.

    The gradient methods return ``(U, norm)``, or ``(dj, U, norm)`` with the
    masked shape derivative when ``full`` is set.
    """

    def __init__(self, config: RunConfig, target: ReferenceField, obstacle, f, coeffs):
        self.config, self.target, self.obstacle, self.f, self.coeffs = config, target, obstacle, f, coeffs
        self._warm = None

    def state(self, mesh):
        y0 = self._warm if self._warm is not None and len(self._warm) == mesh.n_vertices else None
        return vi.solve_vi_pdas(mesh, self.f, self.obstacle, tol=self.config.eps_state,
                                coeffs=self.coeffs, y0=y0)[0]

    def objective(self, mesh, y):
        J, tr, _ = evaluate_objective(mesh, y, self.target, self.config.nu)
        return J if self.config.accept_with_perimeter else tr

    def _gradient(self, dj, full):
        cfg = self.config
        dj = shape.mask_to_interface(dj + shape.perimeter_derivative(dj.mesh, cfg.nu))
        mu = shape.solve_mu_elas(dj.mesh, cfg.mu_min, cfg.mu_max)
        U, norm = shape.shape_gradient(dj, mu, cfg.lambda_elas)
        return (dj, U, norm) if full else (U, norm)

    def limit_gradient(self, mesh, y, full: bool = False):
        cfg = self.config
        ybar, gbar = self.target.nodal(mesh), self.target.nodal_gradient(mesh)
        A = adj.detect_active_set(mesh, y, self.obstacle, cfg.eps_adj)
        p = adj.solve_adjoint_limit(mesh, y, ybar, A, coeffs=self.coeffs)
        dj = shape.assemble_dj_limit(mesh, y, p, ybar, gbar, self.f, self.obstacle, A,
                                     self.coeffs, active_term=cfg.active_term)
        return self._gradient(dj, full)

    def smoothed_gradient(self, mesh, full: bool = False):
        cfg = self.config
        ybar, gbar = self.target.nodal(mesh), self.target.nodal_gradient(mesh)
        reg = vi.Regularization(cfg.c, vi.lambda_bar(mesh, self.f, self.obstacle))
        sm = vi.Smoother(cfg.gamma)
        y = vi.solve_state_smoothed(mesh, self.f, self.obstacle, reg, sm, tol=cfg.eps_state,
                                    coeffs=self.coeffs)
        p = adj.solve_adjoint_smoothed(mesh, y, ybar, reg, sm, self.obstacle, coeffs=self.coeffs)
        dj = shape.assemble_dj_smoothed(mesh, y, p, ybar, gbar, self.f, self.obstacle, reg, sm,
                                        self.coeffs)
        return self._gradient(dj, full)


def optimize(config: RunConfig, initial_mesh: TriangleMesh, target: ReferenceField, obstacle, f,
             coeffs=LAPLACIAN, output_dir=None, keep_meshes: bool = False,
             callback: Optional[Callable] = None) -> OptimizationResult:
    """Steepest descent in the elasticity metric with the regularized safeguard.

    The loop runs while the limit gradient norm or the smoothed gradient norm
    exceeds ``eps_shape``; the smoothed norm is evaluated only when the limit
    branch has converged or its linesearch failed, and a step along the
    smoothed gradient is then taken if that norm is still large.
    """
    config.validate()
    model = GradientModel(config, target, obstacle, f, coeffs)
    eps = config.eps_shape
    out = Path(output_dir) if output_dir is not None else None
    mesh = initial_mesh
    y = model.state(mesh)
    history: List[IterationRecord] = []
    meshes = []
    status = "max_iters"
    for k in range(config.max_iters + 1):
        model._warm = y
        J, tr, per = evaluate_objective(mesh, y, target, config.nu)
        U, norm = model.limit_gradient(mesh, y)
        rec = IterationRecord(k, J, tr, per, norm)
        if out is not None and config.snapshot_every and k % config.snapshot_every == 0:
            path = out / f"mesh_{k:05d}.txt"
            write_mesh(mesh, path)
            rec.snapshot = path.name
        history.append(rec)
        if keep_meshes:
            meshes.append(mesh)
        if callback is not None:
            callback(rec)
        if k == config.max_iters:
            break
        current = model.objective(mesh, y)
        ls = linesearch(mesh, -config.step_scale * U, current, model.state, config, model.objective) if norm > eps else None
        if ls is None:
            U_reg, rec.grad_norm_reg = model.smoothed_gradient(mesh)
            if rec.grad_norm_reg <= eps:
                status = "converged" if norm <= eps else "stalled"
                break
            rec.safeguard_activated = True
            rec.safeguard_reason = "converged" if norm <= eps else "linesearch"
            log.info("step %d: safeguard (%s), |DJ| = %.3e, |DJ_reg| = %.3e",
                     k, rec.safeguard_reason, norm, rec.grad_norm_reg)
            ls = linesearch(mesh, -config.step_scale * U_reg, current, model.state, config, model.objective)
            if ls is None:
                status = "stalled"
                break
        rec.halvings = ls.halvings
        log.info("step %d: J = %.6e, |DJ| = %.3e, halvings %d", k, J, norm, ls.halvings)
        mesh, y = ls.mesh, ls.y
    return OptimizationResult(history, mesh, y, status, meshes)


def write_history(path, history: List[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IterationRecord.CSV_FIELDS)
        for rec in history:
            w.writerow(rec.row())


def read_history(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_interfaces(path, meshes) -> None:
    """Interface polylines of ``(step, mesh)`` pairs as rows step, loop, x, y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loop", "x", "y"])
        for step, mesh in meshes:
            for i, loop in enumerate(interface_polylines(mesh)):
                for x, y in loop:
                    w.writerow([step, i, repr(float(x)), repr(float(y))])
