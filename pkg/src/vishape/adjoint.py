"""Adjoints of the tracking functional for the three state models.

All variants solve a linear elliptic problem with right-hand side
-(y - ybar, v) and homogeneous Dirichlet data on the outer boundary; they
differ in the reaction term (smoothed sign, indicator of the penalty active
set) or, for the unregularized limit, in extra Dirichlet conditions on the
active set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .vi import DiscreteProblem, Obstacle, Regularization, Smoother, heaviside, sign_gamma


@dataclass(frozen=True)
class ActiveSet:
    vertices: np.ndarray
    eps_adj: float = 0.0

    def __len__(self):
        return len(self.vertices)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.vertices] = True
        return m


def detect_active_set(mesh, y, obstacle: Obstacle, eps_adj: float = 1e-9) -> ActiveSet:
    """Vertices with y - phi >= -eps_adj."""
    if eps_adj < 0:
        raise ValueError("eps_adj must be nonnegative")
    gap = np.asarray(y) - obstacle.at(mesh.vertices)
    return ActiveSet(np.flatnonzero(gap >= -eps_adj), eps_adj)


def detect_active_set_c(mesh, y_c, reg: Regularization, obstacle: Obstacle) -> ActiveSet:
    """Vertices with lambda_bar + c (y_c - phi) >= 0."""
    z = reg.lambda_bar + reg.c * (np.asarray(y_c) - obstacle.at(mesh.vertices))
    return ActiveSet(np.flatnonzero(z >= 0))


def _tracking_rhs(problem: DiscreteProblem, y, ybar):
    return -(fem.assemble_mass(problem.mesh) @ (np.asarray(y) - np.asarray(ybar)))


def _problem(mesh, coeffs, problem):
    if problem is not None:
        return problem
    return DiscreteProblem.build(mesh, 0.0, Obstacle.constant(0.0), coeffs)


def solve_adjoint_smoothed(mesh, y, ybar, reg: Regularization, smoother: Smoother,
                           obstacle: Obstacle, coeffs=fem.LAPLACIAN, problem=None,
                           tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    """a(p, v) + c (sign_gamma(lambda_bar + c (y - phi)) p, v) = -(y - ybar, v)."""
    problem = _problem(mesh, coeffs, problem)
    z = reg.lambda_bar + reg.c * (y - obstacle.at(mesh.vertices))
    reaction = reg.c * sign_gamma(z, smoother.gamma)
    return problem.solve_linear(reaction=reaction, rhs=_tracking_rhs(problem, y, ybar),
                                tol=tol, method=method)


def solve_adjoint_regularized_limit(mesh, y_c, ybar, reg: Regularization, active_set_c: ActiveSet,
                                    coeffs=fem.LAPLACIAN, problem=None,
                                    tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    """a(p, v) + c (1_{A_c} p, v) = -(y_c - ybar, v), indicator lumped per vertex."""
    problem = _problem(mesh, coeffs, problem)
    reaction = reg.c * active_set_c.mask(mesh.n_vertices).astype(float)
    return problem.solve_linear(reaction=reaction, rhs=_tracking_rhs(problem, y_c, ybar),
                                tol=tol, method=method)


def solve_adjoint_limit(mesh, y, ybar, active_set: ActiveSet, coeffs=fem.LAPLACIAN,
                        problem=None, tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    """Adjoint system assembled without the active set, then p = 0 imposed on it."""
    problem = _problem(mesh, coeffs, problem)
    return problem.solve_linear(rhs=_tracking_rhs(problem, y, ybar),
                                dirichlet_nodes=active_set.vertices, dirichlet_values=0.0,
                                tol=tol, method=method)


def sign_l1_distance(mesh, y_smoothed, y_reg, reg: Regularization, smoother: Smoother,
                     obstacle: Obstacle) -> float:
    """|| sign_gamma(lambda_bar + c (y_gc - phi)) - sign(lambda_bar + c (y_c - phi)) ||_L1,
    integrated with the lumped (nodal) rule used for the nonlinear terms."""
    phi = obstacle.at(mesh.vertices)
    s_g = sign_gamma(reg.lambda_bar + reg.c * (y_smoothed - phi), smoother.gamma)
    s = heaviside(reg.lambda_bar + reg.c * (y_reg - phi))
    return float(fem.lumped_mass(mesh) @ np.abs(s_g - s))
