"""Obstacle problems: unregularized (PDAS), penalised, and smoothed-penalised.

Discretisation: P1 stiffness from :func:`~vishape.fem.assemble_bilinear`,
piecewise constant load, and mass lumping for every pointwise nonlinearity so
that activity is a per-vertex notion. The outer boundary carries homogeneous
Dirichlet conditions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import LAPLACIAN, EllipticCoefficients, SolverError
from .mesh import TriangleMesh

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Obstacle:
    """Analytic obstacle with its gradient and Laplacian, vectorised over (N, 2) points."""

    value: Callable
    gradient: Callable
    laplacian: Callable
    name: str = "obstacle"

    def at(self, points):
        return np.asarray(self.value(np.atleast_2d(points)), dtype=float)

    @classmethod
    def constant(cls, level: float, name: Optional[str] = None) -> "Obstacle":
        level = float(level)
        return cls(lambda x: np.full(len(x), level),
                   lambda x: np.zeros((len(x), 2)),
                   lambda x: np.zeros(len(x)),
                   name or f"const({level:g})")

    @classmethod
    def from_expression(cls, expr: str, name: Optional[str] = None) -> "Obstacle":
        """Obstacle from an expression in ``x1``, ``x2`` (constants, exp, polynomials,
        trigonometric functions); gradient and Laplacian are derived symbolically."""
        import sympy

        x1, x2 = sympy.symbols("x1 x2", real=True)
        allowed = {"x1": x1, "x2": x2, "exp": sympy.exp, "sin": sympy.sin, "cos": sympy.cos,
                   "sqrt": sympy.sqrt, "pi": sympy.pi, "E": sympy.E}
        try:
            e = sympy.sympify(expr, locals=allowed)
        except (sympy.SympifyError, SyntaxError, TypeError) as exc:
            raise ValueError(f"cannot parse obstacle expression {expr!r}") from exc
        if not e.free_symbols <= {x1, x2}:
            raise ValueError(f"obstacle expression uses unknown symbols: {e.free_symbols - {x1, x2}}")
        gx, gy = sympy.diff(e, x1), sympy.diff(e, x2)
        lap = sympy.diff(gx, x1) + sympy.diff(gy, x2)
        fv, fgx, fgy, fl = (sympy.lambdify((x1, x2), t, "numpy") for t in (e, gx, gy, lap))

        def full(fn):
            return lambda x: np.broadcast_to(np.asarray(fn(x[:, 0], x[:, 1]), dtype=float),
                                             (len(x),)).copy()

        v, a, b, l = full(fv), full(fgx), full(fgy), full(fl)
        return cls(v, lambda x: np.column_stack([a(x), b(x)]), l, name or expr)


def phi1() -> Obstacle:
    """Constant obstacle 0.5."""
    return Obstacle.constant(0.5, "phi1")


def phi2() -> Obstacle:
    """Obstacle 5 exp(-x1 - 1)."""
    def value(x):
        return 5.0 * np.exp(-x[:, 0] - 1.0)

    def gradient(x):
        v = value(x)
        return np.column_stack([-v, np.zeros_like(v)])

    return Obstacle(value, gradient, value, "phi2")


OBSTACLES = {"phi1": phi1, "phi2": phi2}


def get_obstacle(spec) -> Obstacle:
    if isinstance(spec, Obstacle):
        return spec
    if spec in OBSTACLES:
        return OBSTACLES[spec]()
    return Obstacle.from_expression(str(spec))


@dataclass(frozen=True)
class Regularization:
    c: float
    lambda_bar: np.ndarray

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("penalty scale c must be positive")
        lb = np.asarray(self.lambda_bar, dtype=float)
        if np.any(lb < 0):
            raise ValueError("lambda_bar must be nonnegative")
        object.__setattr__(self, "lambda_bar", lb)


@dataclass(frozen=True)
class Smoother:
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def bound(self) -> float:
        """Uniform distance to max(0, .): 1 / (4 gamma)."""
        return 0.25 / self.gamma


# --------------------------------------------------------------------------
# smoothing


def max_gamma(x, gamma: float):
    x = np.asarray(x, dtype=float)
    quad = 0.25 * gamma * x * x + 0.5 * x + 0.25 / gamma
    return np.where(x > 1.0 / gamma, x, np.where(x < -1.0 / gamma, 0.0, quad))


def sign_gamma(x, gamma: float):
    x = np.asarray(x, dtype=float)
    return np.clip(0.5 * gamma * x + 0.5, 0.0, 1.0)


def heaviside(x):
    """Unsmoothed sign with the convention 1 at 0."""
    return (np.asarray(x) >= 0).astype(float)


def lambda_bar(mesh: TriangleMesh, f, obstacle: Obstacle) -> np.ndarray:
    """Nodal max(0, f + lap phi); f is averaged over the cells around each vertex."""
    fn = fem.nodal_average(mesh, f)
    return np.maximum(0.0, fn + obstacle.laplacian(mesh.vertices))


# --------------------------------------------------------------------------
# discrete problem


@dataclass
class DiscreteProblem:
    """Everything the state solvers share on one mesh."""

    mesh: TriangleMesh
    K: sp.csr_matrix
    load: np.ndarray
    mass: np.ndarray
    phi: np.ndarray
    free: np.ndarray

    @classmethod
    def build(cls, mesh: TriangleMesh, f, obstacle: Obstacle,
              coeffs: EllipticCoefficients = LAPLACIAN) -> "DiscreteProblem":
        free = np.ones(mesh.n_vertices, dtype=bool)
        free[mesh.outer_boundary] = False
        return cls(mesh, fem.assemble_bilinear(mesh, coeffs), fem.assemble_load(mesh, f),
                   fem.lumped_mass(mesh), obstacle.at(mesh.vertices), free)

    @property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(~self.free)

    def residual(self, y, nonlinear=None):
        r = self.K @ y - self.load
        if nonlinear is not None:
            r = r + self.mass * nonlinear
        r[~self.free] = 0.0
        return r

    def residual_scale(self) -> float:
        return max(float(np.linalg.norm(self.load[self.free])), 1e-14)

    def solve_linear(self, reaction=None, rhs=None, dirichlet_nodes=None, dirichlet_values=0.0,
                     tol=1e-10, method="cg"):
        """Solve (K + diag(mass * reaction)) u = rhs with u fixed on the boundary."""
        A = self.K
        if reaction is not None:
            A = A + sp.diags(self.mass * reaction)
        rhs = self.load if rhs is None else rhs
        nodes = self.boundary
        values = np.zeros(len(nodes))
        if dirichlet_nodes is not None and len(dirichlet_nodes):
            extra = np.asarray(dirichlet_nodes, dtype=np.int64)
            extra = extra[self.free[extra]]
            nodes = np.concatenate([nodes, extra])
            values = np.concatenate([values, np.broadcast_to(dirichlet_values, extra.shape)
                                     if np.ndim(dirichlet_values) == 0
                                     else np.asarray(dirichlet_values)[self.free[dirichlet_nodes]]])
        return fem.solve_dirichlet(A, rhs, nodes, values, tol=tol, method=method)


def _linear_tol(tol: float) -> float:
    return float(np.clip(0.01 * tol, 1e-14, 1e-10))


def _newton(problem: DiscreteProblem, shift: np.ndarray, c: float, value, derivative,
            tol: float, y0=None, max_iter: int = 50, track_sets: bool = False,
            method: str = "cg"):
    """Newton for K y + mass * value(shift + c y) = load.

    ``shift`` is lambda_bar - c phi. Smooth steps are halved (down to 2**-10)
    until the residual norm decreases; semi-smooth steps (``track_sets``) are
    taken in full.
    """
    y = np.zeros(problem.mesh.n_vertices) if y0 is None else np.array(y0, dtype=float)
    y[~problem.free] = 0.0
    scale = problem.residual_scale()
    lin_tol = _linear_tol(tol)
    z = shift + c * y
    r = problem.residual(y, value(z))
    rn = np.linalg.norm(r)
    prev_set = None
    for it in range(max_iter + 1):
        cur_set = z >= 0 if track_sets else None
        stable = (not track_sets) or (prev_set is not None and np.array_equal(cur_set, prev_set))
        if rn <= tol * scale and (stable or rn <= 1e-14 * scale):
            log.debug("newton converged in %d iterations, residual %.3e", it, rn / scale)
            return y, it
        if it == max_iter:
            break
        prev_set = cur_set
        delta = problem.solve_linear(reaction=c * derivative(z), rhs=-r, tol=lin_tol, method=method)
        alpha = 1.0
        while True:
            y_new = y + alpha * delta
            z_new = shift + c * y_new
            r_new = problem.residual(y_new, value(z_new))
            rn_new = np.linalg.norm(r_new)
            # full steps for the semi-smooth variant: the residual is not a merit function there
            if track_sets or rn_new < rn or alpha <= 2.0 ** -10:
                break
            alpha *= 0.5
        y, z, r, rn = y_new, z_new, r_new, rn_new
    raise SolverError(f"Newton did not converge in {max_iter} iterations (residual {rn / scale:.2e})")


def solve_state_smoothed(mesh: TriangleMesh, f, obstacle: Obstacle, reg: Regularization,
                         smoother: Smoother, tol: float = 1e-10, coeffs=LAPLACIAN,
                         y0=None, problem: Optional[DiscreteProblem] = None,
                         method: str = "cg") -> np.ndarray:
    """Fully regularized state: a(y, v) + (max_gamma(lambda_bar + c (y - phi)), v) = (f, v)."""
    problem = problem or DiscreteProblem.build(mesh, f, obstacle, coeffs)
    g = smoother.gamma
    shift = reg.lambda_bar - reg.c * problem.phi
    if y0 is None:
        # the kink-free problem is a small perturbation of the penalised one
        y0 = solve_state_regularized(mesh, f, obstacle, reg, tol=max(tol, 1e-12),
                                     problem=problem, method=method)
    y, _ = _newton(problem, shift, reg.c, lambda z: max_gamma(z, g), lambda z: sign_gamma(z, g),
                   tol, y0=y0, method=method)
    return y


def solve_state_regularized(mesh: TriangleMesh, f, obstacle: Obstacle, reg: Regularization,
                            tol: float = 1e-10, coeffs=LAPLACIAN, y0=None,
                            problem: Optional[DiscreteProblem] = None,
                            method: str = "cg") -> np.ndarray:
    """Penalised state: a(y, v) + (max(0, lambda_bar + c (y - phi)), v) = (f, v), semi-smooth Newton."""
    problem = problem or DiscreteProblem.build(mesh, f, obstacle, coeffs)
    shift = reg.lambda_bar - reg.c * problem.phi
    y, _ = _newton(problem, shift, reg.c, lambda z: np.maximum(z, 0.0), heaviside,
                   tol, y0=y0, track_sets=True, method=method)
    return y


@dataclass
class VISolution:
    y: np.ndarray
    multiplier: np.ndarray
    active: np.ndarray
    iterations: int


def _pdas_solve(problem: DiscreteProblem, idx: np.ndarray, lin_tol: float, method: str):
    """State with y = phi on ``idx`` and the multiplier that balances it there."""
    phi = problem.phi
    if idx.size:
        y = problem.solve_linear(dirichlet_nodes=idx, dirichlet_values=phi[idx], tol=lin_tol, method=method)
        y[idx] = phi[idx]
    else:
        y = problem.solve_linear(tol=lin_tol, method=method)
    lam = np.zeros_like(y)
    lam[idx] = (problem.load - problem.K @ y)[idx] / problem.mass[idx]
    return y, lam


def solve_vi_pdas(mesh: TriangleMesh, f, obstacle: Obstacle, tol: float = 1e-10,
                  coeffs=LAPLACIAN, max_iter: int = 100, y0=None,
                  problem: Optional[DiscreteProblem] = None, method: str = "cg",
                  full_output: bool = False):
    """Primal-dual active set method for K y + mass * lambda = load, y <= phi,
    lambda >= 0, lambda (y - phi) = 0.

    The active set is {lambda + (y - phi) > 0} (c = 1). Iteration stops once the
    active set is unchanged; the linear solves on that set are then tightened
    until the relative residual is at most ``tol``. Linear solves are also
    tightened when an earlier active set reappears. Returns ``(y, lambda)``, or a
    :class:`VISolution` when ``full_output`` is set.
    """
    problem = problem or DiscreteProblem.build(mesh, f, obstacle, coeffs)
    phi, free = problem.phi, problem.free
    lin_tol = float(tol)
    if y0 is None:
        y = problem.solve_linear(tol=lin_tol, method=method)
    else:
        y = np.array(y0, dtype=float)
    lam = np.zeros_like(y)
    active = free & (lam + (y - phi) > 0)
    seen = set()
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        y, lam = _pdas_solve(problem, idx, lin_tol, method)
        new_active = free & (lam + (y - phi) > 0)
        if np.array_equal(new_active, active):
            # settled set: tighten the linear solves on it until the residual meets tol
            res = np.linalg.norm(problem.residual(y, lam)) / problem.residual_scale()
            while res > tol and lin_tol > 1e-14:
                lin_tol *= 0.1
                y, lam = _pdas_solve(problem, idx, lin_tol, method)
                res = np.linalg.norm(problem.residual(y, lam)) / problem.residual_scale()
            log.debug("pdas converged in %d iterations, |A| = %d, residual %.1e", it, idx.size, res)
            if full_output:
                return VISolution(y, lam, idx, it)
            return y, lam
        key = new_active.tobytes()
        if key in seen and lin_tol > 1e-14:
            # a revisited set means inexact solves are cycling
            lin_tol *= 0.1
        seen.add(active.tobytes())
        active = new_active
    raise SolverError(f"active set did not settle within {max_iter} iterations")


def psor_solve(mesh: TriangleMesh, f, obstacle: Obstacle, tol: float = 1e-12,
               max_iter: int = 100000, omega: float = 1.7, coeffs=LAPLACIAN) -> np.ndarray:
    """Projected SOR for min 1/2 y'Ky - load'y subject to y <= phi.

    Independent reference for small meshes; stops when the largest nodal
    change of a sweep is at most ``tol``.
    """
    problem = DiscreteProblem.build(mesh, f, obstacle, coeffs)
    K = problem.K.tocsr()
    indptr, indices, data = K.indptr, K.indices, K.data
    diag = K.diagonal()
    if np.any(diag[problem.free] <= 0):
        raise ValueError("stiffness matrix needs a positive diagonal")
    b, phi = problem.load, problem.phi
    y = np.zeros(mesh.n_vertices)
    nodes = np.flatnonzero(problem.free).tolist()
    rows = [(i, indices[indptr[i]:indptr[i + 1]], data[indptr[i]:indptr[i + 1]]) for i in nodes]
    for sweep in range(max_iter):
        change = 0.0
        for i, cols, vals in rows:
            gs = y[i] + (b[i] - vals @ y[cols]) / diag[i]
            new = min(phi[i], y[i] + omega * (gs - y[i]))
            d = abs(new - y[i])
            if d > change:
                change = d
            y[i] = new
        if change <= tol:
            log.debug("psor converged in %d sweeps", sweep + 1)
            return y
    raise SolverError(f"projected SOR did not converge in {max_iter} sweeps")
