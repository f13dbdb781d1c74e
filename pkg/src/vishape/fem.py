"""P1 finite elements on :class:`~vishape.mesh.TriangleMesh`.

Scalar fields are plain ``(n_vertices,)`` arrays and vector fields are
``(n_vertices, 2)`` arrays; the mesh they live on is always passed alongside.
Coefficient-dependent integrals use the three edge-midpoint rule, which is
exact for quadratics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .mesh import INNER, TriangleMesh

log = logging.getLogger(__name__)

# barycentric coordinates of the edge midpoints, equal weights 1/3
QUAD_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
QUAD_WEIGHTS = np.full(3, 1.0 / 3.0)


class SolverError(RuntimeError):
    """Raised when a linear or nonlinear solve does not converge."""


class P1Geometry:
    """Per-cell areas, basis gradients and quadrature points of a mesh."""

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        v = mesh.vertices[mesh.cells]                      # (m, 3, 2)
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise ValueError("degenerate or inverted cell")
        self.areas = 0.5 * det
        # gradients of the barycentric coordinates
        g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
        self.grads = np.stack([-g1 - g2, g1, g2], axis=1)  # (m, 3, 2)
        self.quad_points = np.einsum("qk,mkd->mqd", QUAD_BARY, v)  # (m, 3, 2)

    def cell_values_at_quad(self, u: np.ndarray) -> np.ndarray:
        return u[self.mesh.cells] @ QUAD_BARY.T           # (m, 3)


_GEOMETRY_CACHE: dict = {}


def geometry(mesh: TriangleMesh) -> P1Geometry:
    key = id(mesh)
    hit = _GEOMETRY_CACHE.get(key)
    if hit is not None and hit.mesh is mesh:
        return hit
    if len(_GEOMETRY_CACHE) > 64:
        _GEOMETRY_CACHE.clear()
    geo = P1Geometry(mesh)
    _GEOMETRY_CACHE[key] = geo
    return geo


# --------------------------------------------------------------------------
# coefficients


def _zeros(shape):
    return lambda x: np.zeros((len(x),) + shape)


@dataclass
class EllipticCoefficients:
    """Coefficients of a(y, v) = int M grad y . grad v + d.(grad y v + y grad v) + b y v.

    Every callable maps points of shape (N, 2) to values: ``M`` -> (N, 2, 2),
    ``d`` -> (N, 2), ``b`` -> (N,). The gradients follow the same layout with a
    leading derivative index: ``grad_M[:, m, i, j] = d a_ij / dx_m``,
    ``grad_d[:, m, i] = d d_i / dx_m``, ``grad_b[:, m] = d b / dx_m``.
    """

    M: Callable = field(default_factory=lambda: (lambda x: np.broadcast_to(np.eye(2), (len(x), 2, 2)).copy()))
    d: Callable = field(default_factory=lambda: _zeros((2,)))
    b: Callable = field(default_factory=lambda: _zeros(()))
    grad_M: Callable = field(default_factory=lambda: _zeros((2, 2, 2)))
    grad_d: Callable = field(default_factory=lambda: _zeros((2, 2)))
    grad_b: Callable = field(default_factory=lambda: _zeros((2,)))
    is_laplacian: bool = False

    @classmethod
    def laplacian(cls) -> "EllipticCoefficients":
        return cls(is_laplacian=True)

    @classmethod
    def constant(cls, M=None, d=(0.0, 0.0), b=0.0) -> "EllipticCoefficients":
        M = np.eye(2) if M is None else np.asarray(M, dtype=float)
        d = np.asarray(d, dtype=float)
        lap = bool(np.allclose(M, np.eye(2)) and not d.any() and b == 0.0)
        return cls(M=lambda x: np.broadcast_to(M, (len(x), 2, 2)).copy(),
                   d=lambda x: np.broadcast_to(d, (len(x), 2)).copy(),
                   b=lambda x: np.full(len(x), float(b)),
                   is_laplacian=lap)

    def evaluate(self, points: np.ndarray):
        """Evaluate all coefficients at points of shape (..., 2)."""
        shape = points.shape[:-1]
        x = points.reshape(-1, 2)
        out = (self.M(x), self.d(x), self.b(x), self.grad_M(x), self.grad_d(x), self.grad_b(x))
        for arr in out:
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite coefficient evaluation")
        M, d, b, gM, gd, gb = out
        return (M.reshape(shape + (2, 2)), d.reshape(shape + (2,)), b.reshape(shape),
                gM.reshape(shape + (2, 2, 2)), gd.reshape(shape + (2, 2)), gb.reshape(shape + (2,)))


LAPLACIAN = EllipticCoefficients.laplacian()


# --------------------------------------------------------------------------
# assembly


def _scatter_matrix(mesh: TriangleMesh, local: np.ndarray) -> sp.csr_matrix:
    cells = mesh.cells
    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    n = mesh.n_vertices
    # COO -> CSR sums duplicates in a fixed order
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def scatter_vector(mesh: TriangleMesh, local: np.ndarray) -> np.ndarray:
    """Sum per-cell contributions of shape (m, 3[, k]) into nodal arrays."""
    out = np.zeros((mesh.n_vertices,) + local.shape[2:])
    np.add.at(out, mesh.cells.ravel(), local.reshape((-1,) + local.shape[2:]))
    return out


def assemble_bilinear(mesh: TriangleMesh, coeffs: EllipticCoefficients = LAPLACIAN) -> sp.csr_matrix:
    """Matrix with entry (k, l) = a(phi_l, phi_k)."""
    geo = geometry(mesh)
    g, area = geo.grads, geo.areas
    if coeffs.is_laplacian:
        local = area[:, None, None] * np.einsum("mkd,mld->mkl", g, g)
        return _scatter_matrix(mesh, local)
    M, d, b, *_ = coeffs.evaluate(geo.quad_points)      # (m, q, ...)
    w = QUAD_WEIGHTS
    Mbar = np.einsum("q,mqij->mij", w, M)               # grad terms constant per cell
    local = np.einsum("mki,mij,mlj->mkl", g, Mbar, g)
    # d-term: int d.(grad phi_l phi_k + phi_l grad phi_k)
    phi = QUAD_BARY                                     # phi[q, k]
    dphi = np.einsum("q,qk,mqi->mki", w, phi, d)        # int d phi_k / area
    local += np.einsum("mli,mki->mkl", g, dphi) + np.einsum("mki,mli->mkl", g, dphi)
    local += np.einsum("q,mq,qk,ql->mkl", w, b, phi, phi)
    local *= area[:, None, None]
    return _scatter_matrix(mesh, local)


def assemble_mass(mesh: TriangleMesh) -> sp.csr_matrix:
    area = geometry(mesh).areas
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter_matrix(mesh, area[:, None, None] * ref)


def lumped_mass(mesh: TriangleMesh) -> np.ndarray:
    area = geometry(mesh).areas
    return scatter_vector(mesh, np.repeat(area[:, None] / 3.0, 3, axis=1))


def piecewise(mesh: TriangleMesh, f) -> np.ndarray:
    """Per-cell values of a subdomain-wise constant.

    ``f`` is a scalar, a pair ``(outer, inner)``, or an array with one value per cell.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(mesh.n_cells, float(f))
    if f.shape == (2,):
        return np.where(mesh.cell_labels == INNER, f[1], f[0])
    if f.shape == (mesh.n_cells,):
        return f
    raise ValueError("f must be a scalar, an (outer, inner) pair, or per-cell values")


def assemble_load(mesh: TriangleMesh, f) -> np.ndarray:
    """Entries int f phi_k with f constant per cell."""
    fc = piecewise(mesh, f)
    area = geometry(mesh).areas
    return scatter_vector(mesh, np.repeat((fc * area / 3.0)[:, None], 3, axis=1))


def nodal_average(mesh: TriangleMesh, f) -> np.ndarray:
    """Lumped L2 projection of a per-cell constant onto P1."""
    return assemble_load(mesh, f) / lumped_mass(mesh)


# --------------------------------------------------------------------------
# linear systems


@dataclass
class SparseSystem:
    """Matrix, right-hand side, and Dirichlet bookkeeping."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.rhs = np.asarray(self.rhs, dtype=float)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n) or self.rhs.shape != (n,):
            raise ValueError("matrix must be square and match the rhs length")


def apply_dirichlet(system: SparseSystem, nodes, values=0.0) -> SparseSystem:
    """Row/column elimination: constrained rows become identity rows."""
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    values = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape).copy()
    if nodes.size == 0:
        return system
    order = np.argsort(nodes, kind="stable")
    nodes, values = nodes[order], values[order]
    dup = nodes[1:] == nodes[:-1]
    if np.any(dup & (values[1:] != values[:-1])):
        raise ValueError("conflicting Dirichlet values for the same node")
    keep = np.r_[True, ~dup]
    nodes, values = nodes[keep], values[keep]
    # merge with earlier constraints
    if system.constrained.size:
        old = dict(zip(system.constrained.tolist(), system.values.tolist()))
        for i, v in zip(nodes.tolist(), values.tolist()):
            if i in old and old[i] != v:
                raise ValueError("conflicting Dirichlet values for the same node")
            old[i] = v
        nodes = np.array(sorted(old), dtype=np.int64)
        values = np.array([old[i] for i in nodes.tolist()])

    n = system.matrix.shape[0]
    A = system.matrix
    lift = np.zeros(n)
    lift[nodes] = values
    rhs = system.rhs - A @ lift
    keep_mask = np.ones(n)
    keep_mask[nodes] = 0.0
    D = sp.diags(keep_mask)
    A = (D @ A @ D).tolil()
    A[nodes, nodes] = 1.0
    rhs[nodes] = values
    return SparseSystem(A.tocsr(), rhs, nodes, values)


def solve_sparse(system: SparseSystem, tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    """Solve the system to relative residual ``tol``.

    ``method="cg"`` runs Jacobi-preconditioned conjugate gradients on the
    unconstrained rows (iteration cap 10 N) and falls back to a sparse direct
    solve when CG stalls; ``"direct"`` goes straight to the factorization.
    """
    A, b = system.matrix, system.rhs
    n = A.shape[0]
    x = np.zeros(n)
    x[system.constrained] = system.values
    free = np.ones(n, dtype=bool)
    free[system.constrained] = False
    if not free.any():
        return x
    idx = np.flatnonzero(free)
    Af = A[idx][:, idx]
    bf = b[idx] - A[idx] @ x
    bnorm = np.linalg.norm(b)
    if not np.any(bf):
        return x
    if method == "cg":
        diag = Af.diagonal()
        if np.all(diag > 0):
            M = sp.diags(1.0 / diag)
            xf, info = spla.cg(Af, bf, rtol=tol * bnorm / np.linalg.norm(bf), atol=0.0,
                               maxiter=10 * n, M=M)
            if info == 0:
                x[idx] = xf
                return x
            log.debug("cg did not converge (info=%s); using direct solve", info)
    elif method != "direct":
        raise ValueError(f"unknown method {method!r}")
    xf = spla.spsolve(Af.tocsc(), bf)
    x[idx] = xf
    res = np.linalg.norm(A @ x - b)
    if not np.all(np.isfinite(x)) or res > max(tol, 1e-8) * max(bnorm, 1e-300):
        raise SolverError(f"linear solve failed, relative residual {res / max(bnorm, 1e-300):.2e}")
    return x


def solve_dirichlet(A: sp.spmatrix, rhs: np.ndarray, nodes, values=0.0,
                    tol: float = 1e-10, method: str = "cg") -> np.ndarray:
    return solve_sparse(apply_dirichlet(SparseSystem(A, rhs), nodes, values), tol, method)


# --------------------------------------------------------------------------
# post-processing


def cellwise_gradient(mesh: TriangleMesh, u: np.ndarray) -> np.ndarray:
    g = geometry(mesh).grads
    return np.einsum("mk,mkd->md", np.asarray(u)[mesh.cells], g)


def _positive_part_integral(vals: np.ndarray, area: np.ndarray) -> np.ndarray:
    """Exact int_T max(u, 0) for linear u with vertex values ``vals`` (m, 3)."""
    s = np.sort(vals, axis=1)[:, ::-1]                  # a >= b >= c
    a, b, c = s[:, 0], s[:, 1], s[:, 2]
    out = np.zeros(len(vals))
    allpos = c >= 0
    out[allpos] = area[allpos] * (a + b + c)[allpos] / 3.0
    one = (a > 0) & (b <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[one] = area[one] * a[one] ** 3 / (3.0 * (a - b)[one] * (a - c)[one])
        two = (b > 0) & (c < 0)
        neg = area[two] * (-c[two]) ** 3 / (3.0 * (a - c)[two] * (b - c)[two])
    out[two] = area[two] * (a + b + c)[two] / 3.0 + neg
    return out


def field_norms(mesh: TriangleMesh, u: np.ndarray):
    """(L1, L2, H1) norms of a P1 field, all computed exactly."""
    u = np.asarray(u, dtype=float)
    geo = geometry(mesh)
    vals = u[mesh.cells]
    l1 = float(np.sum(_positive_part_integral(vals, geo.areas)
                      + _positive_part_integral(-vals, geo.areas)))
    l2sq = float(u @ (assemble_mass(mesh) @ u))
    grad = cellwise_gradient(mesh, u)
    semi = float(np.sum(geo.areas * np.sum(grad**2, axis=1)))
    return l1, np.sqrt(max(l2sq, 0.0)), np.sqrt(max(l2sq + semi, 0.0))


def h1_norm(mesh: TriangleMesh, u: np.ndarray) -> float:
    return field_norms(mesh, u)[2]


class PointLocator:
    """Find containing cells and barycentric coordinates for query points."""

    def __init__(self, mesh: TriangleMesh, k: int = 12):
        self.mesh = mesh
        self.k = min(k, mesh.n_cells)
        v = mesh.vertices[mesh.cells]
        self._v0 = v[:, 0]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self._inv = np.stack([np.column_stack([e2[:, 1], -e1[:, 1]]),
                              np.column_stack([-e2[:, 0], e1[:, 0]])], axis=2) / det[:, None, None]
        self._tree = cKDTree(v.mean(axis=1))

    def _bary(self, cells, pts):
        lam = np.einsum("nij,nj->ni", self._inv[cells], pts - self._v0[cells])
        return np.column_stack([1 - lam.sum(axis=1), lam])

    def locate(self, points: np.ndarray, tol: float = 1e-10):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        cell = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        best = np.full(n, -np.inf)
        _, cand = self._tree.query(points, k=self.k)
        cand = cand.reshape(n, -1)
        for j in range(cand.shape[1]):
            b = self._bary(cand[:, j], points)
            score = b.min(axis=1)
            better = score > best
            best[better] = score[better]
            cell[better] = cand[better, j]
            bary[better] = b[better]
        missing = np.flatnonzero(best < -tol)
        for i in missing:                                # exhaustive fallback
            allc = np.arange(self.mesh.n_cells)
            b = self._bary(allc, np.broadcast_to(points[i], (len(allc), 2)))
            j = int(np.argmax(b.min(axis=1)))
            best[i], cell[i], bary[i] = b[j].min(), j, b[j]
        if np.any(best < -tol):
            raise ValueError("point(s) outside the mesh")
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return cell, bary


def evaluate_at_points(mesh: TriangleMesh, u: np.ndarray, points, locator: Optional[PointLocator] = None):
    locator = locator or PointLocator(mesh)
    cell, bary = locator.locate(points)
    vals = np.asarray(u)[mesh.cells[cell]]
    return np.einsum("nk,nk...->n...", bary, vals)


# --------------------------------------------------------------------------
# I/O


def write_field(path, values: np.ndarray) -> None:
    """``field N`` header then one value per line; vector fields interleave components."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    flat = values.reshape(-1)
    head = f"field {n}" if values.ndim == 1 else f"field {n} {values.shape[1]}"
    Path(path).write_text(head + "\n" + "\n".join(repr(v) for v in flat.tolist()) + "\n")


def read_field(path) -> np.ndarray:
    lines = Path(path).read_text().split()
    if not lines or lines[0] != "field":
        raise ValueError(f"{path}: bad field header")
    n = int(lines[1])
    if len(lines) > 2 + n and len(lines) - 3 == 2 * n:
        return np.array(lines[3:], dtype=float).reshape(n, 2)
    return np.array(lines[2:2 + n], dtype=float)


class ReferenceField:
    """P1 field frozen on its own mesh, sampled on other meshes by point location.

    Used for the tracking data, which is generated once and never moves with
    the optimised mesh.
    """

    def __init__(self, mesh: TriangleMesh, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_vertices,):
            raise ValueError("values must have one entry per vertex")
        self.mesh = mesh
        self.values = values
        self._locator = PointLocator(mesh)
        self._grad = cellwise_gradient(mesh, values)
        self._cache = None

    def _sample(self, mesh: TriangleMesh):
        if self._cache is not None and self._cache[0] is mesh:
            return self._cache[1], self._cache[2]
        if mesh is self.mesh:
            vals = self.values
            # at shared vertices take the gradient of the first cell found
            cell, _ = self._locator.locate(mesh.vertices)
        else:
            cell, bary = self._locator.locate(mesh.vertices)
            vals = np.einsum("nk,nk->n", bary, self.values[self.mesh.cells[cell]])
        grads = self._grad[cell]
        self._cache = (mesh, vals, grads)
        return vals, grads

    def nodal(self, mesh: TriangleMesh) -> np.ndarray:
        """Nodal interpolant on ``mesh``."""
        return self._sample(mesh)[0]

    def nodal_gradient(self, mesh: TriangleMesh) -> np.ndarray:
        """Reference-mesh cellwise gradient evaluated at the vertices of ``mesh``."""
        return self._sample(mesh)[1]
