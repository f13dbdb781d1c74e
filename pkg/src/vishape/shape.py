"""Shape derivatives and the elasticity-based (Steklov-Poincare) shape gradient.

A shape derivative is stored as its action on the P1 vector basis: one
2-vector per vertex, so ``DJ[V] = sum(values * V)``. The volume expressions
are evaluated exactly for P1 fields transported with the mesh, which makes
them the derivative of the discrete objective (up to the reference-data
transfer), not only an approximation of the continuous one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .adjoint import ActiveSet
from .fem import LAPLACIAN, QUAD_BARY, QUAD_WEIGHTS, EllipticCoefficients
from .mesh import TriangleMesh, interface_adjacent_vertices
from .vi import Obstacle, Regularization, Smoother, max_gamma, sign_gamma


@dataclass
class ShapeFunctional:
    mesh: TriangleMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices, 2):
            raise ValueError("shape functional needs one 2-vector per vertex")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("shape functional has non-finite values")

    def __call__(self, V) -> float:
        return float(np.sum(self.values * np.asarray(V)))

    def __add__(self, other: "ShapeFunctional") -> "ShapeFunctional":
        _same_mesh(self.mesh, other.mesh)
        return ShapeFunctional(self.mesh, self.values + other.values)

    def scaled(self, a: float) -> "ShapeFunctional":
        return ShapeFunctional(self.mesh, a * self.values)


def _same_mesh(a, b):
    if a is not b and (a.n_vertices != b.n_vertices or not np.array_equal(a.vertices, b.vertices)):
        raise ValueError("fields live on different meshes")


def _finish(mesh, local, nodal):
    """Scatter per-cell (m, 3, 2) contributions, add nodal ones, clear the boundary."""
    out = fem.scatter_vector(mesh, local) + nodal
    out[mesh.outer_boundary] = 0.0
    return ShapeFunctional(mesh, out)


def _tracking_terms(mesh, geo, y, ybar, ybar_grad):
    """-(y - ybar) grad(ybar).V (nodal) and div(V) (y - ybar)^2 / 2 (per cell)."""
    r = y - ybar
    rT = r[mesh.cells]
    half_sq = 0.5 * (np.sum(rT**2, axis=1) + np.sum(rT, axis=1) ** 2) / 12.0
    local = (half_sq * geo.areas)[:, None, None] * geo.grads
    Mr = fem.assemble_mass(mesh) @ r
    nodal = -Mr[:, None] * ybar_grad
    return local, nodal


def _bilinear_terms(mesh, geo, y, p, coeffs: EllipticCoefficients):
    """Transport derivative of a(y, p) for every basis field, shape (m, 3, 2)."""
    g = geo.grads                                   # g[T, k, :] = grad phi_k
    gy = fem.cellwise_gradient(mesh, y)
    gp = fem.cellwise_gradient(mesh, p)
    area = geo.areas
    yq = geo.cell_values_at_quad(y)                 # (m, q)
    pq = geo.cell_values_at_quad(p)
    M, d, b, dM, dd, db = coeffs.evaluate(geo.quad_points)
    w, phi = QUAD_WEIGHTS, QUAD_BARY                # phi[q, k]

    Mg_p = np.einsum("mqij,mj->mqi", M, gp)         # M grad p
    gyM = np.einsum("mi,mqij->mqj", gy, M)          # grad y^T M
    # -grad y^T (DV M + M DV^T) grad p, DV = e_m g_k^T
    lead = -(gy[:, None, None, :] * np.einsum("mki,mqi->mqk", g, Mg_p)[..., None]
             + np.einsum("mqj,mkj->mqk", gyM, g)[..., None] * gp[:, None, None, :])
    # + grad y^T (dM/dx_m phi_k) grad p
    lead += np.einsum("mi,mqnij,mj->mqn", gy, dM, gp)[:, :, None, :] * phi[None, :, :, None]
    # + div V (grad y^T M grad p + b y p + d.(grad y p + y grad p))
    dgy = np.einsum("mqi,mi->mq", d, gy)
    dgp = np.einsum("mqi,mi->mq", d, gp)
    vol = np.einsum("mqj,mj->mq", gyM, gp) + b * yq * pq + dgy * pq + yq * dgp
    lead += vol[:, :, None, None] * g[:, None, :, :]
    # zeroth order: (grad b . V) y p
    lead += (db * (yq * pq)[..., None])[:, :, None, :] * phi[None, :, :, None]
    # first order: y ((grad d^T V)^T grad p - d^T (grad V grad p)) and the same with y, p swapped
    ddv = (np.einsum("mqni,mi->mqn", dd, gy) * pq[..., None]
           + np.einsum("mqni,mi->mqn", dd, gp) * yq[..., None])
    lead += ddv[:, :, None, :] * phi[None, :, :, None]
    gkd = np.einsum("mki,mqi->mqk", g, d)           # g_k . d
    lead -= gkd[..., None] * (gy[:, None, None, :] * pq[:, :, None, None]
                              + yq[:, :, None, None] * gp[:, None, None, :])
    return np.einsum("q,mqkn->mkn", w, lead) * area[:, None, None]


def _bilinear_terms_laplacian(mesh, geo, y, p):
    """Same as :func:`_bilinear_terms` for M = I, d = 0, b = 0:
    -grad y^T (grad V^T + grad V) grad p + div V grad y . grad p."""
    g = geo.grads
    gy = fem.cellwise_gradient(mesh, y)
    gp = fem.cellwise_gradient(mesh, p)
    gkp = np.einsum("mki,mi->mk", g, gp)
    gky = np.einsum("mki,mi->mk", g, gy)
    dot = np.sum(gy * gp, axis=1)
    local = (-(gy[:, None, :] * gkp[..., None] + gky[..., None] * gp[:, None, :])
             + dot[:, None, None] * g)
    return local * geo.areas[:, None, None]


def _load_terms(mesh, geo, p, f):
    """-div V f p with f constant per cell (its transport derivative vanishes)."""
    fc = fem.piecewise(mesh, f)
    pmean = p[mesh.cells].mean(axis=1)
    return -(fc * pmean * geo.areas)[:, None, None] * geo.grads


def _smoothed_terms(mesh, geo, y, p, obstacle, reg, smoother):
    """div V max_gamma(z) p (lumped) and -c sign_gamma(z) grad(phi).V p (nodal)."""
    z = reg.lambda_bar + reg.c * (y - obstacle.at(mesh.vertices))
    Np = max_gamma(z, smoother.gamma) * p
    local = (geo.areas * Np[mesh.cells].sum(axis=1) / 3.0)[:, None, None] * geo.grads
    m = fem.lumped_mass(mesh)
    s = sign_gamma(z, smoother.gamma)
    nodal = -(reg.c * m * s * p)[:, None] * obstacle.gradient(mesh.vertices)
    return local, nodal


def assemble_dj_smoothed(mesh, y, p, ybar, ybar_grad, f, obstacle: Obstacle,
                         reg: Regularization, smoother: Smoother,
                         coeffs: EllipticCoefficients = LAPLACIAN,
                         specialized: bool = True) -> ShapeFunctional:
    """Shape derivative of the tracking term under the fully regularized state.

    ``ybar`` is the data interpolated at the vertices and ``ybar_grad`` its
    reference gradient at the vertices (see :class:`~vishape.fem.ReferenceField`).
    With ``specialized`` the Laplacian shortcut is used when ``coeffs`` is the
    Laplacian.
    """
    geo = fem.geometry(mesh)
    local, nodal = _tracking_terms(mesh, geo, y, ybar, ybar_grad)
    if coeffs.is_laplacian and specialized:
        local = local + _bilinear_terms_laplacian(mesh, geo, y, p)
    else:
        local = local + _bilinear_terms(mesh, geo, y, p, coeffs)
    local = local + _load_terms(mesh, geo, p, f)
    loc_nl, nod_nl = _smoothed_terms(mesh, geo, y, p, obstacle, reg, smoother)
    return _finish(mesh, local + loc_nl, nodal + nod_nl)


def assemble_dj_laplacian(mesh, y, p, ybar, ybar_grad, f, obstacle, reg, smoother) -> ShapeFunctional:
    """Laplacian form of :func:`assemble_dj_smoothed`."""
    return assemble_dj_smoothed(mesh, y, p, ybar, ybar_grad, f, obstacle, reg, smoother,
                                LAPLACIAN, specialized=True)


def active_set_term(mesh, obstacle: Obstacle, ybar, active: ActiveSet) -> ShapeFunctional:
    """int_A (phi - ybar) grad(phi).V; a cell counts with weight (#active vertices) / 3."""
    geo = fem.geometry(mesh)
    frac = active.mask(mesh.n_vertices)[mesh.cells].sum(axis=1) / 3.0
    sel = np.flatnonzero(frac > 0)
    local = np.zeros((mesh.n_cells, 3, 2))
    if sel.size:
        qp = geo.quad_points[sel]                                   # (s, q, 2)
        flat = qp.reshape(-1, 2)
        phi_q = obstacle.value(flat).reshape(len(sel), 3)
        gphi_q = obstacle.gradient(flat).reshape(len(sel), 3, 2)
        ybar_q = np.asarray(ybar)[mesh.cells[sel]] @ QUAD_BARY.T
        integrand = (phi_q - ybar_q)[..., None] * gphi_q            # (s, q, 2)
        local[sel] = np.einsum("q,qk,sqn->skn", QUAD_WEIGHTS, QUAD_BARY, integrand) \
            * (geo.areas[sel] * frac[sel])[:, None, None]
    return _finish(mesh, local, np.zeros((mesh.n_vertices, 2)))


def active_set_term_nodal(mesh, y, p, ybar, obstacle: Obstacle, active: ActiveSet,
                          coeffs: EllipticCoefficients = LAPLACIAN) -> ShapeFunctional:
    """Discrete limit of the penalty terms: sum over active vertices of
    grad(phi).V times the adjoint residual (K p + M (y - ybar))."""
    K = fem.assemble_bilinear(mesh, coeffs)
    res = K @ p + fem.assemble_mass(mesh) @ (np.asarray(y) - np.asarray(ybar))
    mask = active.mask(mesh.n_vertices)
    nodal = np.where(mask[:, None], res[:, None] * obstacle.gradient(mesh.vertices), 0.0)
    return _finish(mesh, np.zeros((mesh.n_cells, 3, 2)), nodal)


def assemble_dj_limit(mesh, y, p, ybar, ybar_grad, f, obstacle: Obstacle, active: ActiveSet,
                      coeffs: EllipticCoefficients = LAPLACIAN,
                      active_term: str = "nodal") -> ShapeFunctional:
    """Limit shape derivative for the unregularized state and limit adjoint.

    ``active_term="nodal"`` (default) adds :func:`active_set_term_nodal`, the
    exact limit of the penalty terms of :func:`assemble_dj_smoothed`.
    ``"volume"`` adds int_A (phi - ybar) grad(phi).V instead; it omits the flux
    of p across the free boundary and so stays a fixed distance away from the
    regularized derivatives when grad(phi) does not vanish.
    """
    geo = fem.geometry(mesh)
    local, nodal = _tracking_terms(mesh, geo, y, ybar, ybar_grad)
    if coeffs.is_laplacian:
        local = local + _bilinear_terms_laplacian(mesh, geo, y, p)
    else:
        local = local + _bilinear_terms(mesh, geo, y, p, coeffs)
    local = local + _load_terms(mesh, geo, p, f)
    base = _finish(mesh, local, nodal)
    if active_term == "volume":
        return base + active_set_term(mesh, obstacle, ybar, active)
    if active_term == "nodal":
        return base + active_set_term_nodal(mesh, y, p, ybar, obstacle, active, coeffs)
    raise ValueError(f"unknown active_term {active_term!r}")


def perimeter_derivative(mesh: TriangleMesh, nu: float = 1.0) -> ShapeFunctional:
    """nu times the exact derivative of the polygonal interface length."""
    out = np.zeros((mesh.n_vertices, 2))
    e = mesh.interface_edges
    if len(e):
        t = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        np.add.at(out, e[:, 1], t)
        np.add.at(out, e[:, 0], -t)
    out[mesh.outer_boundary] = 0.0
    return ShapeFunctional(mesh, nu * out)


def mask_to_interface(func: ShapeFunctional, mesh: TriangleMesh = None) -> ShapeFunctional:
    """Zero the functional away from the interface vertices and their neighbours."""
    mesh = mesh or func.mesh
    keep = np.zeros(mesh.n_vertices, dtype=bool)
    keep[interface_adjacent_vertices(mesh)] = True
    return ShapeFunctional(mesh, np.where(keep[:, None], func.values, 0.0))


def solve_mu_elas(mesh: TriangleMesh, mu_min: float, mu_max: float, tol: float = 1e-10) -> np.ndarray:
    """Harmonic field equal to mu_max on the interface and mu_min on the outer boundary."""
    if mu_max < mu_min or mu_min < 0:
        raise ValueError("need mu_max >= mu_min >= 0")
    K = fem.assemble_bilinear(mesh, LAPLACIAN)
    iv = mesh.interface_vertices()
    nodes = np.concatenate([mesh.outer_boundary, iv])
    values = np.concatenate([np.full(len(mesh.outer_boundary), float(mu_min)),
                             np.full(len(iv), float(mu_max))])
    mu = fem.solve_dirichlet(K, np.zeros(mesh.n_vertices), nodes, values, tol=tol)
    return mu


def assemble_elasticity(mesh: TriangleMesh, mu: np.ndarray, lambda_elas: float = 0.0) -> sp.csr_matrix:
    """int 2 mu eps(U):eps(V) + lambda tr eps(U) tr eps(V), dofs interleaved (x, y)."""
    geo = fem.geometry(mesh)
    g = geo.grads
    mu_c = np.asarray(mu)[mesh.cells].mean(axis=1)
    # strain of basis (k, m): eps_ij = (delta_im g_kj + delta_jm g_ki) / 2
    E = np.zeros((mesh.n_cells, 3, 2, 2, 2))
    for m in range(2):
        E[:, :, m, m, :] += 0.5 * g
        E[:, :, m, :, m] += 0.5 * g
    E = E.reshape(mesh.n_cells, 6, 2, 2)
    tr = E[:, :, 0, 0] + E[:, :, 1, 1]
    local = 2.0 * mu_c[:, None, None] * np.einsum("taij,tbij->tab", E, E)
    local += lambda_elas * tr[:, :, None] * tr[:, None, :]
    local *= geo.areas[:, None, None]
    dofs = (2 * mesh.cells[:, :, None] + np.arange(2)).reshape(mesh.n_cells, 6)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def shape_gradient(func: ShapeFunctional, mu: np.ndarray, lambda_elas: float = 0.0,
                   tol: float = 1e-10):
    """Riesz representative U of ``func`` in the elasticity inner product.

    Returns ``(U, norm)`` with ``norm = sqrt(func(U))``; the descent direction is ``-U``.
    """
    mesh = func.mesh
    rhs = func.values.reshape(-1)
    if not np.any(rhs):
        return np.zeros((mesh.n_vertices, 2)), 0.0
    A = assemble_elasticity(mesh, mu, lambda_elas)
    bdofs = (2 * mesh.outer_boundary[:, None] + np.arange(2)).ravel()
    U = fem.solve_dirichlet(A, rhs, bdofs, 0.0, tol=tol).reshape(-1, 2)
    return U, float(np.sqrt(max(func(U), 0.0)))
