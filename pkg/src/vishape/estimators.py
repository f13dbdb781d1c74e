"""Estimator-style wrappers: ``fit`` on a mesh, ``predict`` at points.

Hyperparameters are constructor arguments stored verbatim (so ``get_params`` /
``set_params`` and ``sklearn.base.clone`` work); fitted state lives in
attributes with a trailing underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import adjoint as adj
from . import fem, optim, vi
from .fem import ReferenceField
from .mesh import INNER, TriangleMesh


def check_points(X) -> np.ndarray:
    """Validate query points as a finite float array of shape (n, 2)."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 2:
        raise ValueError(f"expected points with 2 columns, got {X.shape[1]}")
    return X


def check_mesh(mesh) -> TriangleMesh:
    if not isinstance(mesh, TriangleMesh):
        raise TypeError(f"expected a TriangleMesh, got {type(mesh).__name__}")
    return mesh


def check_target(target, mesh=None) -> ReferenceField:
    """Accept a ReferenceField, a ``(mesh, values)`` pair, or nodal values on ``mesh``."""
    if isinstance(target, ReferenceField):
        return target
    if isinstance(target, tuple) and len(target) == 2:
        return ReferenceField(check_mesh(target[0]), np.asarray(target[1], dtype=float))
    if mesh is not None:
        return ReferenceField(mesh, check_array(np.asarray(target).reshape(-1, 1)).ravel())
    raise TypeError("target must be a ReferenceField or a (mesh, values) pair")


class ObstacleStateSolver(BaseEstimator):
    """Solve the obstacle problem (or one of its regularizations) on a mesh.

    ``model`` is ``"vi"`` (active set method), ``"penalized"`` or
    ``"smoothed"``. After ``fit``: ``y_``, ``lambda_`` (vi only),
    ``active_set_`` and ``mesh_``.
    """

    def __init__(self, obstacle="phi1", f_outer=-10.0, f_inner=100.0, model="vi",
                 c=1e5, gamma=1e8, tol=1e-10):
        self.obstacle = obstacle
        self.f_outer = f_outer
        self.f_inner = f_inner
        self.model = model
        self.c = c
        self.gamma = gamma
        self.tol = tol

    def fit(self, mesh, y=None):
        mesh = check_mesh(mesh)
        ob = vi.get_obstacle(self.obstacle)
        f = (float(self.f_outer), float(self.f_inner))
        if self.model == "vi":
            self.y_, self.lambda_ = vi.solve_vi_pdas(mesh, f, ob, tol=self.tol)
            self.active_set_ = adj.detect_active_set(mesh, self.y_, ob, 0.0)
        elif self.model in ("penalized", "smoothed"):
            reg = vi.Regularization(self.c, vi.lambda_bar(mesh, f, ob))
            if self.model == "penalized":
                self.y_ = vi.solve_state_regularized(mesh, f, ob, reg, tol=self.tol)
            else:
                self.y_ = vi.solve_state_smoothed(mesh, f, ob, reg, vi.Smoother(self.gamma), tol=self.tol)
            self.lambda_ = None
            self.active_set_ = adj.detect_active_set_c(mesh, self.y_, reg, ob)
        else:
            raise ValueError(f"model must be 'vi', 'penalized' or 'smoothed', not {self.model!r}")
        self.mesh_ = mesh
        return self

    def predict(self, X) -> np.ndarray:
        """State values at the query points."""
        check_is_fitted(self, "y_")
        return fem.evaluate_at_points(self.mesh_, self.y_, check_points(X))


class ShapeOptimizer(BaseEstimator):
    """Recover the interface from tracking data by safeguarded shape descent.

    ``fit(mesh, target)`` runs the optimisation from ``mesh``; ``predict``
    labels points 1 inside the recovered interface and 0 outside.
    """

    def __init__(self, obstacle="phi1", f_outer=-10.0, f_inner=100.0, nu=1e-5, gamma=1e8, c=1e7,
                 eps_state=3e-4, eps_adj=1e-9, eps_shape=1e-6, mu_min=0.0, mu_max=25.0,
                 lambda_elas=0.0, max_iters=500, step_scale=4.0):
        self.obstacle = obstacle
        self.f_outer = f_outer
        self.f_inner = f_inner
        self.nu = nu
        self.gamma = gamma
        self.c = c
        self.eps_state = eps_state
        self.eps_adj = eps_adj
        self.eps_shape = eps_shape
        self.mu_min = mu_min
        self.mu_max = mu_max
        self.lambda_elas = lambda_elas
        self.max_iters = max_iters
        self.step_scale = step_scale

    def run_config(self) -> optim.RunConfig:
        names = set(optim.RunConfig.field_names())
        return optim.RunConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, mesh, target):
        mesh = check_mesh(mesh)
        ref = check_target(target, mesh)
        f = (float(self.f_outer), float(self.f_inner))
        res = optim.optimize(self.run_config(), mesh, ref, vi.get_obstacle(self.obstacle), f)
        self.mesh_ = res.mesh
        self.y_ = res.y
        self.history_ = res.history
        self.status_ = res.status
        self.n_iter_ = res.history[-1].step
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "mesh_")
        X = check_points(X)
        cells, _ = fem.PointLocator(self.mesh_).locate(X)
        return (self.mesh_.cell_labels[cells] == INNER).astype(int)

    def score(self, X, y) -> float:
        """Fraction of points whose inside/outside label is predicted correctly."""
        return float(np.mean(self.predict(X) == np.asarray(y)))
