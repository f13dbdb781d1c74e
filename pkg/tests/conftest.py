import numpy as np
import pytest

from vishape import fem, lab, vi
from vishape.mesh import generate_disk_mesh, generate_ellipse_mesh, unit_square_mesh

F = (-10.0, 100.0)


@pytest.fixture(scope="session")
def disk():
    return generate_disk_mesh(0.15, 0.025)


@pytest.fixture(scope="session")
def small_disk():
    return generate_disk_mesh(0.2, 0.06)


@pytest.fixture(scope="session")
def square():
    return unit_square_mesh(12, inner=(0.3, 0.7, 0.3, 0.7))


@pytest.fixture(scope="session")
def target_refs():
    """Tracking data for both obstacles on the default target shape.

    The target mesh uses its own jitter seed so that interior vertices of the
    test meshes do not land on vertices of the target mesh, where the
    piecewise linear tracking datum has kinks and is not differentiable.
    """
    tmesh = generate_ellipse_mesh(lab.TARGET_SHAPE["axes"], 0.025, center=lab.TARGET_SHAPE["center"],
                                  angle=lab.TARGET_SHAPE["angle"], seed=1)
    return {name: fem.ReferenceField(tmesh, lab.generate_target(tmesh, vi.get_obstacle(name), F))
            for name in ("phi1", "phi2")}


def smooth_field(mesh, kind=0):
    """Smooth vector field vanishing on the outer boundary."""
    x = mesh.vertices
    bump = (x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1]))[:, None]
    fields = [
        np.column_stack([np.sin(3 * x[:, 0] + 1) * np.cos(2 * x[:, 1]), np.cos(4 * x[:, 0] * x[:, 1])]),
        np.column_stack([x[:, 0] - 0.5, x[:, 1] - 0.5]),
        np.column_stack([np.ones(len(x)), np.zeros(len(x))]),
        np.column_stack([-(x[:, 1] - 0.5), x[:, 0] - 0.5]),
        np.column_stack([np.exp(x[:, 0]) * x[:, 1], np.sin(5 * x[:, 1])]),
    ]
    V = fields[kind] * bump
    V[mesh.outer_boundary] = 0.0
    return V


ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    """Store a PASS/FAIL line for the terminal summary and return ``ok``."""
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
