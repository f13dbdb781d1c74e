import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vishape import fem, vi
from vishape.mesh import INNER, generate_disk_mesh, unit_square_mesh

F = (-10.0, 100.0)
gammas = st.floats(min_value=1e-2, max_value=1e8)
xs = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)


@pytest.mark.parametrize("x,expected", [(0.2, 0.2), (0.0, 0.025), (-0.2, 0.0)])
def test_max_gamma_values(x, expected):
    assert float(vi.max_gamma(x, 10.0)) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x,expected", [(0.0, 0.5), (1.0, 1.0), (-1.0, 0.0)])
def test_sign_gamma_values(x, expected):
    assert float(vi.sign_gamma(x, 10.0)) == expected


@settings(max_examples=200, deadline=None)
@given(xs, gammas)
def test_max_gamma_uniform_bound(x, g):
    assert abs(float(vi.max_gamma(x, g)) - max(0.0, x)) <= 0.25 / g * (1 + 1e-12) + 1e-15


@settings(max_examples=200, deadline=None)
@given(xs, xs, gammas)
def test_sign_gamma_monotone_in_unit_interval(a, b, g):
    lo, hi = sorted((a, b))
    s_lo, s_hi = float(vi.sign_gamma(lo, g)), float(vi.sign_gamma(hi, g))
    assert 0.0 <= s_lo <= s_hi <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), gammas)
def test_sign_gamma_is_derivative(t, g):
    # sample in units of the smoothing band so the step stays above roundoff
    x, h = t / g, 1e-6 / g
    fd = (float(vi.max_gamma(x + h, g)) - float(vi.max_gamma(x - h, g))) / (2 * h)
    assert fd == pytest.approx(float(vi.sign_gamma(x, g)), abs=1e-5)


@pytest.mark.parametrize("g", [1.0, 10.0, 1e4])
def test_max_gamma_c1_at_band_edges(g):
    for edge in (-1 / g, 1 / g):
        quad = 0.25 * g * edge**2 + 0.5 * edge + 0.25 / g
        assert quad == pytest.approx(max(0.0, edge), abs=1e-14)
        assert 0.5 * g * edge + 0.5 == pytest.approx(float(edge > 0), abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=5, max_size=5), st.lists(st.floats(0, 1), min_size=5, max_size=5),
       gammas, st.floats(1e-2, 1e6))
def test_nemytskii_monotone(v, gap, g, c):
    v = np.array(v)
    u = v + np.array(gap)
    lb, phi = 0.3, 0.2
    assert np.all(vi.max_gamma(lb + c * (u - phi), g) >= vi.max_gamma(lb + c * (v - phi), g))


def test_smoother_and_regularization_validation():
    assert vi.Smoother(10.0).bound == 0.025
    with pytest.raises(ValueError):
        vi.Smoother(0.0)
    with pytest.raises(ValueError):
        vi.Regularization(0.0, np.zeros(3))
    with pytest.raises(ValueError):
        vi.Regularization(1.0, -np.ones(3))


def test_obstacle_consistency_by_finite_differences():
    pts = np.random.default_rng(0).uniform(0.1, 0.9, size=(20, 2))
    h = 1e-4
    for ob in (vi.phi1(), vi.phi2(), vi.Obstacle.from_expression("sin(x1) * x2**2")):
        g = ob.gradient(pts)
        lap = ob.laplacian(pts)
        fd_g = np.column_stack([(ob.value(pts + [h, 0]) - ob.value(pts - [h, 0])) / (2 * h),
                                (ob.value(pts + [0, h]) - ob.value(pts - [0, h])) / (2 * h)])
        fd_lap = sum(ob.value(pts + e) + ob.value(pts - e) for e in ([h, 0], [0, h])) / h**2 \
            - 4 * ob.value(pts) / h**2
        assert np.allclose(g, fd_g, atol=1e-6)
        assert np.allclose(lap, fd_lap, atol=1e-5)


def test_obstacle_expression_errors():
    with pytest.raises(ValueError):
        vi.get_obstacle("x3 + 1")
    with pytest.raises(ValueError):
        vi.get_obstacle("((")


def test_lambda_bar_phi1(disk):
    lb = vi.lambda_bar(disk, F, vi.phi1())
    inner = np.zeros(disk.n_vertices, bool)
    inner[disk.cells[disk.cell_labels == INNER]] = True
    outer = np.zeros(disk.n_vertices, bool)
    outer[disk.cells[disk.cell_labels != INNER]] = True
    assert np.allclose(lb[inner & ~outer], 100.0)
    assert np.allclose(lb[outer & ~inner], 0.0)


def test_lambda_bar_phi2(disk):
    lb = vi.lambda_bar(disk, F, vi.phi2())
    expected = np.maximum(0, fem.nodal_average(disk, F) + 5 * np.exp(-disk.vertices[:, 0] - 1))
    assert np.allclose(lb, expected)
    only_outer = np.ones(disk.n_vertices, bool)
    only_outer[disk.cells[disk.cell_labels == INNER]] = False
    # -10 + 5 e^{-x-1} < 0 everywhere in the unit square
    assert np.all(lb[only_outer] == 0)


def test_lambda_bar_negative_load(square):
    assert not np.any(vi.lambda_bar(square, -1.0, vi.Obstacle.constant(2.0)))


def _reg(mesh, f, ob, c):
    return vi.Regularization(c, vi.lambda_bar(mesh, f, ob))


def test_zero_load_gives_zero_states(square):
    ob = vi.phi1()
    reg = _reg(square, 0.0, ob, 1e4)
    assert not np.any(reg.lambda_bar)
    assert np.allclose(vi.solve_state_regularized(square, 0.0, ob, reg), 0.0)
    assert np.allclose(vi.solve_state_smoothed(square, 0.0, ob, reg, vi.Smoother(100.0)), 0.0)
    y, lam = vi.solve_vi_pdas(square, 0.0, ob)
    assert np.allclose(y, 0.0) and np.allclose(lam, 0.0)
    assert np.allclose(vi.psor_solve(square, 0.0, ob), 0.0)


def test_inactive_obstacle_matches_linear_solve(disk):
    ob = vi.Obstacle.constant(1e6)
    reg = _reg(disk, F, ob, 1e3)
    assert not np.any(reg.lambda_bar[np.unique(disk.cells[disk.cell_labels != INNER])] > 100)
    A = fem.assemble_bilinear(disk)
    plain = fem.solve_dirichlet(A, fem.assemble_load(disk, F), disk.outer_boundary, tol=1e-13)
    # lambda_bar > 0 on the inner subdomain, so use an obstacle-free shift: c (y - phi) dominates
    reg0 = vi.Regularization(1e3, np.zeros(disk.n_vertices))
    y = vi.solve_state_smoothed(disk, F, ob, reg0, vi.Smoother(1e3), tol=1e-12)
    assert fem.h1_norm(disk, y - plain) <= 1e-8
    y_c = vi.solve_state_regularized(disk, F, ob, reg0, tol=1e-12)
    assert fem.h1_norm(disk, y_c - plain) <= 1e-8


def test_large_penalty_nearly_feasible(disk):
    ob = vi.phi1()
    y = vi.solve_state_regularized(disk, F, ob, _reg(disk, F, ob, 1e6), tol=1e-11)
    assert np.max(y - 0.5) <= 1e-4


@pytest.mark.parametrize("name", ["phi1", "phi2"])
def test_feasibility_chain(disk, name):
    ob = vi.get_obstacle(name)
    y1 = vi.solve_state_regularized(disk, F, ob, _reg(disk, F, ob, 1e2), tol=1e-12)
    y2 = vi.solve_state_regularized(disk, F, ob, _reg(disk, F, ob, 1e4), tol=1e-12)
    y, _ = vi.solve_vi_pdas(disk, F, ob, tol=1e-12)
    phi = ob.value(disk.vertices)
    assert np.all(y1 <= y2 + 1e-8)
    assert np.all(y2 <= y + 1e-8)
    assert np.all(y <= phi + 1e-8)


def test_pdas_complementarity(disk):
    ob = vi.phi1()
    sol = vi.solve_vi_pdas(disk, F, ob, tol=1e-12, full_output=True)
    phi = ob.value(disk.vertices)
    assert sol.active.size > 0
    inner = np.unique(disk.cells[disk.cell_labels == INNER])
    assert np.all(np.isin(sol.active, inner))
    assert np.max(np.abs(sol.multiplier * (sol.y - phi))) <= 1e-8
    assert np.all(sol.y <= phi + 1e-10)
    assert np.all(sol.multiplier >= -1e-10)


@pytest.mark.parametrize("tol", [3e-4, 1e-6, 1e-10])
@pytest.mark.parametrize("name", ["phi1", "phi2"])
def test_pdas_residual_meets_tolerance(disk, name, tol):
    ob = vi.get_obstacle(name)
    problem = vi.DiscreteProblem.build(disk, F, ob)
    y, lam = vi.solve_vi_pdas(disk, F, ob, tol=tol, problem=problem)
    assert np.linalg.norm(problem.residual(y, lam)) / problem.residual_scale() <= tol


def test_psor_unconstrained_and_complementarity():
    mesh = unit_square_mesh(8, inner=(0.25, 0.25, 0.75, 0.75))
    A = fem.assemble_bilinear(mesh)
    b = fem.assemble_load(mesh, F)
    plain = fem.solve_dirichlet(A, b, mesh.outer_boundary, tol=1e-14)
    tol = 1e-12
    free = np.setdiff1d(np.arange(mesh.n_vertices), mesh.outer_boundary)
    assert np.max(np.abs(vi.psor_solve(mesh, F, vi.Obstacle.constant(1e6), tol=tol) - plain)) <= 1e-9
    ob = vi.phi1()
    u = vi.psor_solve(mesh, F, ob, tol=tol)
    r = (A @ u - b)[free]
    on = np.isclose(u[free], 0.5, atol=1e-12)
    assert on.any()
    assert np.all(r[on] <= 1e-8)           # the obstacle pushes down: K u - b <= 0 there
    assert np.all(np.abs(r[~on]) <= 1e-8)


@pytest.mark.parametrize("seed", [0, 1])
@pytest.mark.parametrize("name", ["phi1", "phi2"])
def test_pdas_matches_psor_on_small_mesh(seed, name):
    mesh = generate_disk_mesh(0.2, 0.07, seed=seed)
    assert mesh.n_vertices <= 300
    ob = vi.get_obstacle(name)
    y, _ = vi.solve_vi_pdas(mesh, F, ob, tol=1e-13)
    assert np.max(np.abs(y - vi.psor_solve(mesh, F, ob, tol=1e-13))) <= 1e-6


def test_smoothed_state_converges_to_penalised(disk):
    ob = vi.phi1()
    reg = _reg(disk, F, ob, 1e-6)
    y_c = vi.solve_state_regularized(disk, F, ob, reg, tol=1e-13)
    errs = [fem.h1_norm(disk, vi.solve_state_smoothed(disk, F, ob, reg, vi.Smoother(g), tol=1e-13) - y_c)
            for g in (1e2, 1e3, 1e4)]
    slope = np.polyfit(np.log10([1e2, 1e3, 1e4]), np.log10(errs), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.3)
