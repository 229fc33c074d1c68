import csv
import math

import numpy as np
import pytest
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from effdiff import coeffs, eulerian
from effdiff.coeffs import get_problem
from effdiff.eulerian import (
    DiscretizationError,
    TorusGridField,
    effective_diffusivity_eulerian,
    grid_points,
    mean_drift_eulerian,
    solve,
    solve_cell_problem,
    solve_invariant_density,
)

# Frozen oracle values for the benchmark problems (pseudo-spectral, converged
# to round-off in n; the constant-coefficient value is cross-checked below by
# an independent finite-difference solver).
A_CONSTANT = 2.0615413919197136
A_VARIABLE = 0.8660254037844388
A_3D = 0.866025404


@pytest.fixture(scope="module")
def variable128():
    return solve(get_problem("benchmark-2d-variable"), 128)


@pytest.fixture(scope="module")
def constant128():
    return solve(get_problem("benchmark-2d-constant"), 128)


def test_free_brownian_identity():
    sol = solve(get_problem("free-brownian"), 16)
    np.testing.assert_allclose(sol.r.values, 1.0, atol=1e-14)
    np.testing.assert_allclose(sol.chi.values, 0.0, atol=1e-14)
    np.testing.assert_allclose(sol.A_eff, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(sol.b_bar, 0.0, atol=1e-14)


def test_constant_benchmark_density_and_drift(constant128):
    np.testing.assert_allclose(constant128.r.values, 1.0, atol=1e-8)
    np.testing.assert_allclose(constant128.b_bar, 0.0, atol=1e-12)


def test_constant_benchmark_diffusivity(constant128):
    np.testing.assert_allclose(constant128.A_eff, A_CONSTANT * np.eye(2), rtol=1e-10, atol=1e-10)
    assert np.all(constant128.cell_residuals <= 1e-8)


def test_variable_benchmark_density(variable128):
    prob = get_problem("benchmark-2d-variable")
    exact = prob.known_invariant_density(grid_points(2, 128))
    assert np.abs(variable128.r.values - exact).max() <= 1e-6
    assert abs(variable128.r.integral() - 1.0) < 1e-12
    assert variable128.density_residual <= 1e-8


def test_variable_benchmark_drift_and_diffusivity(variable128):
    np.testing.assert_allclose(variable128.b_bar, 0.0, atol=1e-10)
    np.testing.assert_allclose(variable128.A_eff, A_VARIABLE * np.eye(2), rtol=1e-10, atol=1e-10)
    assert variable128.asymmetry < 1e-8


def test_three_dimensional_benchmark():
    sol = solve(get_problem("benchmark-3d"), 48)
    np.testing.assert_allclose(sol.A_eff, A_3D * np.eye(3), atol=5e-9)
    prob = get_problem("benchmark-3d")
    exact = prob.known_invariant_density(grid_points(3, 48))
    assert np.abs(sol.r.values - exact).max() <= 1e-6


def test_discrete_operators_are_transposes():
    ops = eulerian._Operators(get_problem("benchmark-2d-variable"), 32)
    g = np.random.default_rng(3)
    u, v = g.normal(size=(2, 32, 32))
    lhs = (ops.forward(u) * v).sum()
    rhs = (u * ops.adjoint(v)).sum()
    assert abs(lhs - rhs) <= 1e-10 * (abs(lhs) + abs(rhs))


def test_adjoint_annihilates_density_and_forward_annihilates_constants(variable128):
    ops = eulerian._Operators(get_problem("benchmark-2d-variable"), 128)
    assert np.abs(ops.forward(np.ones((128, 128)))).max() < 1e-9
    assert ops.backward_error(ops.adjoint, variable128.r.values) < 1e-10


def test_shifted_problem_mean_drift():
    # the cellular flow is divergence free, so r = 1 survives a constant shift
    c = [0.3, -0.7]
    prob = get_problem("benchmark-2d-constant", shift=c)
    r = solve_invariant_density(prob, 64)
    np.testing.assert_allclose(mean_drift_eulerian(prob, r), c, atol=1e-10)
    _, b_bar = solve_cell_problem(prob, r)
    np.testing.assert_allclose(b_bar, c, atol=1e-10)


def test_stepwise_pipeline_matches_solve():
    prob = get_problem("benchmark-2d-variable")
    r = solve_invariant_density(prob, 32)
    chi, _ = solve_cell_problem(prob, r)
    A = effective_diffusivity_eulerian(prob, r, chi)
    np.testing.assert_allclose(A, solve(prob, 32).A_eff, atol=1e-12)
    np.testing.assert_allclose(chi.integral(), 0.0, atol=1e-12)


def test_grid_convergence():
    prob = coeffs.problem_from_expressions(
        ["sin(2*pi*y2)", "0.5*cos(2*pi*y1)"],
        [["1 + 0.3*sin(2*pi*y1)", "0"], ["0", "1"]],
    )
    A = [solve(prob, n).A_eff for n in (16, 24, 32, 48)]
    diffs = [np.abs(A[k] - A[-1]).max() for k in range(3)]
    assert diffs[0] > diffs[1] > diffs[2] or diffs[0] < 1e-10
    # spectral accuracy: well beyond second order between 16 and 32
    assert diffs[2] <= max(diffs[0] / 4, 1e-10)


def fd_constant_benchmark(n):
    """Second-order finite differences for -2 Lap chi - b.grad chi = b on the torus."""
    h = 1.0 / n
    y = np.arange(n) * h
    Y1, Y2 = np.meshgrid(y, y, indexing="ij")
    b1 = 2 * np.pi * np.sin(2 * np.pi * Y1) * np.sin(2 * np.pi * Y2)
    b2 = 2 * np.pi * np.cos(2 * np.pi * Y1) * np.cos(2 * np.pi * Y2)
    I = sps.identity(n, format="csr")
    ones = np.ones(n)
    D1 = sps.diags([ones[:-1], -ones[:-1], [-1.0], [1.0]], [1, -1, n - 1, -(n - 1)]) / (2 * h)
    D2 = sps.diags([ones[:-1], -2 * ones, ones[:-1], [1.0], [1.0]], [1, 0, -1, n - 1, -(n - 1)]) / h**2
    Dx, Dy = sps.kron(D1, I), sps.kron(I, D1)
    lap = sps.kron(D2, I) + sps.kron(I, D2)
    L = -2.0 * lap - sps.diags(b1.ravel()) @ Dx - sps.diags(b2.ravel()) @ Dy
    # border with the mean-zero constraint
    N = n * n
    e = np.ones((N, 1)) / N
    K = sps.bmat([[L, sps.csr_matrix(np.ones((N, 1)))], [sps.csr_matrix(e.T), None]], format="csc")
    lu = spla.splu(K)
    A = np.zeros((2, 2))
    grads = []
    for rhs in (b1, b2):
        sol = lu.solve(np.concatenate([rhs.ravel(), [0.0]]))
        chi = sol[:N]
        grads.append(np.stack([Dx @ chi, Dy @ chi]))
    G = np.stack(grads)  # G[i, k] = d_k chi_i
    G[0, 0] += 1
    G[1, 1] += 1
    A = 2.0 * np.einsum("ikp,jkp->ij", G, G) / N
    return A


def test_constant_benchmark_against_finite_differences():
    A64, A128 = fd_constant_benchmark(64), fd_constant_benchmark(128)
    e64 = np.abs(A64 - A_CONSTANT * np.eye(2)).max()
    e128 = np.abs(A128 - A_CONSTANT * np.eye(2)).max()
    assert e128 < 5e-3
    assert 3.0 < e64 / e128 < 5.0  # second-order convergence onto the frozen value
    richardson = (4 * A128 - A64) / 3
    np.testing.assert_allclose(richardson, A_CONSTANT * np.eye(2), atol=1e-4)


def test_csv_export(tmp_path, variable128):
    p = tmp_path / "density.csv"
    field = TorusGridField(values=variable128.r.values[::8, ::8], dim=2, n=16)
    field.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["y1", "y2", "value"]
    assert len(rows) == 1 + 16 * 16
    assert float(rows[1 + 16][0]) == pytest.approx(1 / 16)
    assert float(rows[1][2]) == variable128.r.values[0, 0]
    q = tmp_path / "chi.csv"
    TorusGridField(values=np.zeros((2, 16, 16)), dim=2, n=16).to_csv(q)
    assert next(csv.reader(open(q))) == ["y1", "y2", "value_1", "value_2"]


@pytest.mark.parametrize("n", [8, 15, 16.5])
def test_rejects_coarse_grid(n):
    with pytest.raises(ValueError):
        solve(get_problem("free-brownian"), n)


def test_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        solve(get_problem("free-brownian"), 16, tol=2.0)


def test_negative_density_raises_discretization_error():
    # gradient drift with a density proportional to exp(-300 sin(2 pi y1)):
    # far too peaked for a 16-point grid
    prob = coeffs.problem_from_expressions(["-60*pi*cos(2*pi*y1)", "0"], [["0.1", "0"], ["0", "0.1"]])
    with pytest.raises(DiscretizationError, match="increase the grid"):
        solve(prob, 16)


def test_stalled_solver_reports_residuals():
    prob = coeffs.problem_from_expressions(
        ["40*sin(2*pi*y1)*cos(6*pi*y2)", "40*cos(2*pi*y1)*sin(8*pi*y2) + 30*sin(10*pi*y1)"],
        [["0.2", "0"], ["0", "0.2"]],
    )
    with pytest.raises(eulerian.EulerianSolverError) as exc:
        solve(prob, 16)
    assert len(exc.value.residuals) > 0
