"""Full-size acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line (also collected in the terminal
summary) and fails if any part of its criterion, runtime included, is not met.
The whole module takes well over an hour on a single core.
"""

import time

import numpy as np
import pytest
from oracles import fd_corrections, symbolic

from effdiff import coeffs, eulerian, rng
from effdiff.coeffs import get_problem, is_commutative, milstein_xi, modified_coefficients
from effdiff.montecarlo import (
    EnsembleConfig,
    convergence_study,
    effective_diffusivity_estimate,
    simulate_ensemble,
)
from effdiff.schemes import SchemeConfig, em_step, milstein_step, sample_double_ito

pytestmark = pytest.mark.acceptance

TWO_PI = 2 * np.pi


def ensemble(M, T, h, kind, **kw):
    return EnsembleConfig(M=M, T=T, scheme=SchemeConfig(kind, h), **kw)


def cell_average_sin(n):
    """Exact average of sin(2 pi y) over each of n equal cells."""
    a = np.arange(n) / n
    return (np.cos(TWO_PI * a) - np.cos(TWO_PI * (a + 1.0 / n))) * n / TWO_PI


def ratio_density_cells(n):
    s = cell_average_sin(n)
    return 1.0 + 0.5 * np.outer(s, s)


def fmt(a):
    return np.array2string(np.asarray(a), precision=5, separator=", ").replace("\n", "")


# ---------------------------------------------------------------------------


def test_criterion_1_free_brownian(acceptance_report):
    t0 = time.perf_counter()
    prob = get_problem("free-brownian")
    sol = eulerian.solve(prob, 32)
    eul_err = np.abs(sol.A_eff - np.eye(2)).max()
    est = simulate_ensemble(prob, ensemble(100_000, 10.0, 0.01, "euler-maruyama")).diffusivity
    z = np.abs(est.matrix - np.eye(2)) / (4 * est.stderr)
    runtime = time.perf_counter() - t0
    ok = eul_err <= 1e-10 and np.all(z <= 1) and runtime < 60
    acceptance_report(
        "criterion 1 (free Brownian)", ok,
        f"Eulerian max|A-I|={eul_err:.1e} (<=1e-10); Lagrangian A={fmt(est.matrix)} "
        f"max |A-I|/(4 se)={z.max():.2f} (<=1); runtime {runtime:.0f}s (<60s)",
    )
    assert ok


def test_criterion_2_invariant_densities(acceptance_report):
    t0 = time.perf_counter()
    n = 128
    pts = eulerian.grid_points(2, n)
    r1 = eulerian.solve_invariant_density(get_problem("benchmark-2d-constant"), n)
    err1 = np.abs(r1.values - 1.0).max()
    prob = get_problem("benchmark-2d-variable")
    r2 = eulerian.solve_invariant_density(prob, n)
    err2 = np.abs(r2.values - prob.known_invariant_density(pts)).max()
    res = simulate_ensemble(prob, ensemble(200_000, 50.0, 0.005, "euler-maruyama",
                                           histogram_bins=64, burn_in_fraction=0.1))
    l1 = np.abs(res.histogram.values - ratio_density_cells(64)).mean()
    runtime = time.perf_counter() - t0
    ok = err1 <= 1e-8 and err2 <= 1e-6 and l1 <= 0.05 and runtime < 300
    acceptance_report(
        "criterion 2 (invariant densities)", ok,
        f"constant-sigma max|r-1|={err1:.1e} (<=1e-8); variable max|r-r*|={err2:.1e} (<=1e-6); "
        f"histogram L1={l1:.4f} (<=0.05); runtime {runtime:.0f}s (<300s)",
    )
    assert ok


def test_criterion_3_mean_drift(acceptance_report):
    t0 = time.perf_counter()
    c = np.array([0.3, 0.0])
    prob = get_problem("benchmark-2d-constant", shift=c)
    sol = eulerian.solve(prob, 64)
    eul_err = np.abs(sol.b_bar - c).max()
    res = simulate_ensemble(prob, ensemble(20_000, 50.0, 0.01, "modified-milstein"))
    z = np.abs(res.mean_drift - c) / (4 * res.mean_drift_stderr)
    runtime = time.perf_counter() - t0
    ok = eul_err <= 1e-8 and np.all(z <= 1) and runtime < 120
    acceptance_report(
        "criterion 3 (mean drift of shifted flow)", ok,
        f"Eulerian |b_bar-c|={eul_err:.1e} (<=1e-8); Lagrangian drift={fmt(res.mean_drift)} "
        f"+- {fmt(res.mean_drift_stderr)}, max |d-c|/(4 se)={z.max():.2f} (<=1); "
        f"runtime {runtime:.0f}s (<120s)",
    )
    assert ok


def test_criterion_4_oracle_equivalence(acceptance_report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in ("benchmark-2d-constant", "benchmark-2d-variable"):
        prob = get_problem(name)
        ref = eulerian.solve(prob, 256).A_eff
        est = simulate_ensemble(prob, ensemble(400_000, 100.0, 0.005, "modified-milstein")).diffusivity
        tol = 4 * est.stderr + 0.02 * np.linalg.norm(ref)
        diff = np.abs(est.matrix - ref)
        good = bool(np.all(diff <= tol))
        ok &= good
        parts.append(f"{name}: max(|diff|/tol)={(diff / tol).max():.2f} "
                     f"[{'ok' if good else 'out'}], {time.perf_counter() - t0:.0f}s elapsed")
    runtime = time.perf_counter() - t0
    ok = ok and runtime < 900
    acceptance_report("criterion 4 (Lagrangian vs Eulerian)", ok,
                      "; ".join(parts) + f"; runtime {runtime:.0f}s (<900s)")
    assert ok


def test_criterion_5_convergence_orders(acceptance_report):
    hs = [0.04, 0.02, 0.01]
    details, ok = [], True

    # constant-sigma benchmark, entry (1,1)
    t0 = time.perf_counter()
    prob = get_problem("benchmark-2d-constant")
    ref = eulerian.solve(prob, 128).A_eff
    base = ensemble(4_000_000, 2.0, hs[0], "euler-maruyama", seed=2024)
    slopes = {}
    for kind, lo, hi in (("euler-maruyama", 0.6, 1.4), ("modified-milstein", 1.5, np.inf)):
        cfg = EnsembleConfig(M=base.M, T=base.T, scheme=SchemeConfig(kind, hs[0]), seed=base.seed)
        table = convergence_study(prob, hs, cfg, ref, entries=[(0, 0)])
        slope, used = table.entry_slopes[(0, 0)]
        errs = [r.error[0, 0] for r in table.rows]
        ses = [r.estimate.stderr[0, 0] for r in table.rows]
        gated = bool(used.all())
        good = gated and lo <= slope <= hi
        ok &= good
        slopes[kind] = slope
        details.append(
            f"const {kind} A11 slope={slope:.2f} (target [{lo}, {hi}]) errs={fmt(errs)} "
            f"se={fmt(ses)} gate {'met' if gated else 'NOT met'}"
        )
    rt1 = time.perf_counter() - t0
    ok &= rt1 < 1800
    details.append(f"const runtime {rt1:.0f}s (<1800s)")

    # variable-coefficient benchmark, Frobenius norm, modified Milstein
    t0 = time.perf_counter()
    prob = get_problem("benchmark-2d-variable")
    ref = eulerian.solve(prob, 128).A_eff
    cfg = ensemble(1_000_000, 2.0, hs[0], "modified-milstein", seed=2024)
    table = convergence_study(prob, hs, cfg, ref)
    gated = bool(table.used.all())
    good = gated and table.slope >= 1.5
    ok &= good
    rt2 = time.perf_counter() - t0
    ok &= rt2 < 1800
    details.append(
        f"variable modified-milstein Frobenius slope={table.slope:.2f} (target >=1.5) "
        f"errs={fmt([r.err_frobenius for r in table.rows])} "
        f"se={fmt([r.stderr_frobenius for r in table.rows])} gate {'met' if gated else 'NOT met'}; "
        f"runtime {rt2:.0f}s (<1800s)"
    )
    acceptance_report("criterion 5 (convergence orders)", ok, "; ".join(details))
    assert ok


def test_criterion_6_property_suites(acceptance_report):
    t0 = time.perf_counter()
    checks = {}
    g = np.random.default_rng(6)

    # symmetric part of the double Ito integral, 10^4 draws
    h, q, d = 0.01, 2, 2
    z = rng.standard_normals(6, np.arange(10_000), 0, (1 + q) * d)
    worst = 0.0
    for row in z:
        J = sample_double_ito(d, h, q, row, commutative=False)
        want = h * (np.outer(row[:d], row[:d]) - np.eye(d))
        worst = max(worst, np.abs(J + J.T - want).max() / max(1.0, np.abs(want).max()) / h)
    checks["J symmetric part"] = worst <= 1e-14

    # constant-sigma problems: Xi vanishes and Milstein is EM bit for bit
    same = True
    for name in ("benchmark-2d-constant", "free-brownian"):
        prob = get_problem(name)
        for y in g.random((50, 2)) * 4 - 2:
            xi = rng.standard_normals(7, [0], int(1e3 * y[0]) % 100, 6)[0]
            same &= bool(np.all(milstein_xi(prob, y) == 0.0))
            same &= np.array_equal(milstein_step(prob, y, 0.01, q, xi, force_commutative=False),
                                   em_step(prob, y, 0.01, xi[:2]))
    checks["Xi=0 and Milstein==EM"] = same

    verdicts = {n: is_commutative(get_problem(n), g.random((100, get_problem(n).dim)))[0]
                for n in ("benchmark-2d-constant", "benchmark-2d-variable", "benchmark-3d")}
    checks["commutativity verdicts"] = verdicts == {
        "benchmark-2d-constant": True, "benchmark-2d-variable": False, "benchmark-3d": False}

    psd = True
    for _ in range(20):
        X = g.normal(size=(200, 3)) @ g.normal(size=(3, 3))
        A = effective_diffusivity_estimate(X, 1.5).matrix
        psd &= bool(np.array_equal(A, A.T) and np.linalg.eigvalsh(A).min() >= -1e-14 * np.abs(A).max())
    checks["estimator symmetric PSD"] = psd

    prob = get_problem("benchmark-2d-variable")
    runs = [simulate_ensemble(prob, ensemble(20_000, 0.2, 0.01, "modified-milstein", workers=w))
            for w in (1, 8)]
    checks["1 vs 8 workers bitwise"] = np.array_equal(runs[0].final_positions, runs[1].final_positions)

    limit, fd_ok = True, True
    for name in ("benchmark-2d-constant", "benchmark-2d-variable", "benchmark-3d"):
        prob = get_problem(name)
        ref = symbolic(name)
        ys = g.random((10, prob.dim))
        b0, s0 = modified_coefficients(prob, 0.0)
        limit &= np.array_equal(b0(ys), prob.drift(ys)) and np.array_equal(s0(ys), prob.sigma(ys))
        for y in ys[:5]:
            b1, s1 = coeffs.first_order_corrections(prob, y)
            fb, fs = fd_corrections(ref["b"], ref["sigma"], y)
            fd_ok &= np.abs(b1 - fb).max() <= 1e-6 * max(1.0, np.abs(fb).max())
            fd_ok &= np.abs(s1 - fs).max() <= 1e-6 * max(1.0, np.abs(fs).max())
    checks["modified coefficients at h=0"] = bool(limit)
    checks["corrections vs finite differences"] = bool(fd_ok)

    runtime = time.perf_counter() - t0
    ok = all(checks.values()) and runtime < 60
    acceptance_report(
        "criterion 6 (property suites)", ok,
        ", ".join(f"{k}={'ok' if v else 'FAILED'}" for k, v in checks.items())
        + f"; runtime {runtime:.0f}s (<60s)",
    )
    assert ok


def test_criterion_7_three_dimensional(acceptance_report):
    t0 = time.perf_counter()
    prob = get_problem("benchmark-3d")
    bins = 32
    # The corrector vanishes at (1/4, 1/4, 1/4), where every reflection
    # y_i -> 1/2 - y_i leaves the problem invariant, so the mean-drift
    # estimator carries no chi(x0)/T start-up term from this point.
    x0 = [0.25, 0.25, 0.25]
    res = simulate_ensemble(prob, ensemble(200_000, 20.0, 0.01, "modified-milstein",
                                           histogram_bins=bins, burn_in_fraction=0.1, x0=x0))
    marginal = res.histogram.values.mean(axis=0)
    l1 = np.abs(marginal - ratio_density_cells(bins)).mean()
    z = np.abs(res.mean_drift) / (4 * res.mean_drift_stderr)
    runtime = time.perf_counter() - t0
    ok = l1 <= 0.08 and np.all(z <= 1) and runtime < 600
    acceptance_report(
        "criterion 7 (3-D smoke test)", ok,
        f"marginal L1={l1:.4f} (<=0.08); x0={x0} drift={fmt(res.mean_drift)} max |d|/(4 se)={z.max():.2f} "
        f"(<=1); runtime {runtime:.0f}s (<600s)",
    )
    assert ok
