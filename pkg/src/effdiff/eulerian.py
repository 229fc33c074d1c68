"""Eulerian reference solver on a uniform periodic grid.

Fields live on the nodes ``{0, 1/n, ..., (n-1)/n}^d``.  Derivatives are
taken pseudo-spectrally with real FFTs; products with the coefficients are
formed nodewise.  With the Nyquist mode removed from first derivatives the
discrete first-derivative operators are skew-symmetric and the second
derivative operators symmetric, so the discrete forward operator

    L chi = -A : hess(chi) - b . grad(chi)

and the discrete adjoint

    L* r = -hess : (A r) + div(b r)

are exact transposes of each other.  That keeps the cell problem exactly
solvable once ``b_bar`` is the grid quadrature of ``b r``.

Both singular systems are solved by GMRES after adding the grid mean of the
unknown to the operator (a rank-one Lagrange-type augmentation), with the
inverse of a constant-coefficient Laplacian as preconditioner.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import fft
from scipy.sparse.linalg import LinearOperator, gmres

__all__ = [
    "TorusGridField",
    "EulerianSolution",
    "EulerianSolverError",
    "DiscretizationError",
    "grid_points",
    "solve_invariant_density",
    "solve_cell_problem",
    "effective_diffusivity_eulerian",
    "mean_drift_eulerian",
    "solve",
    "TOL_LIN",
]

log = logging.getLogger(__name__)

TOL_LIN = 1e-10
MIN_N = 16
NEGATIVE_TOL = -1e-10
ASYMMETRY_WARN = 1e-6


class EulerianSolverError(RuntimeError):
    """The linear solver did not reach the requested residual."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class DiscretizationError(EulerianSolverError):
    """The computed density went negative; the grid is too coarse."""


@dataclass(frozen=True, eq=False)
class TorusGridField:
    """Scalar or vector field on a uniform periodic grid.

    ``values`` has shape ``(n,)*dim`` for scalars or ``(dim, n, ..., n)``
    for vector fields.  ``centered`` marks cell-centred samples (histograms)
    as opposed to node samples.
    """

    values: np.ndarray
    dim: int
    n: int
    centered: bool = False

    @property
    def is_vector(self):
        return self.values.ndim == self.dim + 1

    @property
    def cell_volume(self):
        return float(self.n) ** (-self.dim)

    def integral(self):
        """Periodic trapezoidal rule (the grid mean), per component for vectors."""
        axes = tuple(range(-self.dim, 0))
        return self.values.mean(axis=axes)

    def coordinates(self):
        """Grid coordinates with shape ``(n,)*dim + (dim,)``."""
        return grid_points(self.dim, self.n, self.centered)

    def to_csv(self, path):
        """Write one row per grid point: coordinates then value(s)."""
        pts = self.coordinates().reshape(-1, self.dim)
        if self.is_vector:
            vals = self.values.reshape(self.values.shape[0], -1).T
            names = [f"value_{i + 1}" for i in range(self.values.shape[0])]
        else:
            vals = self.values.reshape(-1, 1)
            names = ["value"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"y{k + 1}" for k in range(self.dim)] + names)
            for p, v in zip(pts, vals):
                w.writerow([f"{c:.16e}" for c in p] + [f"{c:.16e}" for c in v])


@dataclass(frozen=True, eq=False)
class EulerianSolution:
    r: TorusGridField
    chi: TorusGridField
    b_bar: np.ndarray
    A_eff: np.ndarray
    density_residual: float
    cell_residuals: np.ndarray
    asymmetry: float = 0.0
    meta: dict = field(default_factory=dict)


def grid_points(dim, n, centered=False):
    offset = 0.5 if centered else 0.0
    axis = (np.arange(n) + offset) / n
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack(mesh, axis=-1)


# ---------------------------------------------------------------------------
# spectral machinery


class _Spectral:
    """Real-FFT derivative operators on an ``n^d`` periodic grid."""

    def __init__(self, dim, n):
        self.dim = dim
        self.n = n
        self.shape = (n,) * dim
        kfull = np.fft.fftfreq(n, 1.0 / n)
        khalf = np.fft.rfftfreq(n, 1.0 / n)
        ks = []
        for ax in range(dim):
            k = khalf if ax == dim - 1 else kfull
            shape = [1] * dim
            shape[ax] = k.size
            ks.append(k.reshape(shape))
        two_pi = 2.0 * np.pi
        # first derivatives: Nyquist mode removed so the operator is skew
        self.ik = []
        for k in ks:
            kk = k.copy()
            if n % 2 == 0:
                kk[np.abs(kk) == n // 2] = 0.0
            self.ik.append(1j * two_pi * kk)
        # pure second derivatives keep the Nyquist mode
        self.kk = [-(two_pi * k) ** 2 for k in ks]
        self.k2 = sum(-q for q in self.kk)

    def fwd(self, u):
        return fft.rfftn(u, axes=range(-self.dim, 0), workers=1)

    def inv(self, uh):
        return fft.irfftn(uh, s=self.shape, axes=range(-self.dim, 0), workers=1)

    def grad(self, u):
        uh = self.fwd(u)
        return np.stack([self.inv(m * uh) for m in self.ik])

    def second(self, uh, k, m):
        """Fourier multiplier of d_k d_m applied to ``uh``."""
        if k == m:
            return self.kk[k] * uh
        return self.ik[k] * self.ik[m] * uh


def _coefficients_on_grid(problem, n):
    pts = grid_points(problem.dim, n).reshape(-1, problem.dim)
    b, sig = problem.jet_arrays(pts, 0)[:2]
    a = 0.5 * sig @ np.swapaxes(sig, -1, -2)
    d = problem.dim
    shape = (n,) * d
    b = np.moveaxis(b, -1, 0).reshape((d,) + shape)
    a = np.moveaxis(a.reshape(-1, d * d), -1, 0).reshape((d, d) + shape)
    if np.min(np.linalg.eigvalsh(np.moveaxis(a.reshape(d, d, -1), -1, 0))) <= 0.0:
        raise ValueError(f"diffusion matrix of {problem.name!r} is not positive definite")
    return b, 0.5 * (a + np.swapaxes(a, 0, 1))


class _Operators:
    def __init__(self, problem, n, tol=TOL_LIN):
        if not 0 < tol < 1:
            raise ValueError(f"tol_lin must lie in (0, 1), got {tol}")
        self.tol = float(tol)
        self.d = problem.dim
        self.n = n
        self.sp = _Spectral(self.d, n)
        self.b, self.a = _coefficients_on_grid(problem, n)
        self.N = n**self.d
        # preconditioner: constant-coefficient operator -abar * Laplacian
        abar = float(np.mean([self.a[k, k].mean() for k in range(self.d)]))
        inv = np.zeros_like(self.sp.k2)
        nz = self.sp.k2 > 0
        inv[nz] = 1.0 / (abar * self.sp.k2[nz])
        self._pinv = inv
        # crude bound on the operator norm, used to scale residuals
        kmax = np.pi * n
        self.scale = self.d * (np.abs(self.a).max() * kmax**2 + np.abs(self.b).max() * kmax)

    def forward(self, u):
        """``-A : hess(u) - b . grad(u)`` on a scalar grid function."""
        sp = self.sp
        uh = sp.fwd(u)
        out = np.zeros(sp.shape)
        for k in range(self.d):
            out -= self.b[k] * sp.inv(sp.ik[k] * uh)
            for m in range(k, self.d):
                w = 1.0 if k == m else 2.0
                out -= w * self.a[k, m] * sp.inv(sp.second(uh, k, m))
        return out

    def adjoint(self, r):
        """``-hess : (A r) + div(b r)``."""
        sp = self.sp
        acc = np.zeros(sp.fwd(r).shape, dtype=complex)
        for k in range(self.d):
            acc += sp.ik[k] * sp.fwd(self.b[k] * r)
            for m in range(k, self.d):
                w = 1.0 if k == m else 2.0
                acc -= w * sp.second(sp.fwd(self.a[k, m] * r), k, m)
        return sp.inv(acc)

    def backward_error(self, apply, u, rhs=0.0):
        """``|apply(u) - rhs| / (scale |u|)``: residual relative to the operator size."""
        return float(np.linalg.norm(apply(u) - rhs) / (self.scale * np.linalg.norm(u)))

    def precondition(self, v):
        sp = self.sp
        vh = sp.fwd(v.reshape(sp.shape))
        mean = vh.flat[0].real / self.N
        out = sp.inv(self._pinv * vh) + mean
        return out.ravel()

    def solve(self, apply, rhs, label):
        """Solve ``apply(u) + mean(u) = rhs`` to relative residual ``self.tol``."""
        shape = self.sp.shape

        def mv(v):
            u = v.reshape(shape)
            return (apply(u) + u.mean()).ravel()

        op = LinearOperator((self.N, self.N), matvec=mv, dtype=np.float64)
        pre = LinearOperator((self.N, self.N), matvec=self.precondition, dtype=np.float64)
        rhs_flat = rhs.ravel()
        rnorm = np.linalg.norm(rhs_flat)
        if rnorm <= 1e-13 * self.scale * np.sqrt(self.N):
            # round-off sized right-hand side: the solution is zero
            return np.zeros(shape), 0.0
        history = []
        x = np.zeros(self.N)
        # GMRES works on the preconditioned residual; restart until the
        # true residual meets the tolerance.
        for _ in range(20):
            x, info = gmres(op, rhs_flat, x0=x, rtol=0.1 * self.tol, atol=0.0,
                            restart=80, maxiter=50, M=pre,
                            callback=history.append, callback_type="pr_norm")
            res = np.linalg.norm(rhs_flat - mv(x)) / rnorm
            if res <= self.tol:
                break
        else:
            raise EulerianSolverError(
                f"{label}: GMRES stalled at relative residual {res:.3e} (n={self.n})",
                residuals=history,
            )
        log.debug("%s: relative residual %.3e after %d iterations", label, res, len(history))
        return x.reshape(shape), float(res)


# ---------------------------------------------------------------------------
# operations


def _check_n(n):
    if int(n) != n or n < MIN_N:
        raise ValueError(f"grid resolution n must be an integer >= {MIN_N}, got {n}")
    return int(n)


def _invariant_density(ops):
    # r = 1 + u with mean(u) = 0; the constant carries the normalisation
    one = np.ones(ops.sp.shape)
    u, _ = ops.solve(ops.adjoint, -ops.adjoint(one), "invariant density")
    r = one + (u - u.mean())
    res = ops.backward_error(ops.adjoint, r)
    if r.min() < NEGATIVE_TOL:
        raise DiscretizationError(
            f"invariant density has min node value {r.min():.3e} at n={ops.n};"
            " increase the grid resolution"
        )
    return r, res


def solve_invariant_density(problem, n, tol=TOL_LIN):
    """Density ``r`` with ``L* r = 0`` and grid mean one."""
    n = _check_n(n)
    ops = _Operators(problem, n, tol)
    r, _ = _invariant_density(ops)
    return TorusGridField(values=r, dim=problem.dim, n=n)


def mean_drift_eulerian(problem, r, n=None):
    """Grid quadrature of ``b r``."""
    rv = r.values if isinstance(r, TorusGridField) else np.asarray(r)
    n = rv.shape[0] if n is None else int(n)
    pts = grid_points(problem.dim, n).reshape(-1, problem.dim)
    b = problem.drift(pts)
    return (b * rv.reshape(-1, 1)).mean(axis=0)


def _cell_problem(ops, r):
    d = ops.d
    b_bar = np.array([(ops.b[i] * r).mean() for i in range(d)]) / r.mean()
    chi = np.zeros((d,) + ops.sp.shape)
    res = np.zeros(d)
    for i in range(d):
        rhs = ops.b[i] - b_bar[i]
        if np.max(np.abs(rhs)) <= 1e-14 * max(1.0, np.max(np.abs(ops.b[i]))):
            continue
        chi[i], res[i] = ops.solve(ops.forward, rhs, f"cell problem component {i + 1}")
        chi[i] -= chi[i].mean()
    return chi, b_bar, res


def solve_cell_problem(problem, r, n=None, tol=TOL_LIN):
    """Corrector ``chi`` (mean zero per component) and ``b_bar = int b r``."""
    rv = r.values if isinstance(r, TorusGridField) else np.asarray(r, dtype=np.float64)
    n = _check_n(rv.shape[0] if n is None else n)
    if rv.shape != (n,) * problem.dim:
        raise ValueError("density grid does not match the requested resolution")
    ops = _Operators(problem, n, tol)
    chi, b_bar, _ = _cell_problem(ops, rv)
    return TorusGridField(values=chi, dim=problem.dim, n=n), b_bar


def _effective_diffusivity(ops, chi, r):
    d = ops.d
    # G[i, k] = delta_ik + d_k chi_i
    G = np.stack([ops.sp.grad(chi[i]) for i in range(d)])
    for i in range(d):
        G[i, i] += 1.0
    integrand = np.einsum("ik...,kl...,jl...->ij...", G, ops.a, G) * r
    A = integrand.reshape(d, d, -1).mean(axis=-1)
    asym = float(np.max(np.abs(A - A.T)))
    if asym > ASYMMETRY_WARN:
        log.warning("effective diffusivity asymmetry %.3e suggests under-resolution", asym)
    return 0.5 * (A + A.T), asym


def effective_diffusivity_eulerian(problem, r, chi, n=None):
    """``mean((I + grad chi) A (I + grad chi)^T r)`` over the grid, symmetrized."""
    rv = r.values if isinstance(r, TorusGridField) else np.asarray(r)
    cv = chi.values if isinstance(chi, TorusGridField) else np.asarray(chi)
    n = _check_n(rv.shape[0] if n is None else n)
    ops = _Operators(problem, n)
    A, _ = _effective_diffusivity(ops, cv, rv)
    return A


def solve(problem, n, tol=TOL_LIN):
    """Full Eulerian pipeline: density, corrector, drift and diffusivity."""
    n = _check_n(n)
    ops = _Operators(problem, n, tol)
    r, res_r = _invariant_density(ops)
    chi, b_bar, res_chi = _cell_problem(ops, r)
    A, asym = _effective_diffusivity(ops, chi, r)
    d = problem.dim
    return EulerianSolution(
        r=TorusGridField(values=r, dim=d, n=n),
        chi=TorusGridField(values=chi, dim=d, n=n),
        b_bar=b_bar,
        A_eff=A,
        density_residual=res_r,
        cell_residuals=res_chi,
        asymmetry=asym,
        meta={"problem": problem.name, "n": n, "tol_lin": ops.tol, "method": "pseudo-spectral"},
    )
