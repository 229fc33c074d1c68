"""Periodic SDE coefficients, their derivatives and derived tensors.

A problem is described by a single compiled *jet* function that evaluates,
at one point of the unit torus, the drift ``b``, the diffusion factor
``sigma`` and (on request) their first and second partial derivatives::

    jet(y, order, b, sig, db, d2b, dsig, d2sig)

``order`` is 0 (values only), 1 (plus first derivatives) or 2 (plus second
derivatives).  Index conventions for the output buffers:

* ``db[i, k]``            = d_k b_i
* ``d2b[i, k, l]``        = d_k d_l b_i
* ``dsig[j1, j2, k]``     = d_k sigma_{j1 j2}
* ``d2sig[j1, j2, k, l]`` = d_k d_l sigma_{j1 j2}

The same jet drives the particle kernels in :mod:`effdiff.montecarlo`, the
grid evaluation in :mod:`effdiff.eulerian`, and the vectorised maps exposed
on :class:`ProblemDefinition`, so there is exactly one implementation of
each coefficient.
"""

import ast
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from numba import njit

__all__ = [
    "CoefficientError",
    "ProblemDefinition",
    "evaluate_coefficients",
    "milstein_xi",
    "is_commutative",
    "modified_coefficients",
    "first_order_corrections",
    "free_brownian",
    "constant_drift",
    "benchmark_2d_constant",
    "benchmark_2d_variable",
    "benchmark_3d",
    "shifted",
    "problem_from_functions",
    "problem_from_expressions",
    "get_problem",
    "BENCHMARKS",
    "TOL_COMM",
    "FD_STEP",
]

TOL_COMM = 1e-10
FD_STEP = 1e-5
TWO_PI = 2.0 * math.pi


class CoefficientError(ValueError):
    """A coefficient evaluated to a non-finite value."""

    def __init__(self, message, y=None):
        super().__init__(message)
        self.y = y


# ---------------------------------------------------------------------------
# compiled kernels shared by every problem


@njit(inline="always")
def canonicalize(d, y, out):
    for k in range(d):
        out[k] = y[k] - math.floor(y[k])


@njit(inline="always")
def xi_tensor(d, sig, dsig, xi):
    """Milstein coefficient tensor xi[i, j1, j2] = sum_k d_k sig[i, j2] sig[k, j1].

    The helpers here take the dimension ``d`` explicitly so that callers can
    pass a compile-time constant; the tiny fixed-size loops then unroll.
    """
    for i in range(d):
        for j1 in range(d):
            for j2 in range(d):
                s = 0.0
                for k in range(d):
                    s += dsig[i, j2, k] * sig[k, j1]
                xi[i, j1, j2] = s


@njit(inline="always")
def _sig_sig_t(d, sig, diagonal, k1, k2):
    if diagonal:
        return sig[k1, k1] * sig[k1, k1] if k1 == k2 else 0.0
    s = 0.0
    for m in range(d):
        s += sig[k1, m] * sig[k2, m]
    return s


@njit(inline="always")
def corrections(d, b, sig, db, d2b, dsig, d2sig, b1, sig1, diagonal=False):
    """First-order modified-equation corrections b1, sig1 at one point.

    ``diagonal`` declares sigma diagonal, which skips the zero entries of
    ``sigma sigma^T``.
    """
    for i in range(d):
        acc = 0.0
        for k in range(d):
            acc += db[i, k] * b[k]
        lap = 0.0
        for k1 in range(d):
            for k2 in range(d):
                if diagonal and k1 != k2:
                    continue
                lap += _sig_sig_t(d, sig, diagonal, k1, k2) * d2b[i, k1, k2]
        b1[i] = 0.5 * acc + 0.25 * lap
    for j1 in range(d):
        for j2 in range(d):
            t1 = 0.0
            t2 = 0.0
            for k in range(d):
                t1 += db[j1, k] * sig[k, j2]
                t2 += b[k] * dsig[j1, j2, k]
            t3 = 0.0
            for k1 in range(d):
                for k2 in range(d):
                    if diagonal and k1 != k2:
                        continue
                    t3 += _sig_sig_t(d, sig, diagonal, k1, k2) * d2sig[j1, j2, k1, k2]
            sig1[j1, j2] = 0.5 * t1 + 0.5 * t2 + 0.25 * t3


@njit
def _jet_batch(jet, ys, order, b, sig, db, d2b, dsig, d2sig):
    d = ys.shape[1]
    y = np.empty(d)
    for p in range(ys.shape[0]):
        canonicalize(d, ys[p], y)
        jet(y, order, b[p], sig[p], db[p], d2b[p], dsig[p], d2sig[p])


@njit
def _corrections_batch(b, sig, db, d2b, dsig, d2sig, b1, sig1):
    d = b.shape[1]
    for p in range(b.shape[0]):
        corrections(d, b[p], sig[p], db[p], d2b[p], dsig[p], d2sig[p], b1[p], sig1[p])


# ---------------------------------------------------------------------------
# problem container


@dataclass(frozen=True, eq=False)
class ProblemDefinition:
    """SDE ``dX = b(X) dt + sigma(X) dW`` with 1-periodic coefficients.

    The coefficient maps accept points of shape ``(..., dim)`` and broadcast
    over the leading axes.  Points are reduced modulo 1 before evaluation.
    """

    name: str
    dim: int
    jet: Callable = field(repr=False)
    derivative_mode: str = "analytic"
    fd_step: Optional[float] = None
    known_invariant_density: Optional[Callable] = field(default=None, repr=False)
    known_centered: Optional[bool] = None
    diagonal_sigma: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if self.derivative_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown derivative_mode {self.derivative_mode!r}")

    # -- raw evaluation -------------------------------------------------
    def jet_arrays(self, y, order=2):
        """Evaluate the coefficient jet at points ``y``; returns six arrays."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.dim:
            raise ValueError(f"points must have trailing dimension {self.dim}")
        lead = y.shape[:-1]
        ys = np.ascontiguousarray(y.reshape(-1, self.dim))
        if not np.all(np.isfinite(ys)):
            bad = ys[~np.all(np.isfinite(ys), axis=1)][0]
            raise CoefficientError(f"non-finite evaluation point {bad}", y=bad)
        n, d = ys.shape[0], self.dim
        b = np.zeros((n, d))
        sig = np.zeros((n, d, d))
        db = np.zeros((n, d, d))
        d2b = np.zeros((n, d, d, d))
        dsig = np.zeros((n, d, d, d))
        d2sig = np.zeros((n, d, d, d, d))
        _jet_batch(self.jet, ys, order, b, sig, db, d2b, dsig, d2sig)
        out = [b, sig, db, d2b, dsig, d2sig]
        checked = out[:2] + (out[2:] if order >= 1 else [])
        for arr in checked:
            finite = np.isfinite(arr.reshape(n, -1)).all(axis=1)
            if not finite.all():
                bad = ys[np.argmin(finite)]
                raise CoefficientError(
                    f"non-finite coefficient value at y={bad.tolist()}", y=bad
                )
        return tuple(a.reshape(lead + a.shape[1:]) for a in out)

    def drift(self, y):
        return self.jet_arrays(y, 0)[0]

    def sigma(self, y):
        return self.jet_arrays(y, 0)[1]

    def diffusion(self, y):
        """A = sigma sigma^T / 2."""
        s = self.sigma(y)
        return 0.5 * s @ np.swapaxes(s, -1, -2)

    def drift_jacobian(self, y):
        return self.jet_arrays(y, 1)[2]

    def drift_hessians(self, y):
        return self.jet_arrays(y, 2)[3]

    def sigma_gradients(self, y):
        return self.jet_arrays(y, 1)[4]

    def sigma_hessians(self, y):
        return self.jet_arrays(y, 2)[5]

    @cached_property
    def commutativity(self):
        """(is_commutative, max_asymmetry) on 100 Halton points, computed once."""
        from scipy.stats import qmc

        pts = qmc.Halton(d=self.dim, scramble=False).random(101)[1:]
        return is_commutative(self, pts)

    @property
    def commutative(self):
        return self.commutativity[0]


# ---------------------------------------------------------------------------
# operations


def evaluate_coefficients(problem, y):
    """Return ``(b, sigma, A)`` at ``y`` with ``A = sigma sigma^T / 2``."""
    b, sig = problem.jet_arrays(y, 0)[:2]
    a = 0.5 * sig @ np.swapaxes(sig, -1, -2)
    return b, sig, a


def milstein_xi(problem, y):
    """Milstein tensor ``xi[..., i, j1, j2] = sum_k d_k sigma_{i j2} sigma_{k j1}``."""
    _, sig, _, _, dsig, _ = problem.jet_arrays(y, 1)
    return np.einsum("...abk,...kc->...acb", dsig, sig)


def is_commutative(problem, sample_points, tol=TOL_COMM):
    """Check ``xi[i, j1, j2] == xi[i, j2, j1]`` on the sample points.

    Returns ``(verdict, max_asymmetry)``.
    """
    pts = np.asarray(sample_points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("is_commutative needs at least one sample point")
    pts = pts.reshape(-1, problem.dim)
    xi = milstein_xi(problem, pts)
    asym = float(np.max(np.abs(xi - np.swapaxes(xi, -1, -2))))
    return asym <= tol, asym


def first_order_corrections(problem, y):
    """Return ``(b1, sigma1)`` at points ``y``.

    ``b1_i = 1/2 b.grad b_i + 1/4 (sigma sigma^T):hess b_i`` and
    ``sigma1 = 1/2 (grad b) sigma + 1/2 b.grad sigma + 1/4 (sigma sigma^T):hess sigma``.
    """
    y = np.asarray(y, dtype=np.float64)
    lead = y.shape[:-1]
    b, sig, db, d2b, dsig, d2sig = problem.jet_arrays(y.reshape(-1, problem.dim), 2)
    b1 = np.empty_like(b)
    sig1 = np.empty_like(sig)
    _corrections_batch(b, sig, db, d2b, dsig, d2sig, b1, sig1)
    d = problem.dim
    return b1.reshape(lead + (d,)), sig1.reshape(lead + (d, d))


def modified_coefficients(problem, h):
    """Modified drift and diffusion maps ``b + h b1`` and ``sigma + h sigma1``.

    ``h = 0`` is accepted and returns maps equal to the originals.
    """
    if not np.isfinite(h) or h < 0:
        raise ValueError(f"time step must be a finite non-negative number, got {h}")

    def b_h(y):
        if h == 0:
            return problem.drift(y)
        b1, _ = first_order_corrections(problem, y)
        return problem.drift(y) + h * b1

    def sigma_h(y):
        if h == 0:
            return problem.sigma(y)
        _, s1 = first_order_corrections(problem, y)
        return problem.sigma(y) + h * s1

    return b_h, sigma_h


# ---------------------------------------------------------------------------
# shipped problems


def _make_free_brownian(d):
    root2 = math.sqrt(2.0)

    @njit
    def jet(y, order, b, sig, db, d2b, dsig, d2sig):
        for i in range(d):
            b[i] = 0.0
            for j in range(d):
                sig[i, j] = root2 if i == j else 0.0

    return jet


def free_brownian(dim=2):
    """``b = 0``, ``sigma = sqrt(2) I`` so that ``A = I``."""
    return ProblemDefinition(
        name="free-brownian",
        dim=dim,
        jet=_make_free_brownian(dim),
        known_invariant_density=lambda y: np.ones(np.shape(y)[:-1]),
        known_centered=True,
        diagonal_sigma=True,
    )


def constant_drift(c, sigma_scale=math.sqrt(2.0)):
    """Constant drift ``c`` with ``sigma = sigma_scale * I``."""
    c = tuple(float(v) for v in c)
    d = len(c)
    s = float(sigma_scale)

    @njit
    def jet(y, order, b, sig, db, d2b, dsig, d2sig):
        for i in range(d):
            b[i] = c[i]
            for j in range(d):
                sig[i, j] = s if i == j else 0.0

    return ProblemDefinition(
        name="constant-drift",
        dim=d,
        jet=jet,
        known_invariant_density=lambda y: np.ones(np.shape(y)[:-1]),
        known_centered=all(v == 0.0 for v in c),
        diagonal_sigma=True,
        params={"drift": list(c), "sigma_scale": s},
    )


@njit
def _cellular_jet(y, order, b, sig, db, d2b, dsig, d2sig):
    # b = 2pi (sin sin, cos cos), sigma = 2 I
    s1 = math.sin(TWO_PI * y[0])
    c1 = math.cos(TWO_PI * y[0])
    s2 = math.sin(TWO_PI * y[1])
    c2 = math.cos(TWO_PI * y[1])
    b[0] = TWO_PI * s1 * s2
    b[1] = TWO_PI * c1 * c2
    sig[0, 0] = 2.0
    sig[0, 1] = 0.0
    sig[1, 0] = 0.0
    sig[1, 1] = 2.0
    if order >= 1:
        w2 = TWO_PI * TWO_PI
        db[0, 0] = w2 * c1 * s2
        db[0, 1] = w2 * s1 * c2
        db[1, 0] = -w2 * s1 * c2
        db[1, 1] = -w2 * c1 * s2
    if order >= 2:
        w3 = TWO_PI * TWO_PI * TWO_PI
        d2b[0, 0, 0] = -w3 * s1 * s2
        d2b[0, 1, 1] = -w3 * s1 * s2
        d2b[0, 0, 1] = w3 * c1 * c2
        d2b[0, 1, 0] = w3 * c1 * c2
        d2b[1, 0, 0] = -w3 * c1 * c2
        d2b[1, 1, 1] = -w3 * c1 * c2
        d2b[1, 0, 1] = w3 * s1 * s2
        d2b[1, 1, 0] = w3 * s1 * s2


def benchmark_2d_constant():
    """Cellular flow ``b = 2pi (sin sin, cos cos)`` with ``sigma = 2 I``."""
    return ProblemDefinition(
        name="benchmark-2d-constant",
        dim=2,
        jet=_cellular_jet,
        known_invariant_density=lambda y: np.ones(np.shape(y)[:-1]),
        known_centered=True,
        diagonal_sigma=True,
    )


def _make_ratio_jet(d, p, q):
    """Jet for ``b_i = 2pi cos(2pi y_i) / D``, ``A_ii = (2 + sin(2pi y_i)) / D``.

    ``D = 2 + sin(2pi y_p) sin(2pi y_q)`` and ``sigma = sqrt(2 A)`` (diagonal).
    """
    w1 = TWO_PI
    w2 = TWO_PI * TWO_PI

    @njit(inline="always")
    def grad_D(k, sp, cp, sq, cq):
        if k == p:
            return w1 * cp * sq
        if k == q:
            return w1 * sp * cq
        return 0.0

    @njit(inline="always")
    def hess_D(k, m, sp, cp, sq, cq):
        if (k == p and m == q) or (k == q and m == p):
            return w2 * cp * cq
        if (k == p and m == p) or (k == q and m == q):
            return -w2 * sp * sq
        return 0.0

    @njit
    def jet(y, order, b, sig, db, d2b, dsig, d2sig):
        sp = math.sin(w1 * y[p])
        cp = math.cos(w1 * y[p])
        sq = math.sin(w1 * y[q])
        cq = math.cos(w1 * y[q])
        u = 1.0 / (2.0 + sp * sq)
        u2 = u * u
        u3 = u2 * u
        for i in range(d):
            if i == p:
                si, ci = sp, cp
            elif i == q:
                si, ci = sq, cq
            else:
                si = math.sin(w1 * y[i])
                ci = math.cos(w1 * y[i])
            f = w1 * ci  # numerator of b_i
            g = 2.0 + si  # numerator of a_ii
            b[i] = f * u
            for j in range(d):
                sig[i, j] = 0.0
            sii = math.sqrt(2.0 * g * u)
            sig[i, i] = sii
            if order < 1:
                continue
            fp = -w2 * si
            gp = w1 * ci
            for k in range(d):
                duk = -u2 * grad_D(k, sp, cp, sq, cq)
                dbk = f * duk
                dak = g * duk
                if k == i:
                    dbk += fp * u
                    dak += gp * u
                db[i, k] = dbk
                # sigma^2 = 2a  =>  d sigma = d a / sigma
                dsig[i, i, k] = dak / sii
            if order < 2:
                continue
            fpp = -w2 * w1 * ci
            gpp = -w2 * si
            for k in range(d):
                duk = -u2 * grad_D(k, sp, cp, sq, cq)
                for m in range(d):
                    dum = -u2 * grad_D(m, sp, cp, sq, cq)
                    ddu = (-u2 * hess_D(k, m, sp, cp, sq, cq)
                           + 2.0 * u3 * grad_D(k, sp, cp, sq, cq) * grad_D(m, sp, cp, sq, cq))
                    hb = f * ddu
                    ha = g * ddu
                    if k == i:
                        hb += fp * dum
                        ha += gp * dum
                    if m == i:
                        hb += fp * duk
                        ha += gp * duk
                    if k == i and m == i:
                        hb += fpp * u
                        ha += gpp * u
                    d2b[i, k, m] = hb
                    # sigma sigma_km + sigma_k sigma_m = a_km
                    d2sig[i, i, k, m] = (ha - dsig[i, i, k] * dsig[i, i, m]) / sii

    return jet


def _ratio_density(p, q):
    def r(y):
        y = np.asarray(y, dtype=np.float64)
        return 1.0 + 0.5 * np.sin(TWO_PI * y[..., p]) * np.sin(TWO_PI * y[..., q])

    return r


def benchmark_2d_variable():
    """Anisotropic 2-D problem with invariant density ``1 + sin sin / 2``."""
    return ProblemDefinition(
        name="benchmark-2d-variable",
        dim=2,
        jet=_make_ratio_jet(2, 0, 1),
        known_invariant_density=_ratio_density(0, 1),
        known_centered=True,
        diagonal_sigma=True,
    )


def benchmark_3d():
    """Anisotropic 3-D problem with invariant density ``1 + sin(2pi y2) sin(2pi y3) / 2``."""
    return ProblemDefinition(
        name="benchmark-3d",
        dim=3,
        jet=_make_ratio_jet(3, 1, 2),
        known_invariant_density=_ratio_density(1, 2),
        known_centered=True,
        diagonal_sigma=True,
    )


def shifted(problem, c):
    """Same problem with a constant vector added to the drift."""
    c = tuple(float(v) for v in c)
    if len(c) != problem.dim:
        raise ValueError(f"shift must have length {problem.dim}")
    inner = problem.jet
    d = problem.dim

    @njit
    def jet(y, order, b, sig, db, d2b, dsig, d2sig):
        inner(y, order, b, sig, db, d2b, dsig, d2sig)
        for i in range(d):
            b[i] += c[i]

    centered = problem.known_centered if all(v == 0 for v in c) else None
    return ProblemDefinition(
        name=f"{problem.name}+shift",
        dim=d,
        jet=jet,
        derivative_mode=problem.derivative_mode,
        fd_step=problem.fd_step,
        known_invariant_density=problem.known_invariant_density,
        known_centered=centered,
        diagonal_sigma=problem.diagonal_sigma,
        params={**problem.params, "base": problem.name, "shift": list(c)},
    )


# ---------------------------------------------------------------------------
# user-defined problems (finite-difference derivatives)


def _make_fd_jet(value, d, eps):
    """Jet from a value function ``value(y, b, sig)`` by central differences."""
    inv2e = 1.0 / (2.0 * eps)
    inve2 = 1.0 / (eps * eps)
    inv4e2 = 1.0 / (4.0 * eps * eps)

    @njit(error_model="numpy")
    def jet(y, order, b, sig, db, d2b, dsig, d2sig):
        value(y, b, sig)
        if order < 1:
            return
        yp = y.copy()
        bp = np.empty(d)
        bm = np.empty(d)
        sp = np.empty((d, d))
        sm = np.empty((d, d))
        for k in range(d):
            yp[:] = y
            yp[k] = y[k] + eps
            value(yp, bp, sp)
            yp[k] = y[k] - eps
            value(yp, bm, sm)
            for i in range(d):
                db[i, k] = (bp[i] - bm[i]) * inv2e
                for j in range(d):
                    dsig[i, j, k] = (sp[i, j] - sm[i, j]) * inv2e
            if order >= 2:
                for i in range(d):
                    d2b[i, k, k] = (bp[i] - 2.0 * b[i] + bm[i]) * inve2
                    for j in range(d):
                        d2sig[i, j, k, k] = (sp[i, j] - 2.0 * sig[i, j] + sm[i, j]) * inve2
        if order < 2:
            return
        b1 = np.empty(d)
        b2 = np.empty(d)
        s1 = np.empty((d, d))
        s2 = np.empty((d, d))
        for k in range(d):
            for m in range(k + 1, d):
                yp[:] = y
                yp[k] = y[k] + eps
                yp[m] = y[m] + eps
                value(yp, bp, sp)
                yp[m] = y[m] - eps
                value(yp, b1, s1)
                yp[k] = y[k] - eps
                value(yp, bm, sm)
                yp[m] = y[m] + eps
                value(yp, b2, s2)
                for i in range(d):
                    v = (bp[i] - b1[i] - b2[i] + bm[i]) * inv4e2
                    d2b[i, k, m] = v
                    d2b[i, m, k] = v
                    for j in range(d):
                        v = (sp[i, j] - s1[i, j] - s2[i, j] + sm[i, j]) * inv4e2
                        d2sig[i, j, k, m] = v
                        d2sig[i, j, m, k] = v

    return jet


def problem_from_functions(
    dim,
    drift,
    sigma,
    name="custom",
    fd_step=FD_STEP,
    known_invariant_density=None,
    known_centered=None,
    diagonal_sigma=False,
):
    """Build a problem from point functions ``drift(y) -> (d,)`` and ``sigma(y) -> (d, d)``.

    Both functions must be compilable by numba in nopython mode.
    Derivatives come from central differences with step ``fd_step``.
    """
    drift_c = drift if hasattr(drift, "py_func") else njit(error_model="numpy")(drift)
    sigma_c = sigma if hasattr(sigma, "py_func") else njit(error_model="numpy")(sigma)
    d = int(dim)

    @njit(error_model="numpy")
    def value(y, b, sig):
        bb = drift_c(y)
        ss = sigma_c(y)
        for i in range(d):
            b[i] = bb[i]
            for j in range(d):
                sig[i, j] = ss[i, j]

    return ProblemDefinition(
        name=name,
        dim=d,
        jet=_make_fd_jet(value, d, float(fd_step)),
        derivative_mode="finite-difference",
        fd_step=float(fd_step),
        known_invariant_density=known_invariant_density,
        known_centered=known_centered,
        diagonal_sigma=diagonal_sigma,
    )


_ALLOWED_FUNCS = {"sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "sinh", "cosh", "abs"}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
    ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
)


def _check_expression(expr, dim):
    try:
        tree = ast.parse(str(expr), mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse coefficient expression {expr!r}: {exc.msg}") from None
    names = {f"y{k + 1}" for k in range(dim)} | _ALLOWED_FUNCS | {"pi"}
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ValueError(f"disallowed syntax {type(node).__name__} in {expr!r}")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ValueError(f"unknown name {node.id!r} in {expr!r}")
        if isinstance(node, ast.Call) and not (
            isinstance(node.func, ast.Name) and node.func.id in _ALLOWED_FUNCS
        ):
            raise ValueError(f"only {sorted(_ALLOWED_FUNCS)} may be called in {expr!r}")
    return str(expr)


def problem_from_expressions(drift, sigma, name="inline", fd_step=FD_STEP):
    """Problem from string expressions in ``y1..yd`` (e.g. ``"sin(2*pi*y1)"``).

    ``drift`` is a list of ``d`` expressions and ``sigma`` a ``d x d`` nested
    list.  Derivatives are taken by central differences.
    """
    d = len(drift)
    if len(sigma) != d or any(len(row) != d for row in sigma):
        raise ValueError(f"sigma must be a {d}x{d} nested list of expressions")
    bex = [_check_expression(e, d) for e in drift]
    sex = [[_check_expression(e, d) for e in row] for row in sigma]
    lines = ["def value(y, b, sig):"]
    lines += [f"    y{k + 1} = y[{k}]" for k in range(d)]
    lines += [f"    b[{i}] = {e}" for i, e in enumerate(bex)]
    lines += [f"    sig[{i}, {j}] = {e}" for i, row in enumerate(sex) for j, e in enumerate(row)]
    ns = {fn: getattr(math, fn) for fn in _ALLOWED_FUNCS if hasattr(math, fn)}
    ns["abs"] = abs
    ns["pi"] = math.pi
    exec(compile("\n".join(lines), f"<{name}>", "exec"), ns)
    value = njit(error_model="numpy")(ns["value"])
    diagonal = all(sex[i][j].strip() in ("0", "0.0") for i in range(d) for j in range(d) if i != j)
    return ProblemDefinition(
        name=name,
        dim=d,
        jet=_make_fd_jet(value, d, float(fd_step)),
        derivative_mode="finite-difference",
        fd_step=float(fd_step),
        diagonal_sigma=diagonal,
        params={"drift": bex, "sigma": sex},
    )


BENCHMARKS = {
    "free-brownian": free_brownian,
    "benchmark-2d-constant": benchmark_2d_constant,
    "benchmark-2d-variable": benchmark_2d_variable,
    "benchmark-3d": benchmark_3d,
}

_CACHE = {}


def get_problem(name, shift=None):
    """Look up a shipped problem by name, optionally with a constant drift shift."""
    if name not in BENCHMARKS:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(BENCHMARKS)}")
    key = (name, tuple(shift) if shift is not None else None)
    if key not in _CACHE:
        prob = BENCHMARKS[name]()
        if shift is not None and any(v != 0 for v in shift):
            prob = shifted(prob, shift)
        _CACHE[key] = prob
    return _CACHE[key]
