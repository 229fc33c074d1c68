"""One-step weak integrators for ``dX = b dt + sigma dW``.

Three schemes are provided:

``euler-maruyama``
    ``x + b h + sigma sqrt(h) xi``
``milstein``
    Euler-Maruyama plus the correction ``M_i = xi_i : J`` built from the
    Milstein tensor and a double Ito integral sample ``J``
``modified-milstein``
    Milstein step applied to the modified coefficients ``b + h b1`` and
    ``sigma + h sigma1`` (weak order two)

The compiled ``advance`` function below is the only implementation of the
update; the Python-level step functions and the ensemble kernels both call
it, which keeps them bitwise consistent.
"""

import functools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .coeffs import canonicalize, corrections, xi_tensor

__all__ = [
    "SCHEMES",
    "SchemeConfig",
    "GaussianDraw",
    "StepError",
    "normals_per_step",
    "em_step",
    "milstein_step",
    "modified_milstein_step",
    "sample_double_ito",
    "step",
]

EM, MILSTEIN, MODIFIED = 0, 1, 2
SCHEMES = {"euler-maruyama": EM, "milstein": MILSTEIN, "modified-milstein": MODIFIED}
DEFAULT_Q = 2


class StepError(FloatingPointError):
    """A step produced a non-finite position."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


@dataclass(frozen=True)
class SchemeConfig:
    """Integrator choice and its numerical parameters."""

    scheme_kind: str = "modified-milstein"
    h: float = 0.01
    fl_order: int = DEFAULT_Q
    force_commutative: Optional[bool] = None

    def __post_init__(self):
        if self.scheme_kind not in SCHEMES:
            raise ValueError(
                f"unknown scheme {self.scheme_kind!r}; choose from {sorted(SCHEMES)}"
            )
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError(f"time step h must be positive, got {self.h}")
        if int(self.fl_order) != self.fl_order or self.fl_order < 0:
            raise ValueError(f"fl_order must be a non-negative integer, got {self.fl_order}")

    @property
    def code(self):
        return SCHEMES[self.scheme_kind]

    def uses_commutative_path(self, problem):
        if self.force_commutative is not None:
            return bool(self.force_commutative)
        return problem.commutative


@dataclass(frozen=True)
class GaussianDraw:
    """Primary normal vector ``xi`` and, for non-commutative Milstein steps,
    ``q`` auxiliary vectors (shape ``(q, d)``)."""

    xi: np.ndarray
    xi_aux: Optional[np.ndarray] = None

    def flat(self):
        xi = np.asarray(self.xi, dtype=np.float64).ravel()
        if self.xi_aux is None:
            return xi
        aux = np.asarray(self.xi_aux, dtype=np.float64).reshape(-1, xi.size)
        return np.concatenate([xi, aux.ravel()])


def normals_per_step(d, scheme_code, q, commutative):
    """Number of standard normals consumed by one step."""
    if scheme_code == EM or commutative:
        return d
    return (1 + q) * d


# ---------------------------------------------------------------------------
# compiled core


@njit(inline="always")
def double_ito(d, h, q, z, commutative, J):
    """Fill ``J`` with a double Ito integral sample from normals ``z``.

    ``z[:d]`` is the primary vector; for the Fourier-Legendre path ``z`` holds
    ``q`` further vectors of length ``d``.
    """
    half = 0.5 * h
    for a in range(d):
        for c in range(d):
            J[a, c] = z[a] * z[c]
        J[a, a] -= 1.0
    if not commutative:
        for k in range(1, q + 1):
            w = 1.0 / math.sqrt(4.0 * k * k - 1.0)
            o0 = (k - 1) * d
            o1 = k * d
            for a in range(d):
                for c in range(d):
                    J[a, c] += w * (z[o0 + a] * z[o1 + c] - z[o1 + a] * z[o0 + c])
    for a in range(d):
        for c in range(d):
            J[a, c] *= half


@njit(inline="always")
def milstein_term(d, sig, dsig, J, diagonal, xi, out):
    """Add ``sum_{j1 j2} xi[i, j1, j2] J[j1, j2]`` to ``out``."""
    if diagonal:
        # only xi[i, j1, i] = d_{j1} sig_ii * sig_{j1 j1} survives
        for i in range(d):
            s = 0.0
            for j1 in range(d):
                s += dsig[i, i, j1] * sig[j1, j1] * J[j1, i]
            out[i] += s
    else:
        xi_tensor(d, sig, dsig, xi)
        for i in range(d):
            s = 0.0
            for j1 in range(d):
                for j2 in range(d):
                    s += xi[i, j1, j2] * J[j1, j2]
            out[i] += s


@njit(inline="always")
def advance(d, x, h, scheme, q, commutative, diagonal, z, b, sig, db, d2b, dsig, d2sig,
            bh, sigh, J, xi, out):
    """One step from ``x`` given the coefficient jet at ``x`` and normals ``z``."""
    sqh = math.sqrt(h)
    if scheme == MODIFIED:
        corrections(d, b, sig, db, d2b, dsig, d2sig, bh, sigh, diagonal)
        for i in range(d):
            bh[i] = b[i] + h * bh[i]
            for j in range(d):
                sigh[i, j] = sig[i, j] + h * sigh[i, j]
    else:
        for i in range(d):
            bh[i] = b[i]
            for j in range(d):
                sigh[i, j] = sig[i, j]
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += sigh[i, j] * z[j]
        out[i] = x[i] + bh[i] * h + s * sqh
    if scheme != EM:
        double_ito(d, h, q, z, commutative, J)
        milstein_term(d, sig, dsig, J, diagonal, xi, out)


def jet_order(scheme):
    """Highest derivative order of the coefficients a scheme needs."""
    return 2 if scheme == MODIFIED else (1 if scheme == MILSTEIN else 0)


@functools.lru_cache(maxsize=None)
def step_kernel(d, scheme, q, commutative, diagonal):
    """Compiled single-point step with every structural choice frozen.

    Dimension, scheme and noise structure become compile-time constants,
    which lets the small fixed-size loops unroll and removes unused
    branches.  Returns ``f(x, h, z, b, sig, db, d2b, dsig, d2sig, bh, sigh,
    J, xi, out)``.
    """
    d, scheme, q = int(d), int(scheme), int(q)
    commutative, diagonal = bool(commutative), bool(diagonal)

    @njit(inline="always")
    def kernel(x, h, z, b, sig, db, d2b, dsig, d2sig, bh, sigh, J, xi, out):
        advance(d, x, h, scheme, q, commutative, diagonal, z, b, sig, db, d2b, dsig,
                d2sig, bh, sigh, J, xi, out)

    return kernel


@functools.lru_cache(maxsize=None)
def _single_step_kernel(d, scheme, q, commutative, diagonal):
    kernel = step_kernel(d, scheme, q, commutative, diagonal)
    order = jet_order(scheme)

    @njit
    def single(jet, x, h, z):
        y = np.empty(d)
        canonicalize(d, x, y)
        b = np.zeros(d)
        sig = np.zeros((d, d))
        db = np.zeros((d, d))
        d2b = np.zeros((d, d, d))
        dsig = np.zeros((d, d, d))
        d2sig = np.zeros((d, d, d, d))
        jet(y, order, b, sig, db, d2b, dsig, d2sig)
        bh = np.empty(d)
        sigh = np.empty((d, d))
        J = np.empty((d, d))
        xi = np.empty((d, d, d))
        out = np.empty(d)
        kernel(x, h, z, b, sig, db, d2b, dsig, d2sig, bh, sigh, J, xi, out)
        return out

    return single


@njit
def _double_ito_py(h, q, z, commutative, d):
    J = np.empty((d, d))
    double_ito(d, h, q, z, commutative, J)
    return J


# ---------------------------------------------------------------------------
# Python-level API


def _draw_vector(draw, d, needed):
    if isinstance(draw, GaussianDraw):
        z = draw.flat()
    else:
        z = np.asarray(draw, dtype=np.float64).ravel()
    if z.size < needed:
        raise ValueError(
            f"draw supplies {z.size} normals but the step needs {needed}"
            " (auxiliary Fourier-Legendre vectors missing?)"
        )
    return np.ascontiguousarray(z)


def sample_double_ito(d, h, q, draw, commutative):
    """Double Ito integral matrix from a Gaussian draw.

    Commutative path: ``(h/2)(xi xi^T - I)``.  Otherwise the order-``q``
    Fourier-Legendre series with the draw's auxiliary vectors.
    """
    needed = d if commutative else (1 + q) * d
    z = _draw_vector(draw, d, needed)
    return _double_ito_py(float(h), int(q), z, bool(commutative), int(d))


def step(problem, x, config, draw):
    """Advance one point by one step of ``config`` (a :class:`SchemeConfig`)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != problem.dim:
        raise ValueError(f"x must have {problem.dim} components")
    commutative = config.uses_commutative_path(problem)
    needed = normals_per_step(problem.dim, config.code, config.fl_order, commutative)
    z = _draw_vector(draw, problem.dim, needed)
    single = _single_step_kernel(problem.dim, config.code, config.fl_order, commutative,
                                 problem.diagonal_sigma)
    out = single(problem.jet, np.ascontiguousarray(x), float(config.h), z)
    if not np.all(np.isfinite(out)):
        raise StepError(f"non-finite position after step from x={x.tolist()}", x=x)
    return out


def em_step(problem, x, h, draw):
    """``x + b(x) h + sigma(x) sqrt(h) xi``."""
    return step(problem, x, SchemeConfig("euler-maruyama", h), draw)


def milstein_step(problem, x, h, q, draw, force_commutative=None):
    return step(problem, x, SchemeConfig("milstein", h, q, force_commutative), draw)


def modified_milstein_step(problem, x, h, q, draw, force_commutative=None):
    """Milstein step with drift ``b + h b1`` and diffusion ``sigma + h sigma1``.

    The Milstein tensor uses the unmodified ``sigma``.
    """
    return step(problem, x, SchemeConfig("modified-milstein", h, q, force_commutative), draw)
