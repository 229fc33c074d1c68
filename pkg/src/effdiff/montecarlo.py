"""Particle ensembles and the Lagrangian effective-diffusivity estimator.

Particles are simulated in fixed-size blocks.  Each particle draws its
normals from a counter-based stream keyed by ``(seed, particle, step)``
(:mod:`effdiff.rng`), so results do not depend on how blocks are spread
over worker threads.  Unwrapped positions feed the variance and drift
estimators; positions reduced modulo 1 feed the occupation histogram.
"""

import functools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import rng
from .coeffs import canonicalize
from .eulerian import TorusGridField
from .schemes import SchemeConfig, jet_order, normals_per_step, step_kernel

__all__ = [
    "EnsembleConfig",
    "DiffusivityEstimate",
    "EnsembleResult",
    "EnsembleError",
    "StudyRow",
    "StudyTable",
    "simulate_ensemble",
    "effective_diffusivity_estimate",
    "mean_drift_estimate",
    "invariant_histogram",
    "convergence_study",
    "fit_slope",
    "BLOCK_SIZE",
]

log = logging.getLogger(__name__)

BLOCK_SIZE = 2048
MAX_FAILURE_FRACTION = 0.01
NOISE_GATE = 0.2


class EnsembleError(RuntimeError):
    """Too many trajectories blew up for the (problem, h) pairing."""


@dataclass(frozen=True)
class EnsembleConfig:
    M: int = 200_000
    T: float = 50.0
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    seed: int = 0
    x0: Optional[Sequence[float]] = None
    histogram_bins: int = 0
    burn_in_fraction: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ValueError("T must be positive")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.histogram_bins < 0 or self.histogram_bins == 1:
            raise ValueError("histogram_bins must be 0 (disabled) or >= 2")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        rng.split_seed(self.seed)

    @property
    def n_steps(self):
        return max(1, int(round(self.T / self.scheme.h)))

    @property
    def horizon(self):
        """Horizon actually simulated, ``N h``."""
        return self.n_steps * self.scheme.h


@dataclass(frozen=True)
class DiffusivityEstimate:
    matrix: np.ndarray
    stderr: np.ndarray
    M: int
    T: float
    h: Optional[float] = None


@dataclass(frozen=True)
class EnsembleResult:
    diffusivity: DiffusivityEstimate
    mean_drift: np.ndarray
    mean_drift_stderr: np.ndarray
    histogram: Optional[TorusGridField]
    failures: int
    final_positions: np.ndarray = field(repr=False)
    config: EnsembleConfig = None
    wallclock: float = 0.0


# ---------------------------------------------------------------------------
# compiled block kernel


@functools.lru_cache(maxsize=None)
def block_kernel(d, scheme, q, commutative, diagonal):
    """Compiled block integrator specialised like :func:`schemes.step_kernel`."""
    step = step_kernel(d, scheme, q, commutative, diagonal)
    order = jet_order(scheme)
    nz = normals_per_step(d, scheme, q, commutative)

    @njit(nogil=True, error_model="numpy")
    def run_block(jet, x, alive, particle0, n_steps, h, k0, k1, hist, bins, burn_start):
        B = x.shape[0]
        z = np.empty(nz)
        y = np.empty(d)
        b = np.zeros(d)
        sig = np.zeros((d, d))
        db = np.zeros((d, d))
        d2b = np.zeros((d, d, d))
        dsig = np.zeros((d, d, d))
        d2sig = np.zeros((d, d, d, d))
        bh = np.empty(d)
        sigh = np.empty((d, d))
        J = np.empty((d, d))
        xi = np.empty((d, d, d))
        out = np.empty(d)
        cur = np.empty(d)
        count_hist = bins > 0
        for p in range(B):
            if not alive[p]:
                continue
            for k in range(d):
                cur[k] = x[p, k]
            for n in range(n_steps):
                rng.fill_normals(k0, k1, particle0 + p, n, z)
                canonicalize(d, cur, y)
                jet(y, order, b, sig, db, d2b, dsig, d2sig)
                step(cur, h, z, b, sig, db, d2b, dsig, d2sig, bh, sigh, J, xi, out)
                ok = True
                for k in range(d):
                    if not math.isfinite(out[k]):
                        ok = False
                if not ok:
                    alive[p] = False
                    break
                for k in range(d):
                    cur[k] = out[k]
                if count_hist and n + 1 >= burn_start:
                    idx = 0
                    for k in range(d):
                        f = cur[k] - math.floor(cur[k])
                        c = int(f * bins)
                        if c >= bins:
                            c = bins - 1
                        idx = idx * bins + c
                    hist[idx] += 1
            for k in range(d):
                x[p, k] = cur[k]

    return run_block


@njit
def _histogram_counts(wrapped, bins):
    n, d = wrapped.shape
    hist = np.zeros(bins ** d, dtype=np.int64)
    for p in range(n):
        idx = 0
        for k in range(d):
            f = wrapped[p, k] - math.floor(wrapped[p, k])
            c = int(f * bins)
            if c >= bins:
                c = bins - 1
            idx = idx * bins + c
        hist[idx] += 1
    return hist


# ---------------------------------------------------------------------------
# estimators


def effective_diffusivity_estimate(final_positions, T, h=None):
    """``sum_i (x_i - xbar)(x_i - xbar)^T / (2 M T)`` with delta-method errors.

    The covariance uses the ``1/M`` normalisation.  Standard errors come
    from the sample variance of the per-particle outer products.
    """
    X = np.asarray(final_positions, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("final_positions must have shape (M, d)")
    M = X.shape[0]
    if M < 2:
        raise ValueError("at least two positions are needed for a variance")
    if not T > 0:
        raise ValueError("T must be positive")
    # shifted-data two-pass: identical positions give an exactly zero matrix
    Z = X - X[0]
    Z -= Z.mean(axis=0)
    cov = (Z.T @ Z) / M
    cov = 0.5 * (cov + cov.T)
    outer = Z[:, :, None] * Z[:, None, :]
    var = ((outer - cov) ** 2).mean(axis=0)
    return DiffusivityEstimate(
        matrix=cov / (2.0 * T),
        stderr=np.sqrt(var / M) / (2.0 * T),
        M=M,
        T=float(T),
        h=h,
    )


def mean_drift_estimate(final_positions, x0, T):
    """``(mean(X_T) - x0) / T`` and its standard error."""
    X = np.asarray(final_positions, dtype=np.float64)
    M = X.shape[0]
    drift = (X.mean(axis=0) - np.asarray(x0, dtype=np.float64)) / T
    se = X.std(axis=0) / math.sqrt(M) / T if M > 1 else np.full(X.shape[1], np.inf)
    return drift, se


def invariant_histogram(wrapped_samples, bins):
    """Normalised occupation density of samples on the torus.

    Samples are reduced modulo 1.  The density integrates to one:
    ``cell_volume * sum(values) == 1``.
    """
    S = np.asarray(wrapped_samples, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[0] == 0:
        raise ValueError("histogram needs at least one sample")
    if bins < 2:
        raise ValueError("bins must be at least 2")
    counts = _histogram_counts(np.ascontiguousarray(S), int(bins))
    return _density_from_counts(counts, int(bins), S.shape[1])


def _density_from_counts(counts, bins, d):
    total = counts.sum()
    values = counts.reshape((bins,) * d) * (bins**d / total)
    return TorusGridField(values=values, dim=d, n=bins, centered=True)


# ---------------------------------------------------------------------------
# ensemble driver


def simulate_ensemble(problem, config):
    """Run ``config.M`` trajectories of ``N = round(T/h)`` steps each."""
    d = problem.dim
    sc = config.scheme
    N = config.n_steps
    T = config.horizon
    if abs(T - config.T) > 1e-12 * config.T:
        log.info("horizon adjusted from T=%r to N*h=%r (N=%d)", config.T, T, N)
    commutative = sc.uses_commutative_path(problem)
    x0 = np.zeros(d) if config.x0 is None else np.asarray(config.x0, dtype=np.float64)
    if x0.shape != (d,):
        raise ValueError(f"x0 must have {d} components")
    k0, k1 = rng.split_seed(config.seed)
    bins = int(config.histogram_bins)
    burn_start = max(1, math.ceil(config.burn_in_fraction * N))
    M = config.M
    starts = list(range(0, M, BLOCK_SIZE))
    kernel = block_kernel(d, sc.code, sc.fl_order, commutative, problem.diagonal_sigma)

    def run(start):
        stop = min(start + BLOCK_SIZE, M)
        x = np.tile(x0, (stop - start, 1))
        alive = np.ones(stop - start, dtype=np.bool_)
        hist = np.zeros(bins**d if bins else 1, dtype=np.int64)
        kernel(problem.jet, x, alive, start, N, float(sc.h), k0, k1, hist, bins, burn_start)
        return x, alive, hist

    t0 = time.perf_counter()
    if config.workers == 1 or len(starts) == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(run, starts))
    wall = time.perf_counter() - t0

    # merge in particle-index order
    X = np.concatenate([p[0] for p in parts])
    alive = np.concatenate([p[1] for p in parts])
    failures = int(M - alive.sum())
    if failures > MAX_FAILURE_FRACTION * M:
        raise EnsembleError(
            f"{failures} of {M} trajectories diverged (h={sc.h}, scheme={sc.scheme_kind});"
            " reduce the time step"
        )
    good = X[alive]
    if good.shape[0] < 2:
        raise EnsembleError("fewer than two surviving trajectories")
    histogram = None
    if bins:
        counts = np.zeros(bins**d, dtype=np.int64)
        for p in parts:
            counts += p[2]
        histogram = _density_from_counts(counts, bins, d)
    drift, drift_se = mean_drift_estimate(good, x0, T)
    return EnsembleResult(
        diffusivity=effective_diffusivity_estimate(good, T, h=sc.h),
        mean_drift=drift,
        mean_drift_stderr=drift_se,
        histogram=histogram,
        failures=failures,
        final_positions=X,
        config=config,
        wallclock=wall,
    )


# ---------------------------------------------------------------------------
# convergence studies


def fit_slope(hs, errors, stderrs=None, gate=NOISE_GATE):
    """Least-squares slope of ``log(error)`` against ``log(h)``.

    Points whose standard error exceeds ``gate`` times their error (or whose
    error is not positive) are excluded.  Returns ``(slope, intercept, used)``
    where ``used`` is a boolean mask; the slope is NaN with fewer than two
    usable points.
    """
    hs = np.asarray(hs, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    used = np.isfinite(errors) & (errors > 0)
    if stderrs is not None:
        used &= np.asarray(stderrs, dtype=np.float64) <= gate * errors
    if used.sum() < 2:
        return float("nan"), float("nan"), used
    slope, intercept = np.polyfit(np.log(hs[used]), np.log(errors[used]), 1)
    return float(slope), float(intercept), used


@dataclass(frozen=True)
class StudyRow:
    h: float
    scheme: str
    estimate: DiffusivityEstimate
    error: np.ndarray
    err_frobenius: float
    stderr_frobenius: float
    wallclock: float


@dataclass(frozen=True)
class StudyTable:
    rows: list
    reference: np.ndarray
    slope: float
    intercept: float
    used: np.ndarray
    entries: tuple = ()
    entry_slopes: dict = field(default_factory=dict)

    @property
    def excluded(self):
        return [r.h for r, u in zip(self.rows, self.used) if not u]


def _frobenius_stderr(err, se):
    norm = np.linalg.norm(err)
    if norm == 0:
        return float(np.linalg.norm(se))
    return float(np.sqrt(np.sum((err * se) ** 2)) / norm)


def convergence_study(problem, h_list, base_config, reference, entries=(), gate=NOISE_GATE):
    """Estimate the diffusivity for each step size and fit the error slope.

    ``reference`` is a ``d x d`` matrix (e.g. the Eulerian oracle) or a
    :class:`DiffusivityEstimate` from an independent fine-step run, whose
    standard errors are then combined with each row's.  Every run reuses
    ``base_config.seed``.
    """
    hs = [float(h) for h in h_list]
    if len(set(hs)) < 3:
        raise ValueError("a convergence study needs at least three distinct step sizes")
    ref_se = 0.0
    if isinstance(reference, DiffusivityEstimate):
        ref_se = reference.stderr
        reference = reference.matrix
    reference = np.asarray(reference, dtype=np.float64)
    rows = []
    for h in hs:
        cfg = replace(base_config, scheme=replace(base_config.scheme, h=h))
        res = simulate_ensemble(problem, cfg)
        est = res.diffusivity
        err = est.matrix - reference
        se = np.sqrt(est.stderr**2 + np.asarray(ref_se) ** 2)
        rows.append(StudyRow(
            h=h,
            scheme=cfg.scheme.scheme_kind,
            estimate=replace(est, stderr=se),
            error=err,
            err_frobenius=float(np.linalg.norm(err)),
            stderr_frobenius=_frobenius_stderr(err, se),
            wallclock=res.wallclock,
        ))
    slope, intercept, used = fit_slope(
        hs, [r.err_frobenius for r in rows], [r.stderr_frobenius for r in rows], gate
    )
    entry_slopes = {}
    for (i, j) in entries:
        s, _, u = fit_slope(
            hs,
            [abs(r.error[i, j]) for r in rows],
            [r.estimate.stderr[i, j] for r in rows],
            gate,
        )
        entry_slopes[(i, j)] = (s, u)
    return StudyTable(rows, reference, slope, intercept, used, tuple(entries), entry_slopes)
