"""Counter-based Gaussian draws for particle ensembles.

Every draw is a pure function of ``(seed, particle, step, slot)``: a
Philox4x32-10 block cipher turns the counter into random bits and a
128-layer ziggurat turns the bits into standard normals.  Because no state
is carried between particles or steps, any partition of an ensemble over
workers reproduces the same numbers bit for bit.
"""

import numpy as np
from numba import njit, uint32, uint64, int64

__all__ = [
    "philox4x32",
    "split_seed",
    "fill_normals",
    "standard_normals",
]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_SHIFT = np.uint64(32)

# slow-path counters live in their own half of the sub-counter space
_SLOW_BIT = np.uint32(0x80000000)


@njit(inline="always", cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32 with 10 rounds on a 128-bit counter and 64-bit key."""
    for _ in range(10):
        p0 = uint64(c0) * _M0
        p1 = uint64(c2) * _M1
        hi0 = uint32(p0 >> _SHIFT)
        lo0 = uint32(p0)
        hi1 = uint32(p1 >> _SHIFT)
        lo1 = uint32(p1)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = uint32(k0 + _W0)
        k1 = uint32(k1 + _W1)
    return c0, c1, c2, c3


def split_seed(seed):
    """Split a 64-bit master seed into the two 32-bit Philox key words."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32)


def _ziggurat_tables():
    # Marsaglia & Tsang (2000), 128 layers, thresholds for a signed 32-bit draw
    kn = np.zeros(128, dtype=np.int64)
    wn = np.zeros(128)
    fn = np.zeros(128)
    m1 = 2147483648.0
    dn = 3.442619855899
    tn = dn
    vn = 9.91256303526217e-3
    q = vn / np.exp(-0.5 * dn * dn)
    kn[0] = int((dn / q) * m1)
    kn[1] = 0
    wn[0] = q / m1
    wn[127] = dn / m1
    fn[0] = 1.0
    fn[127] = np.exp(-0.5 * dn * dn)
    for i in range(126, 0, -1):
        dn = np.sqrt(-2.0 * np.log(vn / dn + np.exp(-0.5 * dn * dn)))
        kn[i + 1] = int((dn / tn) * m1)
        tn = dn
        fn[i] = np.exp(-0.5 * dn * dn)
        wn[i] = dn / m1
    return kn, wn, fn


_KN, _WN, _FN = _ziggurat_tables()
_R = 3.442619855899
_TWO_M32 = 2.0**-32


@njit(inline="always", cache=True)
def _as_signed(w):
    v = int64(w)
    if v >= 2147483648:
        v -= 4294967296
    return v


@njit(inline="always", cache=True)
def _uniform(w):
    # open interval (0, 1)
    return (float(w) + 0.5) * _TWO_M32


@njit(cache=True)
def _slow_normal(hz, iz, k0, k1, c1, c2, c3, slow_ctr):
    """Ziggurat rejection branch; returns (value, updated slow counter)."""
    while True:
        x = hz * _WN[iz]
        w0, w1, w2, w3 = philox4x32(_SLOW_BIT | uint32(slow_ctr), c1, c2, c3, k0, k1)
        slow_ctr += 1
        if iz == 0:
            # tail beyond the base strip
            while True:
                x = -np.log(_uniform(w0)) / _R
                y = -np.log(_uniform(w1))
                if y + y >= x * x:
                    break
                w0, w1, w2, w3 = philox4x32(
                    _SLOW_BIT | uint32(slow_ctr), c1, c2, c3, k0, k1
                )
                slow_ctr += 1
            return (_R + x if hz > 0 else -_R - x), slow_ctr
        if _FN[iz] + _uniform(w0) * (_FN[iz - 1] - _FN[iz]) < np.exp(-0.5 * x * x):
            return x, slow_ctr
        hz = _as_signed(w1)
        iz = int64(w2 & uint32(127))
        if abs(hz) < _KN[iz]:
            return hz * _WN[iz], slow_ctr


@njit(cache=True)
def fill_normals(k0, k1, particle, step, out):
    """Fill ``out`` with standard normals keyed by (key, particle, step).

    Each Philox block yields three normals on the fast path: words 0..2
    carry the signed values and word 3 carries the three layer indices, so
    index bits never overlap value bits.
    """
    n = out.shape[0]
    c1 = uint32(step)
    c2 = uint32(particle & 0xFFFFFFFF)
    c3 = uint32(particle >> 32)
    sub = 0
    slow_ctr = 0
    i = 0
    while i < n:
        w0, w1, w2, w3 = philox4x32(uint32(sub), c1, c2, c3, k0, k1)
        sub += 1
        for j in range(3):
            if i >= n:
                break
            if j == 0:
                w = w0
            elif j == 1:
                w = w1
            else:
                w = w2
            hz = _as_signed(w)
            iz = int64((w3 >> uint32(8 * j)) & uint32(127))
            if abs(hz) < _KN[iz]:
                out[i] = hz * _WN[iz]
            else:
                v, slow_ctr = _slow_normal(hz, iz, k0, k1, c1, c2, c3, slow_ctr)
                out[i] = v
            i += 1


@njit(cache=True)
def _fill_block(k0, k1, particle0, step, out):
    buf = np.empty(out.shape[1])
    for p in range(out.shape[0]):
        fill_normals(k0, k1, particle0 + p, step, buf)
        out[p, :] = buf


def standard_normals(seed, particles, step, size):
    """Draw ``size`` normals for each particle index in ``particles`` at ``step``.

    Convenience wrapper around :func:`fill_normals` for tests and the
    single-step API; returns an array of shape ``(len(particles), size)``.
    """
    k0, k1 = split_seed(seed)
    particles = np.atleast_1d(np.asarray(particles, dtype=np.int64))
    out = np.empty((particles.size, size))
    buf = np.empty(size)
    for row, p in enumerate(particles):
        fill_normals(k0, k1, int(p), int(step), buf)
        out[row] = buf
    return out
