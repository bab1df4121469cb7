"""Dense real eigenvalues: Householder Hessenberg reduction followed by the
Francis implicit double-shift QR iteration (eigenvalues only)."""
from __future__ import annotations

import math

import numpy as np


DEFAULT_DEFLATION_TOL = 1e-10


class EigenNonConvergence(ArithmeticError):
    pass


def _house(x: np.ndarray) -> np.ndarray:
    """Unit vector v with (I - 2 v v^T) x parallel to e_1; zeros if x = 0."""
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return np.zeros_like(x)
    v = x.astype(np.float64, copy=True)
    v[0] += math.copysign(norm, v[0]) if v[0] != 0 else norm
    return v / np.linalg.norm(v)


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Upper Hessenberg matrix orthogonally similar to ``a``."""
    h = np.array(a, dtype=np.float64, copy=True)
    n = h.shape[0]
    if h.ndim != 2 or h.shape[1] != n:
        raise ValueError("square matrix required")
    for k in range(n - 2):
        v = _house(h[k + 1:, k])
        if not v.any():
            continue
        h[k + 1:, k:] -= 2.0 * np.outer(v, v @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


def _eig2(a: float, b: float, c: float, d: float) -> tuple[complex, complex]:
    """Eigenvalues of [[a, b], [c, d]]."""
    half_tr = 0.5 * (a + d)
    disc = 0.25 * (a - d) ** 2 + b * c
    if disc >= 0:
        r = math.sqrt(disc)
        # avoid cancellation in the smaller root; when big is itself rounding
        # noise (nilpotent-like blocks) det / big is meaningless, so fall back
        big = half_tr + math.copysign(r, half_tr) if half_tr != 0 else r
        direct = half_tr - math.copysign(r, half_tr) if half_tr != 0 else -r
        small = (a * d - b * c) / big if big != 0 else direct
        if abs(small) > abs(big):
            small = direct
        return complex(big), complex(small)
    r = math.sqrt(-disc)
    return complex(half_tr, r), complex(half_tr, -r)


def eigvals(a: np.ndarray, tol: float = DEFAULT_DEFLATION_TOL, max_iter_factor: int = 100) -> np.ndarray:
    """All eigenvalues of a real square matrix (complex array, unordered).

    A subdiagonal entry is set to zero once it falls below ``tol`` times the
    magnitude of its two diagonal neighbours.
    """
    h = hessenberg(a)
    n = h.shape[0]
    out: list[complex] = []
    if n == 0:
        return np.array([], dtype=complex)
    norm = float(np.abs(h).sum(axis=1).max()) or 1.0
    hi = n - 1
    its = 0
    total = 0
    cap = max_iter_factor * n
    while hi >= 0:
        if hi == 0:
            out.append(complex(h[0, 0]))
            break
        lo = hi
        while lo > 0:
            scale = abs(h[lo - 1, lo - 1]) + abs(h[lo, lo])
            if abs(h[lo, lo - 1]) <= tol * (scale if scale != 0.0 else norm):
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            out.append(complex(h[hi, hi]))
            hi -= 1
            its = 0
            continue
        if lo == hi - 1:
            out.extend(_eig2(h[hi - 1, hi - 1], h[hi - 1, hi], h[hi, hi - 1], h[hi, hi]))
            hi -= 2
            its = 0
            continue
        total += 1
        its += 1
        if total > cap:
            raise EigenNonConvergence(f"QR iteration did not converge within {cap} sweeps")
        if its % 10 == 0:
            # exceptional shift breaks cycling
            s = abs(h[hi, hi - 1]) + abs(h[hi - 1, hi - 2])
            tr, det = 1.5 * s, s * s
        else:
            tr = h[hi - 1, hi - 1] + h[hi, hi]
            det = h[hi - 1, hi - 1] * h[hi, hi] - h[hi - 1, hi] * h[hi, hi - 1]
        x = h[lo, lo] * h[lo, lo] + h[lo, lo + 1] * h[lo + 1, lo] - tr * h[lo, lo] + det
        y = h[lo + 1, lo] * (h[lo, lo] + h[lo + 1, lo + 1] - tr)
        z = h[lo + 1, lo] * h[lo + 2, lo + 1]
        for k in range(lo, hi - 1):
            v = _house(np.array([x, y, z]))
            if v.any():
                q = max(lo, k - 1)
                blk = h[k:k + 3, q:hi + 1]
                blk -= 2.0 * np.outer(v, v @ blk)
                r = min(k + 3, hi)
                blk = h[lo:r + 1, k:k + 3]
                blk -= 2.0 * np.outer(blk @ v, v)
            x = h[k + 1, k]
            y = h[k + 2, k]
            if k < hi - 2:
                z = h[k + 3, k]
        v = _house(np.array([x, y]))
        if v.any():
            k = hi - 1
            blk = h[k:k + 2, k - 1:hi + 1]
            blk -= 2.0 * np.outer(v, v @ blk)
            blk = h[lo:hi + 1, k:k + 2]
            blk -= 2.0 * np.outer(blk @ v, v)
    return np.array(out, dtype=complex)
