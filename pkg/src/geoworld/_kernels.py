"""Hot kernels for the product latent space.

Every kernel exists twice: a pure-numpy version (``*_np``) and a numba
``@njit`` twin (``*_nb``) with identical signature and semantics.  The
module-level names (``wrap_columns``, ``pairwise_distance`` ...) point at the
numba twins unless numba is missing or ``GEOWORLD_DISABLE_NUMBA`` is set to a
truthy value at import time.

Conventions shared by all kernels:

* points are float64 arrays of shape ``(n, d)``;
* ``moduli`` has shape ``(d,)``; ``circ`` is a bool mask of the same shape
  marking circular coordinates (the modulus of a Euclidean column is ignored);
* ``metric`` is 1 (L1) or 2 (L2).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("GEOWORLD_DISABLE_NUMBA", "").strip().lower()
NUMBA_ENABLED = numba is not None and _FLAG not in {"1", "true", "yes", "on"}
BACKEND = "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------- numpy path


def wrap_columns_np(x, moduli, circ):
    out = np.array(x, dtype=np.float64, copy=True)
    if not circ.any():
        return out
    k = moduli[circ]
    c = out[:, circ]
    r = c - k * np.floor(c / k)
    r = np.where(r < 0.0, r + k, r)
    r = np.where(r >= k, r - k, r)
    out[:, circ] = r
    return out


def signed_diff_np(a, b, moduli, circ):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if not circ.any():
        return diff
    k = moduli[circ]
    half = 0.5 * k
    c = diff[..., circ] + half
    r = c - k * np.floor(c / k)
    r = np.where(r < 0.0, r + k, r)
    r = np.where(r >= k, r - k, r)
    diff[..., circ] = r - half
    return diff


def pairwise_distance_np(A, B, moduli, circ, metric):
    diff = signed_diff_np(A[:, None, :], B[None, :, :], moduli, circ)
    if metric == 1:
        return np.abs(diff).sum(axis=2)
    return np.sqrt((diff * diff).sum(axis=2))


def pairwise_distance_grad_np(A, B, moduli, circ, metric, G, D):
    diff = signed_diff_np(A[:, None, :], B[None, :, :], moduli, circ)
    if metric == 1:
        local = np.sign(diff)
    else:
        safe = np.where(D > 0.0, D, 1.0)
        local = np.where((D > 0.0)[:, :, None], diff / safe[:, :, None], 0.0)
    g = G[:, :, None] * local
    return g.sum(axis=1), -g.sum(axis=0)


def rank_of_true_np(D, true_idx):
    q = D.shape[0]
    true_d = D[np.arange(q), true_idx]
    hits = D <= true_d[:, None]
    # the true column always satisfies <=; it contributes the "1 +"
    return hits.sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------- numba path

if numba is not None:
    _njit = numba.njit(cache=True, fastmath=False)

    @_njit
    def _wrap_scalar(x, k):
        r = x - k * np.floor(x / k)
        if r < 0.0:
            r += k
        if r >= k:
            r -= k
        return r

    @_njit
    def wrap_columns_nb(x, moduli, circ):
        n, d = x.shape
        out = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = _wrap_scalar(v, moduli[j]) if circ[j] else v
        return out

    @_njit
    def _sdiff(a, b, k, is_circ):
        v = a - b
        if is_circ:
            half = 0.5 * k
            return _wrap_scalar(v + half, k) - half
        return v

    @_njit
    def signed_diff_nb(a, b, moduli, circ):
        n, d = a.shape
        out = np.empty((n, d))
        for i in range(n):
            for j in range(d):
                out[i, j] = _sdiff(a[i, j], b[i, j], moduli[j], circ[j])
        return out

    @_njit
    def pairwise_distance_nb(A, B, moduli, circ, metric):
        n, d = A.shape
        m = B.shape[0]
        D = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for c in range(d):
                    v = _sdiff(A[i, c], B[j, c], moduli[c], circ[c])
                    if metric == 1:
                        acc += abs(v)
                    else:
                        acc += v * v
                D[i, j] = acc if metric == 1 else np.sqrt(acc)
        return D

    @_njit
    def pairwise_distance_grad_nb(A, B, moduli, circ, metric, G, D):
        n, d = A.shape
        m = B.shape[0]
        gA = np.zeros((n, d))
        gB = np.zeros((m, d))
        for i in range(n):
            for j in range(m):
                g = G[i, j]
                if g == 0.0:
                    continue
                dist = D[i, j]
                if metric == 2 and dist <= 0.0:
                    continue
                for c in range(d):
                    v = _sdiff(A[i, c], B[j, c], moduli[c], circ[c])
                    if metric == 1:
                        loc = 1.0 if v > 0.0 else (-1.0 if v < 0.0 else 0.0)
                    else:
                        loc = v / dist
                    gA[i, c] += g * loc
                    gB[j, c] -= g * loc
        return gA, gB

    @_njit
    def rank_of_true_nb(D, true_idx):
        q, c = D.shape
        out = np.empty(q, dtype=np.int64)
        for i in range(q):
            t = D[i, true_idx[i]]
            cnt = 0
            for j in range(c):
                if D[i, j] <= t:
                    cnt += 1
            out[i] = cnt
        return out


if NUMBA_ENABLED:
    wrap_columns = wrap_columns_nb
    signed_diff = signed_diff_nb
    pairwise_distance = pairwise_distance_nb
    pairwise_distance_grad = pairwise_distance_grad_nb
    rank_of_true = rank_of_true_nb
else:
    wrap_columns = wrap_columns_np
    signed_diff = signed_diff_np
    pairwise_distance = pairwise_distance_np
    pairwise_distance_grad = pairwise_distance_grad_np
    rank_of_true = rank_of_true_np
