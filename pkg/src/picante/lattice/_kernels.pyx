# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LLL / BKZ kernels.

Basis rows are exact int64; the Gram matrix and Gram-Schmidt data live in a
floating type selected per call (``double`` or ``long double``).  The pure
Python twin in :mod:`picante.lattice._fallback` follows the same control flow.
"""
import time

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef long long ll

ctypedef fused real:
    double
    long double

# status codes shared with the Python wrapper
cdef enum:
    OK = 0
    PRECISION = 1
    OVERFLOW = 2
    ITERATIONS = 3
    MAX_SIZE_REDUCTION_PASSES = 64

# rows whose entries exceed this lose exactness in the Gram matrix
cdef ll ENTRY_LIMIT = 1LL << 52
cdef double ETA = 0.51


cdef inline real _round(real x) noexcept nogil:
    return floor(x + 0.5)


cdef int _addmul(ll[:, ::1] B, real[:, ::1] G, int i, int j, ll c) noexcept nogil:
    """b_i += c * b_j, keeping G = B B^T in sync."""
    cdef int d = B.shape[0], m = B.shape[1], t
    cdef ll v, a, hi = 0
    cdef ll* bi = &B[i, 0]
    cdef ll* bj = &B[j, 0]
    cdef real* gi = &G[i, 0]
    cdef real* gj = &G[j, 0]
    cdef real rc = <real>c
    cdef real gii = gi[i] + 2 * rc * gi[j] + rc * rc * gj[j]
    for t in range(m):
        v = bi[t] + c * bj[t]
        bi[t] = v
        a = v if v >= 0 else -v
        hi = a if a > hi else hi
    for t in range(d):
        gi[t] = gi[t] + rc * gj[t]
    gi[i] = gii
    for t in range(d):
        G[t, i] = gi[t]
    return OVERFLOW if hi > ENTRY_LIMIT else OK


cdef void _swap(ll[:, ::1] B, real[:, ::1] G, int i, int j) noexcept nogil:
    cdef int d = B.shape[0], m = B.shape[1], t
    cdef ll tb
    cdef real tg
    if i == j:
        return
    for t in range(m):
        tb = B[i, t]
        B[i, t] = B[j, t]
        B[j, t] = tb
    for t in range(d):
        tg = G[i, t]
        G[i, t] = G[j, t]
        G[j, t] = tg
    for t in range(d):
        tg = G[t, i]
        G[t, i] = G[t, j]
        G[t, j] = tg


cdef void _negate(ll[:, ::1] B, real[:, ::1] G, int i) noexcept nogil:
    cdef int d = B.shape[0], m = B.shape[1], t
    for t in range(m):
        B[i, t] = -B[i, t]
    for t in range(d):
        if t != i:
            G[i, t] = -G[i, t]
            G[t, i] = -G[t, i]


cdef void _gso_row(real[:, ::1] G, real[:, ::1] mu, real[:, ::1] r, real[::1] bb, int i) noexcept nogil:
    cdef int j, t
    cdef real s
    for j in range(i):
        s = G[i, j]
        for t in range(j):
            s -= mu[j, t] * r[i, t]
        r[i, j] = s
        mu[i, j] = s / bb[j]
    s = G[i, i]
    for t in range(i):
        s -= mu[i, t] * r[i, t]
    r[i, i] = s
    bb[i] = s


cdef int _lll(ll[:, ::1] B, real[:, ::1] G, real[:, ::1] mu, real[:, ::1] r,
              real[::1] bb, int start, int end, real delta, ll max_iter, ll* iters) noexcept nogil:
    """LLL on rows [0, end) assuming rows [0, start) are already reduced."""
    cdef int k, j, t, passes, status
    cdef real x, maxmu
    if end <= 0:
        return OK
    if start <= 0:
        _gso_row(G, mu, r, bb, 0)
        start = 1
    k = start
    while k < end:
        iters[0] += 1
        if iters[0] > max_iter:
            return ITERATIONS
        _gso_row(G, mu, r, bb, k)
        passes = 0
        while True:
            maxmu = 0
            for j in range(k):
                if fabs(mu[k, j]) > maxmu:
                    maxmu = fabs(mu[k, j])
            if maxmu <= ETA:
                break
            passes += 1
            if passes > MAX_SIZE_REDUCTION_PASSES:
                return PRECISION
            for j in range(k - 1, -1, -1):
                x = _round(mu[k, j])
                if x != 0:
                    status = _addmul(B, G, k, j, <ll>(-x))
                    if status != OK:
                        return status
                    for t in range(j):
                        mu[k, t] -= x * mu[j, t]
                    mu[k, j] -= x
            # re-orthogonalize from the exact Gram matrix
            _gso_row(G, mu, r, bb, k)
        if bb[k] < (delta - mu[k, k - 1] * mu[k, k - 1]) * bb[k - 1]:
            _swap(B, G, k, k - 1)
            if k == 1:
                _gso_row(G, mu, r, bb, 0)
            else:
                k -= 1
        else:
            k += 1
    return OK


cdef int _enumerate(real[:, ::1] mu, real[::1] bb, int k, int kend, real radius2,
                   ll* best, ll max_nodes, real* best_norm) noexcept nogil:
    """Unpruned Schnorr-Euchner search for the shortest nonzero vector of the
    projected block [k, kend).  Writes coefficients into ``best`` and returns
    1 when a vector of squared norm below ``radius2`` was found, 0 otherwise,
    -1 when the node budget ran out (``best`` then holds the best so far)."""
    cdef int n = kend - k
    cdef int lvl, j, last_nonzero, found = 0
    cdef ll nodes = 0
    cdef real diff, s, R2 = radius2
    cdef real* rho = <real*>malloc((n + 1) * sizeof(real))
    cdef real* ctr = <real*>malloc(n * sizeof(real))
    cdef ll* v = <ll*>malloc(n * sizeof(ll))
    cdef ll* w = <ll*>malloc(n * sizeof(ll))
    for j in range(n + 1):
        rho[j] = 0
    for j in range(n):
        ctr[j] = 0
        v[j] = 0
        w[j] = 0
    v[0] = 1
    last_nonzero = 0
    lvl = 0
    while True:
        nodes += 1
        if max_nodes > 0 and nodes > max_nodes:
            found = -1 if found == 0 else -2
            break
        diff = <real>v[lvl] - ctr[lvl]
        rho[lvl] = rho[lvl + 1] + diff * diff * bb[k + lvl]
        if rho[lvl] < R2:
            if lvl == 0:
                # strictly shorter than the current bound: record, shrink bound
                R2 = rho[0]
                for j in range(n):
                    best[j] = v[j]
                found = 1
            else:
                lvl -= 1
                s = 0
                for j in range(lvl + 1, n):
                    s -= v[j] * mu[k + j, k + lvl]
                ctr[lvl] = s
                v[lvl] = <ll>_round(s)
                w[lvl] = 1
                continue
        # move to the next sibling one level up
        lvl += 1
        if lvl >= n:
            break
        if lvl >= last_nonzero:
            last_nonzero = lvl
            v[lvl] += 1
        else:
            if <real>v[lvl] > ctr[lvl]:
                v[lvl] -= w[lvl]
            else:
                v[lvl] += w[lvl]
            w[lvl] += 1
    best_norm[0] = R2
    free(rho)
    free(ctr)
    free(v)
    free(w)
    if found == -2:
        return 1
    return found


cdef int _insert(ll[:, ::1] B, real[:, ::1] G, int k, int n, ll* x) noexcept nogil:
    """Make sum_i x_i b_{k+i} the k-th basis row by unimodular row operations."""
    cdef int i, j, unit = -1, status
    cdef ll c, tx
    for i in range(n):
        if x[i] == 1 or x[i] == -1:
            unit = i
    if unit >= 0:
        # b_{k+unit} <- v, then rotate it to position k
        if x[unit] == -1:
            for j in range(n):
                x[j] = -x[j]
        for j in range(n):
            if j != unit and x[j] != 0:
                status = _addmul(B, G, k + unit, k + j, x[j])
                if status != OK:
                    return status
        for j in range(unit, 0, -1):
            _swap(B, G, k + j, k + j - 1)
        return OK
    for i in range(n - 1, 0, -1):
        while x[i] != 0:
            # floor division of x[i-1] by x[i]
            c = x[i - 1] / x[i]
            if (x[i - 1] % x[i] != 0) and ((x[i - 1] < 0) != (x[i] < 0)):
                c -= 1
            if c != 0:
                x[i - 1] -= c * x[i]
                status = _addmul(B, G, k + i, k + i - 1, c)
                if status != OK:
                    return status
            tx = x[i - 1]
            x[i - 1] = x[i]
            x[i] = tx
            _swap(B, G, k + i - 1, k + i)
    if x[0] == -1:
        _negate(B, G, k)
    elif x[0] != 1:
        return PRECISION
    return OK


cdef _gram(ll[:, ::1] B, real[:, ::1] G):
    cdef int d = B.shape[0], m = B.shape[1], i, j, t
    cdef real s
    for i in range(d):
        for j in range(i + 1):
            s = 0
            for t in range(m):
                s += (<real>B[i, t]) * (<real>B[j, t])
            G[i, j] = s
            G[j, i] = s


cdef tuple _reduce(ll[:, ::1] B, real[:, ::1] G, real[:, ::1] mu, real[:, ::1] r,
                   real[::1] bb, double delta, int beta, int max_tours,
                   double deadline, ll max_iter, ll max_nodes):
    """LLL followed (for beta >= 2) by BKZ tours.

    Returns (status, tours, timed_out, insertions)."""
    cdef int d = B.shape[0]
    cdef ll iters = 0
    cdef int status, k, kend, valid, tours = 0, insertions = 0, found, j, n
    cdef bint clean, timed_out = False
    cdef real rdelta = <real>delta, best_norm
    cdef ll* x
    _gram(B, G)
    with nogil:
        status = _lll(B, G, mu, r, bb, 0, d, rdelta, max_iter, &iters)
    if status != OK or beta < 2 or d < 2:
        return status, 0, False, 0
    x = <ll*>malloc(d * sizeof(ll))
    try:
        valid = d
        while tours < max_tours:
            clean = True
            for k in range(d - 1):
                if deadline > 0 and time.monotonic() > deadline:
                    timed_out = True
                    break
                kend = k + beta
                if kend > d:
                    kend = d
                n = kend - k
                with nogil:
                    if valid < kend:
                        status = _lll(B, G, mu, r, bb, valid, kend, rdelta, max_iter, &iters)
                        valid = kend
                    if status == OK:
                        found = _enumerate(mu, bb, k, kend, rdelta * bb[k], x, max_nodes, &best_norm)
                        if found == 1 or found == -2:
                            status = _insert(B, G, k, n, x)
                            if status == OK:
                                insertions += 1
                                clean = False
                                status = _lll(B, G, mu, r, bb, k, kend, rdelta, max_iter, &iters)
                                valid = kend
                if status != OK:
                    return status, tours, timed_out, insertions
            tours += 1
            if timed_out or clean:
                break
        if valid < d:
            with nogil:
                status = _lll(B, G, mu, r, bb, valid, d, rdelta, max_iter, &iters)
    finally:
        free(x)
    return status, tours, timed_out, insertions


def reduce(cnp.ndarray basis, double delta, int beta=0, int max_tours=0,
           double deadline=0.0, bint extended=False, ll max_iter=0, ll max_nodes=0):
    """Reduce an int64 C-contiguous ``basis`` in place.

    ``beta < 2`` runs LLL only.  ``deadline`` is a ``time.monotonic()``
    timestamp (0 disables it).  Returns (status, tours, timed_out, insertions).
    """
    cdef ll[:, ::1] B = basis
    cdef int d = B.shape[0]
    if max_iter <= 0:
        max_iter = 1LL << 40
    if extended:
        Gl = np.zeros((d, d), dtype=np.longdouble)
        return _reduce_ld(B, Gl, np.zeros_like(Gl), np.zeros_like(Gl), np.zeros(d, dtype=np.longdouble),
                          delta, beta, max_tours, deadline, max_iter, max_nodes)
    Gd = np.zeros((d, d), dtype=np.float64)
    return _reduce_d(B, Gd, np.zeros_like(Gd), np.zeros_like(Gd), np.zeros(d, dtype=np.float64),
                     delta, beta, max_tours, deadline, max_iter, max_nodes)


def _reduce_d(ll[:, ::1] B, double[:, ::1] G, double[:, ::1] mu, double[:, ::1] r,
              double[::1] bb, double delta, int beta, int max_tours, double deadline,
              ll max_iter, ll max_nodes):
    return _reduce(B, G, mu, r, bb, delta, beta, max_tours, deadline, max_iter, max_nodes)


def _reduce_ld(ll[:, ::1] B, long double[:, ::1] G, long double[:, ::1] mu,
               long double[:, ::1] r, long double[::1] bb, double delta, int beta,
               int max_tours, double deadline, ll max_iter, ll max_nodes):
    return _reduce(B, G, mu, r, bb, delta, beta, max_tours, deadline, max_iter, max_nodes)


def enumerate_block(double[:, ::1] mu, double[::1] bb, int k, int kend, double radius2,
                    ll max_nodes=0):
    """Expose the block enumeration for tests: returns (found, coefficients, norm2)."""
    cdef int n = kend - k
    cdef double best_norm
    out = np.zeros(n, dtype=np.int64)
    cdef ll[::1] xv = out
    cdef int found = _enumerate(mu, bb, k, kend, radius2, &xv[0], max_nodes, &best_norm)
    return found, out, best_norm
