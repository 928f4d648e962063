"""Pure-Python LLL / BKZ, used when the compiled kernels are unavailable.

Mirrors ``_kernels.pyx`` step for step; row operations are vectorised with
numpy, the enumeration is a plain Python loop.  Expect it to be one to two
orders of magnitude slower than the extension on 160-dimensional inputs.
"""
import math
import time

import numpy as np

OK, PRECISION, OVERFLOW, ITERATIONS = 0, 1, 2, 3

ENTRY_LIMIT = 1 << 52
ETA = 0.51
MAX_SIZE_REDUCTION_PASSES = 64


class _State:
    def __init__(self, B, dtype):
        self.B = B
        self.d = B.shape[0]
        Bf = B.astype(dtype)
        self.G = Bf @ Bf.T
        self.mu = np.zeros((self.d, self.d), dtype=dtype)
        self.r = np.zeros((self.d, self.d), dtype=dtype)
        self.bb = np.zeros(self.d, dtype=dtype)
        self.dtype = dtype
        self.iters = 0

    def addmul(self, i, j, c):
        B, G = self.B, self.G
        c_real = self.dtype(c)
        gii = G[i, i] + 2 * c_real * G[i, j] + c_real * c_real * G[j, j]
        B[i] += c * B[j]
        G[i] += c_real * G[j]
        G[:, i] = G[i]
        G[i, i] = gii
        if np.abs(B[i]).max() > ENTRY_LIMIT:
            return OVERFLOW
        return OK

    def swap(self, i, j):
        if i == j:
            return
        B, G = self.B, self.G
        B[[i, j]] = B[[j, i]]
        G[[i, j]] = G[[j, i]]
        G[:, [i, j]] = G[:, [j, i]]

    def negate(self, i):
        self.B[i] = -self.B[i]
        gii = self.G[i, i]
        self.G[i] = -self.G[i]
        self.G[:, i] = -self.G[:, i]
        self.G[i, i] = gii

    def gso_row(self, i):
        G, mu, r = self.G, self.mu, self.r
        for j in range(i):
            s = G[i, j] - np.dot(mu[j, :j], r[i, :j])
            r[i, j] = s
            mu[i, j] = s / self.bb[j]
        s = G[i, i] - np.dot(mu[i, :i], r[i, :i])
        r[i, i] = s
        self.bb[i] = s

    def lll(self, start, end, delta, max_iter):
        if end <= 0:
            return OK
        if start <= 0:
            self.gso_row(0)
            start = 1
        mu, bb = self.mu, self.bb
        k = start
        while k < end:
            self.iters += 1
            if self.iters > max_iter:
                return ITERATIONS
            self.gso_row(k)
            passes = 0
            while np.abs(mu[k, :k]).max() > ETA:
                passes += 1
                if passes > MAX_SIZE_REDUCTION_PASSES:
                    return PRECISION
                for j in range(k - 1, -1, -1):
                    x = math.floor(mu[k, j] + 0.5)
                    if x != 0:
                        status = self.addmul(k, j, -x)
                        if status != OK:
                            return status
                        mu[k, :j] -= x * mu[j, :j]
                        mu[k, j] -= x
                self.gso_row(k)
            if bb[k] < (delta - mu[k, k - 1] ** 2) * bb[k - 1]:
                self.swap(k, k - 1)
                if k == 1:
                    self.gso_row(0)
                else:
                    k -= 1
            else:
                k += 1
        return OK

    def insert(self, k, x):
        x = [int(v) for v in x]
        n = len(x)
        units = [i for i in range(n) if abs(x[i]) == 1]
        if units:
            unit = units[-1]
            if x[unit] == -1:
                x = [-v for v in x]
            for j in range(n):
                if j != unit and x[j] != 0:
                    status = self.addmul(k + unit, k + j, x[j])
                    if status != OK:
                        return status
            for j in range(unit, 0, -1):
                self.swap(k + j, k + j - 1)
            return OK
        for i in range(n - 1, 0, -1):
            while x[i] != 0:
                c = x[i - 1] // x[i]
                if c != 0:
                    x[i - 1] -= c * x[i]
                    status = self.addmul(k + i, k + i - 1, c)
                    if status != OK:
                        return status
                x[i - 1], x[i] = x[i], x[i - 1]
                self.swap(k + i - 1, k + i)
        if x[0] == -1:
            self.negate(k)
        elif x[0] != 1:
            return PRECISION
        return OK


def enumerate_block(mu, bb, k, kend, radius2, max_nodes=0):
    """Schnorr-Euchner enumeration of the projected block [k, kend).

    Returns ``(found, coefficients, norm2)`` with the same conventions as the
    compiled version: found is 1 on success, 0 if nothing beats ``radius2``,
    -1 if the node budget ran out first.
    """
    n = kend - k
    rho = [0.0] * (n + 1)
    ctr = [0.0] * n
    v = [0] * n
    w = [0] * n
    v[0] = 1
    best = np.zeros(n, dtype=np.int64)
    mu_l = [[float(mu[k + i, k + j]) for j in range(n)] for i in range(n)]
    bb_l = [float(bb[k + i]) for i in range(n)]
    last_nonzero = 0
    lvl = 0
    nodes = 0
    found = 0
    R2 = float(radius2)
    while True:
        nodes += 1
        if max_nodes > 0 and nodes > max_nodes:
            if found == 0:
                found = -1
            break
        diff = v[lvl] - ctr[lvl]
        rho[lvl] = rho[lvl + 1] + diff * diff * bb_l[lvl]
        if rho[lvl] < R2:
            if lvl == 0:
                R2 = rho[0]
                best[:] = v
                found = 1
            else:
                lvl -= 1
                s = 0.0
                for j in range(lvl + 1, n):
                    s -= v[j] * mu_l[j][lvl]
                ctr[lvl] = s
                v[lvl] = math.floor(s + 0.5)
                w[lvl] = 1
                continue
        lvl += 1
        if lvl >= n:
            break
        if lvl >= last_nonzero:
            last_nonzero = lvl
            v[lvl] += 1
        else:
            if v[lvl] > ctr[lvl]:
                v[lvl] -= w[lvl]
            else:
                v[lvl] += w[lvl]
            w[lvl] += 1
    return found, best, R2


def reduce(basis, delta, beta=0, max_tours=0, deadline=0.0, extended=False,
           max_iter=0, max_nodes=0):
    """Same contract as ``_kernels.reduce``."""
    dtype = np.longdouble if extended else np.float64
    st = _State(basis, dtype)
    d = st.d
    if max_iter <= 0:
        max_iter = 1 << 40
    status = st.lll(0, d, delta, max_iter)
    if status != OK or beta < 2 or d < 2:
        return status, 0, False, 0
    tours = insertions = 0
    timed_out = False
    valid = d
    while tours < max_tours:
        clean = True
        for k in range(d - 1):
            if deadline > 0 and time.monotonic() > deadline:
                timed_out = True
                break
            kend = min(k + beta, d)
            if valid < kend:
                status = st.lll(valid, kend, delta, max_iter)
                valid = kend
                if status != OK:
                    return status, tours, timed_out, insertions
            found, x, _ = enumerate_block(st.mu, st.bb, k, kend, delta * st.bb[k], max_nodes)
            if found == 1:
                status = st.insert(k, x)
                if status == OK:
                    insertions += 1
                    clean = False
                    status = st.lll(k, kend, delta, max_iter)
                    valid = kend
                if status != OK:
                    return status, tours, timed_out, insertions
        tours += 1
        if timed_out or clean:
            break
    if valid < d:
        status = st.lll(valid, d, delta, max_iter)
    return status, tours, timed_out, insertions
