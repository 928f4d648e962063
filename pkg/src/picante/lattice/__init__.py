"""LLL and BKZ reduction of integer lattice bases.

The compiled kernels (``_kernels``) are used when importable; otherwise the
pure-Python twin in ``_fallback`` is selected.  ``BACKEND`` records which one
is active and every entry point accepts ``backend=`` to force either.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import _fallback

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

log = logging.getLogger(__name__)

BACKEND = "compiled" if _kernels is not None else "python"

_OK, _PRECISION, _OVERFLOW, _ITERATIONS = 0, 1, 2, 3
_UNLIMITED_TOURS = 2**31 - 1


class ReductionError(RuntimeError):
    """Floating-point Gram-Schmidt could not be stabilised, even in extended precision."""


@dataclass
class BkzResult:
    basis: np.ndarray
    tours: int
    timed_out: bool
    insertions: int
    backend: str
    extended_precision: bool


def _module(backend):
    backend = backend or BACKEND
    if backend == "compiled":
        if _kernels is None:
            raise ImportError("compiled lattice kernels are not built")
        return _kernels, backend
    if backend == "python":
        return _fallback, backend
    raise ValueError(f"unknown backend {backend!r}")


def _as_basis(basis) -> np.ndarray:
    B = np.array(basis, dtype=np.int64, order="C", copy=True)
    if B.ndim != 2 or B.shape[0] == 0:
        raise ValueError("basis must be a non-empty 2-d integer matrix")
    return B


def _run(B, delta, beta, max_tours, timeout, backend, max_nodes):
    if not 0.25 < delta <= 0.9999:
        raise ValueError(f"delta must lie in (0.25, 0.9999], got {delta}")
    mod, name = _module(backend)
    deadline = time.monotonic() + timeout if timeout else 0.0
    tours_total = insertions_total = 0
    for extended in (False, True):
        status, tours, timed_out, insertions = mod.reduce(
            B, delta, beta, max_tours, deadline, extended, 0, max_nodes)
        tours_total += tours
        insertions_total += insertions
        if status == _OK:
            return BkzResult(B, tours_total, bool(timed_out), insertions_total, name, extended)
        if status == _OVERFLOW:
            raise OverflowError("basis entries exceeded 2**52 during reduction")
        # B is still a basis of the same lattice; retry from where we stopped
        log.warning("precision failure (status %d) in %s precision, escalating",
                    status, "extended" if extended else "double")
    raise ReductionError("Gram-Schmidt unstable in extended precision")


def lll_reduce(basis, delta: float = 0.99, *, backend: str | None = None) -> np.ndarray:
    """Return an LLL-reduced basis of the lattice spanned by the rows of ``basis``.

    Rows must be linearly independent.  The input is not modified.
    """
    B = _as_basis(basis)
    return _run(B, delta, 0, 0, None, backend, 0).basis


def bkz_reduce(basis, beta: int, delta: float = 0.99, *, max_tours: int | None = None,
               timeout: float | None = None, max_nodes: int = 0,
               backend: str | None = None) -> BkzResult:
    """BKZ with unpruned Schnorr-Euchner enumeration in each block.

    Tours repeat until one makes no insertion, ``max_tours`` is reached, or
    ``timeout`` seconds elapse; a timed-out result is still a valid basis.
    """
    if beta < 2:
        raise ValueError("beta must be at least 2")
    B = _as_basis(basis)
    if max_tours is None:
        max_tours = _UNLIMITED_TOURS
    return _run(B, delta, beta, max_tours, timeout, backend, max_nodes)


def gso(basis) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt data ``(mu, bstar_norms_squared)`` in double precision."""
    B = np.asarray(basis, dtype=np.float64)
    d = B.shape[0]
    mu = np.eye(d)
    bstar = np.zeros_like(B)
    for i in range(d):
        v = B[i].copy()
        for j in range(i):
            mu[i, j] = B[i] @ bstar[j] / (bstar[j] @ bstar[j])
            v -= mu[i, j] * bstar[j]
        bstar[i] = v
    return mu, np.einsum("ij,ij->i", bstar, bstar)


def is_lll_reduced(basis, delta: float = 0.99, eta: float = 0.51) -> bool:
    """Size-reduction and Lovász check (floating point, for moderate dimensions)."""
    mu, bb = gso(basis)
    d = len(bb)
    for i in range(d):
        if np.any(np.abs(mu[i, :i]) > eta):
            return False
    for k in range(1, d):
        if bb[k] < (delta - mu[k, k - 1] ** 2) * bb[k - 1] * (1 - 1e-9):
            return False
    return True


def enumerate_block(mu, bb, k, kend, radius2, max_nodes=0, *, backend=None):
    mod, _ = _module(backend)
    return mod.enumerate_block(np.ascontiguousarray(mu, dtype=np.float64),
                               np.ascontiguousarray(bb, dtype=np.float64),
                               k, kend, radius2, max_nodes)
