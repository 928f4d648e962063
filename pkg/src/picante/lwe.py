"""LWE parameters, sample generation and statistical secret verification."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np


class ParameterError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class LweParams:
    n: int
    q: int
    h: int | None = None
    sigma: float = 3.0
    m: int | None = None

    def __post_init__(self):
        if self.m is None:
            object.__setattr__(self, "m", 4 * self.n)
        if self.n < 1:
            raise ParameterError(f"n must be >= 1, got {self.n}")
        if self.q < 3 or self.q % 2 == 0:
            raise ParameterError(f"q must be odd and >= 3, got {self.q}")
        if self.h is not None and not 1 <= self.h <= self.n:
            raise ParameterError(f"h must lie in [1, n], got {self.h}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.m < self.n:
            raise ParameterError(f"m must be >= n, got m={self.m}, n={self.n}")


def center_rep(x, q: int):
    """Representative of ``x`` mod ``q`` in [-(q-1)/2, (q-1)/2] (q odd).

    Works elementwise on numpy arrays.
    """
    if q < 3 or q % 2 == 0:
        raise ParameterError(f"q must be odd and >= 3, got {q}")
    half = (q - 1) // 2
    return (x + half) % q - half


def sample_secret(params: LweParams, rng: np.random.Generator, h: int | None = None) -> np.ndarray:
    """Binary vector of length n with exactly h ones at uniformly chosen positions."""
    h = params.h if h is None else h
    if h is None or not 1 <= h <= params.n:
        raise ParameterError(f"h must lie in [1, {params.n}], got {h}")
    s = np.zeros(params.n, dtype=np.int64)
    s[rng.choice(params.n, size=h, replace=False)] = 1
    return s


def sample_error(sigma: float, rng: np.random.Generator, size=None):
    """Rounded continuous Gaussian N(0, sigma^2)."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return np.rint(rng.normal(0.0, sigma, size=size)).astype(np.int64)


@dataclass
class LweInstanceSet:
    """The m original samples: rows of ``A`` with right-hand sides ``b``.

    ``secret`` is only present in experiment mode.
    """

    params: LweParams
    A: np.ndarray
    b: np.ndarray
    secret: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=np.int64)
        if self.A.shape != (self.params.m, self.params.n) or self.b.shape != (self.params.m,):
            raise ParameterError("sample shapes do not match params")

    def errors(self) -> np.ndarray:
        """Exact per-sample errors, recomputed from the secret."""
        if self.secret is None:
            raise ValueError("errors are only known when the secret is present")
        return center_rep(self.b - self.A @ self.secret, self.params.q)

    def without_secret(self) -> "LweInstanceSet":
        return LweInstanceSet(self.params, self.A, self.b, None, self.seed)


def gen_samples(params: LweParams, secret, rng: np.random.Generator, seed: int = 0) -> LweInstanceSet:
    secret = np.asarray(secret, dtype=np.int64)
    A = rng.integers(0, params.q, size=(params.m, params.n), dtype=np.int64)
    e = sample_error(params.sigma, rng, size=params.m)
    b = (A @ secret + e) % params.q
    return LweInstanceSet(params, A, b, secret, seed)


def gen_instance(params: LweParams, seed: int) -> LweInstanceSet:
    """Secret and samples drawn from one generator seeded with ``seed``."""
    rng = np.random.default_rng(seed)
    secret = sample_secret(params, rng)
    return gen_samples(params, secret, rng, seed=seed)


# -- verification ---------------------------------------------------------

DEFAULT_ALPHA = 1e-5


@dataclass(frozen=True)
class ResidualStats:
    std_emp: float
    ci_low: float
    ci_high: float
    n_residuals: int
    confidence_alpha: float


def _chi2_bounds(m: int, alpha: float) -> tuple[float, float]:
    """Lower/upper alpha/2 quantiles of chi2(m-1), via N(m-1, 2m-2)."""
    z = NormalDist().inv_cdf(1 - alpha / 2)
    spread = z * math.sqrt(2 * (m - 1))
    return (m - 1) - spread, (m - 1) + spread


def std_interval(sigma: float, m: int, alpha: float = DEFAULT_ALPHA) -> tuple[float, float]:
    """Two-sided interval for the sample std of m draws with true std ``sigma``."""
    lo_q, hi_q = _chi2_bounds(m, alpha)
    low = sigma * math.sqrt((m - 1) / hi_q)
    high = sigma * math.sqrt((m - 1) / lo_q) if lo_q > 0 else math.inf
    return low, high


def residual_std(A, b, guess, q: int, confidence_alpha: float = DEFAULT_ALPHA) -> ResidualStats:
    A = np.asarray(A, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    m = len(b)
    if m < 2:
        raise InsufficientDataError("need at least 2 samples")
    r = center_rep(b - A @ np.asarray(guess, dtype=np.int64), q)
    std = float(np.std(r, ddof=1))
    low, high = std_interval(std, m, confidence_alpha)
    return ResidualStats(std, low, high, m, confidence_alpha)


class Verdict(enum.Enum):
    CORRECT = "true"
    WRONG = "false"
    INDETERMINATE = "indeterminate"

    def __bool__(self):
        return self is Verdict.CORRECT


@dataclass(frozen=True)
class VerificationResult:
    verdict: Verdict
    stats: ResidualStats
    right_interval: tuple[float, float]
    wrong_interval: tuple[float, float]


def verify_guess_detailed(instance: LweInstanceSet, guess,
                          confidence_alpha: float = DEFAULT_ALPHA) -> VerificationResult:
    p = instance.params
    guess = np.asarray(guess)
    if guess.shape != (p.n,):
        raise ParameterError(f"guess must have length {p.n}")
    stats = residual_std(instance.A, instance.b, guess, p.q, confidence_alpha)
    m = stats.n_residuals
    right = std_interval(p.sigma, m, confidence_alpha)
    wrong = std_interval(p.q / math.sqrt(12), m, confidence_alpha)
    if right[1] >= wrong[0]:
        verdict = Verdict.INDETERMINATE
    elif right[0] <= stats.std_emp <= right[1]:
        verdict = Verdict.CORRECT
    else:
        verdict = Verdict.WRONG
    return VerificationResult(verdict, stats, right, wrong)


def verify_guess(instance: LweInstanceSet, guess, confidence_alpha: float = DEFAULT_ALPHA) -> Verdict:
    """Residual-std test on the original samples only."""
    return verify_guess_detailed(instance, guess, confidence_alpha).verdict


# -- files ----------------------------------------------------------------

def secret_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".secret")


def write_instance(path, instance: LweInstanceSet, *, with_secret: bool = True) -> None:
    """Text format: header ``n q h sigma m seed``, then one sample per line."""
    p = instance.params
    path = Path(path)
    lines = [f"{p.n} {p.q} {p.h or 0} {p.sigma!r} {p.m} {instance.seed}"]
    for a, b in zip(instance.A, instance.b):
        lines.append(" ".join(map(str, a.tolist())) + f" {int(b)}")
    path.write_text("\n".join(lines) + "\n")
    if with_secret and instance.secret is not None:
        write_secret(secret_path(path), instance.secret)


def write_secret(path, secret) -> None:
    Path(path).write_text(" ".join(str(int(v)) for v in secret) + "\n")


def read_secret(path, n: int | None = None) -> np.ndarray:
    try:
        bits = np.array([int(t) for t in Path(path).read_text().split()], dtype=np.int64)
    except ValueError as exc:
        raise ParameterError(f"malformed secret file {path}: {exc}") from None
    if n is not None and bits.shape != (n,):
        raise ParameterError(f"secret file {path} has {len(bits)} entries, expected {n}")
    if np.any((bits != 0) & (bits != 1)):
        raise ParameterError(f"secret file {path} is not binary")
    return bits


def read_instance(path, *, load_secret: bool = False) -> LweInstanceSet:
    """Read an instance file.  The sidecar secret is only touched when asked."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 6:
            raise ParameterError(f"bad header in {path}")
        n, q, h, m, seed = int(header[0]), int(header[1]), int(header[2]), int(header[4]), int(header[5])
        sigma = float(header[3])
        rows = np.loadtxt(fh, dtype=np.int64, ndmin=2)
    if rows.shape != (m, n + 1):
        raise ParameterError(f"{path}: expected {m} rows of {n + 1} integers, got {rows.shape}")
    params = LweParams(n, q, h or None, sigma, m)
    secret = read_secret(secret_path(path), n) if load_secret else None
    return LweInstanceSet(params, rows[:, :n], rows[:, n], secret, seed)
