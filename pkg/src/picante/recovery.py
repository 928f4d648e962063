"""Secret recovery from a trained model: per-bit scores, combinations, top-h guesses.

Every guess is accepted or rejected only by the residual-std test on the
original samples.  The true secret, when known, is used for rank reporting
and nothing else.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import decode_outputs, encode_inputs
from .lwe import DEFAULT_ALPHA, LweInstanceSet, ParameterError, Verdict, center_rep, verify_guess_detailed

RANK_MODES = ("HighestRank", "SumRank", "MaxNormalized", "SumNormalized")
DEFAULT_N_A = 128
N_DIRECT_K = 15

METADATA = {
    "rank_convention": "rank score = n - position in descending sort (ties by lowest index)",
    "direct_aggregation": "sum over K of |centered decoded output|",
    "cross_attention_query": "first decoder layer, first output token, heads summed",
    "normalization": "min-max per method, constant vectors map to 0",
}


@dataclass(frozen=True)
class BitScores:
    method: str
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ParameterError(f"scores for {self.method} must be a finite vector")
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True)
class SecretGuess:
    bits: np.ndarray
    h_used: int
    provenance: str


@dataclass
class GuessOutcome:
    guess: SecretGuess
    verdict: Verdict
    std_emp: float


@dataclass
class RecoveryReport:
    epoch: int
    scores: dict[str, BitScores]
    outcomes: list[GuessOutcome] = field(default_factory=list)
    success: GuessOutcome | None = None
    rank_trajectory: dict[str, list[int]] | None = None
    metadata: dict = field(default_factory=lambda: dict(METADATA))

    @property
    def succeeded(self) -> bool:
        return self.success is not None


def _predict_values(model, inputs) -> np.ndarray:
    return decode_outputs(model.predict(inputs), model.encoding)


def direct_k_values(q: int) -> np.ndarray:
    lo, hi = math.ceil(q / 4), math.ceil(q / 2)
    return (lo + np.arange(N_DIRECT_K) * (hi - lo) // N_DIRECT_K).astype(np.int64)


def direct_recover(model, n: int, q: int) -> BitScores:
    """Probe with K * e_i; a 1-bit makes the prediction about K, a 0-bit about 0."""
    ks = direct_k_values(q)
    probes = np.zeros((len(ks), n, n), dtype=np.int64)
    eye = np.eye(n, dtype=np.int64)
    for j, K in enumerate(ks):
        probes[j] = K * eye
    values = _predict_values(model, encode_inputs(probes.reshape(-1, n), model.encoding))
    contrib = np.abs(center_rep(values.reshape(len(ks), n), q))
    return BitScores("direct", contrib.sum(axis=0))


def distinguisher_recover(model, n: int, q: int, rng: np.random.Generator,
                          n_a: int = DEFAULT_N_A, probes=None) -> BitScores:
    """Compare M(a + K e_i) with M(a) for shared random a and a fresh K per a.

    ``probes`` overrides the uniform draw (e.g. rows of reduced data).
    """
    if probes is None:
        a = rng.integers(0, q, size=(n_a, n), dtype=np.int64)
    else:
        a = np.asarray(probes, dtype=np.int64)[:n_a] % q
        n_a = len(a)
    K = rng.integers(math.ceil(q / 4), math.ceil(q / 2), size=n_a)
    base = _predict_values(model, encode_inputs(a, model.encoding))
    shifted = (a[:, None, :] + K[:, None, None] * np.eye(n, dtype=np.int64)[None]) % q
    moved = _predict_values(model, encode_inputs(shifted.reshape(-1, n), model.encoding))
    diff = np.abs(center_rep(moved.reshape(n_a, n) - base[:, None], q))
    return BitScores("distinguisher", diff.mean(axis=0))


def cross_attention_recover(model, a_samples) -> BitScores:
    """Cross-attention mass summed over samples, kept at high-digit positions."""
    a_samples = np.asarray(a_samples, dtype=np.int64)
    if a_samples.ndim != 2 or len(a_samples) == 0:
        raise ParameterError("cross-attention recovery needs at least one sample")
    scores = model.cross_attention_scores(encode_inputs(a_samples, model.encoding))
    return BitScores("cross_attention", np.asarray(scores).sum(axis=0)[0::2])


def _descending(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-scores, kind="stable")


def rank_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    out = np.empty(n, dtype=np.float64)
    out[_descending(scores)] = n - np.arange(n)
    return out


def minmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def combine(score_sets, mode: str) -> BitScores:
    if mode not in RANK_MODES:
        raise ParameterError(f"unknown combination mode {mode!r}")
    if len(score_sets) < 2:
        raise ParameterError("combination needs at least two score sets")
    lengths = {len(s.scores) for s in score_sets}
    if len(lengths) != 1:
        raise ParameterError(f"score sets differ in length: {sorted(lengths)}")
    transform = rank_scores if mode.endswith("Rank") else minmax
    stacked = np.stack([transform(s.scores) for s in score_sets])
    agg = stacked.max(axis=0) if mode in ("HighestRank", "MaxNormalized") else stacked.sum(axis=0)
    return BitScores(f"{mode}({'+'.join(s.method for s in score_sets)})", agg)


def top_h_guess(scores: BitScores, h: int) -> SecretGuess:
    n = len(scores.scores)
    if not 1 <= h <= n:
        raise ParameterError(f"h must lie in [1, {n}], got {h}")
    bits = np.zeros(n, dtype=np.int64)
    bits[_descending(scores.scores)[:h]] = 1
    return SecretGuess(bits, h, scores.method)


def true_bit_ranks(scores: BitScores, secret) -> list[int]:
    """0-based descending positions of the true 1-bits (reporting only)."""
    pos = np.empty(len(scores.scores), dtype=np.int64)
    pos[_descending(scores.scores)] = np.arange(len(scores.scores))
    return sorted(pos[np.flatnonzero(secret)].tolist())


def recover_all(model, instance: LweInstanceSet, h_range, *, reduced_a=None,
                rng: np.random.Generator | None = None, n_a: int = DEFAULT_N_A,
                epoch: int = 0, report_secret=None,
                confidence_alpha: float = DEFAULT_ALPHA) -> RecoveryReport:
    """Score bits with every available method, then try top-h guesses for each h.

    Individual methods are tried first at each h; combinations only when none
    of them verifies.  Stops at the first verified guess.
    """
    instance = instance.without_secret()
    n, q = instance.params.n, instance.params.q
    rng = rng if rng is not None else np.random.default_rng(epoch)
    base = [direct_recover(model, n, q), distinguisher_recover(model, n, q, rng, n_a)]
    if reduced_a is not None and len(reduced_a):
        base.append(cross_attention_recover(model, reduced_a))
    report = RecoveryReport(epoch, {s.method: s for s in base})
    if report_secret is not None:
        report.rank_trajectory = {s.method: true_bit_ranks(s, report_secret) for s in base}

    combos = [combine(list(subset), mode)
              for size in range(2, len(base) + 1)
              for subset in itertools.combinations(base, size)
              for mode in RANK_MODES]
    cache: dict[bytes, GuessOutcome] = {}

    def attempt(scores: BitScores, h: int) -> GuessOutcome:
        guess = top_h_guess(scores, h)
        key = guess.bits.tobytes()
        if key in cache:
            prev = cache[key]
            outcome = GuessOutcome(guess, prev.verdict, prev.std_emp)
        else:
            res = verify_guess_detailed(instance, guess.bits, confidence_alpha)
            outcome = GuessOutcome(guess, res.verdict, res.stats.std_emp)
            cache[key] = outcome
        report.outcomes.append(outcome)
        return outcome

    for h in h_range:
        if not 1 <= h <= n:
            raise ParameterError(f"h={h} outside [1, {n}]")
        for group in (base, combos):
            for scores in group:
                outcome = attempt(scores, h)
                if outcome.verdict is Verdict.CORRECT and report.success is None:
                    report.success = outcome
            if report.success is not None:
                return report
    return report


def write_report(report: RecoveryReport, directory) -> tuple[Path, Path]:
    """Key-value text summary plus a per-bit score CSV (bit, method, score, rank)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    txt = directory / f"report-epoch{report.epoch:04d}.txt"
    lines = [f"epoch={report.epoch}", f"success={str(report.succeeded).lower()}"]
    if report.success is not None:
        g = report.success.guess
        lines += [f"method={g.provenance}", f"h={g.h_used}",
                  f"secret={''.join(map(str, g.bits.tolist()))}",
                  f"std_emp={report.success.std_emp:.6f}"]
    lines += [f"meta.{k}={v}" for k, v in report.metadata.items()]
    for o in report.outcomes:
        lines.append(f"guess h={o.guess.h_used} method={o.guess.provenance} "
                     f"verdict={o.verdict.value} std_emp={o.std_emp:.6f}")
    if report.rank_trajectory is not None:
        for method, ranks in report.rank_trajectory.items():
            lines.append(f"ranks.{method}={','.join(map(str, ranks))}")
    txt.write_text("\n".join(lines) + "\n")

    path_csv = directory / f"scores-epoch{report.epoch:04d}.csv"
    with path_csv.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bit", "method", "score", "rank"])
        for method, s in report.scores.items():
            pos = np.empty(len(s.scores), dtype=np.int64)
            pos[_descending(s.scores)] = np.arange(len(s.scores))
            for i, v in enumerate(s.scores):
                w.writerow([i, method, repr(float(v)), int(pos[i])])
    return txt, path_csv
