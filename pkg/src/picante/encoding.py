"""Two-token base-B tokenization of residues mod q, with low-digit buckets.

Token id layout: ``[0, k)`` high digits, ``[k, k + n_low)`` low-digit
buckets, then PAD, BOS, EOS.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lwe import ParameterError

MAX_LOW_TOKENS = 10_000


@dataclass(frozen=True)
class EncodingConfig:
    q: int
    k: int
    base_B: int
    bucket_r: int

    def __post_init__(self):
        if self.base_B < 1 or self.k * self.base_B < self.q:
            raise ParameterError(f"k*B must cover q: k={self.k}, B={self.base_B}, q={self.q}")
        r = self.bucket_r
        if r < 1 or r & (r - 1):
            raise ParameterError(f"bucket size must be a power of two, got {r}")

    @classmethod
    def custom(cls, q: int, base_B: int, bucket_r: int = 1) -> "EncodingConfig":
        """Arbitrary base (e.g. B ~ sqrt(q)); the high-digit range adapts."""
        return cls(q, math.ceil(q / base_B), base_B, bucket_r)

    @property
    def n_low(self) -> int:
        return -(-self.base_B // self.bucket_r)

    @property
    def pad(self) -> int:
        return self.k + self.n_low

    @property
    def bos(self) -> int:
        return self.pad + 1

    @property
    def eos(self) -> int:
        return self.pad + 2

    @property
    def vocab_size(self) -> int:
        return self.k + self.n_low + 3

    def high_id(self, digit):
        return digit

    def low_id(self, digit):
        return self.k + digit


def derive_encoding(n: int, q: int) -> EncodingConfig:
    """k = 2*ceil(n/100) + 2, B = ceil(q/k), r = least power of two with B/r < 10000."""
    if n < 1 or q < 3:
        raise ParameterError(f"invalid (n, q) = ({n}, {q})")
    k = 2 * math.ceil(n / 100) + 2
    B = -(-q // k)
    r = 1
    while B / r >= MAX_LOW_TOKENS:
        r *= 2
    return EncodingConfig(q, k, B, r)


def encode_value(v, cfg: EncodingConfig):
    """Digits (high, low) of a residue in [0, q); vectorised over arrays."""
    v = np.asarray(v)
    if np.any((v < 0) | (v >= cfg.q)):
        raise ParameterError(f"value out of range [0, {cfg.q})")
    high, rem = np.divmod(v, cfg.base_B)
    low = rem // cfg.bucket_r
    if high.ndim == 0:
        return int(high), int(low)
    return high, low


def decode_value(high, low, cfg: EncodingConfig):
    """Bucket-midpoint reconstruction, clamped to [0, q)."""
    high = np.asarray(high)
    low = np.asarray(low)
    if np.any((high < 0) | (high >= cfg.k) | (low < 0) | (low >= cfg.n_low)):
        raise ParameterError("digit out of range")
    v = high * cfg.base_B + low * cfg.bucket_r + cfg.bucket_r // 2
    v = np.clip(v, 0, cfg.q - 1)
    return int(v) if v.ndim == 0 else v


def encode_inputs(a, cfg: EncodingConfig) -> np.ndarray:
    """Token ids for centered (or canonical) vectors ``a``; shape (..., 2n).

    Coordinates are mapped to [0, q) first and interleaved as (high, low).
    """
    a = np.asarray(a, dtype=np.int64) % cfg.q
    high, low = encode_value(a, cfg)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=np.int64)
    out[..., 0::2] = cfg.high_id(high)
    out[..., 1::2] = cfg.low_id(low)
    return out


def encode_outputs(b, cfg: EncodingConfig) -> np.ndarray:
    """Two token ids (high, low) per value of ``b``; shape (..., 2)."""
    b = np.asarray(b, dtype=np.int64) % cfg.q
    high, low = encode_value(b.reshape(-1), cfg)
    out = np.stack([cfg.high_id(high), cfg.low_id(low)], axis=-1)
    return out.reshape(b.shape + (2,))


def encode_sample(a, b, cfg: EncodingConfig) -> tuple[np.ndarray, np.ndarray]:
    """(input ids of length 2n, output ids of length 2) for one pair."""
    return encode_inputs(np.asarray(a).reshape(-1), cfg), encode_outputs(np.int64(b), cfg)


def decode_outputs(ids, cfg: EncodingConfig):
    """Inverse of :func:`encode_outputs` up to bucket quantization."""
    ids = np.asarray(ids, dtype=np.int64)
    return decode_value(ids[..., 0], ids[..., 1] - cfg.k, cfg)


def vocabulary(cfg: EncodingConfig) -> list[tuple[int, str, int]]:
    rows = [(cfg.high_id(d), "high", d) for d in range(cfg.k)]
    rows += [(cfg.low_id(d), "low", d) for d in range(cfg.n_low)]
    rows += [(cfg.pad, "special", 0), (cfg.bos, "special", 1), (cfg.eos, "special", 2)]
    return rows


def manifest_text(cfg: EncodingConfig) -> str:
    head = f"# q={cfg.q} k={cfg.k} B={cfg.base_B} r={cfg.bucket_r}\n"
    names = {0: "PAD", 1: "BOS", 2: "EOS"}
    body = []
    for tid, role, value in vocabulary(cfg):
        body.append(f"{tid} {role} {names[value] if role == 'special' else value}")
    return head + "\n".join(body) + "\n"


def manifest_hash(cfg: EncodingConfig) -> str:
    return hashlib.sha256(manifest_text(cfg).encode()).hexdigest()


def write_manifest(path, cfg: EncodingConfig) -> None:
    Path(path).write_text(manifest_text(cfg))


def read_manifest(path) -> EncodingConfig:
    head = Path(path).read_text().splitlines()[0]
    fields = dict(item.split("=") for item in head.lstrip("# ").split())
    cfg = EncodingConfig(int(fields["q"]), int(fields["k"]), int(fields["B"]), int(fields["r"]))
    if manifest_text(cfg) != Path(path).read_text():
        raise ParameterError(f"vocabulary manifest {path} does not match its header")
    return cfg
