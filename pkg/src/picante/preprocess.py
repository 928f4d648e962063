"""Subsample-and-reduce preprocessing: turns 4n LWE samples into many reduced pairs.

Each campaign matrix ``i`` draws n of the original samples with a generator
seeded by ``(seed, i)``, reduces the q-ary embedding

    [ w*I   A  ]
    [  0   q*I ]

with BKZ, and recovers R from the left block to form (R A mod q, R b mod q).
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lattice
from .lwe import LweInstanceSet, LweParams, ParameterError, center_rep, sample_error

log = logging.getLogger(__name__)


class InternalConsistencyError(RuntimeError):
    """Reduced embedding does not have the [w*R | RA + qC] shape; indicates an arithmetic bug."""


class CorruptShardError(ValueError):
    pass


@dataclass(frozen=True)
class ReductionConfig:
    omega: int = 15
    beta: int = 20
    delta: float = 0.99
    timeout_seconds: float | None = None
    max_tours: int | None = None

    def __post_init__(self):
        if self.omega < 1:
            raise ParameterError("omega must be >= 1")
        if self.beta < 2:
            raise ParameterError("beta must be >= 2")
        if not 0.25 < self.delta <= 0.9999:
            raise ParameterError("delta must lie in (0.25, 0.9999]")
        if self.max_tours is not None and self.max_tours < 1:
            raise ParameterError("max_tours must be >= 1")


@dataclass
class SubsampleMatrix:
    indices: np.ndarray
    A: np.ndarray
    b: np.ndarray


@dataclass
class ReducedBatch:
    source_indices: np.ndarray
    R: np.ndarray  # all 2n rows, exact
    a: np.ndarray  # kept rows, centered
    b: np.ndarray
    kept: np.ndarray  # row indices of R that produced a kept pair
    zero_rows_dropped: int

    @property
    def R_kept(self) -> np.ndarray:
        return self.R[self.kept]


@dataclass(frozen=True)
class DatasetStats:
    std_ratio: float
    norm_ratio: float
    duplicate_count: int
    zero_row_fraction: float
    n_pairs: int


@dataclass
class ReducedDataset:
    params: LweParams
    a: np.ndarray
    b: np.ndarray
    matrix_index: np.ndarray
    stats: DatasetStats | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.b)


def subsample(instance: LweInstanceSet, rng: np.random.Generator) -> SubsampleMatrix:
    n, m = instance.params.n, instance.params.m
    if m < n:
        raise ParameterError(f"need m >= n samples, have m={m}, n={n}")
    idx = np.sort(rng.choice(m, size=n, replace=False))
    return SubsampleMatrix(idx, instance.A[idx].copy(), instance.b[idx].copy())


def build_embedding(A, omega: int, q: int) -> np.ndarray:
    A = np.asarray(A, dtype=np.int64) % q
    n = A.shape[0]
    if omega < 1:
        raise ParameterError("omega must be >= 1")
    M = np.zeros((2 * n, 2 * n), dtype=np.int64)
    M[:n, :n] = omega * np.eye(n, dtype=np.int64)
    M[:n, n:] = A
    M[n:, n:] = q * np.eye(n, dtype=np.int64)
    return M


def bkz_reduce(basis, config: ReductionConfig, *, backend: str | None = None) -> lattice.BkzResult:
    return lattice.bkz_reduce(basis, config.beta, config.delta, max_tours=config.max_tours,
                              timeout=config.timeout_seconds, backend=backend)


def extract_reduced_pairs(reduced, omega: int, b, q: int, source_indices=None) -> ReducedBatch:
    reduced = np.asarray(reduced, dtype=np.int64)
    two_n = reduced.shape[0]
    n = two_n // 2
    left = reduced[:, :n]
    if np.any(left % omega):
        raise InternalConsistencyError("left block of the reduced embedding is not divisible by omega")
    R = left // omega
    a = center_rep(reduced[:, n:], q)
    b_red = center_rep(R @ (np.asarray(b, dtype=np.int64) % q), q)
    kept = np.flatnonzero(np.any(a != 0, axis=1))
    if source_indices is None:
        source_indices = np.arange(n)
    return ReducedBatch(np.asarray(source_indices), R, a[kept], b_red[kept], kept,
                        two_n - len(kept))


def dataset_stats(a, q: int, zero_rows: int = 0, total_rows: int | None = None) -> DatasetStats:
    a = np.asarray(a, dtype=np.int64)
    if a.size == 0:
        raise ParameterError("empty dataset")
    n = a.shape[1]
    std_ratio = float(a.std()) / (q / math.sqrt(12))
    norm_ratio = float(np.linalg.norm(a, axis=1).mean()) / (q * math.sqrt(n / 12))
    duplicates = len(a) - len(np.unique(a, axis=0))
    if total_rows is None:
        total_rows = len(a) + zero_rows
    return DatasetStats(std_ratio, norm_ratio, int(duplicates), zero_rows / total_rows, len(a))


# -- shard files ----------------------------------------------------------

SHARD_MAGIC = b"PICR"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sIIQQI")


def shard_name(index: int) -> str:
    return f"shard-{index:08d}.picr"


def encode_shard(n: int, q: int, matrix_index: int, a, b) -> bytes:
    a = np.asarray(a, dtype="<i8").reshape(-1, n)
    rows = np.concatenate([a, np.asarray(b, dtype="<i8").reshape(-1, 1)], axis=1)
    return _HEADER.pack(SHARD_MAGIC, SHARD_VERSION, n, q, matrix_index, len(rows)) + rows.tobytes()


def decode_shard(data: bytes):
    """Returns (n, q, matrix_index, a, b); raises CorruptShardError on any mismatch."""
    if len(data) < _HEADER.size:
        raise CorruptShardError("truncated header")
    magic, version, n, q, index, count = _HEADER.unpack_from(data)
    if magic != SHARD_MAGIC or version != SHARD_VERSION:
        raise CorruptShardError(f"bad magic/version {magic!r}/{version}")
    body = data[_HEADER.size:]
    if len(body) != count * (n + 1) * 8:
        raise CorruptShardError(f"expected {count} pairs, body has {len(body)} bytes")
    rows = np.frombuffer(body, dtype="<i8").reshape(count, n + 1).astype(np.int64)
    return n, q, index, rows[:, :n], rows[:, n]


def write_atomic(path: Path, data: bytes | str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def write_text_dump(path, dataset: ReducedDataset) -> None:
    """Instance-style text: header ``n q h sigma count seed``, then a' and b' per line."""
    p = dataset.params
    lines = [f"{p.n} {p.q} 0 {p.sigma!r} {len(dataset)} {dataset.meta.get('seed', 0)}"]
    for a, b in zip(dataset.a, dataset.b):
        lines.append(" ".join(map(str, a.tolist())) + f" {int(b)}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- campaign -------------------------------------------------------------

def matrix_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _draw_matrix(instance, index, seed, sampling):
    rng = matrix_rng(seed, index)
    if sampling == "subsample":
        return subsample(instance, rng)
    # fresh samples under the same secret: the reference attack without subsampling
    p = instance.params
    A = rng.integers(0, p.q, size=(p.n, p.n), dtype=np.int64)
    b = (A @ instance.secret + sample_error(p.sigma, rng, size=p.n)) % p.q
    return SubsampleMatrix(np.full(p.n, -1), A, b)


def reduce_matrix(instance: LweInstanceSet, index: int, config: ReductionConfig, seed: int,
                  sampling: str = "subsample", backend: str | None = None):
    """Subsample, reduce and extract one campaign matrix.  Returns (batch, info)."""
    t0 = time.perf_counter()
    sub = _draw_matrix(instance, index, seed, sampling)
    q = instance.params.q
    emb = build_embedding(sub.A, config.omega, q)
    res = bkz_reduce(emb, config, backend=backend)
    batch = extract_reduced_pairs(res.basis, config.omega, sub.b, q, sub.indices)
    info = {
        "index": index,
        "pairs": len(batch.b),
        "zero_rows": batch.zero_rows_dropped,
        "seconds": time.perf_counter() - t0,
        "tours": res.tours,
        "timed_out": res.timed_out,
        "backend": res.backend,
        "indices": sub.indices.tolist(),
    }
    return batch, info


def _campaign_worker(args):
    instance, index, config, seed, sampling, shard_dir, keep_transform, backend = args
    batch, info = reduce_matrix(instance, index, config, seed, sampling, backend)
    shard_dir = Path(shard_dir)
    p = instance.params
    if keep_transform:
        np.save(shard_dir / f"shard-{index:08d}.R.npy", batch.R_kept)
    write_atomic(shard_dir / f"shard-{index:08d}.json", json.dumps(info))
    # the shard itself is the commit point for resumption
    write_atomic(shard_dir / shard_name(index), encode_shard(p.n, p.q, index, batch.a, batch.b))
    return info


def _load_shard(shard_dir: Path, index: int, n: int, q: int):
    path = shard_dir / shard_name(index)
    meta_path = shard_dir / f"shard-{index:08d}.json"
    if not path.exists():
        return None
    try:
        sn, sq, sidx, a, b = decode_shard(path.read_bytes())
        if (sn, sq, sidx) != (n, q, index):
            raise CorruptShardError(f"header mismatch ({sn}, {sq}, {sidx})")
        info = json.loads(meta_path.read_text())
        if info["pairs"] != len(b):
            raise CorruptShardError("pair count disagrees with metadata")
    except (CorruptShardError, OSError, ValueError, KeyError) as exc:
        log.warning("quarantining corrupt shard %s: %s", path.name, exc)
        os.replace(path, path.with_name(path.name + ".corrupt"))
        return None
    return a, b, info


def campaign_matrix_count(target_pairs: int, n: int) -> int:
    return -(-target_pairs // (2 * n))


def preprocess_campaign(instance: LweInstanceSet, config: ReductionConfig, target_pairs: int,
                        workers: int = 1, shard_dir=None, *, seed: int | None = None,
                        sampling: str = "subsample", fill: bool = False,
                        keep_transform: bool = False, backend: str | None = None,
                        progress=None) -> ReducedDataset:
    """Reduce ceil(target_pairs / 2n) matrices, writing one shard per matrix.

    Existing valid shards are reused, so an interrupted campaign resumes where
    it stopped.  With ``fill=True`` further matrices are reduced until at least
    ``target_pairs`` non-zero pairs exist, and the dataset is cut to exactly
    ``target_pairs``.
    """
    p = instance.params
    if target_pairs < 2 * p.n:
        raise ParameterError(f"target_pairs must be >= 2n = {2 * p.n}")
    if sampling not in ("subsample", "independent"):
        raise ParameterError(f"unknown sampling mode {sampling!r}")
    if sampling == "independent" and instance.secret is None:
        raise ParameterError("independent sampling needs the generating secret")
    seed = instance.seed if seed is None else seed
    shard_dir = Path(shard_dir) if shard_dir is not None else None
    if shard_dir is None:
        import tempfile
        shard_dir = Path(tempfile.mkdtemp(prefix="picante-shards-"))
    shard_dir.mkdir(parents=True, exist_ok=True)
    _check_campaign_header(shard_dir, p, config, seed, sampling)

    # workers never need the secret except to draw independent samples
    work_instance = instance if sampling == "independent" else instance.without_secret()

    results: dict[int, tuple] = {}
    count = campaign_matrix_count(target_pairs, p.n)
    next_index = 0
    while True:
        todo = []
        for idx in range(next_index, count):
            loaded = _load_shard(shard_dir, idx, p.n, p.q)
            if loaded is None:
                todo.append(idx)
            else:
                results[idx] = loaded
        _run_jobs(todo, work_instance, config, seed, sampling, shard_dir, keep_transform,
                  backend, workers, progress)
        for idx in todo:
            loaded = _load_shard(shard_dir, idx, p.n, p.q)
            if loaded is None:
                raise RuntimeError(f"shard {idx} missing after reduction")
            results[idx] = loaded
        next_index = count
        have = sum(len(results[i][1]) for i in range(count))
        if not fill or have >= target_pairs:
            break
        count += campaign_matrix_count(target_pairs - have, p.n)

    order = range(count)
    a = np.concatenate([results[i][0] for i in order])
    b = np.concatenate([results[i][1] for i in order])
    mid = np.concatenate([np.full(len(results[i][1]), i) for i in order])
    infos = [results[i][2] for i in order]
    if fill:
        a, b, mid = a[:target_pairs], b[:target_pairs], mid[:target_pairs]
    zero_rows = sum(info["zero_rows"] for info in infos)
    stats = dataset_stats(a, p.q, zero_rows, 2 * p.n * count)
    meta = {"seed": seed, "config": asdict(config), "matrices": count, "sampling": sampling,
            "shard_dir": str(shard_dir), "matrix_info": infos}
    return ReducedDataset(p, a, b, mid, stats, meta)


def _run_jobs(todo, instance, config, seed, sampling, shard_dir, keep_transform, backend,
              workers, progress):
    if not todo:
        return
    jobs = [(instance, i, config, seed, sampling, str(shard_dir), keep_transform, backend)
            for i in todo]
    if workers <= 1:
        for job in jobs:
            info = _campaign_worker(job)
            if progress:
                progress(info)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for info in pool.map(_campaign_worker, jobs):
            if progress:
                progress(info)


def _check_campaign_header(shard_dir: Path, params: LweParams, config, seed, sampling):
    header = {"n": params.n, "q": params.q, "seed": seed, "sampling": sampling,
              "config": asdict(config)}
    path = shard_dir / "campaign.json"
    if path.exists():
        existing = json.loads(path.read_text())
        if existing != header:
            raise ParameterError(f"{shard_dir} holds a different campaign: {existing}")
    else:
        write_atomic(path, json.dumps(header, sort_keys=True))


def load_dataset(shard_dir, params: LweParams, limit: int | None = None) -> ReducedDataset:
    """All complete shards in ``shard_dir`` in matrix-index order."""
    shard_dir = Path(shard_dir)
    indices = sorted(int(p.name[6:14]) for p in shard_dir.glob("shard-*.picr"))
    parts = [(_load_shard(shard_dir, i, params.n, params.q), i) for i in indices]
    parts = [(x, i) for x, i in parts if x is not None]
    if not parts:
        raise ParameterError(f"no shards in {shard_dir}")
    a = np.concatenate([x[0] for x, _ in parts])
    b = np.concatenate([x[1] for x, _ in parts])
    mid = np.concatenate([np.full(len(x[1]), i) for x, i in parts])
    if limit is not None:
        a, b, mid = a[:limit], b[:limit], mid[:limit]
    zero_rows = sum(x[2]["zero_rows"] for x, _ in parts)
    stats = dataset_stats(a, params.q, zero_rows, 2 * params.n * len(parts))
    return ReducedDataset(params, a, b, mid, stats, {"matrices": len(parts)})
