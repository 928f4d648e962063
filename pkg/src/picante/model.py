"""Encoder-decoder transformer predicting b' tokens from a' tokens, plus a cheating oracle.

Layout: token + position embeddings, ``enc_layers`` encoder layers, a linear
projection to the decoder width, one decoder layer applied
``dec_shared_iterations`` times behind a per-token copy gate, a second
decoder layer and a linear head.  Decoder inputs are ``[BOS, b_high]``;
position 0 predicts the high digit of b and position 1 the low digit.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoding import EncodingConfig, decode_value, encode_inputs, encode_outputs, manifest_hash
from .lwe import ParameterError, sample_error

OUTPUT_LEN = 2


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_input_len: int
    enc_embed_dim: int = 256
    dec_embed_dim: int = 128
    enc_layers: int = 1
    dec_shared_iterations: int = 8
    enc_heads: int = 4
    dec_heads: int = 4
    cross_heads: int = 4
    ffn_mult: int = 4
    max_output_len: int = OUTPUT_LEN
    seed: int = 0

    def __post_init__(self):
        if self.enc_embed_dim % self.enc_heads:
            raise ParameterError("enc_embed_dim must be divisible by enc_heads")
        if self.dec_embed_dim % self.dec_heads or self.dec_embed_dim % self.cross_heads:
            raise ParameterError("dec_embed_dim must be divisible by dec_heads and cross_heads")
        if self.dec_shared_iterations < 1:
            raise ParameterError("dec_shared_iterations must be >= 1")
        if self.enc_layers < 1 or self.max_input_len < 1 or self.vocab_size < 1:
            raise ParameterError("enc_layers, max_input_len and vocab_size must be >= 1")

    @classmethod
    def full_scale(cls, vocab_size: int, max_input_len: int, **kw) -> "ModelConfig":
        return cls(vocab_size, max_input_len, enc_embed_dim=1024, dec_embed_dim=512, **kw)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-5
    warmup_steps: int = 1000
    warmup_start_lr: float = 1e-8
    epoch_size: int = 2_000_000
    reshuffle_period: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ParameterError("warmup_steps must be >= 0")
        if self.epoch_size < 1 or self.reshuffle_period < 1:
            raise ParameterError("epoch_size and reshuffle_period must be >= 1")

    def lr_at(self, step: int) -> float:
        """Linear warmup from warmup_start_lr to lr, then constant."""
        if step >= self.warmup_steps:
            return self.lr
        return self.warmup_start_lr + step / self.warmup_steps * (self.lr - self.warmup_start_lr)


class TrainingDivergedError(RuntimeError):
    pass


# -- layers ---------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, q_dim: int, kv_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(q_dim, q_dim)
        self.k = nn.Linear(kv_dim, q_dim)
        self.v = nn.Linear(kv_dim, q_dim)
        self.out = nn.Linear(q_dim, q_dim)

    def forward(self, x, mem, causal=False):
        """Returns (output, weights) with weights of shape (batch, heads, Lq, Lk)."""
        bsz, lq, dim = x.shape
        lk = mem.shape[1]
        hd = dim // self.heads
        q = self.q(x).view(bsz, lq, self.heads, hd).transpose(1, 2)
        k = self.k(mem).view(bsz, lk, self.heads, hd).transpose(1, 2)
        v = self.v(mem).view(bsz, lk, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if causal:
            mask = torch.ones(lq, lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        weights = scores.softmax(-1)
        y = (weights @ v).transpose(1, 2).reshape(bsz, lq, dim)
        return self.out(y), weights


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int):
        super().__init__(nn.Linear(dim, mult * dim), nn.ReLU(), nn.Linear(mult * dim, dim))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, mult):
        super().__init__()
        self.norm1, self.norm2 = nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.attn = Attention(dim, dim, heads)
        self.ffn = FeedForward(dim, mult)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)[0]
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, self_heads, cross_heads, mult):
        super().__init__()
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.self_attn = Attention(dim, dim, self_heads)
        self.cross_attn = Attention(dim, dim, cross_heads)
        self.ffn = FeedForward(dim, mult)

    def forward(self, x, mem):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, causal=True)[0]
        y, cross = self.cross_attn(self.norm2(x), mem)
        x = x + y
        return x + self.ffn(self.norm3(x)), cross


class CopyGate(nn.Module):
    """Per-token scalar gate: out = g * processed + (1 - g) * previous."""

    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Linear(dim, 1)

    def forward(self, prev, processed):
        g = torch.sigmoid(self.proj(prev))
        return g * processed + (1 - g) * prev


class Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        de, dd = cfg.enc_embed_dim, cfg.dec_embed_dim
        self.enc_tok = nn.Embedding(cfg.vocab_size, de)
        self.enc_pos = nn.Embedding(cfg.max_input_len, de)
        self.encoder = nn.ModuleList(EncoderLayer(de, cfg.enc_heads, cfg.ffn_mult)
                                     for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(de)
        self.enc_to_dec = nn.Linear(de, dd)
        self.dec_tok = nn.Embedding(cfg.vocab_size, dd)
        self.dec_pos = nn.Embedding(cfg.max_output_len, dd)
        self.shared = DecoderLayer(dd, cfg.dec_heads, cfg.cross_heads, cfg.ffn_mult)
        self.gate = CopyGate(dd)
        self.second = DecoderLayer(dd, cfg.dec_heads, cfg.cross_heads, cfg.ffn_mult)
        self.dec_norm = nn.LayerNorm(dd)
        self.head = nn.Linear(dd, cfg.vocab_size)
        self._init(gen)

    def _init(self, gen):
        for name, p in self.named_parameters():
            if p.dim() > 1:
                bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                with torch.no_grad():
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
            elif "norm" not in name:
                with torch.no_grad():
                    p.zero_()

    def encode(self, src):
        if src.shape[1] > self.cfg.max_input_len:
            raise ParameterError(f"input length {src.shape[1]} exceeds {self.cfg.max_input_len}")
        pos = torch.arange(src.shape[1], device=src.device)
        x = self.enc_tok(src) + self.enc_pos(pos)
        for layer in self.encoder:
            x = layer(x)
        return self.enc_to_dec(self.enc_norm(x))

    def decode(self, mem, tgt_in):
        """Returns (logits, cross-attention weights of the first shared iteration)."""
        if tgt_in.shape[1] > self.cfg.max_output_len:
            raise ParameterError("decoder input too long")
        pos = torch.arange(tgt_in.shape[1], device=tgt_in.device)
        x = self.dec_tok(tgt_in) + self.dec_pos(pos)
        first_cross = None
        for _ in range(self.cfg.dec_shared_iterations):
            y, cross = self.shared(x, mem)
            if first_cross is None:
                first_cross = cross
            x = self.gate(x, y)
        x, _ = self.second(x, mem)
        return self.head(self.dec_norm(x)), first_cross

    def forward(self, src, tgt_in):
        return self.decode(self.encode(src), tgt_in)[0]


def decoder_inputs(targets: torch.Tensor, bos: int) -> torch.Tensor:
    """Teacher-forcing decoder input [BOS, first target] for (batch, 2) targets."""
    bos_col = torch.full_like(targets[:, :1], bos)
    return torch.cat([bos_col, targets[:, :-1]], dim=1)


def loss_fn(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over output positions and batch."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


# -- oracle contract ------------------------------------------------------

class ModelOracle(Protocol):
    encoding: EncodingConfig

    def predict(self, inputs: np.ndarray) -> np.ndarray: ...

    def logits(self, inputs: np.ndarray, partial: np.ndarray) -> np.ndarray: ...

    def cross_attention_scores(self, inputs: np.ndarray) -> np.ndarray: ...


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None], True
    return ids, False


class TransformerOracle:
    """Wraps a :class:`Seq2Seq` as a :class:`ModelOracle` (eval mode, no grad)."""

    def __init__(self, model: Seq2Seq, encoding: EncodingConfig, batch_size: int = 512):
        self.model = model
        self.encoding = encoding
        self.batch_size = batch_size

    def _chunks(self, ids):
        for i in range(0, len(ids), self.batch_size):
            yield torch.from_numpy(ids[i:i + self.batch_size])

    @torch.no_grad()
    def predict(self, inputs) -> np.ndarray:
        """Greedy decode.  Step 1 picks among high-digit ids, step 2 among
        low-digit ids; ties go to the lowest id."""
        ids, single = _as_batch(inputs)
        self.model.eval()
        cfg = self.encoding
        out = []
        for src in self._chunks(ids):
            mem = self.model.encode(src)
            tgt = torch.full((len(src), 1), cfg.bos, dtype=torch.long)
            logits, _ = self.model.decode(mem, tgt)
            high = logits[:, 0, :cfg.k].argmax(-1)
            tgt = torch.cat([tgt, high[:, None]], dim=1)
            logits, _ = self.model.decode(mem, tgt)
            low = logits[:, 1, cfg.k:cfg.k + cfg.n_low].argmax(-1) + cfg.k
            out.append(torch.stack([high, low], dim=1).numpy())
        res = np.concatenate(out)
        return res[0] if single else res

    @torch.no_grad()
    def logits(self, inputs, partial) -> np.ndarray:
        """Logits (K x V) for decoder input [BOS] + partial (teacher forced)."""
        ids, single = _as_batch(inputs)
        partial = np.asarray(partial, dtype=np.int64).reshape(len(ids), -1)
        tgt = np.concatenate([np.full((len(ids), 1), self.encoding.bos), partial], axis=1)
        self.model.eval()
        out = self.model(torch.from_numpy(ids), torch.from_numpy(tgt[:, :OUTPUT_LEN])).numpy()
        return out[0] if single else out

    @torch.no_grad()
    def cross_attention_scores(self, inputs) -> np.ndarray:
        """First decoder layer, first output query, weights summed over heads."""
        ids, single = _as_batch(inputs)
        self.model.eval()
        out = []
        for src in self._chunks(ids):
            mem = self.model.encode(src)
            tgt = torch.full((len(src), 1), self.encoding.bos, dtype=torch.long)
            _, cross = self.model.decode(mem, tgt)
            out.append(cross[:, :, 0, :].sum(1).numpy())
        res = np.concatenate(out)
        return res[0] if single else res


class CheatOracle:
    """Answers with a.s mod q from a hidden secret; a test double for recovery.

    Inputs are decoded with the bucket midpoint rule, so answers are exact
    whenever the encoding is lossless (r = 1).
    """

    LOGIT_MARGIN = 10.0

    def __init__(self, secret, q: int, encoding: EncodingConfig, *, noise_sigma: float = 0.0,
                 attention: str = "secret", rng: np.random.Generator | None = None):
        if attention not in ("secret", "uniform"):
            raise ParameterError(f"unknown attention mode {attention!r}")
        self._secret = np.asarray(secret, dtype=np.int64)
        self.q = q
        self.encoding = encoding
        self.noise_sigma = noise_sigma
        self.attention = attention
        self.rng = rng or np.random.default_rng(0)
        self.heads = 4

    def _values(self, ids):
        cfg = self.encoding
        return decode_value(ids[:, 0::2], ids[:, 1::2] - cfg.k, cfg)

    def predict(self, inputs) -> np.ndarray:
        ids, single = _as_batch(inputs)
        b = self._values(ids) @ self._secret
        if self.noise_sigma > 0:
            b = b + sample_error(self.noise_sigma, self.rng, size=b.shape)
        out = encode_outputs(b % self.q, self.encoding)
        return out[0] if single else out

    def logits(self, inputs, partial=None) -> np.ndarray:
        ids, single = _as_batch(inputs)
        target = self.predict(ids)
        out = np.zeros((len(ids), OUTPUT_LEN, self.encoding.vocab_size))
        for pos in range(OUTPUT_LEN):
            out[np.arange(len(ids)), pos, target[:, pos]] = self.LOGIT_MARGIN
        return out[0] if single else out

    def cross_attention_scores(self, inputs) -> np.ndarray:
        ids, single = _as_batch(inputs)
        length = ids.shape[1]
        row = np.zeros(length)
        if self.attention == "uniform":
            row[:] = self.heads / length
        else:
            ones = np.flatnonzero(self._secret)
            row[2 * ones] = self.heads / len(ones)
        out = np.tile(row, (len(ids), 1))
        return out[0] if single else out


# -- training -------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    examples: int
    mean_loss: float
    token_accuracy: float
    loss_curve: list[tuple[int, float]] = field(default_factory=list)


class Trainer:
    """Adam with linear warmup; data reshuffled every ``reshuffle_period`` epochs."""

    def __init__(self, model: Seq2Seq, encoding: EncodingConfig, cfg: TrainConfig):
        self.model = model
        self.encoding = encoding
        self.cfg = cfg
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_at(0), betas=cfg.betas,
                                    eps=cfg.eps)
        self.step = 0
        self.epoch = 0
        self.cursor = 0
        self._order = None
        self._rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)

    def _reshuffle(self, count):
        self._order = self._rng.permutation(count)

    def train_epoch(self, a, b, log=None) -> EpochMetrics:
        """One pass of ``epoch_size`` examples drawn from the reduced pairs (a, b)."""
        a = np.asarray(a)
        if len(a) == 0:
            raise ParameterError("empty training set")
        src_all = encode_inputs(a, self.encoding)
        tgt_all = encode_outputs(np.asarray(b), self.encoding)
        if self._order is None or len(self._order) != len(a) or \
                self.epoch % self.cfg.reshuffle_period == 0:
            self._reshuffle(len(a))
            self.cursor = 0
        self.model.train()
        cfg = self.cfg
        seen = 0
        loss_sum = correct = tokens = 0.0
        curve = []
        batch_idx = 0
        while seen < cfg.epoch_size:
            size = min(cfg.batch_size, cfg.epoch_size - seen)
            idx = np.take(self._order, np.arange(self.cursor, self.cursor + size), mode="wrap")
            self.cursor = (self.cursor + size) % len(a)
            src = torch.from_numpy(src_all[idx])
            tgt = torch.from_numpy(tgt_all[idx])
            lr = cfg.lr_at(self.step)
            for group in self.opt.param_groups:
                group["lr"] = lr
            logits = self.model(src, decoder_inputs(tgt, self.encoding.bos))
            loss = loss_fn(logits, tgt)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {self.epoch} batch {batch_idx} (lr={lr:.3g})")
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            self.step += 1
            seen += size
            loss_sum += loss.item() * size
            correct += (logits.argmax(-1) == tgt).sum().item()
            tokens += tgt.numel()
            if batch_idx % cfg.log_every == 0:
                curve.append((seen, loss.item()))
                if log:
                    log(self.epoch, batch_idx, loss.item(), lr)
            batch_idx += 1
        metrics = EpochMetrics(self.epoch, seen, loss_sum / seen, correct / tokens, curve)
        self.epoch += 1
        return metrics


@torch.no_grad()
def evaluate(oracle: ModelOracle, a, b) -> float:
    """Fraction of greedy-decoded output tokens matching the encoded b."""
    preds = oracle.predict(encode_inputs(np.asarray(a), oracle.encoding))
    target = encode_outputs(np.asarray(b), oracle.encoding)
    return float((preds == target).mean())


# -- checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"PICM"
CKPT_VERSION = 1


def save_checkpoint(path, model: Seq2Seq, encoding: EncodingConfig, meta: dict | None = None) -> None:
    cfg_blob = json.dumps({"model": asdict(model.cfg), "meta": meta or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             bytes.fromhex(manifest_hash(encoding)), struct.pack("<I", len(cfg_blob)), cfg_blob]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().to(torch.float32).contiguous().numpy()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, encoding: EncodingConfig) -> tuple[Seq2Seq, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ParameterError(f"{path} is not a checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ParameterError(f"unsupported checkpoint version {version}")
    if data[8:40].hex() != manifest_hash(encoding):
        raise ParameterError("checkpoint was trained with a different vocabulary")
    (clen,) = struct.unpack_from("<I", data, 40)
    blob = json.loads(data[44:44 + clen])
    off = 44 + clen
    model = Seq2Seq(ModelConfig(**blob["model"]))
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + nlen].decode()
        off += 2 + nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        off += size
    model.load_state_dict(state)
    return model, blob["meta"]
