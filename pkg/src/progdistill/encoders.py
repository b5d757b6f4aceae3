"""Toy text encoders: hashed tokens, residual tanh blocks, mean pooling.

Each block updates every token vector with
``h <- h + tanh(h W + m U + (h * m) V + b)`` where ``m`` is a context
mean. The context terms are the only place tokens see each other. In a
dual-encoder tower ``m`` is the sequence mean; in the cross encoder the
query side reads the passage mean and vice versa, so the elementwise
product is a direct query/passage interaction.
"""
from __future__ import annotations

import copy
import hashlib
import re
import struct
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PAD_ID = 0
SEP_ID = 1
NUM_RESERVED = 2

_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    vocab_size: int = 4096
    max_query_len: int = 32
    max_passage_len: int = 144
    seed: int = 0
    share_towers: bool = False
    init_scale: float = 0.5

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "max_query_len", "max_passage_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size <= NUM_RESERVED:
            raise ValueError(f"vocab_size must exceed {NUM_RESERVED} reserved ids")

    @property
    def max_joint_len(self) -> int:
        return self.max_query_len + 1 + self.max_passage_len


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    original_length: int

    def __len__(self) -> int:
        return len(self.ids)


def token_hash(token: str, vocab_size: int) -> int:
    """blake2b-64 of the UTF-8 token, folded into the non-reserved id range."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return NUM_RESERVED + int.from_bytes(digest, "little") % (vocab_size - NUM_RESERVED)


def tokenize(text: str, max_len: int, vocab_size: int = 4096) -> TokenSequence:
    """Lowercase, split on non-alphanumeric runs, hash, truncate."""
    text = unicodedata.normalize("NFC", text).casefold()
    words = [w for w in _SPLIT.split(text) if w]
    if not words:
        return TokenSequence((PAD_ID,), 0)
    ids = tuple(token_hash(w, vocab_size) for w in words[:max_len])
    return TokenSequence(ids, len(words))


def join_pair(q: TokenSequence, p: TokenSequence, max_len: int) -> TokenSequence:
    """``[q ; SEP ; p]`` cut to ``max_len``, trimming the passage side first."""
    room = max_len - 1
    pq, pp = list(q.ids), list(p.ids)
    if len(pq) + len(pp) > room:
        pp = pp[: max(0, room - len(pq))]
        pq = pq[:room - len(pp)]
    return TokenSequence(tuple(pq) + (SEP_ID,) + tuple(pp), q.original_length + p.original_length + 1)


class Tower:
    """One encoder stack: embedding, residual blocks, output projection."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, prefix: str):
        d = cfg.hidden_dim
        s = cfg.init_scale
        self.params: dict[str, Tensor] = {
            f"{prefix}.embed": Tensor(rng.normal(0, s, (cfg.vocab_size, d)), True),
        }
        for layer in range(cfg.num_layers):
            self.params[f"{prefix}.l{layer}.w"] = Tensor(rng.normal(0, s / np.sqrt(d), (d, d)), True)
            self.params[f"{prefix}.l{layer}.u"] = Tensor(rng.normal(0, s / np.sqrt(d), (d, d)), True)
            self.params[f"{prefix}.l{layer}.v"] = Tensor(rng.normal(0, s / np.sqrt(d), (d, d)), True)
            self.params[f"{prefix}.l{layer}.b"] = Tensor(np.zeros(d), True)
        self.params[f"{prefix}.out"] = Tensor(rng.normal(0, 1.0 / np.sqrt(d), (d, d)), True)
        for name, t in self.params.items():
            t.name = name
        self.prefix = prefix
        self.num_layers = cfg.num_layers

    def _p(self, key: str) -> Tensor:
        return self.params[f"{self.prefix}.{key}"]

    def forward_pooled(self, seqs: Sequence[TokenSequence], split: Sequence[int] | None = None
                       ) -> tuple[Tensor, Tensor]:
        """Return (pooled block output, projected output), both ``(B, d)``.

        Without ``split`` every token's context is its own sequence mean.
        With ``split[j]`` (tokens in the first segment of sequence ``j``) the
        tokens of each segment take the other segment's mean as context.
        """
        lengths = np.fromiter((len(s) for s in seqs), dtype=np.intp, count=len(seqs))
        ids = np.fromiter((i for s in seqs for i in s.ids), dtype=np.intp, count=int(lengths.sum()))
        offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        ctx_lengths, ctx_rows = _context_segments(lengths, split)
        ctx_offsets = np.concatenate(([0], np.cumsum(ctx_lengths)[:-1]))
        h = nx.take_rows(self._p("embed"), ids)
        for layer in range(self.num_layers):
            m = nx.take_rows(nx.segment_mean(h, ctx_offsets, ctx_lengths), ctx_rows)
            z = (h @ self._p(f"l{layer}.w") + m @ self._p(f"l{layer}.u")
                 + (h * m) @ self._p(f"l{layer}.v") + self._p(f"l{layer}.b"))
            h = h + nx.tanh(z)
        pooled = nx.segment_mean(h, offsets, lengths)
        return pooled, pooled @ self._p("out")

    def forward(self, seqs: Sequence[TokenSequence], split: Sequence[int] | None = None) -> Tensor:
        return self.forward_pooled(seqs, split)[1]


def _context_segments(lengths: np.ndarray, split) -> tuple[np.ndarray, np.ndarray]:
    """Lengths of the averaging segments, and for each token the segment it reads."""
    if split is None:
        return lengths, np.repeat(np.arange(len(lengths)), lengths)
    seg_lengths, rows = [], []
    for n, a in zip(lengths.tolist(), split):
        base = len(seg_lengths)
        b = n - a
        if a <= 0 or b <= 0:
            seg_lengths.append(n)
            rows.extend([base] * n)
        else:
            seg_lengths.extend((a, b))
            rows.extend([base + 1] * a + [base] * b)
    return np.asarray(seg_lengths, dtype=np.intp), np.asarray(rows, dtype=np.intp)


class _Model:
    config: EncoderConfig
    kind: str

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def copy(self):
        return copy.deepcopy(self)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


class DualEncoder(_Model):
    kind = "dual_encoder"

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.query_tower = Tower(config, rng, "query")
        self.passage_tower = self.query_tower if config.share_towers else Tower(config, rng, "passage")

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.query_tower.params)
        if self.passage_tower is not self.query_tower:
            out.update(self.passage_tower.params)
        return out

    def encode_queries(self, seqs: Sequence[TokenSequence]) -> Tensor:
        return self.query_tower.forward(seqs)

    def encode_passages(self, seqs: Sequence[TokenSequence]) -> Tensor:
        return self.passage_tower.forward(seqs)


class CrossEncoder(_Model):
    kind = "cross_encoder"

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.joint_tower = Tower(config, rng, "joint")
        d = config.hidden_dim
        self.projection = Tensor(rng.normal(0, 1.0 / np.sqrt(d), d), True, name="projection")

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.joint_tower.params)
        out["projection"] = self.projection
        return out

    def score_pairs(self, queries: Sequence[TokenSequence], passages: Sequence[TokenSequence]) -> Tensor:
        """Scores ``w . E_ce([q; SEP; p])`` for aligned query/passage lists."""
        joint = [join_pair(q, p, self.config.max_joint_len) for q, p in zip(queries, passages)]
        split = [min(len(q), self.config.max_joint_len - 1) + 1 for q in queries]
        return self.joint_tower.forward(joint, split) @ nx.reshape(self.projection, (-1, 1))


def encode(tower: Tower, seq: TokenSequence) -> Tensor:
    return nx.reshape(tower.forward([seq]), (-1,))


def score_de(model: DualEncoder, q: TokenSequence, p: TokenSequence) -> Tensor:
    return nx.dot(encode(model.query_tower, q), encode(model.passage_tower, p))


def score_ce(model: CrossEncoder, q: TokenSequence, p: TokenSequence) -> Tensor:
    return nx.reshape(model.score_pairs([q], [p]), ())


def encode_corpus(model: DualEncoder, passages: Sequence[TokenSequence],
                  threads: int = 1, chunk: int = 256) -> np.ndarray:
    """Passage embeddings, row i for passage i; identical for any thread count."""
    if len(passages) == 0:
        raise ValueError("cannot encode an empty corpus")
    blocks = [passages[i:i + chunk] for i in range(0, len(passages), chunk)]

    def run(block):
        with nx.no_grad():
            return model.encode_passages(block).data

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return np.vstack(parts)


def encode_query_batch(model: DualEncoder, queries: Sequence[TokenSequence], chunk: int = 256) -> np.ndarray:
    with nx.no_grad():
        return np.vstack([model.encode_queries(queries[i:i + chunk]).data
                          for i in range(0, len(queries), chunk)])


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PRODCKPT"
VERSION = 1
_KINDS = {"dual_encoder": 0, "cross_encoder": 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: DualEncoder | CrossEncoder, path: str | Path) -> None:
    """Write header + named little-endian float64 blocks."""
    cfg = model.config
    out = bytearray(MAGIC)
    out += struct.pack("<IB", VERSION, _KINDS[model.kind])
    out += struct.pack("<qqqqqq?d", cfg.num_layers, cfg.hidden_dim, cfg.vocab_size,
                       cfg.max_query_len, cfg.max_passage_len, cfg.seed,
                       cfg.share_towers, cfg.init_scale)
    params = model.parameters()
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = params[name].data
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> DualEncoder | CrossEncoder:
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(buf: bytes, path) -> DualEncoder | CrossEncoder:
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, kind = struct.unpack_from("<IB", buf, pos)
    pos += 5
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if kind not in _KINDS.values():
        raise CheckpointError(f"{path}: unknown model kind {kind}")
    head = struct.Struct("<qqqqqq?d")
    vals = head.unpack_from(buf, pos)
    pos += head.size
    names = [f.name for f in fields(EncoderConfig)]
    cfg = EncoderConfig(**dict(zip(names, vals)))
    model = DualEncoder(cfg) if kind == 0 else CrossEncoder(cfg)
    params = model.parameters()
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    seen = set()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        if name not in params or params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: unexpected parameter block {name!r} {shape}")
        params[name].data[...] = arr
        seen.add(name)
    if seen != set(params):
        raise CheckpointError(f"{path}: missing parameter blocks {sorted(set(params) - seen)}")
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return model


def config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
