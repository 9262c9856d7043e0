"""Minimal decoder-only transformer with per-block residual scaling.

Block ``i`` computes::

    u      = h + ATTN(rms(h))
    F(h)   = (u + MLP(rms(u))) - h  =  ATTN(rms(h)) + MLP(rms(u))
    h_next = h + alpha_i * F(h)

so ``alpha_i = 1`` is the ordinary pre-norm block and ``alpha_i = 0``
removes the block from the residual stream entirely. The MLP is a gated
(SwiGLU) feed-forward with ``gate``/``up``/``down`` projections.

All activations are float32. Int8 weights are dequantized on the fly; a
non-finite activation is carried forward and flagged, never raised.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

import numpy as np

from .tensor import FLOAT32, WeightTensor, digest_tensor, quantize

ATTN_PROJ = ("q", "k", "v", "o")
MLP_PROJ = ("gate", "up", "down")
SUBLAYERS = ("attn", "mlp")
SUBLAYER_TAGS = tuple(f"attn.{p}" for p in ATTN_PROJ) + tuple(f"mlp.{p}" for p in MLP_PROJ)
EMBED_TOK = "embed.tok"
EMBED_POS = "embed.pos"
UNEMBED = "unembed"
RMS_EPS = 1e-5

_BLOCK_NAME = re.compile(r"^block\.(\d+)\.(attn|mlp)\.(\w+)$")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    """Token sequence not acceptable to the model."""


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self):
        for f in ("n_blocks", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{f} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
        }


FIXTURE_CONFIG = ModelConfig(
    n_blocks=8, d_model=64, n_heads=4, d_ff=256, vocab_size=256, max_seq_len=32, seed=0
)


def block_tensor_name(block: int, tag: str) -> str:
    return f"block.{block}.{tag}"


def parse_tensor_name(name: str) -> Optional[tuple[int, str]]:
    """``"block.5.mlp.up"`` -> ``(5, "mlp.up")``; None for embeddings."""
    m = _BLOCK_NAME.match(name)
    if not m:
        return None
    return int(m.group(1)), f"{m.group(2)}.{m.group(3)}"


def tensor_schema(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes = {
        "attn.q": (d, d),
        "attn.k": (d, d),
        "attn.v": (d, d),
        "attn.o": (d, d),
        "mlp.gate": (d, ff),
        "mlp.up": (d, ff),
        "mlp.down": (ff, d),
    }
    schema = {
        EMBED_TOK: (config.vocab_size, d),
        EMBED_POS: (config.max_seq_len, d),
    }
    for i in range(config.n_blocks):
        for tag in SUBLAYER_TAGS:
            schema[block_tensor_name(i, tag)] = shapes[tag]
    schema[UNEMBED] = (d, config.vocab_size)
    return schema


def sublayer_tensor_names(block: int, sublayer: str) -> list[str]:
    proj = ATTN_PROJ if sublayer == "attn" else MLP_PROJ
    if sublayer not in SUBLAYERS:
        raise ValueError(f"unknown sublayer {sublayer!r}")
    return [block_tensor_name(block, f"{sublayer}.{p}") for p in proj]


@dataclass(frozen=True, eq=False)
class ModelState:
    config: ModelConfig
    tensors: Mapping[str, WeightTensor]
    alpha: tuple[float, ...] = ()

    def __post_init__(self):
        schema = tensor_schema(self.config)
        if set(self.tensors) != set(schema):
            missing = sorted(set(schema) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(schema))
            raise ConfigError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, shape in schema.items():
            t = self.tensors[name]
            if t.shape != shape or t.name != name:
                raise ConfigError(f"{name}: expected shape {shape}, got {t.name} {t.shape}")
        alpha = tuple(float(a) for a in self.alpha) or (1.0,) * self.config.n_blocks
        if len(alpha) != self.config.n_blocks:
            raise ConfigError(f"alpha has {len(alpha)} entries for {self.config.n_blocks} blocks")
        if any(not a >= 0 for a in alpha):
            raise ConfigError("alpha entries must be >= 0")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(
            self, "tensors", MappingProxyType({k: self.tensors[k] for k in sorted(self.tensors)})
        )

    @property
    def n_blocks(self) -> int:
        return self.config.n_blocks

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def with_tensors(self, updates: Mapping[str, WeightTensor]) -> "ModelState":
        merged = dict(self.tensors)
        for name, t in updates.items():
            if name not in merged:
                raise KeyError(name)
            merged[name] = t
        return replace(self, tensors=merged)

    def with_alpha_vector(self, alpha: Iterable[float]) -> "ModelState":
        return replace(self, alpha=tuple(alpha))

    def block_param(self, block: int, tag: str) -> np.ndarray:
        return self.tensors[block_tensor_name(block, tag)].dense


def with_alpha(m: ModelState, block: int, value: float) -> ModelState:
    """Copy of ``m`` whose residual scale differs only at ``block``."""
    if not 0 <= block < m.n_blocks:
        raise IndexError(f"block {block} out of range for {m.n_blocks} blocks")
    if not value >= 0:
        raise ValueError(f"alpha must be >= 0, got {value}")
    alpha = list(m.alpha)
    alpha[block] = float(value)
    return m.with_alpha_vector(alpha)


def reset_alpha(m: ModelState) -> ModelState:
    return m.with_alpha_vector((1.0,) * m.n_blocks)


def init_model(config: ModelConfig, dtype: str = FLOAT32) -> ModelState:
    """Seeded Gaussian initialisation (std 0.02; output projections shrunk by
    ``1/sqrt(2 n_blocks)``). ``dtype="int8"`` quantizes every tensor."""
    rng = np.random.default_rng(config.seed)
    out_std = 0.02 / np.sqrt(2 * config.n_blocks)
    tensors = {}
    for name, shape in tensor_schema(config).items():
        std = out_std if name.endswith((".attn.o", ".mlp.down")) else 0.02
        w = rng.normal(0.0, std, size=shape).astype(np.float32)
        tensors[name] = WeightTensor(name, shape, FLOAT32, w)
    if dtype == "int8":
        tensors = {k: quantize(t) for k, t in tensors.items()}
    elif dtype != FLOAT32:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return ModelState(config, tensors)


def model_digest(m: ModelState) -> str:
    """Hex SHA-256 over (name, tensor digest) pairs in canonical order.

    Covers weights only; the alpha vector is deliberately excluded.
    """
    h = hashlib.sha256()
    for name in m.names():
        h.update(name.encode())
        h.update(digest_tensor(m.tensors[name]).digest)
    return h.hexdigest()


@dataclass
class ForwardTrace:
    logits: np.ndarray
    block_outputs: list[np.ndarray] = field(default_factory=list)
    sublayer_outputs: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def nonfinite(self) -> bool:
        arrays = [self.logits, *self.block_outputs]
        arrays += [a for d in self.sublayer_outputs.values() for a in d.values()]
        return any(not np.all(np.isfinite(a)) for a in arrays)


def check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim == 1:
        toks = toks[None, :]
    if toks.ndim != 2 or toks.shape[1] == 0:
        raise InputError(f"expected (batch, seq) tokens, got shape {np.shape(tokens)}")
    if not np.issubdtype(toks.dtype, np.integer):
        raise InputError("tokens must be integers")
    if toks.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {toks.shape[1]} exceeds {config.max_seq_len}")
    if toks.min() < 0 or toks.max() >= config.vocab_size:
        raise InputError("token id out of vocabulary range")
    return toks.astype(np.int64)


def rms_norm(x: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(RMS_EPS))


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=-1, keepdims=True)


def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (np.float32(1.0) + np.exp(-x))


def attention(m: ModelState, block: int, x: np.ndarray) -> np.ndarray:
    B, T, d = x.shape
    H, dh = m.config.n_heads, m.config.head_dim

    def heads(w):
        return (x @ w).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = heads(m.block_param(block, "attn.q"))
    k = heads(m.block_param(block, "attn.k"))
    v = heads(m.block_param(block, "attn.v"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * np.float32(1.0 / np.sqrt(dh))
    scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, np.float32(-np.inf))
    ctx = _softmax(scores) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, d)
    return ctx @ m.block_param(block, "attn.o")


def mlp(m: ModelState, block: int, x: np.ndarray) -> np.ndarray:
    gate = _silu(x @ m.block_param(block, "mlp.gate"))
    return (gate * (x @ m.block_param(block, "mlp.up"))) @ m.block_param(block, "mlp.down")


def embed(m: ModelState, toks: np.ndarray) -> np.ndarray:
    T = toks.shape[1]
    return m.tensors[EMBED_TOK].dense[toks] + m.tensors[EMBED_POS].dense[:T][None]


def run_blocks(
    m: ModelState,
    h: np.ndarray,
    start: int = 0,
    block_outputs: Optional[list] = None,
    sublayer_outputs: Optional[dict] = None,
    sublayer_blocks: Optional[set[int]] = None,
    apply_alpha: bool = True,
) -> np.ndarray:
    """Run blocks ``start..n_blocks-1`` on residual stream ``h``."""
    with np.errstate(all="ignore"):
        for i in range(start, m.n_blocks):
            a = attention(m, i, rms_norm(h))
            u = h + a
            f = mlp(m, i, rms_norm(u))
            alpha = m.alpha[i] if apply_alpha else 1.0
            if alpha == 0.0:
                h_next = h.copy()
            elif alpha == 1.0:
                h_next = h + (a + f)
            else:
                h_next = h + np.float32(alpha) * (a + f)
            if sublayer_outputs is not None and (sublayer_blocks is None or i in sublayer_blocks):
                sublayer_outputs[i] = {"attn": a, "mlp": f}
            if block_outputs is not None:
                block_outputs.append(h_next)
            h = h_next
    return h


def unembed(m: ModelState, h: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        return rms_norm(h) @ m.tensors[UNEMBED].dense


def forward(
    m: ModelState,
    tokens,
    capture_hidden: bool = False,
    capture_sublayers: bool = False,
    sublayer_blocks: Optional[Iterable[int]] = None,
    apply_alpha: bool = True,
) -> ForwardTrace:
    """Full forward pass; returns logits of shape (batch, seq, vocab).

    ``capture_hidden`` records ``h_1..h_{n+1}`` (embedding output first);
    ``capture_sublayers`` records the attention and MLP outputs, optionally
    only for the blocks in ``sublayer_blocks``.
    """
    toks = check_tokens(m.config, tokens)
    h = embed(m, toks)
    block_outputs = [h] if capture_hidden else None
    subs = {} if capture_sublayers else None
    h = run_blocks(
        m,
        h,
        block_outputs=block_outputs,
        sublayer_outputs=subs,
        sublayer_blocks=set(sublayer_blocks) if sublayer_blocks is not None else None,
        apply_alpha=apply_alpha,
    )
    return ForwardTrace(
        logits=unembed(m, h),
        block_outputs=block_outputs or [],
        sublayer_outputs=subs or {},
    )


def logits(m: ModelState, tokens) -> np.ndarray:
    return forward(m, tokens).logits
