"""Fault localization from the corrupted model alone.

Each block's residual contribution is scaled by a set of factors around 1
and the resulting change in loss is recorded. A healthy block shifts the
loss a little; a block carrying a corrupted weight amplifies or suppresses
the corruption and moves the loss a lot. The block sensitivity score is the
sum of absolute loss changes, and the highest-scoring block is reported.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .evaluation import cross_entropy
from .model import ModelState, embed, check_tokens, run_blocks, unembed, with_alpha

DEFAULT_ALPHAS = (0.6, 0.7, 0.8, 0.9, 1.1, 1.2, 1.3, 1.4)


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingSet:
    values: tuple[float, ...] = DEFAULT_ALPHAS

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("scaling set is empty")
        if any(not (v > 0 and math.isfinite(v)) for v in vals):
            raise ValueError("scaling values must be finite and > 0")
        if 1.0 in vals:
            raise ValueError("1.0 is the nominal scale and cannot be in the scaling set")
        if len(set(vals)) != len(vals):
            raise ValueError("duplicate scaling values")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


@dataclass
class SensitivityReport:
    base_loss: float
    alphas: tuple[float, ...]
    delta_loss: np.ndarray  # (n_blocks, len(alphas))
    bss: np.ndarray
    suspected_block: int
    input_set_id: str
    confidence: float = float("nan")
    forward_passes: int = 0
    sweep: Optional[list[tuple[float, float]]] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "base_loss": self.base_loss,
            "alphas": list(self.alphas),
            "delta_loss": [[float(x) for x in row] for row in self.delta_loss],
            "bss": [float(x) for x in self.bss],
            "suspected_block": self.suspected_block,
            "input_set_id": self.input_set_id,
            "confidence_max_over_median": self.confidence,
            "forward_passes": self.forward_passes,
        }


def block_sensitivity(delta_row: Sequence[float]) -> float:
    """Sum of |delta loss| in scaling-set order."""
    s = 0.0
    for d in delta_row:
        s += abs(float(d))
    return s


def argmax_block(scores: Sequence[float]) -> int:
    """Highest score wins, lowest index on ties; NaN counts as +inf."""
    best, best_v = 0, -math.inf
    for i, v in enumerate(scores):
        v = math.inf if math.isnan(v) else v
        if v > best_v:
            best, best_v = i, v
    return best


class LossProbe:
    """Loss of ``m`` on ``X`` under single-block alpha overrides.

    The residual stream entering each block is cached from one nominal
    forward pass, so probing block ``l`` only recomputes blocks ``l..n-1``.
    The cached path is bit-identical to a full forward pass.
    """

    def __init__(self, m: ModelState, X, batch_size: int = 64):
        tokens = np.asarray(X.tokens)
        if tokens.size == 0 or len(tokens) == 0:
            raise EmptyInputError("input set is empty")
        self.m = m
        self.targets = np.asarray(X.targets)
        self.batch_size = batch_size
        self.forward_passes = 0
        self._lock = threading.Lock()
        self._chunks = []
        for i in range(0, len(tokens), batch_size):
            toks = check_tokens(m.config, tokens[i : i + batch_size])
            h0 = embed(m, toks)
            hidden = [h0]
            h = run_blocks(m, h0, block_outputs=hidden)
            self._chunks.append((hidden, unembed(m, h)))
        self.forward_passes += 1
        self.base_loss = self._loss([lg for _, lg in self._chunks])

    def _loss(self, logit_chunks) -> float:
        return cross_entropy(np.concatenate(logit_chunks, axis=0), self.targets)

    def loss(self, block: int, alpha: float) -> float:
        if alpha == self.m.alpha[block]:
            return self.base_loss
        probe = with_alpha(self.m, block, alpha)
        out = [unembed(probe, run_blocks(probe, hidden[block], start=block)) for hidden, _ in self._chunks]
        with self._lock:
            self.forward_passes += 1
        return self._loss(out)

    def delta(self, block: int, alpha: float) -> float:
        return self.loss(block, alpha) - self.base_loss


def delta_loss(m: ModelState, block: int, alpha: float, X) -> float:
    """Loss with block ``block`` scaled to ``alpha`` minus the nominal loss."""
    if not 0 <= block < m.n_blocks:
        raise IndexError(f"block {block} out of range")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    return LossProbe(m, X).delta(block, alpha)


def sweep_grid(lo: float = 0.2, hi: float = 1.8, step: float = 0.1) -> list[float]:
    if not (0 < lo < hi and step > 0 and math.isfinite(hi)):
        raise ValueError(f"degenerate sweep range [{lo}, {hi}] step {step}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def alpha_sweep(
    m: ModelState,
    block: int,
    X,
    lo: float = 0.2,
    hi: float = 1.8,
    step: float = 0.1,
    probe: Optional[LossProbe] = None,
) -> list[tuple[float, float]]:
    """Dense (alpha, delta loss) curve for one block."""
    grid = sweep_grid(lo, hi, step)
    if not 0 <= block < m.n_blocks:
        raise IndexError(f"block {block} out of range")
    probe = probe or LossProbe(m, X)
    return [(a, probe.delta(block, a)) for a in grid]


def localize_self(
    m: ModelState,
    X,
    A: ScalingSet = ScalingSet(),
    workers: int = 1,
    sweep_block: Optional[int] = None,
) -> SensitivityReport:
    """Score every block by residual-scaling sensitivity; return the report.

    ``m`` is never modified: every probe uses its own alpha-override copy,
    so the nominal scaling is in force again once the sweep returns.
    """
    if not isinstance(A, ScalingSet):
        A = ScalingSet(tuple(A))
    probe = LossProbe(m, X)
    cells = [(b, a) for b in range(m.n_blocks) for a in A.values]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            deltas = list(ex.map(lambda c: probe.delta(*c), cells))
    else:
        deltas = [probe.delta(b, a) for b, a in cells]
    grid = np.array(deltas, dtype=np.float64).reshape(m.n_blocks, len(A))
    bss = np.array([block_sensitivity(row) for row in grid])
    suspected = argmax_block(bss)
    finite = bss[np.isfinite(bss)]
    median = float(np.median(finite)) if finite.size else float("nan")
    top = float(bss[suspected])
    confidence = top / median if median > 0 else float("inf")
    sweep = alpha_sweep(m, sweep_block, X, probe=probe) if sweep_block is not None else None
    return SensitivityReport(
        base_loss=probe.base_loss,
        alphas=A.values,
        delta_loss=grid,
        bss=bss,
        suspected_block=suspected,
        input_set_id=getattr(X, "set_id", "inputs"),
        confidence=confidence,
        forward_passes=probe.forward_passes,
        sweep=sweep,
    )
