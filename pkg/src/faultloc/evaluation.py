"""Synthetic evaluation tasks, loss/accuracy metrics and cost accounting.

The task family is small enough for a toy model to fit in a few minutes on a
CPU yet leaves the fitted model with a loss far below chance, so a single
corrupted weight has room to do visible damage.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

from .model import ModelState, forward

IGNORE = -1

PAD, COPY, REVERSE, MODADD, SEP, EOS = range(6)
N_SPECIAL = 8
TASK_KINDS = ("copy", "reverse", "modadd")
_TASK_TOKEN = {"copy": COPY, "reverse": REVERSE, "modadd": MODADD}


@dataclass(frozen=True)
class SyntheticTaskSet:
    """Deterministic eval-only batch of (tokens, targets).

    Each row is one of:

    * copy:    ``COPY a1..aL SEP a1..aL EOS``
    * reverse: ``REVERSE a1..aL SEP aL..a1 EOS``
    * modadd:  ``MODADD c x0 x1 ...`` with ``x_{t+1} = (x_t + c) mod M``

    ``targets[b, t]`` is the token expected at ``t + 1`` or ``IGNORE`` where
    the next token is not determined by the prefix.
    """

    seed: int
    n_sequences: int = 64
    seq_len: int = 32
    vocab_size: int = 256
    kinds: tuple[str, ...] = TASK_KINDS

    def __post_init__(self):
        if self.vocab_size < N_SPECIAL + 8:
            raise ValueError(f"vocab_size must be >= {N_SPECIAL + 8}")
        if self.seq_len < 6 or self.n_sequences < 1:
            raise ValueError("need seq_len >= 6 and at least one sequence")
        unknown = set(self.kinds) - set(TASK_KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"unknown task kinds {sorted(unknown)}")

    @property
    def modulus(self) -> int:
        return min(16, self.vocab_size - N_SPECIAL)

    @cached_property
    def _arrays(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        T = self.seq_len
        tokens = np.full((self.n_sequences, T), PAD, dtype=np.int64)
        targets = np.full((self.n_sequences, T), IGNORE, dtype=np.int64)
        for b in range(self.n_sequences):
            kind = self.kinds[int(rng.integers(len(self.kinds)))]
            seq, scored = self._row(kind, rng)
            tokens[b] = seq[:T]
            nxt = seq[1 : T + 1]
            targets[b] = np.where(scored[1 : T + 1], nxt, IGNORE)
        tokens.flags.writeable = False
        targets.flags.writeable = False
        return tokens, targets

    def _row(self, kind: str, rng: np.random.Generator):
        T = self.seq_len
        seq = np.full(T + 1, PAD, dtype=np.int64)
        scored = np.zeros(T + 1, dtype=bool)
        if kind == "modadd":
            M = self.modulus
            c = int(rng.integers(1, M))
            x = int(rng.integers(M))
            seq[0], seq[1] = MODADD, N_SPECIAL + c
            for t in range(2, T + 1):
                seq[t] = N_SPECIAL + x
                x = (x + c) % M
            scored[3:] = True
            return seq, scored
        L = (T - 2) // 2
        body = rng.integers(N_SPECIAL, self.vocab_size, size=L)
        answer = body if kind == "copy" else body[::-1]
        row = [_TASK_TOKEN[kind], *body, SEP, *answer, EOS]
        seq[: len(row)] = row
        scored[L + 2 : len(row)] = True
        return seq, scored

    @property
    def tokens(self) -> np.ndarray:
        return self._arrays[0]

    @property
    def targets(self) -> np.ndarray:
        return self._arrays[1]

    @property
    def set_id(self) -> str:
        kinds = ",".join(self.kinds)
        return f"synthetic:seed={self.seed}:n={self.n_sequences}:T={self.seq_len}:kinds={kinds}"


def _check_shapes(logits: np.ndarray, targets: np.ndarray) -> None:
    if logits.ndim < 1 or logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} incompatible with targets {targets.shape}")
    live = targets[targets != IGNORE]
    if live.size and (live.min() < 0 or live.max() >= logits.shape[-1]):
        raise ValueError("target id outside vocabulary")


def cross_entropy(logits, targets) -> float:
    """Mean natural-log NLL over scored positions (``IGNORE`` skipped)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    _check_shapes(logits, targets)
    mask = targets != IGNORE
    if not mask.any():
        raise ValueError("no scored positions")
    z = logits[mask]
    t = targets[mask]
    with np.errstate(all="ignore"):
        zmax = np.max(z, axis=-1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=-1))
        nll = lse - z[np.arange(len(t)), t]
    return float(np.mean(nll))


def accuracy(logits, targets) -> float:
    """Fraction of scored positions whose argmax (lowest id on ties) is the target."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    _check_shapes(logits, targets)
    mask = targets != IGNORE
    if not mask.any():
        raise ValueError("no scored positions")
    pred = np.argmax(logits[mask], axis=-1)
    return float(np.mean(pred == targets[mask]))


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float


def evaluate(m: ModelState, tasks, batch_size: int = 64) -> EvalResult:
    """Loss and accuracy of ``m`` on any object with ``tokens``/``targets``."""
    toks = np.asarray(tasks.tokens)
    if getattr(tasks, "vocab_size", m.config.vocab_size) != m.config.vocab_size:
        raise ValueError(f"task vocabulary {tasks.vocab_size} != model vocabulary {m.config.vocab_size}")
    chunks = [forward(m, toks[i : i + batch_size]).logits for i in range(0, len(toks), batch_size)]
    lg = np.concatenate(chunks, axis=0)
    return EvalResult(cross_entropy(lg, tasks.targets), accuracy(lg, tasks.targets))


@dataclass
class CostLedger:
    """Work counters for one localization run.

    One comparison is one vector/tensor-level similarity for hidden states
    and activations, and one element equality test for ``element_comparisons``.
    ``forward_passes`` is reported alongside but excluded from ``total()``.
    """

    hidden_state_comparisons: int = 0
    activation_comparisons: int = 0
    hash_computations: int = 0
    element_comparisons: int = 0
    forward_passes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    COUNTERS = (
        "hidden_state_comparisons",
        "activation_comparisons",
        "hash_computations",
        "element_comparisons",
    )

    def add(self, counter: str, n: int = 1) -> None:
        if counter not in self.COUNTERS and counter != "forward_passes":
            raise KeyError(counter)
        if n < 0:
            raise ValueError("counters never decrease")
        with self._lock:
            setattr(self, counter, getattr(self, counter) + n)

    def total(self) -> int:
        return sum(getattr(self, c) for c in self.COUNTERS)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}
        d["total"] = self.total()
        return d


@dataclass(frozen=True)
class CostEstimate:
    brute: int
    staged: int

    @property
    def ratio(self) -> float:
        return self.brute / self.staged


def cost_model(n_blocks: int, tensors_per_block: int, elems_per_tensor: int) -> CostEstimate:
    """Element-level work of exhaustive diffing vs. the staged pipeline.

    Staged cost is one hidden-state comparison per block, two activation
    comparisons, three hash computations and one full tensor scan.
    """
    for v in (n_blocks, tensors_per_block, elems_per_tensor):
        if int(v) != v or v < 1:
            raise ValueError("cost model inputs must be positive integers")
    n, t, e = int(n_blocks), int(tensors_per_block), int(elems_per_tensor)
    return CostEstimate(brute=n * t * e, staged=n + 2 + 3 + e)
