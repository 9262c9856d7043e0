"""Fine-tuning-free recovery.

Without a reference model the suspected block's residual contribution is
attenuated (zeroed by default); weight bits are left alone. With a reference
model the tensors holding localized flips are copied back from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .diff import LocalizationResult
from .evaluation import EvalResult, SyntheticTaskSet, evaluate
from .model import ModelState, with_alpha

RESIDUAL_ZEROING = "residual-zeroing"
RESIDUAL_ATTENUATION = "residual-attenuation"
TENSOR_RESTORATION = "tensor-restoration"
HIGHER_BETTER = "higher-better"
LOWER_BETTER = "lower-better"


class RecoveryError(ValueError):
    pass


def compute_recovery(
    baseline: float, corrupted: float, recovered: float, direction: str = HIGHER_BETTER
) -> float:
    """Share of the lost performance won back, in percent.

    ``(recovered - corrupted) / (baseline - corrupted) * 100``. The ratio is
    invariant to negating all three values, so the same expression serves
    accuracy (higher is better) and loss (lower is better).
    """
    if direction not in (HIGHER_BETTER, LOWER_BETTER):
        raise ValueError(f"unknown direction {direction!r}")
    if baseline == corrupted:
        raise ZeroDivisionError("baseline equals corrupted; nothing was lost")
    return (recovered - corrupted) / (baseline - corrupted) * 100.0


@dataclass(frozen=True)
class RecoveryOutcome:
    mode: str
    baseline_metric: float
    corrupted_metric: float
    recovered_metric: float
    recovery_percentage: float
    metric: str = "loss"
    direction: str = LOWER_BETTER

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def recover_self(m: ModelState, block: int, attenuation: float = 0.0) -> ModelState:
    """Scale block ``block``'s residual contribution by ``attenuation`` in [0, 1)."""
    if not 0 <= block < m.n_blocks:
        raise IndexError(f"block {block} out of range")
    if not 0.0 <= attenuation < 1.0:
        raise RecoveryError(f"attenuation must be in [0, 1), got {attenuation}")
    return with_alpha(m, block, attenuation)


def recover_diff(
    faulty: ModelState,
    clean: ModelState,
    result: LocalizationResult,
    granularity: str = "tensor",
) -> ModelState:
    """Copy localized tensors (or just the flipped elements) from ``clean``.

    ``granularity="tensor"`` replaces every tensor with a finding wholesale;
    ``"element"`` patches only the listed elements.
    """
    if not result.bit_findings:
        raise RecoveryError("localization result has no bit findings")
    if granularity not in ("tensor", "element"):
        raise ValueError(f"unknown granularity {granularity!r}")
    by_tensor: dict[str, list[int]] = {}
    for f in result.bit_findings:
        if f.tensor_name not in faulty.tensors or f.tensor_name not in clean.tensors:
            raise RecoveryError(f"finding references unknown tensor {f.tensor_name!r}")
        by_tensor.setdefault(f.tensor_name, []).append(f.element_index)
    updates = {}
    for name, elems in by_tensor.items():
        if granularity == "tensor":
            updates[name] = clean.tensors[name]
        else:
            data = faulty.tensors[name].data.copy()
            idx = np.array(sorted(set(elems)))
            data[idx] = clean.tensors[name].data[idx]
            updates[name] = faulty.tensors[name].replace_data(data)
    return faulty.with_tensors(updates)


def attenuation_sweep(
    m: ModelState,
    block: int,
    tasks: SyntheticTaskSet,
    values: Iterable[float] = tuple(round(0.1 * i, 1) for i in range(10)),
) -> tuple[float, list[tuple[float, float]]]:
    """Loss at each attenuation value; returns ``(best_value, curve)``."""
    curve = [(a, evaluate(recover_self(m, block, a), tasks).loss) for a in values]
    best = min(curve, key=lambda p: (np.nan_to_num(p[1], nan=np.inf), p[0]))[0]
    return best, curve


def outcome(
    mode: str,
    baseline: EvalResult,
    corrupted: EvalResult,
    recovered: EvalResult,
    metric: str = "loss",
) -> RecoveryOutcome:
    direction = LOWER_BETTER if metric == "loss" else HIGHER_BETTER
    b, c, r = (getattr(x, metric) for x in (baseline, corrupted, recovered))
    try:
        pct = compute_recovery(b, c, r, direction)
    except ZeroDivisionError:
        pct = float("nan")
    return RecoveryOutcome(mode, b, c, r, pct, metric, direction)


def self_mode(attenuation: float) -> str:
    return RESIDUAL_ZEROING if attenuation == 0 else RESIDUAL_ATTENUATION


def evaluate_recovery(
    clean: Optional[ModelState],
    corrupted: ModelState,
    recovered: ModelState,
    tasks: SyntheticTaskSet,
    mode: str,
    metric: str = "loss",
) -> RecoveryOutcome:
    base = evaluate(clean, tasks) if clean is not None else None
    corr = evaluate(corrupted, tasks)
    rec = evaluate(recovered, tasks)
    if base is None:
        return RecoveryOutcome(mode, float("nan"), getattr(corr, metric), getattr(rec, metric), float("nan"), metric)
    return outcome(mode, base, corr, rec, metric)
