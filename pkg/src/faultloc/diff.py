"""Three-stage differential localization against a clean reference.

1. Block: compare hidden states after every block; the first block whose
   divergence leaves the clean-vs-clean noise envelope is the source (a
   fault only corrupts computation from its own block onward).
2. Sublayer: compare attention and MLP outputs inside that block and keep
   the one that agrees least with the reference.
3. Weight/bit: digest each tensor of that sublayer in both models, scan only
   the mismatching tensors element-wise and XOR the stored bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .evaluation import CostLedger
from .inject import FaultManifest
from .model import (
    SUBLAYERS,
    ModelState,
    forward,
    parse_tensor_name,
    sublayer_tensor_names,
)
from .tensor import BitAddress, differing_bits, digest_tensor

COSINE = "cosine"
L2 = "l2"
ONSET = "onset"
PEAK = "max"
ENVELOPE_FACTOR = 3.0
AGGREGATIONS = ("mean", "last")


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BitFinding:
    tensor_name: str
    element_index: int
    bit_indices: tuple[int, ...]
    clean_bits: int
    faulty_bits: int

    @property
    def addresses(self) -> list[BitAddress]:
        return [BitAddress(self.tensor_name, self.element_index, b) for b in self.bit_indices]

    def to_dict(self) -> dict:
        return {
            "tensor": self.tensor_name,
            "element": self.element_index,
            "bits": list(self.bit_indices),
            "clean_bits": self.clean_bits,
            "faulty_bits": self.faulty_bits,
        }


@dataclass
class DivergenceProfile:
    cosine: list[float]
    l2: list[float]
    envelope: list[float]
    metric_used: str
    aggregation: str
    mode: str

    @property
    def per_block(self) -> list[tuple[float, float]]:
        return list(zip(self.cosine, self.l2))

    @property
    def deviation(self) -> list[float]:
        if self.metric_used == COSINE:
            return [1.0 - c for c in self.cosine]
        return list(self.l2)

    def exceeding(self) -> list[int]:
        """Blocks whose deviation is above ``ENVELOPE_FACTOR`` x the noise envelope."""
        return [
            i
            for i, (d, e) in enumerate(zip(self.deviation, self.envelope))
            if d > ENVELOPE_FACTOR * e
        ]

    def to_dict(self) -> dict:
        return {
            "metric": self.metric_used,
            "aggregation": self.aggregation,
            "mode": self.mode,
            "cosine": self.cosine,
            "l2": self.l2,
            "envelope": self.envelope,
            "exceeding": self.exceeding(),
        }


@dataclass
class LocalizationResult:
    block: Optional[int]
    sublayer: Optional[str]
    bit_findings: list[BitFinding]
    profile: DivergenceProfile
    sublayer_similarity: dict[str, float] = field(default_factory=dict)
    digest_mismatches: list[str] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)
    extra_blocks: list[int] = field(default_factory=list)
    sublayer_fallbacks: list[int] = field(default_factory=list)

    @property
    def no_fault(self) -> bool:
        return self.block is None

    @property
    def addresses(self) -> list[BitAddress]:
        return sorted(a for f in self.bit_findings for a in f.addresses)

    def to_dict(self) -> dict:
        return {
            "no_fault": self.no_fault,
            "block": self.block,
            "sublayer": self.sublayer,
            "bit_findings": [f.to_dict() for f in self.bit_findings],
            "sublayer_similarity": self.sublayer_similarity,
            "digest_mismatches": self.digest_mismatches,
            "profile": self.profile.to_dict(),
            "cost": self.ledger.to_dict(),
            "extra_blocks": self.extra_blocks,
            "sublayer_fallbacks": self.sublayer_fallbacks,
        }

    def matches(self, manifest: FaultManifest) -> bool:
        """True when block, sublayer and every flipped bit agree with ground truth."""
        if self.no_fault:
            return False
        truth = sorted(manifest.addresses)
        blocks = {r.block for r in manifest.records}
        if self.addresses != truth or self.block not in blocks:
            return False
        subs = {r.sublayer for r in manifest.records if r.block == self.block}
        return self.sublayer in subs or self.sublayer in {s.split(".")[0] for s in subs}


def _check_pair(clean: ModelState, faulty: ModelState) -> None:
    if clean.config != faulty.config:
        raise ArchitectureMismatch("clean and faulty models have different configs")
    for name in clean.names():
        a, b = clean.tensors[name], faulty.tensors[name]
        if a.dtype != b.dtype or a.shape != b.shape:
            raise ArchitectureMismatch(f"{name}: storage layout differs")


def _tokens(X) -> np.ndarray:
    toks = np.asarray(X.tokens)
    if toks.ndim == 1:
        toks = toks[None]
    if toks.size == 0:
        raise ValueError("input set is empty")
    return toks


def similarity(a: np.ndarray, b: np.ndarray, aggregation: str = "mean") -> tuple[float, float]:
    """Per-position cosine similarity and l2 distance, averaged.

    ``a``/``b`` are (batch, seq, d). ``aggregation="last"`` keeps only the
    final position. Non-finite vectors count as cosine -1 and distance inf.
    """
    if aggregation == "last":
        a, b = a[:, -1:], b[:, -1:]
    elif aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    a = a.reshape(-1, a.shape[-1]).astype(np.float64)
    b = b.reshape(-1, b.shape[-1]).astype(np.float64)
    with np.errstate(all="ignore"):
        finite = np.isfinite(a).all(axis=1) & np.isfinite(b).all(axis=1)
        num = np.sum(a * b, axis=1)
        den = np.sqrt(np.sum(a * a, axis=1)) * np.sqrt(np.sum(b * b, axis=1))
        cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
        dist = np.sqrt(np.sum((a - b) ** 2, axis=1))
    exact = np.all(a == b, axis=1)
    cos = np.where(exact, 1.0, np.clip(cos, -1.0, 1.0))
    cos = np.where(finite, cos, -1.0)
    dist = np.where(finite, dist, np.inf)
    return float(np.mean(cos)), float(np.mean(dist))


def _hidden(m: ModelState, toks, batch_size=64) -> list[np.ndarray]:
    chunks = [
        forward(m, toks[i : i + batch_size], capture_hidden=True).block_outputs
        for i in range(0, len(toks), batch_size)
    ]
    return [np.concatenate([c[j] for c in chunks]) for j in range(len(chunks[0]))]


def _sublayers(m: ModelState, toks, block: int, batch_size=64) -> dict[str, np.ndarray]:
    chunks = [
        forward(
            m, toks[i : i + batch_size], capture_sublayers=True, sublayer_blocks=[block]
        ).sublayer_outputs[block]
        for i in range(0, len(toks), batch_size)
    ]
    return {s: np.concatenate([c[s] for c in chunks]) for s in SUBLAYERS}


def _deviation(metric: str, cos: float, l2: float) -> float:
    return 1.0 - cos if metric == COSINE else l2


def localize_block(
    clean: ModelState,
    faulty: ModelState,
    X,
    metric: str = COSINE,
    mode: str = ONSET,
    aggregation: str = "mean",
    ledger: Optional[CostLedger] = None,
) -> tuple[Optional[int], DivergenceProfile]:
    """Stage 1. Returns ``(None, profile)`` when nothing leaves the envelope."""
    if metric not in (COSINE, L2) or mode not in (ONSET, PEAK):
        raise ValueError(f"bad metric/mode {metric!r}/{mode!r}")
    _check_pair(clean, faulty)
    ledger = ledger if ledger is not None else CostLedger()
    toks = _tokens(X)
    ref = _hidden(clean, toks)
    rerun = _hidden(clean, toks)
    bad = _hidden(faulty, toks)
    ledger.add("forward_passes", 3)
    cos, l2, env = [], [], []
    for i in range(clean.n_blocks):
        c, d = similarity(ref[i + 1], bad[i + 1], aggregation)
        nc, nd = similarity(ref[i + 1], rerun[i + 1], aggregation)
        cos.append(c)
        l2.append(d)
        env.append(_deviation(metric, nc, nd))
        ledger.add("hidden_state_comparisons")
    profile = DivergenceProfile(cos, l2, env, metric, aggregation, mode)
    hot = profile.exceeding()
    if not hot:
        return None, profile
    if mode == ONSET:
        return hot[0], profile
    dev = [math.inf if math.isnan(v) else v for v in profile.deviation]
    return max(hot, key=lambda i: (dev[i], -i)), profile


def localize_layer(
    clean: ModelState,
    faulty: ModelState,
    block: int,
    X,
    ledger: Optional[CostLedger] = None,
    aggregation: str = "mean",
) -> tuple[Optional[str], dict[str, float]]:
    """Stage 2. Sublayer with the lower mean cosine, or None if both agree."""
    if not 0 <= block < clean.n_blocks:
        raise IndexError(f"block {block} out of range")
    _check_pair(clean, faulty)
    ledger = ledger if ledger is not None else CostLedger()
    toks = _tokens(X)
    ref = _sublayers(clean, toks, block)
    rerun = _sublayers(clean, toks, block)
    bad = _sublayers(faulty, toks, block)
    ledger.add("forward_passes", 3)
    sims, live = {}, []
    for s in SUBLAYERS:
        sims[s] = similarity(ref[s], bad[s], aggregation)[0]
        noise = 1.0 - similarity(ref[s], rerun[s], aggregation)[0]
        ledger.add("activation_comparisons")
        if 1.0 - sims[s] > ENVELOPE_FACTOR * noise:
            live.append(s)
    if not live:
        return None, sims
    # lowest agreement; attention wins exact ties because it runs first
    return min(live, key=lambda s: (sims[s], SUBLAYERS.index(s))), sims


def localize_bits(
    clean: ModelState,
    faulty: ModelState,
    block: int,
    sublayer: str,
    ledger: Optional[CostLedger] = None,
    mismatches: Optional[list] = None,
) -> list[BitFinding]:
    """Stage 3. Digest-filter the sublayer's tensors, then XOR stored bits."""
    _check_pair(clean, faulty)
    ledger = ledger if ledger is not None else CostLedger()
    findings = []
    for name in sublayer_tensor_names(block, sublayer):
        a, b = clean.tensors[name], faulty.tensors[name]
        ledger.add("hash_computations")
        if digest_tensor(a).digest == digest_tensor(b).digest:
            continue
        if mismatches is not None:
            mismatches.append(name)
        ledger.add("element_comparisons", a.size)
        for idx, cb, fb, bits in differing_bits(a, b):
            findings.append(BitFinding(name, idx, tuple(bits), cb, fb))
    return findings


def _refine(sublayer: str, findings: list[BitFinding]) -> str:
    tags = {parse_tensor_name(f.tensor_name)[1] for f in findings}
    return tags.pop() if len(tags) == 1 else sublayer


def localize_diff(
    clean: ModelState,
    faulty: ModelState,
    X,
    metric: str = COSINE,
    mode: str = ONSET,
    aggregation: str = "mean",
    multi_block: bool = False,
) -> LocalizationResult:
    """Run all three stages and collect the evidence.

    ``multi_block`` (experimental) repeats stages 2-3 for every block above
    the noise envelope instead of only the first one.
    """
    ledger = CostLedger()
    block, profile = localize_block(clean, faulty, X, metric, mode, aggregation, ledger)
    if block is None:
        return LocalizationResult(None, None, [], profile, ledger=ledger)
    targets = [block]
    if multi_block:
        targets += [b for b in profile.exceeding() if b != block]
    findings: list[BitFinding] = []
    mismatches: list[str] = []
    sims: dict[str, float] = {}
    sublayer = None
    extra: list[int] = []
    fallbacks: list[int] = []
    for b in targets:
        sub, s = localize_layer(clean, faulty, b, X, ledger, aggregation)
        if b == block:
            sims, sublayer = s, sub
        if sub is None:
            continue
        found = localize_bits(clean, faulty, b, sub, ledger, mismatches)
        if not found:
            # a small upstream change can be amplified downstream inside the
            # block; if the lower-agreement sublayer is bit-identical, the
            # other one must hold the flip
            other = SUBLAYERS[1 - SUBLAYERS.index(sub)]
            found = localize_bits(clean, faulty, b, other, ledger, mismatches)
            if found:
                fallbacks.append(b)
                sub = other
                if b == block:
                    sublayer = other
        if b != block and found:
            extra.append(b)
        findings.extend(found)
    if sublayer is not None and findings:
        sublayer = _refine(sublayer, [f for f in findings if f.tensor_name.startswith(f"block.{block}.")] or findings)
    return LocalizationResult(block, sublayer, findings, profile, sims, mismatches, ledger, extra, fallbacks)
