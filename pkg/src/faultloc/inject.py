"""Fault-site selection and deterministic bit-flip injection.

Selection replaces gradient-guided critical-bit search with a magnitude
surrogate: the largest-|value| weights, hit in their most significant bit
(the sign bit for int8, the top exponent bit for float32). The policy tag
travels with every manifest so results from different policies never mix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .checkpoint import state_file_digest
from .model import ModelState, parse_tensor_name
from .tensor import INT8, BitAddress, check_address, flip_bit

TOP_MAGNITUDE_MSB = "top-magnitude-msb"
RANDOM_UNIFORM = "random-uniform"
FIXED_LIST = "fixed-list"
POLICIES = (TOP_MAGNITUDE_MSB, RANDOM_UNIFORM, FIXED_LIST)

MANIFEST_VERSION = 1


class SelectionError(ValueError):
    pass


class InjectionError(ValueError):
    pass


def msb_index(dtype: str) -> int:
    """Sign bit for int8, highest exponent bit for float32."""
    return 7 if dtype == INT8 else 30


@dataclass(frozen=True)
class FaultRecord:
    address: BitAddress
    block: int
    sublayer: str
    original_bits: int
    flipped_bits: int
    injected_at: str = ""

    def to_dict(self) -> dict:
        return {
            "tensor": self.address.tensor_name,
            "element": self.address.element_index,
            "bit": self.address.bit_index,
            "block": self.block,
            "sublayer": self.sublayer,
            "original_bits": self.original_bits,
            "flipped_bits": self.flipped_bits,
            "injected_at": self.injected_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaultRecord":
        return cls(
            BitAddress(d["tensor"], int(d["element"]), int(d["bit"])),
            int(d["block"]),
            d["sublayer"],
            int(d["original_bits"]),
            int(d["flipped_bits"]),
            d.get("injected_at", ""),
        )


@dataclass(frozen=True)
class FaultManifest:
    model_checkpoint_digest: str
    records: tuple[FaultRecord, ...]
    selection_policy: str
    faulty_checkpoint_digest: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.records:
            raise InjectionError("manifest needs at least one record")
        addrs = [r.address for r in self.records]
        if len(set(addrs)) != len(addrs):
            raise InjectionError("manifest addresses must be distinct")

    @property
    def addresses(self) -> list[BitAddress]:
        return [r.address for r in self.records]

    def dumps(self) -> str:
        """Header line followed by one JSON record per line, keys sorted."""
        header = {
            "kind": "fault-manifest",
            "version": MANIFEST_VERSION,
            "clean_checkpoint_sha256": self.model_checkpoint_digest,
            "faulty_checkpoint_sha256": self.faulty_checkpoint_digest,
            "selection_policy": self.selection_policy,
            "n_records": len(self.records),
            "meta": self.meta,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FaultManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])
        if header.get("kind") != "fault-manifest":
            raise ValueError("not a fault manifest")
        records = tuple(FaultRecord.from_dict(json.loads(ln)) for ln in lines[1:])
        if len(records) != header["n_records"]:
            raise ValueError("record count does not match header")
        return cls(
            header["clean_checkpoint_sha256"],
            records,
            header["selection_policy"],
            header.get("faulty_checkpoint_sha256", ""),
            header.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "FaultManifest":
        return cls.loads(Path(path).read_text())


def eligible_tensors(
    m: ModelState,
    include_embeddings: bool = False,
    blocks: Optional[Iterable[int]] = None,
    sublayers: Optional[Iterable[str]] = None,
) -> list[str]:
    """Canonically ordered names of tensors a policy may target."""
    blocks = None if blocks is None else set(blocks)
    sublayers = None if sublayers is None else set(sublayers)
    names = []
    for name in m.names():
        parsed = parse_tensor_name(name)
        if parsed is None:
            if include_embeddings and blocks is None and sublayers is None:
                names.append(name)
            continue
        b, tag = parsed
        if blocks is not None and b not in blocks:
            continue
        if sublayers is not None and tag not in sublayers and tag.split(".")[0] not in sublayers:
            continue
        names.append(name)
    return names


def select_critical_bits(
    m: ModelState,
    k: int,
    policy: str = TOP_MAGNITUDE_MSB,
    *,
    addresses: Optional[Sequence[BitAddress]] = None,
    seed: Optional[int] = None,
    include_embeddings: bool = False,
    blocks: Optional[Iterable[int]] = None,
    sublayers: Optional[Iterable[str]] = None,
) -> list[BitAddress]:
    """Pick ``k`` bit addresses according to ``policy``.

    ``top-magnitude-msb`` ranks weights by dequantized magnitude, ties going
    to the lowest (tensor name, element index). ``random-uniform`` draws
    distinct bits uniformly with ``seed``. ``fixed-list`` validates and
    echoes ``addresses``.
    """
    if policy not in POLICIES:
        raise SelectionError(f"unknown policy {policy!r}")
    if policy == FIXED_LIST:
        if not addresses:
            raise SelectionError("fixed-list policy needs an address list")
        out = list(addresses)
        _validate(m, out)
        return out
    if k < 1:
        raise SelectionError("k must be >= 1")
    names = eligible_tensors(m, include_embeddings, blocks, sublayers)
    sizes = np.array([m.tensors[n].size for n in names], dtype=np.int64)
    total = int(sizes.sum())
    if k > total:
        raise SelectionError(f"k={k} exceeds {total} eligible weights")
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    if policy == TOP_MAGNITUDE_MSB:
        mags = np.concatenate(
            [np.abs(m.tensors[n].values(np.float64)).reshape(-1) for n in names]
        )
        # NaN ranks above everything: a corrupted float is maximally suspicious.
        mags = np.where(np.isnan(mags), np.inf, mags)
        # stable sort on -|v| keeps (name order, element order) for ties
        order = np.argsort(-mags, kind="stable")[:k]
        out = []
        for flat in order:
            ti = int(np.searchsorted(offsets, flat, side="right") - 1)
            t = m.tensors[names[ti]]
            out.append(BitAddress(t.name, int(flat - offsets[ti]), msb_index(t.dtype)))
        return out

    if seed is None:
        raise SelectionError("random-uniform policy needs a seed")
    rng = np.random.default_rng(seed)
    bits = np.array([m.tensors[n].bits_per_element for n in names], dtype=np.int64)
    bit_offsets = np.concatenate([[0], np.cumsum(sizes * bits)])
    picks = rng.choice(int(bit_offsets[-1]), size=k, replace=False)
    out = []
    for flat in picks:
        ti = int(np.searchsorted(bit_offsets, flat, side="right") - 1)
        rel = int(flat - bit_offsets[ti])
        out.append(BitAddress(names[ti], rel // int(bits[ti]), rel % int(bits[ti])))
    return out


def _validate(m: ModelState, addresses: Sequence[BitAddress]) -> None:
    if len(set(addresses)) != len(addresses):
        raise InjectionError("duplicate addresses")
    for a in addresses:
        if a.tensor_name not in m.tensors:
            raise InjectionError(f"no tensor named {a.tensor_name!r}")
        check_address(m.tensors[a.tensor_name], a)


def flip_addresses(m: ModelState, addresses: Iterable[BitAddress]) -> ModelState:
    """Flip each address in turn (no bookkeeping, no distinctness check)."""
    updated = dict(m.tensors)
    for a in addresses:
        updated[a.tensor_name] = flip_bit(updated[a.tensor_name], a)
    return m.with_tensors(updated)


def inject(
    m: ModelState,
    addresses: Sequence[BitAddress],
    policy: str = FIXED_LIST,
    injected_at: str = "",
    meta: Optional[dict] = None,
) -> tuple[ModelState, FaultManifest]:
    """Flip every address once; return the corrupted model and its manifest."""
    addresses = list(addresses)
    if not addresses:
        raise InjectionError("empty address list")
    _validate(m, addresses)
    updated = dict(m.tensors)
    records = []
    for a in addresses:
        before = updated[a.tensor_name]
        after = flip_bit(before, a)
        parsed = parse_tensor_name(a.tensor_name)
        block, sub = parsed if parsed else (-1, a.tensor_name)
        records.append(
            FaultRecord(
                a,
                block,
                sub,
                int(before.stored_bits()[a.element_index]),
                int(after.stored_bits()[a.element_index]),
                injected_at,
            )
        )
        updated[a.tensor_name] = after
    faulty = m.with_tensors(updated)
    manifest = FaultManifest(
        state_file_digest(m),
        tuple(records),
        policy,
        state_file_digest(faulty),
        dict(meta or {}),
    )
    return faulty, manifest


def exhaustive_diff(a: ModelState, b: ModelState) -> list[BitAddress]:
    """Every differing stored bit between two same-architecture models.

    Brute-force oracle: scans all elements of all tensors.
    """
    if a.config != b.config:
        raise ValueError("architecture mismatch")
    out = []
    for name in a.names():
        ta, tb = a.tensors[name], b.tensors[name]
        x = ta.stored_bits() ^ tb.stored_bits()
        for i in np.flatnonzero(x):
            v = int(x[i])
            out.extend(BitAddress(name, int(i), k) for k in range(ta.bits_per_element) if v >> k & 1)
    return out
