"""Bit-exact weight storage.

A :class:`WeightTensor` holds its elements exactly as they would sit in
memory (little-endian, row-major), so a flipped bit here is the same flipped
bit a DRAM fault would produce. Two storage formats are supported: raw
float32 and symmetric per-tensor int8.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

FLOAT32 = "float32"
INT8 = "int8"

DTYPE_TAGS = {FLOAT32: 0, INT8: 1}
_NP_DTYPES = {FLOAT32: np.dtype("<f4"), INT8: np.dtype("i1")}
_UINT_VIEWS = {FLOAT32: np.dtype("<u4"), INT8: np.dtype("u1")}
BITS_PER_ELEMENT = {FLOAT32: 32, INT8: 8}

QMAX = 127


class AddressError(IndexError):
    """A bit address does not resolve inside its tensor."""


class TensorDomainError(ValueError):
    """Input values outside what an operation accepts (e.g. non-finite)."""


@dataclass(frozen=True, eq=False)
class WeightTensor:
    name: str
    shape: tuple[int, ...]
    dtype: str
    data: np.ndarray
    quant_scale: Optional[float] = None

    def __post_init__(self):
        if self.dtype not in _NP_DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"shape extents must be positive, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=_NP_DTYPES[self.dtype]).reshape(-1)
        if data.size != math.prod(shape):
            raise ValueError(
                f"{self.name}: {data.size} elements do not fill shape {shape}"
            )
        if self.dtype == INT8:
            if self.quant_scale is None or not self.quant_scale > 0:
                raise ValueError(f"{self.name}: int8 tensor needs quant_scale > 0")
            scale = float(self.quant_scale)
        else:
            if self.quant_scale is not None:
                raise ValueError(f"{self.name}: float32 tensor cannot carry quant_scale")
            scale = None
        if data.base is not None or data.flags.writeable:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "quant_scale", scale)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def bits_per_element(self) -> int:
        return BITS_PER_ELEMENT[self.dtype]

    def stored_bits(self) -> np.ndarray:
        """Unsigned-integer view of the raw element storage (read-only)."""
        return self.data.view(_UINT_VIEWS[self.dtype])

    def values(self, dtype=np.float32) -> np.ndarray:
        """Dequantized values, reshaped to ``shape``."""
        if self.dtype == INT8:
            out = self.data.astype(np.float64) * self.quant_scale
        else:
            out = self.data
        return out.astype(dtype).reshape(self.shape)

    @cached_property
    def dense(self) -> np.ndarray:
        """Cached float32 dequantized values used by the forward pass."""
        arr = self.values(np.float32)
        arr.flags.writeable = False
        return arr

    def raw_bytes(self) -> bytes:
        return self.data.tobytes()

    def bitwise_equal(self, other: "WeightTensor") -> bool:
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.quant_scale == other.quant_scale
            and self.raw_bytes() == other.raw_bytes()
        )

    def replace_data(self, data: np.ndarray) -> "WeightTensor":
        return WeightTensor(self.name, self.shape, self.dtype, data, self.quant_scale)

    def __repr__(self):
        scale = f", scale={self.quant_scale:.4g}" if self.quant_scale else ""
        return f"WeightTensor({self.name!r}, {self.shape}, {self.dtype}{scale})"


@dataclass(frozen=True, order=True)
class BitAddress:
    tensor_name: str
    element_index: int
    bit_index: int

    def __str__(self):
        return f"{self.tensor_name}[{self.element_index}].bit{self.bit_index}"


@dataclass(frozen=True)
class TensorDigest:
    tensor_name: str
    digest: bytes

    def hex(self) -> str:
        return self.digest.hex()


def float_tensor(name: str, values) -> WeightTensor:
    arr = np.asarray(values, dtype=np.float32)
    return WeightTensor(name, arr.shape or (1,), FLOAT32, arr)


def int8_tensor(name: str, elements, quant_scale: float) -> WeightTensor:
    arr = np.asarray(elements)
    if arr.min(initial=0) < -128 or arr.max(initial=0) > 127:
        raise TensorDomainError("int8 elements out of range")
    return WeightTensor(name, arr.shape or (1,), INT8, arr.astype(np.int8), quant_scale)


def check_address(t: WeightTensor, addr: BitAddress) -> None:
    if addr.tensor_name != t.name:
        raise AddressError(f"address targets {addr.tensor_name!r}, tensor is {t.name!r}")
    if not 0 <= addr.element_index < t.size:
        raise AddressError(f"element {addr.element_index} out of range for {t.name} ({t.size})")
    if not 0 <= addr.bit_index < t.bits_per_element:
        raise AddressError(f"bit {addr.bit_index} out of range for {t.dtype}")


def flip_bit(t: WeightTensor, addr: BitAddress) -> WeightTensor:
    """Return a copy of ``t`` with one stored bit inverted (bit 0 = LSB)."""
    check_address(t, addr)
    bits = t.stored_bits().copy()
    bits[addr.element_index] ^= bits.dtype.type(1 << addr.bit_index)
    return t.replace_data(bits.view(_NP_DTYPES[t.dtype]))


def digest_preimage_header(t: WeightTensor) -> bytes:
    head = struct.pack("<BB", DTYPE_TAGS[t.dtype], len(t.shape))
    head += struct.pack(f"<{len(t.shape)}I", *t.shape)
    if t.quant_scale is not None:
        head += struct.pack("<d", t.quant_scale)
    return head


def digest_tensor(t: WeightTensor) -> TensorDigest:
    """SHA-256 over dtype tag, shape, scale and raw element bytes.

    The name is not part of the preimage, so identical content stored under
    two names hashes the same.
    """
    h = hashlib.sha256()
    h.update(digest_preimage_header(t))
    h.update(t.data.data)
    return TensorDigest(t.name, h.digest())


def quantize(t: WeightTensor) -> WeightTensor:
    """Symmetric per-tensor int8 quantization; -128 is never produced."""
    if t.dtype != FLOAT32:
        raise TypeError(f"{t.name} is already {t.dtype}")
    x = t.data.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise TensorDomainError(f"{t.name} has non-finite values")
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    scale = amax / QMAX if amax > 0 else 1.0
    q = np.sign(x) * np.floor(np.abs(x) / scale + 0.5)
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    return WeightTensor(t.name, t.shape, INT8, q, scale)


def dequantize(t: WeightTensor) -> WeightTensor:
    if t.dtype == FLOAT32:
        return t
    return WeightTensor(t.name, t.shape, FLOAT32, t.values(np.float32))


def differing_bits(a: WeightTensor, b: WeightTensor) -> list[tuple[int, int, int, list[int]]]:
    """Element-wise XOR of two same-layout tensors.

    Returns ``(element_index, a_bits, b_bits, bit_indices)`` for every element
    whose stored bits differ.
    """
    if a.dtype != b.dtype or a.shape != b.shape:
        raise ValueError(f"layout mismatch between {a.name} and {b.name}")
    ab, bb = a.stored_bits(), b.stored_bits()
    idx = np.flatnonzero(ab != bb)
    out = []
    for i in idx:
        x = int(ab[i]) ^ int(bb[i])
        bits = [k for k in range(a.bits_per_element) if x >> k & 1]
        out.append((int(i), int(ab[i]), int(bb[i]), bits))
    return out
