"""Low-rank adapters on the attention query/value projections.

Each target weight ``W0`` (shape ``d x k``) gets factors ``B`` (``d x r``, zero at
creation) and ``A`` (``r x k``, Gaussian), so the adapted projection is
``W0 + B @ A``.  Only the factors are trained and communicated.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import ContractViolation, FormatError, InputError
from .model import LORA_A, LORA_B, ModelConfig, ModelParams

DEFAULT_TARGETS = ("attn.wq", "attn.wv")
INIT_STD = 0.02

WIRE_MAGIC = b"FPLA"
WIRE_VERSION = 1


def default_targets(config: ModelConfig, kinds: Sequence[str] = DEFAULT_TARGETS) -> list[str]:
    return [f"h{i}.{k}" for i in range(config.layers) for k in kinds]


@dataclass(frozen=True)
class LoraAdapter:
    """Per-target factor pairs; ``factors[name] = (A, B)``, A is r x k, B is d x r."""

    rank: int
    factors: Mapping[str, tuple[np.ndarray, np.ndarray]]

    @property
    def targets(self) -> list[str]:
        return list(self.factors)

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat ``name.lora_A`` / ``name.lora_B`` view, the layout gradients use."""
        out = {}
        for name, (A, B) in self.factors.items():
            out[name + LORA_A] = A
            out[name + LORA_B] = B
        return out

    @classmethod
    def from_tensors(cls, rank: int, targets: Iterable[str], tensors: Mapping[str, np.ndarray]
                     ) -> LoraAdapter:
        return cls(rank, {n: (tensors[n + LORA_A], tensors[n + LORA_B]) for n in targets})

    def num_params(self) -> int:
        return sum(A.size + B.size for A, B in self.factors.values())

    def delta(self, name: str) -> np.ndarray:
        A, B = self.factors[name]
        return B @ A

    def equals(self, other: LoraAdapter) -> bool:
        return (self.rank == other.rank and list(self.factors) == list(other.factors)
                and all(np.array_equal(a, b) for a, b in
                        zip(self.tensors().values(), other.tensors().values())))

    def checksum(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()[:16]

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors().values())


def new_adapter(config: ModelConfig, rank: int, seed: int,
                targets: Sequence[str] | None = None) -> LoraAdapter:
    """Fresh adapter: B = 0 and A ~ N(0, 0.02^2), so the initial delta is exactly zero."""
    targets = list(targets) if targets is not None else default_targets(config)
    shapes = config.param_shapes()
    rng = np.random.default_rng(seed)
    factors = {}
    for name in targets:
        if name not in shapes or len(shapes[name]) != 2:
            raise InputError(f"{name!r} is not a weight matrix of this model")
        d, k = shapes[name]
        if not 1 <= rank < min(d, k):
            raise InputError(f"rank {rank} must satisfy 1 <= r < min(d, k) = {min(d, k)}")
        factors[name] = (rng.normal(0.0, INIT_STD, size=(rank, k)), np.zeros((d, rank)))
    return LoraAdapter(rank, factors)


@dataclass(frozen=True)
class AdaptedModel:
    """Frozen base weights plus an adapter."""

    base: ModelParams
    adapter: LoraAdapter

    def __post_init__(self) -> None:
        check_compatible(self.base.config, self.adapter)

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def with_adapter(self, adapter: LoraAdapter) -> AdaptedModel:
        return AdaptedModel(self.base, adapter)


def check_compatible(config: ModelConfig, adapter: LoraAdapter) -> None:
    shapes = config.param_shapes()
    for name, (A, B) in adapter.factors.items():
        if name not in shapes:
            raise ContractViolation(f"adapter target {name!r} missing from base model")
        d, k = shapes[name]
        r = adapter.rank
        if A.shape != (r, k) or B.shape != (d, r):
            raise ContractViolation(
                f"{name}: factors {A.shape}/{B.shape} incompatible with weight {(d, k)} at rank {r}")


def adapted_forward(m: AdaptedModel, tokens) -> np.ndarray:
    """Logits of ``W0 x + B A x`` on the target layers."""
    return model.forward_logits(m.base, tokens, lora=m.adapter.factors)


def merge(m: AdaptedModel) -> ModelParams:
    """Standalone weights with every target replaced by ``W0 + B @ A``."""
    return m.base.replace({n: m.base[n] + m.adapter.delta(n) for n in m.adapter.factors})


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------
#
#   magic   4s  b"FPLA"
#   version u16
#   rank    u32
#   nlayers u32
#   per layer: name_len u16, name utf-8, d u32, k u32
#   payload u64  number of float64 values that follow
#   payload: per layer in declaration order, B (d*r) then A (r*k), row-major '<f8'
#
# All integers little-endian.


def serialize(adapter: LoraAdapter) -> bytes:
    r = adapter.rank
    head = [WIRE_MAGIC, struct.pack("<HII", WIRE_VERSION, r, len(adapter.factors))]
    chunks, count = [], 0
    for name, (A, B) in adapter.factors.items():
        raw = name.encode("utf-8")
        d, k = B.shape[0], A.shape[1]
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", d, k))
        chunks.append(np.ascontiguousarray(B, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(A, dtype="<f8").tobytes())
        count += B.size + A.size
    head.append(struct.pack("<Q", count))
    return b"".join(head + chunks)


def header_size(adapter: LoraAdapter) -> int:
    return 4 + 10 + sum(2 + len(n.encode("utf-8")) + 8 for n in adapter.factors) + 8


def payload_size(adapter: LoraAdapter) -> int:
    """Serialized byte length (header plus 8 bytes per factor entry)."""
    return header_size(adapter) + 8 * adapter.num_params()


def deserialize(data: bytes) -> LoraAdapter:
    try:
        if data[:4] != WIRE_MAGIC:
            raise FormatError("bad adapter magic")
        version, r, n = struct.unpack_from("<HII", data, 4)
        if version != WIRE_VERSION:
            raise FormatError(f"unsupported adapter wire version {version}")
        off = 14
        layout = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            d, k = struct.unpack_from("<II", data, off)
            off += 8
            layout.append((name, d, k))
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
    except struct.error as exc:
        raise FormatError(f"truncated adapter header: {exc}") from None
    except UnicodeDecodeError:
        raise FormatError("corrupt layer name") from None
    expected = sum(d * r + r * k for _, d, k in layout)
    if count != expected:
        raise FormatError(f"payload length field {count} != {expected} implied by dims")
    if len(data) - off != 8 * count:
        raise FormatError(f"payload holds {len(data) - off} bytes, expected {8 * count}")
    flat = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    factors, pos = {}, 0
    for name, d, k in layout:
        B = flat[pos:pos + d * r].reshape(d, r)
        pos += d * r
        A = flat[pos:pos + r * k].reshape(r, k)
        pos += r * k
        factors[name] = (A, B)
    return LoraAdapter(r, factors)
