"""Compression operators mapping gradients to compact wire messages.

Four kinds are supported:

* ``identity``  -- no compression, dense payload.
* ``randk``     -- keep a uniformly random fraction of coordinates, scaled by
  ``dim/k`` so the operator is unbiased.
* ``topk``      -- keep the largest-magnitude fraction (biased, contractive).
  Ties are broken deterministically toward the lower index.
* ``qsgd``      -- dictionary quantization: each coordinate is mapped to
  ``norm * sign * level/s`` where ``level`` rounds ``s*|g_j|/norm``
  stochastically up or down so the operator is unbiased.

Sparsifiers honor the layer partition when ``layerwise`` is set (each layer
keeps its own ``k_eff = max(1, round(k_fraction * layer_dim))``); quantization
always acts on the flat vector, so ``layerwise`` QSGD is rejected.

Certificates
------------
``estimate_beta`` returns the unbiased second-moment factor (``E||C(g)||^2 <=
beta ||g||^2``): 1 for identity, worst-layer ``dim/k_eff`` for randk, and the
standard closed-form bound ``1 + min(d/s^2, sqrt(d)/s)`` for qsgd (validated
by Monte-Carlo in the test suite rather than asserted analytically).

``estimate_delta`` returns the contraction factor (``E||C(g)-g||^2 <=
(1-delta) ||g||^2``): worst-layer ``k_eff/dim`` for topk, 1 for identity.
For the unbiased kinds it returns ``1/beta``, the delta implied by the
standard scaling argument; note that this certifies the ``(1/beta)``-scaled
operator, not the operator actually applied, so it is informational and the
bound verifiers do not accept it as a run precondition.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np

from . import backend
from .vectors import LayerPartition, ParamVector, RngStream

__all__ = [
    "CompressorKind",
    "CompressorSpec",
    "DensePayload",
    "SparsePayload",
    "QuantizedPayload",
    "CompressedMessage",
    "compress",
    "decode",
    "estimate_beta",
    "estimate_delta",
    "k_eff",
    "BiasedCompressorError",
]

# Wire precision of the default cost model; must stay in sync with accounting.
_VALUE_BITS = 32
_INDEX_BITS = 32


class BiasedCompressorError(ValueError):
    """Raised when an unbiasedness certificate is requested for a biased kind."""


class CompressorKind(str, Enum):
    IDENTITY = "identity"
    RANDK = "randk"
    TOPK = "topk"
    QSGD = "qsgd"


@dataclass(frozen=True)
class CompressorSpec:
    kind: CompressorKind
    k_fraction: float = 1.0
    s_levels: int = 1
    layerwise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", CompressorKind(self.kind))
        if not 0.0 < self.k_fraction <= 1.0:
            raise ValueError(f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if self.s_levels < 1:
            raise ValueError(f"s_levels must be >= 1, got {self.s_levels}")
        if self.layerwise and self.kind is CompressorKind.QSGD:
            raise ValueError("layerwise applies to sparsifying kinds, not qsgd")


def k_eff(k_fraction: float, layer_dim: int) -> int:
    """Per-layer kept-coordinate count: at least one coordinate survives."""
    return max(1, int(k_fraction * layer_dim + 0.5))


@dataclass(frozen=True)
class DensePayload:
    values: np.ndarray


@dataclass(frozen=True)
class SparsePayload:
    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("sparse indices and values must have equal length")
        if len(self.indices) and np.any(np.diff(self.indices) <= 0):
            raise ValueError("sparse indices must be strictly increasing")
        if not np.isfinite(self.values).all():
            raise ValueError("sparse values must be finite")


@dataclass(frozen=True)
class QuantizedPayload:
    norm: float
    signs: np.ndarray   # uint8, 1 = negative
    levels: np.ndarray  # int64 in [0, s_levels]
    s_levels: int

    def __post_init__(self):
        if self.norm < 0.0:
            raise ValueError("quantized norm must be >= 0")
        if len(self.signs) != len(self.levels):
            raise ValueError("signs and levels must have equal length")
        if len(self.levels) and (self.levels.min() < 0 or self.levels.max() > self.s_levels):
            raise ValueError(f"levels must lie in [0, {self.s_levels}]")


Payload = Union[DensePayload, SparsePayload, QuantizedPayload]


@dataclass(frozen=True)
class CompressedMessage:
    payload: Payload
    dim: int
    bit_size: int

    def __post_init__(self):
        if isinstance(self.payload, DensePayload):
            if len(self.payload.values) != self.dim:
                raise ValueError("dense payload length must equal dim")
        elif isinstance(self.payload, SparsePayload):
            if len(self.payload.indices) and self.payload.indices.max() >= self.dim:
                raise ValueError("sparse index out of range")
        elif isinstance(self.payload, QuantizedPayload):
            if len(self.payload.levels) != self.dim:
                raise ValueError("quantized payload length must equal dim")
        if self.bit_size < 0:
            raise ValueError("bit_size must be >= 0")


def _payload_bits(payload: Payload, dim: int) -> int:
    # Mirrors accounting.message_bits under the default cost model; the
    # accounting tests cross-check the two.
    if isinstance(payload, DensePayload):
        return dim * _VALUE_BITS
    if isinstance(payload, SparsePayload):
        return len(payload.values) * (_VALUE_BITS + _INDEX_BITS)
    level_bits = max(1, int(np.ceil(np.log2(payload.s_levels + 1))))
    return _VALUE_BITS + dim + dim * level_bits


def _make_message(payload: Payload, dim: int) -> CompressedMessage:
    return CompressedMessage(payload, dim, _payload_bits(payload, dim))


def _layer_ranges(g: ParamVector, spec: CompressorSpec) -> LayerPartition:
    return g.layers() if spec.layerwise else ((0, g.dim),)


def compress(spec: CompressorSpec, g: ParamVector, rng: Optional[RngStream] = None) -> CompressedMessage:
    """Apply the operator and package the result for the wire.

    ``rng`` is consumed by the random kinds (randk, qsgd) and ignored
    otherwise.  The all-zero vector short-circuits qsgd to an exact empty
    sparse message since its magnitude ratios are undefined at norm zero.
    """
    kind = spec.kind
    arr = g.values
    d = g.dim

    if kind is CompressorKind.IDENTITY:
        return _make_message(DensePayload(arr.copy()), d)

    if kind is CompressorKind.QSGD:
        if rng is None:
            raise ValueError("qsgd requires an rng stream")
        if not arr.any():
            return _make_message(SparsePayload(np.empty(0, np.int64), np.empty(0)), d)
        norm, signs, levels = backend.qsgd_encode(arr, spec.s_levels, rng.key, rng.offset)
        rng.offset += d
        return _make_message(QuantizedPayload(norm, signs, levels, spec.s_levels), d)

    idx_parts = []
    val_parts = []
    for start, stop in _layer_ranges(g, spec):
        ldim = stop - start
        k = k_eff(spec.k_fraction, ldim)
        if kind is CompressorKind.TOPK:
            local = backend.topk_indices(arr[start:stop], k)
            vals = arr[start + local]
        else:  # RANDK
            if rng is None:
                raise ValueError("randk requires an rng stream")
            local = rng.subset(ldim, k)
            vals = (ldim / k) * arr[start + local]
        idx_parts.append(start + local)
        val_parts.append(vals)
    indices = np.concatenate(idx_parts).astype(np.int64)
    values = np.concatenate(val_parts)
    return _make_message(SparsePayload(indices, values), d)


def decode(msg: CompressedMessage) -> ParamVector:
    """Reconstruct the dense vector a message encodes."""
    payload = msg.payload
    if isinstance(payload, DensePayload):
        return ParamVector(payload.values, copy=True)
    if isinstance(payload, SparsePayload):
        if len(payload.indices) and payload.indices.max() >= msg.dim:
            raise ValueError("sparse index out of range")
        out = np.zeros(msg.dim)
        out[payload.indices] = payload.values
        return ParamVector(out, copy=False)
    if payload.levels.max(initial=0) > payload.s_levels:
        raise ValueError("quantization level exceeds s_levels")
    magnitudes = payload.norm * payload.levels / payload.s_levels
    out = np.where(payload.signs == 1, -magnitudes, magnitudes)
    return ParamVector(out, copy=False)


def _worst_layer_dims(dim: int, layer_partition: Optional[LayerPartition],
                      spec: CompressorSpec):
    if spec.layerwise and layer_partition:
        return [(stop - start) for start, stop in layer_partition]
    return [dim]


def estimate_beta(spec: CompressorSpec, dim: int,
                  layer_partition: Optional[LayerPartition] = None) -> float:
    """Second-moment certificate for the unbiased kinds (see module docs)."""
    if spec.kind is CompressorKind.TOPK:
        raise BiasedCompressorError("topk is biased; it has no beta certificate")
    if spec.kind is CompressorKind.IDENTITY:
        return 1.0
    if spec.kind is CompressorKind.RANDK:
        return max(ld / k_eff(spec.k_fraction, ld)
                   for ld in _worst_layer_dims(dim, layer_partition, spec))
    s = spec.s_levels
    return 1.0 + min(dim / s**2, np.sqrt(dim) / s)


def estimate_delta(spec: CompressorSpec, dim: int,
                   layer_partition: Optional[LayerPartition] = None) -> float:
    """Contraction certificate (see module docs for the unbiased-kind caveat)."""
    if spec.kind is CompressorKind.IDENTITY:
        return 1.0
    if spec.kind is CompressorKind.TOPK:
        return min(k_eff(spec.k_fraction, ld) / ld
                   for ld in _worst_layer_dims(dim, layer_partition, spec))
    return 1.0 / estimate_beta(spec, dim, layer_partition)


def delta_certified(spec: CompressorSpec) -> bool:
    """Whether estimate_delta certifies the operator as actually applied."""
    return spec.kind in (CompressorKind.TOPK, CompressorKind.IDENTITY)


def beta_certified(spec: CompressorSpec) -> bool:
    """Whether estimate_beta applies (unbiased kinds)."""
    return spec.kind is not CompressorKind.TOPK
