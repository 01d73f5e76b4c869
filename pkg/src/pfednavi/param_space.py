"""Named parameter trees and the protocol's parameter-combination primitives.

A :class:`ParamTree` maps layer keys to named float64 arrays and is immutable
after construction.  The three combination ops (scalar interpolation of one
layer, element-wise fusion, size-weighted averaging) share one blending
kernel written so that the algebraically obvious identities hold bitwise:
weight 0 returns one operand exactly, weight 1 the other, and combining a
tree with itself returns it unchanged no matter the weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "LayerKey",
    "DECODER_LAYERS",
    "DECODER_LAYER_ORDER",
    "ProtocolViolation",
    "ParamTree",
    "MixingCoefficients",
    "FusionWeights",
    "interpolate_layer",
    "fuse_elementwise",
    "weighted_average",
    "strip_critic",
    "tree_map",
    "trees_equal",
]


class LayerKey(str, Enum):
    """Transferable units of the agent model."""

    EMBEDDING = "embedding"
    ENCODER_RNN = "encoder_rnn"
    ENC_DEC_PROJECTION = "enc_dec_projection"
    DEC_ACTION_EMBED = "dec_action_embed"
    DEC_VISUAL_ATTN = "dec_visual_attn"
    DEC_STATE_UPDATE = "dec_state_update"
    DEC_INSTR_ATTN = "dec_instr_attn"
    DEC_CANDIDATE_SCORE = "dec_candidate_score"
    CRITIC = "critic"


DECODER_LAYER_ORDER: tuple[LayerKey, ...] = (
    LayerKey.DEC_ACTION_EMBED,
    LayerKey.DEC_VISUAL_ATTN,
    LayerKey.DEC_STATE_UPDATE,
    LayerKey.DEC_INSTR_ATTN,
    LayerKey.DEC_CANDIDATE_SCORE,
)
DECODER_LAYERS: frozenset[LayerKey] = frozenset(DECODER_LAYER_ORDER)


class ProtocolViolation(ValueError):
    """A tree reached a place the protocol forbids (e.g. critic in an upload)."""


def _freeze(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


class ParamTree:
    """Ordered map LayerKey -> {tensor name: float64 array}; immutable."""

    __slots__ = ("_layers",)

    def __init__(self, layers: Mapping[LayerKey, Mapping[str, np.ndarray]]):
        ordered: dict[LayerKey, dict[str, np.ndarray]] = {}
        for key in sorted(layers, key=lambda k: k.value):
            if not isinstance(key, LayerKey):
                raise TypeError(f"tree keys must be LayerKey, got {key!r}")
            tensors = layers[key]
            ordered[key] = {name: _freeze(tensors[name]) for name in sorted(tensors)}
        self._layers = ordered

    # -- mapping-ish interface -------------------------------------------

    def keys(self) -> tuple[LayerKey, ...]:
        return tuple(self._layers)

    def __contains__(self, key: LayerKey) -> bool:
        return key in self._layers

    def __getitem__(self, key: LayerKey) -> Mapping[str, np.ndarray]:
        return MappingProxyType(self._layers[key])

    def items(self) -> Iterator[tuple[LayerKey, Mapping[str, np.ndarray]]]:
        for key, tensors in self._layers.items():
            yield key, MappingProxyType(tensors)

    def flat_items(self) -> Iterator[tuple[LayerKey, str, np.ndarray]]:
        """Deterministic (key, name, array) walk: sorted by key, then name."""
        for key, tensors in self._layers.items():
            for name, arr in tensors.items():
                yield key, name, arr

    # -- structure --------------------------------------------------------

    def shape_signature(self) -> tuple[tuple[str, str, tuple[int, ...]], ...]:
        return tuple((k.value, n, a.shape) for k, n, a in self.flat_items())

    def shape_compatible(self, other: "ParamTree") -> bool:
        return self.shape_signature() == other.shape_signature()

    def replace(self, key: LayerKey, tensors: Mapping[str, np.ndarray]) -> "ParamTree":
        layers = dict(self._layers)
        layers[key] = dict(tensors)
        return ParamTree(layers)

    def without(self, key: LayerKey) -> "ParamTree":
        if key not in self._layers:
            return self
        layers = {k: v for k, v in self._layers.items() if k is not key}
        return ParamTree(layers)

    def __eq__(self, other) -> bool:  # value equality, used in tests
        if not isinstance(other, ParamTree):
            return NotImplemented
        return trees_equal(self, other)

    def __hash__(self):
        return id(self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ParamTree({[k.value for k in self._layers]})"

    # -- serialization ----------------------------------------------------

    _MAGIC = b"PFNT"
    _VERSION = 1

    def to_bytes(self) -> bytes:
        """Versioned flat binary records; layout documented in the README."""
        records = list(self.flat_items())
        parts = [self._MAGIC, struct.pack("<HI", self._VERSION, len(records))]
        for key, name, arr in records:
            kb = key.value.encode("utf-8")
            nb = name.encode("utf-8")
            parts.append(struct.pack("<H", len(kb)))
            parts.append(kb)
            parts.append(struct.pack("<H", len(nb)))
            parts.append(nb)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamTree":
        if buf[:4] != cls._MAGIC:
            raise ValueError("not a parameter-tree record (bad magic)")
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != cls._VERSION:
            raise ValueError(f"unsupported tree record version {version}")
        off = 10
        layers: dict[LayerKey, dict[str, np.ndarray]] = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            key = LayerKey(buf[off : off + klen].decode("utf-8"))
            off += klen
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            layers.setdefault(key, {})[name] = arr.astype(np.float64)
        if off != len(buf):
            raise ValueError("trailing bytes after last tree record")
        return cls(layers)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamTree":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class MixingCoefficients:
    """Per-decoder-layer mixing weight toward the local parameters."""

    values: Mapping[LayerKey, float]

    def __post_init__(self):
        if set(self.values) != DECODER_LAYERS:
            raise ValueError("mixing coefficients must cover exactly the decoder layers")
        clamped = {k: min(1.0, max(0.0, float(v))) for k, v in self.values.items()}
        object.__setattr__(self, "values", MappingProxyType(clamped))

    def __getitem__(self, key: LayerKey) -> float:
        return self.values[key]


@dataclass(frozen=True)
class FusionWeights:
    """Per-element fusion weights for the personalized layer set."""

    weights: Mapping[LayerKey, Mapping[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        frozen: dict[LayerKey, Mapping[str, np.ndarray]] = {}
        for key, tensors in self.weights.items():
            frozen[key] = MappingProxyType(
                {name: _freeze(np.clip(arr, 0.0, 1.0)) for name, arr in tensors.items()}
            )
        object.__setattr__(self, "weights", MappingProxyType(frozen))

    def keys(self) -> frozenset[LayerKey]:
        return frozenset(self.weights)

    def __getitem__(self, key: LayerKey) -> Mapping[str, np.ndarray]:
        return self.weights[key]

    def __contains__(self, key: LayerKey) -> bool:
        return key in self.weights


def _blend(base: np.ndarray, other: np.ndarray, w) -> np.ndarray:
    """``base + w*(other-base)`` with exact endpoints.

    Written in gap form so blending identical operands is a bitwise no-op,
    and masked at w==0 / w==1 so the endpoints return an operand exactly
    rather than to rounding error.
    """
    if base.shape != other.shape:
        raise ValueError(f"blend: shape mismatch {base.shape} vs {other.shape}")
    wv = np.asarray(w, dtype=np.float64)
    if wv.ndim == 0:
        s = float(wv)
        if s == 0.0:
            return base.copy()
        if s == 1.0:
            return other.copy()
        return base + s * (other - base)
    if wv.shape != base.shape:
        raise ValueError(f"blend: weight shape {wv.shape} does not match {base.shape}")
    out = base + wv * (other - base)
    out = np.where(wv == 0.0, base, out)
    out = np.where(wv == 1.0, other, out)
    return out


def _check_layer_compat(op: str, a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]):
    if sorted(a) != sorted(b):
        raise ValueError(f"{op}: tensor names differ: {sorted(a)} vs {sorted(b)}")
    for name in a:
        if np.shape(a[name]) != np.shape(b[name]):
            raise ValueError(
                f"{op}: shape mismatch for {name!r}: {np.shape(a[name])} vs {np.shape(b[name])}"
            )


def interpolate_layer(
    global_layer: Mapping[str, np.ndarray],
    local_layer: Mapping[str, np.ndarray],
    alpha: float,
) -> dict[str, np.ndarray]:
    """Convex combination of one layer: weight ``alpha`` on the local side."""
    _check_layer_compat("interpolate_layer", global_layer, local_layer)
    a = min(1.0, max(0.0, float(alpha)))
    return {
        name: _blend(np.asarray(local_layer[name]), np.asarray(global_layer[name]), 1.0 - a)
        for name in sorted(global_layer)
    }


def fuse_elementwise(
    local_layer: Mapping[str, np.ndarray],
    global_layer: Mapping[str, np.ndarray],
    w_layer: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Element-wise pull of local parameters toward global, gated by W."""
    _check_layer_compat("fuse_elementwise", local_layer, global_layer)
    _check_layer_compat("fuse_elementwise/W", local_layer, w_layer)
    return {
        name: _blend(np.asarray(local_layer[name]), np.asarray(global_layer[name]), w_layer[name])
        for name in sorted(local_layer)
    }


def weighted_average(trees: Sequence[tuple[ParamTree, float]]) -> ParamTree:
    """Per-element weighted mean of shape-compatible critic-free trees."""
    if not trees:
        raise ValueError("weighted_average of an empty list")
    first, _ = trees[0]
    total = 0.0
    for tree, weight in trees:
        if LayerKey.CRITIC in tree:
            raise ProtocolViolation("weighted_average: tree contains the critic layer")
        if not tree.shape_compatible(first):
            raise ValueError("weighted_average: trees are not shape-compatible")
        if not weight > 0:
            raise ValueError(f"weighted_average: weights must be positive, got {weight}")
        total += float(weight)

    # anchored at the first tree: sum_i w'_i x_i == x_0 + sum_{i>0} w'_i (x_i - x_0),
    # which collapses bitwise to x_0 when every tree equals x_0
    out: dict[LayerKey, dict[str, np.ndarray]] = {
        key: {name: arr.copy() for name, arr in tensors.items()} for key, tensors in first.items()
    }
    for tree, weight in trees[1:]:
        share = float(weight) / total
        for key, name, arr in tree.flat_items():
            base = out[key][name]
            base += share * (arr - first[key][name])
    return ParamTree(out)


def strip_critic(tree: ParamTree) -> ParamTree:
    """Tree without the critic layer; everything else untouched."""
    return tree.without(LayerKey.CRITIC)


def tree_map(fn, *trees: ParamTree) -> ParamTree:
    """Apply ``fn(key, name, *arrays)`` over aligned tensors of the trees."""
    first = trees[0]
    for t in trees[1:]:
        if not t.shape_compatible(first):
            raise ValueError("tree_map: trees are not shape-compatible")
    out: dict[LayerKey, dict[str, np.ndarray]] = {}
    for key in first.keys():
        out[key] = {
            name: fn(key, name, *(t[key][name] for t in trees)) for name in first[key]
        }
    return ParamTree(out)


def trees_equal(a: ParamTree, b: ParamTree) -> bool:
    """Bitwise equality of structure and every tensor."""
    if a.shape_signature() != b.shape_signature():
        return False
    return all(np.array_equal(x, b[k][n]) for k, n, x in a.flat_items())
