"""Weight wire format, disease-based grouping and the aggregation rules.

Weight file layout (all little-endian)::

    offset  size  field
    0       4     magic  b"FTDW"
    4       2     version (uint16, currently 1)
    6       2     m, number of LSTM layers (uint16)
    8       4     hidden size (uint32)
    12      4     d, feature count (uint32)
    16      1     head (uint8: 0 reconstruction, 1 classifier)
    17      3     zero padding
    20      ...   float64 parameters: for each layer W_f, W_i, W_c, W_o
                  (row-major), then b_f, b_i, b_c, b_o; then fc_weight, fc_bias

The total length is therefore ``20 + 8 * parameter_count`` bytes.
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lstm import HEADS, ModelWeights
from .numeric import ShapeError

MAGIC = b"FTDW"
VERSION = 1
HEADER = struct.Struct("<4sHHIIB3x")
HEADER_SIZE = HEADER.size
DEFAULT_GROUPING_KEYS = ("disease", "age_band")


class FormatError(ValueError):
    """Malformed weight stream."""


class ProfileError(ValueError):
    """A patient profile lacks a grouping attribute."""


class AggregationError(ValueError):
    pass


def serialized_size(layers: int, hidden: int, features: int, head: str = "reconstruction") -> int:
    """Closed-form byte length of a serialized model."""
    out = 1 if head == "classifier" else features
    first = 4 * hidden * (hidden + features) + 4 * hidden
    rest = (layers - 1) * (4 * hidden * (2 * hidden) + 4 * hidden)
    return HEADER_SIZE + 8 * (first + rest + out * hidden + out)


def serialize_weights(w: ModelWeights) -> bytes:
    if any(layer.hidden != w.hidden for layer in w.layers):
        raise FormatError("the wire format requires one hidden size for all layers")
    header = HEADER.pack(MAGIC, VERSION, len(w.layers), w.hidden, w.features, HEADS.index(w.head))
    body = b"".join(np.ascontiguousarray(m, dtype="<f8").tobytes() for m in w.matrices())
    return header + body


def deserialize_weights(data: bytes) -> ModelWeights:
    if len(data) < HEADER_SIZE:
        raise FormatError("stream shorter than the header")
    magic, version, m, hidden, d, head_code = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if head_code >= len(HEADS) or m < 1:
        raise FormatError("bad header fields")
    template = ModelWeights.zeros(d, hidden, m, HEADS[head_code])
    expected = HEADER_SIZE + 8 * template.parameter_count()
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, got {len(data)}")
    mats = []
    offset = HEADER_SIZE
    for t in template.matrices():
        n = t.size
        mats.append(np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(t.shape))
        offset += 8 * n
    return template.from_matrices(mats)


@dataclass(frozen=True)
class GroupKey:
    values: tuple[str, ...]

    def __str__(self) -> str:
        return "|".join(self.values)

    @property
    def slug(self) -> str:
        return "_".join(v.replace("/", "-").replace(" ", "-") for v in self.values)

    @classmethod
    def parse(cls, text: str) -> "GroupKey":
        return cls(tuple(text.split("|")))


@dataclass
class PatientProfile:
    client_id: str
    org_id: str
    attributes: Mapping[str, str]
    dataset_size: int = 0

    def group_key(self, grouping_keys: Sequence[str] = DEFAULT_GROUPING_KEYS) -> GroupKey:
        missing = [k for k in grouping_keys if k not in self.attributes]
        if missing:
            raise ProfileError(f"profile {self.client_id!r} lacks attributes {missing}")
        return GroupKey(tuple(str(self.attributes[k]) for k in grouping_keys))


def group_assign(
    profiles: Sequence[PatientProfile], grouping_keys: Sequence[str] = DEFAULT_GROUPING_KEYS
) -> dict[GroupKey, list[str]]:
    """Exact-match partition on the attribute tuple; members sorted by client id."""
    ids = [p.client_id for p in profiles]
    if len(ids) != len(set(ids)):
        raise ProfileError("client ids must be unique")
    groups: dict[GroupKey, list[str]] = {}
    for p in profiles:
        groups.setdefault(p.group_key(grouping_keys), []).append(p.client_id)
    return {k: sorted(groups[k]) for k in sorted(groups, key=lambda g: g.values)}


@dataclass
class WeightUpdate:
    """Client -> hospital message. Carries model parameters only."""

    client_id: str
    group_key: GroupKey
    round: int
    payload: ModelWeights
    dataset_size: int
    payload_kind: str = "weights"  # or "delta"

    def payload_bytes(self) -> bytes:
        return serialize_weights(self.payload)

    def to_envelope(self) -> dict:
        return {
            "client_id": self.client_id,
            "group_key": str(self.group_key),
            "round": self.round,
            "dataset_size": self.dataset_size,
            "payload_kind": self.payload_kind,
            "payload_b64": base64.b64encode(self.payload_bytes()).decode("ascii"),
        }

    @classmethod
    def from_envelope(cls, env: Mapping) -> "WeightUpdate":
        return cls(
            client_id=env["client_id"],
            group_key=GroupKey.parse(env["group_key"]),
            round=int(env["round"]),
            payload=deserialize_weights(base64.b64decode(env["payload_b64"])),
            dataset_size=int(env["dataset_size"]),
            payload_kind=env.get("payload_kind", "weights"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_envelope(), sort_keys=True)


@dataclass
class GroupGlobal:
    group_key: GroupKey
    weights: ModelWeights
    contributing_size: int
    source: str = field(default="", compare=False)  # org id or "cloud"


def _weighted_sum(items: Sequence[tuple[float, ModelWeights]]) -> ModelWeights:
    first_w = items[0][1]
    for _, w in items[1:]:
        if not w.same_shape(first_w):
            raise ShapeError("aggregated models are not shape-congruent")
    acc = [items[0][0] * m for m in first_w.matrices()]
    for coef, w in items[1:]:
        for a, m in zip(acc, w.matrices()):
            a += coef * m
    return first_w.from_matrices(acc)


def _check_updates(updates: Sequence[WeightUpdate], kind: str) -> list[WeightUpdate]:
    if not updates:
        raise AggregationError("no updates to aggregate")
    keys = {u.group_key for u in updates}
    rounds = {u.round for u in updates}
    if len(keys) != 1 or len(rounds) != 1:
        raise AggregationError("updates must share one group key and round")
    if any(u.payload_kind != kind for u in updates):
        raise AggregationError(f"expected {kind} payloads")
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_weighted(updates: Sequence[WeightUpdate]) -> GroupGlobal:
    """Dataset-size weighted mean of full client weights (summed in client-id order)."""
    ordered = _check_updates(updates, "weights")
    if any(u.dataset_size <= 0 for u in ordered):
        raise AggregationError("dataset sizes must be positive")
    total = sum(u.dataset_size for u in ordered)
    w = _weighted_sum([(u.dataset_size / total, u.payload) for u in ordered])
    return GroupGlobal(ordered[0].group_key, w, total)


def aggregate_delta(global_: GroupGlobal, updates: Sequence[WeightUpdate], server_lr: float) -> GroupGlobal:
    """``w + (server_lr / N) * sum(u_n)`` over client deltas ``u_n = w_n - w``."""
    ordered = _check_updates(updates, "delta")
    if ordered[0].group_key != global_.group_key:
        raise AggregationError("updates belong to a different group")
    total = _weighted_sum([(1.0, u.payload) for u in ordered])
    step = server_lr / len(ordered)
    w = global_.weights.map(lambda g, s: g + step * s, total)
    return GroupGlobal(global_.group_key, w, sum(u.dataset_size for u in ordered))


def cross_org_aggregate(group_globals: Sequence[GroupGlobal]) -> GroupGlobal:
    """Multi-cloud step: contributing-size weighted mean of per-organization group models."""
    if not group_globals:
        raise AggregationError("no group models to aggregate")
    if len({g.group_key for g in group_globals}) != 1:
        raise AggregationError("cross-organization aggregation across different groups")
    ordered = sorted(group_globals, key=lambda g: g.source)
    total = sum(g.contributing_size for g in ordered)
    if total <= 0:
        raise AggregationError("contributing sizes must be positive")
    w = _weighted_sum([(g.contributing_size / total, g.weights) for g in ordered])
    return GroupGlobal(ordered[0].group_key, w, total, "cloud")
