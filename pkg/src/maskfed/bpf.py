"""Balanced patch features: collection, median sampling, wire format.

Clients collect the local module's output for every training forward pass
across all local epochs. Before upload, the pool is balanced per class
around the client's median class count: classes strictly below the median
contribute records from every epoch (epoch retention is the oversampling
mechanism — no record is ever duplicated), classes at or above it
contribute only final-epoch records, and every class is then uniformly
downsampled to at most the median.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyClientError


@dataclass
class PatchFeatureRecord:
    """One uploaded feature sequence with its provenance."""

    client_id: int
    label: int
    epoch: int
    kept_indices: np.ndarray   # [kept] ints
    features: np.ndarray       # [kept+1, d] float32, detached

    def __post_init__(self):
        self.kept_indices = np.asarray(self.kept_indices, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise DimensionError("features must be [kept+1, d]")
        if self.features.shape[0] != len(self.kept_indices) + 1:
            raise DimensionError(
                "features must have one row per kept patch plus the class token"
            )


@dataclass
class BalancedFeatureSet:
    client_id: int
    records: list[PatchFeatureRecord]
    per_class_count: dict[int, int] = field(default_factory=dict)
    median_used: int = 0


def collect(pool: list[PatchFeatureRecord], client_id: int, epoch: int,
            features: np.ndarray, labels: np.ndarray, kept_indices: np.ndarray):
    """Append one record per sample of a training forward pass.

    features is [b, kept+1, d] and must already be detached from any
    graph; a float32 copy is stored.
    """
    for i in range(features.shape[0]):
        pool.append(PatchFeatureRecord(
            client_id=client_id,
            label=int(labels[i]),
            epoch=int(epoch),
            kept_indices=np.array(kept_indices[i], copy=True),
            features=np.array(features[i], dtype=np.float32, copy=True),
        ))


def class_median(counts: dict[int, int]) -> int:
    """Lower median of the per-class sample counts present on the client."""
    values = sorted(c for c in counts.values() if c >= 1)
    if not values:
        raise EmptyClientError("no class with at least one sample")
    return values[(len(values) - 1) // 2]


def median_balance(pool: list[PatchFeatureRecord], dataset_counts: dict[int, int],
                   median: int, rng) -> BalancedFeatureSet:
    """Apply the median sampling rule to a collected pool.

    dataset_counts are the client's per-class *dataset* sizes (not pool
    sizes); they decide minority (count < median, keep all epochs) versus
    majority (final epoch only). Every output record is an object from the
    pool — nothing is fabricated or duplicated.
    """
    if not pool:
        return BalancedFeatureSet(client_id=-1, records=[], per_class_count={},
                                  median_used=median)
    final_epoch = max(r.epoch for r in pool)
    client_id = pool[0].client_id
    chosen: list[PatchFeatureRecord] = []
    per_class: dict[int, int] = {}
    for cls in sorted(dataset_counts):
        count = dataset_counts[cls]
        if count < 1:
            continue
        if count < median:
            eligible = [r for r in pool if r.label == cls]
        else:
            eligible = [r for r in pool if r.label == cls and r.epoch == final_epoch]
        if len(eligible) > median:
            pick = np.sort(rng.choice(len(eligible), size=median, replace=False))
            eligible = [eligible[i] for i in pick]
        chosen.extend(eligible)
        per_class[cls] = len(eligible)
    return BalancedFeatureSet(client_id=client_id, records=chosen,
                              per_class_count=per_class, median_used=median)


# ---------------------------------------------------------------------------
# wire format: version byte, then little-endian header
# (client_id u32, record count u32, d u32, kept u32), then per record
# label u32 + kept x u32 indices + (kept+1)*d float32 features.

_VERSION = 1
_HEADER = struct.Struct("<IIII")


def serialize_bpf(bset: BalancedFeatureSet) -> bytes:
    if not bset.records:
        return bytes([_VERSION]) + _HEADER.pack(
            bset.client_id if bset.client_id >= 0 else 0, 0, 0, 0)
    kept = len(bset.records[0].kept_indices)
    d = bset.records[0].features.shape[1]
    for r in bset.records:
        if len(r.kept_indices) != kept or r.features.shape != (kept + 1, d):
            raise DimensionError("all records in one payload must share kept and d")
    chunks = [bytes([_VERSION]), _HEADER.pack(bset.client_id, len(bset.records), d, kept)]
    for r in bset.records:
        chunks.append(struct.pack("<I", r.label))
        chunks.append(r.kept_indices.astype("<u4").tobytes())
        chunks.append(r.features.astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


def deserialize_bpf(payload: bytes) -> BalancedFeatureSet:
    if payload[0] != _VERSION:
        raise DimensionError(f"unsupported BPF payload version {payload[0]}")
    client_id, count, d, kept = _HEADER.unpack_from(payload, 1)
    off = 1 + _HEADER.size
    records = []
    per_class: dict[int, int] = {}
    for _ in range(count):
        (label,) = struct.unpack_from("<I", payload, off)
        off += 4
        idx = np.frombuffer(payload, dtype="<u4", count=kept, offset=off).astype(np.int64)
        off += 4 * kept
        feats = np.frombuffer(payload, dtype="<f4", count=(kept + 1) * d,
                              offset=off).reshape(kept + 1, d).copy()
        off += 4 * (kept + 1) * d
        records.append(PatchFeatureRecord(client_id, int(label), 0, idx, feats))
        per_class[label] = per_class.get(label, 0) + 1
    if off != len(payload):
        raise DimensionError("BPF payload has trailing bytes")
    return BalancedFeatureSet(client_id=client_id, records=records,
                              per_class_count=per_class, median_used=0)


def payload_nbytes(record_count: int, kept: int, d: int) -> int:
    """Closed-form byte size of a payload (audited against serialize_bpf)."""
    return 1 + _HEADER.size + record_count * (4 + 4 * kept + 4 * (kept + 1) * d)
