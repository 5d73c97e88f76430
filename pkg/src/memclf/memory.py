"""Per-class feature memories: a writable dynamic bank and a frozen shot bank.

The dynamic memory keeps at most L cached features per class together with
the prediction entropy recorded when each was written.  Writes fill empty
slots first; once a class is full, a new feature replaces the current
maximum-entropy slot only when its own entropy is strictly smaller, so the
bank greedily converges to the L lowest-entropy samples seen.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    MalformedFile,
    NotNormalized,
    ShotCountMismatch,
    Truncated,
    ValidationError,
    VersionMismatch,
)
from .embeddings_io import NORM_TOL

SNAPSHOT_MAGIC = b"EMBS"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class WriteOutcome:
    """Result of one dynamic-memory write."""

    kind: str  # "inserted" | "replaced" | "rejected"
    slot: int | None = None

    @property
    def stored(self) -> bool:
        return self.kind != "rejected"


def _check_unit(vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float32).reshape(-1)
    norm = float(np.linalg.norm(vector.astype(np.float64)))
    if abs(norm - 1.0) > NORM_TOL:
        raise NotNormalized(f"vector has norm {norm:.6g}")
    return vector


class DynamicMemory:
    """C classes x L slots of (feature, entropy), filled online.

    Unoccupied slots are masked out of every read rather than stored as
    zero vectors: a zero row cannot be L2-normalized and would contribute
    nothing to the readout anyway.  Occupied slots always form a prefix
    of the slot range because insertion targets the lowest empty index
    and replacement never changes occupancy.
    """

    def __init__(self, num_classes: int, capacity: int, dim: int):
        if num_classes < 1 or capacity < 1 or dim < 1:
            raise ValidationError("num_classes, capacity and dim must be positive")
        self.num_classes = num_classes
        self.capacity = capacity
        self.dim = dim
        # Entropies stay float64 so eviction comparisons are exact against
        # the pipeline-computed values; snapshots downcast to f32 on disk.
        self._features = np.zeros((num_classes, capacity, dim), dtype=np.float32)
        self._entropies = np.full((num_classes, capacity), np.inf, dtype=np.float64)
        self._occupancy = np.zeros(num_classes, dtype=np.int64)

    def occupancy(self, class_index: int) -> int:
        self._check_class(class_index)
        return int(self._occupancy[class_index])

    def occupancy_counts(self) -> np.ndarray:
        return self._occupancy.copy()

    def _check_class(self, class_index: int) -> None:
        if not 0 <= class_index < self.num_classes:
            raise ValidationError(
                f"class index {class_index} out of range [0, {self.num_classes})"
            )

    def write(self, class_index: int, feature: np.ndarray, entropy: float) -> WriteOutcome:
        """Store (feature, entropy) for a class, evicting by maximum entropy.

        Returns Inserted(slot) when an empty slot was filled, Replaced(slot)
        when a strictly lower entropy displaced the worst slot, and Rejected
        when the memory is full and the newcomer is no better.  Ties never
        evict; among equal maximum entropies the lowest slot index goes.
        """
        self._check_class(class_index)
        if not np.isfinite(entropy):
            raise ValidationError(f"entropy must be finite, got {entropy}")
        feature = _check_unit(feature)
        if feature.shape[0] != self.dim:
            raise ValidationError(f"feature dim {feature.shape[0]} != memory dim {self.dim}")

        filled = int(self._occupancy[class_index])
        if filled < self.capacity:
            slot = filled
            self._features[class_index, slot] = feature
            self._entropies[class_index, slot] = entropy
            self._occupancy[class_index] = filled + 1
            return WriteOutcome("inserted", slot)

        slot = int(np.argmax(self._entropies[class_index]))
        if entropy < float(self._entropies[class_index, slot]):
            self._features[class_index, slot] = feature
            self._entropies[class_index, slot] = entropy
            return WriteOutcome("replaced", slot)
        return WriteOutcome("rejected")

    def occupied_features(self, class_index: int) -> np.ndarray:
        """Features of occupied slots in slot order; shape (occupancy, D)."""
        self._check_class(class_index)
        filled = int(self._occupancy[class_index])
        return self._features[class_index, :filled]

    def occupied_entropies(self, class_index: int) -> np.ndarray:
        self._check_class(class_index)
        filled = int(self._occupancy[class_index])
        return self._entropies[class_index, :filled]

    def footprint_bytes(self) -> int:
        return footprint_bytes(self.num_classes, self.capacity, self.dim)


class StaticMemory:
    """Frozen bank of the K labeled shot features per class."""

    def __init__(self, features: np.ndarray):
        features = np.ascontiguousarray(features, dtype=np.float32)
        if features.ndim != 3:
            raise ValidationError("static memory expects a (C, K, D) array")
        norms = np.linalg.norm(features.astype(np.float64), axis=2)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise NotNormalized("static memory rows must be unit-norm")
        features.setflags(write=False)
        self._features = features

    @property
    def num_classes(self) -> int:
        return int(self._features.shape[0])

    @property
    def shots(self) -> int:
        return int(self._features.shape[1])

    @property
    def dim(self) -> int:
        return int(self._features.shape[2])

    @property
    def features(self) -> np.ndarray:
        return self._features

    def class_features(self, class_index: int) -> np.ndarray:
        if not 0 <= class_index < self.num_classes:
            raise ValidationError(
                f"class index {class_index} out of range [0, {self.num_classes})"
            )
        return self._features[class_index]

    def footprint_bytes(self) -> int:
        return footprint_bytes(self.num_classes, self.shots, self.dim)


def build_static(shot_features: list[np.ndarray]) -> StaticMemory:
    """Build the frozen shot memory from per-class lists of K unit vectors.

    Every class must supply the same number of shots; ragged input raises
    ShotCountMismatch.
    """
    if not shot_features:
        raise ValidationError("need at least one class of shots")
    arrays = [np.asarray(block, dtype=np.float32) for block in shot_features]
    shots = arrays[0].shape[0] if arrays[0].ndim == 2 else -1
    for index, block in enumerate(arrays):
        if block.ndim != 2:
            raise ValidationError(f"class {index} shots must form a 2-D array")
        if block.shape[0] != shots:
            raise ShotCountMismatch(
                f"class {index} has {block.shape[0]} shots, class 0 has {shots}"
            )
    if shots < 1:
        raise ValidationError("each class needs at least one shot")
    return StaticMemory(np.stack(arrays, axis=0))


def build_static_from_labeled(features: np.ndarray, labels: np.ndarray,
                              num_classes: int) -> StaticMemory:
    """Group a labeled feature matrix by class and build the shot memory."""
    blocks = [features[labels == c] for c in range(num_classes)]
    counts = {len(b) for b in blocks}
    if len(counts) != 1:
        raise ShotCountMismatch(f"classes have unequal shot counts: {sorted(counts)}")
    return build_static(blocks)


def footprint_bytes(num_classes: int, slots: int, dim: int) -> int:
    """Payload bytes of a memory bank: C * slots * D * 4 (float32 features)."""
    if num_classes < 1 or slots < 1 or dim < 1:
        raise ValidationError("all footprint arguments must be positive")
    return num_classes * slots * dim * 4


def save_snapshot(memory: DynamicMemory, path: str | Path) -> None:
    """Dump the dynamic memory (features + per-slot entropies) for resume."""
    header = _SNAPSHOT_HEADER.pack(
        SNAPSHOT_MAGIC, SNAPSHOT_VERSION, memory.num_classes, memory.capacity, memory.dim
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(memory.occupancy_counts(), dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(memory._features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(memory._entropies, dtype="<f4").tobytes())


def load_snapshot(path: str | Path) -> DynamicMemory:
    raw = Path(path).read_bytes()
    if len(raw) < _SNAPSHOT_HEADER.size:
        raise Truncated(f"{path}: shorter than the snapshot header")
    magic, version, num_classes, capacity, dim = _SNAPSHOT_HEADER.unpack_from(raw, 0)
    if magic != SNAPSHOT_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise VersionMismatch(f"{path}: snapshot version {version}")
    offset = _SNAPSHOT_HEADER.size
    expected = num_classes * 4 + num_classes * capacity * dim * 4 + num_classes * capacity * 4
    if len(raw) - offset != expected:
        raise MalformedFile(f"{path}: payload size mismatch")

    occupancy = np.frombuffer(raw, dtype="<u4", count=num_classes, offset=offset)
    offset += num_classes * 4
    features = np.frombuffer(raw, dtype="<f4", count=num_classes * capacity * dim,
                             offset=offset).reshape(num_classes, capacity, dim)
    offset += num_classes * capacity * dim * 4
    entropies = np.frombuffer(raw, dtype="<f4", count=num_classes * capacity,
                              offset=offset).reshape(num_classes, capacity)

    memory = DynamicMemory(num_classes, capacity, dim)
    memory._features[:] = features
    memory._entropies[:] = entropies.astype(np.float64)
    memory._occupancy[:] = occupancy.astype(np.int64)
    if np.any(memory._occupancy > capacity):
        raise MalformedFile(f"{path}: occupancy exceeds capacity")
    return memory
