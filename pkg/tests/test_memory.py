import numpy as np
import pytest

from memclf.errors import NotNormalized, ShotCountMismatch, ValidationError
from memclf.memory import (
    DynamicMemory,
    build_static,
    build_static_from_labeled,
    footprint_bytes,
    load_snapshot,
    save_snapshot,
)

from helpers import random_unit_rows


def e(i, dim=4):
    row = np.zeros(dim, dtype=np.float32)
    row[i] = 1.0
    return row


class TestWriteDynamic:
    def test_insert_into_empty_class(self):
        mem = DynamicMemory(num_classes=2, capacity=3, dim=4)
        outcome = mem.write(0, e(0), 0.3)
        assert (outcome.kind, outcome.slot) == ("inserted", 0)
        assert mem.occupancy(0) == 1

    def test_inserts_fill_slots_in_order(self):
        mem = DynamicMemory(1, 3, 4)
        assert mem.write(0, e(0), 0.5).slot == 0
        assert mem.write(0, e(1), 0.1).slot == 1
        assert mem.write(0, e(2), 0.9).slot == 2

    def test_replaces_max_entropy_when_strictly_better(self):
        mem = DynamicMemory(1, 2, 4)
        mem.write(0, e(0), 0.5)
        mem.write(0, e(1), 0.9)
        outcome = mem.write(0, e(2), 0.7)
        assert (outcome.kind, outcome.slot) == ("replaced", 1)
        assert sorted(mem.occupied_entropies(0).tolist()) == [0.5, 0.7]

    def test_equal_entropy_newcomer_is_rejected(self):
        mem = DynamicMemory(1, 2, 4)
        mem.write(0, e(0), 0.5)
        mem.write(0, e(1), 0.9)
        outcome = mem.write(0, e(2), 0.9)
        assert outcome.kind == "rejected"
        assert np.array_equal(mem.occupied_features(0), np.stack([e(0), e(1)]))

    def test_max_entropy_tie_evicts_lowest_slot(self):
        mem = DynamicMemory(1, 2, 4)
        mem.write(0, e(0), 0.9)
        mem.write(0, e(1), 0.9)
        outcome = mem.write(0, e(2), 0.5)
        assert (outcome.kind, outcome.slot) == ("replaced", 0)

    def test_rejects_bad_inputs(self):
        mem = DynamicMemory(2, 2, 4)
        with pytest.raises(ValidationError):
            mem.write(5, e(0), 0.1)
        with pytest.raises(ValidationError):
            mem.write(0, e(0), float("inf"))
        with pytest.raises(NotNormalized):
            mem.write(0, np.array([0.5, 0, 0, 0], dtype=np.float32), 0.1)

    def test_other_classes_untouched_and_occupancy_monotone(self):
        rng = np.random.default_rng(0)
        mem = DynamicMemory(3, 4, 6)
        before_occ = mem.occupancy_counts()
        for _ in range(50):
            cls = int(rng.integers(0, 3))
            snapshot = {
                c: mem.occupied_features(c).copy() for c in range(3) if c != cls
            }
            occ = mem.occupancy(cls)
            mem.write(cls, random_unit_rows(rng, 1, 6)[0], float(rng.random()))
            assert mem.occupancy(cls) >= occ
            for c, feats in snapshot.items():
                assert np.array_equal(mem.occupied_features(c), feats)
        assert np.all(mem.occupancy_counts() >= before_occ)


class TestOccupiedFeatures:
    def test_empty_class(self):
        mem = DynamicMemory(2, 3, 4)
        assert mem.occupied_features(1).shape == (0, 4)

    def test_single_and_order(self):
        mem = DynamicMemory(1, 3, 4)
        mem.write(0, e(2), 0.1)
        assert np.array_equal(mem.occupied_features(0), e(2)[None])
        mem.write(0, e(3), 0.2)
        assert np.array_equal(mem.occupied_features(0), np.stack([e(2), e(3)]))

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            DynamicMemory(2, 3, 4).occupied_features(2)


def offline_kept(entropies: np.ndarray, capacity: int) -> np.ndarray:
    return np.sort(entropies)[: min(capacity, entropies.size)]


def test_greedy_matches_offline_sort_on_random_streams():
    rng = np.random.default_rng(11)
    for _ in range(40):
        capacity = int(rng.integers(1, 12))
        length = int(rng.integers(1, 120))
        # quantized values mixed in so ties actually occur
        stream = np.where(
            rng.random(length) < 0.5,
            rng.random(length),
            np.round(rng.random(length), 1),
        )
        mem = DynamicMemory(1, capacity, 4)
        vec = e(0)
        for value in stream:
            mem.write(0, vec, float(value))
        kept = np.sort(mem.occupied_entropies(0))
        assert np.array_equal(kept, offline_kept(stream, capacity))


class TestStaticMemory:
    def test_build_two_classes_one_shot(self):
        static = build_static([e(0)[None], e(1)[None]])
        assert static.num_classes == 2 and static.shots == 1
        assert np.array_equal(static.class_features(0), e(0)[None])
        assert np.array_equal(static.class_features(1), e(1)[None])

    def test_ragged_shot_counts(self):
        with pytest.raises(ShotCountMismatch):
            build_static([np.stack([e(0), e(1)]), e(2)[None]])

    def test_build_from_labeled_ragged(self):
        feats = np.stack([e(0), e(1), e(2)])
        labels = np.array([0, 0, 1])
        with pytest.raises(ShotCountMismatch):
            build_static_from_labeled(feats, labels, 2)

    def test_frozen_after_build(self):
        static = build_static([e(0)[None], e(1)[None]])
        with pytest.raises(ValueError):
            static.features[0, 0, 0] = 5.0

    def test_footprint_method_counts_payload_bytes(self):
        static = build_static_from_labeled(
            random_unit_rows(np.random.default_rng(0), 8, 4),
            np.repeat(np.arange(2), 4),
            2,
        )
        assert static.footprint_bytes() == 2 * 4 * 4 * 4


class TestFootprint:
    def test_dynamic_imagenet_scale(self):
        assert footprint_bytes(1000, 50, 1024) == 204_800_000

    def test_static_sixteen_shot_scale(self):
        assert footprint_bytes(1000, 16, 1024) == 65_536_000

    def test_minimal(self):
        assert footprint_bytes(1, 1, 1) == 4

    def test_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            footprint_bytes(0, 1, 1)


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    mem = DynamicMemory(3, 4, 6)
    for _ in range(20):
        mem.write(int(rng.integers(0, 3)), random_unit_rows(rng, 1, 6)[0],
                  float(rng.random()))
    path = tmp_path / "mem.embs"
    save_snapshot(mem, path)
    loaded = load_snapshot(path)
    assert np.array_equal(loaded.occupancy_counts(), mem.occupancy_counts())
    for c in range(3):
        assert np.array_equal(loaded.occupied_features(c), mem.occupied_features(c))
        # entropies round-trip at f32 precision (the on-disk dtype)
        assert np.allclose(loaded.occupied_entropies(c), mem.occupied_entropies(c),
                           atol=1e-6)
