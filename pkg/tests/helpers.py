"""Shared construction helpers for the test suite."""

from __future__ import annotations

import numpy as np

from memclf.embeddings_io import TextClassifier, unit_rows


def unit(vector) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    return (vector / np.linalg.norm(vector)).astype(np.float32)


def random_unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    return unit_rows(rng.standard_normal((count, dim)))


def orthonormal_means(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    gaussian = rng.standard_normal((dim, num_classes))
    q, _ = np.linalg.qr(gaussian)
    return np.ascontiguousarray(q.T)


def class_structured_instance(rng: np.random.Generator, num_classes: int, dim: int,
                              shots: int, batch: int, noise: float):
    """Text rows, per-class shot bank, and a labeled batch around shared means."""
    means = orthonormal_means(rng, num_classes, dim)
    text = TextClassifier(rows=unit_rows(means + noise * rng.standard_normal((num_classes, dim))))
    shot_labels = np.repeat(np.arange(num_classes), shots)
    shot_rows = unit_rows(means[shot_labels] + noise * rng.standard_normal((num_classes * shots, dim)))
    batch_labels = rng.integers(0, num_classes, batch)
    batch_rows = unit_rows(means[batch_labels] + noise * rng.standard_normal((batch, dim)))
    return text, shot_rows.reshape(num_classes, shots, dim), batch_rows, batch_labels
