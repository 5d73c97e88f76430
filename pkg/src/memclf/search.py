"""Top-1 accuracy and the exhaustive fusion-weight grid search.

The search fixes the text weight at 1.0 and sweeps the dynamic and static
weights over a 12-point logarithmic grid.  Because the fusion step is the
only place the weights enter, the stream runs once and every grid point
re-fuses the cached per-sample probability vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .pipeline import (
    EngineState,
    FusionWeights,
    Prediction,
    RunMode,
    TestSample,
    fuse,
    run_stream,
)

ALPHA_GRID: tuple[float, ...] = (
    0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0
)
ALPHA1_FIXED = 1.0
FIXED_WEIGHTS = FusionWeights(1.0, 1.0, 0.3)


def evaluate_accuracy(predicted: list[int] | np.ndarray,
                      truth: list[int] | np.ndarray) -> float:
    """Fraction of exact label matches."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValidationError(
            f"prediction/truth length mismatch: {predicted.shape} vs {truth.shape}"
        )
    if predicted.size == 0:
        raise ValidationError("cannot score an empty stream")
    return float((predicted == truth).mean())


def refuse_labels(predictions: list[Prediction], weights: FusionWeights) -> np.ndarray:
    """Re-run only the fusion step over cached per-sample probability vectors."""
    labels = np.empty(len(predictions), dtype=np.int64)
    for i, pred in enumerate(predictions):
        _, labels[i] = fuse(pred.p_text, pred.p_dynamic, pred.p_static, weights)
    return labels


@dataclass
class SearchResult:
    best: FusionWeights
    best_accuracy: float
    evaluations: int
    table: dict[tuple[float, float], float]


def alpha_grid_search(mode: RunMode, samples: list[TestSample], truth: np.ndarray | None,
                      state: EngineState) -> SearchResult:
    """Exhaustive 12x12 sweep over (alpha2, alpha3) with alpha1 fixed at 1.0.

    Ties resolve to the lexicographically smallest (alpha2, alpha3).
    """
    if truth is None:
        raise ValidationError("the weight search needs a labeled stream")
    result = run_stream(mode, samples, state, truth=truth)
    truth = np.asarray(truth)

    table: dict[tuple[float, float], float] = {}
    best_pair: tuple[float, float] | None = None
    best_accuracy = -1.0
    for alpha2 in ALPHA_GRID:
        for alpha3 in ALPHA_GRID:
            weights = FusionWeights(ALPHA1_FIXED, alpha2, alpha3)
            labels = refuse_labels(result.predictions, weights)
            accuracy = evaluate_accuracy(labels, truth)
            table[(alpha2, alpha3)] = accuracy
            if accuracy > best_accuracy:
                best_accuracy = accuracy
                best_pair = (alpha2, alpha3)

    assert best_pair is not None
    return SearchResult(
        best=FusionWeights(ALPHA1_FIXED, best_pair[0], best_pair[1]),
        best_accuracy=best_accuracy,
        evaluations=len(table),
        table=table,
    )
