"""Online adaptation engine: the per-sample flow and the stream runner.

Per test sample: aggregate its augmented views by confidence selection,
predict with the text classifier, pseudo-label, write the aggregate into
the dynamic memory (the current sample is visible to its own readout),
read out dynamic and optional static classifiers, and fuse the available
probability vectors with the alpha weights.

Three run modes gate the knowledge sources:

    zs  dynamic memory only, identity projections
    tf  dynamic + static memories, identity projections
    fs  dynamic + static memories, trained projections
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .embeddings_io import FeatureSet, TextClassifier
from .errors import (
    DegenerateAggregate,
    ModeRequirementError,
    NoActiveSource,
    ValidationError,
)
from .memory import DynamicMemory, StaticMemory
from .readout import ProjectionSet, ReadoutConfig, m2p, readout_all

PROB_TOL = 1e-6


class RunMode(enum.Enum):
    ZS = "zs"
    TF = "tf"
    FS = "fs"


@dataclass(frozen=True)
class FusionWeights:
    """Non-negative weights for the text, dynamic and static predictions."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.3

    def __post_init__(self) -> None:
        values = (self.alpha1, self.alpha2, self.alpha3)
        if not all(math.isfinite(a) and a >= 0 for a in values):
            raise ValidationError(f"fusion weights must be finite and >= 0: {values}")
        if all(a == 0 for a in values):
            raise ValidationError("fusion weights cannot all be zero")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha1, self.alpha2, self.alpha3)


@dataclass
class TestSample:
    """The augmented views of one test image; the first view is canonical."""

    __test__ = False  # keep pytest from collecting this despite the name

    views: np.ndarray
    group: int = 0

    def __post_init__(self) -> None:
        self.views = np.atleast_2d(np.asarray(self.views, dtype=np.float32))
        if self.views.shape[0] < 1:
            raise ValidationError("a test sample needs at least one view")


@dataclass
class Prediction:
    """All probability vectors produced for one test sample."""

    p_text: np.ndarray
    p_fused: np.ndarray
    label: int
    entropy: float
    p_dynamic: np.ndarray | None = None
    p_static: np.ndarray | None = None


@dataclass
class EngineState:
    """Everything the per-sample flow reads or mutates."""

    text: TextClassifier
    dynamic: DynamicMemory
    projections: ProjectionSet
    readout_cfg: ReadoutConfig
    fusion: FusionWeights
    static: StaticMemory | None = None
    rho: float = 0.1


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValidationError("probabilities must be non-negative")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_TOL:
        raise ValidationError(f"probabilities sum to {total:.8f}, not 1")
    nonzero = p[p > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def pseudo_label(p_text: np.ndarray) -> int:
    """Argmax class of the text prediction; ties go to the lowest index."""
    return int(np.argmax(p_text))


def text_predict(feature: np.ndarray, text: TextClassifier, cfg: ReadoutConfig) -> np.ndarray:
    return m2p(feature, text.rows, cfg.logit_scale)


def confidence_select(sample: TestSample, text: TextClassifier, cfg: ReadoutConfig,
                      rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate a sample's views, keeping only the most confident fraction.

    Ranks views by the entropy of their text predictions, keeps the
    ceil(rho * V) lowest-entropy views (at least one), and returns the
    L2-normalized mean feature together with the renormalized mean of the
    kept probability vectors.
    """
    if not 0 < rho <= 1:
        raise ValidationError(f"rho must lie in (0, 1], got {rho}")
    views = sample.views.astype(np.float64)
    num_views = views.shape[0]
    if num_views == 1:
        p = text_predict(views[0], text, cfg)
        return views[0], p

    probs = np.stack([text_predict(v, text, cfg) for v in views])
    entropies = np.array([entropy(p) for p in probs])
    keep = max(1, math.ceil(rho * num_views))
    order = np.argsort(entropies, kind="stable")[:keep]

    mean_feature = views[order].mean(axis=0)
    norm = float(np.linalg.norm(mean_feature))
    if norm < 1e-12:
        raise DegenerateAggregate("selected views cancel to a zero mean feature")
    agg_feature = mean_feature / norm
    agg_probs = probs[order].mean(axis=0)
    agg_probs = agg_probs / agg_probs.sum()
    return agg_feature, agg_probs


def dynamic_bank(memory: DynamicMemory, text: TextClassifier, class_index: int) -> np.ndarray:
    """Cached features of a class followed by its text row; never empty."""
    cached = memory.occupied_features(class_index)
    text_row = text.rows[class_index : class_index + 1]
    if cached.shape[0] == 0:
        return text_row
    return np.concatenate([cached, text_row], axis=0)


def predict_dynamic(feature: np.ndarray, memory: DynamicMemory, text: TextClassifier,
                    proj: ProjectionSet, cfg: ReadoutConfig) -> np.ndarray:
    banks = [dynamic_bank(memory, text, c) for c in range(text.num_classes)]
    classifier = readout_all(feature, banks, proj, cfg)
    return m2p(feature, classifier, cfg.logit_scale)


def predict_static(feature: np.ndarray, static: StaticMemory, proj: ProjectionSet,
                   cfg: ReadoutConfig) -> np.ndarray:
    banks = [static.class_features(c) for c in range(static.num_classes)]
    classifier = readout_all(feature, banks, proj, cfg)
    return m2p(feature, classifier, cfg.logit_scale)


def fuse(p_text: np.ndarray, p_dynamic: np.ndarray | None, p_static: np.ndarray | None,
         weights: FusionWeights) -> tuple[np.ndarray, int]:
    """Weighted sum of the available sources; absent sources contribute zero.

    The fused vector is left unnormalized; only its argmax is consumed,
    with ties resolved to the lowest class index.
    """
    active = weights.alpha1
    fused = weights.alpha1 * np.asarray(p_text, dtype=np.float64)
    if p_dynamic is not None:
        fused = fused + weights.alpha2 * np.asarray(p_dynamic, dtype=np.float64)
        active += weights.alpha2
    if p_static is not None:
        fused = fused + weights.alpha3 * np.asarray(p_static, dtype=np.float64)
        active += weights.alpha3
    if active == 0:
        raise NoActiveSource("every present source has zero fusion weight")
    return fused, int(np.argmax(fused))


def process_test_sample(sample: TestSample, state: EngineState) -> Prediction:
    """Run the full per-sample flow, mutating the dynamic memory once."""
    agg_feature, _ = confidence_select(sample, state.text, state.readout_cfg, state.rho)
    p_text = text_predict(agg_feature, state.text, state.readout_cfg)
    label_guess = pseudo_label(p_text)
    text_entropy = entropy(p_text)

    state.dynamic.write(label_guess, agg_feature.astype(np.float32), text_entropy)

    p_dyn = predict_dynamic(agg_feature, state.dynamic, state.text,
                            state.projections, state.readout_cfg)
    p_stat = None
    if state.static is not None:
        p_stat = predict_static(agg_feature, state.static,
                                state.projections, state.readout_cfg)

    p_fused, label = fuse(p_text, p_dyn, p_stat, state.fusion)
    return Prediction(p_text=p_text, p_fused=p_fused, label=label,
                      entropy=text_entropy, p_dynamic=p_dyn, p_static=p_stat)


@dataclass
class RunResult:
    mode: RunMode
    predictions: list[Prediction]
    accuracy: float | None
    occupancy: np.ndarray
    footprint: int
    config: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[int]:
        return [p.label for p in self.predictions]


def check_mode_state(mode: RunMode, state: EngineState) -> None:
    """Enforce the mode gating of memories and projections."""
    if mode is RunMode.ZS:
        if state.static is not None:
            raise ModeRequirementError("zs mode runs without a static memory")
        if not state.projections.identity_mode:
            raise ModeRequirementError("zs mode requires identity projections")
    elif mode is RunMode.TF:
        if state.static is None:
            raise ModeRequirementError("tf mode needs shot features")
        if not state.projections.identity_mode:
            raise ModeRequirementError("tf mode requires identity projections")
    else:
        if state.static is None:
            raise ModeRequirementError("fs mode needs shot features")
        if state.projections.identity_mode:
            raise ModeRequirementError("fs mode needs trained projections")


def run_stream(mode: RunMode, samples: list[TestSample], state: EngineState,
               truth: np.ndarray | None = None) -> RunResult:
    """Process samples strictly in stream order and score against truth."""
    check_mode_state(mode, state)
    predictions = [process_test_sample(sample, state) for sample in samples]
    accuracy = None
    if truth is not None:
        truth = np.asarray(truth)
        if truth.shape[0] != len(predictions):
            raise ValidationError(
                f"{len(predictions)} predictions vs {truth.shape[0]} truth labels"
            )
        hits = sum(int(p.label == int(t)) for p, t in zip(predictions, truth))
        accuracy = hits / len(predictions) if predictions else 0.0
    return RunResult(
        mode=mode,
        predictions=predictions,
        accuracy=accuracy,
        occupancy=state.dynamic.occupancy_counts(),
        footprint=state.dynamic.footprint_bytes(),
        config={
            "beta": state.readout_cfg.beta,
            "logit_scale": state.readout_cfg.logit_scale,
            "weighting": state.readout_cfg.weighting.value,
            "alpha": state.fusion.as_tuple(),
            "memory_length": state.dynamic.capacity,
            "rho": state.rho,
        },
    )


def stream_from_feature_set(fset: FeatureSet) -> tuple[list[TestSample], np.ndarray | None]:
    """Group a test feature set into samples by its contiguous view groups.

    Without view groups every row is its own single-view sample.  The
    truth label of a multi-view sample must be constant across its views.
    """
    samples: list[TestSample] = []
    truth: list[int] = []
    has_labels = fset.labels is not None

    if fset.view_groups is None:
        for i in range(fset.count):
            samples.append(TestSample(views=fset.features[i : i + 1], group=i))
            if has_labels:
                truth.append(int(fset.labels[i]))
    else:
        start = 0
        groups = fset.view_groups
        while start < fset.count:
            end = start
            while end < fset.count and groups[end] == groups[start]:
                end += 1
            samples.append(TestSample(views=fset.features[start:end],
                                      group=int(groups[start])))
            if has_labels:
                block = fset.labels[start:end]
                if np.any(block != block[0]):
                    raise ValidationError(
                        f"view group {int(groups[start])} mixes labels"
                    )
                truth.append(int(block[0]))
            start = end

    return samples, (np.asarray(truth, dtype=np.int64) if has_labels else None)


def render_report(result: RunResult, include_labels: bool = True) -> str:
    """Structured text report: metrics, occupancy histogram, config echo."""
    lines = []
    lines.append("run report")
    lines.append("==========")
    lines.append(f"mode: {result.mode.value}")
    lines.append(f"samples: {len(result.predictions)}")
    if result.accuracy is None:
        lines.append("accuracy: n/a (stream is unlabeled)")
    else:
        lines.append(f"accuracy: {result.accuracy:.4f}")
    lines.append(f"dynamic memory footprint bytes: {result.footprint}")

    occupancy = result.occupancy
    lines.append(
        "occupancy: min={} median={} max={} total={}".format(
            int(occupancy.min()), int(np.median(occupancy)),
            int(occupancy.max()), int(occupancy.sum()),
        )
    )
    values, counts = np.unique(occupancy, return_counts=True)
    histogram = " ".join(f"{int(v)}:{int(c)}" for v, c in zip(values, counts))
    lines.append(f"occupancy histogram (slots:classes): {histogram}")

    config = ", ".join(f"{k}={v}" for k, v in result.config.items())
    lines.append(f"config: {config}")
    if include_labels:
        lines.append("labels: " + " ".join(str(lbl) for lbl in result.labels))
    return "\n".join(lines) + "\n"
