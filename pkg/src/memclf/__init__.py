"""Streaming memory-augmented adaptation for embedding classifiers.

Given precomputed unit-norm image and text embeddings, the engine keeps a
dynamic per-class memory of confident test features (written online with
entropy-based eviction) and an optional frozen memory of labeled shots,
reads out sample-adaptive classifiers from both through an attention
readout, and fuses the resulting predictions with the plain text
classifier.  Zero-shot and training-free modes use identity projections;
the few-shot mode trains four residual projection maps on the shots.
"""

from .embeddings_io import (
    DatasetManifest,
    FeatureSet,
    TextClassifier,
    load_feature_set,
    load_manifest,
    load_text_classifier,
    save_feature_set,
    save_manifest,
    save_text_classifier,
    unit_rows,
    validate_against,
)
from .memory import (
    DynamicMemory,
    StaticMemory,
    WriteOutcome,
    build_static,
    build_static_from_labeled,
    footprint_bytes,
)
from .pipeline import (
    EngineState,
    FusionWeights,
    Prediction,
    RunMode,
    RunResult,
    TestSample,
    confidence_select,
    dynamic_bank,
    entropy,
    fuse,
    predict_dynamic,
    predict_static,
    process_test_sample,
    pseudo_label,
    render_report,
    run_stream,
    stream_from_feature_set,
    text_predict,
)
from .readout import (
    LinearMap,
    ProjectionSet,
    ReadoutConfig,
    Weighting,
    load_projections,
    m2p,
    phi,
    project,
    readout_all,
    readout_class,
    save_projections,
)
from .search import ALPHA_GRID, FIXED_WEIGHTS, alpha_grid_search, evaluate_accuracy
from .synthetic import CALIBRATED_SPEC, SyntheticSpec, make_synthetic, text_only_accuracy
from .training import (
    OptimizerState,
    TrainConfig,
    backward,
    cosine_lr,
    optimizer_step,
    train,
    training_loss,
)

__version__ = "0.1.0"
