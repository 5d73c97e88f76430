"""Embedding container types, the EMBF binary format, and dataset manifests.

EMBF v1 layout (little-endian):

    bytes 0-3   magic ``EMBF``
    u32         version (currently 1)
    u32         D, feature dimension
    u64         N, row count
    u32         flags: bit0 = labels present, bit1 = view groups present
    N*D f32     features, row-major
    N   i32     labels       (only when flags bit0 set)
    N   u32     view groups  (only when flags bit1 set)

Features are stored as unit-norm 32-bit rows; normalization is validated
on load and save, never silently re-applied.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import (
    BadMagic,
    DimMismatch,
    LabelOutOfRange,
    MalformedFile,
    NotNormalized,
    Truncated,
    ValidationError,
    VersionMismatch,
    ViewGroupsUnsorted,
)

MAGIC = b"EMBF"
VERSION = 1
NORM_TOL = 1e-4

_HEADER = struct.Struct("<4sIIQI")
_FLAG_LABELS = 1
_FLAG_VIEW_GROUPS = 2


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize rows and cast to the storage dtype (float32)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("cannot normalize a zero row")
    return np.ascontiguousarray(matrix / norms, dtype=np.float32)


def _check_row_norms(matrix: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    bad = np.abs(norms - 1.0) > NORM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NotNormalized(
            f"{what} row {i} has L2 norm {norms[i]:.6g}, expected 1 within {NORM_TOL}"
        )


@dataclass
class FeatureSet:
    """N unit-norm D-dim feature rows with optional labels and view groups.

    ``view_groups`` marks augmented views of the same underlying image:
    views share a group id and groups are stored contiguously.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    view_groups: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.dtype != np.float32:
            raise ValidationError(f"features must be float32, got {self.features.dtype}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.count,):
                raise ValidationError("labels length must equal the row count")
        if self.view_groups is not None:
            self.view_groups = np.ascontiguousarray(self.view_groups, dtype=np.uint32)
            if self.view_groups.shape != (self.count,):
                raise ValidationError("view_groups length must equal the row count")

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def count(self) -> int:
        return int(self.features.shape[0])

    def validate(self, num_classes: int | None = None) -> None:
        """Check the declared invariants; raise a ValidationError subclass."""
        if self.dim <= 0:
            raise ValidationError("feature dimension must be positive")
        if self.count > 0:
            _check_row_norms(self.features, "feature")
        if self.labels is not None and self.count > 0:
            if self.labels.min() < 0:
                raise LabelOutOfRange(f"negative label {int(self.labels.min())}")
            if num_classes is not None and self.labels.max() >= num_classes:
                raise LabelOutOfRange(
                    f"label {int(self.labels.max())} with only {num_classes} classes"
                )
        if self.view_groups is not None and self.count > 1:
            if np.any(np.diff(self.view_groups.astype(np.int64)) < 0):
                raise ViewGroupsUnsorted("view_groups must be non-decreasing")

    def freeze(self) -> "FeatureSet":
        """Mark the arrays read-only; loaded sets are immutable."""
        self.features.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)
        if self.view_groups is not None:
            self.view_groups.setflags(write=False)
        return self


@dataclass
class TextClassifier:
    """One unit-norm row of text-prompt embedding per class."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        if self.rows.ndim != 2:
            raise ValidationError("classifier rows must be 2-D")
        if self.rows.dtype != np.float32:
            raise ValidationError(f"classifier rows must be float32, got {self.rows.dtype}")
        if self.rows.shape[0] < 1:
            raise ValidationError("classifier needs at least one class")

    @property
    def num_classes(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def validate(self) -> None:
        _check_row_norms(self.rows, "classifier")


def save_feature_set(fset: FeatureSet, path: str | Path) -> None:
    """Write an EMBF v1 file. Refuses to write a set violating its invariants."""
    fset.validate()
    flags = 0
    if fset.labels is not None:
        flags |= _FLAG_LABELS
    if fset.view_groups is not None:
        flags |= _FLAG_VIEW_GROUPS
    header = _HEADER.pack(MAGIC, VERSION, fset.dim, fset.count, flags)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fset.features, dtype="<f4").tobytes())
        if fset.labels is not None:
            fh.write(np.ascontiguousarray(fset.labels, dtype="<i4").tobytes())
        if fset.view_groups is not None:
            fh.write(np.ascontiguousarray(fset.view_groups, dtype="<u4").tobytes())


def load_feature_set(path: str | Path) -> FeatureSet:
    """Read an EMBF v1 file, validating structure and row norms."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise Truncated(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, dim, count, flags = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    if dim == 0:
        raise MalformedFile(f"{path}: zero feature dimension")
    if flags & ~(_FLAG_LABELS | _FLAG_VIEW_GROUPS):
        raise MalformedFile(f"{path}: unknown flag bits 0x{flags:x}")

    offset = _HEADER.size
    expected = count * dim * 4
    expected += count * 4 if flags & _FLAG_LABELS else 0
    expected += count * 4 if flags & _FLAG_VIEW_GROUPS else 0
    if len(raw) - offset < expected:
        raise Truncated(
            f"{path}: payload has {len(raw) - offset} bytes, header declares {expected}"
        )
    if len(raw) - offset > expected:
        raise MalformedFile(f"{path}: {len(raw) - offset - expected} trailing bytes")

    features = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=offset)
    features = features.reshape(count, dim).copy()
    offset += count * dim * 4
    labels = None
    if flags & _FLAG_LABELS:
        labels = np.frombuffer(raw, dtype="<i4", count=count, offset=offset).copy()
        offset += count * 4
    view_groups = None
    if flags & _FLAG_VIEW_GROUPS:
        view_groups = np.frombuffer(raw, dtype="<u4", count=count, offset=offset).copy()

    fset = FeatureSet(features=features, labels=labels, view_groups=view_groups)
    fset.validate()
    return fset.freeze()


def load_text_classifier(path: str | Path) -> TextClassifier:
    """Load a classifier stored as a plain EMBF file (one row per class)."""
    fset = load_feature_set(path)
    if fset.labels is not None or fset.view_groups is not None:
        raise MalformedFile(f"{path}: classifier files carry neither labels nor view groups")
    clf = TextClassifier(rows=np.array(fset.features, dtype=np.float32))
    clf.validate()
    clf.rows.setflags(write=False)
    return clf


def save_text_classifier(clf: TextClassifier, path: str | Path) -> None:
    clf.validate()
    save_feature_set(FeatureSet(features=np.array(clf.rows, dtype=np.float32)), path)


def validate_against(fset: FeatureSet, text: TextClassifier) -> None:
    """Cross-check a feature set against a classifier: dims match, labels in range."""
    if fset.dim != text.dim:
        raise DimMismatch(f"feature dim {fset.dim} vs classifier dim {text.dim}")
    if fset.labels is not None and fset.count > 0:
        if fset.labels.min() < 0 or fset.labels.max() >= text.num_classes:
            raise LabelOutOfRange(
                f"labels span [{int(fset.labels.min())}, {int(fset.labels.max())}] "
                f"but classifier has {text.num_classes} classes"
            )


@dataclass
class DatasetManifest:
    """Paths and settings for one dataset, stored as a YAML key/value file.

    Relative file paths are resolved against the manifest's directory.
    """

    class_names: list[str]
    text_path: Path
    test_path: Path
    shots_path: Path | None = None
    val_path: Path | None = None
    projections_path: Path | None = None
    alpha: tuple[float, float, float] = (1.0, 1.0, 0.3)
    beta: float = 5.5
    logit_scale: float = 100.0
    weighting: str = "sharpened_exp"
    memory_length: int = 50
    rho: float = 0.1
    seed: int = 0
    epochs: int = 20

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        files = {"text": str(self.text_path), "test": str(self.test_path)}
        if self.shots_path is not None:
            files["shots"] = str(self.shots_path)
        if self.val_path is not None:
            files["val"] = str(self.val_path)
        if self.projections_path is not None:
            files["projections"] = str(self.projections_path)
        return {
            "class_names": list(self.class_names),
            "files": files,
            "fusion": {
                "alpha1": self.alpha[0],
                "alpha2": self.alpha[1],
                "alpha3": self.alpha[2],
            },
            "readout": {
                "beta": self.beta,
                "logit_scale": self.logit_scale,
                "weighting": self.weighting,
            },
            "memory_length": self.memory_length,
            "rho": self.rho,
            "seed": self.seed,
            "epochs": self.epochs,
        }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest.to_dict(), fh, sort_keys=False)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise MalformedFile(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedFile(f"{path}: manifest must be a mapping")

    try:
        class_names = [str(name) for name in data["class_names"]]
        files = data["files"]
        fusion = data.get("fusion", {})
        readout = data.get("readout", {})
    except (KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: missing required section: {exc}") from exc
    if not class_names:
        raise MalformedFile(f"{path}: class_names is empty")
    if "text" not in files or "test" not in files:
        raise MalformedFile(f"{path}: files section needs 'text' and 'test' entries")

    base = path.parent

    def resolve(key: str) -> Path | None:
        value = files.get(key)
        return None if value is None else (base / value)

    return DatasetManifest(
        class_names=class_names,
        text_path=base / files["text"],
        test_path=base / files["test"],
        shots_path=resolve("shots"),
        val_path=resolve("val"),
        projections_path=resolve("projections"),
        alpha=(
            float(fusion.get("alpha1", 1.0)),
            float(fusion.get("alpha2", 1.0)),
            float(fusion.get("alpha3", 0.3)),
        ),
        beta=float(readout.get("beta", 5.5)),
        logit_scale=float(readout.get("logit_scale", 100.0)),
        weighting=str(readout.get("weighting", "sharpened_exp")),
        memory_length=int(data.get("memory_length", 50)),
        rho=float(data.get("rho", 0.1)),
        seed=int(data.get("seed", 0)),
        epochs=int(data.get("epochs", 20)),
    )


def check_manifest_files(manifest: DatasetManifest) -> dict[str, int]:
    """Verify referenced files exist and declare one common dimension.

    Returns a mapping of role name to declared dimension.
    """
    dims: dict[str, int] = {}
    paths = {"text": manifest.text_path, "test": manifest.test_path}
    if manifest.shots_path is not None:
        paths["shots"] = manifest.shots_path
    if manifest.val_path is not None:
        paths["val"] = manifest.val_path
    for role, p in paths.items():
        if not Path(p).is_file():
            raise MalformedFile(f"manifest references missing {role} file: {p}")
        raw = Path(p).open("rb").read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise Truncated(f"{p}: file shorter than the header")
        magic, version, dim, _, _ = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise BadMagic(f"{p}: bad magic {magic!r}")
        if version != VERSION:
            raise VersionMismatch(f"{p}: version {version}, expected {VERSION}")
        dims[role] = int(dim)
    if len(set(dims.values())) > 1:
        raise DimMismatch(f"manifest files disagree on dimension: {dims}")
    return dims
