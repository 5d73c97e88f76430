"""Writer for the EMBF v1 embedding container.

The layout is the engine's wire format (little-endian): magic ``EMBF``,
u32 version 1, u32 D, u64 N, u32 flags (bit0 labels, bit1 view groups),
then N*D f32 features row-major, then the optional i32 label and u32
view-group sections.  Rows must already be unit-norm; the writer checks
and refuses rather than silently renormalizing.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMBF"
VERSION = 1
NORM_TOL = 1e-4
_HEADER = struct.Struct("<4sIIQI")


class EmbfWriteError(ValueError):
    pass


def write_embf(path: str | Path, features: np.ndarray,
               labels: np.ndarray | None = None,
               view_groups: np.ndarray | None = None) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2 or features.shape[1] < 1:
        raise EmbfWriteError(f"features must be a non-degenerate 2-D array, got {features.shape}")
    count, dim = features.shape
    norms = np.linalg.norm(features.astype(np.float64), axis=1)
    if count and np.abs(norms - 1.0).max() > NORM_TOL:
        raise EmbfWriteError("feature rows must be unit-norm within 1e-4")
    if labels is not None and len(labels) != count:
        raise EmbfWriteError("labels length must match the row count")
    if view_groups is not None:
        if len(view_groups) != count:
            raise EmbfWriteError("view_groups length must match the row count")
        if count > 1 and np.any(np.diff(np.asarray(view_groups, dtype=np.int64)) < 0):
            raise EmbfWriteError("view_groups must be non-decreasing")

    flags = (1 if labels is not None else 0) | (2 if view_groups is not None else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, count, flags))
        fh.write(features.tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())
        if view_groups is not None:
            fh.write(np.ascontiguousarray(view_groups, dtype="<u4").tobytes())


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise EmbfWriteError("cannot normalize a zero embedding")
    return (matrix / norms).astype(np.float32)
