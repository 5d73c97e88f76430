"""Attention readout: build a per-sample classifier row from a memory bank.

A classifier row for class y is the re-normalized similarity-weighted sum
of the bank features,

    row_y = w_o( sum_i  weight(q . k_i) * v_i ),

where q, k_i, v_i are the query and bank features passed through residual
projections w(x) = L2(x + W x + b) and the default weight is the sharpened
exponential phi(x) = exp(-beta * (1 - x)).  With zero-initialized
projections every w degenerates to plain L2 normalization, so the whole
readout is training-free.  Inference math runs in float64.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DegenerateProjection,
    EmptyBank,
    MalformedFile,
    Truncated,
    ValidationError,
    VersionMismatch,
)

PROJECTION_MAGIC = b"EMBP"
PROJECTION_VERSION = 1
_PROJECTION_HEADER = struct.Struct("<4sIII")
_MIN_NORM = 1e-12


class Weighting(enum.Enum):
    SHARPENED_EXP = "sharpened_exp"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class ReadoutConfig:
    """Knobs of the attention readout and the cosine-logit softmax."""

    beta: float = 5.5
    weighting: Weighting = Weighting.SHARPENED_EXP
    logit_scale: float = 100.0

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if not self.logit_scale > 0:
            raise ValidationError(f"logit_scale must be positive, got {self.logit_scale}")
        if isinstance(self.weighting, str):
            object.__setattr__(self, "weighting", Weighting(self.weighting))


def phi(x, beta: float):
    """Sharpened exponential exp(-beta * (1 - x)); maps [-1, 1] into (0, 1]."""
    return np.exp(-beta * (1.0 - np.asarray(x, dtype=np.float64)))


@dataclass
class LinearMap:
    """Residual linear map w(x) = L2(x + x @ weight + bias), row-vector convention."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, dim: int, dtype=np.float32) -> "LinearMap":
        return cls(np.zeros((dim, dim), dtype=dtype), np.zeros(dim, dtype=dtype))

    @property
    def dim(self) -> int:
        return int(self.bias.shape[0])

    def validate(self) -> None:
        if self.weight.shape != (self.dim, self.dim):
            raise ValidationError(f"weight shape {self.weight.shape} not square")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("projection parameters must be finite")


@dataclass
class ProjectionSet:
    """The four residual maps placed on query, key, value and output.

    ``identity_mode`` marks the training-free configuration: parameters are
    pinned at zero and applying a map reduces to L2 normalization, which
    leaves unit inputs unchanged.
    """

    query: LinearMap
    key: LinearMap
    value: LinearMap
    output: LinearMap
    identity_mode: bool = False

    @classmethod
    def zeros(cls, dim: int, identity_mode: bool = False, dtype=np.float32) -> "ProjectionSet":
        return cls(
            query=LinearMap.zeros(dim, dtype),
            key=LinearMap.zeros(dim, dtype),
            value=LinearMap.zeros(dim, dtype),
            output=LinearMap.zeros(dim, dtype),
            identity_mode=identity_mode,
        )

    @classmethod
    def identity(cls, dim: int) -> "ProjectionSet":
        return cls.zeros(dim, identity_mode=True)

    @property
    def dim(self) -> int:
        return self.query.dim

    def maps(self) -> dict[str, LinearMap]:
        return {"query": self.query, "key": self.key, "value": self.value,
                "output": self.output}

    def validate(self) -> None:
        for name, lin in self.maps().items():
            lin.validate()
            if lin.dim != self.dim:
                raise ValidationError(f"{name} map dim {lin.dim} != {self.dim}")


def project(lin: LinearMap | None, x: np.ndarray, identity_mode: bool = False) -> np.ndarray:
    """Apply one residual map to vectors along the last axis.

    Raises DegenerateProjection when the pre-normalization vector is
    numerically zero (norm below 1e-12).
    """
    x = np.asarray(x, dtype=np.float64)
    if identity_mode or lin is None:
        pre = x
    else:
        pre = x + x @ lin.weight.astype(np.float64) + lin.bias.astype(np.float64)
    norms = np.linalg.norm(pre, axis=-1, keepdims=True)
    if np.any(norms < _MIN_NORM):
        raise DegenerateProjection("projection output collapsed to the zero vector")
    return pre / norms


def attention_weights(sims: np.ndarray, cfg: ReadoutConfig) -> np.ndarray:
    """Turn bank similarities (last axis) into attention weights."""
    sims = np.asarray(sims, dtype=np.float64)
    if cfg.weighting is Weighting.SHARPENED_EXP:
        return phi(sims, cfg.beta)
    scaled = cfg.beta * sims
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    expd = np.exp(scaled)
    return expd / expd.sum(axis=-1, keepdims=True)


def readout_class(query: np.ndarray, bank: np.ndarray, proj: ProjectionSet,
                  cfg: ReadoutConfig) -> np.ndarray:
    """One classifier row: weighted, re-normalized combination of a bank."""
    bank = np.atleast_2d(np.asarray(bank, dtype=np.float64))
    if bank.shape[0] == 0:
        raise EmptyBank()
    q = project(proj.query, np.asarray(query, dtype=np.float64), proj.identity_mode)
    keys = project(proj.key, bank, proj.identity_mode)
    values = project(proj.value, bank, proj.identity_mode)
    sims = keys @ q
    weights = attention_weights(sims, cfg)
    combined = weights @ values
    return project(proj.output, combined, proj.identity_mode)


def readout_all(query: np.ndarray, banks: list[np.ndarray], proj: ProjectionSet,
                cfg: ReadoutConfig) -> np.ndarray:
    """Stack per-class readout rows into a (C, D) sample-adaptive classifier."""
    rows = []
    for class_index, bank in enumerate(banks):
        bank = np.atleast_2d(np.asarray(bank))
        if bank.shape[0] == 0:
            raise EmptyBank(class_index)
        rows.append(readout_class(query, bank, proj, cfg))
    return np.stack(rows, axis=0)


def m2p(feature: np.ndarray, classifier: np.ndarray, logit_scale: float) -> np.ndarray:
    """Convert a classifier matrix into probabilities for one feature.

    Softmax over scaled cosine logits, stabilized by max subtraction.
    """
    if not logit_scale > 0:
        raise ValidationError(f"logit_scale must be positive, got {logit_scale}")
    feature = np.asarray(feature, dtype=np.float64)
    classifier = np.asarray(classifier, dtype=np.float64)
    logits = logit_scale * (classifier @ feature)
    logits = logits - logits.max()
    expd = np.exp(logits)
    return expd / expd.sum()


def save_projections(proj: ProjectionSet, path: str | Path) -> None:
    """Serialize the four maps: versioned header, then q/k/v/o weight+bias blocks."""
    proj.validate()
    flags = 1 if proj.identity_mode else 0
    header = _PROJECTION_HEADER.pack(PROJECTION_MAGIC, PROJECTION_VERSION, proj.dim, flags)
    with open(path, "wb") as fh:
        fh.write(header)
        for lin in (proj.query, proj.key, proj.value, proj.output):
            fh.write(np.ascontiguousarray(lin.weight, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(lin.bias, dtype="<f4").tobytes())


def load_projections(path: str | Path) -> ProjectionSet:
    raw = Path(path).read_bytes()
    if len(raw) < _PROJECTION_HEADER.size:
        raise Truncated(f"{path}: shorter than the projection header")
    magic, version, dim, flags = _PROJECTION_HEADER.unpack_from(raw, 0)
    if magic != PROJECTION_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != PROJECTION_VERSION:
        raise VersionMismatch(f"{path}: projection version {version}")
    block = dim * dim * 4 + dim * 4
    if len(raw) - _PROJECTION_HEADER.size != 4 * block:
        raise MalformedFile(f"{path}: payload size mismatch for dim {dim}")

    offset = _PROJECTION_HEADER.size
    maps = []
    for _ in range(4):
        weight = np.frombuffer(raw, dtype="<f4", count=dim * dim,
                               offset=offset).reshape(dim, dim).copy()
        offset += dim * dim * 4
        bias = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).copy()
        offset += dim * 4
        maps.append(LinearMap(weight, bias))
    proj = ProjectionSet(query=maps[0], key=maps[1], value=maps[2], output=maps[3],
                         identity_mode=bool(flags & 1))
    proj.validate()
    return proj
