"""Encoder backends behind one tiny interface.

An encoder id selects the backend: ``toy:<dim>`` is a deterministic
projection encoder for tests and plumbing checks, ``clip:<model>`` loads
a pretrained vision-language checkpoint through transformers (the weights
must be available locally; a failed load aborts the export).
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

from .embf import unit_rows

_TOY_PATCH = 16  # toy encoder downsamples images to 16x16 RGB


class EncoderLoadError(RuntimeError):
    pass


class ToyEncoder:
    """Deterministic stand-in encoder: fixed random projection of pixels.

    Image features are a seeded Gaussian projection of the downsampled
    RGB grid; text features are hash-seeded Gaussian directions.  Not
    semantically meaningful, but fully reproducible and unit-norm, which
    is all the file contract needs.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise EncoderLoadError(f"toy encoder dim must be positive, got {dim}")
        self.dim = dim
        rng = np.random.default_rng(dim)
        self._projection = rng.standard_normal((_TOY_PATCH * _TOY_PATCH * 3, dim))
        self._projection /= np.linalg.norm(self._projection, axis=0, keepdims=True)

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        rows = np.empty((len(images), self.dim), dtype=np.float64)
        for i, image in enumerate(images):
            small = image.convert("RGB").resize((_TOY_PATCH, _TOY_PATCH), Image.BILINEAR)
            flat = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
            rows[i] = flat @ self._projection
        return unit_rows(rows)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        rows = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            rows[i] = rng.standard_normal(self.dim)
        return unit_rows(rows)


class ClipEncoder:
    """Pretrained vision-language encoder via transformers (local weights)."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderLoadError(f"clip backend needs torch+transformers: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id, local_files_only=True)
            self._processor = CLIPProcessor.from_pretrained(model_id, local_files_only=True)
        except Exception as exc:
            raise EncoderLoadError(f"could not load {model_id!r} locally: {exc}") from exc
        self._torch = torch
        self._model.eval()
        self.dim = int(self._model.config.projection_dim)

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        inputs = self._processor(images=images, return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return unit_rows(feats.cpu().numpy())

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        inputs = self._processor(text=texts, return_tensors="pt", padding=True,
                                 truncation=True)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return unit_rows(feats.cpu().numpy())


def load_encoder(encoder_id: str):
    """Build the encoder named by ``<kind>:<argument>``; abort on failure."""
    kind, _, argument = encoder_id.partition(":")
    if kind == "toy":
        try:
            dim = int(argument or "64")
        except ValueError as exc:
            raise EncoderLoadError(f"bad toy encoder dim {argument!r}") from exc
        return ToyEncoder(dim)
    if kind == "clip":
        if not argument:
            raise EncoderLoadError("clip encoder needs a model id, e.g. clip:<model>")
        return ClipEncoder(argument)
    raise EncoderLoadError(f"unknown encoder kind {kind!r} (expected toy: or clip:)")
