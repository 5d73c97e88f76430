"""The export run: walk an image tree, encode, and write the EMBF files."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from .embf import unit_rows, write_embf
from .encoders import load_encoder
from .views import center_crop, make_views

log = logging.getLogger("embexport")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass
class ExportSpec:
    """What to encode and where the EMBF files go.

    ``image_root`` holds one subdirectory per class with the test images.
    ``shots`` optionally maps class names to labeled shot image paths.
    """

    encoder: str
    image_root: Path
    out_dir: Path
    templates: list[str] = field(default_factory=lambda: ["a photo of a {}."])
    views_per_image: int = 1
    seed: int = 0
    shots: dict[str, list[Path]] = field(default_factory=dict)

    def validate(self) -> None:
        if self.views_per_image < 1:
            raise ValueError("views_per_image must be >= 1")
        if not self.templates:
            raise ValueError("at least one prompt template is required")
        for template in self.templates:
            if "{}" not in template:
                raise ValueError(f"template {template!r} has no class-name slot")


@dataclass
class ExportResult:
    class_names: list[str]
    dim: int
    test_rows: int
    shot_rows: int
    skipped: int
    out_dir: Path


def load_export_spec(path: str | Path) -> ExportSpec:
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: export spec must be a mapping")
    base = path.parent
    shots = {
        str(name): [base / p for p in paths]
        for name, paths in (data.get("shots") or {}).items()
    }
    return ExportSpec(
        encoder=str(data["encoder"]),
        image_root=base / data["image_root"],
        out_dir=base / data.get("out_dir", "export"),
        templates=[str(t) for t in data.get("templates", ["a photo of a {}."])],
        views_per_image=int(data.get("views_per_image", 1)),
        seed=int(data.get("seed", 0)),
        shots=shots,
    )


def _list_class_dirs(image_root: Path) -> list[Path]:
    if not image_root.is_dir():
        raise FileNotFoundError(f"image root {image_root} is not a directory")
    class_dirs = sorted(p for p in image_root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"image root {image_root} has no class subdirectories")
    return class_dirs


def _open_image(path: Path):
    try:
        with Image.open(path) as handle:
            return handle.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        log.warning("skipping unreadable image %s: %s", path, exc)
        return None


def _encode_text_rows(encoder, class_names: list[str], templates: list[str]) -> np.ndarray:
    rows = []
    for name in class_names:
        prompts = [template.format(name) for template in templates]
        embedded = encoder.encode_texts(prompts).astype(np.float64)
        rows.append(embedded.mean(axis=0))
    return unit_rows(np.stack(rows))


def run_export(spec: ExportSpec) -> ExportResult:
    """Encode the tree and write text/test(/shots) EMBF files plus a manifest."""
    spec.validate()
    encoder = load_encoder(spec.encoder)
    class_dirs = _list_class_dirs(spec.image_root)
    class_names = [p.name for p in class_dirs]
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    text_rows = _encode_text_rows(encoder, class_names, spec.templates)
    write_embf(spec.out_dir / "text.embf", text_rows)

    features: list[np.ndarray] = []
    labels: list[int] = []
    groups: list[int] = []
    skipped = 0
    group_id = 0
    for label, class_dir in enumerate(class_dirs):
        image_paths = sorted(p for p in class_dir.iterdir()
                             if p.suffix.lower() in IMAGE_SUFFIXES)
        for image_path in image_paths:
            image = _open_image(image_path)
            if image is None:
                skipped += 1
                continue
            views = make_views(image, spec.views_per_image, rng)
            features.append(encoder.encode_images(views))
            labels.extend([label] * len(views))
            groups.extend([group_id] * len(views))
            group_id += 1
    if not features:
        raise FileNotFoundError(f"no readable images under {spec.image_root}")
    test_features = np.concatenate(features, axis=0)
    write_embf(spec.out_dir / "test.embf", test_features,
               labels=np.asarray(labels, dtype=np.int32),
               view_groups=np.asarray(groups, dtype=np.uint32))

    shot_rows = 0
    if spec.shots:
        missing = set(spec.shots) - set(class_names)
        if missing:
            raise ValueError(f"shot list names unknown classes: {sorted(missing)}")
        shot_features: list[np.ndarray] = []
        shot_labels: list[int] = []
        counts: dict[str, int] = {}
        for label, name in enumerate(class_names):
            kept = 0
            for shot_path in spec.shots.get(name, []):
                image = _open_image(Path(shot_path))
                if image is None:
                    skipped += 1
                    continue
                shot_features.append(encoder.encode_images([center_crop(image)]))
                shot_labels.append(label)
                kept += 1
            counts[name] = kept
        if len(set(counts.values())) > 1:
            log.warning("shot counts are unequal across classes: %s", counts)
        if shot_features:
            write_embf(spec.out_dir / "shots.embf",
                       np.concatenate(shot_features, axis=0),
                       labels=np.asarray(shot_labels, dtype=np.int32))
            shot_rows = len(shot_labels)

    manifest = {
        "class_names": class_names,
        "files": {"text": "text.embf", "test": "test.embf"},
        "fusion": {"alpha1": 1.0, "alpha2": 1.0, "alpha3": 0.3},
        "readout": {"beta": 5.5, "logit_scale": 100.0, "weighting": "sharpened_exp"},
        "memory_length": 50,
        "rho": 0.1,
        "seed": spec.seed,
    }
    if shot_rows:
        manifest["files"]["shots"] = "shots.embf"
    with open(spec.out_dir / "manifest.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)

    if skipped:
        log.warning("skipped %d unreadable image(s)", skipped)
    log.info("exported %d test rows, %d shot rows, %d classes, dim %d",
             test_features.shape[0], shot_rows, len(class_names), encoder.dim)
    return ExportResult(
        class_names=class_names,
        dim=encoder.dim,
        test_rows=int(test_features.shape[0]),
        shot_rows=shot_rows,
        skipped=skipped,
        out_dir=spec.out_dir,
    )
