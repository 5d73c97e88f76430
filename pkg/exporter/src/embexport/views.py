"""View generation: one canonical center crop plus seeded random crops."""

from __future__ import annotations

import math

import numpy as np
from PIL import Image

CANONICAL_SIZE = 224


def center_crop(image: Image.Image, size: int = CANONICAL_SIZE) -> Image.Image:
    """Resize the shorter side to ``size`` and crop the center square."""
    width, height = image.size
    scale = size / min(width, height)
    resized = image.resize((max(size, round(width * scale)),
                            max(size, round(height * scale))),
                           Image.BICUBIC)
    left = (resized.width - size) // 2
    top = (resized.height - size) // 2
    return resized.crop((left, top, left + size, top + size))


def random_resized_crop(image: Image.Image, rng: np.random.Generator,
                        size: int = CANONICAL_SIZE,
                        scale: tuple[float, float] = (0.3, 1.0),
                        ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> Image.Image:
    """One random area/aspect crop resized to ``size`` x ``size``."""
    width, height = image.size
    area = width * height
    for _ in range(10):
        target_area = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        crop_w = round(math.sqrt(target_area * aspect))
        crop_h = round(math.sqrt(target_area / aspect))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            left = int(rng.integers(0, width - crop_w + 1))
            top = int(rng.integers(0, height - crop_h + 1))
            patch = image.crop((left, top, left + crop_w, top + crop_h))
            return patch.resize((size, size), Image.BICUBIC)
    return center_crop(image, size)


def make_views(image: Image.Image, count: int,
               rng: np.random.Generator) -> list[Image.Image]:
    """Canonical center crop first, then ``count - 1`` random crops."""
    views = [center_crop(image)]
    for _ in range(count - 1):
        views.append(random_resized_crop(image, rng))
    return views
