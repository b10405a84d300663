"""Synthetic chest X-ray fixtures: ellipse lungs and an ellipse heart.

Used by the test suite and for smoke runs without the public datasets.
Lungs are dark, the heart and mediastinum bright, as on a radiograph. The
lung ground truth excludes the heart, matching the public annotations.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import CxrSample, write_mask


def _ellipse(rows, cols, center, axes):
    rr, cc = np.ogrid[:rows, :cols]
    return ((rr - center[0]) / axes[0]) ** 2 + ((cc - center[1]) / axes[1]) ** 2 <= 1.0


def fixture_geometry(seed, size=512):
    """Jittered ellipse parameters, all in fractions of ``size``."""
    rng = np.random.default_rng(seed)
    j = lambda s: rng.uniform(-s, s)  # noqa: E731
    left = ((0.48 + j(0.03)) * size, (0.30 + j(0.02)) * size), ((0.28 + j(0.03)) * size, (0.12 + j(0.015)) * size)
    right = ((0.48 + j(0.03)) * size, (0.70 + j(0.02)) * size), ((0.28 + j(0.03)) * size, (0.12 + j(0.015)) * size)
    heart = ((0.66 + j(0.02)) * size, (0.47 + j(0.02)) * size), ((0.12 + j(0.015)) * size, (0.14 + j(0.015)) * size)
    return {"left_lung": left, "right_lung": right, "heart": heart}


def make_fixture_sample(seed, size=512, dataset="other", noise=8.0, sample_id=None) -> CxrSample:
    geo = fixture_geometry(seed, size)
    lungs = _ellipse(size, size, *geo["left_lung"]) | _ellipse(size, size, *geo["right_lung"])
    heart = _ellipse(size, size, *geo["heart"])
    body = _ellipse(size, size, (0.52 * size, 0.5 * size), (0.50 * size, 0.44 * size))

    rng = np.random.default_rng(seed + 10_000)
    img = np.full((size, size), 25.0)
    img[body] = 165.0
    img[lungs] = 70.0
    img[heart] = 195.0
    img += rng.normal(0.0, noise, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    rgb = np.repeat(img[:, :, None], 3, axis=2)
    return CxrSample(
        id=sample_id or f"fx{seed:04d}",
        image=rgb,
        lung_mask=lungs & ~heart,
        heart_mask=heart,
        dataset=dataset,
    )


def make_fixture_dataset(n=10, seed=0, size=512, dataset="other"):
    return [make_fixture_sample(seed * 1000 + i, size=size, dataset=dataset,
                                sample_id=f"{dataset[:2]}{seed:02d}_{i:04d}")
            for i in range(n)]


def write_fixture_dataset(root, n=10, seed=0, size=512, dataset="other", with_heart=True):
    """Write fixtures to disk in the ``images/ lung_masks/ heart_masks/`` layout."""
    from PIL import Image

    root = Path(root)
    for sub in ("images", "lung_masks") + (("heart_masks",) if with_heart else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    samples = make_fixture_dataset(n, seed, size, dataset)
    for s in samples:
        Image.fromarray(s.image).save(root / "images" / f"{s.id}.png")
        write_mask(root / "lung_masks" / f"{s.id}.png", s.lung_mask)
        if with_heart:
            write_mask(root / "heart_masks" / f"{s.id}.png", s.heart_mask)
    return samples
