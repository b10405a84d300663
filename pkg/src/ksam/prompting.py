"""Point prompt selection from coarse lung and heart masks.

Two positives come from clustering the lung pixels, five negatives from the
background (outside both lung and heart) and three from the heart. Points
live in the mask grid and are rescaled to the segmenter's image grid with
:func:`scale_prompts`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from ._validation import check_binary_mask, check_points
from .clustering import k_means, k_medoids, subsample

logger = logging.getLogger(__name__)

CLUSTERERS = ("kmedoids", "kmeans")
BACKGROUND_CAP = 2000

WARN_HEART_ABSENT = "heart_absent"
WARN_HEART_SMALL = "heart_too_small"
WARN_OUTSIDE_SMALL = "outside_too_small"
WARN_SAME_LOBE = "positives_in_one_component"


class NoLungRegionError(ValueError):
    pass


@dataclass
class RegionPixels:
    lung: np.ndarray
    outside: np.ndarray
    heart: np.ndarray
    bounds: tuple

    def mask(self, name) -> np.ndarray:
        out = np.zeros(self.bounds, dtype=bool)
        pts = getattr(self, name)
        out[pts[:, 0], pts[:, 1]] = True
        return out


@dataclass
class PromptSet:
    positives: np.ndarray
    negatives: np.ndarray
    space: tuple
    negative_sources: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    image_id: str = ""

    def __post_init__(self):
        self.space = tuple(int(v) for v in self.space)
        self.positives = check_points(self.positives, self.space)
        self.negatives = check_points(self.negatives, self.space)
        if not self.negative_sources:
            self.negative_sources = ["outside"] * len(self.negatives)
        if len(self.negative_sources) != len(self.negatives):
            raise ValueError("negative_sources must align with negatives")

    def __len__(self):
        return len(self.positives) + len(self.negatives)

    def coords_and_labels(self):
        """Stacked (row, col) points and labels (1 positive, 0 negative)."""
        coords = np.concatenate([self.positives, self.negatives]).reshape(-1, 2)
        labels = np.r_[np.ones(len(self.positives), int), np.zeros(len(self.negatives), int)]
        return coords, labels

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "space": list(self.space),
            "positives": self.positives.tolist(),
            "negatives": self.negatives.tolist(),
            "negative_sources": list(self.negative_sources),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            positives=np.asarray(d["positives"], dtype=np.int64).reshape(-1, 2),
            negatives=np.asarray(d["negatives"], dtype=np.int64).reshape(-1, 2),
            space=tuple(d["space"]),
            negative_sources=list(d.get("negative_sources", [])),
            warnings=list(d.get("warnings", [])),
            image_id=d.get("image_id", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def extract_regions(lung_mask, heart_mask=None) -> RegionPixels:
    """Split the grid into lung, heart-not-lung and everything else."""
    lung = check_binary_mask(lung_mask, "lung_mask")
    if heart_mask is None:
        heart = np.zeros_like(lung)
    else:
        heart = check_binary_mask(heart_mask, "heart_mask")
        if heart.shape != lung.shape:
            raise ValueError(f"heart mask {heart.shape} != lung mask {lung.shape}")
    if not lung.any():
        raise NoLungRegionError("no lung region predicted")
    heart = heart & ~lung
    outside = ~(lung | heart)
    return RegionPixels(np.argwhere(lung), np.argwhere(outside), np.argwhere(heart), lung.shape)


def _centers(points, k, clusterer, seed, bounds):
    if clusterer == "kmedoids":
        return k_medoids(points, k, seed=seed).medoids
    if clusterer == "kmeans":
        return k_means(points, k, seed=seed, bounds=bounds).snapped
    raise ValueError(f"unknown clusterer {clusterer!r}; expected one of {CLUSTERERS}")


def select_prompts(regions: RegionPixels, seed=0, clusterer="kmedoids", n_positive=2,
                   n_outside=5, n_heart=3, background_cap=BACKGROUND_CAP) -> PromptSet:
    """Cluster each region and use the cluster representatives as prompts."""
    if len(regions.lung) < n_positive:
        raise NoLungRegionError(
            f"lung region has {len(regions.lung)} pixels, need {n_positive}")
    warnings = []
    bounds = regions.bounds

    positives = _centers(regions.lung, n_positive, clusterer, seed, bounds)
    if n_positive == 2 and clusterer == "kmedoids":
        labels, _ = ndimage.label(regions.mask("lung"), structure=np.ones((3, 3)))
        if labels[tuple(positives[0])] == labels[tuple(positives[1])]:
            warnings.append(WARN_SAME_LOBE)

    negs, sources = [], []
    outside = subsample(regions.outside, background_cap, seed)
    if len(outside) >= n_outside:
        negs.append(_centers(outside, n_outside, clusterer, seed, bounds))
    elif len(outside):
        warnings.append(WARN_OUTSIDE_SMALL)
        negs.append(outside)
    else:
        warnings.append(WARN_OUTSIDE_SMALL)
    sources += ["outside"] * sum(len(n) for n in negs)

    n_h = len(regions.heart)
    if n_h == 0:
        warnings.append(WARN_HEART_ABSENT)
    elif n_h < n_heart:
        warnings.append(WARN_HEART_SMALL)
        negs.append(regions.heart)
        sources += ["heart"] * n_h
    else:
        negs.append(_centers(regions.heart, n_heart, clusterer, seed, bounds))
        sources += ["heart"] * n_heart

    for w in warnings:
        logger.info("prompt selection: %s", w)
    negatives = np.concatenate(negs) if negs else np.empty((0, 2), dtype=np.int64)
    return PromptSet(positives, negatives, bounds, sources, warnings)


def count_region_violations(prompts: PromptSet, regions: RegionPixels) -> int:
    """Prompts lying outside the region they were meant to represent."""
    lung, heart, outside = regions.mask("lung"), regions.mask("heart"), regions.mask("outside")
    n = sum(not lung[r, c] for r, c in prompts.positives)
    for (r, c), src in zip(prompts.negatives, prompts.negative_sources):
        region = heart if src == "heart" else outside
        n += not region[r, c]
    return int(n)


def scale_prompts(prompts: PromptSet, to_space) -> PromptSet:
    """Map pixel centers from ``prompts.space`` onto a finer grid."""
    to_space = tuple(int(v) for v in to_space)
    if to_space[0] < prompts.space[0] or to_space[1] < prompts.space[1]:
        raise ValueError(f"target space {to_space} is smaller than {prompts.space}")
    ratio = np.array(to_space, float) / np.array(prompts.space, float)
    hi = np.array(to_space) - 1

    def _map(pts):
        if len(pts) == 0:
            return pts
        return np.clip(np.floor((pts + 0.5) * ratio).astype(np.int64), 0, hi)

    return PromptSet(_map(prompts.positives), _map(prompts.negatives), to_space,
                     list(prompts.negative_sources), list(prompts.warnings), prompts.image_id)


class PromptSelector(BaseEstimator):
    """Estimator wrapper so prompt settings travel with ``get_params``."""

    def __init__(self, clusterer="kmedoids", n_positive=2, n_outside=5, n_heart=3,
                 background_cap=BACKGROUND_CAP, random_state=0):
        self.clusterer = clusterer
        self.n_positive = n_positive
        self.n_outside = n_outside
        self.n_heart = n_heart
        self.background_cap = background_cap
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.clusterer not in CLUSTERERS:
            raise ValueError(f"unknown clusterer {self.clusterer!r}")
        return self

    def select(self, lung_mask, heart_mask=None) -> PromptSet:
        regions = extract_regions(lung_mask, heart_mask)
        return select_prompts(regions, seed=self.random_state, clusterer=self.clusterer,
                              n_positive=self.n_positive, n_outside=self.n_outside,
                              n_heart=self.n_heart, background_cap=self.background_cap)

    def transform(self, X, heart=None):
        heart = [None] * len(X) if heart is None else heart
        return [self.select(lm, hm) for lm, hm in zip(X, heart)]
