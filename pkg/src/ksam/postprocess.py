"""Morphological cleanup of predicted masks (erosion followed by dilation)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_binary_mask

SQUARE3 = np.ones((3, 3), dtype=bool)
_ELEMENTS = {"square3": SQUARE3}


@dataclass(frozen=True)
class MorphConfig:
    erode_iters: int = 3
    dilate_iters: int = 3
    element: str = "square3"

    def __post_init__(self):
        if self.erode_iters < 0 or self.dilate_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.element not in _ELEMENTS:
            raise ValueError(f"unknown structuring element {self.element!r}")


def _structure(element):
    if isinstance(element, str):
        return _ELEMENTS[element]
    return np.asarray(element, dtype=bool)


def erode(mask, iters=1, element="square3") -> np.ndarray:
    """Iterated binary erosion; pixels beyond the border count as background."""
    mask = check_binary_mask(mask)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    # scipy treats iterations=0 as "until stable"
    if iters == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=_structure(element),
                                  iterations=iters, border_value=0)


def dilate(mask, iters=1, element="square3") -> np.ndarray:
    """Iterated binary dilation; pixels beyond the border count as background."""
    mask = check_binary_mask(mask)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if iters == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_structure(element),
                                   iterations=iters, border_value=0)


def clean_mask(mask, config: MorphConfig = MorphConfig()) -> np.ndarray:
    """Opening-style cleanup: erode ``erode_iters`` times, then dilate."""
    eroded = erode(mask, config.erode_iters, config.element)
    return dilate(eroded, config.dilate_iters, config.element)


class MorphologicalCleaner(TransformerMixin, BaseEstimator):
    """Stateless transformer applying :func:`clean_mask` to a mask batch.

    Accepts a single 2-D mask or a 3-D stack ``(n, rows, cols)``.
    """

    def __init__(self, erode_iters=3, dilate_iters=3, element="square3"):
        self.erode_iters = erode_iters
        self.dilate_iters = dilate_iters
        self.element = element

    def fit(self, X, y=None):
        MorphConfig(self.erode_iters, self.dilate_iters, self.element)
        return self

    def transform(self, X):
        cfg = MorphConfig(self.erode_iters, self.dilate_iters, self.element)
        X = np.asarray(X)
        if X.ndim == 2:
            return clean_mask(X, cfg)
        return np.stack([clean_mask(m, cfg) for m in X])

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
