"""Loading, preprocessing and splitting of chest X-ray segmentation data.

Directory convention for one dataset root::

    root/
      images/        *.png   (gray or RGB, 0-255)
      lung_masks/    *.png   (single channel, {0, 255})
      heart_masks/   *.png   (optional, same convention)

Files are paired by stem. Heart masks may also live in a separate directory.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_binary_mask

logger = logging.getLogger(__name__)

DATASETS = ("montgomery", "shenzhen", "other")
SPLITS = ("train", "val", "test", "unassigned")
PROCESSED_SIZE = (128, 128)
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


class SampleLoadError(ValueError):
    def __init__(self, sample_id, message):
        super().__init__(f"{sample_id}: {message}")
        self.sample_id = sample_id


@dataclass
class CxrSample:
    id: str
    image: np.ndarray
    lung_mask: np.ndarray
    heart_mask: Optional[np.ndarray] = None
    dataset: str = "other"
    split: str = "unassigned"

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim not in (2, 3) or (self.image.ndim == 3 and self.image.shape[2] != 3):
            raise SampleLoadError(self.id, f"unsupported image shape {self.image.shape}")
        self.lung_mask = check_binary_mask(self.lung_mask, "lung_mask")
        if self.lung_mask.shape != self.image.shape[:2]:
            raise SampleLoadError(
                self.id, f"lung mask {self.lung_mask.shape} does not match image {self.image.shape[:2]}")
        if self.heart_mask is not None:
            self.heart_mask = check_binary_mask(self.heart_mask, "heart_mask")
            if self.heart_mask.shape != self.image.shape[:2]:
                raise SampleLoadError(
                    self.id, f"heart mask {self.heart_mask.shape} does not match image {self.image.shape[:2]}")
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    @property
    def dims(self):
        return self.image.shape[:2]


@dataclass
class ProcessedSample:
    gray: np.ndarray
    lung_mask_small: np.ndarray
    heart_mask_small: Optional[np.ndarray]
    source_id: str


@dataclass
class DatasetSplit:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int
    roots: list = field(default_factory=list)

    def to_dict(self):
        out = {"seed": self.seed, "train": list(self.train_ids),
               "val": list(self.val_ids), "test": list(self.test_ids)}
        if self.roots:
            out["roots"] = self.roots
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]),
                   list(d.get("roots", [])))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def bucket_of(self, sample_id):
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            if sample_id in ids:
                return name
        return "unassigned"


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def write_mask(path, mask):
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def _infer_dataset(root: Path):
    name = root.name.lower()
    for d in ("montgomery", "shenzhen"):
        if d in name:
            return d
    return "other"


def load_dataset(root_path, heart_mask_path=None, dataset=None, on_error="raise"):
    """Load every image under ``root_path/images`` with its masks.

    Images without a lung mask are skipped with a warning. Unreadable files
    and size mismatches raise :class:`SampleLoadError` unless
    ``on_error="skip"``, in which case they are logged and dropped.
    """
    root = Path(root_path)
    dataset = dataset or _infer_dataset(root)
    image_dir = root / "images"
    heart_dir = Path(heart_mask_path) if heart_mask_path else root / "heart_masks"
    images = sorted(image_dir.glob("*.png")) if image_dir.is_dir() else []
    if not images:
        logger.warning("no images found under %s", image_dir)
        return []

    samples = []
    for img_path in images:
        sid = img_path.stem
        lung_path = root / "lung_masks" / img_path.name
        if not lung_path.exists():
            logger.warning("%s: no lung mask, sample rejected", sid)
            continue
        heart_path = heart_dir / img_path.name
        try:
            try:
                image = read_image(img_path)
                lung = read_mask(lung_path)
                heart = read_mask(heart_path) if heart_path.exists() else None
            except OSError as exc:
                raise SampleLoadError(sid, f"unreadable file ({exc})") from exc
            samples.append(CxrSample(sid, image, lung, heart, dataset=dataset))
        except SampleLoadError as exc:
            if on_error == "raise":
                raise
            logger.warning("rejected %s", exc)
    return samples


def to_gray(image) -> np.ndarray:
    """Unweighted channel mean; 2-D inputs pass through as float."""
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=2) if image.ndim == 3 else image


def minmax_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        logger.warning("constant image, normalized to zeros")
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def resize_gray(gray, size=PROCESSED_SIZE) -> np.ndarray:
    im = Image.fromarray(np.asarray(gray, dtype=np.float32), mode="F")
    return np.asarray(im.resize((size[1], size[0]), Image.BILINEAR), dtype=np.float64)


def resize_mask(mask, size=PROCESSED_SIZE) -> np.ndarray:
    im = Image.fromarray(np.asarray(mask, dtype=np.uint8))
    small = np.asarray(im.resize((size[1], size[0]), Image.NEAREST))
    return small >= 0.5


def preprocess_image(image, size=PROCESSED_SIZE) -> np.ndarray:
    """Gray conversion, bilinear resize, then min-max scaling to [0, 1]."""
    return minmax_normalize(resize_gray(to_gray(image), size))


def preprocess(sample: CxrSample, size=PROCESSED_SIZE) -> ProcessedSample:
    heart = None if sample.heart_mask is None else resize_mask(sample.heart_mask, size)
    return ProcessedSample(
        gray=preprocess_image(sample.image, size),
        lung_mask_small=resize_mask(sample.lung_mask, size),
        heart_mask_small=heart,
        source_id=sample.id,
    )


class CxrPreprocessor(TransformerMixin, BaseEstimator):
    """Map native images to normalized ``(n, rows, cols)`` gray arrays."""

    def __init__(self, size=PROCESSED_SIZE):
        self.size = size

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([preprocess_image(im, tuple(self.size)) for im in X])

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


def _bucket_sizes(n):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples, seed=0) -> DatasetSplit:
    """70/10/20 split drawn independently within each source dataset."""
    if len(samples) < 10:
        raise ValueError(f"need at least 10 samples to split, got {len(samples)}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")

    by_dataset = {}
    for s in samples:
        by_dataset.setdefault(s.dataset, []).append(s.id)

    train, val, test = [], [], []
    for name in sorted(by_dataset):
        group = sorted(by_dataset[name])
        rng = np.random.default_rng(seed)
        perm = [group[i] for i in rng.permutation(len(group))]
        n_train, n_val, _ = _bucket_sizes(len(group))
        train += perm[:n_train]
        val += perm[n_train:n_train + n_val]
        test += perm[n_train + n_val:]
    return DatasetSplit(train, val, test, seed)
