"""Adapter around a promptable segmenter (Segment Anything) with a test double.

Anything exposing the predictor protocol can back a session::

    set_image(image_rgb_uint8)
    predict(point_coords=xy, point_labels=labels, multimask_output=True)
        -> (masks[c, h, w], scores[c], low_res_logits)

Point coordinates cross this boundary as ``(x=col, y=row)``; the rest of the
package works in ``(row, col)``.
"""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .prompting import PromptSet

BACKBONES = ("vit_h", "vit_l", "vit_b")
_SAM_URL = "https://dl.fbaipublicfiles.com/segment_anything/"
# published file names carry the leading hex digits of the file's sha256
PUBLISHED_CHECKPOINTS = {
    "vit_h": {"file": "sam_vit_h_4b8939.pth", "sha256_prefix": "4b8939"},
    "vit_l": {"file": "sam_vit_l_0b3195.pth", "sha256_prefix": "0b3195"},
    "vit_b": {"file": "sam_vit_b_01ec64.pth", "sha256_prefix": "01ec64"},
}


class SegmenterError(RuntimeError):
    def __init__(self, image_id, message):
        super().__init__(f"{image_id or '<image>'}: {message}")
        self.image_id = image_id


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class SegmentationOutput:
    mask: np.ndarray
    confidence: float
    candidates_considered: int


@dataclass(eq=False)
class SegmenterSession:
    backbone: str
    checkpoint_path: str
    predictor: object
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _image_key: str = field(default="", repr=False)


def checkpoint_url(backbone):
    return _SAM_URL + PUBLISHED_CHECKPOINTS[backbone]["file"]


def sha256_file(path, chunk=1 << 22) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while block := f.read(chunk):
            h.update(block)
    return h.hexdigest()


def read_lock(path) -> dict:
    p = Path(path)
    return json.loads(p.read_text()) if p.exists() else {}


def record_checkpoint(lock_path, backbone, checkpoint_path, sha256=None) -> dict:
    """Add or refresh one backbone entry in the checkpoint lock file."""
    lock = read_lock(lock_path)
    lock[backbone] = {
        "path": str(checkpoint_path),
        "sha256": sha256 or sha256_file(checkpoint_path),
        "url": checkpoint_url(backbone) if backbone in PUBLISHED_CHECKPOINTS else "",
    }
    Path(lock_path).write_text(json.dumps(lock, indent=2, sort_keys=True) + "\n")
    return lock[backbone]


def verify_checkpoint(backbone, checkpoint_path, lock_path=None, digest=None):
    """Raise unless the file's sha256 matches the lock entry or published prefix."""
    if backbone not in BACKBONES:
        raise ValueError(f"backbone must be one of {BACKBONES}, got {backbone!r}")
    digest = digest or sha256_file(checkpoint_path)
    entry = read_lock(lock_path).get(backbone) if lock_path else None
    if entry and entry.get("sha256"):
        ok = digest == entry["sha256"]
        expected = entry["sha256"]
    else:
        expected = PUBLISHED_CHECKPOINTS[backbone]["sha256_prefix"]
        ok = digest.startswith(expected)
    if not ok:
        raise CheckpointMismatchError(
            f"{checkpoint_path} does not match the {backbone} checkpoint "
            f"(expected sha256 {expected}..., got {digest[:12]}...)")
    return digest


_SESSIONS: dict = {}
_SESSIONS_LOCK = threading.Lock()


def _build_sam_predictor(backbone, checkpoint_path):
    import torch
    from segment_anything import SamPredictor, sam_model_registry

    model = sam_model_registry[backbone](checkpoint=None)
    state = torch.load(checkpoint_path, map_location="cpu")
    model.load_state_dict(state)
    model.eval()
    return SamPredictor(model)


def load_session(backbone, checkpoint_path, lock_path=None, verify=True,
                 builder=_build_sam_predictor) -> SegmenterSession:
    """Load (once per backbone/path pair) a segmenter session."""
    if backbone not in BACKBONES:
        raise ValueError(f"backbone must be one of {BACKBONES}, got {backbone!r}")
    path = Path(checkpoint_path)
    if not path.is_file():
        raise FileNotFoundError(
            f"checkpoint {path} not found; download it with\n"
            f"  curl -L -o {path} {checkpoint_url(backbone)}")
    key = (backbone, str(path.resolve()))
    with _SESSIONS_LOCK:
        if key in _SESSIONS:
            return _SESSIONS[key]
        if verify:
            verify_checkpoint(backbone, path, lock_path)
        session = SegmenterSession(backbone, str(path), builder(backbone, str(path)))
        _SESSIONS[key] = session
        return session


def clear_session_cache():
    with _SESSIONS_LOCK:
        _SESSIONS.clear()


def _as_rgb(image):
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.dtype != np.uint8:
        image = np.clip(image, 0, 255).astype(np.uint8)
    return np.ascontiguousarray(image)


def segment(session: SegmenterSession, image, prompts: PromptSet, image_id="") -> SegmentationOutput:
    """Run the segmenter with point prompts and keep its best-scored candidate."""
    image = _as_rgb(image)
    if tuple(prompts.space) != image.shape[:2]:
        raise ValueError(f"prompt space {prompts.space} != image dims {image.shape[:2]}")
    if len(prompts.positives) == 0:
        raise ValueError("at least one positive point is required")
    coords, labels = prompts.coords_and_labels()
    xy = coords[:, ::-1].astype(np.float32)

    try:
        key = hashlib.sha1(image.tobytes()).hexdigest() + str(image.shape)
        with session._lock:
            # image embeddings are reused across prompt sets for the same image
            if key != session._image_key:
                session._image_key = ""
                session.predictor.set_image(image)
                session._image_key = key
            masks, scores, _ = session.predictor.predict(
                point_coords=xy, point_labels=labels, multimask_output=True)
    except Exception as exc:
        raise SegmenterError(image_id, f"segmenter failed: {exc}") from exc

    masks = np.asarray(masks)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    best = int(np.argmax(scores))
    mask = masks[best]
    if mask.dtype != bool:
        mask = mask > 0.0
    return SegmentationOutput(mask, float(scores[best]), len(scores))


class FakeSegmenter:
    """Deterministic stand-in for the real model.

    Candidates, with fixed scores:

    0. disks around each positive point (score 0.5)
    1. dark connected regions touching a positive point and no negative
       point (score 0.9)
    2. candidate 1 grown by one pixel (score 0.7)
    """

    def __init__(self, radius_frac=0.08):
        self.radius_frac = radius_frac
        self._image = None

    def set_image(self, image, image_format="RGB"):
        self._image = np.asarray(image)

    def predict(self, point_coords, point_labels, multimask_output=True, **kwargs):
        img = self._image
        gray = ndimage.uniform_filter(img.astype(float).mean(axis=2), size=5)
        rows, cols = gray.shape
        pts = np.asarray(point_coords)[:, ::-1].astype(int)  # back to (row, col)
        labels = np.asarray(point_labels)
        pos, neg = pts[labels == 1], pts[labels == 0]

        rr, cc = np.ogrid[:rows, :cols]
        radius = self.radius_frac * min(rows, cols)
        disks = np.zeros((rows, cols), bool)
        for r, c in pos:
            disks |= (rr - r) ** 2 + (cc - c) ** 2 <= radius ** 2

        dark = gray < gray.mean()
        comp, _ = ndimage.label(dark)
        keep = {comp[r, c] for r, c in pos} - {comp[r, c] for r, c in neg} - {0}
        region = np.isin(comp, sorted(keep))
        grown = ndimage.binary_dilation(region)

        masks = np.stack([disks, region, grown])
        scores = np.array([0.5, 0.9, 0.7])
        if not multimask_output:
            return masks[1:2], scores[1:2], None
        return masks, scores, None


def fake_session() -> SegmenterSession:
    return SegmenterSession("fake", "", FakeSegmenter())
