"""Coarse lung and heart segmenters that feed prompt selection.

:class:`UNetSegmenter` is a U-Net whose encoder is an ImageNet-style
backbone from ``timm``; the decoder is built here. :class:`MeanMaskPrior`
is a training-free atlas baseline with the same interface, handy for smoke
runs and tests.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

logger = logging.getLogger(__name__)

ENCODERS = {
    "vgg16": "vgg16",
    "vgg19": "vgg19",
    "xception": "legacy_xception",
    "resnet34": "resnet34",
    "densenet169": "densenet169",
}
TARGETS = ("lung", "heart")
INPUT_DIMS = (128, 128)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class EncoderSpec:
    name: str = "vgg19"
    pretrained: bool = True

    def __post_init__(self):
        if self.name not in ENCODERS:
            raise ValueError(f"encoder must be one of {sorted(ENCODERS)}, got {self.name!r}")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    patience: int = 3
    min_delta: float = 1e-3
    batch_size: int = 16
    learning_rate: float = 1e-4
    target: str = "lung"
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must be in [0, max_epochs)")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")


class EarlyStopping:
    """Stop once the monitored score fails to beat its best by ``min_delta``
    for ``patience`` consecutive epochs."""

    def __init__(self, patience=3, min_delta=1e-3):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch, score) -> bool:
        """Record one epoch; returns True when training should stop."""
        if score > self.best + self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self):
        return self.bad_epochs == 0


def binarize(prob, threshold=0.5) -> np.ndarray:
    """Foreground wherever ``prob >= threshold``."""
    prob = np.asarray(prob, dtype=float)
    if prob.size and (prob.min() < 0 or prob.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return prob >= threshold


def _check_batch(X, dims):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != tuple(dims):
        raise ValueError(f"expected input of shape (n, {dims[0]}, {dims[1]}), got {X.shape}")
    return X


def _build_unet(encoder_name, pretrained):
    import timm
    import torch
    from torch import nn
    import torch.nn.functional as F

    class _Block(nn.Sequential):
        def __init__(self, cin, cout):
            super().__init__(
                nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            )

    class UNet(nn.Module):
        def __init__(self):
            super().__init__()
            self.encoder = timm.create_model(ENCODERS[encoder_name], features_only=True,
                                             pretrained=pretrained)
            chans = self.encoder.feature_info.channels()[::-1]
            widths = [256, 128, 64, 32, 16, 16][: len(chans) - 1]
            blocks, cin = [], chans[0]
            for skip, w in zip(chans[1:], widths):
                blocks.append(_Block(cin + skip, w))
                cin = w
            self.decoder = nn.ModuleList(blocks)
            self.head = nn.Conv2d(cin, 1, 1)
            self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

        def forward(self, x):
            size = x.shape[-2:]
            # single-channel inputs are replicated for the RGB encoder
            x = (x.expand(-1, 3, -1, -1) - self.mean) / self.std
            feats = self.encoder(x)[::-1]
            y = feats[0]
            for block, skip in zip(self.decoder, feats[1:]):
                y = F.interpolate(y, size=skip.shape[-2:], mode="nearest")
                y = block(torch.cat([y, skip], dim=1))
            return F.interpolate(self.head(y), size=size, mode="bilinear", align_corners=False)

    return UNet()


def _soft_dice_loss(logits, target, eps=1.0):
    import torch

    prob = torch.sigmoid(logits)
    dims = (1, 2, 3)
    inter = (prob * target).sum(dims)
    denom = prob.sum(dims) + target.sum(dims)
    return (1.0 - (2 * inter + eps) / (denom + eps)).mean()


def _batch_dice(pred, gt):
    """Mean per-image Dice of boolean stacks; empty-vs-empty counts as 1."""
    inter = (pred & gt).sum(axis=(1, 2))
    denom = pred.sum(axis=(1, 2)) + gt.sum(axis=(1, 2))
    return float(np.mean(np.where(denom == 0, 1.0, 2 * inter / np.maximum(denom, 1))))


class UNetSegmenter(BaseEstimator):
    """U-Net binary segmenter on normalized gray images.

    ``fit`` trains with the mean of pixel-wise binary cross-entropy and soft
    Dice loss, Adam, and early stopping on validation Dice; the weights from
    the best validation epoch are kept.
    """

    def __init__(self, encoder="vgg19", pretrained=True, target="lung", max_epochs=20,
                 patience=3, min_delta=1e-3, batch_size=16, learning_rate=1e-4,
                 validation_fraction=0.1, threshold=0.5, random_state=0, device="cpu"):
        self.encoder = encoder
        self.pretrained = pretrained
        self.target = target
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state
        self.device = device

    def _config(self):
        return TrainConfig(self.max_epochs, self.patience, self.min_delta, self.batch_size,
                           self.learning_rate, self.target, self.random_state)

    def fit(self, X, y, X_val=None, y_val=None):
        import torch

        cfg = self._config()
        EncoderSpec(self.encoder, self.pretrained)
        X = _check_batch(X, INPUT_DIMS)
        y = _check_batch(y, INPUT_DIMS) > 0.5
        if X_val is None:
            rng = np.random.default_rng(cfg.seed)
            perm = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if len(X) - n_val < 1:
                raise ValueError("not enough samples to carve out a validation set")
            X, X_val, y, y_val = X[perm[n_val:]], X[perm[:n_val]], y[perm[n_val:]], y[perm[:n_val]]
        X_val = _check_batch(X_val, INPUT_DIMS)
        y_val = _check_batch(y_val, INPUT_DIMS) > 0.5
        if len(X) == 0 or len(X_val) == 0:
            raise ValueError("training and validation sets must be non-empty")

        torch.manual_seed(cfg.seed)
        device = torch.device(self.device)
        net = _build_unet(self.encoder, self.pretrained).to(device)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        bce = torch.nn.BCEWithLogitsLoss()
        xt = torch.from_numpy(X[:, None])
        yt = torch.from_numpy(y[:, None].astype(np.float32))
        gen = torch.Generator().manual_seed(cfg.seed)

        stopper = EarlyStopping(cfg.patience, cfg.min_delta)
        best_state = copy.deepcopy(net.state_dict())
        self.history_ = []
        self.net_ = net
        for epoch in range(1, cfg.max_epochs + 1):
            net.train()
            order = torch.randperm(len(xt), generator=gen)
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb, yb = xt[idx].to(device), yt[idx].to(device)
                logits = net(xb)
                loss = 0.5 * (bce(logits, yb) + _soft_dice_loss(logits, yb))
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            val_dice = _batch_dice(self._predict_proba(X_val) >= self.threshold, y_val)
            self.history_.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                                  "val_dice": val_dice})
            logger.info("epoch %d loss %.4f val dice %.4f", epoch, np.mean(losses), val_dice)
            stop = stopper.step(epoch, val_dice)
            if stopper.improved_last:
                best_state = copy.deepcopy(net.state_dict())
            if stop:
                break
        net.load_state_dict(best_state)
        net.eval()
        self.best_epoch_ = stopper.best_epoch
        self.input_dims_ = INPUT_DIMS
        return self

    def _predict_proba(self, X, batch_size=32):
        import torch

        net = self.net_
        net.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), batch_size):
                xb = torch.from_numpy(np.ascontiguousarray(X[start:start + batch_size, None]))
                out.append(torch.sigmoid(net(xb.to(next(net.parameters()).device))).cpu().numpy()[:, 0])
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X):
        """Per-pixel foreground probability, shape ``(n, 128, 128)``."""
        check_is_fitted(self, "net_")
        return self._predict_proba(_check_batch(X, self.input_dims_))

    def predict(self, X):
        return binarize(self.predict_proba(X), self.threshold)

    def save(self, run_dir):
        import torch

        check_is_fitted(self, "net_")
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        torch.save(self.net_.state_dict(), run_dir / "model.pt")
        meta = {"kind": "unet", "params": self.get_params(), "encoder": self.encoder,
                "target": self.target, "seed": self.random_state,
                "input_dims": list(self.input_dims_), "best_epoch": self.best_epoch_,
                "history": self.history_}
        (run_dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
        return run_dir

    @classmethod
    def _from_metadata(cls, run_dir, meta):
        import torch

        params = dict(meta["params"], pretrained=False)
        est = cls(**params)
        est.net_ = _build_unet(est.encoder, False)
        est.net_.load_state_dict(torch.load(Path(run_dir) / "model.pt", map_location="cpu"))
        est.net_.eval()
        est.pretrained = meta["params"]["pretrained"]
        est.history_ = meta["history"]
        est.best_epoch_ = meta["best_epoch"]
        est.input_dims_ = tuple(meta["input_dims"])
        return est


class MeanMaskPrior(BaseEstimator):
    """Predicts the training-set mean mask for every image (a spatial atlas).

    Ignores image content; useful as a floor for the U-Net and as a cheap
    coarse segmenter for hermetic runs.
    """

    def __init__(self, target="lung", threshold=0.5):
        self.target = target
        self.threshold = threshold

    def fit(self, X, y, X_val=None, y_val=None):
        X = _check_batch(X, INPUT_DIMS)
        y = _check_batch(y, INPUT_DIMS)
        self.prior_ = (y > 0.5).mean(axis=0).astype(np.float64)
        self.input_dims_ = INPUT_DIMS
        self.history_ = []
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "prior_")
        X = _check_batch(X, self.input_dims_)
        return np.broadcast_to(self.prior_, X.shape).copy()

    def predict(self, X):
        return binarize(self.predict_proba(X), self.threshold)

    def save(self, run_dir):
        check_is_fitted(self, "prior_")
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        np.save(run_dir / "prior.npy", self.prior_)
        meta = {"kind": "mean_prior", "params": self.get_params(), "target": self.target,
                "input_dims": list(self.input_dims_), "history": []}
        (run_dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
        return run_dir

    @classmethod
    def _from_metadata(cls, run_dir, meta):
        est = cls(**meta["params"])
        est.prior_ = np.load(Path(run_dir) / "prior.npy")
        est.input_dims_ = tuple(meta["input_dims"])
        est.history_ = []
        return est


def load_model(run_dir):
    meta = json.loads((Path(run_dir) / "metadata.json").read_text())
    kinds = {"unet": UNetSegmenter, "mean_prior": MeanMaskPrior}
    return kinds[meta["kind"]]._from_metadata(run_dir, meta)


def _stack_target(samples, target):
    attr = "lung_mask_small" if target == "lung" else "heart_mask_small"
    missing = [s.source_id for s in samples if getattr(s, attr) is None]
    if missing:
        raise ValueError(f"{target} masks missing for: {', '.join(missing)}")
    X = np.stack([s.gray for s in samples])
    y = np.stack([getattr(s, attr) for s in samples])
    return X, y


def train_model(train, val, encoder: EncoderSpec = EncoderSpec(),
                config: TrainConfig = TrainConfig(), device="cpu") -> UNetSegmenter:
    """Fit a U-Net on preprocessed samples for ``config.target``."""
    if not train or not val:
        raise ValueError("train and val sets must be non-empty")
    X, y = _stack_target(train, config.target)
    Xv, yv = _stack_target(val, config.target)
    model = UNetSegmenter(encoder=encoder.name, pretrained=encoder.pretrained,
                          target=config.target, max_epochs=config.max_epochs,
                          patience=config.patience, min_delta=config.min_delta,
                          batch_size=config.batch_size, learning_rate=config.learning_rate,
                          random_state=config.seed, device=device)
    return model.fit(X, y, Xv, yv)


def predict_mask(model, gray) -> np.ndarray:
    """Foreground probability for one ``128x128`` gray image."""
    gray = np.asarray(gray)
    dims = getattr(model, "input_dims_", INPUT_DIMS)
    if gray.shape != tuple(dims):
        raise ValueError(f"input dims {gray.shape} != model input dims {tuple(dims)}")
    return model.predict_proba(gray[None])[0]
