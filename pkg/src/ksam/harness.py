"""End-to-end runs: prompts from coarse masks, segmentation, cleanup, scoring.

A run is described by one TOML file::

    version = 1
    seed = 0
    output_dir = "runs/vit_l"

    [data]
    manifest = "manifest.json"

    [models]
    lung = "runs/lung_vgg19"
    heart = "runs/heart_vgg19"      # optional

    [segmenter]
    backend = "sam"                 # or "fake"
    backbone = "vit_l"
    checkpoint = "checkpoints/sam_vit_l_0b3195.pth"
    lock_file = "checkpoints/lock.json"

    [prompting]
    clusterer = "kmedoids"          # or "kmeans"
    background_cap = 2000

    [postprocess]
    erode_iters = 3
    dilate_iters = 3

    [evaluation]
    failure_threshold = 0.70
    aggregation = "per_image"       # or "pooled"
    n_jobs = 1
    overlays = true
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import DatasetSplit, load_dataset, preprocess_image, write_mask
from .metrics import ConfusionCounts, confusion, pooled_scores, score_masks
from .postprocess import MorphConfig, clean_mask
from .prelim_seg import binarize, load_model
from .prompting import (CLUSTERERS, PromptSet, count_region_violations, extract_regions,
                        scale_prompts, select_prompts)
from .segmenter import BACKBONES, fake_session, load_session, segment

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("image_id", "dataset", "backbone", "clusterer", "dice", "iou", "kappa", "flags",
               "region_violations", "n_prompts")
FLAG_FAILURE = "failure"


@dataclass
class ExperimentConfig:
    manifest: str = ""
    lung_model: str = ""
    heart_model: Optional[str] = None
    backend: str = "sam"
    backbone: str = "vit_l"
    checkpoint: str = ""
    lock_file: Optional[str] = None
    clusterer: str = "kmedoids"
    background_cap: int = 2000
    seed: int = 0
    morph: MorphConfig = field(default_factory=MorphConfig)
    failure_threshold: float = 0.70
    aggregation: str = "per_image"
    n_jobs: int = 1
    overlays: bool = True
    output_dir: str = "runs/default"
    version: int = 1

    def __post_init__(self):
        if self.clusterer not in CLUSTERERS:
            raise ValueError(f"clusterer must be one of {CLUSTERERS}")
        if self.backend == "sam" and self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.backend not in ("sam", "fake"):
            raise ValueError("backend must be 'sam' or 'fake'")
        if self.aggregation not in ("per_image", "pooled"):
            raise ValueError("aggregation must be 'per_image' or 'pooled'")
        if isinstance(self.morph, dict):
            self.morph = MorphConfig(**self.morph)

    @property
    def backbone_label(self):
        return self.backbone if self.backend == "sam" else f"fake({self.backbone})"

    @classmethod
    def from_toml(cls, path):
        path = Path(path)
        with open(path, "rb") as f:
            raw = tomllib.load(f)
        base = path.parent

        def rel(p):
            if p in (None, ""):
                return p
            return str((base / p)) if not Path(p).is_absolute() else p

        data, models = raw.get("data", {}), raw.get("models", {})
        seg, prm = raw.get("segmenter", {}), raw.get("prompting", {})
        post, ev = raw.get("postprocess", {}), raw.get("evaluation", {})
        return cls(
            manifest=rel(data.get("manifest", "")),
            lung_model=rel(models.get("lung", "")),
            heart_model=rel(models.get("heart")),
            backend=seg.get("backend", "sam"),
            backbone=seg.get("backbone", "vit_l"),
            checkpoint=rel(seg.get("checkpoint", "")),
            lock_file=rel(seg.get("lock_file")),
            clusterer=prm.get("clusterer", "kmedoids"),
            background_cap=int(prm.get("background_cap", 2000)),
            seed=int(raw.get("seed", 0)),
            morph=MorphConfig(int(post.get("erode_iters", 3)), int(post.get("dilate_iters", 3))),
            failure_threshold=float(ev.get("failure_threshold", 0.70)),
            aggregation=ev.get("aggregation", "per_image"),
            n_jobs=int(ev.get("n_jobs", 1)),
            overlays=bool(ev.get("overlays", True)),
            output_dir=rel(raw.get("output_dir", "runs/default")),
            version=int(raw.get("version", 1)),
        )

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_paths(self):
        paths = [self.manifest, self.lung_model] + ([self.heart_model] if self.heart_model else [])
        if self.backend == "sam":
            paths.append(self.checkpoint)
        missing = [p for p in paths if not p or not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"missing paths: {', '.join(map(str, missing))}")


@dataclass
class PipelineResult:
    image_id: str
    mask: np.ndarray
    prompts: Optional[PromptSet]
    diagnostics: dict

    @property
    def failed(self):
        return "failed_stage" in self.diagnostics


class StageCache:
    """Per-image cache of intermediate outputs keyed by what produced them."""

    def __init__(self, root):
        self.root = Path(root) if root else None

    def _path(self, stage, key, image_id, suffix):
        return self.root / stage / key / f"{image_id}{suffix}"

    def get_arrays(self, stage, key, image_id):
        if self.root is None:
            return None
        p = self._path(stage, key, image_id, ".npz")
        if not p.exists():
            return None
        with np.load(p) as z:
            return {k: z[k] for k in z.files}

    def put_arrays(self, stage, key, image_id, **arrays):
        if self.root is None:
            return
        p = self._path(stage, key, image_id, ".npz")
        p.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(p, **arrays)


def _key(*parts):
    return hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).hexdigest()[:12]


def coarse_masks(image, lung_model, heart_model=None):
    """Preliminary lung and heart masks in the 128x128 grid."""
    gray = preprocess_image(image)
    lung = binarize(lung_model.predict_proba(gray[None])[0])
    heart = None
    if heart_model is not None:
        heart = binarize(heart_model.predict_proba(gray[None])[0])
    return lung, heart


def run_pipeline(sample, config: ExperimentConfig, lung_model, heart_model, session,
                 cache: StageCache = StageCache(None), model_key="") -> PipelineResult:
    """Prompt, segment and clean one image. Only ``sample.image`` is read."""
    image = np.asarray(sample.image)
    dims = image.shape[:2]
    diag = {"warnings": []}
    stage = "preliminary_segmentation"
    try:
        cached = cache.get_arrays("prelim", model_key, sample.id)
        if cached is None:
            lung, heart = coarse_masks(image, lung_model, heart_model)
            arrays = {"lung": lung} if heart is None else {"lung": lung, "heart": heart}
            cache.put_arrays("prelim", model_key, sample.id, **arrays)
        else:
            lung, heart = cached["lung"], cached.get("heart")

        stage = "prompt_selection"
        regions = extract_regions(lung, heart)
        small = select_prompts(regions, seed=config.seed, clusterer=config.clusterer,
                               background_cap=config.background_cap)
        small.image_id = sample.id
        diag["region_violations"] = count_region_violations(small, regions)
        diag["warnings"] = list(small.warnings)
        prompts = scale_prompts(small, dims)

        stage = "segmentation"
        out = segment(session, image, prompts, image_id=sample.id)
        diag["confidence"] = out.confidence
        diag["candidates_considered"] = out.candidates_considered

        stage = "postprocess"
        mask = clean_mask(out.mask, config.morph)
    except Exception as exc:  # any stage failure marks the image, the run goes on
        logger.warning("%s failed at %s: %s", sample.id, stage, exc)
        diag.update(failed_stage=stage, error=str(exc))
        return PipelineResult(sample.id, np.zeros(dims, bool), None, diag)
    return PipelineResult(sample.id, mask, prompts, diag)


@dataclass
class MetricReport:
    rows: list
    aggregates: dict
    failures: list
    failure_threshold: float
    backbone: str
    clusterer: str
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        return cls.from_dict(json.loads(path.read_text()))


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _aggregate(rows, mode):
    if not rows:
        return {"n": 0, "dice": None, "iou": None, "kappa": None}
    if mode == "pooled":
        s = pooled_scores(ConfusionCounts(r["tp"], r["fp"], r["tn"], r["fn"]) for r in rows)
    else:
        s = {m: float(np.mean([r[m] for r in rows])) for m in ("dice", "iou", "kappa")}
    return {"n": len(rows), **{k: _nan_to_none(v) for k, v in s.items()}}


def build_report(rows, config: ExperimentConfig) -> MetricReport:
    thr = config.failure_threshold
    for r in rows:
        if r["dice"] < thr and FLAG_FAILURE not in r["flags"]:
            r["flags"] = sorted(r["flags"] + [FLAG_FAILURE])
    groups = {}
    for r in rows:
        groups.setdefault(r["dataset"], []).append(r)
    if len(groups) > 1:
        groups["all"] = list(rows)
    aggregates, notes = {}, []
    for name in sorted(groups):
        g = groups[name]
        kept = [r for r in g if r["dice"] >= thr]
        n_fail = len(g) - len(kept)
        aggregates[name] = {
            "all_images": _aggregate(g, config.aggregation),
            "excluding_failures": _aggregate(kept, config.aggregation),
            "failure_fraction": n_fail / len(g),
        }
        if not kept:
            notes.append(f"{name}: every image fell below Dice {thr}; "
                         "excluded aggregate is undefined")
    failures = sorted(r["image_id"] for r in rows if r["dice"] < thr)
    return MetricReport(
        rows=rows, aggregates=aggregates, failures=failures, failure_threshold=thr,
        backbone=config.backbone_label, clusterer=config.clusterer,
        config=config.to_dict(), config_hash=config.config_hash(), notes=notes,
    )


def score_result(sample, result: PipelineResult, config: ExperimentConfig) -> dict:
    s = score_masks(result.mask, sample.lung_mask)
    flags = list(s.pop("flags"))
    if result.failed:
        flags.append(f"pipeline_failure:{result.diagnostics['failed_stage']}")
    flags += [f"warn:{w}" for w in result.diagnostics.get("warnings", [])]
    return {
        "image_id": sample.id, "dataset": sample.dataset,
        "backbone": config.backbone_label, "clusterer": config.clusterer,
        **s, "flags": sorted(flags),
        "region_violations": int(result.diagnostics.get("region_violations", 0)),
        "n_prompts": 0 if result.prompts is None else len(result.prompts),
    }


def evaluate(samples, config: ExperimentConfig, lung_model, heart_model, session,
             out_dir=None) -> MetricReport:
    """Run every sample through the pipeline and score it against its lung mask."""
    samples = sorted(samples, key=lambda s: s.id)
    if not samples:
        raise ValueError("evaluation needs at least one sample")
    out_dir = Path(out_dir) if out_dir else None
    # in-memory models have no stable identity, so only path-loaded ones are cached
    cacheable = out_dir is not None and bool(config.lung_model)
    cache = StageCache(out_dir / "cache" if cacheable else None)
    model_key = _key(config.lung_model, config.heart_model)

    def work(sample):
        return run_pipeline(sample, config, lung_model, heart_model, session, cache, model_key)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(work, samples))
    else:
        results = [work(s) for s in samples]

    rows = [score_result(s, r, config) for s, r in zip(samples, results)]
    report = build_report(rows, config)
    if out_dir is not None:
        save_run(report, samples, results, out_dir, overlays=config.overlays)
    return report


def save_run(report, samples, results, out_dir, overlays=True):
    out_dir = Path(out_dir)
    for sub in ("masks", "prompts"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for s, r in zip(samples, results):
        write_mask(out_dir / "masks" / f"{s.id}.png", r.mask)
        if r.prompts is not None:
            r.prompts.save(out_dir / "prompts" / f"{s.id}.json")
    if overlays:
        render_overlays(samples, [r.mask for r in results], out_dir / "overlays")
    for fmt in ("json", "csv", "md"):
        render_report(report, fmt, out_dir)


def compare_clusterers(a: MetricReport, b: MetricReport) -> dict:
    """Paired per-image Dice differences ``a - b`` on identical splits."""
    ids_a = [r["image_id"] for r in a.rows]
    ids_b = [r["image_id"] for r in b.rows]
    if sorted(ids_a) != sorted(ids_b):
        raise ValueError("runs were evaluated on different image sets")
    if a.config.get("seed") != b.config.get("seed"):
        raise ValueError("runs used different seeds")
    rows_b = {r["image_id"]: r for r in b.rows}
    deltas = {r["image_id"]: r["dice"] - rows_b[r["image_id"]]["dice"] for r in a.rows}
    return {
        "a": {"clusterer": a.clusterer, "backbone": a.backbone,
              "mean_dice": float(np.mean([r["dice"] for r in a.rows])),
              "region_violations": int(sum(r["region_violations"] for r in a.rows))},
        "b": {"clusterer": b.clusterer, "backbone": b.backbone,
              "mean_dice": float(np.mean([r["dice"] for r in b.rows])),
              "region_violations": int(sum(r["region_violations"] for r in b.rows))},
        "deltas": dict(sorted(deltas.items())),
        "mean_delta": float(np.mean(list(deltas.values()))),
    }


def _pct(x):
    return "n/a" if x is None else f"{100 * x:.1f}"


def markdown_table(reports) -> str:
    """One row per (dataset, backbone), scores in percent after exclusion."""
    lines = ["| Dataset | Model | Clusterer | Dice | IoU | Kappa | Dice (all) | Failures |",
             "|---|---|---|---|---|---|---|---|"]
    for rep in reports:
        for name, agg in rep.aggregates.items():
            ex, al = agg["excluding_failures"], agg["all_images"]
            lines.append(
                f"| {name} | SAM ({rep.backbone}) | {rep.clusterer} | {_pct(ex['dice'])} | "
                f"{_pct(ex['iou'])} | {_pct(ex['kappa'])} | {_pct(al['dice'])} | "
                f"{100 * agg['failure_fraction']:.1f}% |")
    return "\n".join(lines) + "\n"


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r["image_id"], r["dataset"], r["backbone"], r["clusterer"],
                    repr(r["dice"]), repr(r["iou"]), repr(r["kappa"]), ";".join(r["flags"]),
                    r["region_violations"], r["n_prompts"]])
    return buf.getvalue()


def render_report(report: MetricReport, fmt, out_dir) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports to {out_dir}: {exc}") from exc
    if fmt == "csv":
        path, text = out_dir / "metrics.csv", report_csv(report)
    elif fmt == "json":
        path, text = out_dir / "report.json", report.to_json() + "\n"
    elif fmt == "md":
        body = markdown_table([report])
        if report.failures:
            body += "\nFailures (Dice < {:.2f}): {}\n".format(report.failure_threshold,
                                                              ", ".join(report.failures))
        body += f"\nConfig hash: `{report.config_hash}`\n"
        path, text = out_dir / "report.md", body
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text)
    return path


def render_overlays(samples, masks, out_dir):
    """Ground truth in green, prediction in red, overlap in yellow."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s, m in zip(samples, masks):
        img = np.asarray(s.image)
        base = img if img.ndim == 3 else np.repeat(img[:, :, None], 3, axis=2)
        over = base.astype(np.float64) * 0.6
        over[s.lung_mask, 1] += 100
        over[m, 0] += 100
        Image.fromarray(np.clip(over, 0, 255).astype(np.uint8)).save(out_dir / f"{s.id}.png")


def load_manifest_samples(manifest_path, buckets=("test",)):
    """Samples named in the manifest's buckets, loaded from its recorded roots."""
    split = DatasetSplit.load(manifest_path)
    base = Path(manifest_path).parent
    wanted = {}
    for b in buckets:
        for sid in getattr(split, f"{b}_ids"):
            wanted[sid] = b
    out = []
    for root in split.roots:
        path = base / root["path"] if not Path(root["path"]).is_absolute() else Path(root["path"])
        heart = root.get("heart_masks")
        if heart and not Path(heart).is_absolute():
            heart = base / heart
        for s in load_dataset(path, heart, dataset=root.get("dataset")):
            if s.id in wanted:
                s.split = wanted[s.id]
                out.append(s)
    return sorted(out, key=lambda s: s.id)


def load_components(config: ExperimentConfig):
    lung = load_model(config.lung_model)
    heart = load_model(config.heart_model) if config.heart_model else None
    if config.backend == "fake":
        session = fake_session()
    else:
        session = load_session(config.backbone, config.checkpoint, config.lock_file)
    return lung, heart, session


def run_experiment(config: ExperimentConfig) -> MetricReport:
    config.check_paths()
    samples = load_manifest_samples(config.manifest)
    lung, heart, session = load_components(config)
    return evaluate(samples, config, lung, heart, session, out_dir=config.output_dir)
