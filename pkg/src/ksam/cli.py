"""Command line entry point: ``ksam {data,train,prompts,eval,compare,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("ksam")


def _cmd_data_prepare(args):
    from .dataset import load_dataset, split_dataset

    hearts = list(args.heart_masks or [])
    if hearts and len(hearts) != len(args.root):
        raise SystemExit("--heart-masks must be given once per --root, or not at all")
    samples, roots = [], []
    for i, root in enumerate(args.root):
        heart = hearts[i] if hearts else None
        loaded = load_dataset(root, heart, on_error="skip")
        samples += loaded
        roots.append({"path": str(Path(root).resolve()),
                      "heart_masks": str(Path(heart).resolve()) if heart else None,
                      "dataset": loaded[0].dataset if loaded else "other"})
    split = split_dataset(samples, seed=args.seed)
    split.roots = roots
    split.save(args.out)
    print(f"{len(samples)} samples -> train {len(split.train_ids)}, "
          f"val {len(split.val_ids)}, test {len(split.test_ids)} ({args.out})")


def _cmd_train(args):
    from .dataset import preprocess
    from .harness import load_manifest_samples
    from .prelim_seg import EncoderSpec, MeanMaskPrior, TrainConfig, _stack_target, train_model

    samples = load_manifest_samples(args.manifest, buckets=("train", "val"))
    train = [preprocess(s) for s in samples if s.split == "train"]
    val = [preprocess(s) for s in samples if s.split == "val"]
    if args.model == "mean-prior":
        X, y = _stack_target(train, args.target)
        model = MeanMaskPrior(target=args.target).fit(X, y)
    else:
        cfg = TrainConfig(max_epochs=args.max_epochs, patience=args.patience,
                          batch_size=args.batch_size, learning_rate=args.lr,
                          target=args.target, seed=args.seed)
        model = train_model(train, val, EncoderSpec(args.encoder, not args.no_pretrained), cfg,
                            device=args.device)
    model.save(args.out)
    print(f"saved {args.target} model to {args.out}")


def _cmd_prompts(args):
    from .harness import coarse_masks, load_manifest_samples
    from .prelim_seg import load_model
    from .prompting import extract_regions, scale_prompts, select_prompts

    lung = load_model(args.lung_model)
    heart = load_model(args.heart_model) if args.heart_model else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for s in load_manifest_samples(args.manifest, buckets=tuple(args.split)):
        lm, hm = coarse_masks(s.image, lung, heart)
        try:
            p = select_prompts(extract_regions(lm, hm), seed=args.seed, clusterer=args.clusterer)
        except ValueError as exc:
            logger.warning("%s: %s", s.id, exc)
            continue
        p.image_id = s.id
        scale_prompts(p, s.dims).save(out / f"{s.id}.json")
        n += 1
    print(f"wrote {n} prompt files to {out}")


def _cmd_eval(args):
    from .harness import ExperimentConfig, markdown_table, run_experiment

    report = run_experiment(ExperimentConfig.from_toml(args.config))
    print(markdown_table([report]), end="")


def _cmd_compare(args):
    from .harness import MetricReport, compare_clusterers

    result = compare_clusterers(MetricReport.load(args.a), MetricReport.load(args.b))
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(f"mean Dice {result['a']['mean_dice']:.4f} ({result['a']['clusterer']}) vs "
          f"{result['b']['mean_dice']:.4f} ({result['b']['clusterer']}); "
          f"mean delta {result['mean_delta']:+.4f}; region violations "
          f"{result['a']['region_violations']} / {result['b']['region_violations']}")


def _cmd_report(args):
    from .harness import MetricReport, render_report

    report = MetricReport.load(args.run)
    path = render_report(report, args.format, args.out or args.run)
    print(path)


def build_parser():
    p = argparse.ArgumentParser(prog="ksam")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset utilities")
    dsub = data.add_subparsers(dest="data_command", required=True)
    prep = dsub.add_parser("prepare", help="load dataset roots and write a split manifest")
    prep.add_argument("--root", action="append", required=True)
    prep.add_argument("--heart-masks", action="append")
    prep.add_argument("--seed", type=int, default=0)
    prep.add_argument("--out", required=True)
    prep.set_defaults(func=_cmd_data_prepare)

    tr = sub.add_parser("train", help="train a preliminary lung or heart segmenter")
    tr.add_argument("--target", choices=("lung", "heart"), required=True)
    tr.add_argument("--encoder", default="vgg19",
                    choices=("vgg16", "vgg19", "xception", "resnet34", "densenet169"))
    tr.add_argument("--model", choices=("unet", "mean-prior"), default="unet")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--max-epochs", type=int, default=20)
    tr.add_argument("--patience", type=int, default=3)
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--device", default="cpu")
    tr.add_argument("--no-pretrained", action="store_true")
    tr.set_defaults(func=_cmd_train)

    pr = sub.add_parser("prompts", help="export point prompts as JSON")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--lung-model", required=True)
    pr.add_argument("--heart-model")
    pr.add_argument("--clusterer", choices=("kmedoids", "kmeans"), default="kmedoids")
    pr.add_argument("--split", action="append", choices=("train", "val", "test"))
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=_cmd_prompts)

    ev = sub.add_parser("eval", help="run an experiment from a TOML config")
    ev.add_argument("--config", required=True)
    ev.set_defaults(func=_cmd_eval)

    cmp_ = sub.add_parser("compare", help="paired comparison of two runs")
    cmp_.add_argument("--a", required=True)
    cmp_.add_argument("--b", required=True)
    cmp_.add_argument("--out")
    cmp_.set_defaults(func=_cmd_compare)

    rp = sub.add_parser("report", help="render a run's report")
    rp.add_argument("--run", required=True)
    rp.add_argument("--format", choices=("csv", "json", "md"), default="md")
    rp.add_argument("--out")
    rp.set_defaults(func=_cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "split", "unset") is None:
        args.split = ["test"]
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
