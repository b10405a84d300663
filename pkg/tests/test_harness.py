import json
from dataclasses import replace

import numpy as np
import pytest

from ksam import cli
from ksam.dataset import CxrSample
from ksam.harness import (ExperimentConfig, MetricReport, compare_clusterers, evaluate,
                          markdown_table, render_report, report_csv, run_pipeline)
from ksam.prelim_seg import MeanMaskPrior
from ksam.segmenter import fake_session


@pytest.fixture(scope="module")
def fake_cfg():
    return ExperimentConfig(backend="fake", backbone="vit_l", seed=0, overlays=False)


@pytest.fixture(scope="module")
def report(test_fixtures, prior_models, fake_cfg):
    lung, heart = prior_models
    return evaluate(test_fixtures, fake_cfg, lung, heart, fake_session())


class EmptyModel(MeanMaskPrior):
    def predict_proba(self, X):
        return np.zeros((len(X), 128, 128))


def test_run_pipeline_defaults(test_fixtures, prior_models, fake_cfg):
    lung, heart = prior_models
    r = run_pipeline(test_fixtures[0], fake_cfg, lung, heart, fake_session())
    assert not r.failed
    assert r.mask.shape == (512, 512) and r.mask.dtype == bool
    assert len(r.prompts) == 10 and r.prompts.space == (512, 512)
    assert r.diagnostics["candidates_considered"] == 3


def test_empty_lung_prediction_recorded(test_fixtures, prior_models, fake_cfg):
    class NeverCalled:
        def set_image(self, *a, **k):
            raise AssertionError("segmenter must not run")

    from ksam.segmenter import SegmenterSession

    lung = EmptyModel().fit(np.zeros((1, 128, 128)), np.zeros((1, 128, 128)))
    r = run_pipeline(test_fixtures[0], fake_cfg, lung, None, SegmenterSession("x", "", NeverCalled()))
    assert r.failed and r.diagnostics["failed_stage"] == "prompt_selection"
    assert not r.mask.any() and r.prompts is None


def test_no_ground_truth_leakage(test_fixtures, prior_models, fake_cfg):
    lung, heart = prior_models
    s = test_fixtures[3]
    blind = CxrSample(s.id, s.image, np.zeros_like(s.lung_mask), None, s.dataset)
    a = run_pipeline(s, fake_cfg, lung, heart, fake_session())
    b = run_pipeline(blind, fake_cfg, lung, heart, fake_session())
    assert a.prompts.to_json() == b.prompts.to_json()
    assert np.array_equal(a.mask, b.mask)


def test_report_structure(report, test_fixtures):
    assert len(report.rows) == len(test_fixtures)
    agg = report.aggregates["other"]
    assert agg["all_images"]["n"] == 10
    assert set(agg["excluding_failures"]) == {"n", "dice", "iou", "kappa"}
    assert agg["excluding_failures"]["dice"] >= agg["all_images"]["dice"]
    assert agg["all_images"]["dice"] > 0.9
    assert all(r["region_violations"] == 0 for r in report.rows)
    assert report.config_hash and report.clusterer == "kmedoids"


def test_failure_exclusion_rule(report, fake_cfg):
    from ksam.harness import build_report

    rows = [dict(r, flags=list(r["flags"])) for r in report.rows]
    rows[0]["dice"], rows[1]["dice"] = 0.1, 0.69
    rows[0]["iou"], rows[1]["iou"] = 0.05, 0.5
    rep = build_report(rows, fake_cfg)
    agg = rep.aggregates["other"]
    assert rep.failures == sorted([rows[0]["image_id"], rows[1]["image_id"]])
    assert agg["excluding_failures"]["n"] == 8
    assert agg["failure_fraction"] == pytest.approx(0.2)
    kept = [r["dice"] for r in rows if r["dice"] >= 0.7]
    assert agg["excluding_failures"]["dice"] == pytest.approx(np.mean(kept))
    for m in ("dice", "iou"):
        assert agg["excluding_failures"][m] >= agg["all_images"][m]


def test_all_failed_gives_undefined_aggregate(report, fake_cfg):
    from ksam.harness import build_report

    rows = [dict(r, dice=0.0, flags=[]) for r in report.rows]
    rep = build_report(rows, fake_cfg)
    assert rep.aggregates["other"]["excluding_failures"]["dice"] is None
    assert rep.notes


def test_pooled_aggregation(test_fixtures, prior_models, fake_cfg):
    lung, heart = prior_models
    cfg = replace(fake_cfg, aggregation="pooled")
    rep = evaluate(test_fixtures[:3], cfg, lung, heart, fake_session())
    tp = sum(r["tp"] for r in rep.rows)
    fp = sum(r["fp"] for r in rep.rows)
    fn = sum(r["fn"] for r in rep.rows)
    assert rep.aggregates["other"]["all_images"]["dice"] == pytest.approx(2 * tp / (2 * tp + fp + fn))


def test_render_formats(report, tmp_path):
    csv_path = render_report(report, "csv", tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("image_id,dataset,backbone,clusterer,dice,iou,kappa,flags")
    assert len(lines) - 1 == len(report.rows)
    back = MetricReport.load(render_report(report, "json", tmp_path))
    assert back == report
    md = render_report(report, "md", tmp_path).read_text()
    assert md.count("| other |") == 1
    with pytest.raises(ValueError):
        render_report(report, "xml", tmp_path)


def test_markdown_one_row_per_dataset_backbone(report):
    other = replace(report, backbone="fake(vit_b)")
    table = markdown_table([report, other])
    assert table.count("| other |") == 2


def test_unwritable_output_dir(report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        render_report(report, "csv", blocker / "sub")


def test_compare_self_is_zero(report):
    c = compare_clusterers(report, report)
    assert set(c["deltas"].values()) == {0.0} and c["mean_delta"] == 0.0


def test_compare_split_mismatch(report):
    fewer = replace(report, rows=report.rows[:-1])
    with pytest.raises(ValueError):
        compare_clusterers(report, fewer)


def test_compare_kmedoids_vs_kmeans(test_fixtures, prior_models, fake_cfg, report):
    lung, heart = prior_models
    km = evaluate(test_fixtures, replace(fake_cfg, clusterer="kmeans"), lung, heart, fake_session())
    c = compare_clusterers(report, km)
    assert c["a"]["region_violations"] == 0
    assert c["b"]["region_violations"] >= 0
    assert len(c["deltas"]) == len(test_fixtures)


def test_byte_identical_reruns(test_fixtures, prior_models, fake_cfg, tmp_path):
    lung, heart = prior_models
    cfg = replace(fake_cfg, n_jobs=2)
    a = evaluate(test_fixtures[:4], cfg, lung, heart, fake_session(), out_dir=tmp_path / "a")
    b = evaluate(test_fixtures[:4], cfg, lung, heart, fake_session(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert report_csv(a) == report_csv(b)
    assert (tmp_path / "a" / "masks").is_dir() and (tmp_path / "a" / "prompts").is_dir()


def test_config_from_toml(tmp_path):
    (tmp_path / "run.toml").write_text(
        'version = 1\nseed = 3\noutput_dir = "out"\n'
        '[data]\nmanifest = "m.json"\n[models]\nlung = "lung"\n'
        '[segmenter]\nbackend = "fake"\nbackbone = "vit_b"\n'
        '[prompting]\nclusterer = "kmeans"\n'
        '[postprocess]\nerode_iters = 2\ndilate_iters = 4\n'
        '[evaluation]\nfailure_threshold = 0.5\n')
    cfg = ExperimentConfig.from_toml(tmp_path / "run.toml")
    assert cfg.seed == 3 and cfg.clusterer == "kmeans" and cfg.backbone == "vit_b"
    assert cfg.morph.erode_iters == 2 and cfg.morph.dilate_iters == 4
    assert cfg.failure_threshold == 0.5 and cfg.heart_model is None
    assert cfg.manifest == str(tmp_path / "m.json")
    with pytest.raises(FileNotFoundError):
        cfg.check_paths()
    assert cfg.config_hash() != replace(cfg, seed=4).config_hash()


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(clusterer="dbscan")
    with pytest.raises(ValueError):
        ExperimentConfig(backbone="vit_g")


def test_cli_end_to_end(tmp_path, capsys):
    from ksam.fixtures import write_fixture_dataset

    write_fixture_dataset(tmp_path / "montgomery", n=12, seed=7)
    man = tmp_path / "manifest.json"
    cli.main(["data", "prepare", "--root", str(tmp_path / "montgomery"),
              "--heart-masks", str(tmp_path / "montgomery" / "heart_masks"),
              "--seed", "1", "--out", str(man)])
    m = json.loads(man.read_text())
    assert (len(m["train"]), len(m["val"]), len(m["test"])) == (8, 1, 3)

    for target in ("lung", "heart"):
        cli.main(["train", "--target", target, "--model", "mean-prior", "--manifest", str(man),
                  "--out", str(tmp_path / f"{target}_model")])
    cli.main(["prompts", "--manifest", str(man), "--lung-model", str(tmp_path / "lung_model"),
              "--heart-model", str(tmp_path / "heart_model"), "--out", str(tmp_path / "prompts")])
    prompt_files = sorted((tmp_path / "prompts").glob("*.json"))
    assert len(prompt_files) == 3
    p = json.loads(prompt_files[0].read_text())
    assert p["space"] == [512, 512] and len(p["positives"]) == 2 and len(p["negatives"]) == 8

    for name, clusterer in (("a", "kmedoids"), ("b", "kmeans")):
        (tmp_path / f"{name}.toml").write_text(
            f'output_dir = "run_{name}"\n[data]\nmanifest = "manifest.json"\n'
            '[models]\nlung = "lung_model"\nheart = "heart_model"\n'
            f'[segmenter]\nbackend = "fake"\n[prompting]\nclusterer = "{clusterer}"\n')
        cli.main(["eval", "--config", str(tmp_path / f"{name}.toml")])
    out = capsys.readouterr().out
    assert "| montgomery |" in out
    run_a = tmp_path / "run_a"
    assert len(list((run_a / "overlays").glob("*.png"))) == 3
    assert (run_a / "cache" / "prelim").is_dir()

    cli.main(["report", "--run", str(run_a), "--format", "md", "--out", str(tmp_path / "rep")])
    assert (tmp_path / "rep" / "report.md").exists()
    cli.main(["compare", "--a", str(run_a), "--b", str(tmp_path / "run_b"),
              "--out", str(tmp_path / "cmp.json")])
    cmp_ = json.loads((tmp_path / "cmp.json").read_text())
    assert cmp_["a"]["region_violations"] == 0 and len(cmp_["deltas"]) == 3

    # second run reuses the cached preliminary masks
    before = sorted(p.name for p in (run_a / "cache").rglob("*.npz"))
    cli.main(["eval", "--config", str(tmp_path / "a.toml")])
    assert sorted(p.name for p in (run_a / "cache").rglob("*.npz")) == before
