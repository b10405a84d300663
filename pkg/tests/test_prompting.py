import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksam.dataset import preprocess
from ksam.fixtures import fixture_geometry, make_fixture_sample
from ksam.prompting import (WARN_HEART_ABSENT, WARN_HEART_SMALL, NoLungRegionError,
                            PromptSelector, PromptSet, count_region_violations,
                            extract_regions, scale_prompts, select_prompts)


def small_masks(seed):
    p = preprocess(make_fixture_sample(seed))
    return p.lung_mask_small, p.heart_mask_small


def in_ellipse(point, center, axes, scale):
    r, c = (point[0] + 0.5) * scale, (point[1] + 0.5) * scale
    return ((r - center[0]) / axes[0]) ** 2 + ((c - center[1]) / axes[1]) ** 2 <= 1.0


def test_extract_regions_no_heart():
    lung = np.zeros((8, 8), bool)
    lung[2:4, 2:4] = True
    reg = extract_regions(lung, np.zeros((8, 8), bool))
    assert len(reg.heart) == 0 and len(reg.outside) == 60
    assert np.array_equal(reg.mask("outside"), ~lung)


def test_extract_regions_overlap_goes_to_lung():
    lung = np.zeros((4, 4), bool)
    heart = np.zeros((4, 4), bool)
    lung[1, 1] = heart[1, 1] = heart[1, 2] = True
    reg = extract_regions(lung, heart)
    assert reg.lung.tolist() == [[1, 1]] and reg.heart.tolist() == [[1, 2]]


def test_extract_regions_fixture_partition():
    lung, heart = small_masks(0)
    reg = extract_regions(lung, heart)
    assert len(reg.lung) + len(reg.outside) + len(reg.heart) == 128 * 128
    total = reg.mask("lung").astype(int) + reg.mask("outside") + reg.mask("heart")
    assert (total == 1).all()


def test_extract_regions_empty_lung():
    with pytest.raises(NoLungRegionError, match="no lung region"):
        extract_regions(np.zeros((8, 8), bool))


def test_fixture_positives_one_per_lung():
    for seed in range(3):
        lung, heart = small_masks(seed)
        ps = select_prompts(extract_regions(lung, heart), seed=0)
        geo = fixture_geometry(seed)
        hits = [[in_ellipse(p, *geo[side], 4.0) for p in ps.positives]
                for side in ("left_lung", "right_lung")]
        assert sorted(map(sum, hits)) == [1, 1]


def test_prompt_invariants_and_counts():
    lung, heart = small_masks(5)
    reg = extract_regions(lung, heart)
    ps = select_prompts(reg, seed=0)
    assert len(ps.positives) == 2 and len(ps.negatives) == 8
    assert ps.negative_sources == ["outside"] * 5 + ["heart"] * 3
    assert all(lung[r, c] for r, c in ps.positives)
    for (r, c), src in zip(ps.negatives, ps.negative_sources):
        assert not lung[r, c]
        assert heart[r, c] == (src == "heart")
    assert count_region_violations(ps, reg) == 0
    assert not {tuple(p) for p in ps.positives} & {tuple(p) for p in ps.negatives}


def test_determinism():
    reg = extract_regions(*small_masks(2))
    assert select_prompts(reg, seed=4).to_json() == select_prompts(reg, seed=4).to_json()


def test_heart_absent_degrades_to_seven_points():
    lung, _ = small_masks(1)
    ps = select_prompts(extract_regions(lung, None))
    assert len(ps) == 7 and WARN_HEART_ABSENT in ps.warnings


def test_tiny_heart_taken_whole():
    lung, _ = small_masks(1)
    heart = np.zeros_like(lung)
    heart[0, 0] = heart[0, 1] = True
    ps = select_prompts(extract_regions(lung, heart))
    assert WARN_HEART_SMALL in ps.warnings
    assert ps.negatives[-2:].tolist() == [[0, 0], [0, 1]]


def test_single_pixel_lung_errors():
    lung = np.zeros((16, 16), bool)
    lung[4, 4] = True
    with pytest.raises(NoLungRegionError):
        select_prompts(extract_regions(lung))


def test_kmeans_clusterer_runs_and_counts():
    lung, heart = small_masks(3)
    reg = extract_regions(lung, heart)
    ps = select_prompts(reg, clusterer="kmeans")
    assert len(ps) == 10
    assert count_region_violations(ps, reg) >= 0


def test_kmeans_violation_on_crescent():
    # a ring-shaped lung puts its mean in the hole
    rr, cc = np.ogrid[:64, :64]
    d = np.hypot(rr - 32, cc - 32)
    lung = (d < 20) & (d > 14)
    reg = extract_regions(lung)
    km = select_prompts(reg, clusterer="kmeans", n_positive=1)
    kmed = select_prompts(reg, clusterer="kmedoids", n_positive=1)
    assert count_region_violations(km, reg) >= 1
    assert count_region_violations(kmed, reg) == 0


def test_scale_prompts_examples():
    ps = PromptSet([[64, 64], [127, 127]], [[0, 0]], (128, 128))
    big = scale_prompts(ps, (512, 512))
    assert big.positives.tolist() == [[258, 258], [510, 510]]
    assert big.negatives.tolist() == [[2, 2]]
    assert big.space == (512, 512)
    same = scale_prompts(ps, (128, 128))
    assert np.array_equal(same.positives, ps.positives)
    with pytest.raises(ValueError):
        scale_prompts(ps, (64, 64))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 127), st.integers(0, 127)), min_size=2, max_size=10),
       st.integers(128, 1024), st.integers(128, 1024))
def test_scale_monotone_in_bounds(pts, rows, cols):
    ps = PromptSet(pts, [], (128, 128))
    out = scale_prompts(ps, (rows, cols)).positives
    assert (out >= 0).all() and (out[:, 0] < rows).all() and (out[:, 1] < cols).all()
    src = np.array(pts)
    for axis in (0, 1):
        order = np.argsort(src[:, axis], kind="stable")
        assert (np.diff(out[order, axis]) >= 0).all()


def test_json_round_trip(tmp_path):
    reg = extract_regions(*small_masks(0))
    ps = select_prompts(reg)
    ps.image_id = "abc"
    ps.save(tmp_path / "p.json")
    raw = json.loads((tmp_path / "p.json").read_text())
    assert {"image_id", "space", "positives", "negatives", "warnings"} <= set(raw)
    back = PromptSet.load(tmp_path / "p.json")
    assert back.to_json() == ps.to_json()


def test_selector_estimator():
    lung, heart = small_masks(0)
    sel = PromptSelector(clusterer="kmedoids").fit()
    out = sel.transform([lung], [heart])
    assert len(out) == 1 and len(out[0]) == 10
    assert sel.get_params()["n_heart"] == 3
    with pytest.raises(ValueError):
        PromptSelector(clusterer="dbscan").fit()
