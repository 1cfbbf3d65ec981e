import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnsplit.config import EvalConfig
from attnsplit.data_synth import DatasetSpec, Domain, build_dataset, empty_backgrounds
from attnsplit.evaluation import (
    Detection,
    attention_iou,
    average_precision,
    box_iou,
    boxes_from_mask,
    detector_ap,
    make_report,
    mean_preservation,
    object_preservation,
    summarize,
    train_toy_detector,
)


@pytest.fixture(scope="module")
def scene():
    spec = DatasetSpec(n_source=8, n_target=8, n_intermediate=1)
    src = build_dataset(spec)[Domain.SOURCE]
    keep = [i for i in range(len(src)) if src.labels[i].any()]
    src = src.subset(keep)
    return src, empty_backgrounds(src, spec)


def test_preservation_untouched_object(scene):
    src, bg = scene
    assert object_preservation(src.images[0], src.images[0], bg[0], src.labels[0]) == 1.0


def test_preservation_vanished_object(scene):
    src, bg = scene
    assert object_preservation(src.images[0], bg[0], bg[0], src.labels[0]) == 0.0


def test_preservation_midpoint(scene):
    src, bg = scene
    for i in range(len(src)):
        mid = 0.5 * (src.images[i] + bg[i])
        assert object_preservation(src.images[i], mid, bg[i], src.labels[i]) == pytest.approx(0.5, abs=0.05)


def test_preservation_restyled_object_survives(scene):
    src, bg = scene
    recolored = src.images[0].copy()
    m = src.labels[0] > 0
    recolored[:, m] = np.array([0.85, 0.15, 0.2])[:, None]
    assert object_preservation(src.images[0], recolored, bg[0], src.labels[0]) > 0.75


def test_preservation_empty_mask_errors(scene):
    src, bg = scene
    with pytest.raises(ValueError):
        object_preservation(src.images[0], src.images[0], bg[0], np.zeros(src.labels[0].shape))


def test_mean_preservation_skips_empty(scene):
    src, bg = scene
    masks = src.labels.copy()
    masks[0] = 0
    assert mean_preservation(src.images, src.images, bg, masks) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_preservation_identity_always_one(seed):
    rng = np.random.default_rng(seed)
    o, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    m = rng.random((8, 8)) < 0.3
    m[0, 0] = True
    o[:, 0, 0] = b[:, 0, 0] + 0.5
    assert object_preservation(o, o, b, m) == 1.0


def test_attention_iou_cases():
    gt = np.zeros((6, 6))
    gt[1:3, 1:3] = 1
    assert attention_iou(gt, gt, 0.5) == 1.0
    assert attention_iou(gt, gt, 0.99) == 1.0
    other = np.zeros((6, 6))
    other[4:, 4:] = 1
    assert attention_iou(other, gt, 0.5) == 0.0
    plus = gt.copy()
    plus[4, 4] = 1
    assert attention_iou(plus, gt, 0.5) == pytest.approx(0.8)
    assert attention_iou(np.zeros((6, 6)), np.zeros((6, 6))) == 1.0


def test_attention_iou_shape_mismatch():
    with pytest.raises(ValueError):
        attention_iou(np.zeros((4, 4)), np.zeros((5, 5)))


def test_boxes_from_mask():
    m = np.zeros((10, 10))
    m[1:3, 2:6] = 1
    m[7, 7] = 1
    m[8, 8] = 1  # diagonal neighbour joins the same 8-connected blob
    assert sorted(boxes_from_mask(m)) == [(1, 2, 2, 5), (7, 7, 8, 8)]
    assert box_iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert box_iou((0, 0, 1, 3), (0, 0, 1, 1)) == pytest.approx(0.5)


GT = [[(0, 0, 9, 9)]]


def test_ap_tp_then_fp():
    dets = [Detection(0, (0, 0, 9, 9), 0.9), Detection(0, (20, 20, 25, 25), 0.5)]
    assert average_precision(dets, GT).ap == pytest.approx(1.0)


def test_ap_fp_then_tp():
    dets = [Detection(0, (0, 0, 9, 9), 0.5), Detection(0, (20, 20, 25, 25), 0.9)]
    assert average_precision(dets, GT).ap == pytest.approx(0.5)


def test_ap_perfect_and_empty():
    gts = [[(0, 0, 4, 4), (10, 10, 14, 14)], [(3, 3, 8, 8)]]
    perfect = [Detection(i, b, 1.0) for i, boxes in enumerate(gts) for b in boxes]
    assert average_precision(perfect, gts).ap == 1.0
    assert average_precision([], gts).ap == 0.0


def test_ap_duplicate_detection_is_false_positive():
    dets = [Detection(0, (0, 0, 9, 9), 0.9), Detection(0, (0, 0, 9, 9), 0.8)]
    res = average_precision(dets, GT)
    assert res.ap == 1.0 and res.n_detections == 2


def test_ap_undefined_without_ground_truth():
    res = average_precision([Detection(0, (0, 0, 3, 3), 0.9)], [[]])
    assert res.ap == 0.0 and res.undefined


def test_ap_size_filter():
    gts = [[(0, 0, 9, 9), (20, 20, 22, 22)]]
    dets = [Detection(0, (20, 20, 22, 22), 0.9), Detection(0, (0, 0, 9, 9), 0.8)]
    full = average_precision(dets, gts, min_size=0)
    filtered = average_precision(dets, gts, min_size=6)
    assert full.n_gt == 2 and filtered.n_gt == 1
    # the match to the ignored small object is neither a hit nor a false alarm
    assert filtered.ap == 1.0


boxes = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 8), st.integers(1, 8)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(boxes, max_size=3), min_size=1, max_size=3),
       st.lists(st.tuples(st.integers(0, 2), boxes, st.floats(0.01, 1.0)), max_size=8),
       st.integers(0, 8))
def test_ap_properties(gts, raw, min_size):
    dets = [Detection(i % len(gts), b, s) for i, b, s in raw]
    res = average_precision(dets, gts, min_size=min_size)
    assert 0.0 <= res.ap <= 1.0
    # strictly monotone rescaling of scores leaves AP unchanged
    rescaled = [Detection(d.image, d.box, 3.0 * d.score ** 3 + 1.0) for d in dets]
    assert average_precision(rescaled, gts, min_size=min_size).ap == pytest.approx(res.ap, abs=1e-12)
    # raising the size threshold never adds ground truth
    assert average_precision(dets, gts, min_size=min_size + 2).n_gt <= res.n_gt
    assert average_precision(dets, gts, min_size=0).n_gt == sum(len(g) for g in gts)


def test_report_ratios_and_gaps():
    runs = {"target": {"full": 0.8, "filtered": 0.9}, "augmented": {"full": 0.2, "filtered": 0.3},
            "adapted": {"full": 0.4, "filtered": 0.45}}
    rep = make_report(runs)
    assert rep.ratio["full"]["target"] == 1.0
    for ev in ("full", "filtered"):
        for t in runs:
            assert abs(rep.ratio[ev][t] - runs[t][ev] / runs["target"][ev]) <= 1e-9
    partial = make_report({"target": {"full": 0.8}, "adapted": {"full": 0.4}})
    assert partial.missing == ["augmented"]
    assert partial.ap["full"]["augmented"] is None and partial.ratio["full"]["augmented"] is None
    assert "--" in partial.table()


def test_report_reference_ratios():
    # published Cityscapes numbers: the upper bound is implied by the adapted ratio
    upper = 0.118 / 0.3278
    rep = make_report({"target": {"cs": upper}, "augmented": {"cs": 0.092}, "adapted": {"cs": 0.118}})
    assert rep.ratio["cs"]["adapted"] == pytest.approx(0.3278, abs=1e-4)
    assert rep.ratio["cs"]["augmented"] == pytest.approx(0.2556, abs=1e-3)
    assert rep.ap["cs"]["adapted"] > rep.ap["cs"]["augmented"]


def test_report_save(tmp_path):
    rep = make_report({"target": {"full": 0.8}, "augmented": {"full": 0.2}, "adapted": {"full": 0.4}},
                      config_hash="abc", dataset_manifest_hash="def", preservation={"baseline": 0.2})
    rep.save(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["config_hash"] == "abc" and data["dataset_manifest_hash"] == "def"
    assert (tmp_path / "report.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "Adapted" in (tmp_path / "report.txt").read_text()


def test_summarize():
    s = summarize([1.0, 2.0, 3.0, 4.0, 5.0])
    assert s["median"] == 3.0 and s["q1"] == 2.0 and s["q3"] == 4.0


@pytest.fixture(scope="module")
def clean_target():
    spec = DatasetSpec(n_source=1, n_target=200, n_intermediate=1, target_frequency=0.04, seed=5)
    return build_dataset(spec)[Domain.TARGET]


def test_detector_sanity_on_clean_target(clean_target):
    det = train_toy_detector(clean_target.images, clean_target.labels, seed=0)
    assert detector_ap(det, clean_target.images, clean_target.labels).ap >= 0.8


def test_detector_is_deterministic(clean_target):
    cfg = EvalConfig(detector_iterations=20)
    a = train_toy_detector(clean_target.images, clean_target.labels, cfg, seed=1)
    b = train_toy_detector(clean_target.images, clean_target.labels, cfg, seed=1)
    assert np.array_equal(a.objectness(clean_target.images[:4]), b.objectness(clean_target.images[:4]))


def test_detector_needs_positives(clean_target):
    with pytest.raises(ValueError):
        train_toy_detector(clean_target.images, np.zeros_like(clean_target.labels))


def test_detector_on_background_only_is_undefined(clean_target):
    cfg = EvalConfig(detector_iterations=20)
    det = train_toy_detector(clean_target.images, clean_target.labels, cfg)
    blank = np.zeros_like(clean_target.labels[:5])
    res = detector_ap(det, clean_target.images[:5] * 0 + 0.4, blank)
    assert res.undefined and res.ap == 0.0
