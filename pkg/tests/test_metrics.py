"""Normalized-error metric tests: hand-computed quotients, invariances,
bucket edges, and the consistency of the evaluation report."""
import math

import numpy as np
import pytest

from treemoe.cascade import build_cascade_model, mean_box_scale, mean_shape
from treemoe.metrics import (
    BUCKET_LABELS,
    evaluate,
    nme_bbox,
    nme_interpupil,
    yaw_bucket,
)
from treemoe.moe import ModelDims
from treemoe.synthdata import generate_dataset, load_split


def small_dims():
    return ModelDims(
        landmarks=12, patch_size=8, features_per_landmark=2, image_size=96,
        single_cnn=((2, 3, 2), (2, 3, 2)), expert_cnn=((2, 3, 2), (2, 3, 2)),
        reg_hidden=4, reg_experts=4, reg_tree_depth=2,
        rep_experts=2, rep_tree_depth=1, baseline_hidden=8)


# ------------------------------------------------------------ hand values

def test_bbox_nme_uniform_offset():
    # every landmark off by 3 pixels in x, box 4 x 9 -> 3 / sqrt(36) = 0.5
    gt = np.array([0.0, 0.0, 10.0, 0.0, 0.0, 10.0, 10.0, 10.0])
    pred = gt.copy().reshape(-1, 2)
    pred[:, 0] += 3.0
    assert nme_bbox(pred.reshape(-1), gt, 4.0, 9.0) == pytest.approx(0.5, abs=1e-15)


def test_bbox_nme_single_landmark_error():
    # one of four landmarks off by 8 -> mean distance 2, box 2 x 8 -> 0.5
    gt = np.zeros(8)
    pred = gt.copy()
    pred[0] = 8.0
    assert nme_bbox(pred, gt, 2.0, 8.0) == pytest.approx(0.5, abs=1e-15)


def test_bbox_nme_3_4_5_displacements():
    # both landmarks displaced by a 3-4-5 triangle -> distance 5, box 5 x 20
    gt = np.array([1.0, 2.0, 7.0, -1.0])
    pred = gt + np.array([3.0, 4.0, -3.0, 4.0])
    assert nme_bbox(pred, gt, 5.0, 20.0) == pytest.approx(0.5, abs=1e-15)


def test_interpupil_nme_uniform_offset():
    # pupils at (0,0) and (8,6): distance 10; every landmark off by 5 -> 0.5
    gt = np.array([0.0, 0.0, 8.0, 6.0, 2.0, 2.0, 4.0, 1.0])
    pred = gt.copy().reshape(-1, 2)
    pred[:, 1] += 5.0
    assert nme_interpupil(pred.reshape(-1), gt, 0, 1) == pytest.approx(0.5, abs=1e-15)


def test_interpupil_denominator_uses_ground_truth():
    gt = np.array([0.0, 0.0, 4.0, 0.0, 1.0, 1.0])
    pred = gt.copy()
    pred[0] = -6.0  # moves a pupil in the prediction only
    # mean distance = 2, gt pupil distance stays 4
    assert nme_interpupil(pred, gt, 0, 1) == pytest.approx(0.5, abs=1e-15)


def test_zero_error_gives_zero_nme():
    gt = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert nme_bbox(gt, gt, 7.0, 3.0) == 0.0
    assert nme_interpupil(gt, gt, 0, 2) == 0.0


# ------------------------------------------------------------ invariances

def test_metrics_are_translation_invariant(rng):
    gt = rng.normal(50.0, 10.0, size=24)
    pred = gt + rng.normal(0.0, 2.0, size=24)
    base_bb = nme_bbox(pred, gt, 30.0, 40.0)
    base_ip = nme_interpupil(pred, gt, 0, 1)
    for tx, ty in [(13.0, -7.0), (250.0, 125.0)]:
        t = np.tile([tx, ty], 12)
        assert abs(nme_bbox(pred + t, gt + t, 30.0, 40.0) - base_bb) < 1e-12
        assert abs(nme_interpupil(pred + t, gt + t, 0, 1) - base_ip) < 1e-12


def test_metrics_are_scale_invariant(rng):
    gt = rng.normal(50.0, 10.0, size=24)
    pred = gt + rng.normal(0.0, 2.0, size=24)
    base_bb = nme_bbox(pred, gt, 30.0, 40.0)
    base_ip = nme_interpupil(pred, gt, 0, 1)
    for s in (0.25, 3.0, 17.0):
        assert abs(nme_bbox(s * pred, s * gt, s * 30.0, s * 40.0) - base_bb) < 1e-12
        assert abs(nme_interpupil(s * pred, s * gt, 0, 1) - base_ip) < 1e-12


# ------------------------------------------------------------ validation

def test_nme_validation_errors():
    gt = np.array([0.0, 0.0, 4.0, 0.0])
    with pytest.raises(ValueError, match="distinct landmarks"):
        nme_interpupil(gt, gt, 1, 1)
    with pytest.raises(ValueError, match="coincident pupils"):
        nme_interpupil(gt, np.zeros(4), 0, 1)
    with pytest.raises(ValueError, match="positive extents"):
        nme_bbox(gt, gt, 0.0, 5.0)
    with pytest.raises(ValueError, match="positive extents"):
        nme_bbox(gt, gt, 5.0, -1.0)
    with pytest.raises(ValueError, match="shape mismatch"):
        nme_bbox(np.zeros(6), gt, 1.0, 1.0)


# ------------------------------------------------------------ yaw buckets

def test_yaw_bucket_edges():
    # edges live in degree space; nudge off the exact boundary because the
    # radians round trip lands 1 ulp below it
    deg = math.radians
    assert yaw_bucket(0.0) == 0
    assert yaw_bucket(deg(29.999)) == 0
    assert yaw_bucket(deg(30.001)) == 1
    assert yaw_bucket(deg(59.999)) == 1
    assert yaw_bucket(deg(60.001)) == 2
    assert yaw_bucket(deg(90.0)) == 2


def test_yaw_bucket_uses_absolute_angle():
    deg = math.radians
    assert yaw_bucket(deg(-15.0)) == 0
    assert yaw_bucket(deg(-45.0)) == 1
    assert yaw_bucket(deg(-90.0)) == 2


# ------------------------------------------------------------ reports

@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("metrics_ds")
    generate_dataset(root, 14, 321, split=0.0)  # everything lands in test/
    dataset = load_split(root, "test")
    model = build_cascade_model("baseline", small_dims(), 1,
                                np.random.default_rng(0), seed=0)
    model.mean_shape = mean_shape(dataset.samples)
    model.mean_box_scale = mean_box_scale(dataset.samples)
    return model, dataset, root


def test_report_is_self_consistent(eval_setup):
    model, dataset, _ = eval_setup
    rep = evaluate(model, dataset)
    assert rep.num_samples == len(dataset.samples) == len(rep.per_sample)
    assert sum(rep.bucket_counts) == rep.num_samples
    assert rep.overall_nme == pytest.approx(
        np.mean([r.nme_bbox_pct for r in rep.per_sample]), abs=1e-12)
    for b in range(3):
        vals = [r.nme_bbox_pct for r, s in zip(rep.per_sample, dataset.samples)
                if yaw_bucket(s.pose.yaw) == b]
        assert len(vals) == rep.bucket_counts[b]
        if vals:
            assert rep.bucket_nme[b] == pytest.approx(np.mean(vals), abs=1e-12)
        else:
            assert rep.bucket_nme[b] is None
    non_empty = [v for v in rep.bucket_nme if v is not None]
    assert rep.bucket_mean == pytest.approx(np.mean(non_empty), abs=1e-12)


def test_report_matches_direct_metric_calls(eval_setup):
    model, dataset, _ = eval_setup
    rep = evaluate(model, dataset)
    from treemoe.cascade import run_cascade_batch
    preds, _ = run_cascade_batch(model, dataset.samples)
    for row, s, pred in zip(rep.per_sample, dataset.samples, preds):
        assert row.sample_id == s.sample_id
        assert row.yaw_deg == pytest.approx(math.degrees(s.pose.yaw), abs=1e-12)
        want = nme_bbox(pred, s.landmarks, s.bbox.h, s.bbox.w) * 100.0
        assert row.nme_bbox_pct == pytest.approx(want, abs=1e-12)


def test_batch_size_does_not_change_the_report(eval_setup):
    model, dataset, _ = eval_setup
    a = evaluate(model, dataset, batch_size=3)
    b = evaluate(model, dataset, batch_size=128)
    assert a.overall_nme == pytest.approx(b.overall_nme, abs=1e-9)


def test_empty_buckets_produce_warnings(tmp_path):
    generate_dataset(tmp_path / "ds", 6, 11, split=0.0, yaw_max_deg=20.0)
    dataset = load_split(tmp_path / "ds", "test")
    model = build_cascade_model("baseline", small_dims(), 1,
                                np.random.default_rng(0), seed=0)
    model.mean_shape = mean_shape(dataset.samples)
    model.mean_box_scale = mean_box_scale(dataset.samples)
    rep = evaluate(model, dataset)
    assert rep.bucket_counts[0] == 6
    assert rep.bucket_nme[1] is None and rep.bucket_nme[2] is None
    assert f"yaw bucket {BUCKET_LABELS[1]} is empty" in rep.warnings
    assert f"yaw bucket {BUCKET_LABELS[2]} is empty" in rep.warnings
    assert rep.bucket_mean == pytest.approx(rep.bucket_nme[0], abs=1e-12)


def test_evaluate_rejects_empty_dataset(eval_setup):
    model, dataset, _ = eval_setup
    from treemoe.synthdata import LandmarkDataset
    empty = LandmarkDataset(samples=[], template=dataset.template)
    with pytest.raises(ValueError, match="evaluation set is empty"):
        evaluate(model, empty)


def test_evaluate_is_deterministic(eval_setup):
    model, dataset, _ = eval_setup
    a = evaluate(model, dataset)
    b = evaluate(model, dataset)
    assert a.overall_nme == b.overall_nme
    assert a.bucket_nme == b.bucket_nme
    assert [r.nme_bbox_pct for r in a.per_sample] == \
           [r.nme_bbox_pct for r in b.per_sample]
