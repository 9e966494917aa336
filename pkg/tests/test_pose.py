"""Pose estimator: angle ranges, head independence, learnability."""
import numpy as np
import pytest

from treemoe.errors import NumericError
from treemoe.pose import (POSE_INPUT_SIZE, PoseAngles, make_pose_model,
                          pose_forward, pose_forward_batch, pose_oracle,
                          prepare_pose_inputs, resize_bilinear, train_pose)
from treemoe.synthdata import draw_poses, generate_sample


def make_samples(n, seed, **kw):
    poses = draw_poses(n, seed, **kw)
    return [generate_sample(p, seed=seed * 100000 + i, sample_id=f"s{i:04d}")
            for i, p in enumerate(poses)]


# -------------------------------------------------------------- pose angles


def test_pose_angles_roundtrip_and_validation():
    p = PoseAngles(0.5, -0.2, 0.1)
    assert PoseAngles.from_vector(p.as_vector()) == p
    with pytest.raises(ValueError, match="yaw"):
        PoseAngles(4.0, 0.0, 0.0)
    with pytest.raises(ValueError, match="pitch"):
        PoseAngles(0.0, float("nan"), 0.0)
    with pytest.raises(ValueError, match="3 entries"):
        PoseAngles.from_vector(np.zeros(4))


def test_pose_oracle_returns_stored_pose():
    s = make_samples(1, 3)[0]
    assert pose_oracle(s) is s.pose
    with pytest.raises(ValueError, match="no ground-truth pose"):
        pose_oracle(object())


# ------------------------------------------------------------------ resize


def test_resize_bilinear_identity():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(16, 16))
    assert np.max(np.abs(resize_bilinear(img, 16, 16) - img)) < 1e-12


def test_resize_bilinear_constant_preserved():
    img = np.full((96, 96), 0.37)
    out = resize_bilinear(img, 64, 64)
    assert out.shape == (64, 64)
    assert np.max(np.abs(out - 0.37)) < 1e-12


def test_resize_bilinear_downsample_averages():
    img = np.zeros((4, 4))
    img[:2] = 1.0  # top half bright
    out = resize_bilinear(img, 2, 2)
    assert out.shape == (2, 2)
    assert np.all(out[0] > out[1])


# ----------------------------------------------------------------- network


def test_pose_forward_batch_shape_and_range():
    model = make_pose_model(np.random.default_rng(1))
    rng = np.random.default_rng(2)
    imgs = rng.normal(size=(5, POSE_INPUT_SIZE, POSE_INPUT_SIZE))
    out = pose_forward_batch(model, imgs).data
    assert out.shape == (5, 3)
    assert np.all(np.abs(out) < np.pi)


def test_pose_forward_batch_rejects_wrong_size():
    model = make_pose_model(np.random.default_rng(1))
    with pytest.raises(ValueError, match="expected"):
        pose_forward_batch(model, np.zeros((2, 32, 32)))


def test_pose_heads_are_independent():
    # changing the roll head must not move yaw or pitch outputs
    model = make_pose_model(np.random.default_rng(3))
    rng = np.random.default_rng(4)
    imgs = rng.normal(size=(3, POSE_INPUT_SIZE, POSE_INPUT_SIZE))
    before = pose_forward_batch(model, imgs).data.copy()
    model.heads[2].w1.data = model.heads[2].w1.data + 0.5
    after = pose_forward_batch(model, imgs).data
    assert np.array_equal(before[:, 0], after[:, 0])
    assert np.array_equal(before[:, 1], after[:, 1])
    assert not np.array_equal(before[:, 2], after[:, 2])


def test_pose_forward_single_image():
    model = make_pose_model(np.random.default_rng(5))
    s = make_samples(1, 6)[0]
    p = pose_forward(model, s.image)
    assert isinstance(p, PoseAngles)
    small = prepare_pose_inputs([s.image])
    batch = pose_forward_batch(model, small).data[0]
    assert np.max(np.abs(p.as_vector() - batch)) < 1e-12


def test_make_pose_model_is_deterministic():
    a = make_pose_model(np.random.default_rng(7))
    b = make_pose_model(np.random.default_rng(7))
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_pose_model_named_parameters_prefix():
    model = make_pose_model(np.random.default_rng(8))
    names = [n for n, _ in model.named_parameters()]
    assert names[0] == "pose/conv0/kernels"
    assert "pose/yaw/w0" in names and "pose/roll/b1" in names
    assert len(names) == len(set(names))


# ---------------------------------------------------------------- training


def test_train_pose_learns_yaw():
    # yaw dominates appearance; a short run should track it clearly
    train = make_samples(220, 11)
    held = make_samples(60, 12)
    model, history = train_pose(train, seed=0, epochs=8, batch_size=32)
    assert len(history) == 8
    assert history[0][0] == 1 and history[-1][0] == 8
    assert history[-1][1] < 0.25 * history[0][1]
    preds = pose_forward_batch(model, prepare_pose_inputs(
        [s.image for s in held])).data
    true_yaw = np.array([s.pose.yaw for s in held])
    r = np.corrcoef(preds[:, 0], true_yaw)[0, 1]
    assert r > 0.55
    yaw_err = np.mean(np.abs(preds[:, 0] - true_yaw))
    assert yaw_err < 0.75 * np.mean(np.abs(true_yaw))


def test_train_pose_is_deterministic():
    samples = make_samples(40, 13)
    m1, h1 = train_pose(samples, seed=5, epochs=2, batch_size=16)
    m2, h2 = train_pose(samples, seed=5, epochs=2, batch_size=16)
    assert h1 == h2
    for (_, p1), (_, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert np.array_equal(p1.data, p2.data)


def test_train_pose_rejects_empty():
    with pytest.raises(ValueError, match="at least one sample"):
        train_pose([], seed=0)


def test_train_pose_flags_nonfinite_loss():
    # nan learning rate poisons the weights after the first step, so the
    # next epoch's forward pass produces a non-finite loss
    samples = make_samples(8, 14)
    with pytest.raises(NumericError, match="not finite at epoch 2"):
        train_pose(samples, seed=0, epochs=2, batch_size=8, lr=float("nan"))
