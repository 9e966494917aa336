"""Head pose: the angle triple, a small pose CNN, and its training loop.

The pose network is trained on its own (L2 loss on ground-truth angles) and
frozen before cascade training; pose-gated variants may instead read the
stored ground truth through ``pose_oracle``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Adam, Tensor, add, backward, concat, conv2d_strided,
                       matmul, mean, record, relu, reshape, scale, square,
                       sub, tanh, transpose, uniform_init, zeros_param)
from .errors import NumericError

POSE_INPUT_SIZE = 64
PHI_DIM = 64
_BACKBONE = ((8, 5, 2), (16, 5, 2), (32, 3, 2), (64, 6, 1))  # 64->30->13->6->1
_HEAD_HIDDEN = 32


@dataclass
class PoseAngles:
    """Yaw/pitch/roll in radians, each within [-pi, pi]."""

    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            v = float(getattr(self, name))
            setattr(self, name, v)
            if not np.isfinite(v) or abs(v) > np.pi:
                raise ValueError(f"{name}={v} outside [-pi, pi]")

    def as_vector(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll])

    @staticmethod
    def from_vector(v) -> "PoseAngles":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (3,):
            raise ValueError(f"pose vector must have 3 entries, got shape {v.shape}")
        return PoseAngles(float(v[0]), float(v[1]), float(v[2]))


def pose_oracle(sample) -> PoseAngles:
    """Stored ground-truth pose of a synthetic sample."""
    pose = getattr(sample, "pose", None)
    if pose is None:
        raise ValueError("sample carries no ground-truth pose")
    return pose


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample (pixel centers aligned, edges clamped)."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


@dataclass
class PoseHead:
    w0: Tensor
    b0: Tensor
    w1: Tensor
    b1: Tensor

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "w0", self.w0), (prefix + "b0", self.b0),
                (prefix + "w1", self.w1), (prefix + "b1", self.b1)]


@dataclass
class PoseModel:
    """Shared strided-CNN backbone plus three independent angle heads."""

    conv_kernels: list[Tensor]
    conv_biases: list[Tensor]
    conv_strides: list[int]
    heads: list[PoseHead]  # yaw, pitch, roll

    def named_parameters(self, prefix: str = "pose/"):
        out = []
        for i, (k, b) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            out.append((f"{prefix}conv{i}/kernels", k))
            out.append((f"{prefix}conv{i}/bias", b))
        for name, head in zip(("yaw", "pitch", "roll"), self.heads):
            out.extend(head.named_parameters(f"{prefix}{name}/"))
        return out


def make_pose_model(rng: np.random.Generator) -> PoseModel:
    kernels, biases, strides = [], [], []
    c_in = 1
    for c_out, k, s in _BACKBONE:
        kernels.append(uniform_init(rng, (c_out, c_in, k, k), fan_in=c_in * k * k))
        biases.append(zeros_param(c_out))
        strides.append(s)
        c_in = c_out
    heads = [PoseHead(
        w0=uniform_init(rng, (_HEAD_HIDDEN, PHI_DIM), fan_in=PHI_DIM),
        b0=zeros_param(_HEAD_HIDDEN),
        w1=uniform_init(rng, (1, _HEAD_HIDDEN), fan_in=_HEAD_HIDDEN),
        b1=zeros_param(1),
    ) for _ in range(3)]
    return PoseModel(conv_kernels=kernels, conv_biases=biases,
                     conv_strides=strides, heads=heads)


def pose_forward_batch(model: PoseModel, images64: np.ndarray) -> Tensor:
    """Angles for a batch of pre-resized images (B, 64, 64) -> (B, 3).

    Each head output is squashed by pi*tanh, so every angle lies strictly
    inside (-pi, pi) for any parameter values.
    """
    images64 = np.asarray(images64, dtype=np.float64)
    if images64.ndim != 3 or images64.shape[1:] != (POSE_INPUT_SIZE, POSE_INPUT_SIZE):
        raise ValueError(
            f"expected (B, {POSE_INPUT_SIZE}, {POSE_INPUT_SIZE}) images, got {images64.shape}")
    B = images64.shape[0]
    z = Tensor(images64[:, None, :, :])
    for k, b, s in zip(model.conv_kernels, model.conv_biases, model.conv_strides):
        z = relu(conv2d_strided(z, k, s, b))
    phi = reshape(z, (B, PHI_DIM))
    angles = []
    for head in model.heads:
        hid = relu(add(matmul(phi, transpose(head.w0)), head.b0))
        raw = add(matmul(hid, transpose(head.w1)), head.b1)  # (B, 1)
        angles.append(scale(tanh(raw), np.pi))
    return concat(angles, axis=-1)


def pose_forward(model: PoseModel, image: np.ndarray) -> PoseAngles:
    """Pose estimate for one full-resolution image."""
    small = resize_bilinear(image, POSE_INPUT_SIZE, POSE_INPUT_SIZE)
    out = pose_forward_batch(model, small[None])
    return PoseAngles.from_vector(out.data[0])


def prepare_pose_inputs(images) -> np.ndarray:
    """Resize a list/array of images to the pose network's input size."""
    return np.stack([resize_bilinear(im, POSE_INPUT_SIZE, POSE_INPUT_SIZE)
                     for im in images])


def train_pose(samples, *, seed: int, epochs: int = 10, batch_size: int = 64,
               lr: float = 1e-3) -> tuple[PoseModel, list[tuple[int, float]]]:
    """Fit the pose network with L2 loss on ground-truth angles.

    Returns the model and a (epoch, mean_loss) history. Deterministic for a
    fixed seed: one generator drives initialization and shuffling.
    """
    if len(samples) < 1:
        raise ValueError("pose training needs at least one sample")
    rng = np.random.default_rng(seed)
    model = make_pose_model(rng)
    inputs = prepare_pose_inputs([s.image for s in samples])
    targets = np.stack([s.pose.as_vector() for s in samples])
    params = [t for _, t in model.named_parameters()]
    opt = Adam(params, lr=lr)
    history = []
    n = len(samples)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            with record():
                pred = pose_forward_batch(model, inputs[idx])
                loss = mean(square(sub(pred, Tensor(targets[idx]))))
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"pose training loss is not finite at epoch {epoch + 1}")
                backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
        history.append((epoch + 1, float(np.mean(losses))))
    return model, history
