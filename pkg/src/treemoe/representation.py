"""Shape-indexed representation: patch extraction and expert CNNs.

Patches are cropped around the current shape estimate and pushed through one
or more small strided CNNs. Each CNN reduces a patch to a 1x1 spatial map of
n feature channels; per-landmark features are concatenated landmark-major
into the representation vector h of length P*n.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gates
from .autodiff import (Tensor, conv2d_strided, relu, reshape, uniform_init,
                       zeros_param)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties going away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass
class PatchSet:
    """Cropped windows around each landmark of one image."""

    patches: np.ndarray  # (P, q, q) float64
    size: int

    @property
    def num_landmarks(self) -> int:
        return self.patches.shape[0]


def extract_patches(image: np.ndarray, shape: np.ndarray, q: int) -> PatchSet:
    """Crop the q x q window centered on each rounded landmark position.

    Landmarks are (x, y) interleaved; x indexes columns. The window covers
    [c - q/2, c + q/2 - 1] on each axis around the rounded center c, and
    pixels outside the image are zero-filled. Not differentiable with
    respect to the landmark positions.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"image must be a non-degenerate 2-D array, got shape {image.shape}")
    shape = np.asarray(shape, dtype=np.float64)
    if shape.ndim != 1 or shape.size % 2 != 0 or shape.size < 4:
        raise ValueError(f"shape must hold interleaved x/y pairs for P >= 2 landmarks, got size {shape.size}")
    if q < 2 or q % 2 != 0:
        raise ValueError(f"patch size must be a positive even integer, got {q}")
    H, W = image.shape
    P = shape.size // 2
    half = q // 2
    cx = round_half_away(shape[0::2]).astype(np.int64)
    cy = round_half_away(shape[1::2]).astype(np.int64)
    out = np.zeros((P, q, q))
    for p in range(P):
        y0, x0 = int(cy[p]) - half, int(cx[p]) - half
        ys0, xs0 = max(y0, 0), max(x0, 0)
        ys1, xs1 = min(y0 + q, H), min(x0 + q, W)
        if ys0 < ys1 and xs0 < xs1:
            out[p, ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0] = image[ys0:ys1, xs0:xs1]
    return PatchSet(patches=out, size=q)


@dataclass
class ConvLayer:
    kernels: Tensor  # (C_out, C_in, k, k)
    bias: Tensor     # (C_out,)
    stride: int


@dataclass
class ExpertCNN:
    """Strided conv stack mapping a (1, q, q) patch to n features at 1x1."""

    layers: list[ConvLayer]
    patch_size: int

    @property
    def num_features(self) -> int:
        return self.layers[-1].kernels.data.shape[0]

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}conv{i}/kernels", layer.kernels))
            out.append((f"{prefix}conv{i}/bias", layer.bias))
        return out


def spatial_chain(q: int, layer_spec: Sequence[tuple[int, int, int]]) -> list[int]:
    """Spatial extents after each (channels, kernel, stride) conv layer."""
    extents = []
    s = q
    for _, k, stride in layer_spec:
        if k > s:
            raise ValueError(f"kernel {k}x{k} larger than its {s}x{s} input")
        s = (s - k) // stride + 1
        extents.append(s)
    return extents


def make_expert_cnn(q: int, layer_spec: Sequence[tuple[int, int, int]],
                    rng: np.random.Generator) -> ExpertCNN:
    """Build a CNN from (channels, kernel, stride) triples; output must be 1x1."""
    extents = spatial_chain(q, layer_spec)
    if extents[-1] != 1:
        raise ValueError(
            f"CNN output spatial extent is {extents[-1]}x{extents[-1]}, expected 1x1 "
            f"(chain {q}->{'->'.join(str(e) for e in extents)})")
    layers = []
    c_in = 1
    for c_out, k, stride in layer_spec:
        layers.append(ConvLayer(
            kernels=uniform_init(rng, (c_out, c_in, k, k), fan_in=c_in * k * k),
            bias=zeros_param(c_out),
            stride=stride,
        ))
        c_in = c_out
    return ExpertCNN(layers=layers, patch_size=q)


def _cnn_stack(x: Tensor, cnn: ExpertCNN) -> Tensor:
    for layer in cnn.layers:
        x = relu(conv2d_strided(x, layer.kernels, layer.stride, layer.bias))
    return x


def expert_cnn_forward(patch_set: PatchSet, cnn: ExpertCNN) -> Tensor:
    """Features for one sample: all P patches through the shared kernels,
    concatenated landmark-major into a length P*n vector."""
    if patch_set.size != cnn.patch_size:
        raise ValueError(f"patch size {patch_set.size} does not match CNN input {cnn.patch_size}")
    P = patch_set.num_landmarks
    x = Tensor(patch_set.patches[:, None, :, :])  # (P, 1, q, q)
    z = _cnn_stack(x, cnn)                        # (P, n, 1, 1)
    return reshape(z, (P * cnn.num_features,))


def expert_cnn_forward_batch(patches: Tensor, cnn: ExpertCNN, batch: int, P: int) -> Tensor:
    """Batched features: ``patches`` is (batch*P, 1, q, q); rows sample-major."""
    z = _cnn_stack(patches, cnn)                  # (batch*P, n, 1, 1)
    return reshape(z, (batch, P * cnn.num_features))


@dataclass
class RepresentationBank:
    """One or more expert CNNs plus an optional pose-conditioned gate."""

    experts: list[ExpertCNN]
    gating: str                 # 'single' | 'softmax' | 'tree'
    gate: object | None         # SoftmaxGateParams | TreeGateParams | None
    gate_input_mode: str = "pose"

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def patch_size(self) -> int:
        return self.experts[0].patch_size

    @property
    def num_features(self) -> int:
        return self.experts[0].num_features

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, e in enumerate(self.experts):
            out.extend(e.named_parameters(f"{prefix}expert{i}/"))
        if self.gate is not None:
            out.extend(self.gate.named_parameters(f"{prefix}gate/"))
        return out

    def forward_batch(self, patches: Tensor, pose: np.ndarray | None,
                      batch: int, P: int) -> tuple[Tensor, Tensor | None]:
        """Representation rows (batch, P*n) and the gate weights used."""
        from .moe import combine  # local import to avoid a module cycle

        columns = [expert_cnn_forward_batch(patches, e, batch, P) for e in self.experts]
        if self.gating == "single":
            return columns[0], None
        gx = gates.gate_input(self.gate_input_mode, pose=pose)
        if self.gating == "softmax":
            g = gates.softmax_gate(gx, self.gate)
        elif self.gating == "tree":
            g = gates.leaf_probabilities(gx, self.gate)
        else:
            raise ValueError(f"unknown gating kind {self.gating!r}")
        return combine(columns, g), g


def representation_forward(image: np.ndarray, shape: np.ndarray, pose,
                           bank: RepresentationBank) -> Tensor:
    """Single-sample representation h (length P*n)."""
    ps = extract_patches(image, shape, bank.patch_size)
    P = ps.num_landmarks
    patches = Tensor(ps.patches[:, None, :, :])
    if pose is not None and hasattr(pose, "as_vector"):
        pose = pose.as_vector()
    pose_row = None if pose is None else np.asarray(pose, dtype=np.float64)
    h, _ = bank.forward_batch(patches, pose_row, 1, P)
    return reshape(h, (h.data.shape[1],))
