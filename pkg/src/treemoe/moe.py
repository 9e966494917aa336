"""Mixture-of-experts combination, regression experts, and model variants.

The gated output is a weighted sum of expert columns: stacking expert outputs
as the columns of a matrix, the combination is that matrix times the gate
vector. Regression experts are one-hidden-layer fully connected networks with
a ReLU hidden layer, emitting the 2P displacement for all landmarks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gates
from .autodiff import (Tensor, add, matmul, mul, narrow, relu, transpose,
                       uniform_init, zeros_param)
from .representation import RepresentationBank, make_expert_cnn

VARIANTS = ("baseline", "moe", "softmax-moe", "tree-moe",
            "pose-softmax-moe", "pose-tree-moe")


def combine(outputs: Sequence[Tensor], g) -> Tensor:
    """Gate-weighted sum of expert output columns.

    ``outputs`` holds the columns of the expert-output matrix (each of shape
    (D,) or batched (B, D)); ``g`` is the matching gate vector (L,) or (B, L).
    """
    g = g if isinstance(g, Tensor) else Tensor(g)
    L = g.data.shape[-1]
    if len(outputs) != L:
        raise ValueError(f"gate has {L} weights but {len(outputs)} expert outputs were given")
    acc = None
    for l, col in enumerate(outputs):
        term = mul(narrow(g, -1, l, 1), col)
        acc = term if acc is None else add(acc, term)
    return acc


def uniform_gate(num_experts: int) -> Tensor:
    """Constant 1/L gate whose float64 sum is exactly 1.

    The last entry absorbs the rounding residual; for power-of-two L the
    entries are exactly 1/L and no adjustment happens.
    """
    if num_experts < 1:
        raise ValueError(f"gate needs at least one expert, got {num_experts}")
    g = np.full(num_experts, 1.0 / num_experts)
    for _ in range(3):
        total = float(np.sum(g))
        if total == 1.0:
            break
        g[-1] += 1.0 - total
    return Tensor(g)


@dataclass
class ExpertFC:
    """One-hidden-layer regression expert: w1 . max(0, w0 . h + b0) + b1."""

    w0: Tensor  # (hidden, in_dim)
    b0: Tensor  # (hidden,)
    w1: Tensor  # (out_dim, hidden)
    b1: Tensor  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.w0.data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w1.data.shape[0]

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "w0", self.w0), (prefix + "b0", self.b0),
                (prefix + "w1", self.w1), (prefix + "b1", self.b1)]


def make_expert_fc(in_dim: int, hidden: int, out_dim: int,
                   rng: np.random.Generator) -> ExpertFC:
    return ExpertFC(
        w0=uniform_init(rng, (hidden, in_dim), fan_in=in_dim),
        b0=zeros_param(hidden),
        w1=uniform_init(rng, (out_dim, hidden), fan_in=hidden),
        b1=zeros_param(out_dim),
    )


def expert_fc_forward(h: Tensor, expert: ExpertFC) -> Tensor:
    """Expert displacement for a representation vector or a batch of rows."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.data.ndim == 1:
        hidden = relu(add(matmul(expert.w0, h), expert.b0))
        return add(matmul(expert.w1, hidden), expert.b1)
    hidden = relu(add(matmul(h, transpose(expert.w0)), expert.b0))
    return add(matmul(hidden, transpose(expert.w1)), expert.b1)


@dataclass
class RegressionBank:
    """Expert FCs plus the gate that mixes them (conditioned on h)."""

    experts: list[ExpertFC]
    gating: str                  # 'single' | 'uniform' | 'softmax' | 'tree'
    gate: object | None = None   # SoftmaxGateParams | TreeGateParams | None
    gate_input_mode: str = "identity"

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, e in enumerate(self.experts):
            out.extend(e.named_parameters(f"{prefix}expert{i}/"))
        if self.gate is not None:
            out.extend(self.gate.named_parameters(f"{prefix}gate/"))
        return out

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor | None]:
        """Displacement (vector or batch rows) and the gate weights used."""
        columns = [expert_fc_forward(h, e) for e in self.experts]
        if self.gating == "single":
            return columns[0], None
        if self.gating == "uniform":
            g = uniform_gate(len(self.experts))
        else:
            gx = gates.gate_input(self.gate_input_mode, h=h)
            if self.gating == "softmax":
                g = gates.softmax_gate(gx, self.gate)
            elif self.gating == "tree":
                g = gates.leaf_probabilities(gx, self.gate)
            else:
                raise ValueError(f"unknown gating kind {self.gating!r}")
        return combine(columns, g), g


# ------------------------------------------------------------- model sizing


@dataclass(frozen=True)
class ModelDims:
    """Every width/depth needed to build (or count) one variant."""

    landmarks: int
    patch_size: int
    features_per_landmark: int
    image_size: int
    single_cnn: tuple[tuple[int, int, int], ...]  # (channels, kernel, stride)
    expert_cnn: tuple[tuple[int, int, int], ...]
    reg_hidden: int
    reg_experts: int
    reg_tree_depth: int
    rep_experts: int
    rep_tree_depth: int
    baseline_hidden: int

    @property
    def h_dim(self) -> int:
        return self.landmarks * self.features_per_landmark

    @property
    def out_dim(self) -> int:
        return 2 * self.landmarks

    @staticmethod
    def desk() -> "ModelDims":
        return ModelDims(
            landmarks=12, patch_size=16, features_per_landmark=8, image_size=96,
            single_cnn=((8, 3, 2), (24, 3, 2), (8, 3, 1)),
            expert_cnn=((4, 3, 2), (8, 3, 2), (8, 3, 1)),
            reg_hidden=32, reg_experts=16, reg_tree_depth=4,
            rep_experts=4, rep_tree_depth=2, baseline_hidden=528,
        )

    @staticmethod
    def full() -> "ModelDims":
        return ModelDims(
            landmarks=68, patch_size=32, features_per_landmark=30, image_size=150,
            single_cnn=((20, 5, 2), (40, 5, 2), (80, 3, 1), (160, 3, 1), (30, 1, 1)),
            expert_cnn=((7, 5, 2), (14, 5, 2), (28, 3, 1), (56, 3, 1), (30, 1, 1)),
            reg_hidden=128, reg_experts=64, reg_tree_depth=6,
            rep_experts=8, rep_tree_depth=3, baseline_hidden=8192,
        )


def build_variant(name: str, dims: ModelDims,
                  rng: np.random.Generator) -> tuple[RepresentationBank, RegressionBank]:
    """Construct the representation and regression banks for one variant.

    Experts draw from independent child streams spawned off ``rng`` in a
    fixed order, so two experts never share an initialization stream.
    """
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
    pose_gated = name.startswith("pose-")
    n_rep = dims.rep_experts if pose_gated else 1
    n_reg = 1 if name == "baseline" else dims.reg_experts
    streams = iter(rng.spawn(n_rep + n_reg + 2))

    rep_experts = [
        make_expert_cnn(dims.patch_size,
                        dims.expert_cnn if pose_gated else dims.single_cnn,
                        next(streams))
        for _ in range(n_rep)
    ]
    for e in rep_experts:
        if e.num_features != dims.features_per_landmark:
            raise ValueError(
                f"CNN emits {e.num_features} features per landmark, dims say "
                f"{dims.features_per_landmark}")
    if pose_gated:
        kind = "tree" if name == "pose-tree-moe" else "softmax"
        rep_gate = (gates.make_tree_gate(dims.rep_tree_depth, 3, next(streams))
                    if kind == "tree"
                    else gates.make_softmax_gate(dims.rep_experts, 3, next(streams)))
        if kind == "tree" and (1 << dims.rep_tree_depth) != dims.rep_experts:
            raise ValueError(
                f"tree of depth {dims.rep_tree_depth} has {1 << dims.rep_tree_depth} "
                f"leaves but dims ask for {dims.rep_experts} representation experts")
        rep_bank = RepresentationBank(experts=rep_experts, gating=kind,
                                      gate=rep_gate, gate_input_mode="pose")
    else:
        next(streams)  # keep stream assignment stable across variants
        rep_bank = RepresentationBank(experts=rep_experts, gating="single", gate=None)

    hidden = dims.baseline_hidden if name == "baseline" else dims.reg_hidden
    reg_experts = [make_expert_fc(dims.h_dim, hidden, dims.out_dim, next(streams))
                   for _ in range(n_reg)]
    gate_stream = next(streams)
    if name == "baseline":
        reg_bank = RegressionBank(experts=reg_experts, gating="single")
    elif name == "moe":
        reg_bank = RegressionBank(experts=reg_experts, gating="uniform")
    elif name in ("softmax-moe", "pose-softmax-moe"):
        reg_bank = RegressionBank(
            experts=reg_experts, gating="softmax",
            gate=gates.make_softmax_gate(dims.reg_experts, dims.h_dim, gate_stream))
    else:  # tree-moe, pose-tree-moe
        if (1 << dims.reg_tree_depth) != dims.reg_experts:
            raise ValueError(
                f"tree of depth {dims.reg_tree_depth} has {1 << dims.reg_tree_depth} "
                f"leaves but dims ask for {dims.reg_experts} regression experts")
        reg_bank = RegressionBank(
            experts=reg_experts, gating="tree",
            gate=gates.make_tree_gate(dims.reg_tree_depth, dims.h_dim, gate_stream))
    return rep_bank, reg_bank


# --------------------------------------------------------------- accounting


def _count_cnn(layer_spec, c_in: int = 1) -> int:
    total = 0
    for c_out, k, _ in layer_spec:
        total += c_out * c_in * k * k + c_out
        c_in = c_out
    return total


def _count_fc(in_dim: int, hidden: int, out_dim: int) -> int:
    return hidden * in_dim + hidden + out_dim * hidden + out_dim


def _count_softmax_gate(L: int, in_dim: int) -> int:
    return L * (in_dim + 1)


def _count_tree_gate(depth: int, in_dim: int) -> int:
    return ((1 << depth) - 1) * (in_dim + 1)


def baseline_regression_blocks(dims: ModelDims) -> list[tuple[str, tuple[int, int]]]:
    """Weight-matrix shapes of the baseline regression FC (biases excluded)."""
    return [("hidden", (dims.baseline_hidden, dims.h_dim)),
            ("output", (dims.out_dim, dims.baseline_hidden))]


def count_parameters(name: str, dims: ModelDims) -> int:
    """Trainable parameter count of one cascade stage of the given variant."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
    pose_gated = name.startswith("pose-")
    if pose_gated:
        rep = dims.rep_experts * _count_cnn(dims.expert_cnn)
        rep += (_count_tree_gate(dims.rep_tree_depth, 3) if name == "pose-tree-moe"
                else _count_softmax_gate(dims.rep_experts, 3))
    else:
        rep = _count_cnn(dims.single_cnn)
    if name == "baseline":
        reg = _count_fc(dims.h_dim, dims.baseline_hidden, dims.out_dim)
    else:
        reg = dims.reg_experts * _count_fc(dims.h_dim, dims.reg_hidden, dims.out_dim)
        if name in ("softmax-moe", "pose-softmax-moe"):
            reg += _count_softmax_gate(dims.reg_experts, dims.h_dim)
        elif name in ("tree-moe", "pose-tree-moe"):
            reg += _count_tree_gate(dims.reg_tree_depth, dims.h_dim)
    return rep + reg


def parameter_report(dims: ModelDims) -> dict[str, int]:
    """Per-variant single-stage parameter totals."""
    return {name: count_parameters(name, dims) for name in VARIANTS}


def expert_usage(gate_rows) -> np.ndarray:
    """Mean cumulative gate mass by rank.

    Each row is one sample's gate vector; rows are sorted descending,
    cumulatively summed, then averaged across samples. The result is a
    non-decreasing length-L curve ending at 1 (up to float rounding).
    """
    rows = np.asarray(gate_rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"expected gate rows of equal length, got shape {rows.shape}")
    ordered = np.sort(rows, axis=1)[:, ::-1]
    return np.cumsum(ordered, axis=1).mean(axis=0)
