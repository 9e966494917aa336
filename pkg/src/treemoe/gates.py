"""Gating networks: softmax gates and soft binary routing trees.

A gate maps its input (a pose estimate or the representation itself) to a
probability vector over experts. The tree gate is a full binary tree of
single-neuron routing functions; a leaf's probability is the product of
routing probabilities along its root path, so the 2^depth leaf weights form
a simplex by construction.

Tree nodes are heap-ordered: node 0 is the root and node n has children
2n+1 (left) and 2n+2 (right). Leaves are emitted left to right.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, concat, exp, log_sigmoid, matmul, mul,
                       narrow, scale, sigmoid, softmax, sub, transpose,
                       uniform_init, zeros_param, _sigmoid_raw)

LOG_SPACE_DEPTH = 8  # deeper trees multiply in log space


@dataclass
class SoftmaxGateParams:
    """Affine map to expert logits: g(x) = softmax(W x + b)."""

    weight: Tensor  # (num_experts, in_dim)
    bias: Tensor    # (num_experts,)

    @property
    def num_experts(self) -> int:
        return self.weight.data.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.data.shape[1]

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


@dataclass
class TreeGateParams:
    """Per-node routing neurons of a full binary tree of the given depth."""

    depth: int
    node_weight: Tensor  # (2^depth - 1, in_dim)
    node_bias: Tensor    # (2^depth - 1,)

    @property
    def num_nodes(self) -> int:
        return (1 << self.depth) - 1

    @property
    def num_leaves(self) -> int:
        return 1 << self.depth

    @property
    def in_dim(self) -> int:
        return self.node_weight.data.shape[1]

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "node_weight", self.node_weight),
                (prefix + "node_bias", self.node_bias)]


def make_softmax_gate(num_experts: int, in_dim: int, rng: np.random.Generator) -> SoftmaxGateParams:
    """Fan-in-initialized weights, zero biases (near-uniform initial gate)."""
    if num_experts < 1:
        raise ValueError(f"gate needs at least one expert, got {num_experts}")
    return SoftmaxGateParams(
        weight=uniform_init(rng, (num_experts, in_dim), fan_in=in_dim),
        bias=zeros_param(num_experts),
    )


def make_tree_gate(depth: int, in_dim: int, rng: np.random.Generator) -> TreeGateParams:
    if depth < 1:
        raise ValueError(f"tree depth must be at least 1, got {depth}")
    n = (1 << depth) - 1
    return TreeGateParams(
        depth=depth,
        node_weight=uniform_init(rng, (n, in_dim), fan_in=in_dim),
        node_bias=zeros_param(n),
    )


def _node_logits(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim == 1:
        return add(matmul(weight, x), bias)
    return add(matmul(x, transpose(weight)), bias)


def softmax_gate(x, params: SoftmaxGateParams) -> Tensor:
    """Gate weights softmax(W x + b); batched rows are gated rowwise."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return softmax(_node_logits(x, params.weight, params.bias))


def routing_prob(x, w, b) -> Tensor:
    """Single routing neuron: sigma(w . x + b)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    return sigmoid(add(matmul(w, x), b))


def leaf_probabilities(x, params: TreeGateParams) -> Tensor:
    """All 2^depth leaf probabilities of the routing tree, left to right.

    Node n routes left with probability d_n = sigma(w_n . x + b_n); the leaf
    weight is the product of d_n / (1 - d_n) factors along its root path.
    Depths beyond LOG_SPACE_DEPTH accumulate log-probabilities and
    exponentiate once at the leaves.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = _node_logits(x, params.node_weight, params.node_bias)
    use_logs = params.depth > LOG_SPACE_DEPTH
    # paths[j] is the running product (or log-product) for subtree j at the
    # current level; None stands for an empty product.
    paths: list[Tensor | None] = [None]
    for level in range(params.depth):
        first = (1 << level) - 1
        nxt: list[Tensor | None] = []
        for j, p in enumerate(paths):
            zj = narrow(z, -1, first + j, 1)
            if use_logs:
                left = log_sigmoid(zj)
                right = log_sigmoid(scale(zj, -1.0))  # log(1 - d) = log sigma(-z)
                if p is not None:
                    left, right = add(p, left), add(p, right)
            else:
                dj = sigmoid(zj)
                ones = Tensor(np.ones_like(dj.data))
                comp = sub(ones, dj)
                left = dj if p is None else mul(p, dj)
                right = comp if p is None else mul(p, comp)
            nxt.extend((left, right))
        paths = nxt
    if use_logs:
        paths = [exp(p) for p in paths]
    return concat(paths, axis=-1)


def tree_routing_probabilities(x: np.ndarray, params: TreeGateParams) -> np.ndarray:
    """All node routing probabilities as plain numpy (introspection helper)."""
    x = np.asarray(x, dtype=np.float64)
    z = x @ params.node_weight.data.T + params.node_bias.data
    return _sigmoid_raw(z)


def gate_input(mode: str, h: Tensor | None = None, pose=None) -> Tensor:
    """Select what the gate conditions on: the pose vector or h itself."""
    if mode == "identity":
        if h is None:
            raise ValueError("identity gating requires the representation vector")
        return h
    if mode == "pose":
        if pose is None:
            raise ValueError("pose gating requested but no pose is available")
        if hasattr(pose, "as_vector"):
            pose = pose.as_vector()
        return pose if isinstance(pose, Tensor) else Tensor(pose)
    raise ValueError(f"unknown gate input mode {mode!r} (expected 'pose' or 'identity')")
