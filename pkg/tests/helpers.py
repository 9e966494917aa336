"""Shared test oracles, independent of the library implementation."""
from __future__ import annotations

import math

import numpy as np


def rel_err(a: float, b: float) -> float:
    """Relative error with an absolute floor so tiny values don't explode."""
    return abs(a - b) / max(abs(a), abs(b), 1e-2)


def finite_difference_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        dn = f(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2.0 * step)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      tol: float = 1e-6, label: str = "") -> None:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    assert analytic.shape == numeric.shape
    for i, (a, b) in enumerate(zip(analytic, numeric)):
        e = rel_err(a, b)
        assert e < tol, f"{label} entry {i}: analytic {a} vs numeric {b} (rel {e})"


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def tree_leaf_oracle(x: np.ndarray, node_weight: np.ndarray,
                     node_bias: np.ndarray, depth: int) -> np.ndarray:
    """Leaf probabilities by explicit recursive descent over the heap tree.

    Node n's children are 2n+1 (left, probability d) and 2n+2 (right,
    probability 1-d); leaves are emitted left to right.
    """
    x = np.asarray(x, dtype=np.float64)
    leaves: list[float] = []

    def descend(node: int, level: int, prob: float) -> None:
        if level == depth:
            leaves.append(prob)
            return
        d = _sigmoid(float(node_weight[node] @ x + node_bias[node]))
        descend(2 * node + 1, level + 1, prob * d)
        descend(2 * node + 2, level + 1, prob * (1.0 - d))

    descend(0, 0, 1.0)
    return np.array(leaves)


def softmax_oracle(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()
