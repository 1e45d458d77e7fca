"""Batch losses: MSE, cosine similarity (SIM), margin ranking (MR), their
weighted combination, and the two-pass R-Drop consistency term.

All functions take predictions as a 1-D :class:`~msaes.tensor.Tensor` (or
anything array-like) and labels as an array; they return scalar tensors so
they can be differentiated on the active tape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    mr_margin: float = 0.0
    rdrop_coeff: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.rdrop_coeff) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError("at least one of alpha, beta, gamma must be positive")


def _prep(y, y_hat) -> tuple[Tensor, np.ndarray]:
    y = T.as_tensor(y)
    y_hat = np.asarray(y_hat, dtype=y.data.dtype)
    if y.ndim != 1 or y_hat.shape != y.shape:
        raise ValueError(f"predictions {y.shape} and labels {y_hat.shape} must be equal-length vectors")
    if y.size == 0:
        raise DegenerateBatchError("empty batch")
    return y, y_hat


def mse(y, y_hat) -> Tensor:
    y, y_hat = _prep(y, y_hat)
    return T.mean(T.square(T.sub(y, y_hat)))


def sim(y, y_hat) -> Tensor:
    """``1 - cos(y, y_hat)``.

    A zero-norm vector has no direction; the loss is then a constant 1 with no
    gradient.
    """
    y, y_hat = _prep(y, y_hat)
    label_norm = float(np.linalg.norm(y_hat.astype(np.float64)))
    if label_norm == 0.0 or not np.any(y.data):
        logger.warning("sim: zero-norm vector in batch, loss fixed at 1")
        return Tensor(1.0, dtype=y.data.dtype.type)
    dot = T.sum(T.mul(y, y_hat))
    norm_y = T.sqrt(T.sum(T.square(y)))
    return T.sub(1.0, T.div(dot, T.mul(norm_y, label_norm)))


def rank_signs(y_pred: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Pairwise r[i, j]: +1 if label i > label j, -1 if smaller, and
    -sgn(y_i - y_j) on label ties."""
    label_sign = np.sign(y_hat[:, None] - y_hat[None, :])
    tie = -np.sign(y_pred[:, None] - y_pred[None, :])
    return np.where(label_sign != 0, label_sign, tie)


def mr(y, y_hat, margin: float = 0.0) -> Tensor:
    """Mean hinge ``max(0, -r_ij (y_i - y_j) + margin)`` over unordered pairs i < j."""
    y, y_hat = _prep(y, y_hat)
    n = y.size
    if n < 2:
        raise DegenerateBatchError("margin ranking needs at least two essays")
    r = rank_signs(y.data, y_hat)
    upper = np.triu(np.ones((n, n), dtype=y.data.dtype), k=1)
    col = T.reshape(y, (n, 1))
    row = T.reshape(y, (1, n))
    diff = T.sub(col, row)
    hinge = T.relu(T.add(T.mul(diff, -r), margin))
    n_pairs = n * (n - 1) // 2
    return T.mul(T.sum(T.mul(hinge, upper)), 1.0 / n_pairs)


def combined(y, y_hat, w: LossWeights) -> Tensor:
    y, y_hat = _prep(y, y_hat)
    total = None
    for weight, fn in ((w.alpha, mse), (w.beta, lambda a, b: mr(a, b, w.mr_margin)), (w.gamma, sim)):
        if weight == 0:
            continue
        term = T.mul(fn(y, y_hat), weight)
        total = term if total is None else T.add(total, term)
    return total


def rdrop_consistency(y_pass1, y_pass2) -> Tensor:
    a, b = T.as_tensor(y_pass1), T.as_tensor(y_pass2)
    if a.shape != b.shape:
        raise ValueError(f"pass outputs differ in length: {a.shape} vs {b.shape}")
    return T.mean(T.square(T.sub(a, b)))


def rdrop_total(y_pass1, y_pass2, y_hat, w: LossWeights) -> Tensor:
    """Average of the two passes' combined losses plus the weighted
    consistency penalty between them."""
    avg = T.mul(T.add(combined(y_pass1, y_hat, w), combined(y_pass2, y_hat, w)), 0.5)
    if w.rdrop_coeff == 0:
        return avg
    return T.add(avg, T.mul(rdrop_consistency(y_pass1, y_pass2), w.rdrop_coeff))
