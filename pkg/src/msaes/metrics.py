"""Quadratic weighted kappa and RMSE."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def qwk(a: Sequence[int], b: Sequence[int], s_min: int, s_max: int) -> float:
    """Quadratic weighted kappa between two integer rating vectors on
    ``[s_min, s_max]``.

    When both raters give the same constant rating the denominator vanishes;
    that case is defined as perfect agreement (1.0).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"rating vectors must be 1-D and equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("qwk needs at least one rating")
    ai = np.rint(a).astype(np.int64)
    bi = np.rint(b).astype(np.int64)
    if np.any(ai != a) or np.any(bi != b):
        raise ValueError("qwk ratings must be integers")
    lo, hi = int(s_min), int(s_max)
    if min(ai.min(), bi.min()) < lo or max(ai.max(), bi.max()) > hi:
        raise ValueError(f"ratings outside range [{lo}, {hi}]")
    r = hi - lo + 1
    if r == 1:
        return 1.0
    ai -= lo
    bi -= lo
    observed = np.bincount(ai * r + bi, minlength=r * r).reshape(r, r).astype(np.float64)
    hist_a = np.bincount(ai, minlength=r).astype(np.float64)
    hist_b = np.bincount(bi, minlength=r).astype(np.float64)
    idx = np.arange(r, dtype=np.float64)
    # the (r - 1)^2 weight normalizer and the 1/N in E cancel in the ratio;
    # leaving them out keeps both sums exact integers
    sq_dist = (idx[:, None] - idx[None, :]) ** 2
    num = float(np.sum(sq_dist * observed)) * a.size
    den = float(np.sum(sq_dist * np.outer(hist_a, hist_b)))
    if den == 0.0:
        logger.info("qwk: both raters constant and equal; returning 1.0")
        return 1.0
    return 1.0 - num / den


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("rmse needs at least one value")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def evaluate_prompt(preds_norm, labels_raw, spec) -> dict:
    """Score normalized predictions against raw labels of one prompt.

    Predictions are clipped to [0, 1] and mapped back to the prompt scale;
    discrete prompts are rounded and get a QWK, continuous ones report RMSE
    only (``qwk`` is ``None``).
    """
    from .corpus import denormalize_score

    preds = np.array([denormalize_score(p, spec) for p in np.asarray(preds_norm, dtype=np.float64)])
    labels = np.asarray(labels_raw, dtype=np.float64)
    result = {"qwk": None, "rmse": rmse(preds, labels) if preds.size else float("nan")}
    if spec.discrete and preds.size:
        result["qwk"] = qwk(preds.astype(np.int64), labels.astype(np.int64),
                            spec.score_min, spec.score_max)
    return result
