"""Parameter-space continual mergers used as baselines.

Task vectors are represented as :class:`~mingle.model.ModelParams` holding
the differences ``theta_t - theta_0``.
"""

from __future__ import annotations

import math

import numpy as np

from mingle.linalg import project_orthogonal_complement, svd
from mingle.model import ModelParams

TaskVector = ModelParams

METHODS = ("swa", "ta", "ties", "magmax", "opcm", "mingle")


def task_vector(model: ModelParams, base: ModelParams) -> TaskVector:
    return model - base


def merge_swa(prev_merged: ModelParams | None, new_model: ModelParams, t: int) -> ModelParams:
    """Running average: ``((t - 1) * prev + new) / t``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if t == 1 or prev_merged is None:
        return new_model.copy()
    return prev_merged.map(lambda p, n: ((t - 1) * p + n) / t, new_model)


def merge_ta(prev_merged: ModelParams, delta: TaskVector, lam: float) -> ModelParams:
    return prev_merged.map(lambda p, d: p + lam * d, delta)


def _trim(flat: np.ndarray, fraction: float) -> np.ndarray:
    keep = max(1, math.ceil(fraction * flat.size))
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:keep]] = flat[order[:keep]]
    return out


def ties_combine(deltas: list[np.ndarray], trim_fraction: float) -> np.ndarray:
    """Trim, elect sign, disjoint mean over flattened task vectors."""
    if not 0 < trim_fraction <= 1:
        raise ValueError("trim_fraction must lie in (0, 1]")
    stacked = np.stack([_trim(d, trim_fraction) for d in deltas])
    elected = np.sign(stacked.sum(axis=0))
    agree = (np.sign(stacked) == elected) & (stacked != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, stacked, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def _unflatten(flat: np.ndarray, like: ModelParams) -> ModelParams:
    layers, pos = [], 0
    for w, b in like.layers:
        nw = w.size
        layers.append((flat[pos:pos + nw].reshape(w.shape), flat[pos + nw:pos + nw + b.size].copy()))
        pos += nw + b.size
    return ModelParams(layers, like.activation)


def merge_ties(acc_delta: TaskVector | None, new_delta: TaskVector, trim_fraction: float = 0.2) -> TaskVector:
    if acc_delta is None:
        return _unflatten(_trim(new_delta.flat(), trim_fraction), new_delta)
    if acc_delta.shapes() != new_delta.shapes():
        raise ValueError("task vector shapes differ")
    return _unflatten(ties_combine([acc_delta.flat(), new_delta.flat()], trim_fraction), new_delta)


def merge_magmax(acc_delta: TaskVector | None, new_delta: TaskVector) -> TaskVector:
    """Per entry keep whichever value has the larger magnitude (ties keep ``acc``)."""
    if acc_delta is None:
        return new_delta.copy()
    return acc_delta.map(lambda a, n: np.where(np.abs(n) > np.abs(a), n, a), new_delta)


def opcm_scale(t: int, rule: str = "sqrt") -> float:
    if rule == "sqrt":
        return math.sqrt(t)
    if rule == "linear":
        return float(t)
    if rule == "const":
        return 1.0
    raise ValueError(f"unknown lambda_t rule {rule!r}")


def _project_layer(delta: np.ndarray, prev: np.ndarray) -> np.ndarray:
    as2d = delta.reshape(delta.shape[0], -1)
    prev2d = prev.reshape(prev.shape[0], -1)
    return project_orthogonal_complement(as2d, svd(prev2d)).reshape(delta.shape)


def merge_opcm(
    theta0: ModelParams,
    prev_merged: ModelParams | None,
    new_delta: TaskVector,
    t: int,
    rule: str = "sqrt",
) -> ModelParams:
    """Orthogonal-projection continual merge.

    ``theta0 + (lam_{t-1} * prev_delta + P(new_delta)) / lam_t`` where ``P``
    strips the diagonal coefficients of ``new_delta`` in the singular bases
    of the accumulated merged delta. Biases are treated as 1-column matrices.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if t == 1 or prev_merged is None:
        return theta0 + new_delta
    prev_delta = prev_merged - theta0
    lam_prev, lam_t = opcm_scale(t - 1, rule), opcm_scale(t, rule)
    projected = new_delta.map(_project_layer, prev_delta)
    return theta0 + prev_delta.map(lambda p, q: (lam_prev * p + q) / lam_t, projected)
