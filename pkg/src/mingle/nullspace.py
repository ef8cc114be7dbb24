"""Null-space constraints on gate-weight updates.

A :class:`SubspaceBank` keeps, per layer, an orthonormal basis of the
dominant input directions of every task merged so far. Gate updates for a
new task are pushed out of that span either completely (hard projector) or
partially, with per-direction shrinkage driven by an EMA of how strongly the
current gradient points into each protected direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mingle.linalg import as_matrix, orthonormalize_augment, svd


def extract_task_subspace(activations, k: int) -> np.ndarray:
    """Top-``k`` eigenvectors of the uncentered covariance of ``activations``.

    Computed from the SVD of the sample matrix rather than by forming the
    covariance: the right singular vectors of ``H`` are the eigenvectors of
    ``H^T H / N``.
    """
    h = as_matrix(activations, "activations")
    if k < 1:
        raise ValueError("k must be >= 1")
    if h.shape[0] < k:
        raise ValueError(f"need at least k={k} samples, got {h.shape[0]}")
    if k > h.shape[1]:
        raise ValueError(f"k={k} exceeds activation dimension {h.shape[1]}")
    return svd(h).v[:, :k].copy()


def alignment_ratios(grad, basis: np.ndarray) -> np.ndarray:
    """``|u_p . grad| / ||grad||`` for each basis column; zeros for a zero gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    if basis.shape[0] != grad.shape[0]:
        raise ValueError("gradient and basis dimensions differ")
    norm = np.linalg.norm(grad)
    if norm == 0.0:
        return np.zeros(basis.shape[1])
    return np.abs(basis.T @ grad) / norm


def update_scores(scores: np.ndarray, ratios: np.ndarray, beta: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    if scores.shape != ratios.shape:
        raise ValueError(f"score/ratio length mismatch: {scores.shape} vs {ratios.shape}")
    return beta * scores + (1.0 - beta) * ratios


def shrinkage(scores: np.ndarray, gamma: float) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(-gamma * np.asarray(scores, dtype=np.float64))


def relaxed_project(grad, basis: np.ndarray, lambdas) -> np.ndarray:
    """``(I - U diag(lambdas) U^T) grad``.

    ``lambdas = 1`` is the hard null projector, ``lambdas = 0`` the identity.
    """
    grad = np.asarray(grad, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if basis.shape[0] != grad.shape[0] or basis.shape[1] != lambdas.shape[0]:
        raise ValueError("projector shape mismatch")
    return grad - basis @ (lambdas * (basis.T @ grad))


def hard_project(grad, basis: np.ndarray) -> np.ndarray:
    return relaxed_project(grad, basis, np.ones(basis.shape[1]))


@dataclass
class SubspaceBank:
    """Per-layer orthonormal protected directions; ``k`` new columns at most per task."""

    dims: list[int]
    k: int = 3
    bases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.bases:
            self.bases = [np.empty((d, 0)) for d in self.dims]

    def n_columns(self, layer: int) -> int:
        return self.bases[layer].shape[1]

    def augment(self, layer: int, new_subspace) -> None:
        new_subspace = as_matrix(new_subspace, "new_subspace")
        if new_subspace.shape[0] != self.dims[layer]:
            raise ValueError(
                f"layer {layer}: subspace rows {new_subspace.shape[0]} != {self.dims[layer]}"
            )
        self.bases[layer] = orthonormalize_augment(self.bases[layer], new_subspace)

    def copy(self) -> SubspaceBank:
        return SubspaceBank(list(self.dims), self.k, [b.copy() for b in self.bases])


def augment_bank(bank: SubspaceBank, layer: int, new_subspace) -> SubspaceBank:
    out = bank.copy()
    out.augment(layer, new_subspace)
    return out


@dataclass
class InterferenceTracker:
    """EMA interference scores per protected direction, reset at every task."""

    sizes: list[int]
    beta: float = 0.99
    gamma: float = 1.0
    step: int = 0
    scores: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.scores:
            self.scores = [np.zeros(n) for n in self.sizes]

    def observe(self, layer: int, ratios: np.ndarray) -> np.ndarray:
        self.scores[layer] = update_scores(self.scores[layer], ratios, self.beta)
        return self.scores[layer]

    def lambdas(self, layer: int) -> np.ndarray:
        return shrinkage(self.scores[layer], self.gamma)


TRACE_COLUMNS = ("step", "layer", "mean_ratio", "mean_score", "mean_lambda")
