"""Affinity graph construction and the spectral feature transform.

A batch of embeddings defines a fully connected graph whose edge weights
are exponentiated cosine similarities with temperature ``sigma``.  Row
normalization of that affinity matrix gives a random-walk transition
matrix, and multiplying it onto the original features pulls every row
toward its similarity-weighted neighborhood mean.  The transform is
non-parametric; its gradient (through both the transition matrix and the
feature factor) is computed in closed form and checked against finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureMatrix


class ZeroNormRowError(ValueError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row} has zero norm, cosine undefined")


def row_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norms of rows; raises on any zero-norm row."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroNormRowError(int(zero[0]))
    return norms


def normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / row_norms(x)[:, None]


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise cosines of rows, clipped to [-1, 1] against rounding."""
    unit = normalize_rows(x)
    return np.clip(unit @ unit.T, -1.0, 1.0)


def cosine_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosines between rows of two matrices, shape (len(a), len(b))."""
    return np.clip(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma


@dataclass(frozen=True)
class AffinityMatrix:
    """Symmetric non-negative edge weights plus the temperature used.

    Outputs of :func:`affinity` additionally have strictly positive
    entries bounded by exp(1/sigma); the type stays permissive so that
    hand-built graphs (e.g. block-diagonal ones) can use the same
    diagnostics.
    """

    data: np.ndarray
    sigma: float

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"affinity matrix must be square, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("affinity matrix contains non-finite values")
        if arr.min() < 0:
            raise ValueError("affinity matrix entries must be non-negative")
        if arr.size and np.abs(arr - arr.T).max() > 1e-12 * max(1.0, arr.max()):
            raise ValueError("affinity matrix must be symmetric")
        _check_sigma(self.sigma)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class StochasticMatrix:
    """Row-stochastic transition matrix of the random walk."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"transition matrix must be square, got {arr.shape}")
        if arr.min() < 0:
            raise ValueError("transition matrix entries must be non-negative")
        if np.abs(arr.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("transition matrix rows must sum to 1")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]


def affinity(x: FeatureMatrix, sigma: float) -> AffinityMatrix:
    """Edge weights w_ij = exp(cos(x_i, x_j) / sigma)."""
    sigma = _check_sigma(sigma)
    return AffinityMatrix(np.exp(cosine_matrix(x.data) / sigma), sigma)


def transition(w: AffinityMatrix) -> StochasticMatrix:
    """Row-normalize affinities into transition probabilities."""
    degrees = w.data.sum(axis=1)
    if degrees.min() <= 0:
        raise ValueError("cannot normalize a row with zero total weight")
    return StochasticMatrix(w.data / degrees[:, None])


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically safe row softmax (max subtraction per row)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _transition_from_features(x: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(norms, unit rows, transition matrix) for raw feature rows."""
    norms = row_norms(x)
    unit = x / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    return norms, unit, _row_softmax(cos / sigma)


def sft_transform(x: FeatureMatrix, sigma: float) -> FeatureMatrix:
    """Replace each feature row by its transition-weighted batch average."""
    sigma = _check_sigma(sigma)
    _, _, trans = _transition_from_features(x.data, sigma)
    return FeatureMatrix(trans @ x.data)


def sft_transform_array(x: np.ndarray, sigma: float) -> np.ndarray:
    """Array-in/array-out variant of :func:`sft_transform` for inner loops."""
    sigma = _check_sigma(sigma)
    _, _, trans = _transition_from_features(x, sigma)
    return trans @ x


def sft_backward(
    x: FeatureMatrix | np.ndarray,
    sigma: float,
    grad_out: FeatureMatrix | np.ndarray,
    through_transition: bool = True,
) -> FeatureMatrix | np.ndarray:
    """Gradient of any scalar loss through the spectral transform.

    Given d(loss)/d(output) for output = T(x) @ x, returns d(loss)/dx.
    The transition matrix depends on x via the cosine graph, so the chain
    rule runs through the softmax, the cosine products and the row
    normalization; ``through_transition=False`` treats the transition
    matrix as a constant (feature-factor path only), which exists as a
    trainer ablation.
    """
    sigma = _check_sigma(sigma)
    wrapped = isinstance(x, FeatureMatrix)
    xa = x.data if wrapped else np.asarray(x, dtype=np.float64)
    ga = grad_out.data if isinstance(grad_out, FeatureMatrix) else np.asarray(grad_out, dtype=np.float64)
    if ga.shape != xa.shape:
        raise ValueError(f"grad_out shape {ga.shape} != input shape {xa.shape}")

    norms, unit, trans = _transition_from_features(xa, sigma)
    grad_x = trans.T @ ga
    if through_transition:
        grad_trans = ga @ xa.T
        # softmax backward per row, then undo the 1/sigma scaling of logits
        grad_logits = trans * (grad_trans - np.einsum("ij,ij->i", grad_trans, trans)[:, None])
        grad_cos = grad_logits / sigma
        grad_unit = (grad_cos + grad_cos.T) @ unit
        radial = np.einsum("ij,ij->i", grad_unit, unit)
        grad_x = grad_x + (grad_unit - radial[:, None] * unit) / norms[:, None]
    return FeatureMatrix(grad_x) if wrapped else grad_x
