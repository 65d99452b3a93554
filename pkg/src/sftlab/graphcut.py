"""Graph-cut and random-walk diagnostics over affinity graphs.

cut/volume/ncut are the classical graph-partition quantities; the
random-walk view gives the stationary distribution and the one-step
escape probability from a node subset, whose sum over both sides equals
the normalized cut.  ``ncut_loss`` turns the multiclass sum of escape
probabilities into a differentiable training objective, used as a
comparator for spectral-transform training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureMatrix, Partition
from .transform import AffinityMatrix, _check_sigma, row_norms


@dataclass(frozen=True)
class RandomWalkStats:
    """Stationary distribution and total volume of the walk's graph."""

    stationary: np.ndarray
    volume: float

    def __post_init__(self):
        pi = np.asarray(self.stationary, dtype=np.float64)
        if pi.ndim != 1 or pi.min() < 0 or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("stationary vector must be a probability distribution")
        pi = pi.copy()
        pi.setflags(write=False)
        object.__setattr__(self, "stationary", pi)


def _class_mask(w: AffinityMatrix, part: Partition, label: int) -> np.ndarray:
    if part.n != w.n:
        raise ValueError(f"partition covers {part.n} nodes, graph has {w.n}")
    if not 0 <= label < part.num_classes:
        raise ValueError(f"class {label} out of range")
    mask = part.labels == label
    if not mask.any():
        raise ValueError(f"class {label} is empty")
    return mask


def cut(w: AffinityMatrix, part: Partition, a: int, b: int) -> float:
    """Total edge weight between two classes of the partition."""
    if a == b:
        raise ValueError("cut requires two distinct classes")
    if a > b:  # canonical order makes cut(a, b) == cut(b, a) bit-exact
        a, b = b, a
    ma = _class_mask(w, part, a)
    mb = _class_mask(w, part, b)
    return float(w.data[np.ix_(ma, mb)].sum())


def volume(w: AffinityMatrix, part: Partition, a: int) -> float:
    """Total edge weight from a class to the whole graph."""
    mask = _class_mask(w, part, a)
    return float(w.data[mask, :].sum())


def ncut(w: AffinityMatrix, part: Partition, a: int) -> float:
    """Normalized cut of class `a` against its complement."""
    mask = _class_mask(w, part, a)
    comp = ~mask
    if not comp.any():
        raise ValueError(f"class {a} covers the whole graph, complement empty")
    cross = float(w.data[np.ix_(mask, comp)].sum())
    vol_a = float(w.data[mask, :].sum())
    vol_comp = float(w.data[comp, :].sum())
    return cross / vol_a + cross / vol_comp


def stationary(w: AffinityMatrix) -> RandomWalkStats:
    """pi_i = degree_i / total volume; left fixed point of the walk."""
    degrees = w.data.sum(axis=1)
    total = float(degrees.sum())
    if total <= 0:
        raise ValueError("graph has no edge weight")
    return RandomWalkStats(degrees / total, total)


def _escape(w: AffinityMatrix, mask: np.ndarray) -> float:
    """One-step probability of leaving `mask` at stationarity.

    Evaluated literally as sum(pi_i T_ij) over exits divided by the
    subset's stationary mass; the algebraically equal cut/volume route is
    kept to the tests as an independent check.
    """
    comp = ~mask
    degrees = w.data.sum(axis=1)
    if degrees[mask].min() <= 0:
        raise ValueError("subset contains an isolated zero-degree node")
    pi = degrees / degrees.sum()
    trans_rows = w.data[mask, :] / degrees[mask, None]
    numer = float((pi[mask, None] * trans_rows[:, comp]).sum())
    denom = float(pi[mask].sum())
    return numer / denom


def escape_probability(w: AffinityMatrix, part: Partition, a: int) -> float:
    mask = _class_mask(w, part, a)
    if not (~mask).any():
        raise ValueError(f"class {a} covers the whole graph, complement empty")
    return _escape(w, mask)


def ncut_escape_identity_check(w: AffinityMatrix, part: Partition, a: int) -> tuple[float, float]:
    """(ncut value, escape(A->comp) + escape(comp->A)); must agree.

    The two sides are computed along different arithmetic routes, so the
    returned pair is a genuine floating-point consistency diagnostic.
    """
    mask = _class_mask(w, part, a)
    if not (~mask).any():
        raise ValueError(f"class {a} covers the whole graph, complement empty")
    return ncut(w, part, a), _escape(w, mask) + _escape(w, ~mask)


def ncut_loss(x: FeatureMatrix, labels: Partition, sigma: float) -> tuple[float, FeatureMatrix]:
    """Sum of one-vs-rest escape probabilities and its feature gradient.

    For each class c, the term is cut(c, rest) / volume(c) on the
    exponentiated-cosine graph; the gradient runs through the edge
    weights, the cosines and the row normalization.
    """
    sigma = _check_sigma(sigma)
    if labels.n != x.n:
        raise ValueError(f"labels cover {labels.n} samples, features have {x.n}")
    present = np.unique(labels.labels)
    if present.size < 2:
        raise ValueError("ncut loss needs at least 2 non-empty classes")

    norms = row_norms(x.data)
    unit = x.data / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    weights = np.exp(cos / sigma)

    loss = 0.0
    grad_w = np.zeros_like(weights)
    for label in present:
        mask = labels.labels == label
        comp = ~mask
        cross = float(weights[np.ix_(mask, comp)].sum())
        vol = float(weights[mask, :].sum())
        loss += cross / vol
        # d(cross/vol)/dw_ij = [i in c][j not in c]/vol - cross*[i in c]/vol^2
        grad_w[np.ix_(mask, comp)] += 1.0 / vol
        grad_w[mask, :] -= cross / vol**2

    grad_cos = grad_w * weights / sigma
    grad_unit = (grad_cos + grad_cos.T) @ unit
    radial = np.einsum("ij,ij->i", grad_unit, unit)
    grad_x = (grad_unit - radial[:, None] * unit) / norms[:, None]
    return loss, FeatureMatrix(grad_x)


def affinity_class_means(w: AffinityMatrix, labels: Partition) -> tuple[float, float]:
    """Mean off-diagonal edge weight inside classes and across classes."""
    if labels.n != w.n:
        raise ValueError(f"labels cover {labels.n} nodes, graph has {w.n}")
    same = labels.labels[:, None] == labels.labels[None, :]
    off_diag = ~np.eye(w.n, dtype=bool)
    intra = same & off_diag
    inter = ~same
    if not intra.any() or not inter.any():
        raise ValueError("need both intra-class and inter-class pairs")
    return float(w.data[intra].mean()), float(w.data[inter].mean())
