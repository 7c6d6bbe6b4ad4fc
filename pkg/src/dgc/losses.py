"""Loss terms over soft assignments, each paired with its gradient.

Conventions: assignments are (n, K) simplex rows, ``cos`` is the matching
(n, K) cosine matrix, centres are (K, D). Every log sees probabilities clamped
at ``CLAMP``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from .clustering import cosine_forward
from .errors import ConfigError, ShapeError

CLAMP = 1e-8


@dataclass
class LossWeights:
    unif: float = 1.0
    orth: float = 0.1
    bal: float = 1.0
    cons: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    comp1: float
    comp2: float
    unif: float
    orth: float
    bal: float
    cons: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_dict().values())


def _log(p):
    return np.log(np.maximum(p, CLAMP))


# --- compactness

def compactness_from_cos(p: np.ndarray, cos: np.ndarray) -> float:
    return float(np.sum(p * (1.0 - cos)) / p.shape[0])


def compactness_grad(p: np.ndarray, cos: np.ndarray):
    """Returns (d/dp, d/dcos)."""
    n = p.shape[0]
    return (1.0 - cos) / n, -p / n


def compactness(assignment: np.ndarray, embeddings: np.ndarray, centers: np.ndarray) -> float:
    z = embeddings.reshape(-1, embeddings.shape[-1])
    if assignment.shape != (len(z), centers.shape[0]):
        raise ShapeError("assignment does not match embeddings x centres")
    cos, _ = cosine_forward(z, centers)
    return compactness_from_cos(assignment, cos)


# --- orthogonality

def orthogonality(centers: np.ndarray) -> float:
    g = centers @ centers.T
    np.fill_diagonal(g, 0.0)
    return float(np.sum(g * g))


def orthogonality_grad(centers: np.ndarray) -> np.ndarray:
    g = centers @ centers.T
    np.fill_diagonal(g, 0.0)
    return 4.0 * (g @ centers)


# --- balance

def balance(p: np.ndarray) -> float:
    """log K - H(mean row); zero exactly at the uniform marginal."""
    pbar = p.mean(axis=0)
    return float(np.log(p.shape[1]) + np.sum(pbar * _log(pbar)))


def balance_grad(p: np.ndarray) -> np.ndarray:
    n = p.shape[0]
    pbar = p.mean(axis=0)
    g = _log(pbar) + (pbar > CLAMP)
    return np.broadcast_to(g / n, p.shape).copy()


# --- uniform assignment

def uniform_pseudo_labels(p: np.ndarray, k: int | None = None) -> np.ndarray:
    """Greedy balanced labels: each cluster receives floor(M/K) or ceil(M/K) pixels.

    (pixel, cluster) pairs are visited by descending probability, ties broken by
    pixel then cluster index; each pixel takes its best cluster that still has room.
    """
    p = np.asarray(p)
    m, kk = p.shape
    k = kk if k is None else k
    if kk != k:
        raise ShapeError(f"assignment has {kk} columns, expected {k}")
    if m < k:
        raise ShapeError(f"need at least K={k} pixels, got {m}")
    flat = np.asarray(p, dtype=np.float64).ravel()
    # stable sort on the negated key keeps (pixel, cluster) order among ties
    order = np.argsort(-flat, kind="stable")
    return kernels.balanced_assign(order.astype(np.int64), m, k)


def uniform_loss(p: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) != p.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {p.shape[0]} rows")
    return float(-np.mean(_log(p[np.arange(len(labels)), labels])))


def uniform_loss_grad(p: np.ndarray, labels: np.ndarray) -> np.ndarray:
    m = len(labels)
    rows = np.arange(m)
    sel = p[rows, labels]
    g = np.zeros_like(p)
    g[rows, labels] = np.where(sel > CLAMP, -1.0 / (m * np.maximum(sel, CLAMP)), 0.0)
    return g


# --- consistency

def consistency(p1: np.ndarray, p2: np.ndarray) -> float:
    """Mean symmetric KL between aligned rows, halved."""
    if p1.shape != p2.shape:
        raise ShapeError(f"consistency rows differ: {p1.shape} vs {p2.shape}")
    l1, l2 = _log(p1), _log(p2)
    kl12 = np.sum(p1 * (l1 - l2))
    kl21 = np.sum(p2 * (l2 - l1))
    return float((kl12 + kl21) / (2 * p1.shape[0]))


def consistency_grad(p1: np.ndarray, p2: np.ndarray):
    m = p1.shape[0]
    l1, l2 = _log(p1), _log(p2)
    diff = p1 - p2
    g1 = (l1 - l2) + np.where(p1 > CLAMP, diff / np.maximum(p1, CLAMP), 0.0)
    g2 = (l2 - l1) - np.where(p2 > CLAMP, diff / np.maximum(p2, CLAMP), 0.0)
    return g1 / (2 * m), g2 / (2 * m)


# --- total

def total_loss(comp1: float, comp2: float, unif: float, orth: float, bal: float, cons: float,
               weights: LossWeights) -> LossBreakdown:
    total = (comp1 + comp2 + weights.unif * unif + weights.orth * orth
             + weights.bal * bal + weights.cons * cons)
    return LossBreakdown(comp1, comp2, unif, orth, bal, cons, total)
