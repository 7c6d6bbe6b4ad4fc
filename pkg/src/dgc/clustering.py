"""Centroid bank, soft/hard assignment, unrolled mean-shift, EMA and reactivation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .encoder import l2_normalize, l2_normalize_backward
from .errors import ConfigError, ShapeError


@dataclass
class CentroidBank:
    centers: np.ndarray  # (K, D), unit rows
    ema_decay: float = 0.99
    temperature: float = 0.1
    dead_threshold: float | None = None  # mass fraction; None -> 0.5 / K
    reactivation_eps: float = 0.05

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise ConfigError("centroid bank needs K >= 2 rows")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def threshold(self) -> float:
        return 0.5 / self.k if self.dead_threshold is None else self.dead_threshold

    def with_centers(self, centers: np.ndarray) -> "CentroidBank":
        return replace(self, centers=centers)

    def copy(self) -> "CentroidBank":
        return self.with_centers(self.centers.copy())


def init_bank(k: int, dim: int = 32, seed: int = 0, dtype=np.float32, **hyper) -> CentroidBank:
    rng = np.random.default_rng([seed, 0xCE7])
    centers, _ = l2_normalize(rng.standard_normal((k, dim)))
    return CentroidBank(centers.astype(dtype), **hyper)


@dataclass
class MeanShiftConfig:
    iterations: int = 5
    bandwidth: float = 0.5

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("mean-shift iterations must be >= 0")
        if self.bandwidth <= 0:
            raise ConfigError("mean-shift bandwidth must be > 0")


def _flat(emb: np.ndarray) -> np.ndarray:
    return emb.reshape(-1, emb.shape[-1])


def _check_dims(emb: np.ndarray, bank: CentroidBank):
    if emb.shape[-1] != bank.dim:
        raise ShapeError(f"embedding dim {emb.shape[-1]} != centroid dim {bank.dim}")


# ----------------------------------------------------------- soft assignment

def cosine_forward(z: np.ndarray, c: np.ndarray):
    """Cosine similarity matrix (n, K) of rows of z against rows of c."""
    zn, z_norm = l2_normalize(z)
    cn, c_norm = l2_normalize(c)
    return zn @ cn.T, (zn, z_norm, cn, c_norm)


def cosine_backward(cache, dcos: np.ndarray):
    zn, z_norm, cn, c_norm = cache
    dz = l2_normalize_backward(zn, z_norm, dcos @ cn)
    dc = l2_normalize_backward(cn, c_norm, dcos.T @ zn)
    return dz, dc


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.einsum("ij,ij->i", dp, p)[:, None])


def soft_assign(embeddings: np.ndarray, bank: CentroidBank) -> np.ndarray:
    """Temperature softmax over cosine similarity; one simplex row per pixel, (n, K)."""
    _check_dims(embeddings, bank)
    cos, _ = cosine_forward(_flat(embeddings), bank.centers)
    return softmax(cos / bank.temperature)


def hard_assign(embeddings: np.ndarray, bank: CentroidBank, chunk: int = 8192) -> np.ndarray:
    """Nearest centroid by L2 distance, smallest index on ties; shape = embeddings.shape[:-1]."""
    _check_dims(embeddings, bank)
    z = _flat(embeddings)
    c = bank.centers
    out = np.empty(len(z), dtype=np.int64)
    for s in range(0, len(z), chunk):
        diff = z[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out.reshape(embeddings.shape[:-1])


# ------------------------------------------------------------------ mean-shift

def mean_shift_forward(emb: np.ndarray, cfg: MeanShiftConfig):
    """Unrolled Gaussian mean-shift within each patch.

    emb: (B, H, W, D) or (B, N, D). Each round replaces every pixel by the
    kernel-weighted mean of its patch and re-normalises it.
    """
    shape = emb.shape
    z = emb.reshape(shape[0], -1, shape[-1])
    inv = 1.0 / (2.0 * cfg.bandwidth ** 2)
    steps = []
    for _ in range(cfg.iterations):
        u = np.empty_like(z)
        r = np.empty(z.shape[:2], dtype=z.dtype)
        for b in range(z.shape[0]):
            w, r[b] = kernels.gaussian_affinity(z[b], inv)
            np.matmul(w, z[b], out=u[b])
        u /= r[..., None]
        z_next, norms = l2_normalize(u)
        steps.append((z, r, z_next, norms))
        z = z_next
    return z.reshape(shape), {"shape": shape, "steps": steps, "inv": inv}


def mean_shift_refine(embeddings: np.ndarray, cfg: MeanShiftConfig) -> np.ndarray:
    return mean_shift_forward(embeddings, cfg)[0]


def mean_shift_backward(cache, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the mean-shift input; affinities are recomputed per patch."""
    shape, inv = cache["shape"], cache["inv"]
    g = grad.reshape(shape[0], -1, shape[-1])
    for z, r, z_next, norms in reversed(cache["steps"]):
        du = l2_normalize_backward(z_next, norms, g)
        u = z_next * norms[..., None]
        dz = np.empty_like(z)
        for b in range(z.shape[0]):
            zb = z[b]
            w, _ = kernels.gaussian_affinity(zb, inv)
            da = du[b] / r[b][:, None]
            dr = -np.einsum("ij,ij->i", du[b], u[b]) / r[b]
            gs, gs_rows = kernels.affinity_grad(da @ np.ascontiguousarray(zb.T), w, dr, inv)
            dz[b] = w.T @ da
            dz[b] += 2.0 * zb * gs_rows[:, None]
            dz[b] -= 2.0 * (gs @ zb)
        g = dz
    return g.reshape(shape)


# ------------------------------------------------------------ centroid updates

def cluster_masses(assignment: np.ndarray) -> np.ndarray:
    return assignment.sum(axis=0)


def ema_update(bank: CentroidBank, embeddings: np.ndarray, assignment: np.ndarray) -> CentroidBank:
    """c_k <- normalize(a c_k + (1 - a) * soft-weighted mean) for clusters above the mass threshold."""
    z = _flat(embeddings)
    p = np.asarray(assignment)
    if p.shape != (len(z), bank.k):
        raise ShapeError(f"assignment {p.shape} does not match {len(z)} pixels x {bank.k} clusters")
    mass = p.sum(axis=0)
    live = (mass > 0) & (mass / max(mass.sum(), np.finfo(float).tiny) >= bank.threshold)
    centers = bank.centers.copy()
    if live.any():
        means = (p[:, live].T @ z) / mass[live][:, None]
        a = bank.ema_decay
        mixed = a * centers[live] + (1.0 - a) * means
        centers[live] = l2_normalize(mixed)[0]
    return bank.with_centers(centers.astype(bank.centers.dtype, copy=False))


def dead_clusters(bank: CentroidBank, masses: np.ndarray) -> np.ndarray:
    masses = np.asarray(masses, dtype=np.float64)
    if masses.shape != (bank.k,):
        raise ShapeError(f"expected {bank.k} masses, got {masses.shape}")
    total = masses.sum()
    frac = masses / total if total > 0 else np.zeros_like(masses)
    return frac < bank.threshold


def reactivate_dead(bank: CentroidBank, masses: np.ndarray, rng: np.random.Generator) -> CentroidBank:
    """Nudge clusters below the mass threshold by eps * Gaussian noise, then re-normalise them."""
    dead = dead_clusters(bank, masses)
    if not dead.any():
        return bank.copy()
    centers = bank.centers.copy()
    noise = rng.standard_normal((int(dead.sum()), bank.dim))
    centers[dead] = l2_normalize(centers[dead] + bank.reactivation_eps * noise)[0]
    return bank.with_centers(centers)


def normalize_bank(bank: CentroidBank) -> CentroidBank:
    return bank.with_centers(l2_normalize(bank.centers)[0].astype(bank.centers.dtype, copy=False))
