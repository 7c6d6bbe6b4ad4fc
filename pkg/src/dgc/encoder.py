"""Hybrid spectral/spatial CNN encoder with a hand-written backward pass.

Three valid strided 1D convolutions run along each pixel's spectrum (one input
channel growing to ``embed_dim``), a global average over the remaining spectral
positions gives one vector per pixel, then two 3x3 same-padded 2D convolutions
mix a 5x5 neighbourhood. Every layer is followed by ReLU and the result is L2
normalised per pixel.

Layouts are channels-last: patches are (B, H, W, bands), embeddings (B, H, W, D).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    bands: int = 301
    embed_dim: int = 32
    kernel_size: int = 9
    strides: tuple[int, ...] = (4, 4, 2)

    def spectral_lengths(self) -> list[int]:
        """Spectral length after each 1D layer; raises if the plan does not fit."""
        lengths, length = [], self.bands
        for s in self.strides:
            if length < self.kernel_size:
                raise ConfigError(
                    f"{self.bands} bands is too few for kernel {self.kernel_size} with strides {self.strides}")
            length = (length - self.kernel_size) // s + 1
            lengths.append(length)
        return lengths


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())


def layer_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, k = cfg.embed_dim, cfg.kernel_size
    shapes = {}
    cin = 1
    for i in range(len(cfg.strides)):
        shapes[f"conv1d_{i}.weight"] = (k, cin, d)
        shapes[f"conv1d_{i}.bias"] = (d,)
        cin = d
    for i in range(2):
        shapes[f"conv2d_{i}.weight"] = (3, 3, d, d)
        shapes[f"conv2d_{i}.bias"] = (d,)
    return shapes


def init_params(bands: int, seed: int = 0, config: EncoderConfig | None = None,
                dtype=np.float32) -> EncoderParams:
    """He-uniform weights scaled by fan-in, zero biases."""
    cfg = config if config is not None else EncoderConfig(bands=bands)
    if cfg.bands != bands:
        cfg = EncoderConfig(bands, cfg.embed_dim, cfg.kernel_size, cfg.strides)
    cfg.spectral_lengths()
    rng = np.random.default_rng([seed, 0xE4C])
    tensors = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return EncoderParams(cfg, tensors)


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS):
    """Row-normalise the last axis; rows with norm <= eps become the first basis vector."""
    norms = np.sqrt(np.einsum("...i,...i->...", v, v))
    dead = norms <= eps
    y = v / np.where(dead, 1.0, norms)[..., None]
    if dead.any():
        y[dead] = 0.0
        y[dead, 0] = 1.0
    return y, norms


def l2_normalize_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray, eps: float = NORM_EPS):
    dead = norms <= eps
    proj = np.einsum("...i,...i->...", y, dy)
    dv = (dy - y * proj[..., None]) / np.where(dead, 1.0, norms)[..., None]
    if dead.any():
        dv[dead] = 0.0
    return dv


def _check_input(params: EncoderParams, patches: np.ndarray) -> np.ndarray:
    if patches.ndim != 4:
        raise ShapeError(f"patches must be (B, H, W, bands), got {patches.shape}")
    if patches.shape[-1] != params.config.bands:
        raise ShapeError(f"patch has {patches.shape[-1]} bands, encoder expects {params.config.bands}")
    return np.asarray(patches, dtype=params.dtype)


def encode_forward(params: EncoderParams, patches: np.ndarray):
    """Returns (embeddings, cache); embeddings are (B, H, W, D), unit norm per pixel."""
    x = _check_input(params, patches)
    cfg, t = params.config, params.tensors
    b, hh, ww, bands = x.shape
    n = b * hh * ww
    k = cfg.kernel_size
    cache = {"shape": x.shape, "conv1d": [], "conv2d": []}

    h = x.reshape(n, bands, 1)
    for i, s in enumerate(cfg.strides):
        length = h.shape[1]
        cols = kernels.conv1d_cols(h, k, s)
        w = t[f"conv1d_{i}.weight"]
        pre = cols @ w.reshape(-1, w.shape[-1])
        pre += t[f"conv1d_{i}.bias"]
        mask = pre > 0
        np.maximum(pre, 0, out=pre)
        lo = pre.shape[0] // n
        cache["conv1d"].append((cols, mask, length))
        h = pre.reshape(n, lo, -1)
    cache["pool_len"] = h.shape[1]
    h = h.mean(axis=1).reshape(b, hh, ww, -1)

    for i in range(2):
        cols = kernels.conv2d_cols(h)
        w = t[f"conv2d_{i}.weight"]
        pre = cols @ w.reshape(-1, w.shape[-1])
        pre += t[f"conv2d_{i}.bias"]
        mask = pre > 0
        np.maximum(pre, 0, out=pre)
        cache["conv2d"].append((cols, mask))
        h = pre.reshape(b, hh, ww, -1)

    emb, norms = l2_normalize(h)
    cache["emb"], cache["norms"] = emb, norms
    return emb, cache


def encode(params: EncoderParams, patches: np.ndarray) -> np.ndarray:
    return encode_forward(params, patches)[0]


def encode_backward(params: EncoderParams, patches: np.ndarray | None, grad: np.ndarray,
                    cache=None) -> dict[str, np.ndarray]:
    """Parameter gradients of <grad, encode(params, patches)>.

    Pass ``cache`` from ``encode_forward`` to skip recomputing the forward pass.
    """
    if cache is None:
        _, cache = encode_forward(params, patches)
    b, hh, ww, bands = cache["shape"]
    if grad.shape != cache["emb"].shape:
        raise ShapeError(f"upstream gradient {grad.shape} does not match embeddings {cache['emb'].shape}")
    cfg, t = params.config, params.tensors
    n = b * hh * ww
    grads = {}

    g = l2_normalize_backward(cache["emb"], cache["norms"], grad.astype(params.dtype, copy=False))
    g = g.reshape(n, -1)
    for i in (1, 0):
        cols, mask = cache["conv2d"][i]
        g = g * mask
        w = t[f"conv2d_{i}.weight"]
        grads[f"conv2d_{i}.weight"] = (cols.T @ g).reshape(w.shape)
        grads[f"conv2d_{i}.bias"] = g.sum(axis=0)
        dcols = g @ w.reshape(-1, w.shape[-1]).T
        g = kernels.conv2d_col2im(dcols, b, hh, ww).reshape(n, -1)

    lo = cache["pool_len"]
    g = np.repeat(g[:, None, :] / lo, lo, axis=1).reshape(n * lo, -1)
    for i in reversed(range(len(cfg.strides))):
        cols, mask, length = cache["conv1d"][i]
        g = g * mask
        w = t[f"conv1d_{i}.weight"]
        grads[f"conv1d_{i}.weight"] = (cols.T @ g).reshape(w.shape)
        grads[f"conv1d_{i}.bias"] = g.sum(axis=0)
        if i == 0:
            break
        dcols = g @ w.reshape(-1, w.shape[-1]).T
        g = kernels.conv1d_col2im(dcols, n, length, cfg.kernel_size, cfg.strides[i])
        g = g.reshape(-1, g.shape[-1])
    return {name: grads[name] for name in t}
