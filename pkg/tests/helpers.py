"""Small configs and random instances shared by the test modules."""

import numpy as np

from dgc.encoder import EncoderConfig, init_params
from dgc.trainer import TrainConfig

TINY_ENCODER = EncoderConfig(bands=12, embed_dim=4, kernel_size=3, strides=(1, 1, 1))


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(k=3, patch_size=8, batch=2, bands=12, embed_dim=4, kernel_size=3, strides=(1, 1, 1),
                steps=4, reuse=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def random_params(seed, config=TINY_ENCODER, dtype=np.float64):
    """Random weights and biases; nonzero biases keep ReLUs off their kinks."""
    params = init_params(config.bands, seed, config, dtype)
    rng = np.random.default_rng([seed, 99])
    for name, v in params.tensors.items():
        if name.endswith(".bias"):
            v[:] = rng.uniform(0.01, 0.1, size=v.shape)
    return params


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_simplex(rng, n, k):
    p = rng.random((n, k)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)
