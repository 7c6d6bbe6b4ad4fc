import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgc.clustering import (
    CentroidBank,
    MeanShiftConfig,
    cosine_backward,
    cosine_forward,
    dead_clusters,
    ema_update,
    hard_assign,
    init_bank,
    mean_shift_backward,
    mean_shift_forward,
    mean_shift_refine,
    normalize_bank,
    reactivate_dead,
    soft_assign,
    softmax,
    softmax_backward,
)
from dgc.errors import ConfigError, ShapeError

import oracles
from helpers import unit_rows


def _bank(centers, **kw):
    return CentroidBank(np.asarray(centers, dtype=np.float64), **kw)


def test_bank_invariants():
    with pytest.raises(ConfigError):
        _bank([[1.0, 0.0]])
    with pytest.raises(ConfigError):
        _bank(np.eye(2), temperature=0)
    with pytest.raises(ConfigError):
        _bank(np.eye(2), ema_decay=1.5)
    bank = init_bank(5, 32, seed=1)
    np.testing.assert_allclose(np.linalg.norm(bank.centers, axis=1), 1, atol=1e-6)
    assert bank.threshold == pytest.approx(0.1)


# --------------------------------------------------------------- soft assign

def test_equidistant_pixel_gets_uniform_row():
    bank = _bank(np.eye(3))
    z = np.ones((1, 3)) / math.sqrt(3)
    np.testing.assert_allclose(soft_assign(z, bank), [[1 / 3] * 3], atol=1e-12)


def test_two_cluster_softmax_value():
    bank = _bank([[1.0, 0.0], [0.0, 1.0]], temperature=0.5)
    p = soft_assign(np.array([[1.0, 0.0]]), bank)
    e2 = math.exp(2.0)
    np.testing.assert_allclose(p[0], [e2 / (e2 + 1), 1 / (e2 + 1)], rtol=1e-12)
    np.testing.assert_allclose(p[0], [0.8808, 0.1192], atol=1e-4)


def test_low_temperature_approaches_one_hot():
    rng = np.random.default_rng(0)
    c, z = unit_rows(rng, 4, 6), unit_rows(rng, 20, 6)
    p = soft_assign(z, _bank(c, temperature=1e-3))
    np.testing.assert_array_equal(p.argmax(1), (z @ c.T).argmax(1))
    assert p.max(axis=1).min() > 0.99


def test_soft_assign_matches_formula_on_random_rows():
    rng = np.random.default_rng(1)
    c, z = unit_rows(rng, 3, 5), unit_rows(rng, 4, 5)
    p = soft_assign(z, _bank(c, temperature=0.3))
    for i in range(4):
        np.testing.assert_allclose(p[i], oracles.softmax_row(z[i] @ c.T, 0.3), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(2, 8), tau=st.floats(0.01, 2.0))
def test_soft_rows_on_simplex(seed, k, tau):
    rng = np.random.default_rng(seed)
    p = soft_assign(unit_rows(rng, 30, 4), _bank(unit_rows(rng, k, 4), temperature=tau))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        soft_assign(np.ones((2, 3)), _bank(np.eye(4)))
    with pytest.raises(ShapeError):
        hard_assign(np.ones((2, 3)), _bank(np.eye(4)))


def test_cosine_and_softmax_backward_match_finite_differences():
    rng = np.random.default_rng(2)
    z, c = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
    up = rng.standard_normal((5, 3))
    f = lambda: float(np.sum(softmax(cosine_forward(z, c)[0] / 0.2) * up))
    cos, cache = cosine_forward(z, c)
    p = softmax(cos / 0.2)
    dz, dc = cosine_backward(cache, softmax_backward(p, up) / 0.2)
    assert oracles.rel_error(dz, oracles.central_difference(f, z)) < 1e-7
    assert oracles.rel_error(dc, oracles.central_difference(f, c)) < 1e-7


# ---------------------------------------------------------------- hard assign

def test_exact_centroid_gets_its_label():
    rng = np.random.default_rng(3)
    c = unit_rows(rng, 5, 8)
    assert hard_assign(c[3:4], _bank(c))[0] == 3


def test_ties_go_to_smallest_index():
    bank = _bank([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert hard_assign(np.array([[1.0, 0.0], [0.6, 0.8]]), bank).tolist() == [0, 1]
    z = np.array([[1, 1]]) / math.sqrt(2)
    assert hard_assign(z, bank)[0] == 0


def test_hard_assign_brute_force_k16():
    rng = np.random.default_rng(4)
    c, z = unit_rows(rng, 16, 32), unit_rows(rng, 1000, 32)
    brute = [min(range(16), key=lambda k: np.sum((zi - c[k]) ** 2)) for zi in z]
    labels = hard_assign(z, _bank(c), chunk=333)
    assert labels.tolist() == brute
    np.testing.assert_array_equal(labels, (z @ c.T).argmax(1))


def test_hard_assign_keeps_grid_shape():
    rng = np.random.default_rng(5)
    z = unit_rows(rng, 2 * 3 * 4, 6).reshape(2, 3, 4, 6)
    assert hard_assign(z, _bank(unit_rows(rng, 3, 6))).shape == (2, 3, 4)


# ----------------------------------------------------------------- mean-shift

def test_identical_pixels_are_a_fixed_point():
    z = np.tile(unit_rows(np.random.default_rng(6), 1, 5), (1, 9, 1))
    np.testing.assert_allclose(mean_shift_refine(z, MeanShiftConfig(5, 0.3)), z, atol=1e-12)


@pytest.mark.parametrize("h", [0.05, 0.5, 4.0])
def test_single_pixel_patch_is_identity(h):
    z = unit_rows(np.random.default_rng(7), 1, 4)[None]
    np.testing.assert_allclose(mean_shift_refine(z, MeanShiftConfig(3, h)), z, atol=1e-12)


def test_zero_iterations_is_identity():
    z = unit_rows(np.random.default_rng(8), 6, 3)[None]
    assert np.array_equal(mean_shift_refine(z, MeanShiftConfig(0, 0.5)), z)


def test_matches_pairwise_loop_oracle():
    rng = np.random.default_rng(9)
    z = unit_rows(rng, 2 * 7, 4).reshape(2, 7, 4)
    got = mean_shift_refine(z, MeanShiftConfig(3, 0.6))
    for b in range(2):
        np.testing.assert_allclose(got[b], oracles.mean_shift(z[b], 3, 0.6), rtol=1e-10)


def test_within_blob_variance_non_increasing():
    rng = np.random.default_rng(10)
    centres = unit_rows(rng, 2, 8)
    pts = np.concatenate([c + 0.05 * rng.standard_normal((20, 8)) for c in centres])
    z = (pts / np.linalg.norm(pts, axis=1, keepdims=True))[None]
    labels = np.repeat([0, 1], 20)
    var = []
    for it in range(6):
        out = mean_shift_refine(z, MeanShiftConfig(it, 0.2))[0]
        var.append(sum(out[labels == j].var(axis=0).sum() for j in (0, 1)))
    assert all(b <= a + 1e-15 for a, b in zip(var, var[1:]))
    assert var[-1] < var[0]


def test_output_unit_norm():
    z = unit_rows(np.random.default_rng(11), 3 * 16, 4).reshape(3, 4, 4, 4).astype(np.float32)
    out = mean_shift_refine(z, MeanShiftConfig())
    assert out.shape == z.shape and out.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1, atol=1e-5)


@pytest.mark.parametrize("iters,h", [(1, 0.5), (5, 0.5), (3, 0.3)])
def test_mean_shift_backward_matches_finite_differences(iters, h):
    rng = np.random.default_rng(iters)
    z = unit_rows(rng, 2 * 6, 3).reshape(2, 6, 3)
    up = rng.standard_normal(z.shape)
    cfg = MeanShiftConfig(iters, h)
    _, cache = mean_shift_forward(z, cfg)
    ana = mean_shift_backward(cache, up)
    num = oracles.central_difference(lambda: float(np.sum(mean_shift_refine(z, cfg) * up)), z)
    assert oracles.rel_error(ana, num) < 1e-7


def test_mean_shift_config_validation():
    with pytest.raises(ConfigError):
        MeanShiftConfig(-1, 0.5)
    with pytest.raises(ConfigError):
        MeanShiftConfig(5, 0.0)


# ------------------------------------------------------------ centroid updates

def test_ema_alpha_one_is_identity():
    rng = np.random.default_rng(12)
    bank = _bank(unit_rows(rng, 3, 4), ema_decay=1.0)
    z = unit_rows(rng, 10, 4)
    out = ema_update(bank, z, soft_assign(z, bank))
    np.testing.assert_allclose(out.centers, bank.centers, atol=1e-12)


def test_ema_alpha_zero_replaces_with_weighted_mean():
    rng = np.random.default_rng(13)
    bank = _bank(unit_rows(rng, 3, 4), ema_decay=0.0)
    z = unit_rows(rng, 10, 4)
    p = np.zeros((10, 3))
    p[:, 0] = 1.0
    out = ema_update(bank, z, p)
    mean = z.mean(0)
    np.testing.assert_allclose(out.centers[0], mean / np.linalg.norm(mean), atol=1e-12)
    np.testing.assert_array_equal(out.centers[1:], bank.centers[1:])


def test_ema_single_pixel_direct_evaluation():
    rng = np.random.default_rng(14)
    c = unit_rows(rng, 2, 5)
    z = unit_rows(rng, 1, 5)
    bank = _bank(c, ema_decay=0.9, dead_threshold=0.0)
    out = ema_update(bank, z, np.array([[1.0, 0.0]]))
    v = 0.9 * c[0] + 0.1 * z[0]
    np.testing.assert_allclose(out.centers[0], v / np.linalg.norm(v), atol=1e-12)
    np.testing.assert_array_equal(out.centers[1], c[1])


def test_ema_skips_clusters_below_threshold_inclusive_above():
    bank = _bank(np.eye(2), ema_decay=0.0, dead_threshold=0.25)
    z = np.array([[0.6, 0.8]] * 4)
    p = np.array([[0.75, 0.25]] * 4)  # cluster 1 holds exactly the threshold share
    out = ema_update(bank, z, p)
    np.testing.assert_allclose(out.centers, [[0.6, 0.8], [0.6, 0.8]], atol=1e-12)
    p2 = np.array([[0.8, 0.2]] * 4)
    np.testing.assert_allclose(ema_update(bank, z, p2).centers[1], [0, 1])


def test_ema_shape_check():
    with pytest.raises(ShapeError):
        ema_update(_bank(np.eye(2)), np.ones((3, 2)), np.ones((2, 2)))


def test_reactivation_fires_strictly_below_threshold():
    bank = _bank(np.eye(3), dead_threshold=0.2)
    masses = np.array([0.6, 0.2, 0.2])
    assert dead_clusters(bank, masses).tolist() == [False, False, False]
    masses = np.array([0.61, 0.2, 0.19])
    assert dead_clusters(bank, masses).tolist() == [False, False, True]


def test_reactivation_all_alive_unchanged():
    bank = _bank(np.eye(3))
    out = reactivate_dead(bank, np.array([1.0, 1.0, 1.0]), np.random.default_rng(0))
    assert np.array_equal(out.centers, bank.centers)


def test_reactivation_zero_eps_unchanged():
    bank = _bank(np.eye(3), reactivation_eps=0.0)
    out = reactivate_dead(bank, np.array([1.0, 0.0, 0.0]), np.random.default_rng(0))
    np.testing.assert_allclose(out.centers, bank.centers, atol=1e-15)


def test_reactivation_perturbs_and_keeps_unit_norm():
    bank = _bank(np.eye(3))
    a = reactivate_dead(bank, np.array([1.0, 1.0, 0.0]), np.random.default_rng(5))
    b = reactivate_dead(bank, np.array([1.0, 1.0, 0.0]), np.random.default_rng(5))
    assert not np.allclose(a.centers[2], bank.centers[2])
    np.testing.assert_array_equal(a.centers[:2], bank.centers[:2])
    assert np.array_equal(a.centers, b.centers)
    np.testing.assert_allclose(np.linalg.norm(a.centers, axis=1), 1, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(0, 1))
def test_unit_norm_after_every_update_path(seed, alpha):
    rng = np.random.default_rng(seed)
    bank = _bank(unit_rows(rng, 4, 6), ema_decay=alpha)
    z = unit_rows(rng, 25, 6)
    p = soft_assign(z, bank)
    for out in (ema_update(bank, z, p), reactivate_dead(bank, p.sum(0) * 0 + [1, 0, 1, 0], rng),
                normalize_bank(bank.with_centers(bank.centers * 3.0))):
        np.testing.assert_allclose(np.linalg.norm(out.centers, axis=1), 1, atol=1e-6)
