import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripletlab import losses
from tripletlab.losses import (CGLConfig, MaskSample, baseline_losses, bce_logit_grad,
                               build_taxonomy, cgl_loss, decompose_bce, expected_cgl_loss,
                               focal_loss, head_instances, instance_head_membership,
                               sample_masks, scaled_thresholds)

from gradcheck import rel_err
from oracles import bce_direct


def taxonomy(G=6):
    # two head, two medium, two tail columns
    counts = [20_000, 15_000, 5_000, 2_000, 500, 10][:G]
    return build_taxonomy(counts)


def batch(seed, N=5, G=6, scale=3.0):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=scale, size=(N, G)), (rng.random((N, G)) < 0.4).astype(np.uint8)


def fd_logits(fn, z, h=1e-6):
    out = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        out[idx] = (fn(zp) - fn(zm)) / (2 * h)
    return out


# -- BCE ------------------------------------------------------------------------

def test_bce_examples():
    out = decompose_bce(np.zeros((1, 1)), np.ones((1, 1)))
    assert abs(out.value - math.log(2)) < 1e-15
    assert decompose_bce(np.array([[40.0]]), np.array([[1]])).value < 1e-15
    z, y = batch(0, 3, 4)
    assert abs(decompose_bce(z, y).value - bce_direct(z, y)) < 1e-12


def test_bce_partial_sums():
    z, y = batch(1)
    out = decompose_bce(z, y, taxonomy())
    d = out.diagnostics
    assert abs(d["L_pos"] + d["L_neg"] - out.value) < 1e-12
    assert abs(d["L_pos"] - bce_direct(z[y == 1], y[y == 1])) < 1e-12
    assert abs(sum(d[f"{g}_L_neg"] for g in ("head", "medium", "tail")) - d["L_neg"]) < 1e-12


def test_bce_rejects_non_binary():
    with pytest.raises(ValueError):
        decompose_bce(np.zeros((1, 2)), np.array([[0, 2]]))


def test_bce_grad_points():
    assert bce_logit_grad(np.zeros((1, 1)), np.ones((1, 1)))[0, 0] == -0.5
    assert bce_logit_grad(np.zeros((1, 1)), np.zeros((1, 1)))[0, 0] == 0.5


def test_bce_grad_matches_finite_differences():
    z, y = batch(2, 4, 5, scale=2.0)
    num = fd_logits(lambda zz: decompose_bce(zz, y).value, z)
    assert rel_err(bce_logit_grad(z, y), num) < 1e-6
    np.testing.assert_array_equal(decompose_bce(z, y).dloss_dlogits, bce_logit_grad(z, y))


def test_saturated_logits_stay_finite():
    z = np.array([[800.0, -800.0]])
    out = decompose_bce(z, np.array([[0, 1]]))
    assert math.isfinite(out.value) and abs(out.value - 1600.0) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_losses_non_negative(N, G, seed):
    z, y = batch(seed, N, G, scale=10.0)
    assert decompose_bce(z, y).value >= 0
    tax = build_taxonomy(np.random.default_rng(seed).integers(0, 30_000, size=G))
    m = sample_masks(y, tax, CGLConfig(0.5), np.random.default_rng(seed))
    assert cgl_loss(z, y, m).value >= 0
    assert baseline_losses("focal", z, y, {"focusing": 1.5}).value >= 0


# -- taxonomy --------------------------------------------------------------------

def test_taxonomy_thresholds():
    t = build_taxonomy([12_000, 5_000, 100])
    assert t.groups == ("head", "medium", "tail")
    assert build_taxonomy([5_000] * 4).groups == ("medium",) * 4
    with pytest.raises(ValueError):
        build_taxonomy([1], head_min=10, tail_max=10)
    with pytest.raises(ValueError):
        build_taxonomy([-1])


def test_taxonomy_boundaries_are_strict():
    t = build_taxonomy([10_000, 1_000, 10_001, 999])
    assert t.groups == ("medium", "medium", "head", "tail")


def test_scaled_ratio_reported():
    from tripletlab.data import PowerLawConfig, sample_class_counts
    counts = sample_class_counts(PowerLawConfig(1.5, 40_000, 8), 100)
    t = build_taxonomy(counts, *scaled_thresholds(counts))
    head, med, tail = t.ratio()
    assert abs(head + med + tail - 1.0) < 1e-12
    assert tail > 0.5 and head > 0


# -- masks -----------------------------------------------------------------------

def test_membership_rules():
    t = taxonomy()
    assert not instance_head_membership(np.zeros(6), t)
    assert instance_head_membership(np.array([1, 0, 0, 0, 0, 0]), t)
    mixed = np.array([1, 0, 0, 0, 1, 1])
    assert instance_head_membership(mixed, t)
    assert not instance_head_membership(mixed, t, rule="majority")
    assert instance_head_membership(np.array([1, 1, 0, 0, 0, 1]), t, rule="majority")


def test_gamma_zero_and_one_masks():
    t = taxonomy()
    z, y = batch(3, 8)
    m0 = sample_masks(y, t, CGLConfig(0.0), np.random.default_rng(0))
    assert np.all(m0.h_plus == 1) and np.all(m0.h_minus == 1)
    m1 = sample_masks(y, t, CGLConfig(1.0), np.random.default_rng(0))
    inst = head_instances(y, t)
    assert np.array_equal(m1.h_plus == 0, np.broadcast_to(t.is_head, y.shape))
    assert np.array_equal(m1.h_minus == 0, inst[:, None] & t.is_tail[None, :])


def test_mask_zero_rate_monte_carlo():
    t = taxonomy()
    gamma = 0.1
    y = np.ones((200, 6), dtype=np.uint8)
    y[:, 0] = 1  # every instance is head-class
    rng = np.random.default_rng(4)
    zeros, cells = 0, 0
    while cells < 100_000:
        m = sample_masks(y, t, CGLConfig(gamma), rng)
        zeros += int((m.h_plus[:, t.is_head] == 0).sum())
        cells += int(t.is_head.sum()) * y.shape[0]
    rate = zeros / cells
    assert abs(rate - gamma) <= 3 * math.sqrt(gamma * (1 - gamma) / cells)


def test_mask_invariants_over_random_batches():
    t = taxonomy()
    rng = np.random.default_rng(5)
    for seed in range(30):
        z, y = batch(seed, 7)
        m = sample_masks(y, t, CGLConfig(0.7), rng)
        inst = head_instances(y, t)
        assert np.all(m.h_plus[:, ~t.is_head] == 1)
        assert np.all(m.h_minus[~inst] == 1)          # tail-free instances untouched
        assert np.all(m.h_minus[:, ~t.is_tail] == 1)
        bce, cgl = decompose_bce(z, y), cgl_loss(z, y, m)
        keep = (y == 1) & t.is_medium[None, :]
        np.testing.assert_array_equal(cgl.dloss_dlogits[keep], bce.dloss_dlogits[keep])
        keep = (y == 0) & ~t.is_tail[None, :]
        np.testing.assert_array_equal(cgl.dloss_dlogits[keep], bce.dloss_dlogits[keep])


def test_mask_sampling_deterministic():
    t = taxonomy()
    _, y = batch(6)
    a = sample_masks(y, t, CGLConfig(0.3), np.random.default_rng(9))
    b = sample_masks(y, t, CGLConfig(0.3), np.random.default_rng(9))
    assert np.array_equal(a.h_plus, b.h_plus) and np.array_equal(a.h_minus, b.h_minus)


def test_cgl_config_validation():
    with pytest.raises(ValueError):
        CGLConfig(1.5)
    with pytest.raises(ValueError):
        CGLConfig(0.1, membership="most")


# -- CGL -------------------------------------------------------------------------

def test_cgl_gamma_zero_bitwise_bce():
    t = taxonomy()
    rng = np.random.default_rng(7)
    for seed in range(20):
        z, y = batch(seed)
        m = sample_masks(y, t, CGLConfig(0.0), rng)
        a, b = cgl_loss(z, y, m), decompose_bce(z, y)
        assert a.value == b.value
        assert a.dloss_dlogits.tobytes() == b.dloss_dlogits.tobytes()


def test_cgl_all_zero_masks():
    z, y = batch(8)
    zero = MaskSample(np.zeros_like(z), np.zeros_like(z), np.zeros(z.shape[0], bool))
    out = cgl_loss(z, y, zero)
    assert out.value == 0.0 and np.all(out.dloss_dlogits == 0)


def test_cgl_gradient_formula_and_fd():
    t = taxonomy()
    z, y = batch(9, 6, 6, scale=2.0)
    m = sample_masks(y, t, CGLConfig(0.5), np.random.default_rng(1))
    out = cgl_loss(z, y, m)
    p = 1 / (1 + np.exp(-z))
    ref = m.h_plus * y * (p - 1) + m.h_minus * (1 - y) * p
    np.testing.assert_allclose(out.dloss_dlogits, ref, atol=1e-15)
    num = fd_logits(lambda zz: cgl_loss(zz, y, m).value, z)
    assert rel_err(out.dloss_dlogits, num) < 1e-6


def test_cgl_shape_mismatch():
    z, y = batch(10)
    m = sample_masks(y, taxonomy(), CGLConfig(0.1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        cgl_loss(z[:, :3], y[:, :3], m)


def test_expected_loss_closed_form_small_mc():
    t = taxonomy()
    z, y = batch(11)
    y[:, 0] = 1
    rng = np.random.default_rng(2)
    draws = [cgl_loss(z, y, sample_masks(y, t, CGLConfig(0.5), rng)).value for _ in range(2000)]
    ref = expected_cgl_loss(z, y, t, 0.5)
    assert abs(np.mean(draws) - ref) / ref < 0.03


# -- baselines -------------------------------------------------------------------

def test_focal_zero_equals_bce():
    z, y = batch(12)
    f = baseline_losses("focal", z, y, {"focusing": 0.0})
    b = decompose_bce(z, y)
    assert abs(f.value - b.value) < 1e-12
    np.testing.assert_allclose(f.dloss_dlogits, b.dloss_dlogits, atol=1e-12)


def test_eq_zero_equals_bce():
    z, y = batch(13)
    e = baseline_losses("eq", z, y, {"suppress_prob": 0.0, "rng": np.random.default_rng(0)},
                        taxonomy())
    b = decompose_bce(z, y)
    assert e.value == b.value
    np.testing.assert_array_equal(e.dloss_dlogits, b.dloss_dlogits)


@pytest.mark.parametrize("focusing", [0.5, 1.0, 2.0, 3.5])
def test_focal_gradient_fd(focusing):
    z, y = batch(14, 4, 5, scale=2.0)
    out = baseline_losses("focal", z, y, {"focusing": focusing})
    num = fd_logits(lambda zz: float(sum(a.sum() for a in focal_loss(zz, y, focusing)[:2])), z)
    assert rel_err(out.dloss_dlogits, num) < 1e-4


def test_eq_gradient_fd():
    t = taxonomy()
    z, y = batch(15, 4, 6, scale=2.0)
    w = losses.eq_weights(y, t, 0.5, np.random.default_rng(3))
    out = baseline_losses("eq", z, y, {"neg_weight": w})
    num = fd_logits(lambda zz: baseline_losses("eq", zz, y, {"neg_weight": w}).value, z)
    assert rel_err(out.dloss_dlogits, num) < 1e-4


def test_baseline_errors():
    z, y = batch(16)
    with pytest.raises(ValueError):
        baseline_losses("ldam", z, y)
    with pytest.raises(ValueError):
        focal_loss(z, y, -1.0)
    with pytest.raises(ValueError):
        losses.eq_weights(y, taxonomy(), 1.5, np.random.default_rng(0))
