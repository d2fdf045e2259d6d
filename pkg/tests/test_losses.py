import warnings

import numpy as np
import pytest

from lttrack import autodiff as ad
from lttrack.losses import (
    EmptyBatchWarning,
    LossWeights,
    NonFiniteLoss,
    cross_consistency_loss,
    gaussian_target,
    kl_target_loss,
    loss_2d,
    loss_3d,
    loss_canonical,
    loss_total,
    smooth_loss,
    sphere_loss,
)


def val(x):
    return float(ad.value_of(x))


def _batch(rng, n=6, cm=None):
    return {
        "c1": rng.uniform(0, 1, (n, 3)), "c2": rng.uniform(0, 1, (n, 3)),
        "p1": rng.uniform(0, 50, (n, 2)), "p2": rng.uniform(0, 50, (n, 2)),
        "cm": np.ones(n, int) if cm is None else np.asarray(cm),
    }


def test_perfect_predictions_zero(rng):
    b = _batch(rng)
    pred = {"c1_hat": b["c1"], "c2_hat": b["c2"], "p12_hat": b["p2"], "p21_hat": b["p1"]}
    rgb, flow = loss_2d(b, pred)
    assert val(rgb) == 0 and val(flow) == 0


def test_fully_masked_flow_is_zero(rng):
    b = _batch(rng, cm=np.zeros(6, int))
    pred = {"c1_hat": b["c1"], "c2_hat": b["c2"], "p12_hat": b["p2"] + 100, "p21_hat": b["p1"] - 7}
    assert val(loss_2d(b, pred)[1]) == 0


def test_hand_built_two_pixel_batch():
    b = {
        "c1": np.array([[0.0, 0, 0], [1, 1, 1]]), "c2": np.array([[0.5, 0.5, 0.5], [0, 0, 0]]),
        "p1": np.array([[10.0, 10], [20, 20]]), "p2": np.array([[12.0, 10], [20, 25]]),
        "cm": np.array([1, 2]),
    }
    pred = {
        "c1_hat": np.array([[0.1, 0, 0], [1, 1, 0.8]]), "c2_hat": np.array([[0.5, 0.5, 0.5], [0, 0.3, 0]]),
        "p12_hat": np.array([[13.0, 10], [20, 21]]), "p21_hat": np.array([[10.0, 12], [26, 20]]),
    }
    rgb, flow = loss_2d(b, pred)
    # colour: ((0.01) + (0.04)) / 2 + ((0) + (0.09)) / 2
    assert val(rgb) == pytest.approx(0.05 / 2 + 0.09 / 2, abs=1e-15)
    # forward (both gated in): (1 + 16) / 2 ; backward only pixel 0 (cm=1): (4) / 2
    assert val(flow) == pytest.approx(17 / 2 + 4 / 2, abs=1e-12)
    _, flow_scaled = loss_2d(b, pred, scale=2.0)
    assert val(flow_scaled) == pytest.approx((17 / 2 + 4 / 2) / 4, abs=1e-12)


def test_bad_consistency_labels_rejected(rng):
    b = _batch(rng, cm=[0, 1, 3, 1, 1, 1])
    pred = {"c1_hat": b["c1"], "c2_hat": b["c2"], "p12_hat": b["p2"], "p21_hat": b["p1"]}
    with pytest.raises(ValueError):
        loss_2d(b, pred)


def test_empty_batch_warns():
    b = {k: np.zeros((0, 3)) for k in ("c1", "c2")}
    b.update(p1=np.zeros((0, 2)), p2=np.zeros((0, 2)), cm=np.zeros(0, int))
    with pytest.warns(EmptyBatchWarning):
        rgb, flow = loss_2d(b, {})
    assert val(rgb) == 0 and val(flow) == 0


def test_masked_entries_do_not_affect_loss(rng):
    b = _batch(rng, cm=[1, 0, 2, 0, 1, 2])
    pred = {"c1_hat": b["c1"], "c2_hat": b["c2"], "p12_hat": rng.uniform(0, 50, (6, 2)),
            "p21_hat": rng.uniform(0, 50, (6, 2))}
    base = val(loss_2d(b, pred)[1])
    pred["p12_hat"][[1, 3]] += 1e3
    pred["p21_hat"][[1, 2, 3, 5]] -= 1e3
    assert val(loss_2d(b, pred)[1]) == base


def test_identical_distributions_kl_zero(rng):
    depths = np.sort(rng.uniform(1, 5, (4, 16)), axis=1)
    target = gaussian_target(depths, depths[:, 7], 0.3)
    l_gt, _ = loss_3d(depths, depths[:, 7], np.ones(4, bool), target, 0.3)
    # the only residual is log(1 + eps) from the normaliser's eps = 1e-8
    assert abs(val(l_gt)) <= 1.01e-8


def test_hand_built_four_sample_kl():
    depths = np.array([[1.0, 2.0, 3.0, 4.0]])
    w = np.array([[0.1, 0.4, 0.3, 0.1]])
    sig = 1.0
    s = np.exp(-0.5 * (np.array([1.0, 2, 3, 4]) - 2.2) ** 2)
    wt = s / s.sum()
    wh = w / (w.sum() + 1e-8)
    expect = float(np.sum(wt * (np.log(wt) - np.log(wh))))
    l_gt, _ = loss_3d(depths, np.array([2.2]), np.array([True]), ad.Var(w), sig)
    assert val(l_gt) == pytest.approx(expect, abs=1e-10)


def test_per_ray_sigma(rng):
    depths = np.tile(np.linspace(1, 4, 8), (2, 1))
    a = gaussian_target(depths, np.array([2.0, 3.0]), np.array([0.5, 1.0]))
    np.testing.assert_allclose(a[0], gaussian_target(depths[:1], np.array([2.0]), 0.5)[0])
    np.testing.assert_allclose(a[1], gaussian_target(depths[1:], np.array([3.0]), 1.0)[0])


def test_invalid_targets_masked(rng):
    depths = np.sort(rng.uniform(1, 5, (3, 8)), axis=1)
    w = ad.Var(rng.uniform(0, 1, (3, 8)))
    valid = np.array([True, False, True])
    a = val(kl_target_loss(gaussian_target(depths, np.array([2.0, 3.0, 4.0]), 0.5), w, valid))
    b = val(kl_target_loss(gaussian_target(depths, np.array([2.0, -99.0, 4.0]), 0.5), w, valid))
    assert a == b
    with pytest.warns(EmptyBatchWarning):
        assert val(kl_target_loss(np.zeros((3, 8)), w, np.zeros(3, bool))) == 0


def test_linear_track_has_zero_smoothness(rng):
    p0, v = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    assert val(smooth_loss(p0 - v, p0, p0 + v)) == pytest.approx(0, abs=1e-12)


def test_smoothness_hand_value():
    prev = np.array([[0.0, 0, 0]])
    now = np.array([[1.0, 0, 0]])
    nxt = np.array([[1.0, 2, 0]])
    # second difference (-1, 2, 0)
    assert val(smooth_loss(prev, now, nxt)) == pytest.approx(np.sqrt(5))


def test_points_inside_sphere_no_cr(rng):
    c = 0.5 + 0.2 * rng.uniform(-1, 1, (20, 3))
    l_cr, l_xc = loss_canonical(c, rng.uniform(0, 1, (20, 3)), c, c, np.ones(20, int))
    assert val(l_cr) == 0 and val(l_xc) == 0


def test_single_escaped_point_hand_value():
    c = np.array([[0.5, 0.5, 0.5], [1.2, 0.5, 0.5]])
    u = np.array([[0.4, 0.4, 0.4], [0.9, 0.6, 0.5]])
    # only point 1 escapes: |(0.3, -0.1, 0)|^2 = 0.1, mean over 2
    assert val(sphere_loss(c, u)) == pytest.approx(0.05)


def test_cross_consistency_gating():
    c1 = np.zeros((3, 3))
    c2 = np.array([[1.0, 0, 0], [0, 2, 0], [0, 0, 3]])
    assert val(cross_consistency_loss(c1, c2, np.array([1, 2, 0]))) == pytest.approx(1 / 3)


def test_loss_total_weights():
    terms = {"rgb": ad.Var(np.array(0.5)), "flow": ad.Var(np.array(0.0)), "gt": ad.Var(np.array(2.0))}
    zero = LossWeights(0, 0, 0, 0, 0, 0)
    total, _ = loss_total(terms, zero)
    assert val(total) == 0
    total, rep = loss_total({"flow": ad.Var(np.array(1.5))}, LossWeights(rgb=0, flow=2.0))
    assert val(total) == 3.0 and rep.weighted["flow"] == 3.0


def test_loss_total_matches_weighted_sum(rng):
    names = ("rgb", "flow", "gt", "smooth", "cr", "xc")
    vals = rng.uniform(0, 3, 6)
    lam = rng.uniform(0, 2, 6)
    weights = LossWeights(**dict(zip(names, lam)))
    total, rep = loss_total({n: ad.Var(np.array(v)) for n, v in zip(names, vals)}, weights)
    assert rep.total == pytest.approx(float(np.dot(vals, lam)), abs=1e-12)
    assert val(total) == rep.total


def test_loss_total_names_non_finite_term():
    with pytest.raises(NonFiniteLoss, match="gt"):
        loss_total({"rgb": ad.Var(np.array(1.0)), "gt": ad.Var(np.array(np.nan))}, LossWeights())


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(flow=-1)


def test_default_weights():
    w = LossWeights()
    assert (w.rgb, w.flow, w.gt, w.smooth, w.cr, w.xc) == (1.0, 1.0, 1.0, 0.1, 1.0, 1.0)
