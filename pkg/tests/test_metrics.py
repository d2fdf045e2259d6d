import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from lttrack.data_io import TrackResult
from lttrack.metrics import PX_THRESHOLDS, delta_accuracy, evaluate_metrics, psnr, ssim, track_errors


def test_delta_example():
    assert delta_accuracy([3, 5, 9], [4])[4] == pytest.approx(100 / 3)


def test_delta_strict_threshold():
    assert delta_accuracy([4.0], [4])[4] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=50))
def test_delta_monotone_and_bounded(errs):
    d = delta_accuracy(errs, PX_THRESHOLDS)
    vals = [d[n] for n in PX_THRESHOLDS]
    assert all(0 <= v <= 100 for v in vals)
    assert vals == sorted(vals)


def test_identical_images(rng):
    img = rng.uniform(0, 1, (20, 20, 3))
    assert psnr(img, img) == 99.0
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_psnr_formula(rng):
    a = rng.uniform(0, 1, (8, 8))
    b = rng.uniform(0, 1, (8, 8))
    mse = np.mean((a - b) ** 2)
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-12)


@pytest.mark.parametrize("shape", [(16, 16), (24, 20, 3)])
def test_ssim_matches_reference_implementation(rng, shape):
    a = rng.uniform(0, 1, shape)
    b = np.clip(a + 0.1 * rng.standard_normal(shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, channel_axis=-1 if len(shape) == 3 else None)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)
    assert ssim(a, b) == pytest.approx(_ssim_valid_oracle(a, b), abs=1e-9)


def _ssim_valid_oracle(a, b, size=11, sigma=1.5):
    """Direct sliding-window SSIM over fully covered windows."""
    if a.ndim == 3:
        return np.mean([_ssim_valid_oracle(a[..., c], b[..., c]) for c in range(a.shape[2])])
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def _tr(qid, pix, pts, valid):
    T = len(valid)
    return TrackResult(qid, 0, pix[0], np.arange(T), pix, pts, np.asarray(valid))


def test_evaluate_metrics(rng):
    gt_pix = rng.uniform(0, 50, (3, 2))
    gt_pts = rng.uniform(0, 50, (3, 3))
    truth = [_tr(0, gt_pix, gt_pts, [True, True, False])]
    tracks = [_tr(0, gt_pix + [[3, 4], [0, 1], [99, 99]], gt_pts + [[0, 0, 1], [0, 0, 3], [9, 9, 9]],
                  [True, True, True])]
    rep = evaluate_metrics(tracks, truth, images=[(np.ones((12, 12)), np.ones((12, 12)))], wall_time=1.5)
    assert rep.epe_2d == pytest.approx(3.0)
    assert rep.epe_3d == pytest.approx(2.0)
    assert rep.n_points == 2
    assert rep.delta_px[4] == 50.0 and rep.delta_mm[2] == 50.0
    assert rep.psnr == 99.0 and rep.wall_time == 1.5


def test_invalid_predictions_count_as_misses(rng):
    pix = rng.uniform(0, 50, (2, 2))
    pts = rng.uniform(0, 50, (2, 3))
    e2, _ = track_errors([_tr(0, pix, pts, [True, False])], [_tr(0, pix, pts, [True, True])])
    assert e2[0] == 0 and np.isnan(e2[1])
    assert delta_accuracy(e2, [4])[4] == 50.0


def test_id_mismatch():
    a = _tr(0, np.zeros((1, 2)), np.zeros((1, 3)), [True])
    b = _tr(1, np.zeros((1, 2)), np.zeros((1, 3)), [True])
    with pytest.raises(KeyError):
        evaluate_metrics([a], [b])
