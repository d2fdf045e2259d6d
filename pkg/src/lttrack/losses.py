"""Joint objective over image plane, workspace and canonical space.

All terms are batch means so that their scale does not depend on how many
pixels are drawn per step. Masked entries contribute zero but still count in
the denominator, which keeps gating exact: editing a masked prediction never
changes a loss value.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

KL_FLOOR = 1e-8
NON_RELIABLE, RELIABLE, OCCLUDED = 0, 1, 2
TERMS = ("rgb", "flow", "gt", "smooth", "cr", "xc")


class EmptyBatchWarning(UserWarning):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class LossWeights:
    rgb: float = 1.0
    flow: float = 1.0
    gt: float = 1.0
    smooth: float = 0.1
    cr: float = 1.0
    xc: float = 1.0
    sigma_std: float | None = None  # mm; None -> 2x the inter-sample spacing

    def __post_init__(self):
        for k in TERMS:
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)  # name -> float
    weighted: dict = field(default_factory=dict)
    total: float = 0.0
    flags: tuple = ()


def _check_cm(cm):
    cm = np.asarray(cm)
    if not np.isin(cm, (NON_RELIABLE, RELIABLE, OCCLUDED)).all():
        raise ValueError("consistency mask values must be 0, 1 or 2")
    return cm


def _zero():
    return ad.Var(np.array(0.0))


def rgb_loss(c1, c1_hat, c2=None, c2_hat=None, mask1=None, mask2=None):
    """Mean squared colour error, summed over both ends of each pair.

    Optional masks drop entries (tool pixels, matches outside the image).
    """
    e1 = ad.sum_(ad.square(c1_hat - c1), axis=-1)
    loss = ad.mean(e1 if mask1 is None else e1 * np.asarray(mask1, float))
    if c2 is not None:
        e2 = ad.sum_(ad.square(c2_hat - c2), axis=-1)
        loss = loss + ad.mean(e2 if mask2 is None else e2 * np.asarray(mask2, float))
    return loss


def flow_loss(p12, p12_hat, p21, p21_hat, cm, scale=1.0):
    """Forward term gated by cm in {1, 2}; backward term gated by cm == 1.

    Pixel errors are divided by ``scale``. Training passes the square root of the
    image diagonal, so the loss is squared pixels per diagonal pixel.
    """
    cm = _check_cm(cm)
    fwd = np.isin(cm, (RELIABLE, OCCLUDED)).astype(float)
    bwd = (cm == RELIABLE).astype(float)
    e12 = ad.sum_(ad.square((p12_hat - p12) * (1.0 / scale)), axis=-1)
    e21 = ad.sum_(ad.square((p21_hat - p21) * (1.0 / scale)), axis=-1)
    return ad.mean(e12 * fwd) + ad.mean(e21 * bwd)


def loss_2d(batch, pred, weights=None, scale=1.0):
    """(L_RGB, L_flow) for an aligned batch of pair correspondences.

    ``batch`` holds c1, c2, p1, p2 and cm; ``pred`` holds c1_hat, c2_hat,
    p12_hat (p1 carried to t2) and p21_hat (p2 carried to t1).
    """
    if len(batch["cm"]) == 0:
        warnings.warn("empty batch; 2D losses are zero", EmptyBatchWarning)
        return _zero(), _zero()
    l_rgb = rgb_loss(batch["c1"], pred["c1_hat"], batch["c2"], pred["c2_hat"],
                     batch.get("rgb_mask1"), batch.get("rgb_mask2"))
    l_flow = flow_loss(batch["p2"], pred["p12_hat"], batch["p1"], pred["p21_hat"], batch["cm"], scale)
    return l_rgb, l_flow


def gaussian_target(depths, target_dist, sigma_std):
    """Target rendering weights: sum-normalised Gaussian around the target depth.

    ``depths`` (R, n) are sample distances from the ray origin and
    ``target_dist`` (R,) the distance of the triangulated point. ``sigma_std``
    is a scalar or a per-ray (R,) array.
    """
    sigma_std = np.asarray(sigma_std, float)
    if sigma_std.ndim == 1:
        sigma_std = sigma_std[:, None]
    d = (target_dist[:, None] - depths) / sigma_std
    s = np.exp(-0.5 * d * d)
    total = s.sum(axis=1, keepdims=True)
    return s / np.where(total > 0, total, 1.0)


def kl_target_loss(w_target, weights, valid):
    """Mean over valid rays of KL(w_target || w_hat), w_hat = w / (sum w + eps)."""
    valid = np.asarray(valid, bool)
    if not valid.any():
        warnings.warn("no valid triangulated targets; L_GT is zero", EmptyBatchWarning)
        return _zero()
    w_t = np.where(valid[:, None], w_target, 0.0)
    w_hat = weights / ad.reshape(ad.sum_(weights, axis=1) + KL_FLOOR, (-1, 1))
    log_t = np.log(np.maximum(w_t, KL_FLOOR))
    kl = ad.sum_(w_t * (log_t - ad.log(ad.clamp_min(w_hat, KL_FLOOR))), axis=1)
    return ad.sum_(kl) * (1.0 / valid.sum())


def smooth_loss(p_prev, p_now, p_next, valid=None):
    """Mean norm of the second temporal difference of 3D tracks."""
    acc = (p_next - p_now) - (p_now - p_prev)
    mag = ad.norm(acc, axis=-1)
    n = len(ad.value_of(mag))
    if n == 0:
        return _zero()
    if valid is not None:
        mag = mag * np.asarray(valid, float)
    return ad.sum_(mag) * (1.0 / n)


def loss_3d(depths, target_dist, target_valid, weights, sigma_std, p_prev=None, p_now=None, p_next=None,
            smooth_valid=None):
    """(L_GT, L_smooth)."""
    w_target = gaussian_target(depths, np.nan_to_num(target_dist), sigma_std)
    l_gt = kl_target_loss(w_target, weights, target_valid)
    l_smooth = _zero() if p_now is None else smooth_loss(p_prev, p_now, p_next, smooth_valid)
    return l_gt, l_smooth


def sphere_loss(canonical, source):
    """Squared pull back to the source position for canonical points outside the sphere."""
    out = np.linalg.norm(2.0 * ad.value_of(canonical) - 1.0, axis=-1) > 1.0
    d = ad.sum_(ad.square(canonical - source), axis=-1)
    return ad.mean(d * out.astype(float))


def cross_consistency_loss(c1, c2, cm):
    cm = _check_cm(cm)
    d = ad.sum_(ad.square(c1 - c2), axis=-1)
    return ad.mean(d * (cm == RELIABLE).astype(float))


def loss_canonical(canonical, source, c1=None, c2=None, cm=None):
    """(L_CR, L_XC)."""
    l_cr = sphere_loss(canonical, source)
    l_xc = _zero() if c1 is None else cross_consistency_loss(c1, c2, cm)
    return l_cr, l_xc


def loss_total(terms, weights):
    """Weighted sum of named terms; raises :class:`NonFiniteLoss` naming a bad term."""
    total = None
    report = LossReport()
    for name in TERMS:
        if name not in terms:
            continue
        term = terms[name]
        val = float(ad.value_of(term))
        if not np.isfinite(val):
            raise NonFiniteLoss(f"loss term {name!r} is not finite ({val})")
        lam = getattr(weights, name)
        report.terms[name] = val
        report.weighted[name] = lam * val
        if lam == 0:
            continue
        piece = term * lam if isinstance(term, ad.Var) else ad.Var(np.asarray(lam * val))
        total = piece if total is None else total + piece
    if total is None:
        total = _zero()
    report.total = float(ad.value_of(total))
    return total, report
