"""Fixed ray sampling, volume-rendering weights, pixel rendering and long-term tracking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fields import evaluate_field
from .geometry import contract, pixel_to_ray, project_var, ray_box_interval, to_camera

EPS_OPACITY = 1e-3
N_SAMPLES = 32


@dataclass
class RaySamples:
    depths: np.ndarray  # (R, n) distance along each ray, mm
    points: np.ndarray  # (R, n, 3) workspace positions
    unit: np.ndarray  # (R, n, 3) contracted positions
    deltas: np.ndarray  # (R, n) interval lengths
    near: np.ndarray
    far: np.ndarray
    valid: np.ndarray  # (R,) False where the ray misses the box


@dataclass
class RenderOutput:
    colour: ad.Var  # (R, 3)
    point: ad.Var  # (R, 3) weight-normalised position
    opacity: ad.Var  # (R,)
    weights: ad.Var  # (R, n)
    samples: RaySamples
    valid: np.ndarray


@dataclass
class TrackEstimate:
    pixel: np.ndarray  # p_hat at t2
    point_t1: np.ndarray  # rendered point at t1 (mm)
    point_t2: np.ndarray  # that point carried to t2 (mm)
    canonical: np.ndarray  # unit-cube canonical position
    valid: np.ndarray


def sample_ray(ray, near, far, n=N_SAMPLES, rng=None):
    """Evenly spaced depths at interval midpoints; stratified jitter when ``rng`` is given."""
    near = np.asarray(near, float)
    far = np.asarray(far, float)
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if np.any(near <= 0) or np.any(far <= near):
        raise ValueError("require 0 < near < far")
    delta = (far - near) / n
    offs = np.full(near.shape + (n,), 0.5)
    if rng is not None:
        offs = rng.uniform(0.0, 1.0, size=offs.shape)
    depths = near[..., None] + (np.arange(n) + offs) * delta[..., None]
    points = ray.origin[..., None, :] + depths[..., None] * ray.direction[..., None, :]
    deltas = np.broadcast_to(delta[..., None], depths.shape).copy()
    return depths, points, deltas


def sample_rays_in_box(ray, box, n=N_SAMPLES, rng=None):
    """Per-ray near/far from the workspace box, then :func:`sample_ray`."""
    near, far, valid = ray_box_interval(ray.origin, ray.direction, box)
    near = np.where(valid, np.maximum(near, 1e-6), 1.0)
    far = np.where(valid, far, 2.0)
    depths, points, deltas = sample_ray(ray, near, far, n, rng)
    return RaySamples(depths, points, contract(points, box), deltas, near, far, valid)


def render_weights(sigma, delta):
    """w_i = T_i (1 - exp(-sigma_i delta_i)); returns (weights, final transmittance)."""
    od = sigma * delta
    cum = ad.cumsum(od, axis=-1)
    trans = ad.exp(-(cum - od))
    weights = trans * (1.0 - ad.exp(-od))
    final = np.exp(-ad.value_of(cum)[..., -1])
    return weights, final


def render_samples(model, samples, t):
    """Render rays given their samples and per-ray frame index ``t``."""
    R, n = samples.depths.shape
    t = np.broadcast_to(np.asarray(t), (R,))
    u = samples.unit.reshape(-1, 3)
    tn = np.repeat(model.t_norm(t), n)
    colour, sigma = evaluate_field(model.fields, u, tn)
    sigma = ad.reshape(sigma, (R, n))
    colour = ad.reshape(colour, (R, n, 3))
    w, _ = render_weights(sigma, samples.deltas)
    opacity = ad.sum_(w, axis=1)
    c_hat = ad.sum_(ad.reshape(w, (R, n, 1)) * colour, axis=1)
    wp = ad.sum_(ad.reshape(w, (R, n, 1)) * samples.points, axis=1)
    p_hat = wp / ad.reshape(opacity + 1e-12, (R, 1))
    valid = samples.valid & (ad.value_of(opacity) >= EPS_OPACITY)
    return RenderOutput(c_hat, p_hat, opacity, w, samples, valid)


def render_rays(model, ray, t, n=N_SAMPLES, rng=None):
    return render_samples(model, sample_rays_in_box(ray, model.box, n, rng), t)


def render_pixel(model, pixels, t, cams, eye="left", n=N_SAMPLES, rng=None):
    ray = cams.rays(np.atleast_2d(pixels), t, eye)
    return render_rays(model, ray, t, n, rng)


def carry(model, point, t1, t2):
    """Move rendered workspace points from frame t1 to t2 through canonical space.

    Returns (canonical unit-cube point, carried unit-cube point, carried mm point).
    """
    u = ad.div(point - model.box.aabb_min, model.box.size)
    canon = model.deform.forward(u, t1)
    u2 = model.deform.inverse(canon, t2)
    return canon, u2, u2 * model.box.size + model.box.aabb_min


def project_at(points, t, cams, eye="left"):
    intr, R, tr = cams.stacked(np.broadcast_to(np.asarray(t), (len(points),)), eye)
    return project_var(points, intr, R, tr)


def in_front(points, t, cams, eye="left"):
    _, R, tr = cams.stacked(np.broadcast_to(np.asarray(t), (len(points),)), eye)
    z = np.einsum("nij,nj->ni", R, ad.value_of(points))[:, 2] + tr[:, 2]
    return z > 0


def f_LT(model, pixels, t1, t2, cams, n=N_SAMPLES, chunk=2048):
    """Long-term correspondence of pixels observed in left frame ``t1`` at frame ``t2``.

    Pipeline: ray -> samples -> field -> render -> contract -> canonical ->
    deformed at t2 -> expand -> project with the left camera of t2.
    """
    pixels = np.atleast_2d(np.asarray(pixels, float))
    N = len(pixels)
    t1 = np.broadcast_to(np.asarray(t1, np.int64), (N,))
    t2 = np.broadcast_to(np.asarray(t2, np.int64), (N,))
    out = TrackEstimate(
        np.full((N, 2), np.nan), np.full((N, 3), np.nan), np.full((N, 3), np.nan),
        np.full((N, 3), np.nan), np.zeros(N, bool),
    )
    for s in range(0, N, chunk):
        sl = slice(s, s + chunk)
        r = render_pixel(model, pixels[sl], t1[sl], cams, n=n)
        canon, _, p2 = carry(model, r.point, t1[sl], t2[sl])
        ok = r.valid & in_front(p2, t2[sl], cams)
        uv = project_at(p2, t2[sl], cams)
        out.pixel[sl] = ad.value_of(uv)
        out.point_t1[sl] = ad.value_of(r.point)
        out.point_t2[sl] = ad.value_of(p2)
        out.canonical[sl] = ad.value_of(canon)
        out.valid[sl] = ok
    return out


def render_view(model, t, K, M, resolution=None, n=N_SAMPLES, chunk=4096):
    """Render an image and a z-depth map (camera frame, mm) for one camera.

    ``resolution`` (W, H) resamples the image plane; pixel centres of the
    coarser grid are mapped back onto the native pixel grid.
    """
    W, H = resolution or (K.width, K.height)
    sx, sy = K.width / W, K.height / H
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    pix = np.stack([(jj + 0.5) * sx - 0.5, (ii + 0.5) * sy - 0.5], axis=-1).reshape(-1, 2)
    image = np.zeros((H * W, 3))
    depth = np.full(H * W, np.nan)
    valid = np.zeros(H * W, bool)
    for s in range(0, len(pix), chunk):
        ray = pixel_to_ray(pix[s : s + chunk], K, M)
        r = render_rays(model, ray, t, n)
        image[s : s + chunk] = ad.value_of(r.colour)
        d = to_camera(ad.value_of(r.point), M)[:, 2]
        depth[s : s + chunk] = np.where(r.valid, d, np.nan)
        valid[s : s + chunk] = r.valid
    return image.reshape(H, W, 3), depth.reshape(H, W), valid.reshape(H, W)
