"""Analytic deforming-surface stereo scenes with exact ground truth.

The surface is a textured height field attached to material coordinates
``(a, b)``::

    X = a + sx(t),  Y = b + sy(t),  Z = z0 + h(a, b, t)

where ``sx, sy`` are rigid in-plane drifts and ``h`` is a Gaussian bump whose
height oscillates in time. Images are rasterised by intersecting every pixel
ray with the surface (Newton iteration on the ray parameter); since slopes
are bounded below the grazing limit, that intersection is unique and the
surface never occludes itself. Flows, stereo disparities and 3D tracks are
evaluated from the same closed-form surface, never from the renderer under
test.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data_io import CorrespondenceRecord, SceneBundle
from .geometry import CameraIntrinsics, CameraPose, CameraSet, WorkspaceBox, pixel_to_ray, project_points_masked


class UnsupportedScene(ValueError):
    pass


@dataclass
class SyntheticSpec:
    width: int = 64
    height: int = 64
    n_frames: int = 24
    focal: float = 64.0
    baseline: float = 5.0  # mm, right camera offset along +x
    z0: float = 50.0  # mm, rest depth of the surface
    drift: tuple = (0.15, 0.0)  # mm / frame rigid drift (vx, vy)
    wobble: float = 0.0  # mm amplitude of sinusoidal x drift
    bump_amplitude: float = 3.0  # mm
    bump_centre: tuple = (4.0, -3.0)  # material coords, mm
    bump_width: float = 7.0  # mm
    period: float = 16.0  # frames
    camera_velocity: tuple = (0.0, 0.0, 0.0)  # mm / frame, left-camera centre drift
    texture_waves: int = 6
    wavelength: tuple = (10.0, 24.0)  # mm, range for texture components
    pair_offsets: tuple = (-8, -6, -4, -2, 2, 4, 6, 8)
    box_padding: float = 0.35
    tool_box: tuple | None = None  # (u0, v0, u1, v1) image-space tool rectangle
    fps: float = 25.0

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticTruth:
    spec: SyntheticSpec
    texture: dict = field(default_factory=dict)
    cameras: CameraSet | None = None

    # closed-form surface ----------------------------------------------------
    def drift(self, t):
        s = self.spec
        t = np.asarray(t, float)
        sx = s.drift[0] * t + s.wobble * np.sin(2 * np.pi * t / s.period)
        sy = s.drift[1] * t
        return sx, sy

    def height(self, a, b, t):
        s = self.spec
        g = np.exp(-((a - s.bump_centre[0]) ** 2 + (b - s.bump_centre[1]) ** 2) / (2 * s.bump_width**2))
        amp = s.bump_amplitude * np.sin(2 * np.pi * np.asarray(t, float) / s.period)
        return amp * g

    def height_grad(self, a, b, t):
        s = self.spec
        h = self.height(a, b, t)
        return -h * (a - s.bump_centre[0]) / s.bump_width**2, -h * (b - s.bump_centre[1]) / s.bump_width**2

    def position(self, ab, t):
        """Workspace position (mm) of material points ``ab`` (N, 2) at frame(s) ``t``."""
        a, b = ab[:, 0], ab[:, 1]
        sx, sy = self.drift(t)
        return np.stack([a + sx, b + sy, self.spec.z0 + self.height(a, b, t)], axis=1)

    def colour(self, ab):
        a, b = ab[:, 0], ab[:, 1]
        tex = self.texture
        phase = a[:, None] * tex["kx"][None] + b[:, None] * tex["ky"][None] + tex["phi"][None]
        out = 0.5 + np.sin(phase) @ tex["amp"]
        return np.clip(out, 0.0, 1.0)

    def intersect(self, origin, direction, t, iters=60):
        """Material coordinates and ray distance of the first surface hit."""
        t = np.broadcast_to(np.asarray(t, float), origin.shape[:1])
        sx, sy = self.drift(t)
        s = (self.spec.z0 - origin[:, 2]) / direction[:, 2]
        for _ in range(iters):
            p = origin + s[:, None] * direction
            a, b = p[:, 0] - sx, p[:, 1] - sy
            g = p[:, 2] - self.spec.z0 - self.height(a, b, t)
            ha, hb = self.height_grad(a, b, t)
            dg = direction[:, 2] - ha * direction[:, 0] - hb * direction[:, 1]
            step = g / dg
            s = s - step
            if np.max(np.abs(step)) < 1e-13:
                break
        p = origin + s[:, None] * direction
        a, b = p[:, 0] - sx, p[:, 1] - sy
        resid = np.abs(p[:, 2] - self.spec.z0 - self.height(a, b, t))
        if resid.max() > 1e-9:
            raise UnsupportedScene("ray/surface intersection did not converge")
        return np.stack([a, b], axis=1), s

    def material_at(self, pixels, t, eye="left"):
        Ks, Ms = self.cameras.eye(eye)
        ray = pixel_to_ray(pixels, Ks[t], Ms[t])
        ab, _ = self.intersect(ray.origin, ray.direction, t)
        return ab

    def project(self, P, t, eye="left"):
        Ks, Ms = self.cameras.eye(eye)
        return project_points_masked(P, Ks[t], Ms[t])

    def visible(self, P, t, eye="left"):
        """True where ``P`` is the first surface hit along its camera ray and inside the image."""
        Ks, Ms = self.cameras.eye(eye)
        K, M = Ks[t], Ms[t]
        uv, ahead = project_points_masked(P, K, M)
        inside = ahead & (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
        d = P - M.centre
        dist = np.linalg.norm(d, axis=1)
        _, s = self.intersect(np.broadcast_to(M.centre, P.shape).copy(), d / dist[:, None], t)
        return inside, np.abs(s - dist) < 1e-6

    def tracks(self, pixels, t_start, times, eye="left"):
        """Ground-truth 2D (left image of each target time) and 3D tracks.

        Returns pixels (Q, T, 2), points (Q, T, 3) and visibility (Q, T).
        """
        ab = self.material_at(np.asarray(pixels, float), t_start, eye)
        Q, T = len(ab), len(times)
        pix = np.empty((Q, T, 2))
        pts = np.empty((Q, T, 3))
        vis = np.empty((Q, T), bool)
        for i, t in enumerate(times):
            P = self.position(ab, t)
            uv, _ = self.project(P, t)
            inside, unoccluded = self.visible(P, t)
            pix[:, i], pts[:, i], vis[:, i] = uv, P, inside & unoccluded
        return pix, pts, vis


def _check_spec(spec, cams):
    s = spec
    if s.n_frames < 2 or s.width < 4 or s.height < 4:
        raise UnsupportedScene("scene too small")
    # largest |dz/dx| of the surface against the steepest viewing ray
    max_slope = abs(s.bump_amplitude) * np.exp(-0.5) / s.bump_width
    half_fov = np.hypot(s.width, s.height) / (2 * s.focal)
    lateral = (s.baseline + np.linalg.norm(s.camera_velocity) * s.n_frames) / max(s.z0, 1e-9)
    if max_slope * (half_fov + lateral) >= 0.5:
        raise UnsupportedScene(
            f"surface slope {max_slope:.3f} too steep for the field of view: self-occlusion not supported"
        )


def make_cameras(spec):
    K = CameraIntrinsics(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2,
                         spec.width, spec.height)
    left, right = [], []
    v = np.asarray(spec.camera_velocity, float)
    for t in range(spec.n_frames):
        c = v * t
        left.append(CameraPose(np.eye(3), -c))
        right.append(CameraPose(np.eye(3), -(c + np.array([spec.baseline, 0.0, 0.0]))))
    return CameraSet((K,) * spec.n_frames, tuple(left), (K,) * spec.n_frames, tuple(right))


def _texture(spec, rng):
    n = spec.texture_waves
    wl = rng.uniform(*spec.wavelength, size=n)
    ang = rng.uniform(0, np.pi, size=n)
    k = 2 * np.pi / wl
    amp = rng.uniform(-1, 1, size=(n, 3))
    amp *= 0.42 / np.abs(amp).sum(axis=0, keepdims=True)
    return {"kx": k * np.cos(ang), "ky": k * np.sin(ang), "phi": rng.uniform(0, 2 * np.pi, n), "amp": amp}


def generate_synthetic_scene(spec=None, seed=0):
    """Deterministic (bundle, truth) pair for ``spec`` and ``seed``."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    cams = make_cameras(spec)
    _check_spec(spec, cams)
    truth = SyntheticTruth(spec, _texture(spec, rng), cams)
    n, H, W = spec.n_frames, spec.height, spec.width
    jj, ii = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    grid = np.stack([jj.ravel(), ii.ravel()], axis=1)

    left = np.empty((n, H, W, 3), np.uint8)
    right = np.empty((n, H, W, 3), np.uint8)
    stereo = np.empty((n, H, W, 2))
    ab_left = []
    seen = []
    for t in range(n):
        for eye, store in (("left", left), ("right", right)):
            ab = truth.material_at(grid, t, eye)
            store[t] = np.round(truth.colour(ab) * 255).reshape(H, W, 3).astype(np.uint8)
            seen.append(truth.position(ab, t))
            if eye == "left":
                ab_left.append(ab)
                P = truth.position(ab, t)
                uv_r, _ = truth.project(P, t, "right")
                stereo[t] = (uv_r - grid).reshape(H, W, 2)

    corr = {}
    for t1 in range(n):
        for k in spec.pair_offsets:
            t2 = t1 + k
            if not 0 <= t2 < n:
                continue
            P2 = truth.position(ab_left[t1], t2)
            uv, _ = truth.project(P2, t2)
            inside, unoccluded = truth.visible(P2, t2)
            cm = np.where(inside, np.where(unoccluded, 1, 2), 0).astype(np.uint8)
            corr[(t1, t2)] = CorrespondenceRecord(t1, t2, (uv - grid).reshape(H, W, 2), cm.reshape(H, W))

    P = np.concatenate(seen)
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = hi - lo
    span[2] = max(span[2], 0.25 * max(span[0], span[1]))
    mid = 0.5 * (lo + hi)
    half = 0.5 * span * (1 + 2 * spec.box_padding)
    box = WorkspaceBox(mid - half, mid + half)

    masks = None
    if spec.tool_box is not None:
        u0, v0, u1, v1 = spec.tool_box
        masks = np.zeros((n, H, W), bool)
        masks[:, int(v0) : int(v1), int(u0) : int(u1)] = True

    bundle = SceneBundle(left, right, cams, corr, stereo, box, spec.fps, masks)
    if cams.is_static():
        bundle.notes.append("static camera: all frames share the same extrinsics")
    return bundle, truth


def bundled_scene_spec():
    """The 64x64, 24-frame deforming-plane stereo scene used for end-to-end checks."""
    return SyntheticSpec()
