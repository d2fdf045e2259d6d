"""Pinhole cameras, rays, stereo triangulation and workspace contraction.

Conventions
-----------
* Pixel coordinates are continuous ``(u, v)`` with integer values at pixel
  centres; ``u`` runs along image columns and ``v`` along rows.
* A :class:`CameraPose` maps workspace coordinates to camera coordinates,
  ``X_cam = R @ X + t``. The camera looks down its +z axis.
* Workspace units are millimetres.

Every function accepts either single vectors or stacked batches along the
leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PARALLEL_EPS = 1e-9


class InvalidProjection(ValueError):
    """Raised when a point does not lie in front of the camera."""


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _finite(r, t)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def centre(self):
        """Camera centre in workspace coordinates."""
        return -self.rotation.T @ self.translation

    def __eq__(self, other):
        return (
            isinstance(other, CameraPose)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def to_dict(self):
        return {"R": self.rotation.ravel().tolist(), "t": self.translation.tolist()}


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True, eq=False)
class WorkspaceBox:
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.aabb_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.aabb_max, dtype=np.float64).reshape(3)
        _finite(lo, hi)
        if not np.all(lo < hi):
            raise ValueError("degenerate workspace box: aabb_min must be < aabb_max")
        object.__setattr__(self, "aabb_min", lo)
        object.__setattr__(self, "aabb_max", hi)

    @property
    def size(self):
        return self.aabb_max - self.aabb_min

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.size))

    def __eq__(self, other):
        return (
            isinstance(other, WorkspaceBox)
            and np.array_equal(self.aabb_min, other.aabb_min)
            and np.array_equal(self.aabb_max, other.aabb_max)
        )


def pixel_to_ray(p, K, M):
    """Back-project pixel(s) ``p`` into unit-direction rays from the camera centre."""
    p = np.asarray(p, dtype=np.float64)
    _finite(p)
    x = (p[..., 0] - K.cx) / K.fx
    y = (p[..., 1] - K.cy) / K.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d = d_cam @ M.rotation  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origin = np.broadcast_to(M.centre, d.shape).copy()
    return Ray(origin, d)


def to_camera(P, M):
    return np.asarray(P, dtype=np.float64) @ M.rotation.T + M.translation


def project_point(P, K, M):
    """Perspective projection; raises :class:`InvalidProjection` for depth <= 0."""
    P = np.asarray(P, dtype=np.float64)
    _finite(P)
    Xc = to_camera(P, M)
    z = Xc[..., 2]
    if np.any(z <= 0):
        raise InvalidProjection("point at or behind the camera plane")
    return np.stack([K.fx * Xc[..., 0] / z + K.cx, K.fy * Xc[..., 1] / z + K.cy], axis=-1)


def project_points_masked(P, K, M):
    """Batch projection that flags points behind the camera instead of raising."""
    Xc = to_camera(P, M)
    z = Xc[..., 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * Xc[..., 0] / zs + K.cx, K.fy * Xc[..., 1] / zs + K.cy], axis=-1)
    return uv, ok


def project_var(P, intrinsics, rotation, translation):
    """Differentiable projection of an (N, 3) :class:`~lttrack.autodiff.Var`.

    ``intrinsics`` is a :class:`CameraIntrinsics` or an (N, 4) array of
    per-point ``fx, fy, cx, cy``; ``rotation``/``translation`` may likewise be
    per-point stacks (N, 3, 3) / (N, 3). Depth is floored at 1e-6 so gradients
    stay finite; callers flag such points separately.
    """
    rotation = np.asarray(rotation)
    if rotation.ndim == 2:
        Xc = ad.matmul(P, rotation.T) + translation
    else:
        rt = np.swapaxes(rotation, -1, -2)
        Xc = ad.sum_(ad.reshape(P, (-1, 3, 1)) * rt, axis=1) + translation
    if isinstance(intrinsics, CameraIntrinsics):
        fx, fy, cx, cy = intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy
    else:
        fx, fy, cx, cy = np.asarray(intrinsics, float).T
    z = ad.clamp_min(Xc[:, 2], 1e-6)
    u = Xc[:, 0] / z * fx + cx
    v = Xc[:, 1] / z * fy + cy
    return ad.stack([u, v], axis=-1)


@dataclass(frozen=True)
class CameraSet:
    """Per-frame intrinsics and poses for the left and right eyes."""

    K_left: tuple
    M_left: tuple
    K_right: tuple
    M_right: tuple

    @property
    def n_frames(self):
        return len(self.M_left)

    def eye(self, name):
        if name == "left":
            return self.K_left, self.M_left
        if name == "right":
            return self.K_right, self.M_right
        raise ValueError(f"unknown eye {name!r}")

    def is_static(self):
        return all(M == self.M_left[0] for M in self.M_left) and all(M == self.M_right[0] for M in self.M_right)

    def rays(self, pixels, t, eye="left"):
        """Rays for pixels (N, 2) observed at per-pixel frames ``t`` (N,)."""
        Ks, Ms = self.eye(eye)
        pixels = np.asarray(pixels, float)
        t = np.broadcast_to(np.asarray(t, np.int64), (len(pixels),))
        origins = np.empty((len(pixels), 3))
        dirs = np.empty((len(pixels), 3))
        for tt in np.unique(t):
            sel = t == tt
            r = pixel_to_ray(pixels[sel], Ks[tt], Ms[tt])
            origins[sel], dirs[sel] = r.origin, r.direction
        return Ray(origins, dirs)

    def stacked(self, t, eye="left"):
        """Per-point (N, 4) intrinsics, (N, 3, 3) rotations and (N, 3) translations."""
        Ks, Ms = self.eye(eye)
        t = np.asarray(t, np.int64)
        intr = np.array([[K.fx, K.fy, K.cx, K.cy] for K in Ks])[t]
        R = np.stack([M.rotation for M in Ms])[t]
        tr = np.stack([M.translation for M in Ms])[t]
        return intr, R, tr


def triangulate_stereo(ray_l, ray_r, return_gamma=False):
    """Closest point on the left ray to the right ray.

    Solves ``oL + a dL = oR + b dR + g n`` with ``n`` the unit common normal
    and returns ``oL + a dL`` with a validity flag (False for parallel rays).
    """
    oL, dL = np.asarray(ray_l.origin, float), np.asarray(ray_l.direction, float)
    oR, dR = np.asarray(ray_r.origin, float), np.asarray(ray_r.direction, float)
    c = np.cross(dL, dR)
    cn = np.linalg.norm(c, axis=-1)
    valid = cn >= PARALLEL_EPS
    n = c / np.where(valid, cn, 1.0)[..., None]
    # columns [dL, -dR, -n] · [a, b, g] = oR - oL
    A = np.stack([dL, -dR, -n], axis=-1)
    rhs = oR - oL
    A_safe = np.where(valid[..., None, None], A, np.eye(3))
    sol = np.linalg.solve(A_safe, rhs[..., None])[..., 0]
    alpha, gamma = sol[..., 0], sol[..., 2]
    P = oL + alpha[..., None] * dL
    P = np.where(valid[..., None], P, np.nan)
    if return_gamma:
        return P, valid, np.where(valid, gamma, np.nan), n
    return P, valid


def contract(P, box):
    """Affine map of the workspace box onto the unit cube."""
    return (P - box.aabb_min) / box.size


def expand(U, box):
    """Exact inverse of :func:`contract`."""
    return U * box.size + box.aabb_min


def ray_box_interval(origin, direction, box):
    """Slab-method entry/exit distances; ``valid`` is False when the ray misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (box.aabb_min - origin) * inv
        t1 = (box.aabb_max - origin) * inv
    lo = np.nanmax(np.minimum(t0, t1), axis=-1)
    hi = np.nanmin(np.maximum(t0, t1), axis=-1)
    lo = np.maximum(lo, 0.0)
    valid = hi > lo
    return lo, hi, valid
