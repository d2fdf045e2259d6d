"""Error-guided pixel and frame-pair sampling with a multi-scale error map.

The map keeps one error value per (frame, pair slot, cell). Slots enumerate
the pair index ``k`` in ``[-m, m] \\ {0}``; the frame offset of slot ``k`` is
``k * gap``. Cells are ``sz`` pixels wide at the current scale ``s``, i.e.
``sz / s`` full-resolution pixels, so upscaling refines the grid while pixel
coordinates stay in the full-resolution frame.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage


@dataclass
class SamplerSchedule:
    upscale_patience: int = 2
    upscale_tol: float = 0.01
    start_scale: float = 0.25
    lr_patience: int = 3
    lr_factor: float = 0.5
    lr_tol: float = 0.01
    stop_patience: int = 6
    stop_tol: float = 0.001

    def __post_init__(self):
        if min(self.upscale_patience, self.lr_patience, self.stop_patience) < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("lr_factor must be in (0, 1]")
        if not 0 < self.start_scale <= 1:
            raise ValueError("start_scale must be in (0, 1]")

    def to_dict(self):
        return asdict(self)


class Plateau:
    """Relative-improvement plateau detector (the rule behind all three schedulers)."""

    def __init__(self, patience, tol):
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.bad = 0

    def update(self, value):
        """Record ``value``; True once ``patience`` consecutive values fail to improve."""
        if value < self.best * (1.0 - self.tol):
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    def reset(self, best=math.inf):
        self.best = best
        self.bad = 0

    def state(self):
        return [self.best, self.bad]

    def load(self, state):
        self.best, self.bad = float(state[0]), int(state[1])


def slot_of(k, m):
    if k == 0 or abs(k) > m:
        raise ValueError(f"pair index {k} outside [-{m}, {m}] \\ {{0}}")
    return k + m if k < 0 else k + m - 1


def k_of(slot, m):
    if not 0 <= slot < 2 * m:
        raise ValueError(f"slot {slot} outside [0, {2 * m})")
    return slot - m if slot < m else slot - m + 1


class ErrorMap:
    def __init__(self, n, m, H, W, sz, scale, gap=1):
        self.n, self.m, self.H, self.W, self.sz, self.gap = n, m, H, W, sz, gap
        self.scale = float(scale)
        gh, gw = self.grid_shape(self.scale)
        self.values = np.zeros((n, 2 * m, gh, gw))
        self.e_total = math.inf
        self.plateau = None
        # slots whose pair exists in the correspondence set
        self.available = np.zeros((n, 2 * m), bool)
        for t in range(n):
            for s in range(2 * m):
                self.available[t, s] = 0 <= t + self.offset(s) < n

    def grid_shape(self, scale):
        # partial border cells are kept; a tiny image still gets one cell
        h, w = scale * self.H / self.sz, scale * self.W / self.sz
        return max(1, math.ceil(h - 1e-9)), max(1, math.ceil(w - 1e-9))

    @property
    def shape(self):
        return self.values.shape

    @property
    def cell_px(self):
        """Cell edge length in full-resolution pixels."""
        return self.sz / self.scale

    def offset(self, slot):
        return k_of(slot, self.m) * self.gap

    def target(self, t, slot):
        return t + self.offset(slot)

    def cell_bounds(self, i, j):
        """Full-resolution pixel extent [u0, u1] x [v0, v1] of cell (row i, col j)."""
        c = self.cell_px
        u0, v0 = j * c, i * c
        return u0, min(u0 + c, self.W - 1), v0, min(v0 + c, self.H - 1)

    def random_points(self, rng, rows=None, cols=None):
        """One uniform point inside each given cell (default: every cell)."""
        gh, gw = self.values.shape[2:]
        if rows is None:
            rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
            rows, cols = rows.ravel(), cols.ravel()
        c = self.cell_px
        u0, v0 = cols * c, rows * c
        u1 = np.minimum(u0 + c, self.W - 1)
        v1 = np.minimum(v0 + c, self.H - 1)
        u = u0 + rng.uniform(size=len(rows)) * np.maximum(u1 - u0, 0)
        v = v0 + rng.uniform(size=len(rows)) * np.maximum(v1 - v0, 0)
        return np.stack([u, v], axis=1), rows, cols

    def mean_error(self):
        vals = self.values[self.available]
        return float(vals.mean()) if vals.size else 0.0

    def pair_errors(self):
        """Mean cell error per (t, slot); zero for unavailable pairs."""
        return np.where(self.available, self.values.mean(axis=(2, 3)), 0.0)

    def to_state(self):
        return {
            "values": self.values.copy(),
            "meta": np.array([self.n, self.m, self.H, self.W, self.sz, self.scale, self.gap, self.e_total]),
        }

    @classmethod
    def from_state(cls, state):
        n, m, H, W, sz, scale, gap, e_total = state["meta"]
        em = cls(int(n), int(m), int(H), int(W), int(sz), float(scale), int(gap))
        em.values = np.array(state["values"])
        em.e_total = float(e_total)
        return em


def init_error_map(n, m, H, W, sz, s0, gap=1):
    """Zero-filled map at scale ``s0`` with ``e_total = inf``."""
    return ErrorMap(n, m, H, W, sz, s0, gap)


def write_errors(emap, t, slot, rows, cols, errors):
    emap.values[t, slot, rows, cols] = errors


def update_error_map(emap, model, scene, rng, error_fn=None):
    """Overwrite every available cell with the error of one random point.

    Returns ``(e_current, n_written)``; ``e_current`` is the mean over cells
    whose sampled point had a usable (reliable or occluded, untooled)
    correspondence. ``error_fn(pixels, t1, t2, cams)`` defaults to the 2D end
    point error of :func:`lttrack.render.f_LT`.
    """
    from .render import f_LT

    diag = math.hypot(emap.H, emap.W)
    queries = []
    for t in range(emap.n):
        for slot in range(2 * emap.m):
            t2 = emap.target(t, slot)
            if not emap.available[t, slot]:
                continue
            rec = scene.correspondence(t, t2)
            if rec is None:
                emap.available[t, slot] = False
                continue
            pts, rows, cols = emap.random_points(rng)
            target, cm = rec.lookup(pts)
            usable = cm > 0
            if scene.tool_masks is not None:
                usable &= ~scene.tool_at(t, pts)
            queries.append((t, slot, t2, pts, rows, cols, target, usable))
    if not queries:
        return 0.0, 0
    pix = np.concatenate([q[3] for q in queries])
    t1 = np.concatenate([np.full(len(q[3]), q[0]) for q in queries])
    t2 = np.concatenate([np.full(len(q[3]), q[2]) for q in queries])
    if error_fn is None:
        est = f_LT(model, pix, t1, t2, scene.cameras)
        pred, ok = est.pixel, est.valid
    else:
        pred, ok = error_fn(pix, t1, t2, scene.cameras)
    pos = 0
    written, n_used, total = 0, 0, 0.0
    for t, slot, _, pts, rows, cols, target, usable in queries:
        sl = slice(pos, pos + len(pts))
        pos += len(pts)
        err = np.linalg.norm(pred[sl] - target, axis=1)
        err = np.where(ok[sl], err, diag)
        err = np.where(usable, err, 0.0)
        write_errors(emap, t, slot, rows, cols, err)
        written += len(pts)
        n_used += int(usable.sum())
        total += float(err[usable].sum())
    e_current = total / n_used if n_used else 0.0
    return e_current, written


def maybe_upscale(emap, e_current, schedule):
    """Plateau-triggered doubling of the cell grid; returns True if it upscaled."""
    if emap.plateau is None:
        emap.plateau = Plateau(schedule.upscale_patience, schedule.upscale_tol)
    triggered = emap.plateau.update(e_current)
    if triggered and emap.scale < 1.0:
        new_scale = min(1.0, emap.scale * 2.0)
        gh, gw = emap.grid_shape(new_scale)
        emap.values = resize_cells(emap.values, gh, gw)
        emap.scale = new_scale
        emap.e_total = e_current
        emap.plateau.reset()
        return True
    emap.e_total = min(emap.e_total, e_current)
    return False


def resize_cells(values, gh, gw):
    """Bilinear resampling of the trailing (rows, cols) axes at cell centres."""
    h, w = values.shape[-2:]
    yy = (np.arange(gh) + 0.5) * h / gh - 0.5
    xx = (np.arange(gw) + 0.5) * w / gw - 0.5
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    flat = values.reshape(-1, h, w)
    out = np.stack(
        [ndimage.map_coordinates(v, [Y, X], order=1, mode="nearest") for v in flat]
    )
    return np.maximum(out, 0.0).reshape(values.shape[:-2] + (gh, gw))


def cell_probabilities(emap, t, slot):
    e = emap.values[t, slot]
    total = e.sum()
    if total <= 0:
        return np.full(e.shape, 1.0 / e.size)
    return e / total


def sample_pixels(emap, t, slot, count, rng, return_cells=False):
    """Draw cells proportionally to their error, then a uniform pixel within each."""
    probs = cell_probabilities(emap, t, slot).ravel()
    idx = rng.choice(probs.size, size=count, p=probs)
    gw = emap.values.shape[3]
    rows, cols = idx // gw, idx % gw
    pts, _, _ = emap.random_points(rng, rows, cols)
    if return_cells:
        return pts, rows, cols
    return pts


def sample_pixels_uniform(emap, count, rng):
    """Baseline sampler: pixels uniform over the image."""
    u = rng.uniform(0, emap.W - 1, size=count)
    v = rng.uniform(0, emap.H - 1, size=count)
    return np.stack([u, v], axis=1)


def sample_frame_pair(emap, rng, size=None):
    """Draw (t, slot) pairs proportionally to their mean cell error.

    Unavailable pairs are never drawn; an all-zero map falls back to a uniform
    choice over available pairs.
    """
    pe = emap.pair_errors().ravel()
    avail = emap.available.ravel()
    if pe.sum() <= 0:
        probs = avail / avail.sum()
    else:
        probs = pe / pe.sum()
    idx = rng.choice(pe.size, size=size, p=probs)
    return np.divmod(idx, 2 * emap.m)


def sample_frame_pair_uniform(emap, rng, size=None):
    avail = emap.available.ravel()
    idx = rng.choice(avail.size, size=size, p=avail / avail.sum())
    return np.divmod(idx, 2 * emap.m)


def error_map_image(emap, t, slot):
    """Normalised 8-bit grayscale image of one pair's cells."""
    e = emap.values[t, slot]
    peak = e.max()
    img = e / peak if peak > 0 else np.zeros_like(e)
    return np.round(img * 255).astype(np.uint8)


def export_error_map_images(emap, directory):
    """Write one PNG per available pair as ``errmap_<t>_<t2>.png``."""
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    paths = []
    for t in range(emap.n):
        for slot in range(2 * emap.m):
            if not emap.available[t, slot]:
                continue
            path = os.path.join(directory, f"errmap_{t}_{emap.target(t, slot)}.png")
            Image.fromarray(error_map_image(emap, t, slot), mode="L").save(path)
            paths.append(path)
    return paths
