"""Optimisation loop, schedulers, query-time tracking and view rendering."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data_io import TrackResult, load_checkpoint, save_checkpoint
from .losses import (
    LossWeights,
    NonFiniteLoss,
    cross_consistency_loss,
    flow_loss,
    gaussian_target,
    kl_target_loss,
    loss_total,
    rgb_loss,
    smooth_loss,
    sphere_loss,
)
from .model import ModelConfig, SceneModel
from .pixel_sampler import (
    ErrorMap,
    Plateau,
    SamplerSchedule,
    maybe_upscale,
    sample_frame_pair,
    sample_frame_pair_uniform,
    sample_pixels,
    sample_pixels_uniform,
    update_error_map,
)
from .render import f_LT, project_at, render_rays, render_view

log = logging.getLogger(__name__)
PROBE_SEED = 20240917


class OptimizationDiverged(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class OptimConfig:
    batch_pairs: int = 16
    pixels_per_sample: int = 256
    samples_per_ray: int = 32
    cell_size: int = 16
    lr: float = 1e-4
    grid_lr: float | None = None  # learning rate for feature planes; None -> lr
    val_period: int = 25  # epochs between error-map validations
    max_pairs: int = 4  # m
    pair_gap: int = 2
    max_iters: int = 10000
    sampler: str = "guided"
    jitter: bool = True
    early_stop: bool = True
    validate_at_start: bool = False
    probe_period: int = 0  # iterations between fixed-point error probes; 0 disables
    seed: int = 0
    schedule: SamplerSchedule = field(default_factory=SamplerSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for k in ("batch_pairs", "pixels_per_sample", "samples_per_ray", "cell_size", "val_period",
                  "max_pairs", "pair_gap"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.probe_period < 0:
            raise ValueError("probe_period must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.sampler not in ("guided", "naive"):
            raise ValueError("sampler must be 'guided' or 'naive'")
        if isinstance(self.schedule, dict):
            self.schedule = SamplerSchedule(**self.schedule)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict({**ModelConfig().to_dict(), **self.model})

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class OptimResult:
    model: SceneModel
    optimizer: ad.Adam
    error_map: ErrorMap
    config: OptimConfig
    log: list
    iterations: int = 0
    epochs: int = 0
    stopped_early: bool = False
    plateaus: dict = field(default_factory=dict)

    def checkpoint_state(self, scene=None):
        sampler = self.error_map.to_state()
        for name, p in self.plateaus.items():
            sampler[f"plateau/{name}"] = np.array(p.state())
        if self.error_map.plateau is not None:
            sampler["plateau/upscale"] = np.array(self.error_map.plateau.state())
        state = {
            "optimizer": self.optimizer.state_dict(),
            "sampler": sampler,
            "config": self.config.to_dict(),
            "extra": {"iterations": self.iterations, "epochs": self.epochs},
        }
        if scene is not None:
            state["cameras"] = scene.cameras
            state["tool_masks"] = scene.tool_masks
        return state

    def save(self, path, scene=None):
        save_checkpoint(self.model, self.checkpoint_state(scene), path)


def lr_scales(model, config):
    if config.grid_lr is None:
        return {}
    return {k: config.grid_lr / config.lr for k in model.parameters() if ".l" in k and k.split(".")[-1] in
            ("xy", "xz", "yz", "xt", "yt", "zt")}


def build_batch(scene, emap, config, rng):
    """Sample frame pairs and pixels; returns the aligned correspondence batch."""
    B, P = config.batch_pairs, config.pixels_per_sample
    if config.sampler == "guided":
        ts, slots = sample_frame_pair(emap, rng, size=B)
    else:
        ts, slots = sample_frame_pair_uniform(emap, rng, size=B)
    p1s, t1s, t2s = [], [], []
    for t, slot in zip(ts, slots):
        if config.sampler == "guided":
            pts = sample_pixels(emap, t, slot, P, rng)
        else:
            pts = sample_pixels_uniform(emap, P, rng)
        if scene.tool_masks is not None:
            pts = pts[~scene.tool_at(t, pts)]
        p1s.append(pts)
        t1s.append(np.full(len(pts), t))
        t2s.append(np.full(len(pts), emap.target(t, slot)))
    p1 = np.concatenate(p1s)
    t1 = np.concatenate(t1s)
    t2 = np.concatenate(t2s)
    p2 = np.empty_like(p1)
    cm = np.empty(len(p1), np.int64)
    for a, b in set(zip(t1.tolist(), t2.tolist())):
        sel = (t1 == a) & (t2 == b)
        p2[sel], cm[sel] = scene.correspondence(a, b).lookup(p1[sel])
    W, H = scene.width, scene.height
    inside2 = (p2[:, 0] >= 0) & (p2[:, 0] <= W - 1) & (p2[:, 1] >= 0) & (p2[:, 1] <= H - 1)
    tool2 = np.zeros(len(p2), bool)
    if scene.tool_masks is not None:
        for b in np.unique(t2):
            sel = (t2 == b) & inside2
            tool2[sel] = scene.tool_at(b, p2[sel])
    cm = np.where(tool2, 0, cm)
    c1 = np.empty((len(p1), 3))
    c2 = np.empty((len(p1), 3))
    for a in np.unique(t1):
        sel = t1 == a
        c1[sel] = scene.colour_at(a, p1[sel])
    for b in np.unique(t2):
        sel = t2 == b
        c2[sel] = scene.colour_at(b, np.clip(p2[sel], 0, [W - 1, H - 1]))
    return {
        "t1": t1, "t2": t2, "p1": p1, "p2": p2, "cm": cm, "c1": c1, "c2": c2,
        "rgb_mask2": inside2 & ~tool2, "pairs": (ts, slots),
    }


def to_mm(model, u):
    return u * model.box.size + model.box.aabb_min


def step_losses(model, scene, batch, config, rng):
    """Bidirectional forward pass for one batch; returns the dict of loss terms.

    Rows ``[:n]`` are the t1 pixels and rows ``[n:]`` their matches at t2, so
    one render serves both directions of the pair.
    """
    n = len(batch["p1"])
    w = config.weights
    t_all = np.concatenate([batch["t1"], batch["t2"]])
    t_swap = np.concatenate([batch["t2"], batch["t1"]])
    p_all = np.concatenate([batch["p1"], batch["p2"]])
    rays = scene.cameras.rays(p_all, t_all)
    out = render_rays(model, rays, t_all, config.samples_per_ray, rng if config.jitter else None)

    src = ad.div(out.point - model.box.aabb_min, model.box.size)
    canon = model.deform.forward(src, t_all)
    carried = to_mm(model, model.deform.inverse(canon, t_swap))
    proj = project_at(carried, t_swap, scene.cameras)
    terms = {}
    if w.rgb:
        terms["rgb"] = rgb_loss(batch["c1"], out.colour[:n], batch["c2"], out.colour[n:], None, batch["rgb_mask2"])
    if w.flow:
        diag = math.hypot(scene.width, scene.height)
        terms["flow"] = flow_loss(batch["p2"], proj[:n], batch["p1"], proj[n:], batch["cm"], math.sqrt(diag))
    if w.gt:
        target, ok = scene.stereo_targets(t_all, p_all)
        ok &= out.samples.valid
        ok[n:] &= batch["rgb_mask2"]
        dist = np.linalg.norm(np.nan_to_num(target) - rays.origin, axis=1)
        sig = w.sigma_std if w.sigma_std is not None else 2.0 * out.samples.deltas[:, 0]
        terms["gt"] = kl_target_loss(gaussian_target(out.samples.depths, dist, sig), out.weights, ok)
    if w.smooth:
        last = model.n_frames - 1
        inner = (t_all >= 1) & (t_all <= last - 1)
        prev = to_mm(model, model.deform.inverse(canon, np.clip(t_all - 1, 0, last)))
        nxt = to_mm(model, model.deform.inverse(canon, np.clip(t_all + 1, 0, last)))
        terms["smooth"] = smooth_loss(prev, out.point, nxt, inner)
    if w.cr:
        terms["cr"] = sphere_loss(canon, src)
    if w.xc:
        terms["xc"] = cross_consistency_loss(canon[:n], canon[n:], batch["cm"])
    return terms


class Trainer:
    """Stateful optimisation run; :meth:`run` drives it to completion."""

    def __init__(self, scene, config, model=None):
        self.scene = scene
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.model = model or SceneModel.create(scene.n_frames, scene.box, config.model)
        self.params = self.model.parameters()
        self.opt = ad.Adam(self.params, lr=config.lr, lr_scale=lr_scales(self.model, config))
        self.emap = self._fresh_map()
        sch = config.schedule
        self.lr_plateau = Plateau(sch.lr_patience, sch.lr_tol)
        self.stop_plateau = Plateau(sch.stop_patience, sch.stop_tol)
        self.log = []
        self.iteration = 0
        self.epoch = 0
        self.seen = np.zeros(scene.n_frames, bool)
        self.stopped_early = False
        self.validations = []
        self.probes = []
        self._last_report = None

    def _fresh_map(self):
        cfg, scene = self.config, self.scene
        emap = ErrorMap(scene.n_frames, cfg.max_pairs, scene.height, scene.width, cfg.cell_size,
                        cfg.schedule.start_scale, cfg.pair_gap)
        for (t, s) in zip(*np.nonzero(emap.available)):
            if scene.correspondence(t, emap.target(t, s)) is None:
                emap.available[t, s] = False
        return emap

    def probe(self):
        """Mean error over a fixed set of probe points (same points every call and every run).

        Runs the error-map update on a throwaway map with a dedicated generator,
        so neither the training map nor the training random stream is touched.
        """
        e, _ = update_error_map(self._fresh_map(), self.model, self.scene, np.random.default_rng(PROBE_SEED))
        rec = {"event": "probe", "iteration": self.iteration, "e_probe": e}
        self.log.append(rec)
        self.probes.append(rec)
        return e

    def result(self):
        return OptimResult(self.model, self.opt, self.emap, self.config, self.log, self.iteration, self.epoch,
                           self.stopped_early, {"lr": self.lr_plateau, "stop": self.stop_plateau})

    def step(self):
        batch = build_batch(self.scene, self.emap, self.config, self.rng)
        ts, slots = batch["pairs"]
        with ad.Tape() as tape:
            terms = step_losses(self.model, self.scene, batch, self.config, self.rng)
            total, report = loss_total(terms, self.config.weights)
        self.opt.zero_grad()
        ad.backward(tape, total)
        self.opt.step()
        self.iteration += 1
        self._last_report = report
        self.log.append({
            "iteration": self.iteration, "epoch": self.epoch, "losses": dict(report.terms), "total": report.total,
            "scale": self.emap.scale, "lr": self.opt.lr,
        })
        self.seen[ts] = True
        self.seen[[self.emap.target(t, s) for t, s in zip(ts, slots)]] = True
        if self.seen.all():
            self.seen[:] = False
            self.epoch += 1
            return True
        return False

    def validate(self):
        e_current, _ = update_error_map(self.emap, self.model, self.scene, self.rng)
        cfg = self.config
        upscaled = maybe_upscale(self.emap, e_current, cfg.schedule)
        if self.lr_plateau.update(e_current):
            self.opt.lr *= cfg.schedule.lr_factor
            self.lr_plateau.reset(e_current)
        stop = False
        if self.emap.scale >= 1.0 and not upscaled:
            stop = self.stop_plateau.update(e_current)
        rec = {
            "event": "validation",
            "iteration": self.iteration,
            "epoch": self.epoch,
            "losses": dict(self._last_report.terms) if self._last_report else {},
            "total": self._last_report.total if self._last_report else None,
            "e_current": e_current,
            "map_mean": self.emap.mean_error(),
            "scale": self.emap.scale,
            "lr": self.opt.lr,
        }
        self.log.append(rec)
        self.validations.append(rec)
        log.info(json.dumps(rec))
        return stop and self.config.early_stop

    def run(self, max_iters=None, callback=None):
        cfg = self.config
        max_iters = cfg.max_iters if max_iters is None else max_iters
        if cfg.validate_at_start and self.iteration == 0 and max_iters > 0:
            self.validate()
        epochs_since = 0
        while self.iteration < max_iters:
            try:
                new_epoch = self.step()
            except (NonFiniteLoss, ad.NonFiniteGradient) as exc:
                # both checks fire before the update, so parameters are still the last good ones
                raise OptimizationDiverged(f"optimisation diverged at iteration {self.iteration}: {exc}",
                                           self.result()) from exc
            if callback is not None:
                callback(self)
            if cfg.probe_period and self.iteration % cfg.probe_period == 0:
                self.probe()
            if new_epoch:
                epochs_since += 1
                if epochs_since >= cfg.val_period:
                    epochs_since = 0
                    if self.validate():
                        self.stopped_early = True
                        break
        if cfg.probe_period and self.iteration % cfg.probe_period:
            self.probe()
        return self.result()


def optimize(scene, config=None, model=None, callback=None):
    """Fit a scene model; deterministic for a fixed ``config.seed``."""
    config = config or OptimConfig()
    return Trainer(scene, config, model).run(callback=callback)


# ---------------------------------------------------------------------------
# inference


def _resolve(ckpt):
    if isinstance(ckpt, str):
        model, state = load_checkpoint(ckpt)
        return model, state.get("cameras"), state.get("tool_masks")
    if isinstance(ckpt, tuple):
        return ckpt
    return ckpt, None, None


def track(ckpt, queries, targets, cameras=None, tool_masks=None, n_samples=32):
    """Track ``queries`` [(pixel, t_start), ...] to every time in ``targets``.

    ``ckpt`` is a checkpoint path or a :class:`SceneModel`. Out-of-bounds
    queries yield a result with ``error`` set; tool-masked queries are
    returned with every target flagged invalid.
    """
    model, cams, masks = _resolve(ckpt)
    cams = cameras or cams
    masks = tool_masks if tool_masks is not None else masks
    if cams is None:
        raise ValueError("camera parameters are required for tracking")
    targets = np.asarray(targets, np.int64)
    T = len(targets)
    out = []
    rows = []
    for qid, (pixel, t0) in enumerate(queries):
        pixel = np.asarray(pixel, float)
        K = cams.K_left[int(t0)] if 0 <= int(t0) < cams.n_frames else None
        res = TrackResult(qid, int(t0), pixel, targets.copy(), np.full((T, 2), np.nan), np.full((T, 3), np.nan),
                          np.zeros(T, bool))
        if K is None:
            res.error = f"start frame {t0} out of range"
        elif not (0 <= pixel[0] <= K.width - 1 and 0 <= pixel[1] <= K.height - 1):
            res.error = f"query pixel {tuple(pixel)} outside the image"
        elif masks is not None and masks[int(t0)][int(round(pixel[1])), int(round(pixel[0]))]:
            res.error = "query lies on a masked tool pixel"
        else:
            rows.append(qid)
        out.append(res)
    if rows:
        pix = np.repeat(np.stack([out[q].pixel_start for q in rows]), T, axis=0)
        t1 = np.repeat([out[q].t_start for q in rows], T)
        t2 = np.tile(targets, len(rows))
        est = f_LT(model, pix, t1, t2, cams, n=n_samples)
        for i, q in enumerate(rows):
            sl = slice(i * T, (i + 1) * T)
            out[q].pixels = est.pixel[sl]
            out[q].points = est.point_t2[sl]
            out[q].valid = est.valid[sl]
    return out


def render_eye(model, cams, t, eye="left", n_samples=32):
    Ks, Ms = cams.eye(eye)
    return render_view(model, t, Ks[t], Ms[t], n=n_samples)
