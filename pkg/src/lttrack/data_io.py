"""Scene ingestion, on-disk formats, checkpoints and track export.

Scene directory layout::

    frames/left_000000.png, frames/right_000000.png, ...
    cameras.json        per-frame K and M for both eyes (workspace -> camera, mm)
    flow/<t1>_<t2>.flo5 and flow/<t1>_<t2>_cm.png
    stereo/<t>.flo5     left -> right disparity flow
    masks/tool_000000.png   optional, nonzero = tool
    meta.json           {"aabb_min", "aabb_max", "fps"}; aabb optional

``.flo5`` files: 8-byte magic, three little-endian uint32 (height, width,
channels), then little-endian float32 data in planar (channel-major) order.
"""

from __future__ import annotations

import io
import json
import math
import os
import re
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, CameraPose, CameraSet, WorkspaceBox, triangulate_stereo

FLO5_MAGIC = b"FLO5\r\n\x1a\n"
CKPT_MAGIC = b"LTTCKPT\x00"
CKPT_VERSION = 1


class SceneValidationError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scene:\n  " + "\n  ".join(self.problems))


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# flo5


def write_flo5(path, flow):
    flow = np.asarray(flow)
    if flow.ndim == 2:
        flow = flow[..., None]
    H, W, C = flow.shape
    with open(path, "wb") as f:
        f.write(FLO5_MAGIC)
        f.write(struct.pack("<III", H, W, C))
        f.write(np.ascontiguousarray(np.moveaxis(flow, -1, 0), dtype="<f4").tobytes())


def read_flo5(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != FLO5_MAGIC:
        raise ValueError(f"{path}: not a flo5 file")
    H, W, C = struct.unpack("<III", raw[8:20])
    data = np.frombuffer(raw, dtype="<f4", offset=20)
    if data.size != H * W * C:
        raise ValueError(f"{path}: truncated flo5 payload")
    return np.moveaxis(data.reshape(C, H, W), 0, -1).astype(np.float64)


# ---------------------------------------------------------------------------
# sampling helpers


def bilinear(img, pts):
    """Sample an (H, W, C) array at continuous (u, v) positions, clamped to the image."""
    H, W = img.shape[:2]
    u = np.clip(pts[:, 0], 0, W - 1)
    v = np.clip(pts[:, 1], 0, H - 1)
    u0 = np.minimum(np.floor(u).astype(int), max(W - 2, 0))
    v0 = np.minimum(np.floor(v).astype(int), max(H - 2, 0))
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    a, b = img[v0, u0], img[v0, u0 + 1]
    c, d = img[v0 + 1, u0], img[v0 + 1, u0 + 1]
    return (1 - fv) * ((1 - fu) * a + fu * b) + fv * ((1 - fu) * c + fu * d)


def nearest(img, pts):
    H, W = img.shape[:2]
    u = np.clip(np.rint(pts[:, 0]).astype(int), 0, W - 1)
    v = np.clip(np.rint(pts[:, 1]).astype(int), 0, H - 1)
    return img[v, u]


@dataclass
class CorrespondenceRecord:
    t1: int
    t2: int
    flow: np.ndarray  # (H, W, 2) px, t1 -> t2
    cm: np.ndarray  # (H, W) uint8 in {0, 1, 2}

    def lookup(self, pts):
        """Matched positions in frame t2 and consistency labels for pixels of t1."""
        target = pts + bilinear(self.flow, pts)
        cm = nearest(self.cm, pts).astype(np.int64)
        cm = np.where(np.all(np.isfinite(target), axis=1), cm, 0)
        return np.nan_to_num(target), cm


@dataclass
class SceneBundle:
    left: np.ndarray  # (n, H, W, 3) uint8
    right: np.ndarray
    cameras: CameraSet
    correspondences: dict  # (t1, t2) -> CorrespondenceRecord
    stereo: np.ndarray  # (n, H, W, 2) left -> right flow
    box: WorkspaceBox
    fps: float = 25.0
    tool_masks: np.ndarray | None = None  # (n, H, W) bool, True = tool
    notes: list = field(default_factory=list)

    @property
    def n_frames(self):
        return self.left.shape[0]

    @property
    def height(self):
        return self.left.shape[1]

    @property
    def width(self):
        return self.left.shape[2]

    def correspondence(self, t1, t2):
        return self.correspondences.get((int(t1), int(t2)))

    def colour_at(self, t, pts, eye="left"):
        frames = self.left if eye == "left" else self.right
        return bilinear(frames[t].astype(np.float64) / 255.0, pts)

    def tool_at(self, t, pts):
        if self.tool_masks is None:
            return np.zeros(len(pts), bool)
        return nearest(self.tool_masks[t], pts).astype(bool)

    def stereo_targets(self, t, pts):
        """Triangulated stereo points (mm) for left pixels of frame ``t``."""
        t = np.broadcast_to(np.asarray(t, np.int64), (len(pts),))
        right = np.empty_like(pts)
        for tt in np.unique(t):
            sel = t == tt
            right[sel] = pts[sel] + bilinear(self.stereo[tt], pts[sel])
        finite = np.all(np.isfinite(right), axis=1)
        right = np.where(finite[:, None], right, pts)
        rl = self.cameras.rays(pts, t, "left")
        rr = self.cameras.rays(right, t, "right")
        P, valid = triangulate_stereo(rl, rr)
        valid &= finite
        # points behind either camera are not usable targets
        with np.errstate(invalid="ignore"):
            ahead = np.einsum("ij,ij->i", np.nan_to_num(P) - rl.origin, rl.direction) > 0
        return P, valid & ahead


# ---------------------------------------------------------------------------
# scene loading / writing


def _frame_name(kind, t):
    return f"{kind}_{t:06d}.png"


def _read_png(path):
    return np.array(Image.open(path))


def _camera_from_json(d, where, problems):
    try:
        K = CameraIntrinsics(float(d["K"]["fx"]), float(d["K"]["fy"]), float(d["K"]["cx"]),
                             float(d["K"]["cy"]), int(d["K"]["width"]), int(d["K"]["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        problems.append(f"{where}: bad intrinsics ({exc})")
        K = None
    try:
        M = CameraPose(np.array(d["R"], float).reshape(3, 3), np.array(d["t"], float))
    except (KeyError, TypeError, ValueError) as exc:
        problems.append(f"{where}: bad pose ({exc})")
        M = None
    return K, M


def cameras_to_json(cams):
    frames = []
    for t in range(cams.n_frames):
        entry = {}
        for eye in ("left", "right"):
            Ks, Ms = cams.eye(eye)
            entry[eye] = {"K": Ks[t].to_dict(), **Ms[t].to_dict()}
        frames.append(entry)
    return {"convention": "workspace_to_camera", "units": "mm", "frames": frames}


def cameras_from_json(data, problems=None, where="cameras.json"):
    problems = [] if problems is None else problems
    lists = {"left": ([], []), "right": ([], [])}
    for t, entry in enumerate(data.get("frames", [])):
        for eye in ("left", "right"):
            if eye not in entry:
                problems.append(f"{where}: frame {t} lacks {eye} camera")
                continue
            K, M = _camera_from_json(entry[eye], f"{where} frame {t} {eye}", problems)
            lists[eye][0].append(K)
            lists[eye][1].append(M)
    return CameraSet(tuple(lists["left"][0]), tuple(lists["left"][1]),
                     tuple(lists["right"][0]), tuple(lists["right"][1]))


def load_scene(directory):
    """Read and validate a scene directory; raises :class:`SceneValidationError`
    listing every violation found."""
    problems = []
    if not os.path.isdir(directory):
        raise SceneValidationError([f"scene directory not found: {directory}"])
    cam_path = os.path.join(directory, "cameras.json")
    if not os.path.exists(cam_path):
        raise SceneValidationError([f"missing cameras file: {cam_path}"])
    with open(cam_path) as f:
        cams = cameras_from_json(json.load(f), problems, cam_path)
    meta = {}
    meta_path = os.path.join(directory, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)

    fdir = os.path.join(directory, "frames")
    left_files = sorted(f for f in os.listdir(fdir) if f.startswith("left_")) if os.path.isdir(fdir) else []
    n = len(left_files)
    if n == 0:
        raise SceneValidationError(problems + [f"no frames found in {fdir}"])
    left, right = [], []
    shape = None
    for t in range(n):
        for kind, store in (("left", left), ("right", right)):
            path = os.path.join(fdir, _frame_name(kind, t))
            if not os.path.exists(path):
                problems.append(f"missing frame {path}")
                continue
            img = _read_png(path)
            if img.ndim != 3 or img.shape[2] < 3:
                problems.append(f"{path}: expected an RGB image")
                continue
            img = img[..., :3]
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                problems.append(f"{path}: dimension mismatch {img.shape[:2]} vs {shape[:2]}")
                continue
            store.append(img)
    if cams.n_frames != n:
        problems.append(f"{cam_path}: {cams.n_frames} camera entries for {n} frames")
    H, W = shape[:2] if shape else (0, 0)
    for eye in ("left", "right"):
        for t, K in enumerate(cams.eye(eye)[0]):
            if K is not None and (K.width, K.height) != (W, H):
                problems.append(f"{cam_path}: frame {t} {eye} intrinsics size {K.width}x{K.height} != {W}x{H}")

    corr = {}
    flow_dir = os.path.join(directory, "flow")
    pat = re.compile(r"^(\d+)_(\d+)\.flo5$")
    for name in sorted(os.listdir(flow_dir)) if os.path.isdir(flow_dir) else []:
        mt = pat.match(name)
        if not mt:
            continue
        t1, t2 = int(mt.group(1)), int(mt.group(2))
        path = os.path.join(flow_dir, name)
        cm_path = os.path.join(flow_dir, f"{t1}_{t2}_cm.png")
        if not (0 <= t1 < n and 0 <= t2 < n) or t1 == t2:
            problems.append(f"{path}: invalid frame indices ({t1}, {t2})")
            continue
        try:
            flow = read_flo5(path)
        except ValueError as exc:
            problems.append(str(exc))
            continue
        if not os.path.exists(cm_path):
            problems.append(f"missing consistency mask {cm_path}")
            continue
        cm = _read_png(cm_path)
        if flow.shape != (H, W, 2) or cm.shape != (H, W):
            problems.append(f"{path}: dimension mismatch with frames")
            continue
        bad = np.argwhere(cm > 2)
        if len(bad):
            v, u = bad[0]
            problems.append(f"{cm_path}: invalid consistency value {int(cm[v, u])} at pixel (u={u}, v={v})")
            continue
        if not np.all(np.isfinite(flow[cm > 0])):
            problems.append(f"{path}: non-finite flow where consistency mask is nonzero")
            continue
        corr[(t1, t2)] = CorrespondenceRecord(t1, t2, flow, cm.astype(np.uint8))

    stereo = np.full((n, H, W, 2), np.nan)
    for t in range(n):
        path = os.path.join(directory, "stereo", f"{t}.flo5")
        if not os.path.exists(path):
            problems.append(f"missing stereo correspondences {path}")
            continue
        try:
            s = read_flo5(path)
        except ValueError as exc:
            problems.append(str(exc))
            continue
        if s.shape != (H, W, 2):
            problems.append(f"{path}: dimension mismatch with frames")
            continue
        stereo[t] = s

    masks = None
    mdir = os.path.join(directory, "masks")
    if os.path.isdir(mdir):
        masks = np.zeros((n, H, W), bool)
        for t in range(n):
            path = os.path.join(mdir, _frame_name("tool", t))
            if not os.path.exists(path):
                problems.append(f"missing tool mask {path}")
                continue
            m = _read_png(path)
            if m.shape[:2] != (H, W):
                problems.append(f"{path}: mask does not align with frames")
                continue
            masks[t] = (m if m.ndim == 2 else m[..., 0]) > 0

    if problems:
        raise SceneValidationError(problems)

    bundle = SceneBundle(np.stack(left), np.stack(right), cams, corr, stereo,
                         WorkspaceBox(np.zeros(3), np.ones(3)), float(meta.get("fps", 25.0)), masks)
    if "aabb_min" in meta and "aabb_max" in meta:
        try:
            bundle.box = WorkspaceBox(meta["aabb_min"], meta["aabb_max"])
        except ValueError as exc:
            raise SceneValidationError([f"{meta_path}: {exc}"]) from None
    else:
        bundle.box = box_from_stereo(bundle)
        bundle.notes.append("workspace box estimated from triangulated stereo points")
    if cams.is_static():
        bundle.notes.append("static camera: all frames share the same extrinsics")
    return bundle


def box_from_stereo(bundle, lo=1.0, hi=99.0, pad=0.1, stride=2):
    """1st-99th percentile box of triangulated stereo points, padded by 10%."""
    H, W = bundle.height, bundle.width
    jj, ii = np.meshgrid(np.arange(0, W, stride), np.arange(0, H, stride))
    pts = np.stack([jj.ravel(), ii.ravel()], axis=1).astype(float)
    found = []
    for t in range(bundle.n_frames):
        P, ok = bundle.stereo_targets(t, pts)
        found.append(P[ok])
    P = np.concatenate(found)
    if len(P) < 2:
        raise SceneValidationError(["cannot estimate workspace box: no valid stereo triangulations"])
    a, b = np.percentile(P, lo, axis=0), np.percentile(P, hi, axis=0)
    span = np.maximum(b - a, 1e-3)
    return WorkspaceBox(a - pad * span, b + pad * span)


def write_scene(bundle, directory):
    """Write a bundle in the canonical directory layout."""
    for sub in ("frames", "flow", "stereo"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    for t in range(bundle.n_frames):
        Image.fromarray(bundle.left[t]).save(os.path.join(directory, "frames", _frame_name("left", t)))
        Image.fromarray(bundle.right[t]).save(os.path.join(directory, "frames", _frame_name("right", t)))
        write_flo5(os.path.join(directory, "stereo", f"{t}.flo5"), bundle.stereo[t])
    for (t1, t2), rec in bundle.correspondences.items():
        write_flo5(os.path.join(directory, "flow", f"{t1}_{t2}.flo5"), rec.flow)
        Image.fromarray(rec.cm.astype(np.uint8), mode="L").save(os.path.join(directory, "flow", f"{t1}_{t2}_cm.png"))
    if bundle.tool_masks is not None:
        os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
        for t in range(bundle.n_frames):
            img = bundle.tool_masks[t].astype(np.uint8) * 255
            Image.fromarray(img, mode="L").save(os.path.join(directory, "masks", _frame_name("tool", t)))
    with open(os.path.join(directory, "cameras.json"), "w") as f:
        json.dump(cameras_to_json(bundle.cameras), f, indent=1)
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump({"aabb_min": bundle.box.aabb_min.tolist(), "aabb_max": bundle.box.aabb_max.tolist(),
                   "fps": bundle.fps}, f, indent=1)


# ---------------------------------------------------------------------------
# checkpoints


def _json_array(obj):
    return np.frombuffer(json.dumps(obj).encode(), dtype=np.uint8)


def _from_json_array(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode())


def save_checkpoint(model, state, path):
    """Versioned single-file container: magic, version, length, crc32, npz payload.

    ``state`` may carry ``optimizer`` and ``sampler`` array dicts, a JSON-able
    ``config``, a ``cameras`` :class:`CameraSet` and ``tool_masks``.
    """
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    meta = {
        "model_config": model.config.to_dict(),
        "n_frames": model.n_frames,
        "aabb_min": model.box.aabb_min.tolist(),
        "aabb_max": model.box.aabb_max.tolist(),
        "config": state.get("config", {}),
        "extra": state.get("extra", {}),
    }
    if state.get("cameras") is not None:
        meta["cameras"] = cameras_to_json(state["cameras"])
    arrays["meta"] = _json_array(meta)
    for group in ("optimizer", "sampler"):
        for k, v in (state.get(group) or {}).items():
            arrays[f"{group}/{k}"] = np.asarray(v)
    if state.get("tool_masks") is not None:
        arrays["tool_masks"] = np.asarray(state["tool_masks"], dtype=bool)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQI", CKPT_VERSION, len(payload), zlib.crc32(payload)))
        f.write(payload)


def load_checkpoint(path):
    from .model import ModelConfig, SceneModel

    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 24 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: corrupt header (bad magic)")
    version, length, crc = struct.unpack("<IQI", raw[8:24])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    payload = raw[24:]
    if len(payload) != length:
        raise CheckpointError(f"{path}: truncated file ({len(payload)} of {length} payload bytes)")
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    with np.load(io.BytesIO(payload)) as z:
        arrays = {k: z[k] for k in z.files}
    meta = _from_json_array(arrays.pop("meta"))
    box = WorkspaceBox(meta["aabb_min"], meta["aabb_max"])
    model = SceneModel.create(meta["n_frames"], box, ModelConfig.from_dict(meta["model_config"]))
    model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    state = {
        "config": meta.get("config", {}),
        "extra": meta.get("extra", {}),
        "optimizer": {k[10:]: v for k, v in arrays.items() if k.startswith("optimizer/")},
        "sampler": {k[8:]: v for k, v in arrays.items() if k.startswith("sampler/")},
        "cameras": cameras_from_json(meta["cameras"]) if "cameras" in meta else None,
        "tool_masks": arrays.get("tool_masks"),
    }
    return model, state


# ---------------------------------------------------------------------------
# track export


@dataclass
class TrackResult:
    query_id: int
    t_start: int
    pixel_start: np.ndarray
    times: np.ndarray  # (T,)
    pixels: np.ndarray  # (T, 2)
    points: np.ndarray  # (T, 3) mm
    valid: np.ndarray  # (T,) bool
    error: str | None = None


TRACK_COLUMNS = ("query_id", "t", "u_px", "v_px", "X_mm", "Y_mm", "Z_mm", "valid")


def export_tracks(results, path, format="csv"):
    if format != "csv":
        raise ValueError(f"unsupported track format {format!r}")
    with open(path, "w") as f:
        f.write(",".join(TRACK_COLUMNS) + "\n")
        for r in results:
            for i, t in enumerate(r.times):
                if r.valid[i]:
                    vals = [repr(float(x)) for x in (*r.pixels[i], *r.points[i])]
                    f.write(f"{r.query_id},{int(t)},{','.join(vals)},1\n")
                else:
                    f.write(f"{r.query_id},{int(t)},,,,,,0\n")


def import_tracks(path):
    rows = {}
    with open(path) as f:
        header = f.readline().strip().split(",")
        if tuple(header) != TRACK_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for line in f:
            parts = line.rstrip("\n").split(",")
            if len(parts) != len(TRACK_COLUMNS):
                continue
            qid, t, valid = int(parts[0]), int(parts[1]), parts[7] == "1"
            nums = [float(x) if x else math.nan for x in parts[2:7]]
            rows.setdefault(qid, []).append((t, nums, valid))
    out = []
    for qid, items in rows.items():
        times = np.array([i[0] for i in items])
        nums = np.array([i[1] for i in items], dtype=float).reshape(-1, 5)
        valid = np.array([i[2] for i in items], bool)
        out.append(TrackResult(qid, int(times[0]), nums[0, :2], times, nums[:, :2], nums[:, 2:], valid))
    return out
