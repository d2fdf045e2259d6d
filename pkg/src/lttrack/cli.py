"""Command-line entry point: optimize, track, render and eval subcommands.

Exit codes: 0 on success, 1 for invalid input or usage, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="lttrack", description="Long-term 2D/3D point tracking by test-time optimisation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    o = sub.add_parser("optimize", help="fit a scene model and write a checkpoint")
    o.add_argument("--scene", required=True, help="scene directory")
    o.add_argument("--config", required=True, help="JSON file with OptimConfig fields")
    o.add_argument("--out", required=True, help="output checkpoint path")
    o.add_argument("--sampler", choices=("guided", "naive"))
    o.add_argument("--seed", type=int)
    o.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")

    t = sub.add_parser("track", help="track query pixels through time")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--queries", required=True, help="CSV with columns u_px,v_px,t_start")
    t.add_argument("--out", required=True, help="output track CSV")
    t.add_argument("--targets", help="comma-separated target frames (default: every frame)")

    r = sub.add_parser("render", help="render a view of the fitted scene")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--t", required=True, type=int)
    r.add_argument("--eye", required=True, choices=("left", "right"))
    r.add_argument("--depth", action="store_true", help="also write a 16-bit depth PNG (0.01 mm units)")
    r.add_argument("--out", help="output PNG (default: render_<t>_<eye>.png)")

    e = sub.add_parser("eval", help="score tracks against ground truth")
    e.add_argument("--tracks", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--renders", help="directory of pred_<name>.png / gt_<name>.png image pairs")
    e.add_argument("--out", help="write the report as JSON here as well as stdout")
    return p


def read_queries(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"query file not found: {path}")
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"u_px", "v_px", "t_start"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: query CSV needs columns {sorted(need)}")
        for row in reader:
            out.append(((float(row["u_px"]), float(row["v_px"])), int(row["t_start"])))
    return out


def read_render_pairs(directory):
    from PIL import Image

    if not os.path.isdir(directory):
        raise FileNotFoundError(f"render directory not found: {directory}")
    pairs = []
    for name in sorted(os.listdir(directory)):
        if name.startswith("pred_") and name.endswith(".png"):
            ref = os.path.join(directory, "gt_" + name[5:])
            if not os.path.isfile(ref):
                raise ValueError(f"{directory}: {name} has no matching gt_{name[5:]}")
            a = np.asarray(Image.open(os.path.join(directory, name)).convert("RGB"), float) / 255.0
            b = np.asarray(Image.open(ref).convert("RGB"), float) / 255.0
            pairs.append((a, b))
    if not pairs:
        raise ValueError(f"{directory}: no pred_*.png files")
    return pairs


def cmd_optimize(args):
    from .data_io import load_scene
    from .engine import OptimConfig, OptimizationDiverged, Trainer

    if not os.path.isdir(args.scene):
        raise FileNotFoundError(f"scene directory not found: {args.scene}")
    if not os.path.isfile(args.config):
        raise FileNotFoundError(f"config file not found: {args.config}")
    scene = load_scene(args.scene)
    config = OptimConfig.from_file(args.config)
    if args.sampler:
        config.sampler = args.sampler
    if args.seed is not None:
        config.seed = args.seed
    for note in scene.notes:
        print(f"note: {note}", file=sys.stderr)
    trainer = Trainer(scene, config)
    try:
        result = trainer.run()
    except OptimizationDiverged as exc:
        exc.result.save(args.out, scene)
        raise RuntimeError(f"{exc}; last good parameters written to {args.out}") from exc
    finally:
        with open(args.log or args.out + ".log.jsonl", "w") as f:
            for rec in trainer.log:
                f.write(json.dumps(rec) + "\n")
    result.save(args.out, scene)
    print(f"wrote {args.out} after {result.iterations} iterations ({result.epochs} epochs)")


def cmd_track(args):
    from .data_io import export_tracks, load_checkpoint
    from .engine import track

    if not os.path.isfile(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model, state = load_checkpoint(args.ckpt)
    queries = read_queries(args.queries)
    if args.targets:
        targets = [int(x) for x in args.targets.split(",") if x.strip()]
    else:
        targets = list(range(model.n_frames))
    bad = [t for t in targets if not 0 <= t < model.n_frames]
    if bad:
        raise ValueError(f"target frames out of range: {bad}")
    results = track((model, state["cameras"], state["tool_masks"]), queries, targets)
    for r in results:
        if r.error:
            print(f"query {r.query_id}: {r.error}", file=sys.stderr)
    export_tracks(results, args.out)
    print(f"wrote {len(results)} tracks to {args.out}")


def cmd_render(args):
    from PIL import Image

    from .data_io import load_checkpoint
    from .engine import render_eye

    if not os.path.isfile(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model, state = load_checkpoint(args.ckpt)
    if not 0 <= args.t < model.n_frames:
        raise ValueError(f"--t {args.t} outside [0, {model.n_frames})")
    if state["cameras"] is None:
        raise ValueError(f"{args.ckpt}: checkpoint has no camera parameters")
    image, depth, valid = render_eye(model, state["cameras"], args.t, args.eye)
    out = args.out or f"render_{args.t}_{args.eye}.png"
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(out)
    print(f"wrote {out}")
    if args.depth:
        d = np.where(valid, np.nan_to_num(depth) * 100.0, 0.0)
        dpath = os.path.splitext(out)[0] + "_depth.png"
        Image.fromarray(np.clip(np.round(d), 0, 65535).astype(np.uint16)).save(dpath)
        print(f"wrote {dpath}")


def cmd_eval(args):
    from .data_io import import_tracks
    from .metrics import evaluate_metrics

    for path in (args.tracks, args.truth):
        if not os.path.isfile(path):
            raise FileNotFoundError(f"track file not found: {path}")
    images = read_render_pairs(args.renders) if args.renders else None
    report = evaluate_metrics(import_tracks(args.tracks), import_tracks(args.truth), images)
    text = json.dumps(report.to_dict(), indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")


COMMANDS = {"optimize": cmd_optimize, "track": cmd_track, "render": cmd_render, "eval": cmd_eval}


def main(argv=None):
    from .data_io import CheckpointError, SceneValidationError

    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    try:
        COMMANDS[args.command](args)
    except SceneValidationError as exc:
        print(f"error: invalid scene:\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, CheckpointError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
