"""
Tracking points on a synthetic deforming surface
================================================

Generate a small stereo sequence with known motion, fit a scene model to it,
then follow query points through every frame and compare with the truth.

Run with an iteration budget, e.g. ``python synthetic_tracking.py 300``
(about 2 minutes on one core); 1000 iterations reach the accuracy of the
acceptance suite.
"""

import sys
import time

import numpy as np

from lttrack import OptimConfig, evaluate_metrics, generate_synthetic_scene, optimize, track
from lttrack.data_io import TrackResult

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# 64x64 stereo pair, 24 frames: a textured sheet with a breathing bump, drifting sideways
scene, truth = generate_synthetic_scene()
print("frames:", scene.n_frames, " workspace diagonal: %.1f mm" % scene.box.diagonal)

cfg = OptimConfig(batch_pairs=4, pixels_per_sample=64, cell_size=8, lr=1e-3, grid_lr=1e-2,
                  max_iters=iters, val_period=10, model={"spatial_res": [16, 64]})


def progress(tr):
    if tr.iteration % 50 == 0:
        print("  iter %4d  loss %.4f" % (tr.iteration, tr.log[-1]["total"]))


t0 = time.time()
res = optimize(scene, cfg, callback=progress)
print("optimised in %.0f s" % (time.time() - t0))

# follow 50 points from frame 0 to every frame
q = np.random.default_rng(1).uniform(4, 59, (50, 2))
times = np.arange(scene.n_frames)
pred = track((res.model, scene.cameras, None), [(p, 0) for p in q], times)

gp, gP, vis = truth.tracks(q, 0, times)
gt = [TrackResult(i, 0, q[i], times, gp[i], gP[i], vis[i]) for i in range(len(q))]
rep = evaluate_metrics(pred, gt)
print("median 2D error %.2f px, median 3D error %.2f mm" % (rep.median_epe_2d, rep.median_epe_3d))
print("points within 4 px: %.0f%%" % rep.delta_px[4])
