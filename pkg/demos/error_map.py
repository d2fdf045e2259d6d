"""
Error-guided sampling
=====================

Training pixels are drawn where the current model is most wrong. The error
map stores one error per cell and frame pair; cells are drawn in proportion.
"""

import numpy as np

from lttrack.pixel_sampler import ErrorMap, cell_probabilities, sample_pixels

rng = np.random.default_rng(0)

# one frame, one partner frame, 64x64 image, 16 px cells -> a 4x4 grid
em = ErrorMap(1, 1, 64, 64, 16, 1.0)
em.values[0, 0] = 0.1
em.values[0, 0, 1, 2] = 3.0  # one badly tracked cell

print("cell probabilities:\n", np.round(cell_probabilities(em, 0, 0), 3))

pts, rows, cols = sample_pixels(em, 0, 0, 10000, rng, return_cells=True)
hot = np.mean((rows == 1) & (cols == 2))
print("share of draws in the hot cell: %.3f" % hot)
print("a few pixels:", np.round(pts[:3], 1).tolist())
