"""
Volume rendering weights along a ray
====================================

A ray through a density field gives each sample a weight: the chance that
light stops there. Weights plus the light that escapes always add up to one.
"""

import numpy as np

from lttrack import autodiff as ad
from lttrack.render import render_weights

rng = np.random.default_rng(0)

# 32 samples, a thin opaque layer around sample 20 on a faint background
sigma = np.full((1, 32), 0.05)
sigma[0, 18:23] = [1.0, 4.0, 9.0, 4.0, 1.0]
delta = np.full((1, 32), 0.25)

w, escaped = render_weights(sigma, delta)
w = ad.value_of(w)[0]
print("peak sample:", int(np.argmax(w)))
print("sum of weights + transmittance:", w.sum() + escaped[0])

# the rendered depth is the weight-normalised sample depth
depths = (np.arange(32) + 0.5) * 0.25
print("expected depth: %.3f" % (np.dot(w, depths) / w.sum()))

# conservation holds for any profile
sig = rng.exponential(2.0, (10000, 32))
w, escaped = render_weights(sig, np.full_like(sig, 0.1))
print("worst conservation error over 10k rays: %.1e" % np.max(np.abs(ad.value_of(w).sum(1) + escaped - 1)))
