"""
A time-conditioned invertible map
=================================

Every frame of the scene is mapped into one shared canonical space. The map
is built from coupling blocks, so it can be undone exactly for any weights.
"""

import numpy as np

from lttrack.deform import InvertibleMap, map_forward, map_inverse

rng = np.random.default_rng(0)
m = InvertibleMap(n_frames=10, n_blocks=6, hidden=32, rng=rng)

# freshly built, the map is the identity
u = rng.uniform(0, 1, (5, 3))
print("identity at init:", np.allclose(map_forward(m, u, 3), u))

# scramble the weights: the map is now far from the identity ...
for p in m.parameters().values():
    p.value += 0.2 * rng.standard_normal(p.value.shape)
u = rng.uniform(0, 1, (10000, 3))
t = rng.integers(0, 10, 10000)
c = map_forward(m, u, t)
print("mean displacement: %.3f" % np.linalg.norm(c - u, axis=1).mean())

# ... but still exactly invertible
print("round trip error: %.1e" % np.abs(map_inverse(m, c, t) - u).max())

# a point seen at frame 2 and carried to frame 7 goes through canonical space
p7 = map_inverse(m, map_forward(m, u[:3], 2), 7)
print("frame 2 -> 7:\n", np.round(p7, 3))
