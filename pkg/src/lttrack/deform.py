"""Time-conditioned invertible map between the contracted workspace and canonical space.

Each coupling block rewrites one coordinate with a positive-scale affine map
whose scale and shift come from a tanh MLP over the other two coordinates and
a learned per-frame code. The map is therefore exactly invertible for any
parameter values.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .fields import _dense


class TimeEmbedding:
    """Learned code vector per frame index."""

    def __init__(self, n_frames, dim=16, rng=None, name="deform.time_code"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.codes = ad.Parameter(rng.standard_normal((n_frames, dim)), name)

    @property
    def dim(self):
        return self.codes.value.shape[1]

    def __call__(self, t):
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        if np.any(t < 0) or np.any(t >= self.codes.value.shape[0]):
            raise IndexError("frame index out of range for time embedding")
        return ad.take(self.codes, t)


class CouplingBlock:
    def __init__(self, axis, code_dim, hidden=64, depth=2, rng=None, name="deform.b0"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.axis = axis
        self.others = [j for j in range(3) if j != axis]
        self.name = name
        sizes = [2 + code_dim] + [hidden] * depth
        self.layers = [_dense(a, b, rng, f"{name}.h{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.layers.append(_dense(hidden, 2, rng, f"{name}.out", zero=True))

    def parameters(self):
        out = {}
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def scale_shift(self, u, code):
        """Scale (> 0) and shift of the scalar map, conditioned on the frozen coordinates."""
        frozen = 2.0 * ad.take(u, (slice(None), self.others)) - 1.0
        h = ad.concat([frozen, code], axis=1)
        for w, b in self.layers[:-1]:
            h = ad.tanh(ad.affine(h, w, b))
        w, b = self.layers[-1]
        raw = ad.affine(h, w, b)
        scale = ad.exp(ad.tanh(raw[:, 0]))
        return scale, raw[:, 1]

    def _replace(self, u, new_col):
        cols = [u[:, j] if j != self.axis else new_col for j in range(3)]
        return ad.stack(cols, axis=1)

    def forward(self, u, code):
        scale, shift = self.scale_shift(u, code)
        return self._replace(u, u[:, self.axis] * scale + shift)

    def inverse(self, c, code):
        scale, shift = self.scale_shift(c, code)
        return self._replace(c, (c[:, self.axis] - shift) / scale)


class InvertibleMap:
    """Blocks cycling over x, y, z; identity at initialisation."""

    def __init__(self, n_frames, n_blocks=6, hidden=64, depth=2, code_dim=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embedding = TimeEmbedding(n_frames, code_dim, rng)
        self.blocks = [
            CouplingBlock(i % 3, code_dim, hidden, depth, rng, name=f"deform.b{i}") for i in range(n_blocks)
        ]

    @property
    def n_frames(self):
        return self.embedding.codes.value.shape[0]

    def parameters(self):
        out = {self.embedding.codes.name: self.embedding.codes}
        for blk in self.blocks:
            out.update(blk.parameters())
        return out

    def _code(self, t, n):
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        return self.embedding(t)

    def forward(self, u, t):
        """Deformed-at-``t`` unit-cube points -> canonical points."""
        code = self._code(t, len(u))
        for blk in self.blocks:
            u = blk.forward(u, code)
        return u

    def inverse(self, c, t):
        """Canonical points -> deformed-at-``t`` unit-cube points."""
        code = self._code(t, len(c))
        for blk in reversed(self.blocks):
            c = blk.inverse(c, code)
        return c


def map_forward(deform, u, t):
    return ad.value_of(deform.forward(u, t))


def map_inverse(deform, c, t):
    return ad.value_of(deform.inverse(c, t))
