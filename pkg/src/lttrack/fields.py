"""Multi-scale HexPlane encoders with density and colour heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# (coordinate a, coordinate b) for each plane; coordinate 3 is normalised time
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")


@dataclass
class HexPlaneLevel:
    spatial_res: int
    temporal_res: int
    channels: int
    planes: dict = field(default_factory=dict)

    @classmethod
    def create(cls, spatial_res, temporal_res, channels, rng, prefix="", scale=0.1):
        if spatial_res < 2 or temporal_res < 2:
            raise ValueError("plane resolutions must be at least 2")
        level = cls(spatial_res, temporal_res, channels)
        for name, (_, b) in zip(PLANE_NAMES, PLANE_AXES):
            res_b = temporal_res if b == 3 else spatial_res
            value = scale * rng.standard_normal((spatial_res, res_b, channels))
            level.planes[name] = ad.Parameter(value, f"{prefix}{name}")
        return level

    @property
    def width(self):
        return 6 * self.channels

    def features(self, coords4):
        out = []
        for name, (a, b) in zip(PLANE_NAMES, PLANE_AXES):
            out.append(ad.grid_lookup(self.planes[name], coords4[:, [a, b]]))
        return out


class MultiScaleHexPlane:
    """Coarse-to-fine stack of HexPlane levels followed by a small MLP head.

    Features from all planes of all levels are concatenated; the head maps
    them to ``n_out`` pre-activations.
    """

    def __init__(self, levels, n_out, hidden=64, rng=None, prefix="", plane_scale=0.1):
        rng = rng if rng is not None else np.random.default_rng(0)
        if len(levels) < 2:
            raise ValueError("a multi-scale HexPlane needs at least two levels")
        self.prefix = prefix
        self.levels = [
            HexPlaneLevel.create(n, t, f, rng, prefix=f"{prefix}l{i}.", scale=plane_scale)
            for i, (n, t, f) in enumerate(levels)
        ]
        width = sum(lv.width for lv in self.levels)
        self.head = [
            _dense(width, hidden, rng, f"{prefix}head0"),
            _dense(hidden, n_out, rng, f"{prefix}head1"),
        ]

    @property
    def feature_width(self):
        return sum(lv.width for lv in self.levels)

    def parameters(self):
        out = {}
        for lv in self.levels:
            for p in lv.planes.values():
                out[p.name] = p
        for w, b in self.head:
            out[w.name] = w
            out[b.name] = b
        return out

    def sample_features(self, u, t_norm):
        """Concatenated plane features at unit-cube points ``u`` (N, 3), times (N,)."""
        coords4 = np.concatenate([np.asarray(u, float), np.asarray(t_norm, float).reshape(-1, 1)], axis=1)
        coords4 = np.clip(coords4, 0.0, 1.0)
        feats = []
        for lv in self.levels:
            feats.extend(lv.features(coords4))
        return ad.concat(feats, axis=1)

    def __call__(self, u, t_norm):
        h = self.sample_features(u, t_norm)
        (w0, b0), (w1, b1) = self.head
        h = ad.tanh(ad.affine(h, w0, b0))
        return ad.affine(h, w1, b1)


def _dense(n_in, n_out, rng, name, zero=False):
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        w = rng.standard_normal((n_in, n_out)) * np.sqrt(1.0 / n_in)
    return ad.Parameter(w, f"{name}.w"), ad.Parameter(np.zeros(n_out), f"{name}.b")


def default_levels(n_frames, spatial=(32, 128), channels=8):
    """Coarse level at a quarter of the frame count, fine level at full count."""
    temporal = (max(2, -(-n_frames // 4)), max(2, n_frames))
    return [(s, t, channels) for s, t in zip(spatial, temporal)]


class FieldHeads:
    """Two independent multi-scale HexPlanes: density (1 output) and colour (3)."""

    def __init__(self, levels, hidden=64, rng=None, density_bias=-1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.density = MultiScaleHexPlane(levels, 1, hidden, rng, prefix="density.")
        self.colour = MultiScaleHexPlane(levels, 3, hidden, rng, prefix="colour.")
        self.density.head[1][1].value[:] = density_bias

    def parameters(self):
        return {**self.density.parameters(), **self.colour.parameters()}

    def density_raw(self, u, t_norm):
        return self.density(u, t_norm)[:, 0]

    def colour_raw(self, u, t_norm):
        return self.colour(u, t_norm)


def evaluate_field(heads, u, t_norm):
    """Colour in [0, 1]^3 (sigmoid) and density >= 0 (softplus) per point."""
    sigma = ad.softplus(heads.density_raw(u, t_norm))
    colour = ad.sigmoid(heads.colour_raw(u, t_norm))
    return colour, sigma
