"""All learnable state of a fitted scene."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .deform import InvertibleMap
from .fields import FieldHeads, default_levels
from .geometry import WorkspaceBox


@dataclass
class ModelConfig:
    spatial_res: tuple = (32, 128)
    channels: int = 8
    temporal_res: tuple | None = None  # defaults to (ceil(n/4), n)
    head_hidden: int = 64
    density_bias: float = -1.0
    plane_scale: float = 0.1
    n_blocks: int = 6
    deform_hidden: int = 64
    deform_depth: int = 2
    code_dim: int = 16
    seed: int = 0

    def levels(self, n_frames):
        if self.temporal_res is None:
            return default_levels(n_frames, self.spatial_res, self.channels)
        return [(s, t, self.channels) for s, t in zip(self.spatial_res, self.temporal_res)]

    def to_dict(self):
        d = asdict(self)
        d["spatial_res"] = list(self.spatial_res)
        d["temporal_res"] = None if self.temporal_res is None else list(self.temporal_res)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["spatial_res"] = tuple(d["spatial_res"])
        if d.get("temporal_res") is not None:
            d["temporal_res"] = tuple(d["temporal_res"])
        return cls(**d)


@dataclass
class SceneModel:
    fields: FieldHeads
    deform: InvertibleMap
    box: WorkspaceBox
    n_frames: int
    config: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def create(cls, n_frames, box, config=None):
        config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        levels = config.levels(n_frames)
        heads = FieldHeads(levels, config.head_hidden, rng, config.density_bias)
        for mhp in (heads.density, heads.colour):
            for lv in mhp.levels:
                for p in lv.planes.values():
                    p.value *= config.plane_scale / 0.1
        deform = InvertibleMap(
            n_frames, config.n_blocks, config.deform_hidden, config.deform_depth, config.code_dim, rng
        )
        return cls(heads, deform, box, n_frames, config)

    def parameters(self):
        return {**self.fields.parameters(), **self.deform.parameters()}

    def t_norm(self, t):
        return np.asarray(t, float) / max(self.n_frames - 1, 1)

    def state_arrays(self):
        return {k: p.value for k, p in self.parameters().items()}

    def load_arrays(self, arrays):
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}")
            p.value = np.array(arrays[k], dtype=np.float64)
            p.zero_grad()
