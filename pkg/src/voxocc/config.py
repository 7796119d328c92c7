"""Run configuration: one flat dataclass, JSON round-trip, strict parsing.

Unknown keys in a config file are an error, not a warning; silent typos in
experiment configs are how results stop meaning anything.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import json

from .errors import ContractViolation
from .geometry import VoxelGridSpec
from .synth import N_CLASSES, N_DET_CLASSES


def _default_grid() -> VoxelGridSpec:
    return VoxelGridSpec(-10.0, 10.0, -10.0, 10.0, -2.0, 2.0, 40, 40, 8)


@dataclass
class RunConfig:
    seed: int = 0
    grid: VoxelGridSpec = field(default_factory=_default_grid)
    n_cameras: int = 6
    image_height: int = 128
    image_width: int = 128

    # model widths
    n_levels: int = 3            # image pyramid levels feeding the lift
    feat_channels: int = 32
    trunk_base: int = 16
    decoder_channels: int = 16
    head_hidden: int = 16
    n_classes: int = N_CLASSES
    n_det_classes: int = N_DET_CLASSES
    n_queries: int = 100
    n_layers: int = 6            # detection refinement layers
    attn_group: int = 4          # self-attention cell size in base voxels
    box_size_bias: tuple = (1.5, 1.5, 1.5)

    # ablation toggles
    use_encoder3d: bool = True
    use_decoder3d: bool = True
    use_aux: bool = True
    use_self_attention: bool = True
    use_visual_ca: bool = True
    use_bev_ca: bool = True
    use_volume_ca: bool = True

    # losses
    lambda_occ: float = 2.0
    focal_gamma_occ: float = 2.0
    focal_alpha_occ: float = 1.0
    focal_gamma_det: float = 2.0
    focal_alpha_det: float = 0.25
    match_w_class: float = 1.0
    match_w_box: float = 0.25

    # optimizer
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    # training
    steps: int = 300
    log_every: int = 10
    grid_mask_prob: float = 0.0  # augmentation off by default at this scale
    grid_mask_ratio: float = 0.5

    def validate(self) -> "RunConfig":
        if self.n_levels < 1:
            raise ContractViolation("config: n_levels must be >= 1")
        for n, name in zip(self.grid.dims, "xyz"):
            if n % 8:
                raise ContractViolation(
                    f"config: grid n{name}={n} must be divisible by 8 "
                    "(three 2x reductions)")
        stride = 8 * 2 ** (self.n_levels - 1)
        if self.image_height % stride or self.image_width % stride:
            raise ContractViolation(
                f"config: image size must be divisible by {stride}")
        if not (0 < self.n_det_classes < self.n_classes):
            raise ContractViolation("config: det classes must be a proper "
                                    "subset of semantic classes")
        if self.n_queries < 1 or self.n_layers < 1:
            raise ContractViolation("config: queries and layers must be "
                                    "positive")
        if self.lambda_occ < 0 or self.lr <= 0:
            raise ContractViolation("config: bad lambda/lr")
        if not (0.0 <= self.grid_mask_prob <= 1.0):
            raise ContractViolation("config: grid_mask_prob out of range")
        if self.use_aux and not (self.use_visual_ca or self.use_bev_ca
                                 or self.use_volume_ca):
            raise ContractViolation(
                "config: aux branch needs at least one cross-attention "
                "module")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {"x_min": self.grid.x_min, "x_max": self.grid.x_max,
                     "y_min": self.grid.y_min, "y_max": self.grid.y_max,
                     "z_min": self.grid.z_min, "z_max": self.grid.z_max,
                     "resolution": list(self.grid.dims)}
        d["box_size_bias"] = list(self.box_size_bias)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractViolation(f"config: unknown keys {unknown}")
        d = dict(d)
        if "grid" in d:
            g = dict(d["grid"])
            res = g.pop("resolution", None)
            allowed = {"x_min", "x_max", "y_min", "y_max", "z_min", "z_max"}
            bad = sorted(set(g) - allowed)
            if bad or res is None or len(res) != 3:
                raise ContractViolation(
                    f"config: malformed grid section (unknown keys {bad})"
                    if bad else "config: grid needs extents and a 3-value "
                    "resolution")
            d["grid"] = VoxelGridSpec(g["x_min"], g["x_max"], g["y_min"],
                                      g["y_max"], g["z_min"], g["z_max"],
                                      int(res[0]), int(res[1]), int(res[2]))
        if "box_size_bias" in d:
            d["box_size_bias"] = tuple(float(v) for v in d["box_size_bias"])
        return RunConfig(**d).validate()

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1,
                                         sort_keys=True))

    @staticmethod
    def from_json(path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ContractViolation(f"config: invalid JSON in {path}: {e}")
        return RunConfig.from_dict(d)
