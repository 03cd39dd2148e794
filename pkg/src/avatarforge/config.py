"""Engine configuration: one TOML file mapped onto validated dataclasses.

Every key is declared here with its default; unknown keys in a config file
are rejected rather than ignored, so typos fail loudly. Defaults encode the
full-scale training recipe; the shipped ``configs/desk.toml`` overrides the
expensive knobs down to minutes-scale runs with the same code paths.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import tomli


@dataclass
class CameraConfig:
    """Spherical sampling ranges; elevation is polar angle from +y."""

    radius_range: tuple = (1.0, 2.0)
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (60.0, 120.0)
    fov_range: tuple = (40.0, 70.0)
    face_focus_prob: float = 0.2
    horizontal_jitter: float = 0.05
    face_radius_scale: float = 0.4


@dataclass
class PoseConfig:
    canonical_name: str = "a"  # pose the canonical stage trains in
    canonical_fraction: float = 0.3  # curriculum: share of steps on presets
    canonical_poses: tuple = ("a", "t", "y", "stride")
    expression_scale: float = 1.0


@dataclass
class GuidanceConfig:
    kind: str = "oracle"  # "oracle" or "external"
    cfg_scale: float = 50.0
    texture_seed: int = 0  # seeds the oracle target texture
    address: str = ""  # unix socket path for kind = "external"


@dataclass
class SdsConfig:
    t_range: tuple = (0.02, 0.98)
    chain_xt: bool = False  # multiply in d x_t / d x = sqrt(abar_t)
    weight: str = "one"  # w(t); only the constant weighting ships


@dataclass
class FieldConfig:
    n_bands: int = 6
    hidden: tuple = (48, 48, 48)
    n_samples: int = 32
    dtype: str = "float32"
    pad: float = 0.1


@dataclass
class PretrainConfig:
    steps: int = 350
    resolution: int = 128
    n_rays: int = 5000
    lr: float = 8e-3
    lambda_depth: float = 1.0


@dataclass
class Stage1Config:
    steps: int = 15000
    resolution_start: int = 64
    resolution_end: int = 512
    lambda_geo: float = 1.0
    lr: float = 8e-3
    lr_decay: float = 1.0  # final lr fraction, cosine ramp; 1 = constant
    geo_samples: int = 256
    checkpoint_interval: int = 0  # steps between .nfck snapshots; 0 = end only


@dataclass
class Stage2Config:
    steps: int = 15000
    resolution: int = 512
    grid_resolution: int = 96  # density-extraction grid
    density_threshold: float = 2.5
    bound_parts: tuple = ("hand_l", "hand_r", "face")
    gaussians_per_triangle: int = 1
    knn_neighbors: int = 16
    knn_iterations: int = 10
    deform_bands: int = 4
    deform_hidden: tuple = (64, 64)
    deform_output_scale: float = 0.05
    # Per-attribute-group learning rates; positions move slower than colors.
    lr_position: float = 2e-4
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-2
    lr_part_shape: float = 2e-3
    lr_deform: float = 1e-3
    lr_decay: float = 1.0  # final lr fraction for every group; 1 = constant
    checkpoint_interval: int = 0  # steps between .hga snapshots; 0 = end only


@dataclass
class EngineConfig:
    seed: int = 0
    camera: CameraConfig = field(default_factory=CameraConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sds: SdsConfig = field(default_factory=SdsConfig)
    field_model: FieldConfig = field(default_factory=FieldConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def validate(self) -> None:
        def check(cond, msg):
            if not cond:
                raise ValueError(f"config: {msg}")

        for name, lo_hi in (("radius_range", self.camera.radius_range),
                            ("azimuth_range", self.camera.azimuth_range),
                            ("elevation_range", self.camera.elevation_range),
                            ("fov_range", self.camera.fov_range),
                            ("t_range", self.sds.t_range)):
            check(len(lo_hi) == 2 and lo_hi[0] <= lo_hi[1],
                  f"{name} must be (lo, hi) with lo <= hi")
        check(0.0 <= self.camera.face_focus_prob <= 1.0,
              "face_focus_prob must lie in [0, 1]")
        check(self.camera.horizontal_jitter >= 0.0, "horizontal_jitter must be >= 0")
        check(0.0 <= self.sds.t_range[0] and self.sds.t_range[1] <= 1.0,
              "t_range must lie inside [0, 1]")
        check(self.sds.weight == "one", "only weight = 'one' is implemented")
        check(0.0 <= self.pose.canonical_fraction <= 1.0,
              "canonical_fraction must lie in [0, 1]")
        check(self.guidance.kind in ("oracle", "external"),
              "guidance.kind must be 'oracle' or 'external'")
        check(self.guidance.kind != "external" or self.guidance.address,
              "external guidance needs an address")
        # Step counts may be zero (pretrain-only runs) but never negative.
        for name in ("pretrain", "stage1", "stage2"):
            check(getattr(self, name).steps >= 0, f"{name}.steps must be >= 0")
        for name, res in (("pretrain.resolution", self.pretrain.resolution),
                          ("stage1.resolution_start", self.stage1.resolution_start),
                          ("stage1.resolution_end", self.stage1.resolution_end),
                          ("stage2.resolution", self.stage2.resolution)):
            check(64 <= res <= 512 and (res & (res - 1)) == 0,
                  f"{name} must be a power of two in [64, 512]")
        check(self.stage1.resolution_start <= self.stage1.resolution_end,
              "stage1 resolution schedule must not decrease")
        check(self.stage1.lambda_geo >= 0.0, "lambda_geo must be >= 0")
        check(self.stage2.grid_resolution >= 2, "grid_resolution must be >= 2")
        check(self.stage2.gaussians_per_triangle in (1, 3),
              "gaussians_per_triangle must be 1 or 3")
        check(self.stage2.knn_neighbors >= 1, "knn_neighbors must be >= 1")
        check(self.stage2.knn_iterations >= 0, "knn_iterations must be >= 0")
        for f in dataclasses.fields(Stage2Config):
            if f.name.startswith("lr_"):
                check(getattr(self.stage2, f.name) > 0.0, f"{f.name} must be > 0")
        check(self.stage1.lr > 0.0 and self.pretrain.lr > 0.0,
              "learning rates must be > 0")
        for name, decay in (("stage1", self.stage1.lr_decay),
                            ("stage2", self.stage2.lr_decay)):
            check(0.0 < decay <= 1.0, f"{name}.lr_decay must lie in (0, 1]")
        check(self.field_model.dtype in ("float32", "float64"),
              "field dtype must be float32 or float64")


def _coerce(value, default, path: str):
    """Coerce a TOML value to the type of the default; reject mismatches."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"config key {path} must be a boolean")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {path} must be a number")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {path} must be an integer")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"config key {path} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"config key {path} must be an array")
        kind = type(default[0]) if default else float
        return tuple(_coerce(v, kind(), f"{path}[{i}]") for i, v in enumerate(value))
    raise ValueError(f"config key {path} has unsupported type")


def _apply(obj, data: dict, prefix: str = "") -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ValueError(f"unknown config key: {path}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ValueError(f"config key {path} must be a table")
            _apply(current, value, prefix=f"{path}.")
        else:
            setattr(obj, key, _coerce(value, current, path))


def config_from_dict(data: dict) -> EngineConfig:
    """Build a validated config from nested dicts (TOML-shaped)."""
    cfg = EngineConfig()
    _apply(cfg, data)
    cfg.validate()
    return cfg


def load_config(path) -> EngineConfig:
    """Parse a TOML file into a validated EngineConfig."""
    with open(path, "rb") as f:
        data = tomli.load(f)
    return config_from_dict(data)


def config_snapshot(cfg: EngineConfig) -> dict:
    """Nested plain-dict view of a config (tuples as lists), log-friendly."""
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj
    return convert(cfg)
