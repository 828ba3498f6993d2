"""Run configuration: nested dataclasses with strict loading from dicts / YAML / JSON."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class GridSection:
    L: int = 3
    N0: int = 16
    gamma: float = 1.5


@dataclass
class RaySection:
    total: int = 9600
    keyframes: int = 6
    per_ray: int = 14
    surface: int = 13
    synth_per_ray: int = 24
    sigma_rule: str = "3σ=5cm"
    min_rays_per_object: int = 64
    synth_scale: int = 4  # synthesized views render at 1/synth_scale of the input resolution

    @property
    def sigma(self) -> float:
        return parse_sigma_rule(self.sigma_rule)


@dataclass
class LossSection:
    lambda_color: float = 5.0
    lambda_mask: float = 10.0
    variance_floor: float = 1e-6
    variance_gradient: bool = False


@dataclass
class OptimSection:
    lr_grid: float = 5e-3
    lr_mlp: float = 3.5e-4
    weight_decay: float = 0.1


@dataclass
class ObjmapSection:
    keyframe_every: int = 25
    buffer: int = 20
    min_mask_pixels: int = 100
    box_margin: float = 0.10
    steps_per_frame: int = 3
    voxel: float = 0.01
    min_box_extent: float = 0.02
    extension_hysteresis: int = 1
    depth_filter_alpha: float = 0.0  # 0 disables the outlier prefilter; 1.5 for noisy sensors
    pixel_margin: int = 8
    grid_update: str = "interpolate"  # or "reinit"


@dataclass
class LibrarySection:
    m: int = 3
    sim_threshold: float = 0.7
    fitness_threshold: float = 0.8
    reproj_in_mask: float = 0.90
    depth_tolerance_m: float = 0.02
    freeze_grids: bool = False
    synthesize: bool = True


@dataclass
class MeshSection:
    resolution_m: float = 0.005
    cull_tau_m: float = 0.02


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    rays: RaySection = field(default_factory=RaySection)
    losses: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    objmap: ObjmapSection = field(default_factory=ObjmapSection)
    library: LibrarySection = field(default_factory=LibrarySection)
    mesh: MeshSection = field(default_factory=MeshSection)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``data`` onto ``base`` (defaults when omitted); unknown keys raise."""
        cfg = dataclasses.replace(base) if base is not None else cls()
        return _overlay(cfg, data or {}, "")

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        try:
            return cls.from_dict(data, base)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # conveniences for the numeric modules
    def grid_config(self):
        from .field import GridConfig
        return GridConfig(self.grid.L, self.grid.N0, self.grid.gamma)

    def ray_config(self):
        from .render import RaySampleConfig
        return RaySampleConfig(self.rays.per_ray, self.rays.surface, self.rays.sigma, self.rays.synth_per_ray)

    def loss_weights(self):
        from .render import LossWeights
        return LossWeights(self.losses.lambda_color, self.losses.lambda_mask, self.losses.variance_floor,
                           self.losses.variance_gradient)

    def new_optimizer(self):
        from .render import AdamWState
        return AdamWState(self.optim.lr_grid, self.optim.lr_mlp, self.optim.weight_decay)


def _overlay(obj, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key {name!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _overlay(dataclasses.replace(current), value, name + ".")
        else:
            updates[key] = _coerce(current, value, name)
    return dataclasses.replace(obj, **updates)


def _coerce(current, value, name: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
        if name.endswith("sigma_rule"):
            parse_sigma_rule(value)
        return value
    return value


_SIGMA_RE = re.compile(r"^\s*(\d*(?:\.\d+)?)\s*(?:σ|sigma)\s*=\s*(\d+(?:\.\d+)?)\s*(mm|cm|m)\s*$")


def parse_sigma_rule(rule: str) -> float:
    """``"3σ=5cm"`` -> 0.01667 (metres); ``"sigma=10cm"`` -> 0.1."""
    m = _SIGMA_RE.match(rule)
    if not m:
        raise ConfigError(f"cannot parse sigma rule {rule!r}")
    k = float(m.group(1)) if m.group(1) else 1.0
    scale = {"mm": 1e-3, "cm": 1e-2, "m": 1.0}[m.group(3)]
    return float(m.group(2)) * scale / k
