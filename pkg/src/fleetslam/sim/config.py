"""Mission configuration with YAML round-tripping."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..frontend import CfarParams
from ..graph import KeyframePolicy
from ..inlier import GateConfig
from .motion import MotionNoise
from .world import SonarParams

SCENARIOS = ("crossing", "drift", "disjoint", "corridor")


@dataclass(frozen=True)
class CaseFlags:
    use_scene_image: bool
    use_pcm: bool
    compression: bool
    resend: bool


# ablation cases: 1 no scene image / no PCM, 2 no PCM, 3 full with raw
# clouds, 4 full with compression, 5 as 3 without pose re-send
CASES = {
    1: CaseFlags(False, False, False, True),
    2: CaseFlags(True, False, False, True),
    3: CaseFlags(True, True, False, True),
    4: CaseFlags(True, True, True, True),
    5: CaseFlags(True, True, False, False),
}


@dataclass
class ScenarioConfig:
    name: str = "crossing"
    keyframes_per_robot: int = 100
    step_length: float = 2.2
    width: float = 60.0
    height: float = 40.0
    corner_radius: float = 6.0
    n_features: int = 220
    world_margin: float = 25.0
    clearance: float = 3.0


# geometry overrides per scenario; anything not listed keeps the crossing default
SCENARIO_PRESETS: dict[str, dict[str, Any]] = {
    "crossing": {},
    "drift": dict(width=40.0, height=26.0, corner_radius=5.0, n_features=140),
    "corridor": dict(width=90.0, height=0.8, corner_radius=0.35, n_features=300, world_margin=20.0),
    "disjoint": dict(width=40.0, height=30.0, n_features=120, world_margin=15.0),
}


DRIFT_ODOMETRY: dict[str, tuple[float, float, float]] = {"drift": (0.1, 0.1, 2.0)}


def scenario_preset(name: str, **overrides: Any) -> ScenarioConfig:
    if name not in SCENARIO_PRESETS:
        raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    return ScenarioConfig(name=name, **{**SCENARIO_PRESETS[name], **overrides})


@dataclass
class NoiseConfig:
    odometry: tuple[float, float, float] = (0.05, 0.05, 1.0)  # m, m, deg per step
    process: tuple[float, float, float] = (0.02, 0.02, 0.2)

    def odometry_noise(self) -> MotionNoise:
        return MotionNoise.from_degrees(*self.odometry)

    def process_noise(self) -> MotionNoise:
        return MotionNoise.from_degrees(*self.process)


@dataclass
class FactorNoiseConfig:
    odom: tuple[float, float, float] = (0.05, 0.05, 1.0)  # m, m, deg
    prior: tuple[float, float, float] = (0.001, 0.001, 0.01)
    partner: tuple[float, float, float] = (0.05, 0.05, 0.5)
    registration_scale: float = 0.5  # sigma_t = scale * rmse
    registration_floor: float = 0.02  # m
    registration_lever: float = 10.0  # sigma_theta = sigma_t / lever


@dataclass
class MissionConfig:
    case: int = 4
    robots: int = 2
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sonar: SonarParams = field(default_factory=SonarParams)
    cfar: CfarParams = field(default_factory=lambda: CfarParams(10, 2, 1e-4))
    frontend_voxel: float = 0.3
    compression_resolution: float = 0.25
    gates: GateConfig = field(default_factory=GateConfig)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    factor_noise: FactorNoiseConfig = field(default_factory=FactorNoiseConfig)
    max_tree_distance: float = 25.0
    tree_neighbors: int = 1
    ir_min_clique: int = 2
    nssm_min_gap: int = 10
    nssm_radius: float = 8.0
    nssm_max_candidates: int = 2
    local_radii: tuple[float, ...] = (2.0, 1.0, 0.5)  # staged ICP for SSM / NSSM
    ssm_max_deviation: tuple[float, float] = (1.0, 5.0)  # m, deg from odometry
    resend_threshold: tuple[float, float] = (0.5, 5.0)  # m, deg
    tick_seconds: float = 10.0
    flush_ticks: int = 3
    per_recipient_metering: bool = False
    # the channel is reliable and instantaneous; these are placeholders for a lossy model
    channel_loss: float = 0.0
    channel_latency: float = 0.0
    # None means "follow the case"
    compression: bool | None = None
    resend: bool | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.case not in CASES:
            raise ValueError(f"case must be one of 1..5, got {self.case}")
        if self.robots < 2:
            raise ValueError("a mission needs at least 2 robots")
        if self.robots > 255:
            raise ValueError("robot ids must fit in u8")
        if self.scenario.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario.name!r}; choose from {SCENARIOS}")
        if self.scenario.keyframes_per_robot < 1 or self.scenario.step_length <= 0:
            raise ValueError("scenario length must be positive")
        if self.tick_seconds <= 0:
            raise ValueError("tick_seconds must be positive")
        if self.channel_loss != 0.0 or self.channel_latency != 0.0:
            raise ValueError("channel loss and latency are not modelled; both must be 0")
        if not self.local_radii or min(self.local_radii) <= 0:
            raise ValueError("local_radii must be a non-empty list of positive radii")
        if self.frontend_voxel <= 0 or self.compression_resolution <= 0:
            raise ValueError("voxel sizes must be positive")

    @property
    def flags(self) -> CaseFlags:
        base = CASES[self.case]
        return CaseFlags(
            base.use_scene_image,
            base.use_pcm,
            base.compression if self.compression is None else self.compression,
            base.resend if self.resend is None else self.resend,
        )


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def apply_scenario(cfg: MissionConfig, name: str) -> MissionConfig:
    """Switch ``cfg`` to a scenario preset.

    The drift preset also doubles the per-step odometry noise, and the
    odometry factor covariance with it, so uncorrected dead reckoning
    wanders far enough for re-sent poses to matter.
    """
    out = dataclasses.replace(cfg, scenario=scenario_preset(name, keyframes_per_robot=cfg.scenario.keyframes_per_robot))
    if name in DRIFT_ODOMETRY:
        sig = DRIFT_ODOMETRY[name]
        out = dataclasses.replace(
            out,
            noise=dataclasses.replace(cfg.noise, odometry=sig),
            factor_noise=dataclasses.replace(cfg.factor_noise, odom=sig),
        )
    return out


def config_to_dict(cfg: MissionConfig) -> dict:
    d = _to_plain(cfg)
    d["sonar"]["fov"] = math.degrees(cfg.sonar.fov)  # degrees on disk
    d["keyframe"]["min_rotation"] = math.degrees(cfg.keyframe.min_rotation)
    return d


def _build(cls, data: dict, base: Any = None):
    """Overlay ``data`` on ``base`` (default-constructed when omitted)."""
    base = cls() if base is None else base
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in names:
            raise ValueError(f"unknown config key {cls.__name__}.{k}")
        sub = _NESTED.get(cls, {}).get(k)
        if sub is not None:
            kwargs[k] = _build(sub, v or {}, getattr(base, k))
        elif isinstance(getattr(base, k), tuple):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    return dataclasses.replace(base, **kwargs)


_NESTED = {
    MissionConfig: {
        "scenario": ScenarioConfig,
        "sonar": SonarParams,
        "cfar": CfarParams,
        "gates": GateConfig,
        "keyframe": KeyframePolicy,
        "noise": NoiseConfig,
        "factor_noise": FactorNoiseConfig,
    }
}


def config_from_dict(data: dict) -> MissionConfig:
    data = dict(data or {})
    if "sonar" in data and data["sonar"] and "fov" in data["sonar"]:
        data["sonar"] = dict(data["sonar"], fov=math.radians(data["sonar"]["fov"]))
    if "keyframe" in data and data["keyframe"] and "min_rotation" in data["keyframe"]:
        data["keyframe"] = dict(data["keyframe"], min_rotation=math.radians(data["keyframe"]["min_rotation"]))
    return _build(MissionConfig, data)


def load_config(path: str | Path) -> MissionConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def dump_config(cfg: MissionConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def save_config(cfg: MissionConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
