"""Run configuration: one YAML file with a section per subsystem."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from . import nlp
from .env import NoiseConfig, RandomizationConfig
from .jump_to import POLYGON_PRESETS, CostWeights, JumpCommand, ToConfig
from .ppo import PpoConfig
from .rewards import RewardConfig
from .robot_model import RobotMorphology
from .simulator import ContactParams, PdParams, SimParams, TerrainParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlanSection:
    dx: float = 0.8
    dy: float = 0.0
    dz: float = 0.0
    polygon: str = "homing"
    polygon_offsets: tuple | None = None

    def command(self) -> JumpCommand:
        if self.polygon_offsets is not None:
            offsets = self.polygon_offsets
        elif self.polygon in POLYGON_PRESETS:
            offsets = POLYGON_PRESETS[self.polygon]
        else:
            raise ConfigError(f"unknown polygon preset {self.polygon!r}; choose from {sorted(POLYGON_PRESETS)}")
        return JumpCommand([self.dx, self.dy, self.dz], offsets)


@dataclass(frozen=True)
class SimSection:
    dt: float = 0.001
    decimation: int = 20
    rotor_inertia: float = 0.0025
    kn: float = 1e4
    dn: float = 100.0
    kt: float = 5e3
    kp: float = 20.0
    kd: float = 0.8
    # stiffer gains for open-loop replay of a plan
    rollout_kp: float = 300.0
    rollout_kd: float = 4.0

    def params(self) -> SimParams:
        return SimParams(self.dt, self.decimation, self.rotor_inertia, ContactParams(self.kn, self.dn, self.kt))

    def policy_pd(self) -> PdParams:
        return PdParams(self.kp, self.kd)

    def rollout_pd(self) -> PdParams:
        return PdParams(self.rollout_kp, self.rollout_kd)


@dataclass(frozen=True)
class EpisodeSection:
    reference_dt: float = 0.02
    pre_trigger: float = 0.5
    post_landing: float = 1.5
    max_episode_s: float = 3.0
    action_scale: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    morphology: RobotMorphology = field(default_factory=RobotMorphology)
    to: ToConfig = field(default_factory=ToConfig)
    plan: PlanSection = field(default_factory=PlanSection)
    terrain: TerrainParams = field(default_factory=TerrainParams)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    sim: SimSection = field(default_factory=SimSection)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, ppo=replace(self.ppo, seed=seed))


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def _check_keys(section: str, d, cls) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping, got {type(d).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    return dict(d)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _build(section: str, d, cls):
    kw = _tuples(_check_keys(section, d, cls))
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def _build_to(d) -> ToConfig:
    d = _check_keys("to", d, ToConfig)
    w = d.pop("weights", None)
    if isinstance(w, (list, tuple)):
        if len(w) != 8:
            raise ConfigError("to.weights as a list needs 8 entries (w1..w8)")
        weights = CostWeights(*[float(v) for v in w])
    else:
        weights = _build("to.weights", w, CostWeights)
    solver = _build("to.solver", d.pop("solver", None), nlp.SolverOptions)
    try:
        return ToConfig(weights=weights, solver=solver, **_tuples(d))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section 'to': {exc}") from exc


def _build_randomization(d) -> RandomizationConfig:
    d = _check_keys("randomization", d, RandomizationConfig)
    noise = _build("randomization.noise", d.pop("noise", None), NoiseConfig)
    return RandomizationConfig(noise=noise, **_tuples(d))


def config_from_dict(d: dict | None) -> RunConfig:
    d = _check_keys("<root>", d or {}, RunConfig)
    ppo_d = _check_keys("ppo", d.get("ppo"), PpoConfig)
    seed = int(d.get("seed", 0))
    ppo_d.setdefault("seed", seed)
    return RunConfig(
        morphology=_build("morphology", d.get("morphology"), RobotMorphology),
        to=_build_to(d.get("to")),
        plan=_build("plan", d.get("plan"), PlanSection),
        terrain=_build("terrain", d.get("terrain"), TerrainParams),
        reward=_build("reward", d.get("reward"), RewardConfig),
        ppo=_build("ppo", ppo_d, PpoConfig),
        sim=_build("sim", d.get("sim"), SimSection),
        episode=_build("episode", d.get("episode"), EpisodeSection),
        randomization=_build_randomization(d.get("randomization")),
        seed=seed,
    )


def load_config(path=None) -> RunConfig:
    """Defaults, overridden by the YAML file at ``path`` when given."""
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(data)
