"""Run configuration: one JSON file, flag overrides, sub-seeds from one root seed."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import rng as rngmod
from .detector import CTConfig, DetectorConfig
from .env import DEFAULT_GRID, RewardConfig
from .geometry import ZoomSpec
from .scene import SynthSceneConfig
from .training import TrainConfig, zoom_from_dict, zoom_to_dict


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SuiteConfig:
    n_scenes: int = 50
    clusters: tuple[int, int] = (2, 4)
    scene: SynthSceneConfig = field(default_factory=SynthSceneConfig)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    k: int = 7
    grid: tuple[int, int] = DEFAULT_GRID
    zoom: ZoomSpec = field(default_factory=ZoomSpec)
    beta: float = 1.5
    kappa: float = 0.1
    rho: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    ct: CTConfig = field(default_factory=CTConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    scenes: str | None = None
    out: str | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError("grid must be two positive integers")

    @property
    def reward(self) -> RewardConfig:
        return RewardConfig(self.beta, self.kappa, self.rho, self.zoom)

    def seeded(self) -> "RunConfig":
        """Copy whose component seeds are derived from the root seed."""
        return replace(
            self,
            train=replace(self.train, seed=rngmod.child_seed(self.seed, "rollout")),
            detector=replace(self.detector, seed=rngmod.child_seed(self.seed, "detector")),
            ct=replace(self.ct, seed=rngmod.child_seed(self.seed, "ct")),
        )

    @property
    def scene_seed(self) -> int:
        return rngmod.child_seed(self.seed, "scene")

    def to_dict(self) -> dict:
        doc = {
            "seed": self.seed,
            "k": self.k,
            "grid": list(self.grid),
            "zoom": zoom_to_dict(self.zoom),
            "reward": {"beta": self.beta, "kappa": self.kappa, "rho": self.rho},
            "train": {k: v for k, v in asdict(self.train).items() if k != "seed"},
            "detector": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(self.detector).items() if k != "seed"},
            "ct": {k: v for k, v in asdict(self.ct).items() if k != "seed"},
            "suite": {
                "n_scenes": self.suite.n_scenes,
                "clusters": list(self.suite.clusters),
                "scene": {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in asdict(self.suite.scene).items() if k not in ("seed", "source_id")},
            },
            "paths": {"scenes": self.scenes, "out": self.out, "checkpoint": self.checkpoint},
        }
        return _jsonable(doc)


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _build(cls, doc: dict, where: str, skip=("seed",)):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {"seed", "k", "grid", "zoom", "reward", "train", "detector", "ct", "suite", "paths"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs = {}
    try:
        if "seed" in doc:
            kwargs["seed"] = int(doc["seed"])
        if "k" in doc:
            kwargs["k"] = int(doc["k"])
        if "grid" in doc:
            kwargs["grid"] = tuple(int(v) for v in doc["grid"])
        if "zoom" in doc:
            kwargs["zoom"] = zoom_from_dict(doc["zoom"])
        reward = doc.get("reward", {})
        for key in ("beta", "kappa", "rho"):
            if key in reward:
                kwargs[key] = float(reward[key])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    paths = doc.get("paths", {})
    if not isinstance(paths, dict) or set(paths) - {"scenes", "out", "checkpoint"}:
        raise ConfigError("paths: expected an object with scenes / out / checkpoint")
    for key, value in paths.items():
        if value is not None:
            kwargs[key] = str(value)
    if "train" in doc:
        kwargs["train"] = _build(TrainConfig, doc["train"], "train")
    if "detector" in doc:
        kwargs["detector"] = _build(DetectorConfig, doc["detector"], "detector")
    if "ct" in doc:
        kwargs["ct"] = _build(CTConfig, doc["ct"], "ct")
    if "suite" in doc:
        suite = doc["suite"]
        if not isinstance(suite, dict):
            raise ConfigError("suite: expected an object")
        scene = _build(SynthSceneConfig, suite.get("scene", {}), "suite.scene", skip=("seed", "source_id"))
        try:
            kwargs["suite"] = SuiteConfig(int(suite.get("n_scenes", 50)), tuple(suite.get("clusters", (2, 4))), scene)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"suite: {exc}") from None
    try:
        cfg = RunConfig(**kwargs)
        cfg.reward  # validates beta / kappa / rho
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    return config_from_dict(doc)


def write_config(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return path
