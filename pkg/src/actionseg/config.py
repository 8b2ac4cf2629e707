"""Run configuration: scene generation, model sizes and per-stage settings.

A run is described by one YAML file.  Top-level keys other than ``scene``,
``model`` and ``stages`` set defaults shared by all stages; entries under
``stages.<id>`` override them for that stage only.  Unknown keys are an error.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .model import ModelDims
from .synthdata import SceneConfig, SceneConfigError

STAGES = ("global", "local", "finetune")
DEFAULT_EPOCHS = {"global": 100, "local": 100, "finetune": 200}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: str = "global"
    epochs: int = 100
    batch_size: int = 6
    steps_per_epoch: int | None = None
    learning_rate: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_momentum: float = 0.99
    lambda_distill: float = 1.0
    lambda_pl: float = 1.0
    lambda_anco: float = 1.0
    ce_weight: float = 0.5
    dice_weight: float = 0.5
    tau_teacher: float = 0.01
    tau_student: float = 0.1
    tau_an: float = 0.5
    theta: float = 0.97
    num_queries: int = 256
    num_keys: int = 512
    bank_size: int = 36
    anchors_per_step: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if min(self.lambda_distill, self.lambda_pl, self.lambda_anco,
               self.ce_weight, self.dice_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        if min(self.tau_teacher, self.tau_student, self.tau_an, self.learning_rate) <= 0:
            raise ConfigError("temperatures and learning rate must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must be in [0, 1]")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must be in [0, 1]")
        if min(self.num_queries, self.num_keys, self.bank_size, self.anchors_per_step) < 1:
            raise ConfigError("budgets and bank sizes must be >= 1")

    def steps_for(self, num_unlabeled: int) -> int:
        spe = self.steps_per_epoch or max(1, math.ceil(num_unlabeled / self.batch_size))
        return self.epochs * spe


@dataclass
class RunConfig:
    seed: int = 0
    num_samples: int = 200
    num_test: int = 40
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelDims = field(default_factory=ModelDims)
    stages: dict[str, StageConfig] = field(
        default_factory=lambda: {s: StageConfig(stage=s, epochs=DEFAULT_EPOCHS[s]) for s in STAGES})

    def stage(self, name: str) -> StageConfig:
        return self.stages[name]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed,
                       stages={k: replace(v, seed=seed) for k, v in self.stages.items()})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_samples": self.num_samples,
            "num_test": self.num_test,
            "scene": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.scene).items()},
            "model": asdict(self.model),
            "stages": {k: {f: v for f, v in asdict(s).items() if f != "stage"}
                       for k, s in self.stages.items()},
        }


_STAGE_KEYS = {f.name for f in fields(StageConfig)} - {"stage"}
_SCENE_KEYS = {f.name for f in fields(SceneConfig)}
_MODEL_KEYS = {f.name for f in fields(ModelDims)}


def _check_keys(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown {where} keys: {sorted(extra)}")


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    top = {"seed", "num_samples", "num_test", "scene", "model", "stages"}
    _check_keys(raw, top | _STAGE_KEYS, "top-level")
    scene_raw = raw.pop("scene", {}) or {}
    model_raw = raw.pop("model", {}) or {}
    stages_raw = raw.pop("stages", {}) or {}
    _check_keys(scene_raw, _SCENE_KEYS, "scene")
    _check_keys(model_raw, _MODEL_KEYS, "model")
    _check_keys(stages_raw, set(STAGES), "stages")
    seed = int(raw.pop("seed", 0))
    num_samples = int(raw.pop("num_samples", 200))
    num_test = int(raw.pop("num_test", 40))
    shared = raw
    try:
        scene = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in scene_raw.items()}).validate()
        model = ModelDims(**model_raw)
        if model.num_classes != scene.num_classes:
            raise ConfigError("model.num_classes must equal scene.num_classes")
        stages = {}
        for s in STAGES:
            over = stages_raw.get(s, {}) or {}
            _check_keys(over, _STAGE_KEYS, f"stages.{s}")
            kw = {"epochs": DEFAULT_EPOCHS[s], "seed": seed, **shared, **over}
            stages[s] = StageConfig(stage=s, **kw)
    except (TypeError, SceneConfigError) as e:
        raise ConfigError(str(e)) from e
    if num_samples < 1 or num_test < 0:
        raise ConfigError("num_samples must be >= 1 and num_test >= 0")
    return RunConfig(seed, num_samples, num_test, scene, model, stages)


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
