"""Toy comparison of the three-stage run against a labeled-only baseline.

Both arms share the encoder architecture, initial weights, labeled views
and seeds.  The baseline runs plain supervised steps for as many steps as
the local and fine-tuning stages combined, so each arm sees the labeled set
the same number of times.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import pipeline as P
from .checkpoint import to_bytes
from .config import StageConfig
from .metrics import ClassReport
from .model import ModelDims, init_params
from .synthdata import SceneConfig, generate_dataset

DATA_SEED_BASE = 1000
TEST_SEED_BASE = 90_000


@dataclass(frozen=True)
class ToySetup:
    scene: SceneConfig = field(default_factory=SceneConfig)
    dims: ModelDims = field(default_factory=lambda: ModelDims(embed_dim=32))
    num_samples: int = 200
    num_test: int = 40
    steps: tuple[int, int, int] = (300, 300, 900)
    stage_overrides: dict = field(default_factory=dict)

    def stage_config(self, stage: str, steps: int, seed: int) -> StageConfig:
        kw = self.stage_overrides.get(stage, {})
        return StageConfig(stage=stage, epochs=1, steps_per_epoch=steps, seed=seed, **kw)


@dataclass
class ArmResult:
    report: ClassReport
    seconds: float
    checkpoint: bytes = b""
    runlog_csv: str = ""


@dataclass
class SeedResult:
    seed: int
    baseline: ArmResult
    action: ArmResult

    def gain(self, cls: int | None = None) -> float:
        """Dice improvement in points (macro if ``cls`` is None)."""
        if cls is None:
            return 100.0 * (self.action.report.macro_dice - self.baseline.report.macro_dice)
        return 100.0 * (self.action.report.class_dice()[cls] - self.baseline.report.class_dice()[cls])


def toy_data(setup: ToySetup, seed: int):
    train = generate_dataset(setup.scene, setup.num_samples, seed=DATA_SEED_BASE + seed)
    test = generate_dataset(setup.scene, setup.num_test, seed=TEST_SEED_BASE + seed,
                            labeled_fraction=1.0)
    return train, test


def run_baseline(setup: ToySetup, seed: int, train=None, test=None) -> ArmResult:
    if train is None:
        train, test = toy_data(setup, seed)
    _, L, F = setup.steps
    t0 = time.perf_counter()
    params = init_params(setup.dims, seed=seed)
    P.train_supervised(params, train, setup.stage_config("local", L, seed), L)
    P.train_supervised(params, train, setup.stage_config("finetune", F, seed), F)
    return ArmResult(P.evaluate_params(params, test), time.perf_counter() - t0)


def run_action(setup: ToySetup, seed: int, train=None, test=None) -> ArmResult:
    if train is None:
        train, test = toy_data(setup, seed)
    G, L, F = setup.steps
    t0 = time.perf_counter()
    log = P.RunLog()
    ck, _ = P.stage_global(setup.stage_config("global", G, seed), train, setup.dims,
                           init_seed=seed, runlog=log)
    ck, _ = P.stage_local(setup.stage_config("local", L, seed), ck, train, runlog=log)
    ck, _ = P.stage_finetune(setup.stage_config("finetune", F, seed), ck, train, runlog=log)
    seconds = time.perf_counter() - t0
    return ArmResult(P.evaluate(ck, test), seconds, to_bytes(ck), log.to_csv_text())


def run_seed(setup: ToySetup, seed: int) -> SeedResult:
    train, test = toy_data(setup, seed)
    return SeedResult(seed, run_baseline(setup, seed, train, test),
                      run_action(setup, seed, train, test))


def rarest_class(scene: SceneConfig) -> int:
    fg = scene.frequencies[1:]
    return 1 + min(range(len(fg)), key=lambda i: fg[i])
