import pytest

from actionseg.config import (
    DEFAULT_EPOCHS,
    ConfigError,
    RunConfig,
    StageConfig,
    config_from_dict,
    dump_config,
    load_config,
)


def test_defaults():
    cfg = config_from_dict({})
    assert {s: c.epochs for s, c in cfg.stages.items()} == DEFAULT_EPOCHS
    g = cfg.stage("global")
    assert (g.batch_size, g.lambda_pl, g.lambda_anco, g.theta) == (6, 1.0, 1.0, 0.97)
    assert (g.tau_teacher, g.tau_student, g.bank_size) == (0.01, 0.1, 36)
    assert (g.learning_rate, g.sgd_momentum, g.weight_decay, g.ema_momentum) == (0.01, 0.9, 1e-4, 0.99)


def test_shared_and_stage_overrides():
    cfg = config_from_dict({"seed": 4, "batch_size": 3, "stages": {"finetune": {"batch_size": 2}}})
    assert cfg.stage("global").batch_size == 3
    assert cfg.stage("finetune").batch_size == 2
    assert all(s.seed == 4 for s in cfg.stages.values())


def test_unknown_keys_rejected():
    for raw in ({"bogus": 1}, {"scene": {"bogus": 1}}, {"stages": {"extra": {}}},
                {"stages": {"local": {"bogus": 1}}}):
        with pytest.raises(ConfigError):
            config_from_dict(raw)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        StageConfig(epochs=0)
    with pytest.raises(ConfigError):
        StageConfig(lambda_pl=-1.0)
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"num_classes": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"scene": {"frequencies": [0.5, 0.5, 0.5, 0.5]}})


def test_steps_for():
    assert StageConfig(epochs=2).steps_for(190) == 2 * 32
    assert StageConfig(epochs=3, steps_per_epoch=5).steps_for(190) == 15


def test_yaml_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 2, "num_samples": 50, "scene": {"noise": 0.05},
                            "stages": {"local": {"epochs": 7}}})
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("seed: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_with_seed():
    cfg = RunConfig().with_seed(9)
    assert cfg.seed == 9 and all(s.seed == 9 for s in cfg.stages.values())
