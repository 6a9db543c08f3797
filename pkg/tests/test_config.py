import pytest
import yaml

from umd.config import RunConfig, apply_overrides, load_config, parse_set_args, save_config, scaled_lr
from umd.exceptions import ConfigError


def test_reference_learning_rate_rule():
    cfg = RunConfig.reference()
    assert cfg.batch_size == 1024
    assert cfg.lr == pytest.approx(6e-4, rel=1e-12)
    assert scaled_lr(1.5e-4, 256) == 1.5e-4


def test_reference_recipe_fields():
    cfg = RunConfig.reference()
    assert (cfg.epochs, cfg.warmup_epochs, cfg.grad_clip) == (800, 40, 1.0)
    assert (cfg.optimizer.weight_decay, cfg.optimizer.beta1, cfg.optimizer.beta2) == (0.05, 0.9, 0.95)
    assert cfg.finetune.ema_decay == 0.00025 and cfg.finetune.label_dropout == 0.1
    assert (cfg.objective.r_t0, cfg.objective.m_t0, cfg.objective.m_tge1) == (0.5, 0.75, 0.375)


def test_desk_keeps_warmup_fraction():
    cfg = RunConfig.desk()
    assert cfg.warmup_epochs / cfg.epochs == pytest.approx(40 / 800)


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="objective.r_t1"):
        RunConfig.desk().replace(**{"objective.r_t1": 0.2})


@pytest.mark.parametrize("key,raw,expected", [
    ("objective.r_t0", "0.25", 0.25),
    ("model.use_adaln", "false", False),
    ("T", "500", 500),
    ("optimizer.base_lr", "none", None),
    ("model.n_classes", "10", 10),
    ("schedule", "linear", "linear"),
])
def test_string_overrides_are_coerced(key, raw, expected):
    cfg = apply_overrides(RunConfig.desk(), {key: raw})
    assert cfg.to_flat()[key] == expected


@pytest.mark.parametrize("key,raw", [("T", "1.5"), ("model.use_adaln", "1"), ("objective.r_t0", "abc")])
def test_bad_values_rejected(key, raw):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig.desk(), {key: raw})


def test_invalid_ranges_rejected():
    with pytest.raises(ConfigError):
        RunConfig.desk().replace(**{"objective.r_t0": 1.5})
    with pytest.raises(ConfigError):
        RunConfig.desk().replace(schedule="quadratic")
    with pytest.raises(ConfigError):
        RunConfig.desk().replace(warmup_epochs=500)


def test_head_mode_follows_objective():
    cfg = RunConfig.desk().replace(**{"objective.head_mode": "x0_only"})
    assert cfg.model.head_mode == "x0_only"


def test_save_load_round_trip(tmp_path):
    cfg = RunConfig.desk().replace(**{"objective.m_tge1": 0.5, "seed": 3})
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert load_config(tmp_path / "c.yaml").to_flat() == cfg.to_flat()


def test_nested_yaml_is_accepted(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"objective": {"r_t0": 0.1}, "epochs": 20}))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.objective.r_t0 == 0.1 and cfg.epochs == 20


def test_malformed_files(tmp_path):
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml")


def test_parse_set_args():
    assert parse_set_args(["a.b=1", "c = x=y"]) == {"a.b": "1", "c": "x=y"}
    with pytest.raises(ConfigError):
        parse_set_args(["novalue"])
