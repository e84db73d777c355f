import pytest

from s2d.config import (
    ConfigError,
    ExperimentConfig,
    build_config,
    config_from_dict,
    flatten,
    load_config,
    parse_config_text,
    parse_value,
)


def test_empty_config_is_defaults():
    cfg = build_config({}, env={})
    assert cfg == ExperimentConfig()
    assert cfg.dims() == [32, 128, 128, 8]
    assert cfg.s2d.power == 2.0 and cfg.s2d.strength == 5e-4 and cfg.s2d.pcdr_threshold == 0.95
    assert cfg.optim.lr == 1e-3 and cfg.optim.batch_size == 64 and cfg.steps == 5000


@pytest.mark.parametrize(
    "text, expected",
    [("5", 5), ("5e-4", 5e-4), ("true", True), ("False", False), ("s2d", "s2d"), ('"x"', "x"), ("[1, 2]", [1, 2]), ("none", None)],
)
def test_parse_value(text, expected):
    assert parse_value(text) == expected


def test_parse_config_text():
    text = """
    # comment
    regime = s2d   # trailing comment
    s2d.strength = 1e-3
    model.hidden = [64, 64]
    """
    flat = parse_config_text(text)
    assert flat == {"regime": "s2d", "s2d.strength": 1e-3, "model.hidden": [64, 64]}
    cfg = build_config(flat, env={})
    assert cfg.model.hidden == (64, 64) and cfg.uses_s2d
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("seed = 1\nnot a pair\n")


def test_unknown_field_lists_allowed():
    with pytest.raises(ConfigError, match="s2d.pcdr_threshold"):
        build_config({"s2d.threshold": 0.9}, env={})
    with pytest.raises(ConfigError, match="allowed"):
        build_config({"stepz": 3}, env={})
    with pytest.raises(ConfigError, match="baseline, s2d, qat, qat_s2d"):
        build_config({"regime": "fancy"}, env={})
    with pytest.raises(ConfigError, match="unknown section"):
        build_config({"extra.x": 1}, env={})


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        build_config({"s2d.power": 1.0}, env={})
    with pytest.raises(ConfigError):
        build_config({"quant.eval_bits": ["W9A9"]}, env={})
    with pytest.raises(ConfigError):
        build_config({"steps": -1}, env={})


def test_task_seed_is_derived():
    with pytest.raises(ConfigError, match="set 'seed' instead"):
        build_config({"task.seed": 3}, env={})
    cfg = build_config({"seed": 7}, env={})
    assert cfg.resolved_task().seed == 7
    assert cfg.calibration_seed == 9
    assert "seed" not in cfg.to_dict()["task"]


def test_aliases():
    cfg = build_config({"s2d.tau": 0.9, "s2d.n": 3, "s2d.lambda": 1e-3, "s2d.m": 50}, env={})
    assert (cfg.s2d.pcdr_threshold, cfg.s2d.power, cfg.s2d.strength, cfg.s2d.refresh_interval) == (0.9, 3.0, 1e-3, 50)
    with pytest.raises(ConfigError, match="same field"):
        build_config({"s2d.tau": 0.9, "s2d.pcdr_threshold": 0.8}, env={})


def test_precedence(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("seed = 3\nsteps = 10\n")
    assert load_config(path, env={}).seed == 3
    assert load_config(path, env={"S2D_SEED": "5"}).seed == 5
    assert load_config(path, {"seed": 11}, env={"S2D_SEED": "5"}).seed == 11
    with pytest.raises(ConfigError, match="S2D_SEED"):
        load_config(path, env={"S2D_SEED": "abc"})
    assert build_config({"seed": 2}, env={"S2D_SEED": "8"}).seed == 8


def test_dict_round_trip():
    cfg = build_config({"regime": "qat_s2d", "model.attention_tokens": 4, "quant.calibration_seed": 3}, env={})
    assert config_from_dict(cfg.to_dict()) == cfg
    flat = flatten(cfg)
    assert flat["regime"] == "qat_s2d" and flat["model.attention_tokens"] == 4
