import json

import pytest

from gcav.config import (SCHEMA_VERSION, AttackConfig, ConfigError, PipelineConfig, from_dict,
                         load_config)


def test_defaults_validate():
    cfg = PipelineConfig()
    assert cfg.schema_version == SCHEMA_VERSION
    assert cfg.cav.runs == 10 and cfg.cav.probe_size == 50
    assert len(cfg.model.instrumented) == 4


def test_loss_weight_ratios():
    cfg = PipelineConfig()
    assert cfg.align.lambda_cons / cfg.align.lambda_nce == pytest.approx(3.0)
    assert cfg.fuse.lambda_var / cfg.fuse.lambda_cons == pytest.approx(3.0)


def test_json_round_trip(tmp_path):
    cfg = PipelineConfig(seed=7, attack=AttackConfig(layer="L2"))
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    again = load_config(p)
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_missing_path_gives_defaults():
    assert load_config(None) == PipelineConfig()


@pytest.mark.parametrize("data,match", [
    ({"bogus": 1}, "unknown keys"),
    ({"model": {"widht": 3}}, "model: unknown keys"),
    ({"schema_version": 99}, "schema_version"),
    ({"model": {"instrumented": ["L1", "L9"]}}, "not in"),
    ({"model": {"instrumented": ["L1"]}}, ">= 2"),
    ({"cav": {"runs": 1}}, "random runs"),
    ({"seed": -1}, "seed"),
    ({"attack": {"layer": "L9"}}, "not instrumented"),
    ({"attack": {"source_concept": "concept0"}}, "differ"),
    ({"attack": {"epsilon": -0.1}}, ">= 0"),
    ({"world": 3}, "expected an object"),
])
def test_rejects_bad_configs(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(data)


def test_attack_layer_auto_accepted():
    cfg = from_dict({"attack": {"layer": "auto"}})
    assert cfg.attack.layer == "auto"


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_with_seed():
    assert PipelineConfig().with_seed(3).seed == 3


def test_effective_config_is_complete():
    d = json.loads(PipelineConfig().to_json())
    assert {"world", "model", "cav", "stage1", "align", "fuse", "schedule"} <= set(d)
