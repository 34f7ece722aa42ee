import json

import pytest

from learnet.config import ConfigError, load_config, parse_config
from learnet.networks import default_ocr_spec, default_tracking_spec


def test_defaults():
    cfg = parse_config({}, env={})
    assert cfg.network is None and cfg.train.epochs == 10 and cfg.data.kind == "glyphs"
    assert cfg.eval.way == 20 and cfg.train.positive_fraction == 0.5


def test_tracking_defaults_and_map_size():
    cfg = parse_config({"network": default_tracking_spec().to_dict(), "data": {"kind": "tracking"}}, env={})
    assert cfg.train.positive_fraction == 0.75
    assert cfg.map_size() == 9


def test_seed_override():
    cfg = parse_config({"train": {"seed": 1}}, env={"LEARNET_SEED": "42"})
    assert cfg.train.seed == cfg.data.seed == cfg.eval.seed == cfg.track.seed == 42
    with pytest.raises(ConfigError, match="LEARNET_SEED"):
        parse_config({}, env={"LEARNET_SEED": "x"})


@pytest.mark.parametrize("doc, match", [
    ({"nets": {}}, "unknown section"),
    ({"train": {"epochs": 1, "momentum": 0.9}}, "momentum"),
    ({"train": []}, "expected an object"),
    ({"data": {"kind": "video"}}, "kind"),
    ({"train": {"lr_initial": 1e-4, "lr_final": 1e-2}}, "lr_final"),
    ({"network": {"architecture": "shared"}}, "network"),
    ({"network": default_tracking_spec().to_dict()}, "28, 28, 1"),
    ({"network": default_ocr_spec().to_dict(), "data": {"kind": "tracking"}}, "input_shape"),
    ({"eval": {"way": 1}}, "way"),
])
def test_invalid_configs(doc, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(doc, env={})


def test_tracking_needs_dot(tmp_path):
    spec = default_tracking_spec().to_dict()
    spec["comparison"] = "euclidean"
    with pytest.raises(ConfigError, match="dot"):
        parse_config({"network": spec, "data": {"kind": "tracking"}}, env={})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.json", env={})
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad, env={})
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"eval": {"n_problems": 5}}))
    assert load_config(good, env={}).eval.n_problems == 5
