from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfclip.config import (
    TrainConfig,
    dump_config,
    from_flat,
    load_config,
    parse_config_text,
    parse_overrides,
    to_flat,
)
from cfclip.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_follow_facial_profile():
    cfg = TrainConfig().validate()
    w = cfg.weights
    assert (w.lambda_nce, w.lambda_l2, w.lambda_id, w.lambda_perc, w.tau) == (0.3, 0.8, 0.2, 0.0, 0.1)
    assert cfg.aug.kind == "perspective" and cfg.aug.distortion_scale == 0.5
    assert cfg.optimizer.lr == 0.5 and cfg.iterations == 50_000 and cfg.batch_size == 2


def test_non_facial_profile_defaults():
    cfg = from_flat({"dataset_profile": "non_facial"})
    assert cfg.weights.lambda_id == 0.0 and cfg.weights.lambda_perc == 0.01


@pytest.mark.parametrize("flat, key", [
    ({"dataset_profile": "facial", "weights.lambda_perc": "0.01"}, "weights.lambda_perc"),
    ({"dataset_profile": "non_facial", "weights.lambda_id": "0.2"}, "weights.lambda_id"),
    ({"loss": "hinge"}, "loss"),
    ({"aug.kind": "blur"}, "aug.kind"),
    ({"weights.tau": "0"}, "weights.tau"),
    ({"weights.lambda_l2": "-1"}, "weights.lambda_l2"),
    ({"iterations": "ten"}, "iterations"),
    ({"latent_source": "inverted"}, "latent_path"),
    ({"nonsense": "1"}, "nonsense"),
    ({"weights.nonsense": "1"}, "weights.nonsense"),
    ({"tem": "maybe"}, "tem"),
    ({"backend.kind": "real"}, "backend.clip_path"),
    ({"optimizer.kind": "sgd"}, "optimizer.kind"),
])
def test_invalid_values_name_the_key(flat, key):
    with pytest.raises(ConfigError) as info:
        from_flat(flat)
    assert info.value.key == key


def test_flat_round_trip():
    cfg = from_flat({"loss": "directional", "aug.affine_scale": "0.8,1.2", "tem": "off", "iterations": "7"})
    again = from_flat(to_flat(cfg), apply_profile_defaults=False)
    assert again == cfg
    assert from_flat(parse_config_text(dump_config(cfg)), apply_profile_defaults=False) == cfg


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 10), st.floats(0, 1), st.integers(1, 10**6), st.booleans())
def test_round_trip_property(tau, scale, iters, tem):
    cfg = TrainConfig(iterations=iters, tem=tem).with_overrides(
        {"weights.tau": repr(tau), "aug.distortion_scale": repr(scale)})
    assert from_flat(to_flat(cfg), apply_profile_defaults=False) == cfg


def test_overrides_win(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nloss = nce\n\nweights.tau = 0.1\n", encoding="utf-8")
    cfg = load_config(path, parse_overrides(["weights.tau=0.05", "loss = global"]))
    assert cfg.weights.tau == 0.05 and cfg.loss == "global"


@pytest.mark.parametrize("text", ["no equals sign", "= value"])
def test_malformed_lines(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_malformed_override():
    with pytest.raises(ConfigError):
        parse_overrides(["weights.tau"])


@pytest.mark.parametrize("name", ["toy_quickstart.cfg", "facial_full.cfg", "non_facial_full.cfg"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    if name == "non_facial_full.cfg":
        assert cfg.weights.lambda_id == 0 and cfg.weights.lambda_perc == 0.01
    else:
        assert cfg.weights.lambda_perc == 0


def test_quickstart_is_toy_scale():
    cfg = load_config(CONFIGS / "toy_quickstart.cfg")
    assert cfg.backend.kind == "toy" and cfg.iterations == 500 and cfg.optimizer.lr == 0.01
