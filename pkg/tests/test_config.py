import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridloc.config import ConfigError, apply_overrides, known_keys, parse_config, resolved_text
from hybridloc.pipeline import BenchmarkConfig


def test_defaults_roundtrip_through_resolved_text():
    cfg = BenchmarkConfig()
    text = resolved_text(cfg)
    assert parse_config(text) == cfg
    lines = text.splitlines()
    assert [ln.split(" = ")[0] for ln in lines] == known_keys()


def test_every_default_is_recorded():
    keys = set(known_keys())
    for key in ("seed", "world.noise_sigma", "train.steps", "loss.alpha", "levels.prototype", "eval.Ks"):
        assert key in keys


def test_values_are_applied():
    text = """
    # comment line
    seed = 7
    world.noise_sigma = 0.25   # trailing comment
    train.steps = 12
    loss.detach_ap_edge = false
    loss.neg_exclusion_radius = 900
    train.hidden = none
    eval.Ks = 1,10
    world.region_center_deg = 46.5, 7.25
    levels.prototype = 11
    levels.aerial = 12
    """
    cfg = parse_config(text)
    assert cfg.train.seed == cfg.world.seed == cfg.data_seed == 7
    assert cfg.world.noise_sigma == 0.25
    assert cfg.train.steps == 12
    assert cfg.train.loss.detach_ap_edge is False
    assert cfg.train.loss.neg_exclusion_radius == 900.0
    assert cfg.train.hidden is None
    assert cfg.Ks == (1, 10)
    assert math.isclose(math.degrees(cfg.world.region_center.lat), 46.5)
    assert math.isclose(math.degrees(cfg.world.region_center.lon), 7.25)
    assert (cfg.prototype_level, cfg.aerial_level) == (11, 12)
    assert parse_config(resolved_text(cfg)) == cfg


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"run\.cfg:3: unknown key 'train.stepz'"):
        parse_config("seed = 1\n\ntrain.stepz = 4\n", source="run.cfg")


def test_duplicate_key_names_line():
    with pytest.raises(ConfigError, match=r"run\.cfg:4: duplicate key 'seed'"):
        parse_config("seed = 1\n# x\ntrain.steps = 3\nseed = 2\n", source="run.cfg")


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("train.steps = many", "bad value for train.steps"),
        ("loss.detach_ap_edge = maybe", "expected a boolean"),
        ("just some words", "expected key = value"),
    ],
)
def test_malformed_lines(line, fragment):
    with pytest.raises(ConfigError, match=r"cfg:2: .*" + fragment):
        parse_config("seed = 0\n" + line, source="cfg")


def test_cross_field_validation():
    with pytest.raises(ConfigError, match="levels.aerial"):
        parse_config("levels.aerial = 15")
    with pytest.raises(ConfigError):
        parse_config("eval.gap_fraction = 1.5")


def test_overrides_stack_on_base():
    base = parse_config("train.steps = 9")
    cfg = apply_overrides(base, ["train.batch_size=17", "seed=3"])
    assert (cfg.train.steps, cfg.train.batch_size, cfg.train.seed) == (9, 17, 3)
    with pytest.raises(ConfigError, match="--set:1"):
        apply_overrides(base, ["nope=1"])


@settings(max_examples=40, deadline=None)
@given(
    noise=st.floats(0.0, 5.0, allow_nan=False),
    steps=st.integers(0, 10**6),
    alpha=st.floats(0.01, 10.0),
    seed=st.integers(0, 2**31),
    ks=st.lists(st.integers(1, 500), min_size=1, max_size=4),
)
def test_resolved_text_roundtrip_property(noise, steps, alpha, seed, ks):
    pairs = [
        f"world.noise_sigma={noise!r}",
        f"train.steps={steps}",
        f"loss.alpha={alpha!r}",
        f"seed={seed}",
        "eval.Ks=" + ",".join(map(str, ks)),
    ]
    cfg = apply_overrides(BenchmarkConfig(), pairs)
    text = resolved_text(cfg)
    again = parse_config(text)
    assert again == cfg
    assert resolved_text(again) == text


def test_committed_reference_config_matches_defaults():
    path = Path(__file__).resolve().parents[1] / "bench" / "reference.cfg"
    cfg = parse_config(path.read_text(), source=str(path))
    assert cfg == BenchmarkConfig()
    assert (cfg.prototype_level, cfg.aerial_level, cfg.train.embed_dim) == (12, 13, 64)
    assert (cfg.train.batch_size, cfg.train.steps, cfg.world.latent_dim) == (256, 5000, 32)
