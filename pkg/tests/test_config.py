import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barlow_swin.config import KEYS, RunConfig, config_from_snapshot, load_config, parse_lines
from barlow_swin.exceptions import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.encoder.image_size == 512 and cfg.train.lr == 1e-4 and cfg.bt.bt_lambda > 0
    desk = RunConfig.desk()
    assert desk.encoder.image_size == 64 and desk.train.batch_size == 2


def test_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="unknown"):
        parse_lines(["no_such_key = 1"])
    with pytest.raises(ConfigError, match="duplicate"):
        parse_lines(["seed = 1", "seed = 2"])
    with pytest.raises(ConfigError, match="expected"):
        parse_lines(["just words"])
    with pytest.raises(ConfigError, match="bad value"):
        parse_lines(["seed = abc"])


def test_comments_and_types():
    values = parse_lines(["# header", "lr = 0.001  # trailing", "", "rot90 = false", "crop_scale = 0.5, 0.9"])
    assert values == {"lr": 0.001, "rot90": False, "crop_scale": (0.5, 0.9)}


def test_order_independence(tmp_path):
    lines = ["seed = 4", "image_size = 64", "batch_size = 2", "alpha = 0.3"]
    a = tmp_path / "a.cfg"
    b = tmp_path / "b.cfg"
    a.write_text("\n".join(lines))
    b.write_text("\n".join(reversed(lines)))
    assert load_config(a) == load_config(b)


def test_overrides_win(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 1\nimage_size = 64\n")
    cfg = load_config(p, ["seed=9"])
    assert cfg.train.seed == 9 and cfg.encoder.image_size == 64


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/run.cfg")


def test_invalid_values_surface_as_config_error():
    with pytest.raises(ConfigError):
        RunConfig.from_values({"lr": -1.0})
    with pytest.raises(ConfigError):
        RunConfig.from_values({"image_size": 48})


def test_dumps_roundtrip(tmp_path):
    cfg = RunConfig.desk(seed=3, alpha=0.25, crop_scale=(0.7, 1.0))
    p = tmp_path / "dump.cfg"
    p.write_text(cfg.dumps())
    assert load_config(p) == cfg
    assert config_from_snapshot(cfg.snapshot()) == cfg


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-6, 1e-2), st.floats(0.0, 1.0), st.booleans())
def test_snapshot_roundtrip_property(seed, lr, alpha, centered):
    cfg = RunConfig.desk(seed=seed, lr=lr, alpha=alpha, bt_centered=centered)
    assert config_from_snapshot(cfg.snapshot()) == cfg


def test_keys_unique_and_complete():
    cfg = RunConfig()
    assert set(cfg.values()) == set(KEYS)


def test_repeated_override_last_wins():
    assert load_config(None, ["seed=1", "seed=2"]).train.seed == 2
