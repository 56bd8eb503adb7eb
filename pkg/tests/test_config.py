import pytest

from mfface.config import DEFAULTS, ConfigError, RunConfig, load_config, parse_config


def test_defaults_and_typed_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nseed = 3\nweights.lan = 0.25  # inline\nweights.normalize = false\n\n")
    cfg = load_config(p, ["learn.batch=2"])
    assert cfg["seed"] == 3 and isinstance(cfg["seed"], int)
    assert cfg["weights.lan"] == 0.25
    assert cfg["weights.normalize"] is False
    assert cfg["learn.batch"] == 2
    assert cfg["fit.lr"] == DEFAULTS["fit.lr"]
    w = cfg.loss_weights()
    assert w.lan == 0.25 and not w.normalize


def test_unknown_key_named_with_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 1\nlearn.bogus = 2\n")
    with pytest.raises(ConfigError, match=r"c.cfg:2: unknown config key 'learn.bogus'"):
        load_config(p)
    with pytest.raises(ConfigError, match="nope"):
        RunConfig().apply(["nope=1"])


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config("just words\n")
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig().apply(["seed=abc"])
    with pytest.raises(ConfigError):
        RunConfig().apply(["seed"])
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/x.cfg")


def test_dump_roundtrips():
    cfg = RunConfig({"seed": 9, "fit.lr": 0.5})
    again = RunConfig(parse_config(cfg.dump().replace("True", "true").replace("False", "false")))
    assert again.values == cfg.values
