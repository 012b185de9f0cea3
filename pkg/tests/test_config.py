import itertools

import pytest

from slsdeep.config import RunConfig, coerce, parse_text
from slsdeep.network import ConfigError

# (section, key, default, file value, override value) for keys of every coerced type.
KEYS = [
    ("loss", "alpha", 0.5, ("0.25", 0.25), ("0.125", 0.125)),
    ("network", "width_scale", 1.0, ("1/8", 0.125), ("1/16", 0.0625)),
    ("network", "input_size", (384, 384), ("96,96", (96, 96)), ("64x64", (64, 64))),
    ("loss", "use_epe", True, ("false", False), ("true", True)),
    ("train", "epochs", 100, ("3", 3), ("7", 7)),
    ("paths", "train_manifest", None, ("a.jsonl", "a.jsonl"), ("b.jsonl", "b.jsonl")),
    ("network", "skip_mode", "single", ("all", "all"), ("single", "single")),
]


@pytest.mark.parametrize("in_file, in_flags", list(itertools.product([False, True], repeat=2)))
def test_precedence_matrix(tmp_path, in_file, in_flags):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("".join(f"{s}.{k} = {fv[0]}\n" for s, k, _, fv, _ in KEYS) if in_file else "# empty\n")
    overrides = [(s, k, ov[0]) for s, k, _, _, ov in KEYS] if in_flags else []
    run = RunConfig.resolve(cfg, overrides)
    for section, key, default, (_, file_value), (_, flag_value) in KEYS:
        want = flag_value if in_flags else file_value if in_file else default
        assert getattr(getattr(run, section), key) == want, (section, key)
        assert (f"{section}.{key}" in run.explicit) == (in_file or in_flags)


def test_resolved_text_round_trip(tmp_path):
    run = RunConfig.resolve(None, [("network", "width_scale", "1/16"), ("augment", "rotation_range_deg", "-5,5"),
                                   ("paths", "checkpoint", "x.ckpt")])
    path = tmp_path / "resolved.txt"
    path.write_text(run.to_text())
    again = RunConfig.resolve(path)
    assert again.to_text() == run.to_text()
    assert again.network == run.network and again.train == run.train and again.augment == run.augment
    assert again.train.loss == again.loss


def test_parse_text_comments_and_errors():
    items = parse_text("# header\nloss.alpha = 0.3  # trailing\n\ntrain.epochs=2\n")
    assert items == [("loss", "alpha", "0.3"), ("train", "epochs", "2")]
    with pytest.raises(ConfigError, match=":1:"):
        parse_text("loss.alpha 0.3")
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("loss.alpha = 1\nalpha = 2")


def test_coerce_errors():
    with pytest.raises(ConfigError, match="unknown config section"):
        coerce("optim", "lr", "1")
    with pytest.raises(ConfigError, match="valid keys"):
        coerce("loss", "beta", "1")
    with pytest.raises(ConfigError, match="boolean"):
        coerce("loss", "use_epe", "maybe")
    with pytest.raises(ConfigError, match="integer"):
        coerce("train", "epochs", "2.5")
    with pytest.raises(ConfigError, match="train.loss"):
        coerce("train", "loss", "x")
    assert coerce("paths", "checkpoint", "none") is None


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError, match="alpha"):
        RunConfig.resolve(None, [("loss", "alpha", "1.5")])
    with pytest.raises(ConfigError):
        RunConfig.resolve(None, [("network", "skip_mode", "some")])
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.resolve("/nonexistent/run.cfg")
