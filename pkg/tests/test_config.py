import math

import pytest

from trunlearn.config import ConfigError, derive_seed, load_config, parse_config

BASE = {"dataset": {"source": "synthetic"}}


def _with(**over):
    raw = dict(BASE)
    raw.update(over)
    return raw


def test_defaults():
    cfg = parse_config(BASE)
    assert cfg.methods == ("tr",) and cfg.damping == 0.1
    assert cfg.dataset.synthetic.num_classes == 2
    assert cfg.tr_config.max_iter == 10


@pytest.mark.parametrize("raw,path", [
    (_with(damping="x"), "damping"),
    (_with(methods=["tr", "sgd"]), "methods[1]"),
    (_with(tr={"eta1": 0.95, "eta2": 0.9}), "tr"),
    (_with(tr={"tua": 1.0}), "tr.tua"),
    (_with(cert={"epsilon": -1, "delta": 0.1}), "cert"),
    (_with(model={"kind": "cnn"}), "model.kind"),
    (_with(dataset={"source": "csv"}), "dataset.source"),
    (_with(dataset={"source": "idx"}), "dataset.idx"),
    (_with(bias={"bias_map": {0: -2}}), "bias.bias_map.0"),
    (_with(sweep={"points": [{"deletion_count": 3, "target_kl": 0.1}]}), "sweep.points[0]"),
    (_with(damping=0.0), "damping"),
    (_with(version=2), "version"),
    ({}, "dataset"),
])
def test_validation_names_field(raw, path):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.path == path


def test_infinite_epsilon_parses():
    cfg = parse_config(_with(cert={"epsilon": "inf", "delta": 0.01}))
    assert math.isinf(cfg.cert.epsilon)


def test_missing_idx_file(tmp_path):
    raw = _with(dataset={"source": "idx", "idx": {
        "train_images": "nope.gz", "train_labels": "a", "test_images": "b", "test_labels": "c"}})
    with pytest.raises(ConfigError) as info:
        parse_config(raw, tmp_path)
    assert info.value.path == "dataset.idx.train_images"
    assert parse_config(raw, tmp_path, check_files=False).dataset.idx.train_images == str(tmp_path / "nope.gz")


def test_hash_ignores_output_dir_only():
    a = parse_config(_with(output_dir="x"))
    b = parse_config(_with(output_dir="y"))
    c = parse_config(_with(output_dir="x", seed=3))
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_derive_seed_stable():
    assert derive_seed(0, "split") == derive_seed(0, "split")
    assert derive_seed(0, "split") != derive_seed(1, "split") != derive_seed(0, "noise")
    assert 0 <= derive_seed(7, "x") < 2 ** 64


def test_load_yaml_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shipped_configs_parse():
    for name in ("configs/synthetic.yaml", "configs/mnist-mlp.yaml"):
        load_config(name)
