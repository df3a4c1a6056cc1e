from __future__ import annotations

import json

import pytest

from qvlab.config import (CONFIG_MARK, ConfigError, artifact_preamble, config_from_artifact,
                          load_config, parse_config)
from qvlab.errors import ConfigurationError

BASE = """
[surface]
family = seasonal
alpha = 0.04
a = 0.3

[engine]
dt = 0.01
n_steps = 100
n_paths = 50
seed = 7
"""


def test_defaults_and_types():
    cfg = parse_config(BASE)
    assert cfg.get("engine", "n_paths") == 50 and isinstance(cfg.get("engine", "n_paths"), int)
    assert cfg.get("engine", "measure") == "risk_neutral"
    assert cfg.surface().alpha == 0.04
    assert cfg.grid().n_steps == 100


def test_missing_required_value_names_key():
    cfg = parse_config(BASE.replace("seed = 7\n", ""))
    with pytest.raises(ConfigError, match=r"^engine\.seed: ") as exc:
        cfg.require("engine", "seed")
    assert exc.value.key == "engine.seed"
    assert isinstance(exc.value, ConfigurationError)


@pytest.mark.parametrize("text,key", [
    ("[engine]\nbogus = 1\n", "engine.bogus"),
    ("[nosuch]\nx = 1\n", "nosuch"),
    ("[engine]\nn_paths = 1.5\n", "engine.n_paths"),
    ("[engine]\ndt = -1\n", "engine.dt"),
    ("[engine]\nmeasure = weird\n", "engine.measure"),
    ("[cov]\nalpha = 0.04\nbeta = -0.1\n", "cov.beta"),
    ("[surface]\nfamily = constant\nalpha = -1\n", "surface.alpha"),
    ("[cov]\ntimes = 1, x\n", "cov.times"),
])
def test_invalid_values_are_rejected(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key


def test_keys_are_case_sensitive():
    cfg = parse_config("[forecast]\nT = 100\n")
    assert cfg.get("forecast", "T") == 100.0
    with pytest.raises(ConfigError):
        parse_config("[forecast]\nt = 100\n")


def test_canonical_round_trip():
    cfg = parse_config(BASE)
    text = cfg.canonical()
    again = parse_config(text)
    assert again.values == cfg.values
    assert again.canonical() == text


def test_config_recovered_from_artifacts(tmp_path):
    cfg = parse_config(BASE)
    pre = artifact_preamble("simulate", cfg, 7)
    assert CONFIG_MARK in pre
    csv = tmp_path / "a.csv"
    csv.write_text("".join(f"# {ln}\n" for ln in pre.splitlines()) + "t,value\n0,1\n")
    assert config_from_artifact(csv).canonical() == cfg.canonical()
    js = tmp_path / "a.json"
    js.write_text(json.dumps({"config": cfg.canonical()}))
    assert config_from_artifact(js).values == cfg.values
    bare = tmp_path / "b.csv"
    bare.write_text("t,value\n")
    with pytest.raises(ConfigError):
        config_from_artifact(bare)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")


def test_relative_paths_resolve_against_config_dir(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[pv]\nportfolio = book.csv\n")
    assert load_config(ini).path("pv", "portfolio") == tmp_path / "book.csv"
