import json

import pytest

from pabtrack.config import DEFAULT_DYNAMICS, ConfigError, RunConfig, load_config


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("")
    cfg = load_config(path)
    assert cfg == RunConfig()
    assert (cfg.lam, cfg.eta, cfg.gamma, cfg.epsilon) == (10, 0.95, 0.8, 5.0)
    assert (cfg.n_particles, cfg.neff_threshold, cfg.sigma_h, cfg.sigma_mu) == (100, 10.0, 4.0, 1.0)
    assert (cfg.alpha, cfg.b_min, cfg.b_max) == (-0.27, 1, 100)
    assert tuple(cfg.dynamics) == DEFAULT_DYNAMICS


def test_threshold_above_particle_count_rejected():
    with pytest.raises(ConfigError) as err:
        load_config(overrides={"neff_threshold": 200})
    assert err.value.field == "neff_threshold"


@pytest.mark.parametrize("key,value", [
    ("b_max", 1), ("lam", 0), ("gamma", 1.0), ("eta", 0.0), ("alpha", 0.3),
    ("estimators", "bp-pf,kalman"), ("dynamics", "0.5,0.5"), ("mode", "serve"),
])
def test_invalid_fields_are_named(key, value):
    with pytest.raises(ConfigError) as err:
        load_config(overrides={key: value})
    assert err.value.field == key


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"gamma": 0.7, "steps": 50}))
    cfg = load_config(path, {"gamma": "0.9"})
    assert cfg.gamma == 0.9 and cfg.steps == 50
    cfg.dump(tmp_path / "eff.json")
    assert json.loads((tmp_path / "eff.json").read_text())["gamma"] == 0.9


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"gama": 0.9}))
    with pytest.raises(ConfigError, match="gama"):
        load_config(path)


def test_unparseable_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_config(path)


def test_string_coercion():
    cfg = load_config(overrides={"selection_modes": "median, lower-bound", "write_beliefs": "yes", "steps": "12"})
    assert cfg.selection_modes == ["median", "lower-bound"]
    assert cfg.write_beliefs is True and cfg.steps == 12
    with pytest.raises(ConfigError):
        load_config(overrides={"steps": 1.5})


def test_derived_configs():
    cfg = RunConfig(packet_bytes=500, sigma_h=2.0)
    assert cfg.tracker_config().packet_bits == 4000
    assert cfg.filter_config().sigma_h == 2.0
    assert cfg.grid().size == 100
