import json
from importlib import resources

import numpy as np
import pytest

from dsqp_rti.config import DEFAULTS, initial_state, load_config
from dsqp_rti.errors import ConfigError


def bundled(name):
    return str(resources.files("dsqp_rti") / "configs" / name)


def test_defaults_fill_missing_sections():
    cfg = load_config({"schema_version": 1})
    assert cfg == DEFAULTS
    cfg = load_config({"solver": {"k_max": 3}})
    assert cfg["solver"]["k_max"] == 3
    assert cfg["solver"]["l_max"] == DEFAULTS["solver"]["l_max"]


@pytest.mark.parametrize("raw", [
    {"schema_version": 2},
    {"solver": {"kmax": 1}},
    {"plant": 3},
    {"plant": {"S": 0}},
    {"plant": {"m": -1.0}},
    {"ocp": {"Q": [1, 1, 1]}},
    {"ocp": {"beta2": 0.5}},
    {"solver": {"hessian_mode": "bfgs"}},
    {"solver": {"l_max": 0}},
    {"simulation": {"delta": 0.04, "T_f": 0.01}},
    {"certificate": {"a": 1.0}},
    {"certificate": {"rti": {"a1": 1.0}}},
    {"initial_condition": {"pattern": "random"}},
    {"initial_condition": {"pattern": "explicit", "q": [1.0]}},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        load_config(raw)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_initial_patterns():
    X = initial_state(load_config({"plant": {"S": 4}}))
    np.testing.assert_array_equal(X[:, 0], [-1, 1, -1, 1])
    np.testing.assert_array_equal(X[:, 2], np.pi)
    np.testing.assert_array_equal(X[:, [1, 3]], 0)
    X = initial_state(load_config({"plant": {"S": 3}, "initial_condition": {"pattern": "index"}}))
    np.testing.assert_array_equal(X[:, 0], [1, 2, 3])
    X = initial_state(load_config({"plant": {"S": 2}, "initial_condition": {"pattern": "zero"}}))
    np.testing.assert_array_equal(X, 0)
    X = initial_state(load_config({"plant": {"S": 2},
                                   "initial_condition": {"pattern": "explicit", "q": [0.5, -0.5], "phi": [0.1, 0.2]}}))
    np.testing.assert_array_equal(X[:, 0], [0.5, -0.5])
    np.testing.assert_array_equal(X[:, 2], [0.1, 0.2])


@pytest.mark.parametrize("name, h, N, k_max, l_max, pattern", [
    ("case1.json", 0.04, 10, 1, 6, "alternating"),
    ("case2.json", 0.04, 10, 3, 6, "index"),
    ("case3.json", 0.057, 7, 2, 3, "index"),
])
def test_bundled_cases(name, h, N, k_max, l_max, pattern):
    cfg = load_config(bundled(name))
    assert (cfg["ocp"]["h"], cfg["ocp"]["N"]) == (h, N)
    assert (cfg["solver"]["k_max"], cfg["solver"]["l_max"]) == (k_max, l_max)
    assert cfg["initial_condition"]["pattern"] == pattern
    assert cfg["simulation"] == {"delta": 0.04, "T_f": 10.0}
    with open(bundled(name)) as fh:
        assert json.load(fh)["schema_version"] == 1
