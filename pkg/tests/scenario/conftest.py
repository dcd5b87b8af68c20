# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

import pytest
import yaml

from lab_config import validate_config


@pytest.fixture(scope="function")
def direct_data():
    return {
        "kind": "direct",
        "physics": {"d": 1, "L": 20.0, "n": 200, "h": 0.1, "intensity": 0.3, "T": 4.0},
        "monte_carlo": {"n_realizations": 4, "seed": 3},
        "expansion": {"p": 0.5},
    }


@pytest.fixture(scope="function")
def direct_config(direct_data):
    return validate_config(direct_data)


@pytest.fixture(scope="function")
def oracle_config():
    return validate_config(
        {
            "kind": "oracle1d",
            "physics": {"d": 1, "L": 100.0, "n": 500, "h": 0.1, "intensity": 0.3, "T": 1e6},
            "solver": {"tolerance": 1e-8},
            "monte_carlo": {"n_realizations": 40, "seed": 7},
            "expansion": {"p": 1.0, "max_order": 0, "oracle_tolerance": 0.05},
        }
    )


@pytest.fixture(scope="function")
def config_file(tmp_path, direct_data):
    def write(data=None):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(direct_data if data is None else data))
        return path

    return write
