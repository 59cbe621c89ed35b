"""
Tests for problem config loading
"""

import copy
import json

import numpy as np
import pytest

from iqcreach import constants
from iqcreach.config_loader import ConfigLoader, load_config
from iqcreach.errors import ConfigError
from iqcreach.system_builder import equilibrium

from conftest import CONFIG_DIR

SCALAR = json.loads((CONFIG_DIR / "scalar.json").read_text())


def _scalar(**plant_overrides):
    data = copy.deepcopy(SCALAR)
    data["plant"].update(plant_overrides)
    return data


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_bundled_configs_load(path):
    loader = load_config(path)
    assert loader.config.name == path.stem
    system = loader.extended_system()
    assert system.plant_states == tuple(loader.config.plant.states)
    loader.synthesis_config()
    assert loader.validation_budget().box.shape == (len(system.plant_states), 2)


def test_dump_is_a_fixed_point():
    loader = ConfigLoader.from_dict(SCALAR)
    again = ConfigLoader()
    again.loads(loader.dump())
    assert again.config == loader.config
    assert again.dump() == loader.dump()


def test_scalar_synthesis_settings():
    cfg = ConfigLoader.from_dict(SCALAR).synthesis_config(seed=11)
    assert (cfg.deg_V, cfg.deg_k, cfg.n_iter, cfg.seed) == (2, 1, 3, 11)


def test_gtm_constants_match_the_problem_data():
    plant = load_config(CONFIG_DIR / "gtm_sector_T1.json").config.plant
    assert plant.constants["r_T"] == pytest.approx(constants.GTM_TARGET_RADIUS)
    assert plant.b == [constants.GTM_ELEVATOR_LIMIT] * 2


def test_quadrotor_constants_match_the_problem_data():
    plant = load_config(CONFIG_DIR / "quadrotor_deg2.json").config.plant
    assert plant.constants["K"] == pytest.approx(constants.QUADROTOR_K)
    assert plant.constants["gn"] == constants.QUADROTOR_GRAVITY
    assert plant.constants["roll_max"] == pytest.approx(constants.QUADROTOR_ROLL_LIMIT)
    assert plant.b[0] == constants.QUADROTOR_THRUST_DEVIATION


def test_quadrotor_hovers_at_the_origin():
    loader = load_config(CONFIG_DIR / "quadrotor_deg2.json")
    states, inputs = equilibrium(loader.nominal_system(), {})
    np.testing.assert_allclose(states, 0.0)
    np.testing.assert_allclose(inputs, 0.0)
    system = loader.extended_system()
    assert system.direct_inputs == ("u1",)
    assert system.perturbed_channels == ("u2",)


def test_gtm_sector_puts_the_elevator_behind_a_controller_state():
    system = load_config(CONFIG_DIR / "gtm_sector_T1.json").extended_system()
    assert system.controller_states == ("xt1",)
    assert system.filter_states == ()


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_invalid_json_reports_its_position():
    loader = ConfigLoader(source="broken.json")
    with pytest.raises(ConfigError) as excinfo:
        loader.loads('{\n  "name": "x",\n  "plant": \n}')
    assert excinfo.value.line == 4


def test_unknown_field_is_rejected():
    with pytest.raises(ConfigError, match="plant.colour"):
        ConfigLoader.from_dict(_scalar(colour="red"))


def test_malformed_polynomial_points_at_the_offending_character(tmp_path):
    path = tmp_path / "bad.json"
    text = json.dumps(_scalar(f=["-x + * d"]), indent=2)
    path.write_text(text)
    with pytest.raises(ConfigError) as excinfo:
        load_config(path)
    error = excinfo.value
    assert "plant.f[0]" in str(error)
    line = text.splitlines()[error.line - 1]
    assert line[error.column - 1] == "*"


def test_undeclared_variable_is_rejected():
    with pytest.raises(ConfigError, match="plant.f"):
        ConfigLoader.from_dict(_scalar(f=["-y + d"]))


def test_target_may_only_use_states():
    with pytest.raises(ConfigError, match="target"):
        ConfigLoader.from_dict(_scalar(target="x^2 + u - 1"))


def test_disturbances_need_a_positive_energy_bound():
    with pytest.raises(ConfigError, match="R must be positive"):
        ConfigLoader.from_dict(_scalar(R=0.0))


def test_time_is_a_reserved_name():
    with pytest.raises(ConfigError, match="reserved"):
        ConfigLoader.from_dict(_scalar(states=["t"], f=["-t + d"], target="t^2 - 1"))


def test_perturbation_on_an_input_needs_channels():
    data = _scalar(perturbation_outputs=["w"], h=["u"])
    data["iqc"] = {"kind": "Sector", "alpha": 0.0, "beta": 0.2}
    with pytest.raises(ConfigError, match="iqc.channels"):
        ConfigLoader.from_dict(data)


def test_iqc_channel_must_be_an_input():
    data = _scalar(perturbation_outputs=["w"], h=["u"])
    data["iqc"] = {"kind": "Sector", "alpha": 0.0, "beta": 0.2, "channels": ["thrust"]}
    with pytest.raises(ConfigError, match="thrust"):
        ConfigLoader.from_dict(data)


def test_odd_lyapunov_degree_is_a_config_error():
    data = _scalar()
    data["degrees"] = {"V": 3}
    with pytest.raises(ConfigError, match="deg_V"):
        ConfigLoader.from_dict(data).synthesis_config()


def test_missing_validation_block():
    data = _scalar()
    del data["validation"]
    with pytest.raises(ConfigError, match="validation"):
        ConfigLoader.from_dict(data).validation_budget()
