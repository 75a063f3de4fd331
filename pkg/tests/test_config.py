import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isacbeam.config import (AXIS_COS, BROADSIDE_SIN, ConfigError, DeviceGroundTruth, SystemConfig, angle_domain,
                             config_from_dict, config_to_dict, db_to_linear, default_scenario_path, dump_config,
                             load_config)


def _write(tmp_path, data):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return p


def _minimal(**system):
    return {"system": system, "devices": [{"angle_deg": 60, "distance_m": 50, "rcs": 1000}]}


def test_table_scenario_loads(table2):
    cfg, devices = table2
    assert cfg.num_tx_antennas == 20 and cfg.num_rx_antennas == 20
    assert cfg.effective_bandwidth == 4e6
    assert cfg.processing_gain == 10
    assert cfg.wavelength == 0.06
    assert cfg.comm_noise_var == 1
    assert cfg.slot_len == 0.01
    assert cfg.ref_path_gain == 1e5  # 50 dB, exact
    assert cfg.angle_convention == AXIS_COS
    assert [round(math.degrees(d.angle), 12) for d in devices] == [60, 120]
    assert [d.distance for d in devices] == [50, 100]


def test_spacing_defaults_to_half_wavelength(tmp_path):
    cfg, _ = load_config(_write(tmp_path, _minimal(wavelength_m=0.06)))
    assert cfg.element_spacing == 0.03


def test_db_conversion_exact():
    assert db_to_linear(50) == 1e5
    assert db_to_linear(0) == 1.0


def test_negative_threshold_rejected(tmp_path):
    data = _minimal()
    data["protocol"] = {"rate_thresholds": -1}
    with pytest.raises(ConfigError, match="rate_thresholds must be"):
        load_config(_write(tmp_path, data))


@pytest.mark.parametrize("system, field", [
    ({"num_tx_antennas": 0}, "num_tx_antennas"),
    ({"total_power": 0}, "total_power"),
    ({"comm_noise_var": -1}, "comm_noise_var"),
    ({"wavelength_m": 0}, "wavelength"),
    ({"angle_convention": "sideways"}, "angle_convention"),
])
def test_invalid_system_fields_named(tmp_path, system, field):
    with pytest.raises(ConfigError, match=field):
        load_config(_write(tmp_path, _minimal(**system)))


def test_even_coverage_samples_rejected(tmp_path):
    data = _minimal()
    data["protocol"] = {"coverage_samples": 20}
    with pytest.raises(ConfigError, match="coverage_samples"):
        load_config(_write(tmp_path, data))


def test_device_outside_domain_rejected(tmp_path):
    data = _minimal(angle_convention=BROADSIDE_SIN)
    data["devices"][0]["angle_deg"] = 120
    with pytest.raises(ConfigError, match="angle"):
        load_config(_write(tmp_path, data))


def test_nonpositive_distance_rejected(tmp_path):
    data = _minimal()
    data["devices"][0]["distance_m"] = 0
    with pytest.raises(ConfigError, match="distance"):
        load_config(_write(tmp_path, data))


def test_malformed_and_missing_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not a recognised field"):
        load_config(_write(tmp_path, _minimal(antennas=4)))


def test_both_linear_and_db_rejected(tmp_path):
    with pytest.raises(ConfigError, match="either"):
        load_config(_write(tmp_path, _minimal(alpha0_sq=10, alpha0_db=10)))


def test_oversized_spacing_warns():
    with pytest.warns(UserWarning, match="grating"):
        SystemConfig(wavelength=0.06, element_spacing=0.05)


def test_per_device_parameters_broadcast():
    cfg = SystemConfig(rate_thresholds=(0.5,), coverage_tightness=(0.1, 0.2))
    assert cfg.rate_threshold(0) == cfg.rate_threshold(3) == 0.5
    assert cfg.coverage_bound(1) == 0.2


def test_complex_rcs_forms(tmp_path):
    data = _minimal()
    data["devices"] = [
        {"angle_deg": 30, "distance_m": 10, "rcs": [3, 4]},
        {"angle_deg": 40, "distance_m": 10, "rcs": {"re": 1, "im": -1}},
    ]
    _, devices = load_config(_write(tmp_path, data))
    assert devices[0].rcs == 3 + 4j and devices[1].rcs == 1 - 1j


def test_angle_domains():
    assert angle_domain(AXIS_COS) == (0.0, math.pi)
    assert angle_domain(BROADSIDE_SIN) == (-math.pi / 2, math.pi / 2)


def test_round_trip_of_bundled_scenario(tmp_path, table2):
    cfg, devices = table2
    out = tmp_path / "rt.json"
    dump_config(cfg, devices, out)
    cfg2, devices2 = load_config(out)
    assert cfg2 == cfg and devices2 == devices
    assert config_to_dict(cfg2, devices2) == config_to_dict(cfg, devices)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 64),
    power_db=st.floats(-30, 30),
    alpha_db=st.floats(0, 80),
    angles=st.lists(st.floats(0.5, 179.5), min_size=1, max_size=4),
    dist=st.floats(0.5, 1e3),
    gamma=st.floats(0, 5),
    bound=st.floats(1e-3, 1),
    convention=st.sampled_from([AXIS_COS, BROADSIDE_SIN]),
)
def test_round_trip_property(n, power_db, alpha_db, angles, dist, gamma, bound, convention):
    if convention == BROADSIDE_SIN:
        angles = [a - 90 for a in angles]
    data = {
        "system": {"num_tx_antennas": n, "num_rx_antennas": n, "total_power_db": power_db,
                   "alpha0_db": alpha_db, "angle_convention": convention},
        "devices": [{"angle_deg": a, "distance_m": dist, "rcs": 10.0} for a in angles],
        "protocol": {"rate_thresholds": gamma, "coverage_tightness": bound},
    }
    cfg, devices = config_from_dict(data)
    again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg, devices))))
    assert again == (cfg, devices)


def test_default_scenario_path_exists():
    assert default_scenario_path().is_file()


def test_ground_truth_validation():
    DeviceGroundTruth(1.0, 5.0).validate(AXIS_COS)
    with pytest.raises(ConfigError):
        DeviceGroundTruth(-0.1, 5.0).validate(AXIS_COS)
