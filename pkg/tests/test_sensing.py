import math

import numpy as np
import pytest

from isacbeam.array import steering_vector
from isacbeam.config import BROADSIDE_SIN, SPEED_OF_LIGHT, DeviceGroundTruth, SystemConfig
from isacbeam.sensing import (MIN_DISTANCE, aperture_term, crb_variances, max_angle_variance, radar_snr_covariance,
                              radar_snr_directional, radar_snr_omni, reflection_coefficient, sample_measurement)


def test_reflection_coefficient():
    assert reflection_coefficient(DeviceGroundTruth(1.0, 1.0, rcs=1.0)) == 1
    assert reflection_coefficient(DeviceGroundTruth(1.0, 50.0, rcs=1e3)) == pytest.approx(0.4)
    b1 = reflection_coefficient(DeviceGroundTruth(1.0, 10.0))
    b2 = reflection_coefficient(DeviceGroundTruth(1.0, 20.0))
    assert abs(b2) == pytest.approx(abs(b1) / 4)


def test_radar_snr_omni():
    dev = DeviceGroundTruth(1.0, 50.0, rcs=1e3)
    cfg = SystemConfig(total_power=1, processing_gain=10, radar_noise_var=1)
    assert radar_snr_omni(dev, cfg) == pytest.approx(1.6)
    assert radar_snr_omni(dev, cfg.replace(processing_gain=20)) == pytest.approx(3.2)
    assert radar_snr_omni(dev, cfg.replace(radar_noise_var=2)) == pytest.approx(0.8)


@pytest.mark.parametrize("theta", np.linspace(0.05, np.pi - 0.05, 7))
def test_directional_snr_matches_omni_for_isotropic_covariance(theta):
    cfg = SystemConfig(num_tx_antennas=6)
    dev = DeviceGroundTruth(theta, 30.0)
    C = cfg.total_power / 6 * np.eye(6)
    assert radar_snr_covariance(dev, C, cfg) == pytest.approx(radar_snr_omni(dev, cfg), rel=1e-9)
    # the same covariance written as six orthogonal beams
    ws = list(np.sqrt(cfg.total_power / 6) * np.eye(6))
    assert radar_snr_directional(dev, ws, cfg) == pytest.approx(radar_snr_omni(dev, cfg), rel=1e-9)


def test_directional_snr_coherent_gain_and_null():
    cfg = SystemConfig(num_tx_antennas=8)
    dev = DeviceGroundTruth(1.0, 40.0)
    a = steering_vector(dev.angle, 8, cfg)
    w = math.sqrt(cfg.total_power) * a / math.sqrt(8)
    assert radar_snr_directional(dev, [w], cfg) == pytest.approx(8 * radar_snr_omni(dev, cfg))
    r = np.random.default_rng(3).standard_normal(8) + 0j
    v = r - np.vdot(a, r) / 8 * a
    assert radar_snr_directional(dev, [v], cfg) < 1e-20
    assert radar_snr_directional(dev, [np.zeros(8)], cfg) == 0


def test_crb_antenna_scaling_oracle():
    dev = DeviceGroundTruth(np.radians(60), 50.0)
    small = SystemConfig(num_tx_antennas=10, num_rx_antennas=10)
    big = SystemConfig(num_tx_antennas=20, num_rx_antennas=20)
    _, v_big = crb_variances(1.6, dev, big, clamp=False)
    _, v_small = crb_variances(1.6, dev, small, clamp=False)
    assert v_big / v_small == pytest.approx((10 * 10 * 99) / (20 * 20 * 399), rel=1e-12)
    assert v_big / v_small == pytest.approx(0.06203, abs=5e-6)


def test_crb_direct_formula():
    cfg = SystemConfig(num_tx_antennas=12, num_rx_antennas=7, crb_const_tau=2.0, crb_const_theta=3.0)
    dev = DeviceGroundTruth(1.1, 20.0)
    snr = 4.2
    var_tau, var_theta = crb_variances(snr, dev, cfg, clamp=False)
    assert var_tau == pytest.approx(2.0 / (snr * 84 * cfg.effective_bandwidth ** 2), rel=1e-14)
    xi2 = math.pi ** 2 * cfg.element_spacing ** 2 * math.sin(1.1) ** 2 * (144 - 1) / (3 * cfg.wavelength ** 2)
    assert var_theta == pytest.approx(3.0 / (snr * 84 * xi2), rel=1e-12)


def test_crb_broadside_uses_cos_squared():
    cfg = SystemConfig(angle_convention=BROADSIDE_SIN)
    dev = DeviceGroundTruth(0.3, 20.0)
    expected = math.pi ** 2 * cfg.element_spacing ** 2 * math.cos(0.3) ** 2 * 399 / (3 * cfg.wavelength ** 2)
    assert aperture_term(dev, cfg) == pytest.approx(expected, rel=1e-14)


def test_xi_distance_flag():
    cfg = SystemConfig(xi_uses_distance=True)
    dev = DeviceGroundTruth(1.0, 20.0)
    assert aperture_term(dev, cfg) / aperture_term(dev, SystemConfig()) == pytest.approx((20 / 0.03) ** 2)


def test_crb_snr_scaling_and_errors():
    cfg = SystemConfig()
    dev = DeviceGroundTruth(1.0, 50.0)
    t1, a1 = crb_variances(2.0, dev, cfg, clamp=False)
    t2, a2 = crb_variances(4.0, dev, cfg, clamp=False)
    assert t2 == pytest.approx(t1 / 2) and a2 == pytest.approx(a1 / 2)
    with pytest.raises(ValueError):
        crb_variances(0.0, dev, cfg)
    with pytest.raises(ValueError):
        crb_variances(1.0, dev, cfg.replace(num_tx_antennas=1))


def test_crb_clamp_near_endfire():
    cfg = SystemConfig(angle_convention=BROADSIDE_SIN)
    dev = DeviceGroundTruth(math.pi / 2, 20.0)  # cos -> 0
    _, v = crb_variances(1.0, dev, cfg)
    assert v == pytest.approx(max_angle_variance(cfg))
    assert cfg.coverage_sigma_mult * math.sqrt(v) == pytest.approx(cfg.max_coverage_halfwidth)


def test_crb_monotone_in_snr_and_array():
    dev = DeviceGroundTruth(1.0, 50.0)
    prev = (math.inf, math.inf)
    for n in (4, 8, 16):
        cur = crb_variances(1.0, dev, SystemConfig(num_tx_antennas=n, num_rx_antennas=n), clamp=False)
        assert cur[0] < prev[0] and cur[1] < prev[1]
        prev = cur


def test_sampling_noise_free_limit():
    cfg = SystemConfig(noise_free_sensing=True)
    dev = DeviceGroundTruth(1.0, 50.0)
    m = sample_measurement(dev, 1.6, 1, np.random.default_rng(0), cfg)
    assert m.theta_hat == dev.angle and m.dist_hat == dev.distance
    assert m.var_theta > 0 and m.var_dist > 0


def test_sampling_determinism():
    cfg = SystemConfig()
    dev = DeviceGroundTruth(1.0, 50.0)
    a = sample_measurement(dev, 1.6, 3, np.random.default_rng(7), cfg, 2)
    b = sample_measurement(dev, 1.6, 3, np.random.default_rng(7), cfg, 2)
    assert a == b and a.sensed_in_slot == 3 and a.device_id == 2


def test_sampling_clamps():
    cfg = SystemConfig(effective_bandwidth=1.0, crb_const_tau=1e6)  # enormous range error
    dev = DeviceGroundTruth(0.01, 0.5)
    rng = np.random.default_rng(1)
    for _ in range(200):
        m = sample_measurement(dev, 1.0, 1, rng, cfg)
        assert m.dist_hat >= MIN_DISTANCE
        assert 0 < m.theta_hat < math.pi
        assert m.var_theta <= max_angle_variance(cfg) * (1 + 1e-12)


def test_sampled_variances_match_crb():
    cfg = SystemConfig()
    dev = DeviceGroundTruth(np.radians(60), 50.0)
    rng = np.random.default_rng(2024)
    draws = [sample_measurement(dev, 1.6, 1, rng, cfg) for _ in range(100_000)]
    var_tau, var_theta = crb_variances(1.6, dev, cfg)
    th = np.array([m.theta_hat for m in draws])
    d = np.array([m.dist_hat for m in draws])
    assert th.var() == pytest.approx(var_theta, rel=0.03)
    assert d.var() == pytest.approx(SPEED_OF_LIGHT ** 2 * var_tau / 4, rel=0.03)
    assert draws[0].var_dist == pytest.approx(SPEED_OF_LIGHT ** 2 * var_tau / 4)
