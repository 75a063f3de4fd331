import math

import numpy as np
import pytest

from isacbeam import protocol as proto
from isacbeam.array import omni_sinr, rate, true_channel
from isacbeam.config import DeviceGroundTruth, SystemConfig
from isacbeam.sensing import exact_measurement, max_angle_variance


def _devices():
    return [DeviceGroundTruth(np.radians(60), 50.0, 1e3), DeviceGroundTruth(np.radians(120), 100.0, 1e3)]


def _small(**kw):
    base = dict(num_tx_antennas=6, num_rx_antennas=6, num_slots=4)
    base.update(kw)
    return SystemConfig(**base)


def test_omni_slot_noise_free_measurement_is_truth():
    cfg = _small(noise_free_sensing=True)
    dev = _devices()[:1]
    rec, meas = proto.run_slot_omni(dev, cfg, np.random.default_rng(0))
    assert meas[0].theta_hat == dev[0].angle and meas[0].dist_hat == dev[0].distance
    assert rec.status == proto.OMNI and rec.slot == 1


def test_omni_rate_lower_with_interference():
    cfg = _small()
    one, _ = proto.run_slot_omni(_devices()[:1], cfg, np.random.default_rng(0))
    two, _ = proto.run_slot_omni(_devices(), cfg, np.random.default_rng(0))
    assert two.true_rate[0] < one.true_rate[0]


def test_omni_rate_regression(table2):
    cfg, devices = table2
    rec, _ = proto.run_slot_omni(devices, cfg, np.random.default_rng(0))
    assert rec.true_rate[0] == pytest.approx(math.log2(1 + 20 / 21), rel=1e-12)
    assert rec.true_rate[1] == pytest.approx(math.log2(1 + 5 / 6), rel=1e-12)
    assert rec.radar_snr[0] == pytest.approx(1.6)


def test_directional_beats_omni_with_perfect_sensing():
    cfg = _small()
    devs = _devices()
    rng = np.random.default_rng(1)
    omni, _ = proto.run_slot_omni(devs, cfg, rng)
    perfect = [exact_measurement(d, 1, k, var_theta=1e-8) for k, d in enumerate(devs)]
    rec, meas = proto.run_slot_directional(devs, cfg, perfect, rng)
    assert rec.status in ("ok", "rank_relaxed")
    assert all(d >= o for d, o in zip(rec.true_rate, omni.true_rate))
    assert [m.sensed_in_slot for m in meas] == [2, 2]


def test_directional_single_device_mrt():
    cfg = _small(rate_thresholds=(0.0,))
    dev = _devices()[:1]
    perfect = [exact_measurement(dev[0], 1, 0)]
    rec, _ = proto.run_slot_directional(dev, cfg, perfect, np.random.default_rng(0))
    h = true_channel(dev[0], cfg)
    assert rec.true_rate[0] == pytest.approx(math.log2(1 + cfg.total_power * np.vdot(h, h).real), rel=0.01)


def test_clamped_sigma_gives_max_halfwidth():
    cfg = _small()
    devs = _devices()
    wide = [exact_measurement(d, 1, k, var_theta=max_angle_variance(cfg)) for k, d in enumerate(devs)]
    rec, _ = proto.run_slot_directional(devs, cfg, wide, np.random.default_rng(0))
    assert rec.coverage_halfwidth == pytest.approx((cfg.max_coverage_halfwidth,) * 2)


def test_optimizer_failure_falls_back_to_omni(monkeypatch):
    from isacbeam import optimizer as opt
    cfg = _small()
    devs = _devices()

    def broken(*args, **kwargs):
        return opt.BeamformingSolution(None, None, math.nan, [math.nan] * 2, opt.FAILED, {})

    monkeypatch.setattr(opt, "optimize_beamforming", broken)
    prev = [exact_measurement(d, 1, k) for k, d in enumerate(devs)]
    rec, meas = proto.run_slot_directional(devs, cfg, prev, np.random.default_rng(0))
    assert rec.status == opt.FAILED
    assert rec.true_rate == pytest.approx([rate(omni_sinr(d, cfg, 2)) for d in devs])
    assert len(meas) == 2


def test_pilot_estimate_limits():
    cfg = SystemConfig(pilot_len=10 ** 12, symbols_per_slot=10 ** 13)
    h = [np.exp(1j * np.arange(4)) * 3.0]
    est = proto.pilot_estimate(h, cfg, np.random.default_rng(0))
    assert np.allclose(est[0], h[0], atol=1e-5)


def test_pilot_shrinkage_half():
    # sigma_e^2 = sigma_C^2 / (L P) = 4 equals sigma_h^2 = |h_m|^2 = 4 -> s = 1/2
    cfg = SystemConfig(comm_noise_var=4.0, pilot_len=1, symbols_per_slot=10)
    assert proto.pilot_noise_var(cfg) == 4.0
    h = [np.full(3, 2.0 + 0j)]
    rng = np.random.default_rng(0)
    e = proto.pilot_estimate(h, cfg, rng)[0]
    rng = np.random.default_rng(0)
    noise = math.sqrt(2.0) * (rng.standard_normal(3) + 1j * rng.standard_normal(3))
    assert np.allclose(e, 0.5 * (h[0] + noise))


def test_pilot_mse_matches_lmmse():
    cfg = SystemConfig(comm_noise_var=1.0, pilot_len=2, total_power=1.0)
    dev = DeviceGroundTruth(1.0, 200.0)  # sigma_h^2 = 1e5 / 4e4 = 2.5
    h = true_channel(dev, cfg)
    rng = np.random.default_rng(3)
    var_h, var_e = 2.5, 0.5
    s = var_h / (var_h + var_e)
    err = np.array([proto.pilot_estimate([h], cfg, rng, [dev])[0] - h for _ in range(10_000)])
    mse = np.mean(np.abs(err) ** 2)
    # bias of the shrunk estimate for this fixed channel plus the shrunk noise
    expected = s ** 2 * var_e + (1 - s) ** 2 * var_h
    assert mse == pytest.approx(expected, rel=0.05)


def test_protocol_record_counts_and_throughput():
    cfg = _small()
    res = proto.run_protocol(_devices(), cfg, 3, proto.PROPOSED)
    assert len(res.records) == cfg.num_slots
    assert [r.slot for r in res.records] == [1, 2, 3, 4]
    assert res.throughput == pytest.approx(cfg.slot_len * sum(sum(r.true_rate) for r in res.records))
    assert all(min(r.true_rate) >= 0 for r in res.records)
    for r in res.records[1:]:
        assert np.trace(r.covariance).real == pytest.approx(cfg.total_power, abs=1e-9)


def test_slot_one_shared_by_proposed_and_sensing_based():
    cfg = _small()
    a = proto.run_protocol(_devices(), cfg, 5, proto.PROPOSED)
    b = proto.run_protocol(_devices(), cfg, 5, proto.SENSING_BASED)
    assert a.records[0].true_rate == b.records[0].true_rate
    assert a.records[1].true_rate == b.records[1].true_rate  # both use the slot-1 measurements once


def test_sensing_based_equals_proposed_for_two_slots():
    cfg = _small(num_slots=2)
    a = proto.run_protocol(_devices(), cfg, 9, proto.PROPOSED)
    b = proto.run_protocol(_devices(), cfg, 9, proto.SENSING_BASED)
    assert a.throughput == b.throughput


def test_noise_free_proposed_is_flat_and_equals_sensing_based():
    cfg = _small(noise_free_sensing=True)
    a = proto.run_protocol(_devices(), cfg, 0, proto.PROPOSED)
    b = proto.run_protocol(_devices(), cfg, 0, proto.SENSING_BASED)
    rates = a.sum_rates
    assert np.allclose(rates[1:], rates[1], rtol=1e-9)
    assert np.allclose(a.sum_rates, b.sum_rates, rtol=1e-9)


def test_sensing_based_never_resenses():
    cfg = _small()
    res = proto.run_protocol(_devices(), cfg, 0, proto.SENSING_BASED)
    for r in res.records[1:]:
        assert all(m.sensed_in_slot == 1 for m in r.measurement)
        assert all(math.isnan(s) for s in r.radar_snr)


def test_pilot_based_pays_overhead():
    cfg = _small(pilot_len=100, symbols_per_slot=200)
    res = proto.run_protocol(_devices(), cfg, 0, proto.PILOT_BASED)
    assert len(res.records) == cfg.num_slots
    for r in res.records:
        assert r.variant == proto.PILOT_BASED
        assert all(math.isnan(c) for c in r.coverage_halfwidth)
        # half the slot is pilots: the data rate is at most half the interference-free MRT rate
        for d, tr in zip(_devices(), r.true_rate):
            h = true_channel(d, cfg)
            assert tr <= 0.5 * math.log2(1 + cfg.total_power * np.vdot(h, h).real) + 1e-9


def test_protocol_determinism():
    cfg = _small()
    a = proto.run_protocol(_devices(), cfg, 42, proto.PROPOSED, trial=3)
    b = proto.run_protocol(_devices(), cfg, 42, proto.PROPOSED, trial=3)
    assert [r.true_rate for r in a.records] == [r.true_rate for r in b.records]
    c = proto.run_protocol(_devices(), cfg, 42, proto.PROPOSED, trial=4)
    assert [r.true_rate for r in a.records] != [r.true_rate for r in c.records]


def test_unknown_variant():
    with pytest.raises(ValueError):
        proto.run_protocol(_devices(), _small(), 0, "magic")


def test_monte_carlo_single_trial_equals_trial():
    cfg = _small(num_slots=3)
    mc = proto.run_monte_carlo(_devices(), cfg, 7, 1, [proto.PROPOSED], workers=1)
    trial = proto.run_protocol(_devices(), cfg, 7, proto.PROPOSED, trial=0)
    s = mc.summaries[proto.PROPOSED]
    assert np.array_equal(s.slot_mean, trial.sum_rates)
    assert s.throughput_mean == trial.throughput
    assert np.all(s.slot_ci == 0)


def test_monte_carlo_deterministic_and_parallel_consistent():
    cfg = _small(num_slots=3)
    a = proto.run_monte_carlo(_devices(), cfg, 1, 3, [proto.PROPOSED, proto.SENSING_BASED], workers=1)
    b = proto.run_monte_carlo(_devices(), cfg, 1, 3, [proto.PROPOSED, proto.SENSING_BASED], workers=2)
    for v in a.summaries:
        assert np.array_equal(a.summaries[v].slot_mean, b.summaries[v].slot_mean)
        assert a.summaries[v].throughput_mean == b.summaries[v].throughput_mean


def test_monte_carlo_rejects_zero_trials():
    with pytest.raises(ValueError):
        proto.run_monte_carlo(_devices(), _small(), 0, 0)


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("ISAC_THREADS", "3")
    assert proto.thread_count() == 3
    monkeypatch.setenv("ISAC_THREADS", "zero")
    assert proto.thread_count() >= 1
