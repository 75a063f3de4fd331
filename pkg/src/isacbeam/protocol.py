"""The N-slot two-phase protocol, its two baselines, and Monte-Carlo aggregation.

Slot 1 transmits the isotropic covariance (P_T/N_t) I for both communication
and sensing.  From slot 2 on, the transmit beams are optimised from the angle
and distance estimates of the previous slot's echo.

Variants
--------
``proposed``       re-senses every slot from the directional echo.
``sensing_based``  keeps the slot-1 measurements (and slot-1 sigma_theta) forever.
``pilot_based``    estimates the channels from pilots (LMMSE) in every slot,
                   drops the coverage constraint and pays the pilot overhead 1 - L/S.

Each trial draws from its own generator seeded by ``(master_seed, trial)``;
variants of the same trial restart from that seed so slot 1 sees the same
measurement noise under ``proposed`` and ``sensing_based``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import optimizer as opt
from .array import directional_sinr, estimated_channel, omni_sinr, rate, true_channel
from .conic import make_backend
from .config import DeviceGroundTruth, SystemConfig
from .sensing import Measurement, radar_snr_directional, radar_snr_omni, sample_measurement

log = logging.getLogger(__name__)

PROPOSED = "proposed"
SENSING_BASED = "sensing_based"
PILOT_BASED = "pilot_based"
VARIANTS = (PROPOSED, SENSING_BASED, PILOT_BASED)

OMNI = "omni"  # status of a slot that was never meant to be directional


@dataclass
class SlotRecord:
    """Per-slot outcome; every per-device field is a tuple of length K."""

    slot: int
    variant: str
    true_rate: tuple[float, ...]
    est_rate: tuple[float, ...]  # nan when no channel estimate was used
    radar_snr: tuple[float, ...]  # nan when the variant does not sense in this slot
    measurement: tuple[Measurement | None, ...]  # estimate the beams were built from
    coverage_halfwidth: tuple[float, ...]  # l * sigma_theta, nan without coverage
    status: str
    covariance: np.ndarray = field(repr=False)  # sum_k w_k w_k^H actually transmitted
    diagnostics: dict | None = field(default=None, repr=False)

    @property
    def sum_rate(self) -> float:
        return float(sum(self.true_rate))


@dataclass
class TrialResult:
    seed: tuple[int, int]  # (master_seed, trial index)
    variant: str
    records: list[SlotRecord]
    slot_len: float

    @property
    def throughput(self) -> float:
        """Delta_T * sum over slots and devices of the true rate (bits/Hz)."""
        return self.slot_len * sum(r.sum_rate for r in self.records)

    @property
    def sum_rates(self) -> np.ndarray:
        return np.array([r.sum_rate for r in self.records])


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(trial)])


def _omni_covariance(cfg: SystemConfig) -> np.ndarray:
    n = cfg.num_tx_antennas
    return cfg.total_power / n * np.eye(n, dtype=complex)


def _nan(K: int) -> tuple[float, ...]:
    return (math.nan,) * K


# ----------------------------------------------------------------------------
# slots

def run_slot_omni(devices: Sequence[DeviceGroundTruth], cfg: SystemConfig, rng: np.random.Generator,
                  slot: int = 1, variant: str = PROPOSED) -> tuple[SlotRecord, list[Measurement]]:
    """Isotropic transmission: omni rates, and one measurement per device at the omni echo SNR."""
    K = len(devices)
    rates = tuple(rate(omni_sinr(d, cfg, K)) for d in devices)
    snrs = tuple(radar_snr_omni(d, cfg) for d in devices)
    meas = [sample_measurement(d, s, slot, rng, cfg, k) for k, (d, s) in enumerate(zip(devices, snrs))]
    rec = SlotRecord(slot, variant, rates, _nan(K), snrs, (None,) * K, _nan(K), OMNI, _omni_covariance(cfg))
    return rec, meas


def _coverage_of(m: Measurement, cfg: SystemConfig) -> opt.Coverage:
    return opt.Coverage(m.theta_hat, m.sigma_theta)


def solve_from_measurements(measurements: Sequence[Measurement], cfg: SystemConfig,
                            backend=None) -> opt.BeamformingSolution:
    """Build estimated channels and coverage intervals, then optimise the beams."""
    h_hats = np.array([estimated_channel(m, cfg) for m in measurements])
    problem = opt.BeamformingProblem.from_config(h_hats, cfg, [_coverage_of(m, cfg) for m in measurements])
    return opt.optimize_beamforming(problem, cfg, backend)


def run_slot_directional(devices: Sequence[DeviceGroundTruth], cfg: SystemConfig,
                         prev_measurements: Sequence[Measurement], rng: np.random.Generator | None,
                         backend=None, slot: int = 2, variant: str = PROPOSED,
                         solution: opt.BeamformingSolution | None = None,
                         resense: bool = True) -> tuple[SlotRecord, list[Measurement]]:
    """Beams from the previous estimates; true rates on the true channels.

    ``solution`` short-cuts the optimiser (used when the inputs are known to be
    unchanged).  With ``resense=False`` no echo is processed and the previous
    measurements are returned unchanged.  If the optimiser fails the slot falls
    back to isotropic transmission for both rate and sensing.
    """
    K = len(devices)
    if len(prev_measurements) != K:
        raise ValueError("need one previous measurement per device")
    if solution is None:
        solution = solve_from_measurements(prev_measurements, cfg, backend)
    halfwidths = tuple(cfg.coverage_sigma_mult * m.sigma_theta for m in prev_measurements)

    if solution.status == opt.FAILED:
        log.warning("slot %d: optimiser failed, transmitting isotropically", slot)
        rec, meas = run_slot_omni(devices, cfg, rng, slot, variant) if resense else \
            (run_slot_omni_rates(devices, cfg, slot, variant), list(prev_measurements))
        rec.status = opt.FAILED
        rec.measurement = tuple(prev_measurements)
        rec.coverage_halfwidth = halfwidths
        if not resense:
            rec.radar_snr = _nan(K)
        rec.diagnostics = solution.diagnostics
        return rec, meas

    channels = [true_channel(d, cfg) for d in devices]
    rates = tuple(rate(directional_sinr(channels[k], solution.w_list, k, cfg.comm_noise_var)) for k in range(K))
    if resense:
        snrs = tuple(radar_snr_directional(d, solution.w_list, cfg) for d in devices)
        meas = [sample_measurement(d, s, slot, rng, cfg, k) for k, (d, s) in enumerate(zip(devices, snrs))]
    else:
        snrs = _nan(K)
        meas = list(prev_measurements)
    rec = SlotRecord(slot, variant, rates, tuple(solution.per_device_est_rate), snrs, tuple(prev_measurements),
                     halfwidths, solution.status, solution.total_covariance, solution.diagnostics)
    return rec, meas


def run_slot_omni_rates(devices: Sequence[DeviceGroundTruth], cfg: SystemConfig, slot: int,
                        variant: str) -> SlotRecord:
    """Isotropic transmission without sensing (no generator draws)."""
    K = len(devices)
    rates = tuple(rate(omni_sinr(d, cfg, K)) for d in devices)
    return SlotRecord(slot, variant, rates, _nan(K), _nan(K), (None,) * K, _nan(K), OMNI, _omni_covariance(cfg))


# ----------------------------------------------------------------------------
# pilot baseline

def pilot_noise_var(cfg: SystemConfig) -> float:
    return cfg.comm_noise_var / (cfg.pilot_len * cfg.total_power)


def pilot_estimate(true_channels: Sequence[np.ndarray], cfg: SystemConfig, rng: np.random.Generator,
                   devices: Sequence[DeviceGroundTruth] | None = None) -> list[np.ndarray]:
    """LMMSE estimate ``s (h + e)`` with ``e ~ CN(0, sigma_e^2 I)``.

    The per-element prior variance is ``alpha0^2 / d_k^2``; with ``devices``
    omitted it is taken from the channel itself (|h_km|^2 is constant along a
    line-of-sight ULA response).
    """
    var_e = pilot_noise_var(cfg)
    out = []
    for k, h in enumerate(true_channels):
        h = np.asarray(h, dtype=complex)
        if devices is not None:
            var_h = cfg.ref_path_gain / devices[k].distance ** 2
        else:
            var_h = float(np.mean(np.abs(h) ** 2))
        shrink = var_h / (var_h + var_e)
        e = math.sqrt(var_e / 2) * (rng.standard_normal(h.size) + 1j * rng.standard_normal(h.size))
        out.append(shrink * (h + e))
    return out


def run_slot_pilot(devices: Sequence[DeviceGroundTruth], cfg: SystemConfig, rng: np.random.Generator,
                   backend=None, slot: int = 1) -> SlotRecord:
    K = len(devices)
    overhead = 1.0 - cfg.pilot_overhead  # fraction of the slot left for data
    channels = [true_channel(d, cfg) for d in devices]
    h_hats = np.array(pilot_estimate(channels, cfg, rng, devices))
    problem = opt.BeamformingProblem.from_config(h_hats, cfg, [None] * K)
    sol = opt.optimize_beamforming(problem, cfg, backend)
    if sol.status == opt.FAILED:
        log.warning("slot %d: pilot-based optimiser failed, transmitting isotropically", slot)
        rec = run_slot_omni_rates(devices, cfg, slot, PILOT_BASED)
        rec.true_rate = tuple(overhead * r for r in rec.true_rate)
        rec.status = opt.FAILED
        rec.diagnostics = sol.diagnostics
        return rec
    rates = tuple(overhead * rate(directional_sinr(channels[k], sol.w_list, k, cfg.comm_noise_var))
                  for k in range(K))
    return SlotRecord(slot, PILOT_BASED, rates, tuple(sol.per_device_est_rate), _nan(K), (None,) * K, _nan(K),
                      sol.status, sol.total_covariance, sol.diagnostics)


# ----------------------------------------------------------------------------
# whole trials

def run_protocol(devices: Sequence[DeviceGroundTruth], cfg: SystemConfig, master_seed: int, variant: str,
                 trial: int = 0, backend=None) -> TrialResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not devices:
        raise ValueError("scenario has no devices")
    backend = backend or make_backend(cfg.solver.backend, cfg.solver.tol)
    rng = trial_rng(master_seed, trial)
    N = cfg.num_slots
    records: list[SlotRecord] = []

    if variant == PILOT_BASED:
        records = [run_slot_pilot(devices, cfg, rng, backend, n) for n in range(1, N + 1)]
        return TrialResult((master_seed, trial), variant, records, cfg.slot_len)

    rec, meas = run_slot_omni(devices, cfg, rng, 1, variant)
    records.append(rec)
    cached = None
    for n in range(2, N + 1):
        if variant == PROPOSED:
            rec, meas = run_slot_directional(devices, cfg, meas, rng, backend, n, variant)
        else:
            # the inputs never change, so neither does the optimum
            if cached is None:
                cached = solve_from_measurements(meas, cfg, backend)
            rec, meas = run_slot_directional(devices, cfg, meas, None, backend, n, variant,
                                             solution=cached, resense=False)
        records.append(rec)
    return TrialResult((master_seed, trial), variant, records, cfg.slot_len)


# ----------------------------------------------------------------------------
# Monte Carlo

@dataclass
class VariantSummary:
    variant: str
    trials: int
    slot_mean: np.ndarray  # mean sum rate per slot
    slot_ci: np.ndarray  # 95% CI half-width per slot
    throughput_mean: float
    throughput_ci: float
    failed_slots: int
    total_slots: int


@dataclass
class MonteCarloResult:
    master_seed: int
    summaries: dict[str, VariantSummary]
    trials: dict[str, list[TrialResult]]

    @property
    def failure_rate(self) -> float:
        failed = sum(s.failed_slots for s in self.summaries.values())
        total = sum(s.total_slots for s in self.summaries.values())
        return failed / total if total else 0.0


def _ci95(x: np.ndarray, axis: int = 0) -> np.ndarray:
    n = x.shape[axis]
    if n < 2:
        return np.zeros(np.delete(x.shape, axis)) if x.ndim > 1 else np.float64(0.0)
    return 1.96 * x.std(axis=axis, ddof=1) / math.sqrt(n)


def summarize(variant: str, results: Sequence[TrialResult]) -> VariantSummary:
    rates = np.array([r.sum_rates for r in results])
    tp = np.array([r.throughput for r in results])
    failed = sum(rec.status == opt.FAILED for r in results for rec in r.records)
    total = sum(len(r.records) for r in results)
    return VariantSummary(variant, len(results), rates.mean(axis=0), _ci95(rates), float(tp.mean()),
                          float(_ci95(tp)), failed, total)


def thread_count() -> int:
    """Worker processes: ``ISAC_THREADS`` if set, else the CPU count."""
    raw = os.environ.get("ISAC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer ISAC_THREADS=%r", raw)
    return os.cpu_count() or 1


def _trial_job(args) -> TrialResult:
    devices, cfg, master_seed, variant, trial = args
    return run_protocol(devices, cfg, master_seed, variant, trial)


def run_monte_carlo(devices: Sequence[DeviceGroundTruth], cfg: SystemConfig, master_seed: int, trials: int,
                    variants: Sequence[str] = VARIANTS, workers: int | None = None) -> MonteCarloResult:
    """Run ``trials`` independent trials per variant and aggregate them in trial order."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    workers = thread_count() if workers is None else max(1, workers)
    jobs = [(list(devices), cfg, master_seed, v, t) for v in variants for t in range(trials)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        done = [_trial_job(j) for j in jobs]
    by_variant = {v: done[i * trials:(i + 1) * trials] for i, v in enumerate(variants)}
    summaries = {v: summarize(v, res) for v, res in by_variant.items()}
    return MonteCarloResult(master_seed, summaries, by_variant)
