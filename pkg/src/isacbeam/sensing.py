"""Radar echo SNR, CRB measurement variances and sampled angle/range estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .array import phase_direction_derivative, steering_vector
from .config import SPEED_OF_LIGHT, DeviceGroundTruth, SystemConfig, angle_domain

MIN_DISTANCE = 0.1
# variance reported by the noise-free debug mode (must stay > 0)
NOISE_FREE_VAR = 1e-30
_DOMAIN_MARGIN = 1e-9


@dataclass(frozen=True)
class Measurement:
    theta_hat: float
    dist_hat: float
    var_theta: float
    var_dist: float
    sensed_in_slot: int
    device_id: int

    @property
    def sigma_theta(self) -> float:
        return math.sqrt(self.var_theta)


def reflection_coefficient(dev: DeviceGroundTruth) -> complex:
    if dev.distance <= 0:
        raise ValueError("distance must be positive")
    return dev.rcs / dev.distance ** 2


def radar_snr_omni(dev: DeviceGroundTruth, cfg: SystemConfig) -> float:
    beta = reflection_coefficient(dev)
    return cfg.total_power * cfg.processing_gain * abs(beta) ** 2 / cfg.radar_noise_var


def radar_snr_directional(dev: DeviceGroundTruth, beamformers: Sequence[np.ndarray], cfg: SystemConfig) -> float:
    """Echo SNR when transmitting ``beamformers``; illumination is taken at the true angle."""
    a = steering_vector(dev.angle, cfg.num_tx_antennas, cfg)
    w = np.asarray(beamformers)
    illumination = float(np.sum(np.abs(w.conj() @ a) ** 2))
    return radar_snr_covariance_gain(dev, illumination, cfg)


def radar_snr_covariance(dev: DeviceGroundTruth, covariance: np.ndarray, cfg: SystemConfig) -> float:
    """Same as :func:`radar_snr_directional` for a transmit covariance sum_i w_i w_i^H."""
    a = steering_vector(dev.angle, cfg.num_tx_antennas, cfg)
    return radar_snr_covariance_gain(dev, float(np.real(a.conj() @ covariance @ a)), cfg)


def radar_snr_covariance_gain(dev: DeviceGroundTruth, illumination: float, cfg: SystemConfig) -> float:
    beta = reflection_coefficient(dev)
    return cfg.processing_gain * abs(beta) ** 2 * illumination / cfg.radar_noise_var


def aperture_term(dev: DeviceGroundTruth, cfg: SystemConfig) -> float:
    """Squared RMS aperture width xi^2 entering the angle CRB.

    Uses the element spacing by default; ``cfg.xi_uses_distance`` swaps in the
    device distance instead.  The angular factor is the squared derivative of
    the steering phase direction, i.e. cos^2 for broadside-sin and sin^2 for
    axis-cos.
    """
    spacing = dev.distance if cfg.xi_uses_distance else cfg.element_spacing
    slope = phase_direction_derivative(dev.angle, cfg.angle_convention) ** 2
    n = cfg.num_tx_antennas
    return math.pi ** 2 * spacing ** 2 * slope * (n ** 2 - 1) / (3 * cfg.wavelength ** 2)


def max_angle_variance(cfg: SystemConfig) -> float:
    return (cfg.max_coverage_halfwidth / cfg.coverage_sigma_mult) ** 2


def crb_variances(snr: float, dev: DeviceGroundTruth, cfg: SystemConfig, clamp: bool = True) -> tuple[float, float]:
    """Delay variance (s^2) and angle variance (rad^2) from the CRB expressions.

    The angle variance is capped so that the coverage half-width
    ``l * sigma_theta`` never exceeds ``cfg.max_coverage_halfwidth``.
    """
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    if cfg.num_tx_antennas < 2:
        raise ValueError("angle is unobservable with a single transmit antenna")
    arrays = cfg.num_tx_antennas * cfg.num_rx_antennas
    var_tau = cfg.crb_const_tau / (snr * arrays * cfg.effective_bandwidth ** 2)
    xi2 = aperture_term(dev, cfg)
    var_theta = math.inf if xi2 == 0 else cfg.crb_const_theta / (snr * arrays * xi2)
    if clamp:
        var_theta = min(var_theta, max_angle_variance(cfg))
    return var_tau, var_theta


def clamp_angle(angle: float, cfg: SystemConfig) -> float:
    lo, hi = angle_domain(cfg.angle_convention)
    return min(max(angle, lo + _DOMAIN_MARGIN), hi - _DOMAIN_MARGIN)


def sample_measurement(dev: DeviceGroundTruth, snr: float, slot: int, rng: np.random.Generator,
                       cfg: SystemConfig, device_id: int = 0) -> Measurement:
    """Draw a delay and an angle estimate around the truth with CRB variances.

    Consumes exactly two standard normals from ``rng`` (delay first).
    """
    var_tau, var_theta = crb_variances(snr, dev, cfg)
    z_tau, z_theta = rng.standard_normal(2)
    if cfg.noise_free_sensing:
        var_tau = var_theta = 0.0
    # c * tau_hat / 2 with tau_hat = 2 d / c + z
    dist_hat = max(dev.distance + SPEED_OF_LIGHT / 2 * math.sqrt(var_tau) * z_tau, MIN_DISTANCE)
    theta_hat = clamp_angle(dev.angle + math.sqrt(var_theta) * z_theta, cfg)
    var_dist = SPEED_OF_LIGHT ** 2 * var_tau / 4
    return Measurement(
        theta_hat=theta_hat,
        dist_hat=dist_hat,
        var_theta=max(var_theta, NOISE_FREE_VAR),
        var_dist=max(var_dist, NOISE_FREE_VAR),
        sensed_in_slot=slot,
        device_id=device_id,
    )


def exact_measurement(dev: DeviceGroundTruth, slot: int, device_id: int = 0,
                      var_theta: float = NOISE_FREE_VAR) -> Measurement:
    """Noise-free measurement at the ground truth, for oracle tests."""
    return Measurement(dev.angle, dev.distance, var_theta, NOISE_FREE_VAR, slot, device_id)
