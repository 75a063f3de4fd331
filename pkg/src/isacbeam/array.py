"""ULA steering, line-of-sight channels, beampattern gain, SINR and rate."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import AXIS_COS, BROADSIDE_SIN, DeviceGroundTruth, SystemConfig, angle_domain

HERMITIAN_TOL = 1e-9
PSD_REL_TOL = 1e-8


def phase_direction(angle, convention: str):
    """Direction cosine that multiplies the inter-element phase (sin or cos of the angle)."""
    if convention == BROADSIDE_SIN:
        return np.sin(angle)
    if convention == AXIS_COS:
        return np.cos(angle)
    raise ValueError(f"unknown angle convention {convention!r}")


def phase_direction_derivative(angle, convention: str):
    """d/dangle of :func:`phase_direction`."""
    if convention == BROADSIDE_SIN:
        return np.cos(angle)
    if convention == AXIS_COS:
        return -np.sin(angle)
    raise ValueError(f"unknown angle convention {convention!r}")


def _check_angles(angles: np.ndarray, convention: str) -> None:
    lo, hi = angle_domain(convention)
    slack = 1e-12
    if not np.all(np.isfinite(angles)) or np.any(angles < lo - slack) or np.any(angles > hi + slack):
        raise ValueError(
            f"angle outside [{np.degrees(lo):g}, {np.degrees(hi):g}] deg for convention {convention}")


def steering_vector(angle: float, n_elements: int, cfg: SystemConfig) -> np.ndarray:
    """ULA response ``exp(j 2 pi (d/lambda) m g(angle))`` for m = 0..n-1."""
    _check_angles(np.asarray(angle, dtype=float), cfg.angle_convention)
    return steering_matrix(np.array([angle]), n_elements, cfg)[:, 0]


def steering_matrix(angles, n_elements: int, cfg: SystemConfig) -> np.ndarray:
    """Steering vectors for several angles, one per column (shape ``n x len(angles)``)."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    _check_angles(angles, cfg.angle_convention)
    m = np.arange(n_elements)
    phase = 2 * np.pi * (cfg.element_spacing / cfg.wavelength) * phase_direction(angles, cfg.angle_convention)
    return np.exp(1j * np.outer(m, phase))


def true_channel(dev: DeviceGroundTruth, cfg: SystemConfig) -> np.ndarray:
    return cfg.ref_path_amplitude / dev.distance * steering_vector(dev.angle, cfg.num_tx_antennas, cfg)


def estimated_channel(meas, cfg: SystemConfig) -> np.ndarray:
    """Channel rebuilt from a radar measurement (estimated angle and distance)."""
    if not meas.dist_hat > 0:
        raise ValueError(f"estimated distance must be positive, got {meas.dist_hat}")
    return cfg.ref_path_amplitude / meas.dist_hat * steering_vector(meas.theta_hat, cfg.num_tx_antennas, cfg)


def omni_sinr(dev: DeviceGroundTruth, cfg: SystemConfig, num_devices: int) -> float:
    """SINR under the isotropic covariance (P_T/N_t) I with K equal-power streams."""
    if num_devices < 1:
        raise ValueError("num_devices must be >= 1")
    rx = cfg.ref_path_gain * cfg.total_power / (dev.distance ** 2 * num_devices)
    return rx / (rx * (num_devices - 1) + cfg.comm_noise_var)


def directional_sinr(h: np.ndarray, beamformers: Sequence[np.ndarray], k: int, noise_var: float) -> float:
    w = np.asarray(beamformers)
    gains = np.abs(w.conj() @ h) ** 2
    interference = gains.sum() - gains[k]
    return float(gains[k] / (interference + noise_var))


def rate(sinr: float) -> float:
    """Achievable rate in bits/s/Hz."""
    if sinr < 0:
        raise ValueError(f"sinr must be >= 0, got {sinr}")
    return float(np.log2(1.0 + sinr))


def quad_form(A: np.ndarray, h: np.ndarray) -> float:
    """Re(h^H A h) = tr(h h^H A)."""
    return float(np.real(h.conj() @ A @ h))


def estimated_rate(h_hats: Sequence[np.ndarray], Ws: Sequence[np.ndarray], k: int, noise_var: float) -> float:
    h = h_hats[k]
    powers = [quad_form(W, h) for W in Ws]
    interference = sum(powers) - powers[k]
    return float(np.log2(1.0 + powers[k] / (interference + noise_var)))


def is_hermitian(A: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    A = np.asarray(A)
    return A.ndim == 2 and A.shape[0] == A.shape[1] and bool(np.all(np.abs(A - A.conj().T) <= tol))


def is_psd(A: np.ndarray, rel_tol: float = PSD_REL_TOL) -> bool:
    if not is_hermitian(A):
        return False
    A = (A + A.conj().T) / 2
    scale = max(abs(np.trace(A).real), 1e-300)
    return bool(np.linalg.eigvalsh(A)[0] >= -rel_tol * scale)


def beampattern_gain(W_total: np.ndarray, angle, cfg: SystemConfig):
    """Transmit gain a^H(angle) W a(angle); ``angle`` may be a scalar or an array."""
    W_total = np.asarray(W_total)
    if not is_hermitian(W_total):
        raise ValueError("covariance must be Hermitian")
    A = steering_matrix(angle, W_total.shape[0], cfg)
    gain = np.real(np.einsum("ia,ij,ja->a", A.conj(), W_total, A))
    floor = -PSD_REL_TOL * abs(np.trace(W_total).real)
    if np.any(gain < floor):
        raise ValueError("negative beampattern gain: covariance is not PSD")
    gain = np.maximum(gain, 0.0)
    return float(gain[0]) if np.ndim(angle) == 0 else gain


def mainlobe_width(angles: np.ndarray, gain: np.ndarray, center: float) -> float:
    """-3 dB width of the lobe nearest ``center`` on a sampled pattern.

    Climbs from the sample closest to ``center`` to the local maximum, then
    walks outwards to the half-power crossings, interpolating linearly between
    samples.  A lobe that never drops below half power is cut at the grid ends.
    """
    angles = np.asarray(angles, dtype=float)
    gain = np.asarray(gain, dtype=float)
    i = int(np.argmin(np.abs(angles - center)))
    while True:
        if i + 1 < gain.size and gain[i + 1] > gain[i]:
            i += 1
        elif i > 0 and gain[i - 1] > gain[i]:
            i -= 1
        else:
            break
    half = gain[i] / 2

    def crossing(step: int) -> float:
        j = i
        while 0 <= j + step < gain.size and gain[j + step] >= half:
            j += step
        if not 0 <= j + step < gain.size:
            return float(angles[j])
        a0, a1, g0, g1 = angles[j], angles[j + step], gain[j], gain[j + step]
        return float(a0 + (g0 - half) / (g0 - g1) * (a1 - a0))

    return crossing(1) - crossing(-1)
