"""System configuration, device ground truth and the JSON scenario format.

A scenario file has four top-level objects::

    {
      "system":   {...physical constants...},
      "devices":  [{"angle_deg": 60, "distance_m": 50, "rcs": 1000}, ...],
      "solver":   {...optimizer tolerances...},
      "protocol": {...slot count, pilot baseline, ...}
    }

Angles are given in degrees, everything else in SI units.  Power-like
quantities accept either a linear key or a ``*_db`` key (e.g. ``alpha0_db``).
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

SPEED_OF_LIGHT = 2.998e8

BROADSIDE_SIN = "broadside-sin"
AXIS_COS = "axis-cos"
ANGLE_CONVENTIONS = (BROADSIDE_SIN, AXIS_COS)


class ConfigError(ValueError):
    """Raised when a configuration file is malformed or violates an invariant."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def linear_to_db(x: float) -> float:
    return 10.0 * math.log10(x)


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances and schedules for the SCA / IRM beamforming optimizer."""

    tol: float = 1e-8
    sca_tol: float = 1e-5
    sca_max_iter: int = 30
    irm_max_iter: int = 20
    irm_weight0: float = 0.01
    irm_growth: float = 2.0
    irm_rank_tol: float = 1e-6
    rank_ok_ratio: float = 0.999
    max_threshold_halvings: int = 3
    # relative singular-value cutoff for the per-device working subspace;
    # 0 disables compression
    subspace_tol: float = 1e-6
    backend: str = "clarabel"

    def __post_init__(self) -> None:
        _require(self.tol > 0, "solver.tol", "must be > 0")
        _require(self.sca_tol > 0, "solver.sca_tol", "must be > 0")
        _require(self.sca_max_iter >= 1, "solver.sca_max_iter", "must be >= 1")
        _require(self.irm_max_iter >= 1, "solver.irm_max_iter", "must be >= 1")
        _require(self.irm_weight0 > 0, "solver.irm_weight0", "must be > 0")
        _require(self.irm_growth >= 1, "solver.irm_growth", "must be >= 1")
        _require(self.irm_rank_tol > 0, "solver.irm_rank_tol", "must be > 0")
        _require(0 < self.rank_ok_ratio <= 1, "solver.rank_ok_ratio", "must be in (0, 1]")
        _require(self.max_threshold_halvings >= 0, "solver.max_threshold_halvings", "must be >= 0")
        _require(0 <= self.subspace_tol < 1, "solver.subspace_tol", "must be in [0, 1)")
        _require(self.backend in ("clarabel", "cvxpy"), "solver.backend",
                 "must be 'clarabel' or 'cvxpy'")


@dataclass(frozen=True)
class SystemConfig:
    """Every physical, protocol and solver constant of a simulation run.

    ``ref_path_gain`` is the linear value of alpha_0^2.  ``rate_thresholds``
    and ``coverage_tightness`` hold one value per device, or a single value
    shared by all devices.
    """

    num_tx_antennas: int = 20
    num_rx_antennas: int = 20
    wavelength: float = 0.06
    element_spacing: float | None = None
    total_power: float = 1.0
    comm_noise_var: float = 1.0
    radar_noise_var: float = 1.0
    processing_gain: float = 10.0
    effective_bandwidth: float = 4e6
    ref_path_gain: float = 1e5
    crb_const_tau: float = 1.0
    crb_const_theta: float = 1.0
    rate_thresholds: tuple[float, ...] = (0.5,)
    coverage_tightness: tuple[float, ...] = (0.05,)
    coverage_sigma_mult: float = 3.0
    num_slots: int = 10
    slot_len: float = 0.01
    angle_convention: str = AXIS_COS
    coverage_samples: int = 21
    max_coverage_halfwidth: float = math.pi / 6
    xi_uses_distance: bool = False
    pilot_len: int = 10
    symbols_per_slot: int = 1000
    noise_free_sensing: bool = False
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self) -> None:
        if self.element_spacing is None:
            object.__setattr__(self, "element_spacing", self.wavelength / 2)
        object.__setattr__(self, "rate_thresholds", _as_tuple(self.rate_thresholds))
        object.__setattr__(self, "coverage_tightness", _as_tuple(self.coverage_tightness))
        self._validate()

    def _validate(self) -> None:
        _require(self.num_tx_antennas >= 1, "num_tx_antennas", "must be >= 1")
        _require(self.num_rx_antennas >= 1, "num_rx_antennas", "must be >= 1")
        _require(self.wavelength > 0, "wavelength", "must be > 0")
        _require(self.element_spacing > 0, "element_spacing", "must be > 0")
        _require(self.total_power > 0, "total_power", "must be > 0")
        _require(self.comm_noise_var > 0, "comm_noise_var", "must be > 0")
        _require(self.radar_noise_var > 0, "radar_noise_var", "must be > 0")
        _require(self.processing_gain > 0, "processing_gain", "must be > 0")
        _require(self.effective_bandwidth > 0, "effective_bandwidth", "must be > 0")
        _require(self.ref_path_gain > 0, "ref_path_gain", "must be > 0")
        _require(self.crb_const_tau > 0, "crb_const_tau", "must be > 0")
        _require(self.crb_const_theta > 0, "crb_const_theta", "must be > 0")
        _require(len(self.rate_thresholds) >= 1, "rate_thresholds", "must not be empty")
        _require(all(g >= 0 for g in self.rate_thresholds), "rate_thresholds", "must be >= 0")
        _require(len(self.coverage_tightness) >= 1, "coverage_tightness", "must not be empty")
        _require(all(b > 0 for b in self.coverage_tightness), "coverage_tightness", "must be > 0")
        _require(self.coverage_sigma_mult > 0, "coverage_sigma_mult", "must be > 0")
        _require(self.num_slots >= 1, "num_slots", "must be >= 1")
        _require(self.slot_len > 0, "slot_len", "must be > 0")
        _require(self.angle_convention in ANGLE_CONVENTIONS, "angle_convention",
                 f"must be one of {ANGLE_CONVENTIONS}")
        _require(self.coverage_samples >= 3 and self.coverage_samples % 2 == 1,
                 "coverage_samples", "must be odd and >= 3")
        _require(0 < self.max_coverage_halfwidth <= math.pi / 2, "max_coverage_halfwidth",
                 "must be in (0, pi/2]")
        _require(self.pilot_len >= 1, "pilot_len", "must be >= 1")
        _require(self.symbols_per_slot > self.pilot_len, "symbols_per_slot",
                 "must exceed pilot_len")
        if self.element_spacing > self.wavelength / 2 * (1 + 1e-9):
            warnings.warn("element_spacing exceeds half a wavelength; expect grating lobes",
                          stacklevel=3)

    @property
    def ref_path_amplitude(self) -> float:
        """alpha_0, the square root of the reference path gain."""
        return math.sqrt(self.ref_path_gain)

    @property
    def pilot_overhead(self) -> float:
        return self.pilot_len / self.symbols_per_slot

    def rate_threshold(self, k: int) -> float:
        return _per_device(self.rate_thresholds, k)

    def coverage_bound(self, k: int) -> float:
        return _per_device(self.coverage_tightness, k)

    def replace(self, **changes: Any) -> "SystemConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DeviceGroundTruth:
    angle: float
    distance: float
    rcs: complex = 1e3

    def validate(self, convention: str, index: int | None = None) -> None:
        tag = "devices" if index is None else f"devices[{index}]"
        _require(self.distance > 0, f"{tag}.distance_m", "must be > 0")
        lo, hi = angle_domain(convention)
        _require(lo < self.angle < hi, f"{tag}.angle_deg",
                 f"must lie strictly inside ({math.degrees(lo):g}, {math.degrees(hi):g}) degrees "
                 f"for the {convention} convention")


def angle_domain(convention: str) -> tuple[float, float]:
    """Closed angular domain (radians) on which steering is defined."""
    if convention == BROADSIDE_SIN:
        return -math.pi / 2, math.pi / 2
    if convention == AXIS_COS:
        return 0.0, math.pi
    raise ValueError(f"unknown angle convention {convention!r}")


def _per_device(values: tuple[float, ...], k: int) -> float:
    if len(values) == 1:
        return values[0]
    return values[k]


def _as_tuple(value: Any) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),)
    return tuple(float(v) for v in value)


def _require(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{name} {message}")


# ----------------------------------------------------------------------------
# JSON schema

# file key -> (dataclass field, kind); kind "db" accepts a "<key>_db" variant
_SYSTEM_KEYS: dict[str, tuple[str, str]] = {
    "num_tx_antennas": ("num_tx_antennas", "int"),
    "num_rx_antennas": ("num_rx_antennas", "int"),
    "wavelength_m": ("wavelength", "float"),
    "element_spacing_m": ("element_spacing", "float"),
    "total_power": ("total_power", "db"),
    "comm_noise_var": ("comm_noise_var", "db"),
    "radar_noise_var": ("radar_noise_var", "db"),
    "processing_gain": ("processing_gain", "db"),
    "effective_bandwidth_hz": ("effective_bandwidth", "float"),
    "alpha0": ("ref_path_gain", "db"),
    "crb_const_tau": ("crb_const_tau", "float"),
    "crb_const_theta": ("crb_const_theta", "float"),
    "angle_convention": ("angle_convention", "str"),
    "xi_uses_distance": ("xi_uses_distance", "bool"),
}

_PROTOCOL_KEYS: dict[str, tuple[str, str]] = {
    "num_slots": ("num_slots", "int"),
    "slot_len_s": ("slot_len", "float"),
    "rate_thresholds": ("rate_thresholds", "list"),
    "coverage_tightness": ("coverage_tightness", "list"),
    "coverage_sigma_mult": ("coverage_sigma_mult", "float"),
    "coverage_samples": ("coverage_samples", "int"),
    "max_coverage_halfwidth_deg": ("max_coverage_halfwidth", "deg"),
    "pilot_len": ("pilot_len", "int"),
    "symbols_per_slot": ("symbols_per_slot", "int"),
    "noise_free_sensing": ("noise_free_sensing", "bool"),
}


def _convert(value: Any, kind: str, name: str) -> Any:
    try:
        if kind == "int":
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if kind in ("float", "db"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "deg":
            return math.radians(float(value))
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "list":
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return (float(value),)
            return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} has invalid value {value!r} (expected {kind})") from None
    raise AssertionError(kind)


def _read_section(section: dict, keys: dict[str, tuple[str, str]], prefix: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{prefix} must be an object")
    out: dict[str, Any] = {}
    known = set(keys) | {f"{k}_db" for k, (_, kind) in keys.items() if kind == "db"}
    # alpha0 is only ever given squared
    known |= {"alpha0_sq"}
    for key in section:
        if key not in known:
            raise ConfigError(f"{prefix}.{key} is not a recognised field")
    for key, (attr, kind) in keys.items():
        name = f"{prefix}.{key}"
        if kind == "db":
            lin_key = "alpha0_sq" if key == "alpha0" else key
            db_key = f"{key}_db"
            if lin_key in section and db_key in section:
                raise ConfigError(f"{name}: give either {lin_key} or {db_key}, not both")
            if db_key in section:
                out[attr] = db_to_linear(_convert(section[db_key], "float", f"{prefix}.{db_key}"))
            elif lin_key in section:
                out[attr] = _convert(section[lin_key], "float", f"{prefix}.{lin_key}")
        elif key in section:
            out[attr] = _convert(section[key], kind, name)
    return out


def _parse_rcs(value: Any, name: str) -> complex:
    if isinstance(value, bool):
        raise ConfigError(f"{name} has invalid value {value!r}")
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, dict) and set(value) <= {"re", "im"}:
        return complex(float(value.get("re", 0.0)), float(value.get("im", 0.0)))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ConfigError(f"{name} has invalid value {value!r} (expected number, [re, im] or {{re, im}})")


def config_from_dict(data: dict) -> tuple[SystemConfig, list[DeviceGroundTruth]]:
    """Build and validate a configuration from the documented JSON structure."""
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object")
    unknown = set(data) - {"system", "devices", "solver", "protocol"}
    if unknown:
        raise ConfigError(f"unrecognised top-level field(s): {sorted(unknown)}")
    if "devices" not in data:
        raise ConfigError("devices is required")

    kwargs = _read_section(data.get("system", {}), _SYSTEM_KEYS, "system")
    kwargs.update(_read_section(data.get("protocol", {}), _PROTOCOL_KEYS, "protocol"))

    solver_section = data.get("solver", {})
    if not isinstance(solver_section, dict):
        raise ConfigError("solver must be an object")
    solver_fields = {f.name: f for f in dataclasses.fields(SolverSettings)}
    solver_kwargs = {}
    for key, value in solver_section.items():
        if key not in solver_fields:
            raise ConfigError(f"solver.{key} is not a recognised field")
        default = solver_fields[key].default
        kind = {bool: "bool", int: "int", float: "float", str: "str"}[type(default)]
        solver_kwargs[key] = _convert(value, kind, f"solver.{key}")
    kwargs["solver"] = SolverSettings(**solver_kwargs)

    raw_devices = data["devices"]
    if not isinstance(raw_devices, list) or not raw_devices:
        raise ConfigError("devices must be a non-empty array")
    devices = []
    for i, entry in enumerate(raw_devices):
        tag = f"devices[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{tag} must be an object")
        extra = set(entry) - {"angle_deg", "distance_m", "rcs"}
        if extra:
            raise ConfigError(f"{tag} has unrecognised field(s) {sorted(extra)}")
        for key in ("angle_deg", "distance_m"):
            if key not in entry:
                raise ConfigError(f"{tag}.{key} is required")
        devices.append(DeviceGroundTruth(
            angle=_convert(entry["angle_deg"], "deg", f"{tag}.angle_deg"),
            distance=_convert(entry["distance_m"], "float", f"{tag}.distance_m"),
            rcs=_parse_rcs(entry.get("rcs", 1e3), f"{tag}.rcs"),
        ))

    cfg = SystemConfig(**kwargs)
    for name, values in (("rate_thresholds", cfg.rate_thresholds),
                         ("coverage_tightness", cfg.coverage_tightness)):
        if len(values) not in (1, len(devices)):
            raise ConfigError(f"protocol.{name} must have 1 or {len(devices)} entries")
    for i, dev in enumerate(devices):
        dev.validate(cfg.angle_convention, i)
    return cfg, devices


def load_config(path: str | Path) -> tuple[SystemConfig, list[DeviceGroundTruth]]:
    """Read a scenario JSON file; raises ConfigError on any problem."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    return config_from_dict(data)


def _exact_degrees(rad: float) -> float:
    """Degree value that converts back to exactly ``rad``."""
    deg = math.degrees(rad)
    candidates = [deg]
    lo = hi = deg
    for _ in range(8):
        lo, hi = math.nextafter(lo, -math.inf), math.nextafter(hi, math.inf)
        candidates += [lo, hi]
    for cand in candidates:
        if math.radians(cand) == rad:
            return cand
    return deg


def config_to_dict(cfg: SystemConfig, devices: Sequence[DeviceGroundTruth]) -> dict:
    """Inverse of :func:`config_from_dict`; always writes linear keys."""
    system = {
        "num_tx_antennas": cfg.num_tx_antennas,
        "num_rx_antennas": cfg.num_rx_antennas,
        "wavelength_m": cfg.wavelength,
        "element_spacing_m": cfg.element_spacing,
        "total_power": cfg.total_power,
        "comm_noise_var": cfg.comm_noise_var,
        "radar_noise_var": cfg.radar_noise_var,
        "processing_gain": cfg.processing_gain,
        "effective_bandwidth_hz": cfg.effective_bandwidth,
        "alpha0_sq": cfg.ref_path_gain,
        "crb_const_tau": cfg.crb_const_tau,
        "crb_const_theta": cfg.crb_const_theta,
        "angle_convention": cfg.angle_convention,
        "xi_uses_distance": cfg.xi_uses_distance,
    }
    protocol = {
        "num_slots": cfg.num_slots,
        "slot_len_s": cfg.slot_len,
        "rate_thresholds": list(cfg.rate_thresholds),
        "coverage_tightness": list(cfg.coverage_tightness),
        "coverage_sigma_mult": cfg.coverage_sigma_mult,
        "coverage_samples": cfg.coverage_samples,
        "max_coverage_halfwidth_deg": _exact_degrees(cfg.max_coverage_halfwidth),
        "pilot_len": cfg.pilot_len,
        "symbols_per_slot": cfg.symbols_per_slot,
        "noise_free_sensing": cfg.noise_free_sensing,
    }
    devs = []
    for dev in devices:
        rcs: Any = dev.rcs.real if dev.rcs.imag == 0 else [dev.rcs.real, dev.rcs.imag]
        devs.append({"angle_deg": _exact_degrees(dev.angle), "distance_m": dev.distance, "rcs": rcs})
    return {
        "system": system,
        "devices": devs,
        "solver": dataclasses.asdict(cfg.solver),
        "protocol": protocol,
    }


def dump_config(cfg: SystemConfig, devices: Sequence[DeviceGroundTruth], path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg, devices), indent=2) + "\n",
                          encoding="utf-8")


def default_scenario_path() -> Path:
    """Path of the bundled two-device scenario built on the simulation table values."""
    return Path(__file__).parent / "scenarios" / "table2.json"
