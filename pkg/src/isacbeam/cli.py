"""Command-line front end.

    isacbeam simulate       --config tab2.json --seed 7 --trials 100 --variant all --out runs/a
    isacbeam beampattern    --config tab2.json --seed 0 --grid 0.25 --out runs/bp
    isacbeam sweep-antennas --config tab2.json --values 10,15,20 --trials 100 --out runs/sweep

Each command writes manifest.json first and then its CSV files.  A manifest
holds the resolved configuration and every flag that affects results, so
``simulate --manifest runs/a/manifest.json --out runs/b`` reproduces the CSVs
of ``runs/a`` byte for byte.

Exit codes: 0 success, 1 configuration/usage error (nothing written),
2 more than half of all slots hit an optimiser failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import subprocess
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from . import protocol as proto
from .array import beampattern_gain
from .config import ConfigError, angle_domain, config_from_dict, config_to_dict, load_config

log = logging.getLogger("isacbeam")

VARIANT_FLAGS = {
    "proposed": proto.PROPOSED,
    "sensing-based": proto.SENSING_BASED,
    "pilot-based": proto.PILOT_BASED,
}
MAX_FAILURE_RATE = 0.5
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# formatting helpers

def fmt(x) -> str:
    """Fixed 9-significant-digit rendering used in every CSV."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return f"{x:.9g}"
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def parse_variants(flag: str) -> list[str]:
    if flag == "all":
        return list(proto.VARIANTS)
    try:
        return [VARIANT_FLAGS[flag]]
    except KeyError:
        raise UsageError(f"unknown variant {flag!r}") from None


def parse_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be a comma-separated list of integers, got {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    bad = [v for v in values if v < 2]
    if bad:
        raise UsageError(f"antenna counts must be >= 2 (angle CRB undefined below), got {bad}")
    return values


def _deg(x: float) -> float:
    return math.degrees(x) if not math.isnan(x) else math.nan


# ----------------------------------------------------------------------------
# inputs and manifests

def resolve_inputs(args) -> tuple:
    """Config, devices and run parameters from --config or --manifest (flags override nothing else)."""
    if getattr(args, "manifest", None):
        try:
            data = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read manifest {args.manifest}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.manifest}: malformed JSON ({exc})") from None
        if data.get("command") != args.command:
            raise ConfigError(f"manifest was written by {data.get('command')!r}, not {args.command!r}")
        cfg, devices = config_from_dict(data["config"])
        return cfg, devices, data["parameters"]
    if not args.config:
        raise UsageError("either --config or --manifest is required")
    cfg, devices = load_config(args.config)
    return cfg, devices, None


def write_manifest(out: Path, command: str, cfg, devices, parameters: dict, outputs: list[str]) -> Path:
    manifest = {
        "command": command,
        "version": version_string(),
        "created": _now(),
        "master_seed": parameters.get("seed"),
        "parameters": parameters,
        "config": config_to_dict(cfg, devices),
        "outputs": outputs,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _finish_manifest(path: Path, **extra) -> None:
    data = json.loads(path.read_text(encoding="utf-8"))
    data.update(extra)
    data["finished"] = _now()
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(float(obj)) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# ----------------------------------------------------------------------------
# rows

RATES_HEADER = ["variant", "trial", "slot", "device", "true_rate", "est_rate", "radar_snr", "theta_hat_deg",
                "dist_hat_m", "coverage_halfwidth_deg", "status"]


def rate_rows(result: proto.MonteCarloResult):
    for variant, trials in result.trials.items():
        for t, trial in enumerate(trials):
            for rec in trial.records:
                for k in range(len(rec.true_rate)):
                    m = rec.measurement[k]
                    yield [variant, t, rec.slot, k, rec.true_rate[k], rec.est_rate[k], rec.radar_snr[k],
                           _deg(m.theta_hat) if m else math.nan, m.dist_hat if m else math.nan,
                           _deg(rec.coverage_halfwidth[k]), rec.status]


def summary_rows(result: proto.MonteCarloResult):
    for variant, s in result.summaries.items():
        for n, (mean, ci) in enumerate(zip(s.slot_mean, s.slot_ci), start=1):
            yield [variant, n, s.trials, mean, ci]


def throughput_rows(result: proto.MonteCarloResult):
    ref = result.summaries.get(proto.PROPOSED)
    for variant, s in result.summaries.items():
        gain = math.nan if ref is None else 100.0 * (ref.throughput_mean / s.throughput_mean - 1.0)
        yield [variant, s.trials, s.throughput_mean, s.throughput_ci, gain, s.failed_slots, s.total_slots]


def diagnostics_dump(result: proto.MonteCarloResult) -> list[dict]:
    out = []
    for variant, trials in result.trials.items():
        for t, trial in enumerate(trials):
            for rec in trial.records:
                if rec.diagnostics is not None:
                    out.append({"variant": variant, "trial": t, "slot": rec.slot, "status": rec.status,
                                "diagnostics": _jsonable(rec.diagnostics)})
    return out


# ----------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    cfg, devices, params = resolve_inputs(args)
    if params is None:
        params = {"seed": args.seed, "trials": args.trials, "variants": parse_variants(args.variant)}
    if params["trials"] < 1:
        raise UsageError("--trials must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = ["rates.csv", "summary.csv", "throughput.csv"] + (["diagnostics.json"] if args.verbose else [])
    manifest = write_manifest(out, "simulate", cfg, devices, params, files)

    result = proto.run_monte_carlo(devices, cfg, params["seed"], params["trials"], params["variants"])
    write_csv(out / "rates.csv", RATES_HEADER, rate_rows(result))
    write_csv(out / "summary.csv", ["variant", "slot", "trials", "mean_sum_rate", "ci95_sum_rate"],
              summary_rows(result))
    write_csv(out / "throughput.csv", ["variant", "trials", "mean_throughput", "ci95_throughput",
                                       "proposed_gain_pct", "failed_slots", "total_slots"],
              throughput_rows(result))
    if args.verbose:
        (out / "diagnostics.json").write_text(json.dumps(diagnostics_dump(result), indent=1) + "\n",
                                              encoding="utf-8")
    _finish_manifest(manifest, failure_rate=result.failure_rate)
    for s in result.summaries.values():
        print(f"{s.variant:14s} throughput {s.throughput_mean:.6g} +- {s.throughput_ci:.3g} bits/Hz "
              f"({s.trials} trials, {s.failed_slots} failed slots)")
    if result.failure_rate > MAX_FAILURE_RATE:
        print(f"error: optimiser failed in {100 * result.failure_rate:.1f}% of slots", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def angle_grid(step_deg: float, convention: str) -> np.ndarray:
    """Inclusive grid over the angle domain, in degrees."""
    if not step_deg > 0:
        raise UsageError("--grid must be positive")
    lo, hi = (math.degrees(a) for a in angle_domain(convention))
    count = int(round((hi - lo) / step_deg))
    grid = lo + step_deg * np.arange(count + 1)
    return np.clip(grid, lo, hi)


def cmd_beampattern(args) -> int:
    cfg, devices, params = resolve_inputs(args)
    if params is None:
        params = {"seed": args.seed, "grid": args.grid, "slot": args.slot, "variant": parse_variants(args.variant)[0]}
    grid = angle_grid(params["grid"], cfg.angle_convention)
    if params["slot"] is not None and not 1 <= params["slot"] <= cfg.num_slots:
        raise UsageError(f"--slot must be in 1..{cfg.num_slots}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out, "beampattern", cfg, devices, params, ["beampattern.csv"])

    trial = proto.run_protocol(devices, cfg, params["seed"], params["variant"])
    angles = np.radians(grid)
    rows = []
    for rec in trial.records:
        if params["slot"] is not None and rec.slot != params["slot"]:
            continue
        gain = beampattern_gain(rec.covariance, angles, cfg)
        rows += [[rec.slot, a, g] for a, g in zip(grid, gain)]
    write_csv(out / "beampattern.csv", ["slot", "angle_deg", "gain"], rows)
    _finish_manifest(manifest)
    failed = sum(r.status == "failed" for r in trial.records)
    return EXIT_SOLVER if failed > MAX_FAILURE_RATE * len(trial.records) else EXIT_OK


def cmd_sweep_antennas(args) -> int:
    cfg, devices, params = resolve_inputs(args)
    if params is None:
        params = {"seed": args.seed, "trials": args.trials, "values": parse_values(args.values or "")}
    if params["trials"] < 1:
        raise UsageError("--trials must be >= 1")
    configs = [cfg.replace(num_tx_antennas=v, num_rx_antennas=v) for v in params["values"]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out, "sweep-antennas", cfg, devices, params, ["sweep.csv"])

    rows, failed, total = [], 0, 0
    for v, c in zip(params["values"], configs):
        res = proto.run_monte_carlo(devices, c, params["seed"], params["trials"], [proto.PROPOSED])
        s = res.summaries[proto.PROPOSED]
        rows.append([proto.PROPOSED, v, s.trials, s.throughput_mean, s.throughput_ci, s.slot_mean[-1],
                     s.failed_slots, s.total_slots])
        failed += s.failed_slots
        total += s.total_slots
        print(f"N_t = N_r = {v:3d}: throughput {s.throughput_mean:.6g} +- {s.throughput_ci:.3g} bits/Hz")
    write_csv(out / "sweep.csv", ["variant", "num_antennas", "trials", "mean_throughput", "ci95_throughput",
                                  "mean_final_sum_rate", "failed_slots", "total_slots"], rows)
    _finish_manifest(manifest, failure_rate=failed / total)
    return EXIT_SOLVER if failed > MAX_FAILURE_RATE * total else EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isacbeam", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trials: bool = True):
        p.add_argument("--config", help="scenario JSON file")
        p.add_argument("--manifest", help="re-run from a manifest.json written by an earlier run")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        if trials:
            p.add_argument("--trials", type=int, default=100, help="Monte-Carlo trials (default 100)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--verbose", action="store_true", help="dump optimiser diagnostics as JSON")

    p = sub.add_parser("simulate", help="Monte-Carlo comparison of the protocol and its baselines")
    common(p)
    p.add_argument("--variant", default="all", choices=[*VARIANT_FLAGS, "all"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("beampattern", help="per-slot transmit beampattern of one trial")
    common(p, trials=False)
    p.add_argument("--variant", default="proposed", choices=list(VARIANT_FLAGS))
    p.add_argument("--grid", type=float, default=0.25, help="angle step in degrees (default 0.25)")
    p.add_argument("--slot", type=int, default=None, help="only this slot (default: all)")
    p.set_defaults(func=cmd_beampattern)

    p = sub.add_parser("sweep-antennas", help="proposed-protocol throughput versus N_t = N_r")
    common(p)
    p.add_argument("--values", default="10,15,20", help="comma-separated antenna counts")
    p.set_defaults(func=cmd_sweep_antennas)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
