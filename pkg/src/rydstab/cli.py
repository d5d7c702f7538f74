"""Command line entry point: ``rydstab <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical-accuracy failure,
4 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .analysis import (
    PER_D_COLUMNS,
    SCALING_COLUMNS,
    FitError,
    ScalingResult,
    crossover,
    fit_power_law,
    fit_scaling,
    format_report,
    mean_basis_points,
    per_d_row,
    to_csv,
)
from .channels import ChannelError, QuadratureError, channel_to_dict, save_channel
from .checks import run_checks
from .dynamics import AccuracyError, BlockadeModel, GateCheckError, Propagator, verify_gate
from .protocols import PROTOCOLS, ConfigurationError, SynthesisError, atomic_write_text, schedule_for
from .pipeline import canonical_protocol, plaquette_channels, simulate_cell

log = logging.getLogger("rydstab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
SIMULATE_COLUMNS = ("protocol", "blockade", "basis", "d", "gamma", "shots", "failures", "p_L", "ci_low", "ci_high", "seed")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    protocols: list[str] = field(default_factory=lambda: ["NH"])
    blockade: str = "data-ancilla"
    gammas: list[float] = field(default_factory=lambda: [1e-3])
    distances: list[int] = field(default_factory=lambda: [3])
    rounds: int | None = None
    bases: list[str] = field(default_factory=lambda: ["X", "Z"])
    shots: int = 100_000
    seed: int = 0
    method: str = "first_order"
    fit_window: list[float] = field(default_factory=lambda: [1e-4, 1e-3])
    output: str = "runs/out"
    cache: str = "runs/cache"
    workers: int = 1  # execution detail, not part of the manifest identity

    HASHED = ("protocols", "blockade", "gammas", "distances", "rounds", "bases", "shots", "seed", "method", "fit_window")

    def validate(self) -> "RunConfig":
        try:
            self.protocols = [canonical_protocol(p) for p in self.protocols]
            model = BlockadeModel.parse(self.blockade)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.blockade = model.value
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r}")
            if p == "SIM" and model is not BlockadeModel.DATA_ANCILLA:
                raise ConfigError("SIM is only defined for the data-ancilla blockade")
        self.gammas = [float(g) for g in self.gammas]
        if not self.gammas or min(self.gammas) < 0:
            raise ConfigError("gammas must be a non-empty list of non-negative rates")
        self.distances = [int(d) for d in self.distances]
        if any(d % 2 == 0 or not 3 <= d <= 15 for d in self.distances):
            raise ConfigError("distances must be odd and in [3, 15]")
        if self.rounds is not None and int(self.rounds) < 1:
            raise ConfigError("rounds must be positive")
        self.bases = [b.upper() for b in self.bases]
        if not self.bases or any(b not in ("X", "Z") for b in self.bases):
            raise ConfigError("bases must be drawn from X and Z")
        if int(self.shots) < 1:
            raise ConfigError("shots must be at least 1")
        self.shots, self.seed, self.workers = int(self.shots), int(self.seed), int(self.workers)
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.method not in ("first_order", "exact"):
            raise ConfigError("method must be first_order or exact")
        if len(self.fit_window) != 2 or not 0 < self.fit_window[0] < self.fit_window[1]:
            raise ConfigError("fit_window must be [gamma_min, gamma_max] with 0 < min < max")
        self.fit_window = [float(x) for x in self.fit_window]
        return self

    def identity(self) -> dict:
        return {k: getattr(self, k) for k in self.HASHED}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True).encode()).hexdigest()


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data).validate()


# --------------------------------------------------------------------------
# subcommands


def cmd_synthesize(args) -> int:
    model = BlockadeModel.parse(args.blockade)
    name = canonical_protocol(args.protocol)
    sched = schedule_for(name, model, cache_dir=args.cache)
    print(f"protocol        {sched.name}")
    print(f"blockade        {model.value}")
    print(f"gates           {len(sched.gates)}")
    print(f"duration        {sched.duration:.6f} / Omega_max")
    print(f"rydberg_time    {sched.rydberg_time(model):.6f} / Omega_max")
    for k, g in enumerate(sched.gates[:1] if name != "SIM" else sched.gates):
        prop = Propagator(list(g.pulses), BlockadeModel.DATA_ANCILLA)
        nq = 2 ** len(g.atoms)
        fid, angles = verify_gate(prop.full[:nq, :nq], sched.compensation if name != "SIM" else None)
        print(f"gate_fidelity   {fid:.12f}")
        print(f"theta_a         {angles.theta_a:.9f}")
        print(f"theta_d         {angles.theta_d:.9f}")
    if name in ("TO", "NH"):
        other = "NH" if name == "TO" else "TO"
        ref = schedule_for(other, model, cache_dir=args.cache)
        ratio = sched.rydberg_time(model) / ref.rydberg_time(model)
        print(f"rydberg_ratio   {ratio:.6f} ({name}/{other})")
    return EXIT_OK


def _channel_path(out: Path, protocol: str, blockade: str, w: int, gamma: float, method: str) -> Path:
    return out / "channels" / f"{protocol}_{blockade}_w{w}_{method}_g{gamma!r}.json"


def cmd_extract(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    for p in cfg.protocols:
        for g in cfg.gammas:
            chans = plaquette_channels(p, cfg.blockade, g, cfg.cache, cfg.method)
            for w, ch in sorted(chans.items()):
                path = _channel_path(out, p, cfg.blockade, w, g, cfg.method)
                save_channel(ch, path)
                print(f"{path}  p_err={ch.error_probability:.6e}  support={len(ch.support())}")
    return EXIT_OK


def _cell_key(cfg: RunConfig, p: str, d: int, g: float, basis: str) -> dict:
    return {"protocol": p, "blockade": cfg.blockade, "d": d, "gamma": repr(g), "basis": basis,
            "shots": cfg.shots, "seed": cfg.seed, "rounds": cfg.rounds, "method": cfg.method}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    rows, seeds, channel_hashes = [], {}, {}
    computed = 0
    for p in cfg.protocols:
        for g in cfg.gammas:
            for w, ch in plaquette_channels(p, cfg.blockade, g, cfg.cache, cfg.method).items():
                channel_hashes[f"{p}|{cfg.blockade}|w{w}|{g!r}"] = channel_to_dict(ch)["checksum"]
            for d in cfg.distances:
                for basis in cfg.bases:
                    key = _cell_key(cfg, p, d, g, basis)
                    path = cells_dir / f"{_hash(key)[:24]}.json"
                    row = None
                    if path.exists():
                        stored = json.loads(path.read_text())
                        if stored.get("key") == key:
                            row = stored["row"]
                    if row is None:
                        res = simulate_cell(p, cfg.blockade, d, g, basis, cfg.shots, cfg.seed,
                                            cache_dir=cfg.cache, workers=cfg.workers, rounds=cfg.rounds,
                                            method=cfg.method)
                        row = res.row()
                        atomic_write_text(path, json.dumps({"key": key, "row": row}, sort_keys=True))
                        computed += 1
                        log.info("cell %s d=%d gamma=%g %s: %d/%d", p, d, g, basis, res.rate.failures, res.rate.shots)
                    rows.append(row)
                    seeds[_hash(key)[:24]] = row["seed"]
    text = to_csv(rows, SIMULATE_COLUMNS)
    atomic_write_text(out / "simulate.csv", text)
    manifest = {
        "config": cfg.identity(),
        "config_hash": cfg.hash(),
        "code_version": __version__,
        "channel_hashes": channel_hashes,
        "seeds": seeds,
        "csv_sha256": hashlib.sha256(text.encode()).hexdigest(),
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    print(f"{len(rows)} rows ({computed} computed) -> {out / 'simulate.csv'}")
    return EXIT_OK


def read_rows(paths: Sequence[str]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    if not rows:
        raise ConfigError("no simulate rows found")
    return rows


def fit_tables(rows: list[dict], window) -> tuple[dict, dict]:
    grouped = mean_basis_points(rows)
    fits = {}
    for key, pts in grouped.items():
        try:
            fits[key] = fit_power_law(pts, tuple(window))
        except FitError as exc:
            log.warning("skipping %s: %s", key, exc)
    scaling = {}
    for pb in sorted({k[:2] for k in fits}):
        per_d = {k[2]: r for k, r in fits.items() if k[:2] == pb}
        if len(per_d) >= 3:
            scaling[pb] = fit_scaling(per_d)
    return fits, scaling


def cmd_fit(args) -> int:
    rows = read_rows(args.input)
    fits, scaling = fit_tables(rows, args.window)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "fits_per_d.csv", to_csv([per_d_row(*k, r) for k, r in sorted(fits.items())], PER_D_COLUMNS))
    srows = [{"protocol": p, "blockade": b, "alpha": repr(s.alpha), "gamma_th": repr(s.gamma_th), "c": repr(s.c)}
             for (p, b), s in sorted(scaling.items())]
    atomic_write_text(out / "fits_scaling.csv", to_csv(srows, SCALING_COLUMNS))
    report = format_report(f"fit window {args.window}", fits, scaling)
    atomic_write_text(out / "fits.txt", report)
    print(report, end="")
    return EXIT_OK


def _scaling_from_csv(path: str) -> dict[str, ScalingResult]:
    with open(path, newline="") as fh:
        return {r["protocol"]: ScalingResult(float(r["alpha"]), float(r["gamma_th"]), float(r["c"])) for r in csv.DictReader(fh)}


def cmd_crossover(args) -> int:
    if args.scaling:
        table = _scaling_from_csv(args.scaling)
        try:
            a, b = (table[canonical_protocol(x)] for x in args.pair)
        except KeyError as exc:
            raise ConfigError(f"protocol {exc} not in {args.scaling}") from exc
    elif args.fit and args.other:
        a, b = ScalingResult(*args.fit), ScalingResult(*args.other)
    else:
        raise ConfigError("give --scaling with --pair, or --fit and --other")
    lines = [f"asymptotic {crossover(a, b):.6e}"]
    for d in args.d or []:
        lines.append(f"d={d} {crossover(a, b, d):.6e}")
    print("\n".join(lines))
    if args.output:
        atomic_write_text(Path(args.output), "\n".join(lines) + "\n")
    return EXIT_OK


FIGURES = {
    "da_nh_to": ("data-ancilla", ("NH", "TO")),
    "da_nh_sim": ("data-ancilla", ("NH", "SIM")),
    "a2a_np_nh": ("all-to-all", ("NP", "NH")),
    "a2a_to_pi2pi": ("all-to-all", ("TO", "PI_2PI_PI")),
}
FIT_FIGURES = {
    "fits_da_nh_sim": ("data-ancilla", ("NH", "SIM")),
    "fits_a2a_to_pi2pi": ("all-to-all", ("TO", "PI_2PI_PI")),
}


def cmd_plotdata(args) -> int:
    rows = read_rows(args.input)
    grouped = mean_basis_points(rows)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    cols = ("protocol", "blockade", "d", "gamma", "p_L", "ci_low", "ci_high")
    for fig, (blockade, protos) in FIGURES.items():
        series = []
        for (p, b, d), pts in sorted(grouped.items()):
            if b == blockade and p in protos:
                for pt in pts:
                    half = 1.959963984540054 * pt.sigma
                    series.append({"protocol": p, "blockade": b, "d": d, "gamma": repr(pt.gamma),
                                   "p_L": repr(pt.p_L), "ci_low": repr(max(pt.p_L - half, 0.0)),
                                   "ci_high": repr(pt.p_L + half)})
        if series:
            atomic_write_text(out / f"{fig}.csv", to_csv(series, cols))
    fits, _ = fit_tables(rows, args.window)
    for fig, (blockade, protos) in FIT_FIGURES.items():
        sel = [per_d_row(*k, r) for k, r in sorted(fits.items()) if k[1] == blockade and k[0] in protos]
        if sel:
            atomic_write_text(out / f"{fig}.csv", to_csv(sel, PER_D_COLUMNS))
    print(f"plot data -> {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# --------------------------------------------------------------------------
# parser


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in RunConfig.__dataclass_fields__}
    return load_config(args.config, overrides)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--protocols", nargs="+")
    p.add_argument("--blockade")
    p.add_argument("--gammas", nargs="+", type=float)
    p.add_argument("--distances", nargs="+", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--bases", nargs="+")
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=("first_order", "exact"))
    p.add_argument("--output")
    p.add_argument("--cache")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rydstab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="build or load a protocol's pulses and report gate figures")
    p.add_argument("protocol")
    p.add_argument("--blockade", default="data-ancilla")
    p.add_argument("--cache", default="runs/cache")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("extract", help="write Pauli channel files")
    _add_run_options(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("simulate", help="run memory experiments and write simulate.csv")
    _add_run_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="power-law and scaling fits from simulate CSVs")
    p.add_argument("input", nargs="+")
    p.add_argument("--window", nargs=2, type=float, default=[1e-4, 1e-3])
    p.add_argument("--output", default="runs/fits")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("crossover", help="crossing decay rate of two scaling laws")
    p.add_argument("--scaling", help="fits_scaling.csv from the fit command")
    p.add_argument("--pair", nargs=2, metavar=("PROTOCOL", "OTHER"))
    p.add_argument("--fit", nargs=3, type=float, metavar=("ALPHA", "GAMMA_TH", "C"))
    p.add_argument("--other", nargs=3, type=float, metavar=("ALPHA", "GAMMA_TH", "C"))
    p.add_argument("--d", nargs="*", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_crossover)

    p = sub.add_parser("plotdata", help="per-figure series from simulate CSVs")
    p.add_argument("input", nargs="+")
    p.add_argument("--window", nargs=2, type=float, default=[1e-4, 1e-3])
    p.add_argument("--output", default="runs/plotdata")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("verify", help="run the analytic self-checks")
    p.add_argument("--only", nargs="*")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, FitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AccuracyError, GateCheckError, QuadratureError, SynthesisError, ChannelError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
