"""Command-line front end: ``vmshield run|sweep|validate``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from . import scenario
from .scenario import ATTACKS, MAX_SEED, PRESETS, ScenarioConfig, ScenarioError
from .simulator import Metrics, SimulationResult, run

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3
DEFAULT_OUT = "vmshield-out"
ARTIFACTS = ("metrics.json", "ticks.csv", "actions.jsonl", "audit.jsonl")

# short names accepted in --grid, mapped onto scenario fields
GRID_ALIASES = {
    "D": "breach_dwell_time",
    "dwell": "breach_dwell_time",
    "audit-interval": "audit_interval",
    "underload-threshold": "underload_threshold",
}


class UsageError(ValueError):
    """Bad command-line input (exit 2)."""


@dataclass
class RunRequest:
    scenario_path: Optional[str] = None
    preset: Optional[str] = None
    out: Optional[str] = None
    overrides: dict[str, Any] = field(default_factory=dict)
    quiet: bool = False

    def __post_init__(self):
        if self.scenario_path is not None and self.preset is not None:
            raise UsageError("--scenario and --preset are mutually exclusive")

    def load(self) -> ScenarioConfig:
        if self.preset is not None:
            cfg = scenario.preset(self.preset)
        elif self.scenario_path is not None:
            cfg = scenario.load(self.scenario_path)
        else:
            raise UsageError("one of --scenario or --preset is required")
        return scenario.with_overrides(cfg, self.overrides) if self.overrides else cfg

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get("VMSHIELD_OUT") or DEFAULT_OUT)


def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64-1], got {v}")
    return v


def _scalar(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    raise UsageError(f"grid value {text!r} is not numeric")


def parse_grid(specs: Sequence[str]) -> dict[str, list]:
    """Turn ``["audit_interval=1,2", "D=3,5"]`` into an ordered grid."""
    grid: dict[str, list] = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = GRID_ALIASES.get(key.strip(), key.strip())
        if not sep or not key:
            raise UsageError(f"grid entry {spec!r} must look like key=v1,v2")
        vals = [_scalar(v.strip()) for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"grid entry {spec!r} has no values")
        grid[key] = vals
    return grid


def grid_points(grid: dict[str, list]) -> list[dict[str, Any]]:
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*grid.values())]


def write_artifacts(result: SimulationResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    texts = (result.metrics.to_json(), result.ticks_csv(),
             result.actions_jsonl(), result.audits_jsonl())
    for name, text in zip(ARTIFACTS, texts):
        with open(out / name, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _overrides(args) -> dict[str, Any]:
    o: dict[str, Any] = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.duration is not None:
        o["duration"] = args.duration
    if args.attack is not None:
        o["attack.scenario"] = args.attack
    if args.audit_interval is not None:
        o["audit_interval"] = args.audit_interval
    if args.dwell is not None:
        o["breach_dwell_time"] = args.dwell
    if args.underload_threshold is not None:
        o["underload_threshold"] = args.underload_threshold
    if args.no_audit:
        o["auditing"] = False
    return o


def _say(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg)


def _summary(m: Metrics) -> str:
    return (f"seed={m.seed} energy={m.energy:.3f} active_server_ticks={m.active_server_ticks} "
            f"migrations={m.migrations} terminations={m.terminations} "
            f"prevented={m.breaches_prevented} succeeded={m.breaches_succeeded}")


def cmd_run(req: RunRequest) -> int:
    cfg = req.load()
    result = run(cfg)
    out = req.out_dir()
    write_artifacts(result, out)
    _say(req.quiet, f"{_summary(result.metrics)} -> {out}")
    return EXIT_OK


def cmd_sweep(req: RunRequest, grid: dict[str, list]) -> int:
    points = grid_points(grid)
    if not points:
        raise UsageError("empty grid; pass at least one --grid key=v1,v2")
    base = req.load()
    out = req.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    metric_names = list(Metrics().to_dict())
    rows, failures = [], 0
    for i, point in enumerate(points):
        row = dict(point)
        try:
            cfg = scenario.with_overrides(base, point)
            result = run(cfg)
            write_artifacts(result, out / f"point-{i:04d}")
            row.update(status="ok", error="", **result.metrics.to_dict())
        except (ScenarioError, ArithmeticError, ValueError, RuntimeError) as exc:
            failures += 1
            row.update(status="failed", error=str(exc))
        rows.append(row)
        _say(req.quiet, f"[{i + 1}/{len(points)}] {point} {row['status']}")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[*keys, "status", "error", *metric_names],
                            lineterminator="\n", restval="")
    writer.writeheader()
    writer.writerows(rows)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    if failures:
        print(f"warning: {failures} of {len(points)} sweep points failed", file=sys.stderr)
    _say(req.quiet, f"sweep of {len(points)} points -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_validate(path: str, quiet: bool = False) -> int:
    scenario.load(path)
    _say(quiet, f"{path}: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmshield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", metavar="PATH")
        sp.add_argument("--preset", choices=PRESETS)
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--duration", type=int, metavar="TICKS")
        sp.add_argument("--attack", choices=ATTACKS)
        sp.add_argument("--audit-interval", type=int, metavar="N")
        sp.add_argument("--dwell", type=int, metavar="N", help="breach dwell time D")
        sp.add_argument("--underload-threshold", type=float, metavar="F")
        sp.add_argument("--no-audit", action="store_true", help="disable the security audit")
        sp.add_argument("-o", "--out", metavar="DIR",
                        help="output directory (default: $VMSHIELD_OUT or ./vmshield-out)")
        sp.add_argument("-q", "--quiet", action="store_true")

    common(sub.add_parser("run", help="run one scenario"))
    sw = sub.add_parser("sweep", help="run a scenario over a parameter grid")
    common(sw)
    sw.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                    help="grid axis over a numeric scenario field (repeatable)")
    v = sub.add_parser("validate", help="check a scenario file without running it")
    v.add_argument("path", nargs="?")
    v.add_argument("--scenario", dest="scenario_opt", metavar="PATH")
    v.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags already; keep --help at 0
        return int(exc.code or 0)
    try:
        if args.command == "validate":
            path = args.path or args.scenario_opt
            if path is None:
                raise UsageError("validate needs a scenario path")
            return cmd_validate(path, args.quiet)
        req = RunRequest(args.scenario, args.preset, args.out, _overrides(args), args.quiet)
        if args.command == "run":
            return cmd_run(req)
        return cmd_sweep(req, parse_grid(args.grid))
    except (ScenarioError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
