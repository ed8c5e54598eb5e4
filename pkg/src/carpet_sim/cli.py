"""Command-line interface: regions, models, estimates, oracle solves and verification runs.

Exit codes: 0 success / all checks pass, 1 a check failed, 2 usage or
configuration error (including a hypothesis-violating alpha), 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

from .estimators import (
    AllExits,
    BallSet,
    BoxSet,
    CellSet,
    est_exit_time,
    est_green,
    est_harmonic_measure,
)
from .geometry import DEFAULT_DW, MAX_LEVEL, CellAddress, FractalParams, Point, build_region, load_region, unit_region
from .harness import (
    BhpReport,
    HypothesisViolation,
    check_bhp_pairs,
    check_carleson,
    check_lemma10,
    check_lemma11,
    check_lemma12,
    check_step_decomposition,
    default_bhp_pairs,
    exit_time_scaling,
    exterior_patches,
    summary_table,
)
from .oracle import (
    build_absorbing_system,
    config_hash,
    exact_green_row,
    harmonic_values,
    save_fixture,
)
from .scaffold import build_bhp_geometry
from .stable_process import build_jump_chain, default_threads

FIXTURE_ENV = "CARPET_SIM_FIXTURES"
TRUNCATION_FLAG = 1e-3
CHECKS = ("lemma10", "lemma11", "lemma12", "carleson", "bhp", "steps")


class ConfigError(ValueError):
    """Invalid configuration or command line."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.5
    dw: float = DEFAULT_DW
    level: int = 5
    n_samples: int = 10**5
    seed: int | None = None
    threads: int | None = None
    region: str | None = None
    out: str | None = None
    checks: str = "all"

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ConfigError(f"alpha must lie in (0, 2), got {self.alpha}")
        if self.dw <= 0:
            raise ConfigError("dw must be positive")
        if not 0 <= self.level <= MAX_LEVEL:
            raise ConfigError(f"level must lie in [0, {MAX_LEVEL}], got {self.level}")
        if self.n_samples <= 0:
            raise ConfigError("samples must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be at least 1")
        for c in self.checks.split(","):
            if c not in CHECKS + ("all",):
                raise ConfigError(f"unknown check {c!r}")

    @property
    def params(self) -> FractalParams:
        return FractalParams(self.alpha, self.dw)

    def resolved_threads(self) -> int:
        return self.threads or default_threads()

    def hashable(self) -> dict:
        """Configuration that determines results (thread count and output path excluded)."""
        d = asdict(self)
        d.pop("threads")
        d.pop("out")
        return d


_KEYS = {
    "alpha": ("alpha", float),
    "dw": ("dw", float),
    "level": ("level", int),
    "samples": ("n_samples", lambda v: int(float(v))),
    "n_samples": ("n_samples", lambda v: int(float(v))),
    "seed": ("seed", int),
    "threads": ("threads", int),
    "region": ("region", str),
    "out": ("out", str),
    "checks": ("checks", str),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        field_name, conv = _KEYS[key]
        try:
            values[field_name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the ``key=value`` file, then ``overrides`` (command-line flags)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_config_text(p.read_text(), str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def fixture_dir(flag: str | None) -> Path:
    """``--fixtures`` flag, else the environment variable, else ``./fixtures``."""
    return Path(flag or os.environ.get(FIXTURE_ENV) or "fixtures")


# ---------------------------------------------------------------------------
# argument helpers


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a rational number: {text!r}") from exc


def _pair(text: str, conv=int):
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated values, got {text!r}")
    return conv(parts[0]), conv(parts[1])


def _cells(text: str) -> list[tuple[int, int]]:
    return [_pair(c) for c in text.split(";") if c.strip()]


def parse_exit_set(text: str):
    """``all`` | ``ball:cx,cy,r`` | ``box:x0,x1,y0,y1`` | ``cells:level:i,j;i,j``."""
    if text == "all":
        return AllExits()
    kind, _, rest = text.partition(":")
    try:
        if kind == "ball":
            cx, cy, r = (float(_fraction(v)) for v in rest.split(","))
            return BallSet(cx, cy, r)
        if kind == "box":
            vals = [float(v) if v.strip() in ("inf", "-inf") else float(_fraction(v)) for v in rest.split(",")]
            return BoxSet(*vals)
        if kind == "cells":
            lvl, _, cells = rest.partition(":")
            return CellSet(int(lvl), _cells(cells))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed exit set {text!r}: {exc}") from exc
    raise ConfigError(f"unknown exit set {text!r}")


def _region(cfg: RunConfig):
    if cfg.region is None:
        return unit_region()
    try:
        return load_region(cfg.region)
    except FileNotFoundError as exc:
        raise ConfigError(f"region file {cfg.region} not found") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _start(region, level: int, text: str | None) -> tuple[int, int]:
    if text:
        return _pair(text)
    cells = region.cells_at(level)
    return int(cells[0, 0]), int(cells[0, 1])


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("an explicit --seed is required")
    return cfg.seed


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _write_plot(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "x", "value", "stderr"])
        for row in rows:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])


# ---------------------------------------------------------------------------
# subcommands


def cmd_region(args, cfg: RunConfig) -> int:
    if args.action == "build":
        cells = _cells(args.cells)
        try:
            region = build_region([CellAddress(args.cell_level, i, j) for i, j in cells])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.out:
            region.save(cfg.out)
        else:
            _write_json(region.to_json(), None)
        return 0
    _write_json(_region(cfg).describe(), cfg.out)
    return 0


def cmd_model(args, cfg: RunConfig) -> int:
    region = _region(cfg)
    try:
        model = build_jump_chain(region, cfg.level, cfg.params, halo=args.halo)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    info = {
        "key": model.key(),
        "params": cfg.params.to_dict(),
        "level": model.level,
        "hold_mean": model.hold_mean,
        "envelope_mass": model.envelope_mass,
        "region_states": region.n_states(cfg.level),
        "hypothesis_flags": cfg.params.hypothesis_flags(),
    }
    if region.n_states(cfg.level) <= 5000:
        K = model.explicit
        info["explicit_states"] = int(len(K.states))
        info["max_truncated_mass"] = float(np.max(K.truncated_mass()))
        # the far sink is an exit for the sampler too, so this only flags oracle resolution of exit sets
        info["truncated_mass_flag"] = info["max_truncated_mass"] > TRUNCATION_FLAG
    _write_json(info, cfg.out)
    return 0


def cmd_estimate(args, cfg: RunConfig) -> int:
    region = _region(cfg)
    seed = 0 if cfg.seed is None else cfg.seed
    model = build_jump_chain(None, cfg.level, cfg.params)
    x = _start(region, cfg.level, args.start)
    kw = {"threads": cfg.resolved_threads()}
    if args.quantity == "hm":
        res = est_harmonic_measure(model, region, x, parse_exit_set(args.set), cfg.n_samples, seed, **kw)
    elif args.quantity == "exit":
        res = est_exit_time(model, region, x, cfg.n_samples, seed, **kw)
    else:
        target = _cells(args.target) if args.target else [x]
        res = est_green(model, region, x, target, cfg.n_samples, seed, **kw)
    print(f"{args.quantity} = {res.value:.6g} +- {res.stderr:.2g}")
    if cfg.out:
        _write_json(res.to_json(), cfg.out)
    if args.emit_plot:
        _write_plot(args.emit_plot, [(args.quantity, f"{x[0]};{x[1]}", res.value, res.stderr)])
    return 0


def _oracle_system(cfg: RunConfig, halo: int):
    region = _region(cfg)
    try:
        model = build_jump_chain(region, cfg.level, cfg.params, halo=halo)
        system = build_absorbing_system(model, region)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return region, model, system


def cmd_oracle(args, cfg: RunConfig) -> int:
    region, model, system = _oracle_system(cfg, args.halo)
    E = parse_exit_set(args.set)
    hm = harmonic_values(system, system.absorbing_mask(E, cfg.level))
    times = system.fundamental @ system.hold
    if args.action == "solve":
        config = {"model": model.key(), "set": E.key(), "quantity": "exit_time+hm"}
        out = {
            "config_hash": config_hash(config),
            "interior": system.interior.tolist(),
            "exit_time": times.tolist(),
            "harmonic_measure": hm.tolist(),
        }
        fdir = fixture_dir(args.fixtures)
        fdir.mkdir(parents=True, exist_ok=True)
        save_fixture(fdir / f"oracle_{config_hash(config)}.json", config, np.concatenate([times, hm]))
        _write_json(out, cfg.out)
        return 0
    seed = 0 if cfg.seed is None else cfg.seed
    kw = {"threads": cfg.resolved_threads()}
    n = len(system.interior)
    picks = sorted({0, n // 2, n - 1})
    rows = []
    for k in picks:
        x = tuple(int(v) for v in system.interior[k])
        mc = est_harmonic_measure(model, region, x, E, cfg.n_samples, seed, **kw)
        rows.append(("hm", x, mc, float(hm[k])))
        mc = est_exit_time(model, region, x, cfg.n_samples, seed + 1, **kw)
        rows.append(("exit", x, mc, float(times[k])))
        mc = est_green(model, region, x, [x], cfg.n_samples, seed + 2, **kw)
        rows.append(("green", x, mc, float(exact_green_row(system, x)[k])))
    print(f"{'quantity':8} {'start':>10} {'mc':>12} {'stderr':>10} {'exact':>12} {'|diff|':>10} {'sigmas':>7}")
    table = []
    for q, x, mc, ex in rows:
        diff = abs(mc.value - ex)
        sig = diff / mc.stderr if mc.stderr > 0 else (0.0 if diff < 1e-12 else math.inf)
        print(f"{q:8} {str(x):>10} {mc.value:12.6g} {mc.stderr:10.2g} {ex:12.6g} {diff:10.2g} {sig:7.2f}")
        table.append({"quantity": q, "start": list(x), "mc": mc.value, "stderr": mc.stderr, "exact": ex,
                      "abs_diff": diff, "sigmas": sig})
    print(f"max |MC - exact| = {max(t['abs_diff'] for t in table):.3g}")
    if cfg.out:
        _write_json(table, cfg.out)
    return 0


def _refused(name: str, exc: Exception) -> BhpReport:
    rep = BhpReport(name)
    rep.notes.append(str(exc))
    return rep


def run_checks(cfg: RunConfig, names, Q: Point, r: Fraction, *, explicit: bool) -> list[BhpReport]:
    D = _region(cfg)
    seed = _require_seed(cfg)
    p = cfg.params
    kw = {"params": p, "seed": seed, "threads": cfg.resolved_threads()}
    lvl, n = cfg.level, cfg.n_samples
    reports = []
    for name in names:
        try:
            if name == "lemma10":
                rep = check_lemma10(D, Q, r, lvl, n, **kw)
            elif name == "lemma11":
                rep = check_lemma11(D, Q, r, None, lvl, n, **kw)
            elif name == "lemma12":
                rep = check_lemma12(D, Q, r, None, lvl, n, **kw)
            elif name == "carleson":
                rep = check_carleson(D, Q, r, exterior_patches(D, Q, 2 * float(r))[0], lvl, n, **kw)
            elif name == "bhp":
                rep = check_bhp_pairs(D, Q, r, default_bhp_pairs(D, Q, r), lvl, n, **kw)
            else:
                geom = build_bhp_geometry(D, Q, r)
                rep = check_step_decomposition(geom, exterior_patches(D, Q, 2 * float(r))[:3], lvl, n, **kw)
        except HypothesisViolation as exc:
            if explicit:
                raise
            rep = _refused(name, exc)
            rep.records = []
        reports.append(rep)
    return reports


def _report_json(rep: BhpReport, cfg: RunConfig, Q: Point, r: Fraction, stamp: str) -> dict:
    d = rep.to_json()
    if not rep.records and rep.notes:
        d["status"] = "refused"
    conf = dict(cfg.hashable(), Q=list(Q.xy), r=str(r), check=rep.name)
    d["config"] = conf
    d["config_hash"] = config_hash(conf)
    d["hypothesis_flags"] = cfg.params.hypothesis_flags()
    d["timestamp"] = stamp
    return d


def strip_timestamps(report_text: str) -> str:
    """Report JSON with the timestamp fields removed (for byte comparisons)."""
    data = json.loads(report_text)
    for d in data:
        d.pop("timestamp", None)
    return json.dumps(data, indent=1, sort_keys=True)


def _plot_rows(rep: BhpReport):
    for rec in rep.records:
        det = rec.details
        if "values" in det and "x" in det:
            for x, v, se in zip(det["x"], det["values"], det.get("stderr", [0.0] * len(det["values"]))):
                yield (f"{rep.name}:{rec.name}@{rec.level}", f"{x[0]};{x[1]}", v, se)
        elif "ratios" in det and "x" in det:
            for x, v in zip(det["x"], det["ratios"]):
                yield (f"{rep.name}:{rec.name}@{rec.level}", f"{x[0]};{x[1]}", v, 0.0)
        elif "rows" in det:
            for row in det["rows"]:
                yield (f"{rep.name}:omega@{rec.level}", f"{row['x'][0]};{row['x'][1]}", row["omega"], row["omega_se"])
                yield (f"{rep.name}:green@{rec.level}", f"{row['x'][0]};{row['x'][1]}", row["green"], row["green_se"])


def cmd_verify(args, cfg: RunConfig) -> int:
    names = list(CHECKS) if args.check == "all" else [args.check]
    Q = Point.from_fractions(*_pair(args.q, _fraction))
    r = _fraction(args.r)
    reports = run_checks(cfg, names, Q, r, explicit=args.check != "all")
    stamp = datetime.now(timezone.utc).isoformat()
    data = [_report_json(rep, cfg, Q, r, stamp) for rep in reports]
    print(summary_table(reports))
    _write_json(data, cfg.out)
    if args.emit_plot:
        _write_plot(args.emit_plot, [row for rep in reports for row in _plot_rows(rep)])
    return 0 if all(d["status"] == "pass" for d in data) else 1


def cmd_scaling(args, cfg: RunConfig) -> int:
    center = _pair(args.center, _fraction)
    radii = [_fraction(v) for v in args.radii.split(",")]
    seed = 0 if cfg.seed is None else cfg.seed
    res = exit_time_scaling(center, radii, cfg.level, cfg.n_samples, params=cfg.params, seed=seed,
                            threads=cfg.resolved_threads())
    print(f"{'r':>12} {'E tau':>12} {'stderr':>10}")
    for r, m, se in zip(res.radii, res.means, res.stderrs):
        print(f"{r:12.6g} {m:12.6g} {se:10.2g}")
    print(f"slope = {res.slope:.4f} (alpha dw / 2 = {res.expected:.4f})")
    if cfg.out:
        _write_json(res.to_json(), cfg.out)
    if args.emit_plot:
        _write_plot(args.emit_plot, [("exit_time", r, m, se) for r, m, se in zip(res.radii, res.means, res.stderrs)])
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--alpha", type=float)
    p.add_argument("--dw", type=float)
    p.add_argument("--level", type=int)
    p.add_argument("--samples", type=lambda v: int(float(v)), dest="n_samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--region", help="region JSON file (default: the unit cell)")
    p.add_argument("--out", help="output file")
    p.add_argument("--emit-plot", dest="emit_plot", help="write (x, value, stderr) CSV series here")
    p.add_argument("--fixtures", help=f"fixture directory (else ${FIXTURE_ENV}, else ./fixtures)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carpet-sim", description="Stable jump processes on the Sierpinski carpet.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("region", help="build or describe a region")
    p.add_argument("action", choices=["build", "show"])
    p.add_argument("--cells", default="0,0", help="cells 'i,j;i,j' at --cell-level")
    p.add_argument("--cell-level", dest="cell_level", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_region)

    p = sub.add_parser("model", help="build a jump-chain model")
    p.add_argument("action", choices=["build"])
    p.add_argument("--halo", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("estimate", help="Monte Carlo estimates")
    p.add_argument("quantity", choices=["hm", "green", "exit"])
    p.add_argument("--start", help="start cell 'i,j' at --level (default: first cell of the region)")
    p.add_argument("--set", default="all", help="exit set: all | ball:cx,cy,r | box:x0,x1,y0,y1 | cells:m:i,j;...")
    p.add_argument("--target", help="Green target cells 'i,j;i,j' (default: the start cell)")
    _common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("oracle", help="exact absorbing-chain solves")
    p.add_argument("action", choices=["solve", "compare"])
    p.add_argument("--set", default="all")
    p.add_argument("--halo", type=int, default=3)
    _common(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify", help="run verification checks")
    p.add_argument("check", choices=list(CHECKS) + ["all"])
    p.add_argument("--q", default="0,0", help="boundary point Q as 'x,y' (rationals)")
    p.add_argument("--r", default="1/9", help="radius r (rational)")
    _common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("scaling", help="mean exit time of balls against radius")
    p.add_argument("--center", default="1/3,1/3")
    p.add_argument("--radii", default="1/9,1/27,1/81,1/243")
    _common(p)
    p.set_defaults(func=cmd_scaling)
    return parser


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: getattr(args, k) for k in ("alpha", "dw", "level", "n_samples", "seed", "threads", "region", "out")}
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except HypothesisViolation as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 3
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command())


__all__ = ["ConfigError", "RunConfig", "build_parser", "load_config", "main", "parse_config_text",
           "parse_exit_set", "run_command", "strip_timestamps"]
