"""Executable checks of the boundary comparison estimates.

Every check evaluates an empirical constant at two consecutive levels
``n`` and ``n + 1`` and passes when the constant is finite at three standard
errors and the two levels agree within a factor of two.  Test points ``x``
are the cells of a fixed coarse grid whose centres lie in the stated set;
the start cell at a finer level is the lower-left descendant of the grid
cell, so both levels start from the same physical points.  ``n_samples``
counts trajectories per start point.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import scipy.stats

from .estimators import BallSet, BoxSet, DifferenceSet, ExitSet, HarmonicFunctionSpec, exit_run
from .geometry import (
    FractalParams,
    Point,
    Region,
    _to_fraction,
    carpet_mask,
    cell_measure,
    inner_fatness_point,
    layer_decomposition,
)
from .oracle import config_hash
from .rng import derive_seed
from .scaffold import BhpGeometry, build_bhp_geometry
from .stable_process import NO_CELL, BallDomain, as_domain, build_jump_chain, sample_jumps

GRID_CAP = 200
STABILITY_FACTOR = 2.0
Z = 3.0
THETA = Fraction(1, 9)


class HypothesisViolation(ValueError):
    """Raised when a check is asked to run outside the range of its hypotheses."""


# ---------------------------------------------------------------------------
# report records


@dataclass
class CheckRecord:
    name: str
    level: int
    r: float
    alpha: float
    measured_constant: float
    stderr: float
    stderr_band: tuple
    passed: bool | None
    note: str = ""
    config_hashes: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["stderr_band"] = list(self.stderr_band)
        return _plain(d)


@dataclass
class StabilityRecord:
    name: str
    levels: tuple
    values: tuple
    ratio: float
    passed: bool

    def to_json(self) -> dict:
        return _plain({"name": self.name, "levels": list(self.levels), "values": list(self.values),
                       "ratio": self.ratio, "passed": self.passed})


@dataclass
class BhpReport:
    name: str
    records: list = field(default_factory=list)
    stability: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def insufficient(self) -> bool:
        return any(r.passed is None for r in self.records)

    @property
    def passed(self) -> bool | None:
        if self.insufficient:
            return None
        return all(r.passed for r in self.records) and all(s.passed for s in self.stability)

    def status(self) -> str:
        p = self.passed
        return "insufficient samples" if p is None else ("pass" if p else "fail")

    def record(self, name: str, level: int | None = None) -> CheckRecord:
        for r in self.records:
            if r.name == name and (level is None or r.level == level):
                return r
        raise KeyError(name)

    def stable(self, name: str) -> StabilityRecord:
        for s in self.stability:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "check": self.name,
            "status": self.status(),
            "hypothesis_flags": self.flags,
            "records": [r.to_json() for r in self.records],
            "stability": [s.to_json() for s in self.stability],
            "notes": list(self.notes),
        }

    def summary_rows(self) -> list[tuple]:
        rows = []
        for r in self.records:
            state = "insufficient" if r.passed is None else ("pass" if r.passed else "FAIL")
            rows.append((self.name, r.name, str(r.level), f"{r.measured_constant:.4g}", f"{r.stderr:.2g}", state))
        for s in self.stability:
            rows.append((self.name, s.name, f"{s.levels[0]}/{s.levels[1]}", f"{s.ratio:.4g}", "", "pass" if s.passed else "FAIL"))
        return rows


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, Fraction):
        return float(obj)
    return obj


def reports_to_json(reports) -> str:
    return json.dumps([r.to_json() for r in reports], indent=1, sort_keys=True)


def summary_table(reports) -> str:
    head = ("check", "quantity", "level", "value", "stderr", "status")
    rows = [head] + [row for r in reports for row in r.summary_rows()]
    widths = [max(len(row[k]) for row in rows) for k in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)


def stability(name: str, levels, values) -> StabilityRecord:
    a, b = float(values[0]), float(values[1])
    ratio = b / a if a > 0 and math.isfinite(a) and math.isfinite(b) else math.inf
    ok = 1.0 / STABILITY_FACTOR <= ratio <= STABILITY_FACTOR
    return StabilityRecord(name, tuple(levels), (a, b), ratio, bool(ok))


# ---------------------------------------------------------------------------
# grids and start cells


def grid_cells(region: Region, grid_level: int, predicate, cap: int = GRID_CAP) -> np.ndarray:
    """Carpet cells of ``grid_level`` in ``region`` whose centre satisfies ``predicate(x, y)``.

    Lexicographic order, thinned to at most ``cap`` cells by keeping every
    ``k``-th one.
    """
    cells = region.cells_at(grid_level)
    u = 3.0**-grid_level
    keep = np.array([bool(predicate((a + 0.5) * u, (b + 0.5) * u)) for a, b in cells.tolist()], dtype=bool)
    cells = cells[keep] if len(cells) else cells
    if len(cells) > cap:
        cells = cells[:: math.ceil(len(cells) / cap)]
    return cells


def start_cell(cell, grid_level: int, level: int) -> tuple[int, int]:
    """Lower-left descendant at ``level`` of a grid cell."""
    if level < grid_level:
        raise ValueError("start level coarser than the grid")
    f = 3 ** (level - grid_level)
    return int(cell[0]) * f, int(cell[1]) * f


def point_cell(x, y, level: int, contains=None) -> tuple[int, int]:
    """A carpet cell of ``level`` whose closure holds the exact point ``(x, y)``.

    When the point sits on cell edges the candidates are tried in the order
    upper-right, upper-left, lower-right, lower-left, keeping the first one
    that is a carpet cell accepted by ``contains``.
    """
    x, y = _to_fraction(x), _to_fraction(y)
    u = 3**level
    fx, fy = math.floor(x * u), math.floor(y * u)
    xs = [fx] + ([fx - 1] if fx == x * u else [])
    ys = [fy] + ([fy - 1] if fy == y * u else [])
    for b in ys:
        for a in xs:
            if not bool(carpet_mask(a, b)):
                continue
            if contains is None or bool(contains(level, np.array([a]), np.array([b]))[0]):
                return a, b
    raise ValueError(f"no admissible cell of level {level} at ({float(x)}, {float(y)})")


def ball_cells(cx: float, cy: float, radius: float, level: int, region: Region | None = None) -> np.ndarray:
    cells = BallDomain(cx, cy, radius).cells(level)
    if region is not None and len(cells):
        cells = cells[region.contains_cells(level, cells[:, 0], cells[:, 1])]
    return cells


def _exact(p: Point) -> tuple[Fraction, Fraction]:
    return Fraction(p.ix, 3**p.resolution), Fraction(p.iy, 3**p.resolution)


def family_z(m: int) -> float:
    """Two-sided threshold keeping the family-wise level of ``m`` z-tests at that of one 3-sigma test."""
    return float(scipy.stats.norm.isf(scipy.stats.norm.sf(Z) / max(m, 1)))


def _dist_from(Q: Point):
    qx, qy = Q.xy

    def d(x, y):
        return math.hypot(x - qx, y - qy)

    return d


def _check_exit_set_vanishes(E: ExitSet, Q: Point, radius: float, level: int, name: str) -> None:
    cells = ball_cells(*Q.xy, radius, level)
    if len(cells) and E.contains_cells(level, cells[:, 0], cells[:, 1]).any():
        raise ValueError(f"{name} must vanish on the ball B(Q, {radius:.4g})")


def exterior_patches(D: Region, Q: Point, radius: float) -> list[ExitSet]:
    """Four disjoint exterior sets beyond ``D``'s bounding box with ``B(Q, radius)`` removed.

    Right of the box, above it, left of it, below it (each box half-open so
    they partition the outside of the bounding box).
    """
    cells = np.array([(c.k, c.m) for c in D.cells])
    u = 3.0**-D.cell_level
    x0, y0 = cells.min(axis=0) * u
    x1, y1 = (cells.max(axis=0) + 1) * u
    ball = BallSet(*Q.xy, radius)
    boxes = [
        BoxSet(x1, math.inf, -math.inf, math.inf),
        BoxSet(-math.inf, x1, y1, math.inf),
        BoxSet(-math.inf, x0, -math.inf, y1),
        BoxSet(x0, x1, -math.inf, y0),
    ]
    return [DifferenceSet(b, ball) for b in boxes]


def default_bhp_pairs(D: Region, Q: Point, r) -> list[tuple[ExitSet, ExitSet]]:
    right, top, left, bottom = exterior_patches(D, Q, 2.0 * float(r))
    return [(right, top), (left, bottom), (right, left)]


# ---------------------------------------------------------------------------
# estimation core


def _model(level: int, params: FractalParams):
    return build_jump_chain(None, level, params)


def _run_hash(model, domain, start, n, seed, extra="") -> str:
    return config_hash({"model": model.key(), "domain": as_domain(domain).key(), "start": list(start),
                        "n": int(n), "seed": int(seed), "extra": str(extra)})


def _combined_hash(hashes) -> str:
    return config_hash({"runs": sorted(hashes)})


def _prop(mask: np.ndarray) -> tuple[float, float]:
    n = mask.size
    p = float(np.count_nonzero(mask)) / n
    return p, math.sqrt(max(p * (1.0 - p), 0.0) / max(n - 1, 1))


def _mean(v: np.ndarray) -> tuple[float, float]:
    n = v.size
    m = float(np.mean(v))
    return m, (float(np.std(v, ddof=1)) / math.sqrt(n) if n > 1 else 0.0)


def _resolved(value: float, se: float) -> bool:
    return value > Z * se


def _exit_fractions(model, D, starts, sets, n, seed, tag, threads, *, inner=None):
    """Per start: indicator means of ``sets`` on the final landing point, plus raw run pieces."""
    out, hashes = [], []
    for st in starts:
        s = derive_seed(seed, tag, model.level, st[0], st[1])
        run = exit_run(model, D, st, n, s, inner=inner, threads=threads)
        hashes.append(_run_hash(model, D, st, n, s, tag))
        masks = [E.mask(run) for E in sets]
        out.append((run, masks))
    return out, hashes


# ---------------------------------------------------------------------------
# lower bound on the harmonic measure of a boundary ball


def check_lemma10(D: Region, Q: Point, r, level: int, n_samples: int, *, params: FractalParams,
                  seed: int = 0, grid_level: int | None = None, threads: int | None = None) -> BhpReport:
    """Floor of ``omega^x_D(B(Q, r))`` over ``x`` in ``B(Q, r) ∩ D``, at levels ``n`` and ``n + 1``."""
    r = _to_fraction(r)
    if not (0 < r and float(r) < D.R0):
        raise ValueError(f"r must lie in (0, R0={D.R0})")
    if not D.is_boundary_point(Q):
        raise ValueError("Q must lie on the region boundary")
    g = level - 1 if grid_level is None else grid_level
    dist = _dist_from(Q)
    grid = grid_cells(D, g, lambda x, y: dist(x, y) < float(r))
    if not len(grid):
        raise ValueError("empty test grid; refine the grid level")
    E = BallSet(*Q.xy, float(r))
    rep = BhpReport("lemma10", flags=params.hypothesis_flags())
    floors = []
    for n in (level, level + 1):
        model = _model(n, params)
        starts = [start_cell(c, g, n) for c in grid]
        res, hashes = _exit_fractions(model, D, starts, [E], n_samples, seed, "lemma10", threads)
        vals = [_prop(m[0]) for _, m in res]
        partition = max(abs(_prop(m[0])[0] + _prop(~m[0])[0] - 1.0) for _, m in res)
        k = int(np.argmin([v for v, _ in vals]))
        v, se = vals[k]
        ok = _resolved(v, se)
        floors.append(v)
        rep.records.append(CheckRecord(
            "floor", n, float(r), params.alpha, v, se, (v - Z * se, v + Z * se), bool(ok),
            "" if ok else "floor not separated from zero at 3 sigma", [_combined_hash(hashes)],
            {"grid_level": g, "x": grid.tolist(), "values": [a for a, _ in vals], "stderr": [b for _, b in vals],
             "argmin": grid[k].tolist(), "partition_max_dev": partition},
        ))
    rep.stability.append(stability("floor", (level, level + 1), floors))
    return rep


# ---------------------------------------------------------------------------
# two-sided comparison of harmonic measure with the Green function


def green_target(D: Region, Q: Point, r, level: int) -> tuple[Point, np.ndarray]:
    """``A_{r/2}(Q)`` and the cells (centres in ``B(A, theta r / 2)``) averaging ``G_D(x, A)``."""
    A = inner_fatness_point(Q, _to_fraction(r) / 2, D)
    cells = ball_cells(*A.xy, float(THETA * _to_fraction(r) / 2), level, D)
    if not len(cells):
        raise ValueError("Green target ball holds no cell; use a finer level")
    return A, cells


def _comparability(D, Q, r, grid, g, level, n_samples, params, seed, threads):
    """Per level and ``x``: ``omega^x_D(B(Q,r))``, ``G_D(x, A_{r/2})`` and their scaled ratio."""
    E = BallSet(*Q.xy, float(r))
    scale = float(r) ** (params.d - params.jump_index)
    per_level = {}
    for n in (level, level + 1):
        model = _model(n, params)
        A, cells = green_target(D, Q, r, n)
        mu = len(cells) * cell_measure(n)
        rows, hashes = [], []
        for c in grid:
            st = start_cell(c, g, n)
            s = derive_seed(seed, "comparability", n, st[0], st[1])
            run = exit_run(model, D, st, n_samples, s, green_target=cells, threads=threads)
            hashes.append(_run_hash(model, D, st, n_samples, s, "comparability"))
            w, w_se = _prop(E.mask(run))
            G, G_se = _mean(run.visits * model.hold_mean / mu)
            rows.append({"x": [int(c[0]), int(c[1])], "omega": w, "omega_se": w_se, "green": G, "green_se": G_se,
                         "scaled_green": scale * G})
        per_level[n] = (rows, hashes, A)
    return per_level


def _ratio_stats(rows, num: str, den: str):
    """Max over rows of ``num/den`` (with the scaled Green factor) and its log-scale stderr."""
    vals, rel = [], []
    for row in rows:
        a = row[num] * (row["scaled_green"] / row["green"] if num == "green" and row["green"] > 0 else 1.0)
        b = row[den] * (row["scaled_green"] / row["green"] if den == "green" and row["green"] > 0 else 1.0)
        vals.append(a / b if b > 0 else math.inf)
        rel.append(math.hypot(row[num + "_se"] / row[num] if row[num] > 0 else math.inf,
                              row[den + "_se"] / row[den] if row[den] > 0 else math.inf))
    return vals, rel


def _require_alpha(params: FractalParams, bound: float, label: str) -> None:
    if not params.alpha < bound:
        raise HypothesisViolation(f"hypothesis violated: alpha={params.alpha} is not below {label}={bound:.4f}")


def _comparability_grid(D, Q, r, radius_factor, grid_level, x_list):
    if x_list is not None:
        grid = np.asarray(x_list, dtype=np.int64).reshape(-1, 2)
        g = grid_level
        u = 3.0**-g
        dist = _dist_from(Q)
        for a, b in grid.tolist():
            if dist((a + 0.5) * u, (b + 0.5) * u) < radius_factor * float(r):
                raise ValueError(f"test point {(a, b)} lies inside B(Q, {radius_factor}r)")
        return grid, g
    dist = _dist_from(Q)
    grid = grid_cells(D, grid_level, lambda x, y: dist(x, y) >= radius_factor * float(r))
    return grid, grid_level


def _default_grid_level(D: Region, r) -> int:
    r = _to_fraction(r)
    N = 0
    while Fraction(1, 3**N) > r:
        N += 1
    return max(N, D.cell_level)


def _one_sided(rep, name, per_level, keep, num, den, r, params, level):
    maxima = []
    for n in (level, level + 1):
        rows, hashes, A = per_level[n]
        rows = [row for row, k in zip(rows, keep) if k]
        vals, rel = _ratio_stats(rows, num, den)
        resolved = all(_resolved(row[num], row[num + "_se"]) and _resolved(row[den], row[den + "_se"]) for row in rows)
        k = int(np.argmax(vals))
        v = vals[k]
        se = v * rel[k]
        rep.records.append(CheckRecord(
            name, n, float(r), params.alpha, v, se, (v * math.exp(-Z * rel[k]), v * math.exp(Z * rel[k])),
            True if resolved else None, "" if resolved else "insufficient samples", [_combined_hash(hashes)],
            {"A_half_r": list(A.xy), "rows": rows, "ratios": vals},
        ))
        maxima.append(v)
    rep.stability.append(stability(name, (level, level + 1), maxima))


def check_lemma11(D: Region, Q: Point, r, x_list=None, level: int = 5, n_samples: int = 10**5, *,
                  params: FractalParams, seed: int = 0, grid_level: int | None = None,
                  threads: int | None = None, _cache=None) -> BhpReport:
    """Max over ``x`` in ``D \\ B(Q, r)`` of ``r^(d - alpha dw/2) G_D(x, A_{r/2}) / omega^x_D(B(Q, r))``."""
    _require_alpha(params, params.green_threshold, "2d/dw")
    g = _default_grid_level(D, r) if grid_level is None else grid_level
    grid, g = _comparability_grid(D, Q, r, 1.0, g, x_list)
    per_level = _cache or _comparability(D, Q, r, grid, g, level, n_samples, params, seed, threads)
    rep = BhpReport("lemma11", flags=params.hypothesis_flags())
    _one_sided(rep, "green_over_omega", per_level, [True] * len(grid), "green", "omega", r, params, level)
    return rep


def check_lemma12(D: Region, Q: Point, r, x_list=None, level: int = 5, n_samples: int = 10**5, *,
                  params: FractalParams, seed: int = 0, grid_level: int | None = None,
                  threads: int | None = None, layers: int = 5) -> BhpReport:
    """Max over ``x`` in ``D \\ B(Q, 2r)`` of ``omega^x_D(B(Q, r)) / (r^(d - alpha dw/2) G_D(x, A_{r/2}))``."""
    _require_alpha(params, params.bhp_threshold, "2(d-1)/dw")
    g = _default_grid_level(D, r) if grid_level is None else grid_level
    grid, g = _comparability_grid(D, Q, r, 2.0, g, x_list)
    per_level = _comparability(D, Q, r, grid, g, level, n_samples, params, seed, threads)
    rep = BhpReport("lemma12", flags=params.hypothesis_flags())
    _one_sided(rep, "omega_over_green", per_level, [True] * len(grid), "omega", "green", r, params, level)
    rep.notes.append(_layer_note(D, Q, r, params, layers))
    return rep


def _layer_note(D, Q, r, params, K) -> dict:
    lay = layer_decomposition(D, Q, r, K, params)
    return {"layer_counts": lay.counts, "layer_bounds": [lay.bound(k) for k in range(len(lay.counts))],
            "series_exponent": lay.series_exponent, "series_partial_sums": lay.series_partial_sums,
            "layer_integral_bound": lay.layer_integral_bound}


def check_two_sided(D: Region, Q: Point, r, level: int, n_samples: int, *, params: FractalParams,
                    seed: int = 0, grid_level: int | None = None, threads: int | None = None) -> BhpReport:
    """Both one-sided comparisons and the band ``max/min`` of ``omega / (r^(d - alpha dw/2) G)``.

    Uses one set of runs on the grid ``D \\ B(Q, 2r)``, where both one-sided
    bounds apply.
    """
    _require_alpha(params, params.bhp_threshold, "2(d-1)/dw")
    g = _default_grid_level(D, r) if grid_level is None else grid_level
    grid, g = _comparability_grid(D, Q, r, 2.0, g, None)
    per_level = _comparability(D, Q, r, grid, g, level, n_samples, params, seed, threads)
    rep = BhpReport("two_sided", flags=params.hypothesis_flags())
    keep = [True] * len(grid)
    _one_sided(rep, "green_over_omega", per_level, keep, "green", "omega", r, params, level)
    _one_sided(rep, "omega_over_green", per_level, keep, "omega", "green", r, params, level)
    bands = []
    for n in (level, level + 1):
        hi = rep.record("omega_over_green", n)
        lo = rep.record("green_over_omega", n)
        band = hi.measured_constant * lo.measured_constant
        rel = math.hypot(hi.stderr / hi.measured_constant, lo.stderr / lo.measured_constant)
        resolved = hi.passed is not None and lo.passed is not None
        rep.records.append(CheckRecord(
            "band", n, float(r), params.alpha, band, band * rel,
            (band * math.exp(-Z * rel), band * math.exp(Z * rel)), True if resolved else None,
            "" if resolved else "insufficient samples", hi.config_hashes, {},
        ))
        bands.append(band)
    rep.stability.append(stability("band", (level, level + 1), bands))
    rep.notes.append(_layer_note(D, Q, r, params, 5))
    return rep


# ---------------------------------------------------------------------------
# Carleson estimate


def check_carleson(Omega: Region, Q: Point, r, spec: HarmonicFunctionSpec | ExitSet, level: int,
                   n_samples: int, *, params: FractalParams, seed: int = 0, grid_level: int | None = None,
                   threads: int | None = None) -> BhpReport:
    """``max u(x) / u(A)`` over ``x`` in ``Omega ∩ B(Q, 5r/4)`` with ``A`` the inner fatness point."""
    _require_alpha(params, params.carleson_threshold, "2/dw")
    E = spec.boundary_data if isinstance(spec, HarmonicFunctionSpec) else spec
    r = _to_fraction(r)
    g = level - 1 if grid_level is None else grid_level
    _check_exit_set_vanishes(E, Q, 2.0 * float(r), level + 1, "boundary data")
    A = inner_fatness_point(Q, r, Omega)
    dist = _dist_from(Q)
    grid = grid_cells(Omega, g, lambda x, y: dist(x, y) < 1.25 * float(r))
    in_r = np.array([dist((a + 0.5) * 3.0**-g, (b + 0.5) * 3.0**-g) < float(r) for a, b in grid.tolist()])
    rep = BhpReport("carleson", flags=params.hypothesis_flags())
    maxima = []
    for n in (level, level + 1):
        model = _model(n, params)
        a_cell = point_cell(*_exact(A), n, Omega.contains_cells)
        starts = [a_cell] + [start_cell(c, g, n) for c in grid]
        res, hashes = _exit_fractions(model, Omega, starts, [E], n_samples, seed, "carleson", threads)
        vals = [_prop(m[0]) for _, m in res]
        uA, uA_se = vals[0]
        ratios = [v / uA if uA > 0 else math.inf for v, _ in vals[1:]]
        rel = [math.hypot(se / v if v > 0 else 0.0, uA_se / uA if uA > 0 else math.inf) for v, se in vals[1:]]
        k = int(np.argmax(ratios))
        v = ratios[k]
        resolved = _resolved(uA, uA_se)
        rep.records.append(CheckRecord(
            "max_ratio", n, float(r), params.alpha, v, v * rel[k],
            (v * math.exp(-Z * rel[k]), v * math.exp(Z * rel[k])), True if resolved else None,
            "" if resolved else "insufficient samples", [_combined_hash(hashes)],
            {"A": list(A.xy), "u_A": uA, "u_A_se": uA_se, "x": grid.tolist(), "ratios": ratios,
             "max_ratio_in_B_r": max((q for q, k2 in zip(ratios, in_r) if k2), default=math.nan)},
        ))
        maxima.append(v)
    rep.stability.append(stability("max_ratio", (level, level + 1), maxima))
    return rep


# ---------------------------------------------------------------------------
# boundary Harnack comparison


def _bhp_grids(D: Region, Q: Point, r, geom: BhpGeometry, g: int):
    dist = _dist_from(Q)
    ball = grid_cells(D, g, lambda x, y: dist(x, y) < float(r) / 27.0)
    omega2 = grid_cells(geom.Omega2, g, lambda x, y: True)
    if not len(ball) or not len(omega2):
        raise ValueError(f"empty test grid at level {g}; refine the grid level")
    return {"ball": ball, "omega2": omega2}


def _bhp_runs(D, geom, grids, g, n, sets, n_samples, params, seed, threads, tag):
    """Indicator estimates of every set at ``A``, ``A_fat`` and every grid point, at level ``n``."""
    model = _model(n, params)
    A = geom.A
    R2 = 2 * 3**A.R
    a_cell = point_cell(Fraction(A.X, R2), Fraction(A.Y, R2), n, D.contains_cells)
    fat = inner_fatness_point(geom.Q, geom.r, D)
    f_cell = point_cell(*_exact(fat), n, D.contains_cells)
    starts = {"A": [a_cell], "A_fat": [f_cell]}
    for name, cells in grids.items():
        starts[name] = [start_cell(c, g, n) for c in cells]
    out, hashes = {}, []
    for name, sts in starts.items():
        res, hs = _exit_fractions(model, D, sts, sets, n_samples, seed, tag, threads)
        for run, masks in res:
            for a in range(len(masks)):
                for b in range(a + 1, len(masks)):
                    if np.any(masks[a] & masks[b]) and sets[a] is not sets[b]:
                        raise ValueError("boundary sets of a pair overlap")
        out[name] = [[_prop(m) for m in masks] for _, masks in res]
        hashes += hs
    return out, hashes


def _co_from(est, iu: int, iv: int, est_v=None):
    """``c_o = max(R, 1/min)`` for the ratio ``(u/v)(x) * (v/u)(A)`` over the grid points of ``est``."""
    est_v = est if est_v is None else est_v
    uA, uA_se = est["A"][0][iu]
    vA, vA_se = est_v["A"][0][iv]
    out = {}
    for name in est:
        if name in ("A", "A_fat"):
            continue
        ratios, rels, resolved = [], [], _resolved(uA, uA_se) and _resolved(vA, vA_se)
        for eu, ev in zip(est[name], est_v[name]):
            (u, use), (v, vse) = eu[iu], ev[iv]
            resolved &= _resolved(u, use) and _resolved(v, vse)
            ratios.append((u / v) * (vA / uA) if u > 0 and v > 0 and uA > 0 and vA > 0 else math.nan)
            rels.append(math.sqrt(sum((se / m) ** 2 for m, se in ((u, use), (v, vse), (uA, uA_se), (vA, vA_se))
                                      if m > 0)))
        hi, lo = max(ratios), min(ratios)
        co = max(hi, 1.0 / lo) if resolved else math.nan
        k = ratios.index(hi) if hi >= 1.0 / lo else ratios.index(lo)
        out[name] = {"co": co, "rel": rels[k] if resolved else math.nan, "resolved": bool(resolved),
                     "ratios": ratios, "max_rel": max(rels) if rels else math.nan}
    return out


def check_bhp(D: Region, Q: Point, r, spec_u, spec_v, level: int, n_samples: int, *, params: FractalParams,
              seed: int = 0, grid_level: int | None = None, threads: int | None = None) -> BhpReport:
    """Empirical ``c_o`` for one pair of harmonic functions (see :func:`check_bhp_pairs`)."""
    return check_bhp_pairs(D, Q, r, [(spec_u, spec_v)], level, n_samples, params=params, seed=seed,
                           grid_level=grid_level, threads=threads, null_test=False)


def check_bhp_pairs(D: Region, Q: Point, r, pairs, level: int, n_samples: int, *, params: FractalParams,
                    seed: int = 0, grid_level: int | None = None, threads: int | None = None,
                    null_test: bool = True) -> BhpReport:
    """Empirical boundary Harnack constant ``c_o`` for several pairs ``(u, v)``.

    ``u`` and ``v`` are exit probabilities into exterior sets far from
    ``Q``; both are normalised by their value at the geometric point ``A``.
    ``c_o = max(R, 1/m)`` with ``R``, ``m`` the max and min of ``u/v`` over
    test points in ``D ∩ B(Q, r/27)`` (record ``co``) and in ``Omega_2``
    (record ``co_omega2``).  With ``null_test`` every ``u`` is also compared
    with an independent estimate of itself, which must give ``c_o`` at most
    ``1 + 5`` combined relative standard errors.
    """
    _require_alpha(params, params.bhp_threshold, "2(d-1)/dw")
    r = _to_fraction(r)
    if not (0 < r and float(r) < D.R0 / 2):
        raise ValueError(f"r must lie in (0, R0/2={D.R0 / 2})")
    geom = build_bhp_geometry(D, Q, r)
    if not all(geom.checks.values()):
        raise RuntimeError(f"construction failed: {geom.checks}")
    specs = []
    for pu, pv in pairs:
        for s in (pu, pv):
            E = s.boundary_data if isinstance(s, HarmonicFunctionSpec) else s
            if not any(E is t for t in specs):
                specs.append(E)
    for E in specs:
        _check_exit_set_vanishes(E, Q, 2.0 * float(r), level + 1, "boundary data")
    index = [(next(k for k, t in enumerate(specs) if t is (pu.boundary_data if isinstance(pu, HarmonicFunctionSpec) else pu)),
              next(k for k, t in enumerate(specs) if t is (pv.boundary_data if isinstance(pv, HarmonicFunctionSpec) else pv)))
             for pu, pv in pairs]
    g = level if grid_level is None else grid_level
    grids = _bhp_grids(D, Q, r, geom, g)
    rep = BhpReport("bhp", flags=params.hypothesis_flags())
    rep.notes.append({"geometry": _plain(geom.describe())})
    per_pair = {k: [] for k in range(len(pairs))}
    for n in (level, level + 1):
        est, hashes = _bhp_runs(D, geom, grids, g, n, specs, n_samples, params, seed, threads, "bhp")
        chash = [_combined_hash(hashes)]
        if null_test:
            est2, hashes2 = _bhp_runs(D, geom, grids, g, n, specs, n_samples, params, seed, threads, "bhp-null")
        for k, (iu, iv) in enumerate(index):
            co = _co_from(est, iu, iv)
            swap = _co_from(est, iv, iu)
            uA = est["A"][0][iu][0]
            fat = est["A_fat"][0][iu][0]
            for name, key in (("co", "ball"), ("co_omega2", "omega2")):
                c = co[key]
                ok = c["resolved"] and abs(swap[key]["co"] - c["co"]) <= 1e-12 * c["co"]
                rep.records.append(CheckRecord(
                    f"{name}[{k}]", n, float(r), params.alpha, c["co"], c["co"] * c["rel"] if c["resolved"] else math.nan,
                    (c["co"] * math.exp(-Z * c["rel"]), c["co"] * math.exp(Z * c["rel"])) if c["resolved"] else (math.nan, math.nan),
                    True if ok else (None if not c["resolved"] else False),
                    "" if c["resolved"] else "insufficient samples", chash,
                    {"swap_co": swap[key]["co"], "ratios": c["ratios"], "x": grids[key].tolist(),
                     "u_A_over_u_fatness_point": uA / fat if fat > 0 else math.nan, "sets": [repr(specs[iu]), repr(specs[iv])]},
                ))
            per_pair[k].append((co["ball"]["co"], co["omega2"]["co"]))
        if null_test:
            for k, E in enumerate(specs):
                c = _co_from(est, k, k, est2)["omega2"]
                bound = 1.0 + 5.0 * c["max_rel"]
                ok = c["resolved"] and c["co"] <= bound
                rep.records.append(CheckRecord(
                    f"null[{k}]", n, float(r), params.alpha, c["co"], c["co"] * c["rel"] if c["resolved"] else math.nan,
                    (1.0, bound), True if ok else (None if not c["resolved"] else False),
                    "" if c["resolved"] else "insufficient samples", chash + [_combined_hash(hashes2)],
                    {"bound": bound, "set": repr(E)},
                ))
    for k in per_pair:
        (b5, o5), (b6, o6) = per_pair[k]
        rep.stability.append(stability(f"co[{k}]", (level, level + 1), (b5, b6)))
        rep.stability.append(stability(f"co_omega2[{k}]", (level, level + 1), (o5, o6)))
    if len(pairs) > 1:
        for n_idx, n in enumerate((level, level + 1)):
            vals = [v[n_idx][1] for v in per_pair.values()]
            rep.stability.append(stability(f"cross_pair_co_omega2@{n}", (n, n), (min(vals), max(vals))))
    return rep


# ---------------------------------------------------------------------------
# step decomposition of the comparison argument


class DeltaSet(ExitSet):
    """Landing cells in ``Delta = (union of B_i) ∩ D ∩ Omega^c``."""

    contains_far = False

    def __init__(self, geom: BhpGeometry):
        self.geom = geom

    def contains_cells(self, level, i, j):
        return self.geom.in_delta(level, np.asarray(i, dtype=np.int64), np.asarray(j, dtype=np.int64))

    def __repr__(self):
        return "Delta"


def _inner_mask(run, exit_set: ExitSet) -> np.ndarray:
    ok = run.inner_i != NO_CELL
    out = np.zeros(run.n, dtype=bool)
    out[ok] = exit_set.contains_cells(run.level, run.inner_i[ok], run.inner_j[ok])
    return out


def check_step_decomposition(geom: BhpGeometry, specs, level: int, n_samples: int, *, params: FractalParams,
                             seed: int = 0, grid_level: int | None = None, threads: int | None = None) -> BhpReport:
    """Numerical counterparts of the steps of the comparison argument on ``Omega_2``.

    ``specs`` is one exit set (or harmonic spec) or a list of them.
    (i) ``omega^x_Omega(Delta) / omega^x_Omega(B_1)`` stays in a bounded band;
    (ii) ``u_1 + u_2 = u`` where ``u_1``/``u_2`` split on whether the exit from
    ``Omega`` lands in ``Delta``; (iii) ``(u_2(x)/u_2(A)) / (E^x tau_Omega /
    E^A tau_Omega)`` stays in a bounded band; (iv) ``u_2(A) / u(A)`` has a
    positive floor.
    """
    _require_alpha(params, params.bhp_threshold, "2(d-1)/dw")
    if not all(geom.checks.values()):
        raise RuntimeError("construction failed")
    if isinstance(specs, (ExitSet, HarmonicFunctionSpec)):
        specs = [specs]
    sets = [s.boundary_data if isinstance(s, HarmonicFunctionSpec) else s for s in specs]
    D, Omega = geom.D, geom.Omega
    for E in sets:
        _check_exit_set_vanishes(E, geom.Q, 2.0 * float(geom.r), level + 1, "boundary data")
    delta = DeltaSet(geom)
    cx, cy, rad = geom.balls()[0]
    B1 = BallSet(cx, cy, rad)
    g = level if grid_level is None else grid_level
    grid = grid_cells(Omega, g, lambda x, y: True)
    grid = np.array([c for c in grid.tolist()
                     if geom.Omega2.contains_cells(g, np.array([c[0]]), np.array([c[1]]))[0]], dtype=np.int64).reshape(-1, 2)
    rep = BhpReport("steps", flags=params.hypothesis_flags())
    vals = {"band_i": [], "band_iii": [], "floor_iv": []}
    for n in (level, level + 1):
        model = _model(n, params)
        R2 = 2 * 3**geom.A.R
        a_cell = point_cell(Fraction(geom.A.X, R2), Fraction(geom.A.Y, R2), n, Omega.contains_cells)
        starts = [a_cell] + [start_cell(c, g, n) for c in grid]
        rows, hashes = [], []
        for st in starts:
            s = derive_seed(seed, "steps", n, st[0], st[1])
            run = exit_run(model, D, st, n_samples, s, inner=Omega, threads=threads)
            s2 = derive_seed(seed, "steps-u", n, st[0], st[1])
            run_u = exit_run(model, D, st, n_samples, s2, threads=threads)
            hashes += [_run_hash(model, D, st, n_samples, s, "steps"), _run_hash(model, D, st, n_samples, s2, "steps-u")]
            in_delta = _inner_mask(run, delta)
            in_b1 = _inner_mask(run, B1)
            row = {"x": list(st), "omega_delta": _prop(in_delta), "omega_b1": _prop(in_b1),
                   "tau_omega": _mean(run.inner_tau), "specs": []}
            for E in sets:
                e = E.mask(run)
                u1, u2 = _prop(e & in_delta), _prop(e & ~in_delta)
                u_ind = _prop(E.mask(run_u))
                row["specs"].append({"u1": u1, "u2": u2, "u": u_ind, "u_same": _prop(e)})
            rows.append(row)
        chash = [_combined_hash(hashes)]
        A_row, grid_rows = rows[0], rows[1:]
        # (i)
        r_i, ok_i = [], True
        for row in grid_rows:
            (d, dse), (b, bse) = row["omega_delta"], row["omega_b1"]
            ok_i &= _resolved(b, bse) and _resolved(d, dse)
            r_i.append(d / b if b > 0 else math.inf)
        band_i = max(r_i) / min(r_i) if ok_i else math.nan
        rep.records.append(CheckRecord("band_i", n, float(geom.r), params.alpha, band_i, math.nan, (min(r_i), max(r_i)),
                                       True if ok_i else None, "" if ok_i else "insufficient samples", chash,
                                       {"ratios": r_i}))
        vals["band_i"].append(band_i)
        # (ii)
        worst, m = 0.0, 0
        for row in rows:
            for sp in row["specs"]:
                (a, ase), (b, bse), (c, cse) = sp["u1"], sp["u2"], sp["u"]
                se = math.sqrt(ase**2 + bse**2 + cse**2)
                m += 1
                worst = max(worst, abs(a + b - c) / se if se > 0 else (0.0 if a + b == c else math.inf))
        zlim = family_z(m)
        rep.records.append(CheckRecord("additivity_z", n, float(geom.r), params.alpha, worst, 0.0, (0.0, zlim),
                                       bool(worst <= zlim), "", chash, {"tests": m}))
        # (iii) and (iv)
        tA, tA_se = A_row["tau_omega"]
        b3, ok3, f4, ok4 = [], True, [], True
        for k in range(len(sets)):
            u2A, u2A_se = A_row["specs"][k]["u2"]
            uA, uA_se = A_row["specs"][k]["u_same"]
            ok3 &= _resolved(u2A, u2A_se)
            q = []
            for row in grid_rows:
                u2, u2se = row["specs"][k]["u2"]
                t, _ = row["tau_omega"]
                ok3 &= _resolved(u2, u2se)
                q.append((u2 / u2A) / (t / tA) if u2A > 0 and tA > 0 and t > 0 else math.nan)
            b3.append(max(q) / min(q) if ok3 else math.nan)
            ok4 &= _resolved(u2A, u2A_se) and _resolved(uA, uA_se)
            f4.append(u2A / uA if uA > 0 else math.nan)
        band3 = max(b3) if ok3 else math.nan
        floor4 = min(f4) if ok4 else math.nan
        rep.records.append(CheckRecord("band_iii", n, float(geom.r), params.alpha, band3, math.nan, (math.nan, math.nan),
                                       True if ok3 else None, "" if ok3 else "insufficient samples", chash,
                                       {"per_spec": b3}))
        rep.records.append(CheckRecord("floor_iv", n, float(geom.r), params.alpha, floor4, math.nan, (math.nan, math.nan),
                                       True if ok4 else None, "" if ok4 else "insufficient samples", chash,
                                       {"per_spec": f4}))
        vals["band_iii"].append(band3)
        vals["floor_iv"].append(floor4)
    for name, v in vals.items():
        rep.stability.append(stability(name, (level, level + 1), v))
    return rep


# ---------------------------------------------------------------------------
# scaling diagnostics


@dataclass
class ScalingResult:
    radii: list
    means: list
    stderrs: list
    slope: float
    expected: float

    def to_json(self) -> dict:
        return _plain(asdict(self))


def exit_time_scaling(center, radii, level: int, n_samples: int, *, params: FractalParams, seed: int = 0,
                      threads: int | None = None) -> ScalingResult:
    """Mean exit time of ``B(x, r)`` from ``x`` for several ``r``, with the log-log slope."""
    cx, cy = (_to_fraction(c) for c in center)
    model = _model(level, params)
    st = point_cell(cx, cy, level)
    means, ses = [], []
    for r in radii:
        dom = BallDomain(float(cx), float(cy), float(r))
        s = derive_seed(seed, "scaling", level, float(r))
        run = exit_run(model, dom, st, n_samples, s, threads=threads)
        m, se = _mean(run.tau)
        means.append(m)
        ses.append(se)
    x = np.log(np.asarray([float(r) for r in radii]))
    y = np.log(np.asarray(means))
    w = (np.asarray(means) / np.asarray(ses)) ** 2
    slope = float(np.polyfit(x, y, 1, w=np.sqrt(w))[0])
    return ScalingResult([float(r) for r in radii], means, ses, slope, params.jump_index)


def kernel_exponent_fit(level: int, n_jumps: int, *, params: FractalParams, seed: int = 0,
                        start=(0, 0), r_min: float = 3.0, r_max: float = 81.0, bins: int = 12) -> float:
    """Slope of log per-cell jump frequency against log distance, from sampled jumps.

    Jumps are binned in geometric distance shells; the count in a shell is
    divided by the number of carpet cells it contains.
    """
    model = _model(level, params)
    di, dj, far = sample_jumps(model, start, n_jumps, seed)
    di, dj = di[~far], dj[~far]
    dist = np.hypot(di, dj)
    edges = np.geomspace(r_min, r_max, bins + 1)
    R = int(math.ceil(r_max)) + 1
    I, J = np.meshgrid(np.arange(-R, R + 1), np.arange(-R, R + 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    ok = carpet_mask(I + start[0], J + start[1])
    cell_d = np.hypot(I[ok], J[ok])
    xs, ys, ws = [], [], []
    for a, b in zip(edges[:-1], edges[1:]):
        ncell = np.count_nonzero((cell_d >= a) & (cell_d < b))
        sel = (dist >= a) & (dist < b)
        cnt = np.count_nonzero(sel)
        if ncell == 0 or cnt < 10:
            continue
        xs.append(np.log(np.mean(cell_d[(cell_d >= a) & (cell_d < b)] ** (-params.d_alpha)) ** (-1.0 / params.d_alpha)))
        ys.append(np.log(cnt / ncell))
        ws.append(math.sqrt(cnt))
    return float(np.polyfit(xs, ys, 1, w=ws)[0])


def explicit_kernel_exponent(level: int, *, params: FractalParams, start=(0, 0), r_max: float = 27.0) -> float:
    """Least-squares slope of log jump weight against log distance over carpet cells within ``r_max``."""
    model = _model(level, params)
    R = int(r_max)
    I, J = np.meshgrid(np.arange(-R, R + 1), np.arange(-R, R + 1), indexing="ij")
    I, J = I.ravel() + start[0], J.ravel() + start[1]
    d = np.hypot(I - start[0], J - start[1])
    ok = carpet_mask(I, J) & (d > 0) & (d <= r_max)
    src = np.array([start], dtype=float)
    w = model.kernel_weight(np.broadcast_to(src, (ok.sum(), 2)), np.stack([I[ok], J[ok]], axis=1))
    return float(np.polyfit(np.log(d[ok] * 3.0**-level), np.log(w), 1)[0])


__all__ = [
    "BhpReport", "CheckRecord", "DeltaSet", "HypothesisViolation", "ScalingResult", "StabilityRecord",
    "ball_cells", "check_bhp", "check_bhp_pairs", "check_carleson", "check_lemma10", "check_lemma11",
    "check_lemma12", "check_step_decomposition", "check_two_sided", "default_bhp_pairs", "exit_time_scaling",
    "explicit_kernel_exponent", "exterior_patches", "grid_cells", "green_target", "kernel_exponent_fit",
    "point_cell", "reports_to_json", "stability", "start_cell", "summary_table",
]
