"""Exact integer geometry of the Sierpinski carpet.

Cells of level ``n`` are triadic squares of side ``3**-n`` indexed by integers
``(i, j)``; the square is ``[i 3^-n, (i+1) 3^-n] x [j 3^-n, (j+1) 3^-n]``.
A cell belongs to the carpet iff no base-3 digit position carries a 1 in both
indices.  The ambient carpet is the quadrant carpet ``F`` reflected into all
four quadrants (index ``i < 0`` is mirrored to ``-i - 1``), so that the unit
cell ``[0, 1]^2`` is surrounded by carpet on every side.

All membership and adjacency decisions are made in integers; floats are only
produced for reported distances.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_LEVEL = 10
LOG3 = math.log(3.0)
CARPET_DIM = math.log(8.0) / math.log(3.0)
DEFAULT_DW = 2.097


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class FractalParams:
    alpha: float
    dw: float = DEFAULT_DW

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")
        if self.dw <= 0:
            raise ValueError("dw must be positive")

    @property
    def d(self) -> float:
        return CARPET_DIM

    @property
    def d_alpha(self) -> float:
        return self.d + self.alpha * self.dw / 2.0

    @property
    def jump_index(self) -> float:
        """Time-scaling exponent ``alpha * dw / 2``."""
        return self.alpha * self.dw / 2.0

    @property
    def bhp_threshold(self) -> float:
        return 2.0 * (self.d - 1.0) / self.dw

    @property
    def green_threshold(self) -> float:
        return 2.0 * self.d / self.dw

    @property
    def carleson_threshold(self) -> float:
        return 2.0 / self.dw

    def hypothesis_flags(self) -> dict:
        return {
            "alpha_lt_2(d-1)/dw": self.alpha < self.bhp_threshold,
            "alpha_lt_2d/dw": self.alpha < self.green_threshold,
            "alpha_lt_2/dw": self.alpha < self.carleson_threshold,
        }

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "dw": self.dw, "d": self.d, "d_alpha": self.d_alpha}


# ---------------------------------------------------------------------------
# carpet membership


def _fold(v: int) -> int:
    return v if v >= 0 else -v - 1


def ambient_contains(i: int, j: int) -> bool:
    """Scalar carpet test for cell indices (arbitrary precision ints)."""
    a, b = _fold(i), _fold(j)
    while a and b:
        if a % 3 == 1 and b % 3 == 1:
            return False
        a //= 3
        b //= 3
    return True


def carpet_mask(i, j) -> np.ndarray:
    """Vectorised :func:`ambient_contains` on int64 arrays."""
    a = np.asarray(i, dtype=np.int64)
    b = np.asarray(j, dtype=np.int64)
    a, b = np.broadcast_arrays(np.where(a < 0, -a - 1, a), np.where(b < 0, -b - 1, b))
    a = a.copy()
    b = b.copy()
    ok = np.ones(a.shape, dtype=bool)
    live = (a > 0) & (b > 0)
    while live.any():
        ok &= ~((a % 3 == 1) & (b % 3 == 1))
        a //= 3
        b //= 3
        live = (a > 0) & (b > 0)
    return ok


# ---------------------------------------------------------------------------
# cells and points


@dataclass(frozen=True, order=True)
class CellAddress:
    """A level-``n`` cell of the unit carpet, stored by its integer indices.

    ``digits`` gives the base-3 address ``((dx_1, dy_1), ..., (dx_n, dy_n))``
    most significant first.
    """

    level: int
    k: int
    m: int

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("level must be non-negative")
        side = 3**self.level
        if not (0 <= self.k < side and 0 <= self.m < side):
            raise ValueError(f"cell index ({self.k}, {self.m}) outside unit square at level {self.level}")
        if not ambient_contains(self.k, self.m):
            raise ValueError(f"({self.k}, {self.m}) at level {self.level} is a removed square")

    @classmethod
    def from_digits(cls, digits: Sequence[tuple[int, int]]) -> "CellAddress":
        k = m = 0
        for dx, dy in digits:
            if dx not in (0, 1, 2) or dy not in (0, 1, 2):
                raise ValueError(f"bad digit pair {(dx, dy)}")
            if (dx, dy) == (1, 1):
                raise ValueError("digit pair (1, 1) is the removed middle square")
            k, m = 3 * k + dx, 3 * m + dy
        return cls(len(digits), k, m)

    @property
    def digits(self) -> tuple[tuple[int, int], ...]:
        out = []
        k, m = self.k, self.m
        for _ in range(self.level):
            out.append((k % 3, m % 3))
            k //= 3
            m //= 3
        return tuple(reversed(out))

    @property
    def side(self) -> Fraction:
        return Fraction(1, 3**self.level)

    @property
    def center(self) -> tuple[float, float]:
        h = 3.0**-self.level
        return ((self.k + 0.5) * h, (self.m + 0.5) * h)

    def ancestor(self, level: int) -> "CellAddress":
        if level > self.level:
            raise ValueError("ancestor level must not exceed cell level")
        f = 3 ** (self.level - level)
        return CellAddress(level, self.k // f, self.m // f)

    def children(self) -> list["CellAddress"]:
        return [
            CellAddress(self.level + 1, 3 * self.k + a, 3 * self.m + b)
            for a in range(3)
            for b in range(3)
            if (a, b) != (1, 1)
        ]


@dataclass(frozen=True)
class Point:
    """Ternary rational point ``(ix, iy) * 3**-resolution`` of the unit square."""

    resolution: int
    ix: int
    iy: int

    def __post_init__(self):
        side = 3**self.resolution
        if self.resolution < 0 or not (0 <= self.ix <= side and 0 <= self.iy <= side):
            raise ValueError("point outside the unit square")

    @classmethod
    def from_fractions(cls, x, y, resolution: int | None = None) -> "Point":
        fx, fy = Fraction(x), Fraction(y)
        if resolution is None:
            resolution = 0
            while (fx * 3**resolution).denominator != 1 or (fy * 3**resolution).denominator != 1:
                resolution += 1
                if resolution > 60:
                    raise ValueError("coordinates are not ternary rationals")
        sx, sy = fx * 3**resolution, fy * 3**resolution
        if sx.denominator != 1 or sy.denominator != 1:
            raise ValueError("coordinates not representable at this resolution")
        return cls(resolution, int(sx), int(sy))

    @property
    def x(self) -> float:
        return self.ix / 3**self.resolution

    @property
    def y(self) -> float:
        return self.iy / 3**self.resolution

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)

    def at(self, resolution: int) -> tuple[int, int]:
        """Integer coordinates at a finer (or equal) resolution."""
        if resolution < self.resolution:
            raise ValueError("cannot coarsen a point")
        f = 3 ** (resolution - self.resolution)
        return self.ix * f, self.iy * f

    def dist(self, other: "Point") -> float:
        res = max(self.resolution, other.resolution)
        (ax, ay), (bx, by) = self.at(res), other.at(res)
        return math.sqrt((ax - bx) ** 2 + (ay - by) ** 2) / 3**res


def in_carpet(p: Point, n: int) -> bool:
    """Membership of ``p`` in the pre-carpet ``F_n`` (closed squares)."""
    L = p.resolution
    if L < n:
        raise ValueError("insufficient resolution")
    side, third = 3**L, 3 ** (L - 1) if L > 0 else 0
    for s in range(1, n + 1):
        scale = 3 ** (s - 1)
        u, v = (p.ix * scale) % side, (p.iy * scale) % side
        if third < u < 2 * third and third < v < 2 * third:
            return False
    return True


def in_carpet_limit(p: Point) -> bool:
    """Membership in ``F_infinity``; digits below the resolution are zero."""
    return in_carpet(p, p.resolution)


def cells_at_level(n: int) -> set[CellAddress]:
    if n < 0:
        raise ValueError("level must be non-negative")
    if n > MAX_LEVEL:
        raise ValueError("enumeration cap exceeded")
    cells = [CellAddress(0, 0, 0)]
    for _ in range(n):
        cells = [c for parent in cells for c in parent.children()]
    return set(cells)


def cell_measure(n: int) -> float:
    """Normalised Hausdorff measure of one level-``n`` cell (unit carpet has mass 1)."""
    if n < 0:
        raise ValueError("level must be non-negative")
    return 8.0**-n


# ---------------------------------------------------------------------------
# exact rectangle distances (integer units)


def rect_dist2(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> int:
    """Squared distance between closed axis-aligned rectangles ``(x0, y0, x1, y1)``."""
    dx = max(0, a[0] - b[2], b[0] - a[2])
    dy = max(0, a[1] - b[3], b[1] - a[3])
    return dx * dx + dy * dy


def _cell_rect(level: int, i: int, j: int, res: int) -> tuple[int, int, int, int]:
    f = 3 ** (res - level)
    return (i * f, j * f, (i + 1) * f, (j + 1) * f)


def _to_fraction(r) -> Fraction:
    if isinstance(r, Fraction):
        return r
    return Fraction(r).limit_denominator(10**15)


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Interior (relative to the carpet) of a union of same-level cells."""

    cell_level: int
    cells: frozenset
    R1: float
    R2: float
    R0: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "R0", min(self.R1, self.R2) / 3.0)

    # -- membership -----------------------------------------------------------------

    @cached_property
    def grid(self) -> np.ndarray:
        side = 3**self.cell_level
        g = np.zeros((side, side), dtype=bool)
        for c in self.cells:
            g[c.k, c.m] = True
        return g

    @cached_property
    def _index(self) -> frozenset:
        return frozenset((c.k, c.m) for c in self.cells)

    def has_cell(self, i: int, j: int) -> bool:
        return (i, j) in self._index

    def contains_cells(self, level: int, i, j) -> np.ndarray:
        """Whether level-``level`` cells (arrays) lie inside the cell union."""
        if level < self.cell_level:
            raise ValueError("query level coarser than region level")
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        f = 3 ** (level - self.cell_level)
        side = 3**self.cell_level
        a, b = np.floor_divide(i, f), np.floor_divide(j, f)
        inside = (a >= 0) & (b >= 0) & (a < side) & (b < side)
        out = np.zeros(np.broadcast(i, j).shape, dtype=bool)
        out[inside] = self.grid[a[inside], b[inside]]
        return out & carpet_mask(i, j)

    def cells_at(self, level: int) -> np.ndarray:
        """All carpet cells of ``level`` inside the region, as an ``(N, 2)`` array."""
        if level < self.cell_level:
            raise ValueError("level coarser than region level")
        f = 3 ** (level - self.cell_level)
        sub = np.array([(a, b) for a in range(f) for b in range(f)], dtype=np.int64).reshape(-1, 2)
        base = np.array(sorted((c.k, c.m) for c in self.cells), dtype=np.int64) * f
        allc = (base[:, None, :] + sub[None, :, :]).reshape(-1, 2)
        keep = carpet_mask(allc[:, 0], allc[:, 1])
        out = allc[keep]
        order = np.lexsort((out[:, 1], out[:, 0]))
        return out[order]

    def n_states(self, level: int) -> int:
        return len(self.cells) * 8 ** (level - self.cell_level)

    # -- boundary -------------------------------------------------------------------

    @cached_property
    def boundary_pieces(self) -> tuple[tuple[int, int, int, int], ...]:
        """Boundary segments and isolated boundary vertices in level-``m0`` units."""
        segs = set()
        verts = set()
        for c in self.cells:
            k, m = c.k, c.m
            for (di, dj), seg in (
                ((-1, 0), (k, m, k, m + 1)),
                ((1, 0), (k + 1, m, k + 1, m + 1)),
                ((0, -1), (k, m, k + 1, m)),
                ((0, 1), (k, m + 1, k + 1, m + 1)),
            ):
                ni, nj = k + di, m + dj
                if ambient_contains(ni, nj) and not self.has_cell(ni, nj):
                    segs.add(seg)
            for a in (0, 1):
                for b in (0, 1):
                    vx, vy = k + a, m + b
                    for ni in (vx - 1, vx):
                        for nj in (vy - 1, vy):
                            if ambient_contains(ni, nj) and not self.has_cell(ni, nj):
                                verts.add((vx, vy, vx, vy))
        covered = {
            v for v in verts
            if any(s[0] <= v[0] <= s[2] and s[1] <= v[1] <= s[3] for s in segs)
        }
        return tuple(sorted(segs)) + tuple(sorted(verts - covered))

    def boundary_dist2(self, px: int, py: int, res: int) -> int:
        """Exact squared distance (units ``3**-res``) from a point to the boundary."""
        if res < self.cell_level:
            raise ValueError("resolution must be at least the region level")
        f = 3 ** (res - self.cell_level)
        pt = (px, py, px, py)
        best = None
        for s in self.boundary_pieces:
            d2 = rect_dist2(pt, (s[0] * f, s[1] * f, s[2] * f, s[3] * f))
            if best is None or d2 < best:
                best = d2
        return best if best is not None else 10**30

    def rect_boundary_dist2(self, rect: tuple[int, int, int, int], res: int) -> int:
        f = 3 ** (res - self.cell_level)
        return min(
            rect_dist2(rect, (s[0] * f, s[1] * f, s[2] * f, s[3] * f)) for s in self.boundary_pieces
        )

    def is_boundary_point(self, p: Point) -> bool:
        res = max(p.resolution, self.cell_level)
        px, py = p.at(res)
        return self.in_closure(p) and self.boundary_dist2(px, py, res) == 0

    def in_closure(self, p: Point) -> bool:
        """Whether ``p`` lies in a region cell and in the carpet."""
        if not in_carpet_limit(p):
            return False
        res = max(p.resolution, self.cell_level)
        px, py = p.at(res)
        f = 3 ** (res - self.cell_level)
        for a in {px // f, (px - 1) // f}:
            for b in {py // f, (py - 1) // f}:
                if self.has_cell(a, b) and a * f <= px <= (a + 1) * f and b * f <= py <= (b + 1) * f:
                    return True
        return False

    def contains_point(self, p: Point) -> bool:
        if not self.in_closure(p):
            return False
        res = max(p.resolution, self.cell_level)
        return self.boundary_dist2(*p.at(res), res) > 0

    def complement_dist2(self, px: int, py: int, res: int, reach: int = 2) -> int:
        """Squared distance to the carpet outside the region (closure of ``F \\ D``).

        Only non-region carpet cells within ``reach`` level-``m0`` cells of the
        point are inspected.
        """
        f = 3 ** (res - self.cell_level)
        ci, cj = px // f, py // f
        best = 10**30
        pt = (px, py, px, py)
        for a in range(ci - reach, ci + reach + 1):
            for b in range(cj - reach, cj + reach + 1):
                if ambient_contains(a, b) and not self.has_cell(a, b):
                    best = min(best, rect_dist2(pt, _cell_rect(self.cell_level, a, b, res)))
        return best

    # -- serialisation --------------------------------------------------------------

    def to_json(self) -> dict:
        cells = sorted(self.cells, key=lambda c: c.digits)
        return {
            "cell_level": self.cell_level,
            "cells": [[[d[0] for d in c.digits], [d[1] for d in c.digits]] for c in cells],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def describe(self) -> dict:
        return {
            "cell_level": self.cell_level,
            "n_cells": len(self.cells),
            "R0": self.R0,
            "R1": self.R1,
            "R2": self.R2,
            "components": len(self.components),
        }

    @cached_property
    def components(self) -> list[frozenset]:
        """Connected components; cells touching at an edge or a corner are adjacent."""
        remaining = set(self._index)
        comps = []
        while remaining:
            seed = remaining.pop()
            stack, comp = [seed], {seed}
            while stack:
                a, b = stack.pop()
                for da in (-1, 0, 1):
                    for db in (-1, 0, 1):
                        nb = (a + da, b + db)
                        if nb in remaining:
                            remaining.remove(nb)
                            comp.add(nb)
                            stack.append(nb)
            comps.append(frozenset(comp))
        return comps

    def fingerprint(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def build_region(cells: Iterable[CellAddress]) -> Region:
    cells = list(cells)
    if not cells:
        raise ValueError("region needs at least one cell")
    for c in cells:
        if not isinstance(c, CellAddress):
            raise ValueError(f"invalid cell address {c!r}")
    levels = {c.level for c in cells}
    if len(levels) != 1:
        raise ValueError(f"cells must share one level, got {sorted(levels)}")
    m0 = levels.pop()
    if len(set(cells)) != len(cells):
        raise ValueError("duplicate cells")
    best = None
    for a_idx in range(len(cells)):
        a = cells[a_idx]
        ra = (a.k, a.m, a.k + 1, a.m + 1)
        for b in cells[a_idx + 1:]:
            d2 = rect_dist2(ra, (b.k, b.m, b.k + 1, b.m + 1))
            if d2 > 0 and (best is None or d2 < best):
                best = d2
    side = 3.0**-m0
    R1 = math.inf if best is None else math.sqrt(best) * side
    return Region(m0, frozenset(cells), R1, side)


def load_region(path) -> Region:
    try:
        data = json.loads(Path(path).read_text())
        level = int(data["cell_level"])
        cells = []
        for dx, dy in data["cells"]:
            if len(dx) != level or len(dy) != level:
                raise ValueError("digit strings must have cell_level entries")
            cells.append(CellAddress.from_digits(list(zip(dx, dy))))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed region file {path}: {exc}") from exc
    return build_region(cells)


def unit_region() -> Region:
    return build_region([CellAddress(0, 0, 0)])


# ---------------------------------------------------------------------------
# distances to the boundary


def dist_to_boundary(x: Point, D: Region) -> float:
    if not D.contains_point(x):
        raise ValueError("point outside region")
    res = max(x.resolution, D.cell_level)
    return math.sqrt(D.boundary_dist2(*x.at(res), res)) / 3**res


# ---------------------------------------------------------------------------
# fatness


def _grid_level_for(length: Fraction) -> int:
    k = 0
    while Fraction(1, 3**k) > length:
        k += 1
    return k


def inner_fatness_point(Q: Point, r, D: Region, theta=Fraction(1, 9)) -> Point:
    """Deterministic witness ``A`` with ``B(A, theta r)`` inside ``D`` and ``B(Q, r)``.

    Candidates are level-``k`` grid points (``3^-k <= theta r / 4``) visited in
    order of increasing distance to ``Q``, ties broken on ``(ix, iy)``.
    """
    r = _to_fraction(r)
    theta = _to_fraction(theta)
    if not D.is_boundary_point(Q):
        raise ValueError("Q must lie on the region boundary")
    if not (0 < r and float(r) <= D.R0 * (1 + 1e-12)):
        raise ValueError(f"r must lie in (0, R0={D.R0}]")
    k = max(_grid_level_for(theta * r / 4), D.cell_level)
    res = max(k, Q.resolution)
    f = 3 ** (res - k)
    qx, qy = Q.at(res)
    side = 3**k
    # candidate grid within the bounding box of B(Q, r)
    span = int(math.ceil(float(r) * 3**k)) + 1
    cx, cy = qx // f, qy // f
    gx = np.arange(max(cx - span, 0), min(cx + span, side) + 1, dtype=np.int64)
    gy = np.arange(max(cy - span, 0), min(cy + span, side) + 1, dtype=np.int64)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    d2 = (X * f - qx) ** 2 + (Y * f - qy) ** 2
    # |A - Q| + theta r <= r  <=>  |A - Q| <= (1 - theta) r   (squared, exact)
    lim = (1 - theta) * r * 3**res
    ok = d2 * lim.denominator**2 <= lim.numerator**2
    X, Y, d2 = X[ok], Y[ok], d2[ok]
    order = np.lexsort((Y, X, d2))
    need = theta * r * 3**res
    for idx in order:
        A = Point(k, int(X[idx]), int(Y[idx]))
        if not D.contains_point(A):
            continue
        ax, ay = A.at(res)
        c2 = D.complement_dist2(ax, ay, res)
        if c2 * need.denominator**2 >= need.numerator**2:
            return A
    raise ValueError("inner fatness violated")


def outer_fatness_measure(Q: Point, r, D: Region) -> float:
    """Certified lower bound on ``mu(D^c ∩ B(Q, r))`` by counting whole cells."""
    r = _to_fraction(r)
    if not D.is_boundary_point(Q):
        raise ValueError("Q must lie on the region boundary")
    if not (0 < r and float(r) <= D.R0 * (1 + 1e-12)):
        raise ValueError(f"r must lie in (0, R0={D.R0}]")
    k = max(_grid_level_for(r / 27), D.cell_level)
    res = max(k, Q.resolution)
    f = 3 ** (res - k)
    qx, qy = Q.at(res)
    span = int(math.ceil(float(r) * 3**k)) + 2
    ci, cj = qx // f, qy // f
    I, J = np.meshgrid(np.arange(ci - span, ci + span + 1), np.arange(cj - span, cj + span + 1), indexing="ij")
    I, J = I.ravel().astype(np.int64), J.ravel().astype(np.int64)
    # farthest corner of each cell from Q (exact ints)
    fx = np.maximum(np.abs(I * f - qx), np.abs((I + 1) * f - qx))
    fy = np.maximum(np.abs(J * f - qy), np.abs((J + 1) * f - qy))
    rr = r * 3**res
    inside = (fx * fx + fy * fy) * rr.denominator**2 <= rr.numerator**2
    keep = inside & carpet_mask(I, J) & ~D.contains_cells(k, I, J)
    return float(np.count_nonzero(keep)) * cell_measure(k)


# ---------------------------------------------------------------------------
# layer decomposition


@dataclass
class LayerDecomposition:
    base_level: int
    layers: list  # list of (M, 2) int arrays of cells, layer k at level base_level + k
    h0_cells: int
    series_exponent: float
    series_partial_sums: list
    min_delta: list
    ring_measure: list
    layer_integral_bound: list

    @property
    def counts(self) -> list[int]:
        return [len(h) for h in self.layers]

    def bound(self, k: int) -> int:
        return self.h0_cells * (2 * 3**k + 1)

    def bound_holds(self) -> bool:
        return all(c <= self.bound(k) for k, c in enumerate(self.counts) if k >= 1)

    def ring(self, k: int) -> np.ndarray:
        """Level-``(k_o + k + 1)`` cells of ``H_k`` not in ``H_{k+1}``."""
        return _ring_cells(self.layers[k], self.layers[k + 1])

    def to_rows(self) -> list[dict]:
        rows = []
        for k in range(len(self.layers) - 1):
            rows.append(
                {
                    "k": k,
                    "cell_count": len(self.layers[k]),
                    "min_delta": self.min_delta[k],
                    "ring_measure": self.ring_measure[k],
                }
            )
        return rows

    def write_csv(self, path) -> None:
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["k", "cell_count", "min_delta", "ring_measure"])
            w.writeheader()
            w.writerows(rows)


def _children_array(cells: np.ndarray) -> np.ndarray:
    off = np.array([(a, b) for a in range(3) for b in range(3) if (a, b) != (1, 1)], dtype=np.int64)
    return (3 * cells[:, None, :] + off[None, :, :]).reshape(-1, 2)


def _ring_cells(hk: np.ndarray, hk1: np.ndarray) -> np.ndarray:
    kids = _children_array(hk)
    if len(hk1) == 0:
        return kids
    taken = {tuple(c) for c in hk1.tolist()}
    keep = np.array([tuple(c) not in taken for c in kids.tolist()], dtype=bool)
    return kids[keep]


def _touching(level: int, cells: np.ndarray, D: Region) -> np.ndarray:
    """Mask of cells whose closed square meets the region boundary."""
    f = 3 ** (level - D.cell_level)
    out = np.zeros(len(cells), dtype=bool)
    x0, y0 = cells[:, 0], cells[:, 1]
    for s in D.boundary_pieces:
        sx0, sy0, sx1, sy1 = s[0] * f, s[1] * f, s[2] * f, s[3] * f
        out |= (x0 <= sx1) & (x0 + 1 >= sx0) & (y0 <= sy1) & (y0 + 1 >= sy0)
    return out


def _min_boundary_dist(level: int, cells: np.ndarray, D: Region) -> float:
    if len(cells) == 0:
        return math.inf
    f = 3 ** (level - D.cell_level)
    x0, y0 = cells[:, 0].astype(np.float64), cells[:, 1].astype(np.float64)
    best = np.full(len(cells), np.inf)
    for s in D.boundary_pieces:
        sx0, sy0, sx1, sy1 = (float(v * f) for v in s)
        dx = np.maximum(0.0, np.maximum(sx0 - (x0 + 1), x0 - sx1))
        dy = np.maximum(0.0, np.maximum(sy0 - (y0 + 1), y0 - sy1))
        best = np.minimum(best, np.hypot(dx, dy))
    return float(best.min()) * 3.0**-level


def base_level_for(r) -> int:
    """The integer ``k_o`` with ``3^(-k_o-1) < 5r/4 <= 3^(-k_o)``."""
    t = Fraction(5, 4) * _to_fraction(r)
    k = 0
    while Fraction(1, 3 ** (k + 1)) >= t:
        k += 1
    if t > 1:
        raise ValueError("5r/4 must not exceed 1")
    return k


def layer_decomposition(D: Region, Q: Point, r, K: int, params: FractalParams | None = None) -> LayerDecomposition:
    r = _to_fraction(r)
    if K > 8:
        raise ValueError("depth K too large (max 8)")
    if K < 0:
        raise ValueError("depth K must be non-negative")
    if not D.is_boundary_point(Q):
        raise ValueError("Q must lie on the region boundary")
    if not (0 < r and float(r) < D.R0 / 2):
        raise ValueError(f"r must lie in (0, R0/2={D.R0 / 2})")
    params = params or FractalParams(0.5)
    ko = base_level_for(r)
    res = max(ko, Q.resolution)
    qx, qy = Q.at(res)
    # H_0: level-k_o cells in closure(D), touching the boundary, meeting B(Q, 5r/4)
    h0 = D.cells_at(ko)
    h0 = h0[_touching(ko, h0, D)]
    f = 3 ** (res - ko)
    rr = Fraction(5, 4) * r * 3**res
    keep = []
    for i, j in h0.tolist():
        d2 = rect_dist2((qx, qy, qx, qy), (i * f, j * f, (i + 1) * f, (j + 1) * f))
        keep.append(d2 * rr.denominator**2 < rr.numerator**2)
    h0 = h0[np.array(keep, dtype=bool)] if len(h0) else h0
    layers = [h0]
    for k in range(1, K + 2):
        lvl = ko + k
        prev = layers[-1]
        kids = _children_array(prev) if len(prev) else prev
        kids = kids[carpet_mask(kids[:, 0], kids[:, 1])] if len(kids) else kids
        kids = kids[_touching(lvl, kids, D)] if len(kids) else kids
        layers.append(kids)
    beta = params.jump_index
    expo = beta - params.d + 1.0
    partial, acc = [], 0.0
    for k in range(K + 1):
        acc += 3.0 ** (k * expo)
        partial.append(acc)
    min_delta, ring_mu, integral = [], [], []
    for k in range(K + 1):
        ring = _ring_cells(layers[k], layers[k + 1]) if len(layers[k]) else layers[k]
        lvl = ko + k + 1
        min_delta.append(_min_boundary_dist(lvl, ring, D))
        mu = len(layers[k]) * cell_measure(ko + k) - len(layers[k + 1]) * cell_measure(ko + k + 1)
        ring_mu.append(mu)
        integral.append(mu * (3.0 ** -(ko + k + 1)) ** (-beta))
    return LayerDecomposition(
        base_level=ko,
        layers=layers,
        h0_cells=len(h0),
        series_exponent=expo,
        series_partial_sums=partial,
        min_delta=min_delta,
        ring_measure=ring_mu,
        layer_integral_bound=list(np.cumsum(integral)),
    )
