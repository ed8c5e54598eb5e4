"""Geometric scaffolding of the boundary Harnack argument, built exactly.

All coordinates are integers in *half units* of resolution ``R``: the value
``X`` stands for ``X / (2 * 3**R)``.  Half units are needed because segment
midpoints of level-``R`` squares are not ternary rationals.  ``R`` is at least
``N + 5`` so every cell used here (down to level ``N + 5``) and every
constructed point is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .geometry import CellAddress, Point, Region, _to_fraction, ambient_contains, build_region, rect_dist2

THETA = Fraction(1, 9)


# ---------------------------------------------------------------------------
# half-unit helpers


@dataclass(frozen=True)
class HalfPoint:
    """Point ``(X, Y) / (2 * 3**R)``."""

    R: int
    X: int
    Y: int

    @property
    def xy(self) -> tuple[float, float]:
        u = 2.0 * 3.0**self.R
        return (self.X / u, self.Y / u)

    def to_point(self) -> Point | None:
        if self.X % 2 or self.Y % 2:
            return None
        return Point(self.R, self.X // 2, self.Y // 2)


def half_in_carpet(R: int, X: int, Y: int) -> bool:
    """Membership in the reflected carpet of a half-unit point."""
    full = 2 * 3**R
    third = 2 * 3 ** (R - 1)
    for s in range(1, R + 1):
        m = 3 ** (s - 1)
        u, v = (X * m) % full, (Y * m) % full
        if third < u < 2 * third and third < v < 2 * third:
            return False
    # below resolution R an odd half unit has ternary tail 111...
    return not (X % 2 and Y % 2)


def cell_rect(level: int, i: int, j: int, R: int) -> tuple[int, int, int, int]:
    f = 2 * 3 ** (R - level)
    return (i * f, j * f, (i + 1) * f, (j + 1) * f)


def _pt(X: int, Y: int) -> tuple[int, int, int, int]:
    return (X, Y, X, Y)


def _intersect(a, b):
    x0, y0 = max(a[0], b[0]), max(a[1], b[1])
    x1, y1 = min(a[2], b[2]), min(a[3], b[3])
    if x0 > x1 or y0 > y1:
        return None
    return (x0, y0, x1, y1)


def le_sum_sqrt2(d2: int, a: int, b: int) -> bool:
    """Exact test of ``sqrt(d2) <= a + b*sqrt(2)`` for non-negative ``a, b``."""
    lhs = d2 - a * a - 2 * b * b
    if lhs <= 0:
        return True
    return lhs * lhs <= 2 * (2 * a * b) ** 2


def min_rect_dist2(rect, rects: np.ndarray) -> int:
    """Smallest squared distance from ``rect`` to the rows ``(x0, y0, x1, y1)`` of ``rects``."""
    if len(rects) == 0:
        return 10**40
    dx = np.maximum(0, np.maximum(rect[0] - rects[:, 2], rects[:, 0] - rect[2]))
    dy = np.maximum(0, np.maximum(rect[1] - rects[:, 3], rects[:, 1] - rect[3]))
    return int((dx * dx + dy * dy).min())


def _rect_array(rects) -> np.ndarray:
    return np.asarray(list(rects), dtype=np.int64).reshape(-1, 4)


class HalfGeo:
    """Distance queries against a cell union in half units of resolution ``R``."""

    def __init__(self, region: Region, R: int):
        self.region = region
        self.level = region.cell_level
        self.R = R
        self.f = 2 * 3 ** (R - region.cell_level)
        self.pieces = [tuple(v * self.f for v in p) for p in region.boundary_pieces]
        self.rects = [cell_rect(self.level, c.k, c.m, R) for c in region.cells]

    def has(self, i: int, j: int) -> bool:
        return self.region.has_cell(i, j)

    def boundary_dist2(self, rect) -> int:
        return min(rect_dist2(rect, p) for p in self.pieces)

    def closure_dist2(self, rect) -> int:
        return min(rect_dist2(rect, c) for c in self.rects)

    def complement_dist2(self, rect, reach: int = 2) -> int:
        """Squared distance to the carpet outside the cell union (closure of ``F`` minus it)."""
        i0, j0 = rect[0] // self.f, rect[1] // self.f
        i1, j1 = rect[2] // self.f, rect[3] // self.f
        best = None
        for a in range(i0 - reach, i1 + reach + 1):
            for b in range(j0 - reach, j1 + reach + 1):
                if ambient_contains(a, b) and not self.has(a, b):
                    d2 = rect_dist2(rect, cell_rect(self.level, a, b, self.R))
                    if best is None or d2 < best:
                        best = d2
        return best if best is not None else 10**40

    def inside_rect(self, rect) -> bool:
        """Whether a closed rectangle lies inside one cell of the union."""
        i, j = rect[0] // self.f, rect[1] // self.f
        if not self.has(i, j):
            return False
        c = cell_rect(self.level, i, j, self.R)
        return c[0] <= rect[0] and c[1] <= rect[1] and rect[2] <= c[2] and rect[3] <= c[3]

    def contains_half_point(self, X: int, Y: int) -> bool:
        """Open-region membership (in the carpet topology) of a half-unit point."""
        if not half_in_carpet(self.R, X, Y):
            return False
        if self.boundary_dist2(_pt(X, Y)) == 0:
            return False
        return self.closure_dist2(_pt(X, Y)) == 0


# ---------------------------------------------------------------------------
# construction


@dataclass
class BhpGeometry:
    D: Region
    Q: Point
    r: Fraction
    N: int
    R: int
    Omega: Region
    Omega2: Region
    r_tilde: Fraction
    A: HalfPoint
    boundary_cells: list  # level N+3 cells (i, j), B-tilde_1 first
    S: list  # HalfPoint per boundary cell
    vertex: list  # bool per boundary cell
    A_i: list  # HalfPoint per boundary cell
    T: tuple  # level N+4 cell (i, j)
    checks: dict = field(default_factory=dict)

    @property
    def n0(self) -> int:
        return len(self.boundary_cells)

    @property
    def rt_half(self) -> int:
        """``r_tilde`` in half units."""
        return 2 * 3 ** (self.R - self.N - 3)

    def ball_radius(self) -> float:
        return float(self.r_tilde) * math.sqrt(2.0)

    def balls(self) -> list[tuple[float, float, float]]:
        """``B_i = B(S_i, r_tilde sqrt 2)`` as ``(cx, cy, radius)``."""
        rad = self.ball_radius()
        return [(*s.xy, rad) for s in self.S]

    def in_delta(self, level: int, i, j) -> np.ndarray:
        """Cells (by centre) of ``Delta = union B_i ∩ D ∩ Omega^c``."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        u = 3.0**-level
        x = (i + 0.5) * u
        y = (j + 0.5) * u
        near = np.zeros(i.shape, dtype=bool)
        for cx, cy, rad in self.balls():
            near |= (x - cx) ** 2 + (y - cy) ** 2 < rad**2
        return near & self.D.contains_cells(level, i, j) & ~self.Omega.contains_cells(level, i, j)

    def describe(self) -> dict:
        return {
            "N": self.N,
            "n0": self.n0,
            "r_tilde": float(self.r_tilde),
            "Omega_cells": sorted((c.k, c.m) for c in self.Omega.cells),
            "Omega_level": self.Omega.cell_level,
            "A": self.A.xy,
            "B1": self.boundary_cells[0],
            "S1": self.S[0].xy,
            "T": self.T,
            "checks": self.checks,
        }


def _n_for(r: Fraction) -> int:
    N = 0
    while Fraction(1, 3**N) > r:
        N += 1
    return N


def _cells_at_q(D: Region, Q: Point, level: int, R: int) -> list[tuple[int, int]]:
    f = 2 * 3 ** (R - level)
    X, Y = 2 * Q.at(R)[0], 2 * Q.at(R)[1]
    out = []
    for a in {X // f, (X - 1) // f}:
        for b in {Y // f, (Y - 1) // f}:
            rect = cell_rect(level, a, b, R)
            if not (rect[0] <= X <= rect[2] and rect[1] <= Y <= rect[3]):
                continue
            if ambient_contains(a, b) and bool(D.contains_cells(level, np.array([a]), np.array([b]))[0]):
                out.append((a, b))
    return sorted(out)


def _omega_cells(D: Region, Dg: HalfGeo, Q: Point, level: int, R: int) -> list[tuple[int, int]]:
    cells = _cells_at_q(D, Q, level, R)
    if not cells:
        raise ValueError("construction failed: no cell of the region contains Q")
    if len(cells) > 1:
        return cells
    (a, b) = cells[0]
    S = cell_rect(level, a, b, R)
    out = [(a, b)]
    for da in (-1, 0, 1):
        for db in (-1, 0, 1):
            if (da, db) == (0, 0):
                continue
            na, nb = a + da, b + db
            if not ambient_contains(na, nb):
                continue
            if not bool(D.contains_cells(level, np.array([na]), np.array([nb]))[0]):
                continue
            contact = _intersect(S, cell_rect(level, na, nb, R))
            if contact is not None and any(rect_dist2(contact, p) == 0 and _intersect(contact, p) is not None
                                           for p in Dg.pieces):
                out.append((na, nb))
    return sorted(out)


def _region_of(level: int, cells) -> Region:
    return build_region([CellAddress(level, a, b) for a, b in cells])


def _contact(bt_rect, omega: HalfGeo):
    """Midpoint / vertex of ``∂B ∩ ∂Omega`` for a boundary cell rectangle."""
    pieces = set()
    for c in omega.rects:
        p = _intersect(bt_rect, c)
        if p is not None:
            pieces.add(p)
    if not pieces:
        return None
    segs = [p for p in pieces if p[0] != p[2] or p[1] != p[3]]
    if not segs:
        pts = {(p[0], p[1]) for p in pieces}
        if len(pts) != 1:
            return None
        (X, Y), = pts
        return (X, Y, True)
    horiz = {}
    vert = {}
    for p in segs:
        if p[1] == p[3]:
            horiz.setdefault(p[1], []).append((p[0], p[2]))
        else:
            vert.setdefault(p[0], []).append((p[1], p[3]))

    def merge(d):
        out = []
        for key, iv in d.items():
            iv.sort()
            lo, hi = iv[0]
            for a, b in iv[1:]:
                if a > hi:
                    return None
                hi = max(hi, b)
            out.append((key, lo, hi))
        return out

    H, V = merge(horiz), merge(vert)
    if H is None or V is None:
        return None
    if len(H) + len(V) == 1:
        if H:
            y, lo, hi = H[0]
            return ((lo + hi) // 2, y, False)
        x, lo, hi = V[0]
        return (x, (lo + hi) // 2, False)
    if len(H) == 1 and len(V) == 1:
        y, hlo, hhi = H[0]
        x, vlo, vhi = V[0]
        if x in (hlo, hhi) and y in (vlo, vhi):
            return (x, y, True)
    return None


def build_bhp_geometry(D: Region, Q: Point, r) -> BhpGeometry:
    """Rebuild the sets used in the boundary Harnack argument for ``(D, Q, r)``."""
    r = _to_fraction(r)
    if not D.is_boundary_point(Q):
        raise ValueError("Q must lie on the region boundary")
    if not (0 < r and float(r) < D.R0 / 2):
        raise ValueError(f"r must lie in (0, R0/2={D.R0 / 2})")
    N = _n_for(r)
    R = max(N + 5, Q.resolution, D.cell_level)
    if N + 1 < D.cell_level:
        raise ValueError("construction failed: region cells are finer than the construction scale")
    Dg = HalfGeo(D, R)
    omega = _region_of(N + 1, _omega_cells(D, Dg, Q, N + 1, R))
    omega2 = _region_of(N + 2, _omega_cells(D, Dg, Q, N + 2, R))
    Og, O2g = HalfGeo(omega, R), HalfGeo(omega2, R)
    rt = 2 * 3 ** (R - N - 3)  # r_tilde in half units
    # A: dist(A, D^c) = 3 r_tilde, dist(A, Omega_2) = r_tilde, A in Omega (grid of r_tilde / 3)
    step = rt // 3
    xs = [x for rc in Og.rects for x in (rc[0], rc[2])]
    ys = [y for rc in Og.rects for y in (rc[1], rc[3])]
    A = None
    for X in range(min(xs), max(xs) + 1, step):
        for Y in range(min(ys), max(ys) + 1, step):
            if O2g.closure_dist2(_pt(X, Y)) != rt * rt:
                continue
            if Dg.complement_dist2(_pt(X, Y)) != 9 * rt * rt:
                continue
            if Og.contains_half_point(X, Y):
                A = HalfPoint(R, X, Y)
                break
        if A is not None:
            break
    if A is None:
        raise ValueError("construction failed: no point A")
    # boundary cells of level N+3 touching Omega from outside, inside closure(D)
    L3 = N + 3
    f3 = 2 * 3 ** (R - L3)
    i_lo, i_hi = min(xs) // f3 - 1, max(xs) // f3
    j_lo, j_hi = min(ys) // f3 - 1, max(ys) // f3
    bcells, S, vert, Ai = [], [], [], []
    for a in range(i_lo, i_hi + 1):
        for b in range(j_lo, j_hi + 1):
            if not ambient_contains(a, b):
                continue
            rect = cell_rect(L3, a, b, R)
            if not Dg.inside_rect(rect) or Og.inside_rect(rect):
                continue
            if Og.closure_dist2(rect) != 0:
                continue
            c = _contact(rect, Og)
            if c is None:
                raise ValueError(f"construction failed: irregular contact for boundary cell {(a, b)}")
            X, Y, is_vertex = c
            cx2, cy2 = rect[0] + rect[2], rect[1] + rect[3]  # doubled centre
            if is_vertex:
                dx = 1 if 2 * X > cx2 else -1
                dy = 1 if 2 * Y > cy2 else -1
                Ax, Ay = X + dx * step, Y + dy * step
            elif rect[0] == rect[2] or rect[1] == rect[3]:
                raise ValueError("degenerate cell")
            elif X in (rect[0], rect[2]) and rect[1] < Y < rect[3]:
                Ax, Ay = X + (step if 2 * X > cx2 else -step), Y
            else:
                Ax, Ay = X, Y + (step if 2 * Y > cy2 else -step)
            bcells.append((a, b))
            S.append(HalfPoint(R, X, Y))
            vert.append(is_vertex)
            Ai.append(HalfPoint(R, Ax, Ay))
    if not bcells:
        raise ValueError("construction failed: no boundary cells")
    # choose B_1 and T
    L4 = N + 4
    f4 = 2 * 3 ** (R - L4)
    two_rt_sq = 2 * rt * rt
    chosen = None
    for k, (a, b) in enumerate(bcells):
        if Dg.boundary_dist2(cell_rect(L3, a, b, R)) < 64 * rt * rt:
            continue
        s1 = S[k]
        for ti in range((s1.X - 3 * rt) // f4 - 1, (s1.X + 3 * rt) // f4 + 2):
            for tj in range((s1.Y - 3 * rt) // f4 - 1, (s1.Y + 3 * rt) // f4 + 2):
                if not ambient_contains(ti, tj):
                    continue
                trect = cell_rect(L4, ti, tj, R)
                if not Dg.inside_rect(trect):
                    continue
                if Og.closure_dist2(trect) == 0 and _overlaps_interior(trect, Og):
                    continue
                if any(rect_dist2(trect, _pt(s.X, s.Y)) < two_rt_sq for s in S):
                    continue
                if Dg.complement_dist2(trect) < 64 * rt * rt:
                    continue
                if not le_sum_sqrt2(rect_dist2(trect, _pt(s1.X, s1.Y)), rt, rt):
                    continue
                chosen = (k, (ti, tj))
                break
            if chosen:
                break
        if chosen:
            break
    if chosen is None:
        raise ValueError("construction failed: no cell T")
    k, T = chosen
    order = [k] + [m for m in range(len(bcells)) if m != k]
    geom = BhpGeometry(
        D=D, Q=Q, r=r, N=N, R=R, Omega=omega, Omega2=omega2, r_tilde=Fraction(1, 3 ** (N + 3)), A=A,
        boundary_cells=[bcells[m] for m in order], S=[S[m] for m in order], vertex=[vert[m] for m in order],
        A_i=[Ai[m] for m in order], T=T,
    )
    geom.checks = verify_bhp_geometry(geom)
    return geom


def _overlaps_interior(rect, g: HalfGeo) -> bool:
    for c in g.rects:
        if min(rect[2], c[2]) > max(rect[0], c[0]) and min(rect[3], c[3]) > max(rect[1], c[1]):
            return True
    return False


# ---------------------------------------------------------------------------
# enumeration checks at level N+5


def _fine_cells(level_from: int, a: int, b: int, level_to: int) -> list[tuple[int, int]]:
    f = 3 ** (level_to - level_from)
    return [(a * f + p, b * f + q) for p in range(f) for q in range(f) if ambient_contains(a * f + p, b * f + q)]


def verify_bhp_geometry(g: BhpGeometry) -> dict:
    """Re-derive every invariant by enumerating level ``N+5`` cells.

    The routines here do not share the construction's search code: set
    memberships are decided cell by cell at the finest level.
    """
    N, R = g.N, g.R
    L5 = N + 5
    f5 = 2 * 3 ** (R - L5)
    rt = g.rt_half
    D, Om = g.D, g.Omega

    def in_D(i, j):
        return bool(D.contains_cells(L5, np.array([i]), np.array([j]))[0])

    def in_Om(i, j):
        return bool(Om.contains_cells(L5, np.array([i]), np.array([j]))[0])

    def in_Om2(i, j):
        return bool(g.Omega2.contains_cells(L5, np.array([i]), np.array([j]))[0])

    # window of level N+5 cells around Omega
    Og = HalfGeo(Om, R)
    margin = 9 * (rt // f5) + 2  # T and the balls lie within 3 r_tilde of Omega; D^c is probed up to 8 r_tilde further
    x0 = min(rc[0] for rc in Og.rects) // f5 - margin
    x1 = max(rc[2] for rc in Og.rects) // f5 + margin
    y0 = min(rc[1] for rc in Og.rects) // f5 - margin
    y1 = max(rc[3] for rc in Og.rects) // f5 + margin
    I, J = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1), indexing="ij")
    I, J = I.ravel().astype(np.int64), J.ravel().astype(np.int64)
    from .geometry import carpet_mask

    keep = carpet_mask(I, J)
    I, J = I[keep], J[keep]
    inD = D.contains_cells(L5, I, J)
    inO = Om.contains_cells(L5, I, J)
    inO2 = g.Omega2.contains_cells(L5, I, J)
    fine_om = set(zip(I[inO].tolist(), J[inO].tolist()))
    fine_d = set(zip(I[inD].tolist(), J[inD].tolist()))
    fine_all = set(zip(I.tolist(), J.tolist()))
    res = {}

    # boundary cells re-derived: all fine sub-cells in D and outside Omega, some fine sub-cell touching a fine Omega cell
    L3 = N + 3
    cand = set()
    for i, j in fine_om:
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if (ni, nj) in fine_all and (ni, nj) not in fine_om:
                    cand.add((ni // 9, nj // 9))
    derived = []
    for a, b in sorted(cand):
        if not ambient_contains(a, b):
            continue
        subs = _fine_cells(L3, a, b, L5)
        if all(s in fine_d and s not in fine_om for s in subs):
            derived.append((a, b))
    res["boundary_cells_match_enumeration"] = sorted(derived) == sorted(g.boundary_cells)
    res["n0_in_18_54"] = 18 <= g.n0 <= 54

    # B_1 distance to the boundary of D: boundary fine cells are D cells with a non-D carpet neighbour
    bd_rects = []
    for i, j in fine_d:
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                n = (i + di, j + dj)
                if n in fine_all and n not in fine_d:
                    c = cell_rect(L5, n[0], n[1], R)
                    d = cell_rect(L5, i, j, R)
                    bd_rects.append(_intersect(c, d))
    b1 = cell_rect(L3, *g.boundary_cells[0], R)
    d2_b1 = min_rect_dist2(b1, _rect_array(p for p in bd_rects if p is not None))
    res["B1_dist_to_boundary_ge_8rt"] = d2_b1 >= 64 * rt * rt

    # A: distances to D^c and Omega_2, membership in Omega
    nonD = _rect_array(cell_rect(L5, i, j, R) for (i, j) in fine_all - fine_d)
    om2 = _rect_array(cell_rect(L5, i, j, R) for i, j in zip(I[inO2].tolist(), J[inO2].tolist()))
    nonOm = _rect_array(cell_rect(L5, i, j, R) for (i, j) in fine_all - fine_om)
    om = _rect_array(cell_rect(L5, i, j, R) for (i, j) in fine_om)
    pa = _pt(g.A.X, g.A.Y)
    res["A_dist_Dc_eq_3rt"] = min_rect_dist2(pa, nonD) == 9 * rt * rt
    res["A_dist_Omega2_eq_rt"] = min_rect_dist2(pa, om2) == rt * rt
    res["A_in_Omega"] = (half_in_carpet(R, g.A.X, g.A.Y) and min_rect_dist2(pa, om) == 0
                         and min_rect_dist2(pa, nonOm) > 0)

    # A_i offsets and ball inclusion B(A_i, theta r_t sqrt2 / 2) ⊆ Omega ∩ B(S_i, r_t sqrt2 / 2)
    step = rt // 3
    off_ok, incl_ok, mem_ok = True, True, True
    for s, a, v in zip(g.S, g.A_i, g.vertex):
        d2 = (s.X - a.X) ** 2 + (s.Y - a.Y) ** 2
        off_ok &= d2 == (2 * step * step if v else step * step)
        # theta r_t sqrt2/2 = rt sqrt2 / 18; compare squared: rt^2 / 162
        rad2 = Fraction(rt * rt, 162)
        incl_ok &= min_rect_dist2(_pt(a.X, a.Y), nonOm) >= rad2
        # |A_i - S_i| + theta r_t sqrt2/2 <= r_t sqrt2/2  <=>  |A_i - S_i| <= (8/18) sqrt2 rt
        incl_ok &= Fraction(d2) <= Fraction(2 * 64 * rt * rt, 324)
        mem_ok &= half_in_carpet(R, a.X, a.Y)
    res["Ai_offsets"] = bool(off_ok)
    res["Ai_ball_inclusion"] = bool(incl_ok)
    res["Ai_in_carpet"] = bool(mem_ok)

    # Delta contains every boundary cell (by fine cell centres, open balls)
    S2 = [(2 * s.X, 2 * s.Y) for s in g.S]  # doubled once more for centres

    def in_some_ball(i, j):
        c = cell_rect(L5, i, j, R)
        cx, cy = c[0] + c[2], c[1] + c[3]
        return any((cx - x) ** 2 + (cy - y) ** 2 < 4 * 2 * rt * rt for x, y in S2)

    ok = True
    for a, b in g.boundary_cells:
        for s in _fine_cells(L3, a, b, L5):
            ok &= in_some_ball(*s)
    res["boundary_cells_inside_Delta"] = bool(ok)

    # T: fine sub-cells outside Omega and every B_i, inside D, at distance >= 8 r_t from D^c, near B_1
    L4 = N + 4
    subs = _fine_cells(L4, *g.T, L5)
    t_rect = cell_rect(L4, *g.T, R)
    t_ok = all(s in fine_d and s not in fine_om for s in subs)
    t_ok &= all(rect_dist2(t_rect, _pt(s.X, s.Y)) >= 2 * rt * rt for s in g.S)
    t_ok &= min_rect_dist2(t_rect, nonD) >= 64 * rt * rt
    t_ok &= le_sum_sqrt2(rect_dist2(t_rect, _pt(g.S[0].X, g.S[0].Y)), rt, rt)
    res["T_conditions"] = bool(t_ok)
    return res
