"""Trajectory samplers for the alpha-stable process on carpet approximations.

The primary engine is a pure-jump chain on level-``n`` carpet cells.  From a
cell ``x`` it jumps to another carpet cell ``y`` with probability proportional
to ``|x - y|^{-d_alpha}`` (cell-index units, all cells carry equal measure),
over the whole reflected carpet rather than a truncated window.  Jumps are
drawn exactly by rejection: an exact table for short displacements, a
Pareto-shaped envelope for long ones, then a carpet-membership test.
Holding times are exponential with mean ``t0 * 3^(-n alpha dw / 2)``.

A second sampler time-changes the nearest-neighbour walk on the carpet graph
by an ``alpha/2``-stable subordinator; it exists to cross-validate exit laws.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

from .geometry import CellAddress, FractalParams, Region, carpet_mask
from .rng import stream_key, uniform, generator

MAX_STATES = 10**6
STEP_CAP = 10**7
DEFAULT_CHUNK = 2048
INNER_RADIUS = 32
FAR_CELLS = 3.0**36
NO_CELL = np.iinfo(np.int64).min

STATUS_EXIT = 0
STATUS_NONEXIT = 1


# ---------------------------------------------------------------------------
# numba primitives


@njit(cache=True, nogil=True)
def _in_carpet(i, j):
    a = i if i >= 0 else -i - 1
    b = j if j >= 0 else -j - 1
    while a > 0 and b > 0:
        if a % 3 == 1 and b % 3 == 1:
            return False
        a //= 3
        b //= 3
    return True


@njit(cache=True, nogil=True)
def _in_domain(kind, f, oi, oj, grid, cx, cy, rr, i, j):
    """Domain test for cell (i, j): kind 0 = coarse cell grid, 1 = ball of cell centres."""
    if kind == 0:
        a = i // f - oi
        b = j // f - oj
        if a < 0 or b < 0 or a >= grid.shape[0] or b >= grid.shape[1]:
            return False
        return grid[a, b]
    if kind == 1:
        dx = i + 0.5 - cx
        dy = j + 0.5 - cy
        return dx * dx + dy * dy < rr
    return False


@njit(cache=True, nogil=True)
def _envelope_ratio(k, s):
    """``g_k * k^s`` where ``g_k`` is the per-point envelope mass on sup-ring ``k``."""
    return k * math.expm1((2.0 - s) * math.log1p(-1.0 / k)) / (s - 2.0)


@njit(cache=True, nogil=True)
def _draw_jump(key, ctr, cdf, dxs, dys, p_in, M, s, i, j):
    """Exact draw of a carpet jump from cell (i, j).

    Returns ``(ni, nj, x, y, far, ctr, trials)`` where ``x, y`` are float
    cell coordinates (only meaningful when ``far``) and ``trials`` counts the
    envelope proposals used.  ``trials`` is independent of the accepted jump
    and has mean ``(envelope mass) / Z(i, j)``.
    """
    trials = 0
    while True:
        trials += 1
        u = uniform(key, ctr)
        ctr += 1
        if u < p_in:
            v = uniform(key, ctr) * cdf[-1]
            ctr += 1
            lo, hi = 0, cdf.shape[0] - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf[mid] < v:
                    lo = mid + 1
                else:
                    hi = mid
            ni = i + dxs[lo]
            nj = j + dys[lo]
            if _in_carpet(ni, nj):
                return ni, nj, 0.0, 0.0, False, ctr, trials
            continue
        # outer envelope: Pareto radius, uniform point on the sup-ring
        x = M * uniform(key, ctr) ** (-1.0 / (s - 2.0))
        ctr += 1
        side_u = uniform(key, ctr)
        ctr += 1
        acc_u = uniform(key, ctr)
        ctr += 1
        if x < FAR_CELLS:
            k = math.ceil(x)
            t = int(side_u * 8 * k)
            if t >= 8 * k:
                t = 8 * k - 1
            side = t // (2 * k)
            q = t % (2 * k)
            if side == 0:
                di, dj = k, -k + 1 + q
            elif side == 1:
                di, dj = k - 1 - q, k
            elif side == 2:
                di, dj = -k, k - 1 - q
            else:
                di, dj = -k + 1 + q, -k
            r = math.sqrt(float(di) * di + float(dj) * dj)
            if acc_u * _envelope_ratio(float(k), s) > (k / r) ** s:
                continue
            ni = i + di
            nj = j + dj
            if _in_carpet(ni, nj):
                return ni, nj, 0.0, 0.0, False, ctr, trials
            continue
        # astronomically long jump: coarse-grained placement, recorded as far
        kf = math.ceil(x)
        t = side_u * 8.0
        side = int(t)
        q = (t - side) * 2.0 - 1.0
        if side == 0:
            fx, fy = kf, q * kf
        elif side == 1:
            fx, fy = -q * kf, kf
        elif side == 2:
            fx, fy = -kf, -q * kf
        else:
            fx, fy = q * kf, -kf
        r = math.sqrt(fx * fx + fy * fy)
        if acc_u * _envelope_ratio(kf, s) > (kf / r) ** s:
            continue
        fx += i
        fy += j
        b = 0
        scale = 1.0
        while abs(fx) / scale > 1e16 or abs(fy) / scale > 1e16:
            scale *= 3.0
            b += 1
        bi = int(math.floor(fx / scale))
        bj = int(math.floor(fy / scale))
        if not _in_carpet(bi, bj):
            continue
        if uniform(key, ctr) > (8.0 / 9.0) ** b:
            ctr += 1
            continue
        ctr += 1
        return 0, 0, fx, fy, True, ctr, trials


@njit(cache=True, nogil=True)
def _target_weight(ci, cj, s, i, j):
    """``sum_q |(i, j) - (ci[q], cj[q])|^-s`` over target cells other than ``(i, j)``."""
    kt = 0.0
    for q in range(ci.shape[0]):
        ddi = float(ci[q] - i)
        ddj = float(cj[q] - j)
        if ddi != 0.0 or ddj != 0.0:
            kt += (ddi * ddi + ddj * ddj) ** (-0.5 * s)
    return kt


@njit(cache=True)
def _target_table(ci, cj, s, oi, oj, ni, nj):
    tab = np.empty((ni, nj))
    for a in range(ni):
        for b in range(nj):
            tab[a, b] = _target_weight(ci, cj, s, oi + a, oj + b)
    return tab


_TABLE_CACHE: dict = {}


def target_table(cells: np.ndarray, s: float, box) -> np.ndarray:
    """Kernel mass of the target cells seen from every cell of ``box = (i0, j0, i1, j1)``."""
    key = (cells.tobytes(), float(s), tuple(box))
    if key not in _TABLE_CACHE:
        if len(_TABLE_CACHE) > 8:
            _TABLE_CACHE.clear()
        i0, j0, i1, j1 = box
        _TABLE_CACHE[key] = _target_table(cells[:, 0].copy(), cells[:, 1].copy(), float(s), i0, j0, i1 - i0 + 1, j1 - j0 + 1)
    return _TABLE_CACHE[key]


@njit(cache=True, nogil=True)
def _run_chunk(
    seed, first, count, si, sj, cdf, dxs, dys, p_in, M, s, h, max_steps,
    d_kind, d_f, d_oi, d_oj, d_grid, d_cx, d_cy, d_rr,
    o_kind, o_f, o_oi, o_oj, o_grid, o_cx, o_cy, o_rr,
    t_oi, t_oj, t_lab, n_targets, ne_ci, ne_cj, ne_oi, ne_oj, ne_tab, ne_scale, n_ne,
    out_ei, out_ej, out_ex, out_ey, out_far, out_status, out_tau, out_steps,
    out_oi, out_oj, out_otau, occ_sum, occ_sq, out_ne,
):
    occ = np.zeros(max(n_targets, 1))
    for idx in range(count):
        traj = first + idx
        key = stream_key(seed, traj)
        ctr = 0
        i, j = si, sj
        t = 0.0
        inner_open = o_kind >= 0
        for q in range(n_targets):
            occ[q] = 0.0
        status = STATUS_NONEXIT
        steps = 0
        ex, ey, far = 0.0, 0.0, False
        ne = 0.0
        for q in range(n_ne):
            if ne_ci[q] == si and ne_cj[q] == sj:
                ne = 1.0
        while steps < max_steps:
            hold = -math.log(uniform(key, ctr)) * h
            ctr += 1
            if n_targets > 0:
                a = i - t_oi
                b = j - t_oj
                if a >= 0 and b >= 0 and a < t_lab.shape[0] and b < t_lab.shape[1]:
                    lab = t_lab[a, b]
                    if lab >= 0:
                        occ[lab] += hold
            t += hold
            ni, nj, ex, ey, far, ctr, trials = _draw_jump(key, ctr, cdf, dxs, dys, p_in, M, s, i, j)
            steps += 1
            if n_ne > 0:
                a = i - ne_oi
                b = j - ne_oj
                if a >= 0 and b >= 0 and a < ne_tab.shape[0] and b < ne_tab.shape[1]:
                    kt = ne_tab[a, b]
                else:
                    kt = _target_weight(ne_ci, ne_cj, s, i, j)
                ne += kt * trials * ne_scale
            if far:
                inside_o = False
                inside_d = False
            else:
                i, j = ni, nj
                inside_d = _in_domain(d_kind, d_f, d_oi, d_oj, d_grid, d_cx, d_cy, d_rr, i, j)
                inside_o = inner_open and _in_domain(o_kind, o_f, o_oi, o_oj, o_grid, o_cx, o_cy, o_rr, i, j)
            if inner_open and not inside_o:
                inner_open = False
                out_oi[traj - first] = NO_CELL if far else i
                out_oj[traj - first] = NO_CELL if far else j
                out_otau[traj - first] = t
            if not inside_d:
                status = STATUS_EXIT
                break
        k = traj - first
        if n_ne > 0:
            out_ne[k] = ne
        out_status[k] = status
        out_tau[k] = t
        out_steps[k] = steps
        out_far[k] = far
        if far:
            out_ei[k] = NO_CELL
            out_ej[k] = NO_CELL
            out_ex[k] = ex
            out_ey[k] = ey
        else:
            out_ei[k] = i
            out_ej[k] = j
            out_ex[k] = i + 0.5
            out_ey[k] = j + 0.5
        if inner_open:
            out_oi[k] = i
            out_oj[k] = j
            out_otau[k] = t
        for q in range(n_targets):
            occ_sum[q] += occ[q]
            occ_sq[q] += occ[q] * occ[q]


@njit(cache=True, nogil=True)
def _trajectory(seed, index, si, sj, cdf, dxs, dys, p_in, M, s, h, max_steps,
                d_kind, d_f, d_oi, d_oj, d_grid, d_cx, d_cy, d_rr, record):
    key = stream_key(seed, index)
    ctr = 0
    i, j = si, sj
    cells = np.empty((record, 2), dtype=np.int64)
    holds = np.empty(record)
    n = 0
    steps = 0
    while steps < max_steps:
        hold = -math.log(uniform(key, ctr)) * h
        ctr += 1
        if n < record:
            cells[n, 0] = i
            cells[n, 1] = j
            holds[n] = hold
            n += 1
        ni, nj, ex, ey, far, ctr, trials = _draw_jump(key, ctr, cdf, dxs, dys, p_in, M, s, i, j)
        steps += 1
        if far:
            return cells[:n], holds[:n], NO_CELL, NO_CELL, ex, ey, True, steps
        i, j = ni, nj
        if not _in_domain(d_kind, d_f, d_oi, d_oj, d_grid, d_cx, d_cy, d_rr, i, j):
            return cells[:n], holds[:n], i, j, i + 0.5, j + 0.5, False, steps
    return cells[:n], holds[:n], i, j, i + 0.5, j + 0.5, False, -1


@njit(cache=True, nogil=True)
def _jump_batch(seed, si, sj, count, cdf, dxs, dys, p_in, M, s, out_di, out_dj, out_far):
    for idx in range(count):
        key = stream_key(seed, idx)
        ni, nj, ex, ey, far, ctr, trials = _draw_jump(key, 0, cdf, dxs, dys, p_in, M, s, si, sj)
        out_far[idx] = far
        out_di[idx] = 0 if far else ni - si
        out_dj[idx] = 0 if far else nj - sj


def sample_jumps(model: "JumpChainModel", start, n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Displacements (in cells) of ``n`` independent jumps from ``start`` and a far-jump flag."""
    si, sj = (start.k, start.m) if isinstance(start, CellAddress) else (int(start[0]), int(start[1]))
    if not bool(carpet_mask(si, sj)):
        raise ValueError("start cell is not a carpet cell")
    cdf, dxs, dys, p_in, M = model.sampler_tables
    di = np.empty(n, dtype=np.int64)
    dj = np.empty(n, dtype=np.int64)
    far = np.empty(n, dtype=np.bool_)
    _jump_batch(int(seed) & (2**64 - 1), si, sj, int(n), cdf, dxs, dys, p_in, M, model.s, di, dj, far)
    return di, dj, far


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class GridDomain:
    """Union of cells of one coarse level, given as a boolean grid with an offset."""

    level: int
    oi: int
    oj: int
    grid: np.ndarray = field(compare=False)

    @classmethod
    def from_region(cls, region: Region) -> "GridDomain":
        return cls(region.cell_level, 0, 0, region.grid.copy())

    @classmethod
    def from_cells(cls, level: int, cells) -> "GridDomain":
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        lo = cells.min(axis=0)
        hi = cells.max(axis=0)
        g = np.zeros((hi[0] - lo[0] + 1, hi[1] - lo[1] + 1), dtype=bool)
        g[cells[:, 0] - lo[0], cells[:, 1] - lo[1]] = True
        return cls(level, int(lo[0]), int(lo[1]), g)

    def args(self, level: int):
        if level < self.level:
            raise ValueError("simulation level coarser than domain level")
        return (0, 3 ** (level - self.level), self.oi, self.oj, self.grid, 0.0, 0.0, 0.0)

    def contains(self, level: int, i, j) -> np.ndarray:
        f = 3 ** (level - self.level)
        a = np.floor_divide(np.asarray(i, dtype=np.int64), f) - self.oi
        b = np.floor_divide(np.asarray(j, dtype=np.int64), f) - self.oj
        ok = (a >= 0) & (b >= 0) & (a < self.grid.shape[0]) & (b < self.grid.shape[1])
        out = np.zeros(a.shape, dtype=bool)
        out[ok] = self.grid[a[ok], b[ok]]
        return out

    def cells(self, level: int) -> np.ndarray:
        """Carpet cells of ``level`` inside the domain, lexicographically ordered."""
        f = 3 ** (level - self.level)
        a, b = np.nonzero(self.grid)
        base = np.stack([a + self.oi, b + self.oj], axis=1).astype(np.int64) * f
        sub = np.stack(np.meshgrid(np.arange(f), np.arange(f), indexing="ij"), axis=-1).reshape(-1, 2)
        allc = (base[:, None, :] + sub[None, :, :]).reshape(-1, 2)
        allc = allc[carpet_mask(allc[:, 0], allc[:, 1])]
        return allc[np.lexsort((allc[:, 1], allc[:, 0]))]

    def extent(self) -> float:
        return max(self.grid.shape) * 3.0**-self.level

    def bbox(self, level: int) -> tuple[int, int, int, int]:
        """Inclusive index box of the level-``level`` cells covering the domain."""
        f = 3 ** (level - self.level)
        return (self.oi * f, self.oj * f, (self.oi + self.grid.shape[0]) * f - 1, (self.oj + self.grid.shape[1]) * f - 1)

    def key(self) -> str:
        a, b = np.nonzero(self.grid)
        return f"grid:{self.level}:" + ",".join(f"{x + self.oi}.{y + self.oj}" for x, y in zip(a, b))


@dataclass(frozen=True)
class BallDomain:
    """Carpet cells whose centres lie in the open Euclidean ball ``B(c, r)``."""

    cx: float
    cy: float
    r: float

    def args(self, level: int):
        u = 3.0**level
        return (1, 1, 0, 0, np.zeros((1, 1), dtype=bool), self.cx * u, self.cy * u, (self.r * u) ** 2)

    def contains(self, level: int, i, j) -> np.ndarray:
        u = 3.0**level
        dx = np.asarray(i) + 0.5 - self.cx * u
        dy = np.asarray(j) + 0.5 - self.cy * u
        return dx * dx + dy * dy < (self.r * u) ** 2

    def cells(self, level: int) -> np.ndarray:
        u = 3**level
        lo_i = int(math.floor((self.cx - self.r) * u)) - 1
        hi_i = int(math.ceil((self.cx + self.r) * u)) + 1
        lo_j = int(math.floor((self.cy - self.r) * u)) - 1
        hi_j = int(math.ceil((self.cy + self.r) * u)) + 1
        I, J = np.meshgrid(np.arange(lo_i, hi_i + 1), np.arange(lo_j, hi_j + 1), indexing="ij")
        I, J = I.ravel().astype(np.int64), J.ravel().astype(np.int64)
        keep = self.contains(level, I, J) & carpet_mask(I, J)
        out = np.stack([I[keep], J[keep]], axis=1)
        return out[np.lexsort((out[:, 1], out[:, 0]))]

    def extent(self) -> float:
        return 2.0 * self.r

    def bbox(self, level: int) -> tuple[int, int, int, int]:
        u = 3**level
        return (int(math.floor((self.cx - self.r) * u)) - 1, int(math.floor((self.cy - self.r) * u)) - 1,
                int(math.ceil((self.cx + self.r) * u)) + 1, int(math.ceil((self.cy + self.r) * u)) + 1)

    def key(self) -> str:
        return f"ball:{self.cx!r}:{self.cy!r}:{self.r!r}"


def as_domain(d):
    if isinstance(d, (GridDomain, BallDomain)):
        return d
    if isinstance(d, Region):
        return GridDomain.from_region(d)
    raise TypeError(f"cannot use {type(d).__name__} as a domain")


_NO_DOMAIN = (-1, 1, 0, 0, np.zeros((1, 1), dtype=bool), 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# total jump rate on the infinite carpet


def _blocks_sum(x: float, y: float, bi: np.ndarray, bj: np.ndarray, c: int, s: float, var: float) -> float:
    """Approximate ``sum |p - y|^-s`` over carpet cells of scale-``c`` blocks."""
    keep = carpet_mask(bi, bj)
    if not keep.any():
        return 0.0
    b = 3.0**c
    zx = (bi[keep] + 0.5) * b - x
    zy = (bj[keep] + 0.5) * b - y
    r2 = zx * zx + zy * zy
    terms = r2 ** (-s / 2) * (1.0 + 0.5 * var * s * s / r2)
    return float(8.0**c * np.sum(terms))


def total_rate(i: int, j: int, s: float, window: int = 9, tol: float = 1e-14) -> float:
    """``Z = sum_{y in carpet, y != x} |x - y|^-s`` for the cell with indices ``(i, j)``.

    Cells within ``window`` of ``x`` are summed exactly; beyond, blocks of
    ``3^c`` cells at distance at least ``window * 3^c`` are summed with a
    second-order expansion about their centre.  Once the window sits at the
    origin the per-scale contributions are geometric with ratio ``3^(d - s)``
    and the tail is added in closed form.
    """
    if s <= 2.0:
        raise ValueError("kernel exponent must exceed 2")
    G = window
    x, y = i + 0.5, j + 0.5
    # exact near sum over cells
    I, J = np.meshgrid(np.arange(i - G, i + G + 1), np.arange(j - G, j + G + 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    keep = carpet_mask(I, J) & ~((I == i) & (J == j))
    dx, dy = I[keep] - i, J[keep] - j
    total = float(np.sum((dx * dx + dy * dy).astype(np.float64) ** (-s / 2)))
    var = 0.0  # per-coordinate variance of cell centres inside a scale-(c-1) block
    prev_i, prev_j = i, j
    ratio = 3.0 ** (math.log(8) / math.log(3) - s)
    c = 1
    while True:
        Xi, Xj = i // 3**c, j // 3**c
        # scale-(c-1) sub-blocks of the scale-c window, excluding the previous window
        lo_i, lo_j = (Xi - G) * 3, (Xj - G) * 3
        BI, BJ = np.meshgrid(np.arange(lo_i, lo_i + 3 * (2 * G + 1)), np.arange(lo_j, lo_j + 3 * (2 * G + 1)), indexing="ij")
        BI, BJ = BI.ravel(), BJ.ravel()
        inner = (np.abs(BI - prev_i) <= G) & (np.abs(BJ - prev_j) <= G)
        part = _blocks_sum(x, y, BI[~inner], BJ[~inner], c - 1, s, var)
        total += part
        var += 0.75 * 9.0 ** (c - 1)
        if part < tol * total and c >= 6:
            break
        if 3**c >= 3000 * (max(abs(i), abs(j)) + 1) and c >= 6:
            # the offset of x is negligible at this scale, so further scales
            # repeat the same annulus scaled by 3 with 8 times the mass
            total += part * ratio / (1.0 - ratio)
            break
        prev_i, prev_j = Xi, Xj
        c += 1
        if c > 38:
            raise RuntimeError("total rate failed to converge")
    return total


# ---------------------------------------------------------------------------
# models


def _inner_table(s: float, M: int):
    d = np.arange(-M, M + 1)
    DX, DY = np.meshgrid(d, d, indexing="ij")
    DX, DY = DX.ravel(), DY.ravel()
    keep = (DX != 0) | (DY != 0)
    DX, DY = DX[keep].astype(np.int64), DY[keep].astype(np.int64)
    w = (DX * DX + DY * DY).astype(np.float64) ** (-s / 2)
    return np.cumsum(w), DX, DY, float(w.sum())


@dataclass(frozen=True)
class JumpChainModel:
    """Level-``n`` jump chain with kernel ``|x - y|^-d_alpha`` on carpet cells.

    ``bounding`` restricts the explicitly enumerated states (used by the
    linear-algebra oracle); the sampler itself always jumps over the whole
    carpet.  ``halo`` is the thickness in cells of the explicit absorbing rim.
    """

    level: int
    params: FractalParams
    bounding: Region | None = None
    halo: int = 1
    t0: float = 1.0
    mode: str = "absorb"

    @property
    def s(self) -> float:
        return self.params.d_alpha

    @property
    def hold_mean(self) -> float:
        return self.t0 * 3.0 ** (-self.level * self.params.jump_index)

    @cached_property
    def sampler_tables(self):
        if self.s <= 2.0:
            raise ValueError(f"alpha={self.params.alpha} gives kernel exponent {self.s:.4f} <= 2; sampler needs > 2")
        cdf, dx, dy, w_in = _inner_table(self.s, INNER_RADIUS)
        z_out = 8.0 * INNER_RADIUS ** (2.0 - self.s) / (self.s - 2.0)
        return cdf, dx, dy, w_in / (w_in + z_out), float(INNER_RADIUS)

    @property
    def envelope_mass(self) -> float:
        """Total mass of the rejection envelope, in units of ``|cell displacement|^-s``."""
        cdf = self.sampler_tables[0]
        return float(cdf[-1]) + 8.0 * INNER_RADIUS ** (2.0 - self.s) / (self.s - 2.0)

    def key(self) -> str:
        b = self.bounding.fingerprint() if self.bounding is not None else "-"
        return f"chain:{self.level}:{self.params.alpha!r}:{self.params.dw!r}:{self.t0!r}:{self.halo}:{self.mode}:{b}"

    @cached_property
    def explicit(self) -> "ExplicitKernel":
        if self.bounding is None:
            raise ValueError("explicit kernel needs a bounding region")
        return ExplicitKernel.build(self)

    def kernel_weight(self, a, b) -> np.ndarray:
        """Unnormalised jump weight ``|c_a - c_b|^-d_alpha * mu(cell)`` in physical units."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        dist = np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1]) * 3.0**-self.level
        return dist ** (-self.s) * 8.0**-self.level


@dataclass
class ExplicitKernel:
    """Enumerated states of a model: bounding cells plus absorbing halo and a far sink."""

    states: np.ndarray  # (N, 2) level-n cell indices
    halo_mask: np.ndarray
    rates: np.ndarray  # total rate Z over the whole carpet, cell units
    P: np.ndarray  # (N, N) transition matrix among explicit states
    far: np.ndarray  # (N,) mass leaving the explicit states
    index: dict

    @property
    def n_core(self) -> int:
        return int(np.count_nonzero(~self.halo_mask))

    def truncated_mass(self) -> np.ndarray:
        """Per-state kernel mass falling outside the explicit states (core states only)."""
        return self.far[~self.halo_mask]

    @classmethod
    def from_states(cls, states, halo_mask, s: float, mode: str = "absorb") -> "ExplicitKernel":
        states = np.asarray(states, dtype=np.int64).reshape(-1, 2)
        N = len(states)
        if N > 20000:
            raise ValueError("explicit kernel limited to 20000 states")
        dx = states[:, 0][:, None] - states[:, 0][None, :]
        dy = states[:, 1][:, None] - states[:, 1][None, :]
        d2 = (dx * dx + dy * dy).astype(np.float64)
        np.fill_diagonal(d2, np.inf)
        W = d2 ** (-s / 2)
        if mode == "renormalize":
            rates = W.sum(axis=1)
        elif mode == "absorb":
            rates = np.array([total_rate(int(a), int(b), s) for a, b in states])
        else:
            raise ValueError(f"unknown truncation mode {mode!r}")
        P = W / rates[:, None]
        far = np.clip(1.0 - P.sum(axis=1), 0.0, None)
        index = {(int(a), int(b)): k for k, (a, b) in enumerate(states.tolist())}
        return cls(states, np.asarray(halo_mask, dtype=bool), rates, P, far, index)

    @classmethod
    def build(cls, model: JumpChainModel) -> "ExplicitKernel":
        n = model.level
        core = GridDomain.from_region(model.bounding).cells(n)
        if len(core) > MAX_STATES:
            raise ValueError("level too fine")
        h = model.halo
        core_set = {tuple(c) for c in core.tolist()}
        ring = set()
        for ci, cj in core_set:
            for a in range(ci - h, ci + h + 1):
                for b in range(cj - h, cj + h + 1):
                    if (a, b) not in core_set:
                        ring.add((a, b))
        ring = np.array(sorted(ring), dtype=np.int64).reshape(-1, 2)
        ring = ring[carpet_mask(ring[:, 0], ring[:, 1])] if len(ring) else ring
        states = np.concatenate([core, ring]) if len(ring) else core
        halo_mask = np.zeros(len(states), dtype=bool)
        halo_mask[len(core):] = True
        return cls.from_states(states, halo_mask, model.s, model.mode)


def build_jump_chain(bounding_region: Region | None, level: int, params: FractalParams, *, halo: int = 1,
                     t0: float = 1.0, mode: str = "absorb") -> JumpChainModel:
    if level > 10:
        raise ValueError("level too fine")
    if bounding_region is not None:
        if level < bounding_region.cell_level:
            raise ValueError("level must be at least the bounding region's cell level")
        if bounding_region.n_states(level) > MAX_STATES:
            raise ValueError("level too fine")
    model = JumpChainModel(level, params, bounding_region, halo, t0, mode)
    model.sampler_tables  # validates alpha for the sampler
    return model


def calibrate_t0(params: FractalParams, n_samples: int = 20000, seed: int = 0) -> float:
    """``t0`` making the expected exit time of the unit cell from its corner-most level-4 cell equal 1."""
    from .geometry import unit_region

    model = build_jump_chain(None, 4, params)
    res = simulate(model, unit_region(), (0, 0), n_samples, seed)
    return 1.0 / float(res.tau.mean())


# ---------------------------------------------------------------------------
# Monte Carlo runs


@dataclass
class RunResult:
    level: int
    seed: int
    n: int
    exit_i: np.ndarray
    exit_j: np.ndarray
    exit_x: np.ndarray  # unit coordinates of the landing point
    exit_y: np.ndarray
    far: np.ndarray
    status: np.ndarray
    tau: np.ndarray
    steps: np.ndarray
    inner_i: np.ndarray | None
    inner_j: np.ndarray | None
    inner_tau: np.ndarray | None
    occ_sum: np.ndarray
    occ_sq: np.ndarray
    visits: np.ndarray | None = None  # next-event estimate of visits to ``green_target`` per trajectory

    @property
    def nonexit(self) -> int:
        return int(np.count_nonzero(self.status == STATUS_NONEXIT))


def _target_labels(targets, level):
    if not targets:
        return 0, 0, np.full((1, 1), -1, dtype=np.int32), 0
    groups = [np.asarray(t, dtype=np.int64).reshape(-1, 2) for t in targets]
    allc = np.concatenate(groups)
    lo = allc.min(axis=0)
    hi = allc.max(axis=0)
    lab = np.full((hi[0] - lo[0] + 1, hi[1] - lo[1] + 1), -1, dtype=np.int32)
    for g, cells in enumerate(groups):
        sub = lab[cells[:, 0] - lo[0], cells[:, 1] - lo[1]]
        if np.any(sub >= 0):
            raise ValueError("target groups overlap")
        lab[cells[:, 0] - lo[0], cells[:, 1] - lo[1]] = g
    return int(lo[0]), int(lo[1]), lab, len(groups)


def default_threads() -> int:
    return os.cpu_count() or 1


def simulate(model: JumpChainModel, domain, start, n_samples: int, seed: int, *, inner=None,
             targets=None, green_target=None, threads: int | None = None, chunk: int = DEFAULT_CHUNK,
             max_steps: int = STEP_CAP) -> RunResult:
    """Run ``n_samples`` independent trajectories from ``start`` until they leave ``domain``.

    ``inner`` is an optional sub-domain whose first exit is also recorded;
    ``targets`` is a list of cell groups whose occupation times are
    accumulated.  ``green_target`` is a group of cells inside the domain
    for which the expected number of visits before the exit is estimated
    with the next-event estimator ``1{x_0 in T} + sum_k P(x_k, T)``, where
    ``P(x_k, T)`` is itself estimated without bias by ``K(x_k, T) * trials
    / envelope mass`` from the rejection sampler's proposal count.  Output is
    identical for any ``threads`` value.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    n = model.level
    dom = as_domain(domain)
    si, sj = (start.k, start.m) if isinstance(start, CellAddress) else (int(start[0]), int(start[1]))
    if isinstance(start, CellAddress) and start.level != n:
        raise ValueError("start cell must be at the model level")
    if not dom.contains(n, np.array([si]), np.array([sj]))[0]:
        raise ValueError("start cell outside the domain")
    if not bool(carpet_mask(si, sj)):
        raise ValueError("start cell is not a carpet cell")
    dargs = dom.args(n)
    oargs = as_domain(inner).args(n) if inner is not None else _NO_DOMAIN
    t_oi, t_oj, t_lab, n_t = _target_labels(targets, n)
    cdf, dxs, dys, p_in, M = model.sampler_tables
    N = int(n_samples)
    if green_target is not None:
        gt = np.asarray(green_target, dtype=np.int64).reshape(-1, 2)
        if not dom.contains(n, gt[:, 0], gt[:, 1]).all() or not carpet_mask(gt[:, 0], gt[:, 1]).all():
            raise ValueError("green target must consist of carpet cells inside the domain")
        ne_ci, ne_cj, n_ne = gt[:, 0].copy(), gt[:, 1].copy(), len(gt)
        box = dom.bbox(n)
        ne_oi, ne_oj = box[0], box[1]
        ne_tab = target_table(gt, model.s, box)
        visits = np.zeros(N)
    else:
        ne_ci = ne_cj = np.zeros(1, dtype=np.int64)
        ne_oi = ne_oj = 0
        ne_tab = np.zeros((1, 1))
        n_ne = 0
        visits = np.zeros(1)
    ei = np.empty(N, dtype=np.int64)
    ej = np.empty(N, dtype=np.int64)
    ex = np.empty(N)
    ey = np.empty(N)
    far = np.empty(N, dtype=np.bool_)
    st = np.empty(N, dtype=np.uint8)
    tau = np.empty(N)
    steps = np.empty(N, dtype=np.int64)
    oi = np.full(N, NO_CELL, dtype=np.int64)
    oj = np.full(N, NO_CELL, dtype=np.int64)
    ot = np.zeros(N)
    starts = list(range(0, N, chunk))
    occ_sum = np.zeros((len(starts), max(n_t, 1)))
    occ_sq = np.zeros((len(starts), max(n_t, 1)))
    seed = int(seed) & (2**64 - 1)

    def work(c):
        a = starts[c]
        b = min(a + chunk, N)
        _run_chunk(
            seed, a, b - a, si, sj, cdf, dxs, dys, p_in, M, model.s, model.hold_mean, max_steps,
            *dargs, *oargs, t_oi, t_oj, t_lab, n_t, ne_ci, ne_cj, ne_oi, ne_oj, ne_tab, 1.0 / model.envelope_mass, n_ne,
            ei[a:b], ej[a:b], ex[a:b], ey[a:b], far[a:b], st[a:b], tau[a:b], steps[a:b],
            oi[a:b], oj[a:b], ot[a:b], occ_sum[c], occ_sq[c], visits[a:b] if n_ne else visits,
        )

    threads = threads or default_threads()
    if threads <= 1 or len(starts) == 1:
        for c in range(len(starts)):
            work(c)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(starts))))
    unit = 3.0**-n
    return RunResult(
        level=n, seed=seed, n=N, exit_i=ei, exit_j=ej, exit_x=ex * unit, exit_y=ey * unit, far=far,
        status=st, tau=tau, steps=steps,
        inner_i=oi if inner is not None else None, inner_j=oj if inner is not None else None,
        inner_tau=ot if inner is not None else None,
        occ_sum=occ_sum.sum(axis=0)[:n_t], occ_sq=occ_sq.sum(axis=0)[:n_t],
        visits=visits if n_ne else None,
    )


@dataclass
class Trajectory:
    states: list  # CellAddress inside the unit square, else (i, j) index pairs
    holding_times: np.ndarray
    exit_state: object
    exit_index: int
    far: bool = False

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "cell_ix", "cell_iy", "holding_time"])
            for k, (c, hld) in enumerate(zip(self.states, self.holding_times)):
                ij = (c.k, c.m) if isinstance(c, CellAddress) else c
                w.writerow([k, ij[0], ij[1], repr(float(hld))])


def _as_cell(level: int, i: int, j: int):
    side = 3**level
    if 0 <= i < side and 0 <= j < side:
        return CellAddress(level, int(i), int(j))
    return (int(i), int(j))


def _rng_pair(rng) -> tuple[int, int]:
    if isinstance(rng, tuple):
        return int(rng[0]), int(rng[1])
    return int(rng), 0


def sample_exit(model: JumpChainModel, D, start, rng, *, record: int = 100000, max_steps: int = STEP_CAP) -> Trajectory:
    """One trajectory from ``start`` until the first state outside ``D``.

    ``rng`` is a seed or a ``(seed, trajectory_index)`` pair.
    """
    dom = as_domain(D)
    n = model.level
    si, sj = (start.k, start.m) if isinstance(start, CellAddress) else start
    if not dom.contains(n, np.array([si]), np.array([sj]))[0]:
        raise ValueError("start cell outside the domain")
    seed, index = _rng_pair(rng)
    cdf, dxs, dys, p_in, M = model.sampler_tables
    cells, holds, ei, ej, ex, ey, far, steps = _trajectory(
        seed & (2**64 - 1), index, si, sj, cdf, dxs, dys, p_in, M, model.s, model.hold_mean, max_steps,
        *dom.args(n), record,
    )
    if steps < 0:
        raise RuntimeError("non-exit")
    states = [_as_cell(n, a, b) for a, b in cells.tolist()]
    exit_state = ("far", ex * 3.0**-n, ey * 3.0**-n) if far else _as_cell(n, ei, ej)
    return Trajectory(states, holds, exit_state, int(steps), bool(far))


# ---------------------------------------------------------------------------
# subordinator


def sample_subordinator_increment(t: float, alpha_half: float, rng, size=None):
    """One-sided ``alpha_half``-stable subordinator at time ``t``: ``E exp(-lam S) = exp(-t lam^alpha_half)``.

    Uses the uniform-angle / exponential representation; ``rng`` is a numpy
    Generator or an integer seed.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if not 0.0 < alpha_half < 1.0:
        raise ValueError("alpha_half must lie in (0, 1)")
    if not isinstance(rng, np.random.Generator):
        rng = generator(int(rng))
    a = alpha_half
    v = rng.random(size)
    e = rng.standard_exponential(size)
    # keep the angle strictly inside (0, 1)
    v = np.where(v <= 0.0, 0.5 / 2**53, v)
    pv = np.pi * v
    s = np.sin(a * pv) / np.sin(pv) ** (1.0 / a) * (np.sin((1.0 - a) * pv) / e) ** ((1.0 - a) / a)
    return t ** (1.0 / a) * s


# ---------------------------------------------------------------------------
# subordinated nearest-neighbour walk


@njit(cache=True, nogil=True)
def _sibuya_logsf(k, a, lg):
    return math.lgamma(k + 1.0 - a) - lg - math.lgamma(k + 1.0)


@njit(cache=True, nogil=True)
def _sibuya(u, a, kstar):
    """Smallest ``k >= 1`` with survival ``P(K > k) <= u``; ``kstar + 1`` if beyond ``kstar``."""
    lg = math.lgamma(1.0 - a)
    lu = math.log(u)
    if _sibuya_logsf(1.0, a, lg) <= lu:
        return 1
    if _sibuya_logsf(float(kstar), a, lg) > lu:
        return kstar + 1
    lo, hi = 1, kstar  # logsf(lo) > lu >= logsf(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _sibuya_logsf(float(mid), a, lg) > lu:
            lo = mid
        else:
            hi = mid
    return hi


@njit(cache=True, nogil=True)
def _walk_step(key, ctr, i, j):
    ni = np.empty(4, dtype=np.int64)
    nj = np.empty(4, dtype=np.int64)
    m = 0
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        if _in_carpet(i + di, j + dj):
            ni[m] = i + di
            nj[m] = j + dj
            m += 1
    u = uniform(key, ctr)
    c = int(u * m)
    if c >= m:
        c = m - 1
    return ni[c], nj[c], ctr + 1


@njit(cache=True, nogil=True)
def _walk_chunk(seed, first, count, si, sj, a, kstar, h, dt, max_events,
                d_kind, d_f, d_oi, d_oj, d_grid, d_cx, d_cy, d_rr,
                out_ei, out_ej, out_far, out_status, out_tau, out_steps):
    for idx in range(count):
        traj = first + idx
        key = stream_key(seed, traj)
        ctr = 0
        i, j = si, sj
        t = 0.0
        next_obs = dt
        status = STATUS_NONEXIT
        far = False
        events = 0
        while events < max_events:
            t += -math.log(uniform(key, ctr)) * h
            ctr += 1
            events += 1
            k = _sibuya(uniform(key, ctr), a, kstar)
            ctr += 1
            if k > kstar:
                far = True
                status = STATUS_EXIT
                break
            for _ in range(k):
                i, j, ctr = _walk_step(key, ctr, i, j)
            if dt > 0.0:
                # positions are only inspected on the observation grid
                if t < next_obs:
                    continue
                while next_obs <= t:
                    next_obs += dt
            if not _in_domain(d_kind, d_f, d_oi, d_oj, d_grid, d_cx, d_cy, d_rr, i, j):
                status = STATUS_EXIT
                break
        o = traj - first
        out_status[o] = status
        out_tau[o] = t
        out_steps[o] = events
        out_far[o] = far
        out_ei[o] = NO_CELL if far else i
        out_ej[o] = NO_CELL if far else j


def walk_cutoff(domain, level: int, dw: float, factor: float = 4.0) -> int:
    """Largest walk-step count simulated in one subordinator event."""
    ext = as_domain(domain).extent() * 3**level
    return int(min((factor * ext) ** dw, 10**8))


def sample_subordinated_walk_exit(D, level: int, start, t_grid, rng, *, params: FractalParams,
                                  n_samples: int = 1, kstar: int | None = None, t0: float = 1.0,
                                  max_events: int = STEP_CAP, threads: int | None = None,
                                  chunk: int = DEFAULT_CHUNK) -> RunResult:
    """Exits of the nearest-neighbour walk time-changed by an ``alpha/2``-stable subordinator.

    Subordinator jumps hit the walk clock at rate ``tau_w^-(alpha/2)`` with
    ``tau_w = 3^(-n dw)``; each moves the walk by a Sibuya(``alpha/2``)
    number of steps.  Events longer than ``kstar`` steps are counted as far
    exits.  ``t_grid`` is an observation spacing (``None`` or 0 observes
    continuously).
    """
    dom = as_domain(D)
    si, sj = (start.k, start.m) if isinstance(start, CellAddress) else (int(start[0]), int(start[1]))
    if not dom.contains(level, np.array([si]), np.array([sj]))[0]:
        raise ValueError("start cell outside the domain")
    a = params.alpha / 2.0
    if kstar is None:
        kstar = walk_cutoff(dom, level, params.dw)
    h = t0 * 3.0 ** (-level * params.jump_index)
    dt = float(t_grid or 0.0)
    seed, _ = _rng_pair(rng)
    N = int(n_samples)
    ei = np.empty(N, dtype=np.int64)
    ej = np.empty(N, dtype=np.int64)
    far = np.empty(N, dtype=np.bool_)
    st = np.empty(N, dtype=np.uint8)
    tau = np.empty(N)
    steps = np.empty(N, dtype=np.int64)
    starts = list(range(0, N, chunk))
    dargs = dom.args(level)

    def work(c):
        x = starts[c]
        y = min(x + chunk, N)
        _walk_chunk(seed & (2**64 - 1), x, y - x, si, sj, a, kstar, h, dt, max_events, *dargs,
                    ei[x:y], ej[x:y], far[x:y], st[x:y], tau[x:y], steps[x:y])

    threads = threads or default_threads()
    if threads <= 1:
        for c in range(len(starts)):
            work(c)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(starts))))
    if np.any(st == STATUS_NONEXIT):
        raise RuntimeError("non-exit")
    unit = 3.0**-level
    ex = np.where(far, np.nan, (ei + 0.5) * unit)
    ey = np.where(far, np.nan, (ej + 0.5) * unit)
    return RunResult(level, seed, N, ei, ej, ex, ey, far, st, tau, steps, None, None, None,
                     np.zeros(0), np.zeros(0))
