from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carpet_sim.geometry import (
    CellAddress,
    FractalParams,
    Point,
    build_region,
    cell_measure,
    cells_at_level,
    dist_to_boundary,
    in_carpet,
    inner_fatness_point,
    layer_decomposition,
    load_region,
    outer_fatness_measure,
    unit_region,
)


def test_in_carpet_examples():
    assert not in_carpet(Point.from_fractions(Fraction(4, 9), Fraction(4, 9)), 2)
    assert in_carpet(Point.from_fractions(0, 0, 5), 5)
    assert in_carpet(Point.from_fractions(Fraction(1, 3), Fraction(1, 3), 3), 3)


def test_in_carpet_requires_resolution():
    with pytest.raises(ValueError, match="insufficient resolution"):
        in_carpet(Point.from_fractions(Fraction(1, 3), 0), 3)


@pytest.mark.parametrize("n,count", [(0, 1), (1, 8), (3, 512)])
def test_cells_at_level_counts(n, count):
    assert len(cells_at_level(n)) == count


def test_cells_at_level_cap():
    with pytest.raises(ValueError, match="enumeration cap exceeded"):
        cells_at_level(11)


@pytest.mark.parametrize("n", range(0, 6))
def test_cell_digits_avoid_centre_and_measure_sums_to_one(n):
    cells = cells_at_level(n)
    assert all((1, 1) not in c.digits for c in cells)
    assert len(cells) == 8**n
    assert math.isclose(sum(cell_measure(n) for _ in cells), 1.0, rel_tol=1e-12)


def test_cell_measure_values():
    assert cell_measure(0) == 1.0
    assert cell_measure(1) == 0.125
    assert cell_measure(3) == 1 / 512


def test_fractal_params():
    p = FractalParams(0.5)
    assert p.d == pytest.approx(math.log(8) / math.log(3))
    assert p.d_alpha == p.d + 0.5 * p.dw / 2
    assert p.bhp_threshold == pytest.approx(2 * (p.d - 1) / p.dw)
    flags = p.hypothesis_flags()
    assert all(flags.values())
    assert not FractalParams(0.9).hypothesis_flags()["alpha_lt_2(d-1)/dw"]
    with pytest.raises(ValueError):
        FractalParams(2.0)


def test_region_radii():
    u = unit_region()
    assert (u.R1, u.R2, u.R0) == (math.inf, 1.0, pytest.approx(1 / 3))
    adj = build_region([CellAddress(1, 0, 0), CellAddress(1, 1, 0)])
    assert adj.R1 == math.inf and adj.R0 == pytest.approx(1 / 9)
    opp = build_region([CellAddress(1, 0, 0), CellAddress(1, 2, 2)])
    assert opp.R1 == pytest.approx(math.sqrt(2) / 3)
    assert opp.R0 == pytest.approx(1 / 9)


def test_region_errors():
    with pytest.raises(ValueError):
        build_region([])
    with pytest.raises(ValueError):
        build_region([CellAddress(1, 0, 0), CellAddress(2, 0, 0)])
    with pytest.raises(ValueError):
        build_region([CellAddress(1, 1, 1)])


def test_region_round_trip(tmp_path):
    D = build_region([CellAddress(1, 0, 0), CellAddress(1, 1, 0), CellAddress(1, 0, 1)])
    path = tmp_path / "ell.json"
    D.save(path)
    assert load_region(path) == D
    assert D.describe()["cell_level"] == 1


def test_dist_to_boundary_unit_cell():
    u = unit_region()
    # nearest outer edge; (1/6, 1/6) itself is not a ternary rational
    assert dist_to_boundary(Point.from_fractions(Fraction(2, 9), Fraction(2, 9)), u) == pytest.approx(2 / 9)
    with pytest.raises(ValueError, match="point outside region"):
        dist_to_boundary(Point.from_fractions(0, Fraction(1, 3)), u)


def _brute_boundary_dist(D, p: Point) -> float:
    best = math.inf
    for x0, y0, x1, y1 in D.boundary_pieces:
        s = 3.0**-D.cell_level
        dx = max(0.0, x0 * s - p.x, p.x - x1 * s)
        dy = max(0.0, y0 * s - p.y, p.y - y1 * s)
        best = min(best, math.hypot(dx, dy))
    return best


@settings(max_examples=60)
@given(st.integers(1, 80), st.integers(1, 26))
def test_dist_to_boundary_matches_brute_force(ix, iy):
    D = build_region([CellAddress(1, 0, 0), CellAddress(1, 1, 0)])
    p = Point(4, ix, iy)
    if not D.contains_point(p):
        return
    assert dist_to_boundary(p, D) == pytest.approx(_brute_boundary_dist(D, p), rel=1e-12, abs=1e-15)


def test_shared_face_is_not_boundary():
    D = build_region([CellAddress(1, 0, 0), CellAddress(1, 1, 0)])
    # inward from the shared face midline, the nearest true boundary is the bottom edge
    p = Point.from_fractions(Fraction(1, 3) - Fraction(1, 27), Fraction(1, 9))
    assert dist_to_boundary(p, D) == pytest.approx(1 / 9)


def _witness_ok(D, Q, r, A, theta=Fraction(1, 9)):
    assert A.dist(Q) < float(r)
    assert dist_to_boundary(A, D) >= float(theta * r) - 1e-15
    assert A.dist(Q) + float(theta * r) <= float(r) + 1e-15


@pytest.mark.parametrize("q,r", [((0, 0), Fraction(1, 3)), ((0, 0), Fraction(1, 6)), ((Fraction(4, 9), 0), Fraction(1, 9))])
def test_inner_fatness_point(q, r):
    D = unit_region()
    Q = Point.from_fractions(*q)
    _witness_ok(D, Q, r, inner_fatness_point(Q, r, D))


@settings(max_examples=25)
@given(st.sampled_from([(0, 0), (1, 0), (Fraction(1, 3), 1), (0, Fraction(2, 9)), (Fraction(2, 3), Fraction(1, 3))]),
       st.integers(1, 5))
def test_inner_fatness_never_fails_on_ell(q, k):
    D = build_region([CellAddress(1, 0, 0), CellAddress(1, 1, 0), CellAddress(1, 0, 1)])
    Q = Point.from_fractions(q[0] * Fraction(2, 3), q[1] * Fraction(2, 3))
    if not D.is_boundary_point(Q):
        return
    r = Fraction(1, 9 * 3**k) * 2
    if not float(r) < D.R0:
        return
    _witness_ok(D, Q, r, inner_fatness_point(Q, r, D))


def test_outer_fatness_scales_like_r_to_d():
    D = unit_region()
    Q = Point.from_fractions(0, 0)
    d = FractalParams(0.5).d
    vals = [outer_fatness_measure(Q, Fraction(1, 3**k), D) / 3.0 ** (-k * d) for k in range(2, 6)]
    assert min(vals) > 0
    assert max(vals) / min(vals) < 3


def test_layer_rings_disjoint_and_far_from_boundary():
    D = unit_region()
    Q = Point.from_fractions(0, 0)
    L = layer_decomposition(D, Q, Fraction(1, 27), 4)
    for k in range(4):
        ring = L.ring(k)
        assert len({tuple(c) for c in ring.tolist()}) == len(ring)
        assert L.min_delta[k] >= 3.0 ** -(L.base_level + k + 1) - 1e-15
    assert L.bound_holds()


def test_layer_decomposition_errors():
    D = unit_region()
    Q = Point.from_fractions(0, 0)
    with pytest.raises(ValueError):
        layer_decomposition(D, Q, Fraction(1, 27), 9)
    with pytest.raises(ValueError):
        layer_decomposition(D, Point.from_fractions(Fraction(1, 6), Fraction(1, 6)), Fraction(1, 27), 3)


def test_layer_csv(tmp_path):
    L = layer_decomposition(unit_region(), Point.from_fractions(0, 0), Fraction(1, 27), 3)
    path = tmp_path / "layers.csv"
    L.write_csv(path)
    assert path.read_text().splitlines()[0] == "k,cell_count,min_delta,ring_measure"


@settings(max_examples=50)
@given(st.integers(0, 5), st.data())
def test_cell_children_partition_measure(level, data):
    cells = sorted(cells_at_level(level))
    c = data.draw(st.sampled_from(cells))
    kids = c.children()
    assert len(kids) == 8
    assert all(k.ancestor(level) == c for k in kids)
    assert np.isclose(8 * cell_measure(level + 1), cell_measure(level))
