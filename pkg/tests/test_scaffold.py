from __future__ import annotations

import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carpet_sim.geometry import Point, in_carpet, unit_region
from carpet_sim.scaffold import (
    HalfPoint,
    build_bhp_geometry,
    half_in_carpet,
    le_sum_sqrt2,
    min_rect_dist2,
    verify_bhp_geometry,
)
from carpet_sim.geometry import rect_dist2


@pytest.fixture(scope="module")
def corner_geometry():
    return build_bhp_geometry(unit_region(), Point.from_fractions(0, 0), Fraction(1, 9))


def test_corner_construction(corner_geometry):
    g = corner_geometry
    assert g.N == 2
    assert g.r_tilde == Fraction(1, 3**5)
    assert 18 <= g.n0 <= 54
    assert all(g.checks.values()), g.checks


def test_edge_construction():
    g = build_bhp_geometry(unit_region(), Point.from_fractions(Fraction(4, 9), 0), Fraction(1, 27))
    assert 18 <= g.n0 <= 54
    assert all(g.checks.values())
    # vertex offsets are sqrt(2) times the edge offsets
    rt = g.rt_half
    for s, a, v in zip(g.S, g.A_i, g.vertex):
        d2 = (s.X - a.X) ** 2 + (s.Y - a.Y) ** 2
        assert d2 == (2 if v else 1) * (rt // 3) ** 2


def test_construction_is_deterministic(corner_geometry):
    again = build_bhp_geometry(unit_region(), Point.from_fractions(0, 0), Fraction(1, 9))
    assert again.T == corner_geometry.T
    assert again.A == corner_geometry.A
    assert again.boundary_cells == corner_geometry.boundary_cells


def test_verification_is_repeatable(corner_geometry):
    assert verify_bhp_geometry(corner_geometry) == corner_geometry.checks


def test_radius_precondition():
    with pytest.raises(ValueError):
        build_bhp_geometry(unit_region(), Point.from_fractions(0, 0), Fraction(1, 6))


def test_delta_cells_lie_outside_omega(corner_geometry):
    g = corner_geometry
    lvl = g.N + 4
    I, J = np.meshgrid(np.arange(3**lvl), np.arange(3**lvl), indexing="ij")
    I, J = I.ravel(), J.ravel()
    inside = g.in_delta(lvl, I, J)
    assert inside.any()
    assert not g.Omega.contains_cells(lvl, I[inside], J[inside]).any()


def test_describe_is_json(corner_geometry):
    d = json.loads(json.dumps(corner_geometry.describe()))
    assert d["n0"] == corner_geometry.n0


@given(st.integers(0, 10**6), st.integers(0, 300), st.integers(0, 300))
def test_le_sum_sqrt2_matches_floats(d2, a, b):
    lhs, rhs = math.sqrt(d2), a + b * math.sqrt(2)
    if abs(lhs - rhs) > 1e-9 * max(1.0, rhs):
        assert le_sum_sqrt2(d2, a, b) == (lhs <= rhs)


@given(st.integers(0, 4), st.data())
def test_half_in_carpet_agrees_with_points(R, data):
    side = 3**R
    ix = data.draw(st.integers(0, side))
    iy = data.draw(st.integers(0, side))
    assert half_in_carpet(R, 2 * ix, 2 * iy) == in_carpet(Point(R, ix, iy), R)
    assert HalfPoint(R, 2 * ix, 2 * iy).to_point() == Point(R, ix, iy)


@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50), st.integers(0, 9), st.integers(0, 9)),
                min_size=1, max_size=8),
       st.tuples(st.integers(-50, 50), st.integers(-50, 50)))
def test_min_rect_dist2_matches_scalar(rects, p):
    arr = np.array([(x, y, x + w, y + h) for x, y, w, h in rects], dtype=np.int64)
    pt = (p[0], p[1], p[0], p[1])
    assert min_rect_dist2(pt, arr) == min(rect_dist2(pt, tuple(r)) for r in arr.tolist())
