from __future__ import annotations

import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carpet_sim.estimators import BallSet
from carpet_sim.geometry import FractalParams, Point
from carpet_sim.harness import (
    GRID_CAP,
    HypothesisViolation,
    check_bhp_pairs,
    check_carleson,
    check_lemma10,
    check_lemma11,
    check_lemma12,
    check_step_decomposition,
    check_two_sided,
    default_bhp_pairs,
    exterior_patches,
    family_z,
    grid_cells,
    point_cell,
    reports_to_json,
    stability,
    start_cell,
    summary_table,
)
from carpet_sim.scaffold import build_bhp_geometry

HALF = FractalParams(0.5)
Q = Point.from_fractions(0, 0)
R = Fraction(1, 9)


def test_stability_band():
    assert stability("x", (5, 6), (1.0, 1.9)).passed
    assert stability("x", (5, 6), (1.0, 0.55)).passed
    assert not stability("x", (5, 6), (1.0, 2.1)).passed
    assert not stability("x", (5, 6), (0.0, 1.0)).passed


def test_family_z():
    assert family_z(1) == pytest.approx(3.0)
    assert family_z(10) > family_z(2) > family_z(1)


def test_grid_cells_cap_and_order(unit):
    cells = grid_cells(unit, 4, lambda x, y: True)
    assert len(cells) <= GRID_CAP
    assert cells.tolist() == sorted(cells.tolist())
    few = grid_cells(unit, 2, lambda x, y: x < 0.5)
    assert len(few) == len(unit.cells_at(2)[(unit.cells_at(2)[:, 0] + 0.5) / 9 < 0.5])


def test_start_cell_and_point_cell():
    assert start_cell((2, 1), 2, 4) == (18, 9)
    with pytest.raises(ValueError):
        start_cell((2, 1), 3, 2)
    # upper-right (9, 9) is a removed cell, upper-left is the first admissible one
    assert point_cell(Fraction(1, 3), Fraction(1, 3), 3) == (8, 9)


def test_exterior_patches_avoid_ball(unit):
    patches = exterior_patches(unit, Q, 2 * float(R))
    assert len(patches) == 4
    i, j = np.meshgrid(np.arange(-10, 20), np.arange(-10, 20), indexing="ij")
    i, j = i.ravel(), j.ravel()
    hits = np.array([p.contains_cells(2, i, j) for p in patches])
    assert hits.sum(axis=0).max() <= 1
    near = BallSet(0.0, 0.0, 2 * float(R)).contains_cells(2, i, j)
    assert not hits[:, near].any()


def test_hypothesis_refusals(unit):
    p = FractalParams(0.9)
    with pytest.raises(HypothesisViolation, match=r"hypothesis violated: alpha=0.9 is not below 2\(d-1\)/dw=0.8515"):
        check_lemma12(unit, Q, R, None, 3, 10, params=p)
    with pytest.raises(HypothesisViolation):
        check_bhp_pairs(unit, Q, R, default_bhp_pairs(unit, Q, R), 3, 10, params=p)
    with pytest.raises(HypothesisViolation):
        check_lemma11(unit, Q, R, None, 3, 10, params=FractalParams(1.9))
    with pytest.raises(HypothesisViolation):
        check_carleson(unit, Q, R, exterior_patches(unit, Q, 2 * float(R))[0], 3, 10, params=FractalParams(0.96))


def test_floor_report_structure(unit):
    rep = check_lemma10(unit, Q, R, 3, 400, params=HALF, seed=1)
    assert [r.level for r in rep.records] == [3, 4]
    rec = rep.record("floor", 3)
    assert rec.config_hashes and len(rec.config_hashes[0]) == 16
    assert rec.details["partition_max_dev"] < 1e-12
    assert rep.stable("floor").levels == (3, 4)
    data = json.loads(reports_to_json([rep]))
    assert data[0]["check"] == "lemma10"
    assert "lemma10" in summary_table([rep])


def test_floor_check_reproducible(unit):
    a = check_lemma10(unit, Q, R, 3, 300, params=HALF, seed=4)
    b = check_lemma10(unit, Q, R, 3, 300, params=HALF, seed=4, threads=3)
    assert reports_to_json([a]) == reports_to_json([b])


def test_exit_sets_must_vanish_near_q(unit):
    with pytest.raises(ValueError):
        check_bhp_pairs(unit, Q, R, [(BallSet(0, 0, 0.5), exterior_patches(unit, Q, 2 * float(R))[0])], 3, 10,
                        params=HALF)


def test_bhp_pairs_swap_and_records(unit):
    pairs = default_bhp_pairs(unit, Q, R)[:1]
    with pytest.raises(ValueError, match="empty test grid"):
        check_bhp_pairs(unit, Q, R, pairs, 4, 10, params=HALF)
    rep = check_bhp_pairs(unit, Q, R, pairs, 5, 300, params=HALF, seed=2)
    cos = [r for r in rep.records if r.name.startswith("co")]
    assert {r.name for r in cos} == {"co[0]", "co_omega2[0]"}
    for r in cos:
        if math.isfinite(r.measured_constant):
            assert r.details["swap_co"] == pytest.approx(r.measured_constant, rel=1e-12)
            assert r.measured_constant >= 1.0
    assert any(r.name.startswith("null") for r in rep.records)


def test_two_sided_structure(unit):
    rep = check_two_sided(unit, Q, R, 5, 100, params=HALF, seed=3)
    names = {r.name for r in rep.records}
    assert names == {"green_over_omega", "omega_over_green", "band"}
    for n in (5, 6):
        band = rep.record("band", n).measured_constant
        hi = rep.record("omega_over_green", n).measured_constant
        lo = rep.record("green_over_omega", n).measured_constant
        assert band == pytest.approx(hi * lo)


def test_one_sided_green_checks_run(unit):
    a = check_lemma11(unit, Q, R, None, 5, 100, params=HALF, seed=1)
    b = check_lemma12(unit, Q, R, None, 5, 100, params=HALF, seed=1)
    assert a.records and b.records
    assert any("layers" in json.dumps(n) or isinstance(n, dict) for n in b.notes)


def test_green_check_rejects_points_near_q(unit):
    with pytest.raises(ValueError):
        check_lemma11(unit, Q, R, [(0, 0)], 3, 10, params=HALF, grid_level=3)


def test_carleson_runs(unit):
    rep = check_carleson(unit, Q, R, exterior_patches(unit, Q, 2 * float(R))[0], 3, 300, params=HALF, seed=1)
    assert rep.record("max_ratio", 3).measured_constant > 0


def test_step_decomposition_runs(unit):
    geom = build_bhp_geometry(unit, Q, R)
    rep = check_step_decomposition(geom, exterior_patches(unit, Q, 2 * float(R))[:1], 4, 200, params=HALF, seed=1)
    assert {"band_i", "additivity_z", "band_iii", "floor_iv"} <= {r.name for r in rep.records}


@given(st.floats(0.05, 1.9))
def test_hypothesis_flags_match_thresholds(alpha):
    p = FractalParams(alpha)
    flags = p.hypothesis_flags()
    assert flags["alpha_lt_2(d-1)/dw"] == (alpha < 2 * (p.d - 1) / p.dw)
    assert flags["alpha_lt_2d/dw"] == (alpha < 2 * p.d / p.dw)
