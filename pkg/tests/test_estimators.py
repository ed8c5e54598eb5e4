from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carpet_sim.estimators import (
    AllExits,
    BallSet,
    BoxSet,
    CellSet,
    EstimateResult,
    HarmonicFunctionSpec,
    NoExits,
    complement,
    est_exit_time,
    est_green,
    est_harmonic_fn,
    est_harmonic_measure,
    exit_probabilities,
    exit_run,
    indicator_estimate,
)
from carpet_sim.geometry import FractalParams, cell_measure, unit_region
from carpet_sim.stable_process import BallDomain, GridDomain, build_jump_chain

HALF = FractalParams(0.5)


@pytest.fixture(scope="module")
def model():
    return build_jump_chain(None, 2, HALF)


def test_estimate_result_json_fields():
    r = EstimateResult(0.5, 0.01, 100, 7, "abc")
    assert set(json.loads(r.dumps())) == {"value", "stderr", "n_samples", "seed", "config_hash", "truncated_mass"}
    with pytest.raises(ValueError):
        EstimateResult(0.5, 0.01, 0, 7, "abc")
    assert r.z_score(0.52) == pytest.approx(-2.0)


def test_stderr_is_sample_sd_over_root_n(model):
    run = exit_run(model, unit_region(), (0, 0), 1000, 3)
    mask = BoxSet(1.0, 2.0, -1.0, 2.0).mask(run)
    est = indicator_estimate(run, mask, "")
    assert est.stderr == pytest.approx(np.std(mask.astype(float), ddof=1) / math.sqrt(1000))


def test_all_and_empty_sets(model):
    D = unit_region()
    full = est_harmonic_measure(model, D, (0, 0), AllExits(), 2000, 1)
    assert (full.value, full.stderr) == (1.0, 0.0)
    empty = est_harmonic_measure(model, D, (0, 0), NoExits(), 2000, 1)
    assert empty.value == 0.0


def test_partition_sums_to_one(model):
    run = exit_run(model, unit_region(), (2, 2), 5000, 9)
    right = BoxSet(1.0, math.inf, -math.inf, math.inf)
    left = BoxSet(-math.inf, 0.0, -math.inf, math.inf)
    rest = complement(right | left)
    probs = exit_probabilities(run, [right, left, rest])
    assert sum(p.value for p in probs) == pytest.approx(1.0, abs=1e-12)


def test_disjoint_harmonic_functions_sum_at_most_one(model):
    D = unit_region()
    u1 = est_harmonic_fn(model, HarmonicFunctionSpec(D, BoxSet(1.0, 2.0, 0.0, 1.0)), (8, 0), 20000, 4)
    u2 = est_harmonic_fn(model, HarmonicFunctionSpec(D, BoxSet(-1.0, 0.0, 0.0, 1.0)), (8, 0), 20000, 4)
    assert u1.value + u2.value <= 1.0 + 3 * math.hypot(u1.stderr, u2.stderr)
    assert u1.value > u2.value


def test_green_own_cell_positive(model):
    g = est_green(model, unit_region(), (0, 0), [(0, 0)], 2000, 5)
    assert g.value >= model.hold_mean / cell_measure(2)


def test_green_occupation_identity(model):
    D = unit_region()
    cells = D.cells_at(2)
    g = est_green(model, D, (0, 0), cells, 40000, 6)
    t = est_exit_time(model, D, (0, 0), 40000, 7)
    total = g.value * len(cells) * cell_measure(2)
    total_se = g.stderr * len(cells) * cell_measure(2)
    assert abs(total - t.value) <= 3 * math.hypot(total_se, t.stderr)


def test_green_target_validation(model):
    with pytest.raises(ValueError):
        est_green(model, unit_region(), (0, 0), [(9, 9)], 10, 1)
    with pytest.raises(ValueError):
        est_green(model, unit_region(), (0, 0), [(4, 4)], 10, 1)


def test_one_cell_exit_time_is_holding_time(model):
    # holding times are exponential with the model's mean
    t = est_exit_time(model, GridDomain.from_cells(2, [(0, 0)]), (0, 0), 20000, 2)
    assert abs(t.z_score(model.hold_mean)) <= 3


def test_exit_time_doubling_radius():
    m = build_jump_chain(None, 6, HALF)
    c = (1 / 3, 1 / 3)
    start = (242, 242)
    t1 = est_exit_time(m, BallDomain(*c, 2 / 81), start, 20000, 1)
    t2 = est_exit_time(m, BallDomain(*c, 4 / 81), start, 20000, 2)
    assert t2.value / t1.value == pytest.approx(2**HALF.jump_index, rel=0.15)


def test_thread_count_does_not_change_estimates(model):
    D = unit_region()
    a = est_harmonic_measure(model, D, (2, 2), BallSet(1.0, 1.0, 0.5), 6000, 11, threads=1)
    b = est_harmonic_measure(model, D, (2, 2), BallSet(1.0, 1.0, 0.5), 6000, 11, threads=4)
    assert a.dumps() == b.dumps()


def test_cell_set_matches_descendants():
    E = CellSet(1, [(3, 0)])
    assert E.contains_cells(2, np.array([9, 11, 12]), np.array([0, 2, 0])).tolist() == [True, True, False]
    with pytest.raises(ValueError):
        E.contains_cells(0, np.array([1]), np.array([0]))


@settings(max_examples=60)
@given(st.floats(-1, 2), st.floats(-1, 2), st.floats(0.01, 1.0), st.integers(-20, 40), st.integers(-20, 40))
def test_complement_partitions_cells(cx, cy, r, i, j):
    E = BallSet(cx, cy, r)
    a = E.contains_cells(3, np.array([i]), np.array([j]))[0]
    b = complement(E).contains_cells(3, np.array([i]), np.array([j]))[0]
    assert a != b
