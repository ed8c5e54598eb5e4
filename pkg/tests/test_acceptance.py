"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest

from carpet_sim.cli import run_command, strip_timestamps
from carpet_sim.estimators import BoxSet, est_exit_time, est_green, est_harmonic_measure
from carpet_sim.geometry import FractalParams, Point, layer_decomposition
from carpet_sim.harness import (
    check_bhp_pairs,
    check_lemma10,
    check_two_sided,
    default_bhp_pairs,
    exit_time_scaling,
    kernel_exponent_fit,
)
from carpet_sim.oracle import build_absorbing_system, exact_exit_time, exact_green_row, harmonic_values
from carpet_sim.rng import generator
from carpet_sim.scaffold import build_bhp_geometry
from carpet_sim.stable_process import build_jump_chain, sample_subordinator_increment

HALF = FractalParams(0.5)
CORNER = Point.from_fractions(0, 0)
R = Fraction(1, 9)

# (Q, r) grid for the BHP geometry on the 1-, 2- and 3-cell regions
F = Fraction
GEOMETRY_GRID = {
    "unit": ([(0, 0), (1, 1), (1, 0), (F(4, 9), 0), (0, F(13, 27)), (1, F(1, 3))], [F(1, 9), F(1, 27), F(1, 81)]),
    "pair": ([(0, 0), (F(2, 3), 0), (F(1, 3), 0), (F(2, 9), F(1, 3)), (0, F(1, 9))], [F(1, 27), F(1, 81)]),
    "ell": ([(0, 0), (F(1, 3), F(2, 3)), (F(2, 3), F(1, 3)), (F(1, 9), 0), (0, F(5, 9))], [F(1, 27), F(1, 81)]),
}


def test_oracle_equivalence(criterion, unit, ell):
    n = 10**5
    worst = 0.0
    failures = []
    for name, D, E in (
        ("unit", unit, BoxSet(1.0, 4 / 3, 0.0, 1.0)),
        ("ell", ell, BoxSet(2 / 3, 1.0, 0.0, 1 / 3)),
    ):
        for alpha in (0.3, 0.5, 0.7):
            p = FractalParams(alpha)
            sampler = build_jump_chain(None, 2, p)
            system = build_absorbing_system(build_jump_chain(D, 2, p, halo=3), D)
            hm = harmonic_values(system, system.absorbing_mask(E, 2))
            cells = system.interior
            other = tuple(int(v) for v in cells[len(cells) // 3])
            for k in (0, len(cells) // 2):
                x = tuple(int(v) for v in cells[k])
                seed = 1000 * int(alpha * 10) + k
                comparisons = [
                    ("hm", est_harmonic_measure(sampler, D, x, E, n, seed), hm[k]),
                    ("exit", est_exit_time(sampler, D, x, n, seed + 1), exact_exit_time(system, x)),
                    ("green", est_green(sampler, D, x, [x], n, seed + 2), exact_green_row(system, x)[k]),
                    ("green_off", est_green(sampler, D, x, [other], n, seed + 3),
                     exact_green_row(system, x)[system.index_of(other)]),
                ]
                for q, est, exact in comparisons:
                    z = abs(est.z_score(float(exact)))
                    worst = max(worst, z)
                    if z > 3.0:
                        failures.append((name, alpha, x, q, est.value, est.stderr, float(exact)))
    criterion(1, not failures, f"oracle equivalence: 48 comparisons, max |z| = {worst:.2f}")
    assert not failures, failures


def test_subordinator_laplace_transform(criterion):
    rng = generator(20240601)
    alpha = 0.5
    s = sample_subordinator_increment(1.0, alpha / 2, rng, size=10**6)
    rows = []
    for lam in (0.5, 1.0, 2.0):
        v = np.exp(-lam * s)
        est, se = v.mean(), v.std(ddof=1) / math.sqrt(len(v))
        exact = math.exp(-(lam ** (alpha / 2)))
        rows.append((lam, abs(est - exact), abs(est - exact) / se))
    ok = all(z <= 3.0 and d <= 0.002 for _, d, z in rows)
    criterion(2, ok, "subordinator Laplace transform: " + ", ".join(f"lam={l}: |dev|={d:.1e} ({z:.2f} se)" for l, d, z in rows))
    assert ok, rows


def test_exit_time_scaling(criterion):
    radii = [Fraction(1, 3**k) for k in range(2, 6)]
    res = exit_time_scaling((Fraction(1, 3), Fraction(1, 3)), radii, 7, 10**5, params=HALF, seed=7)
    ok = abs(res.slope - HALF.jump_index) <= 0.1 * HALF.jump_index
    criterion(3, ok, f"exit-time scaling slope {res.slope:.4f} vs {HALF.jump_index:.4f} (+-10%)")
    assert ok


def test_kernel_exponent(criterion):
    slope = kernel_exponent_fit(4, 10**6, params=HALF, seed=11)
    target = -HALF.d_alpha
    ok = abs(slope - target) <= 0.03 * abs(target)
    criterion(4, ok, f"kernel exponent slope {slope:.4f} vs {target:.4f} (+-3%)")
    assert ok


def _components(cells) -> int:
    cells = {tuple(c) for c in cells.tolist()}
    seen, count = set(), 0
    for c in cells:
        if c in seen:
            continue
        count += 1
        stack = [c]
        while stack:
            a, b = stack.pop()
            if (a, b) in seen:
                continue
            seen.add((a, b))
            stack.extend((a + da, b + db) for da in (-1, 0, 1) for db in (-1, 0, 1) if (a + da, b + db) in cells)
    return count


def test_layer_combinatorics(criterion, unit):
    ok = True
    details = []
    for Q in (CORNER, Point.from_fractions(1, 1), Point.from_fractions(Fraction(13, 27), 0)):
        L = layer_decomposition(unit, Q, Fraction(1, 27), 5)
        comps = _components(L.layers[0])
        for k in range(1, 6):
            ok &= L.counts[k] <= comps * (2 * 3**k + 1)
        details.append(f"{Q.xy}: {L.counts[:6]}")
    s05 = layer_decomposition(unit, CORNER, Fraction(1, 27), 8, HALF).series_partial_sums
    s09 = layer_decomposition(unit, CORNER, Fraction(1, 27), 8, FractalParams(0.9)).series_partial_sums
    inc05 = np.diff(s05)
    inc09 = np.diff(s09)
    ok &= bool(np.all(inc05 > 0) and np.all(np.diff(inc05) < 0) and s05[-1] < 1 / (1 - inc05[0]))
    ok &= bool(np.all(np.diff(inc09) > 0))
    criterion(5, ok, "layer counts " + "; ".join(details) + f"; series {s05[-1]:.3f} (0.5) vs {s09[-1]:.3f} (0.9)")
    assert ok


def test_bhp_geometry_grid(criterion, unit, pair, ell):
    regions = {"unit": unit, "pair": pair, "ell": ell}
    bad, n0s = [], []
    for name, (qs, rs) in GEOMETRY_GRID.items():
        for q in qs:
            for r in rs:
                g = build_bhp_geometry(regions[name], Point.from_fractions(*q), r)
                n0s.append(g.n0)
                if not (18 <= g.n0 <= 54 and all(g.checks.values())):
                    bad.append((name, q, r, g.n0, {k: v for k, v in g.checks.items() if not v}))
    criterion(6, not bad, f"BHP geometry: {len(n0s)} cases, n0 in [{min(n0s)}, {max(n0s)}]")
    assert not bad, bad


def test_harmonic_measure_floor(criterion, unit):
    rep = check_lemma10(unit, CORNER, R, 5, 10**5, params=HALF, seed=3)
    f5, f6 = rep.record("floor", 5), rep.record("floor", 6)
    st = rep.stable("floor")
    criterion(7, rep.passed is True,
              f"harmonic-measure floor {f5.measured_constant:.4f}+-{f5.stderr:.1e} / {f6.measured_constant:.4f}+-{f6.stderr:.1e},"
              f" level ratio {st.ratio:.3f}")
    assert rep.passed is True, rep.summary_rows()


@pytest.mark.slow
def test_two_sided_comparability(criterion, unit):
    rep = check_two_sided(unit, CORNER, R, 5, 10**6, params=HALF, seed=5)
    b5, b6 = rep.record("band", 5), rep.record("band", 6)
    st = rep.stable("band")
    criterion(8, rep.passed is True,
              f"two-sided band {b5.measured_constant:.3f} / {b6.measured_constant:.3f}, level ratio {st.ratio:.3f} ({rep.status()})")
    assert rep.passed is True, rep.summary_rows()


@pytest.mark.slow
def test_bhp_main(criterion, unit):
    rep = check_bhp_pairs(unit, CORNER, R, default_bhp_pairs(unit, CORNER, R), 5, 10**6, params=HALF, seed=9)
    cos = [r for r in rep.records if r.name.startswith("co")]
    swaps = all(r.details["swap_co"] == pytest.approx(r.measured_constant, rel=1e-12) for r in cos)
    nulls = [r for r in rep.records if r.name.startswith("null")]
    worst = max(rep.stability, key=lambda s: s.ratio)
    criterion(9, rep.passed is True and swaps,
              f"BHP c_o in [{min(r.measured_constant for r in cos):.3f}, {max(r.measured_constant for r in cos):.3f}],"
              f" null max {max(r.measured_constant for r in nulls):.3f}, worst stability {worst.name} {worst.ratio:.3f}")
    assert swaps
    assert rep.passed is True, rep.summary_rows()


def test_thread_reproducibility(criterion, tmp_path):
    outputs = {}
    for check, level, samples in (("lemma10", 4, 2000), ("bhp", 5, 1000)):
        for threads in (1, 4, 8):
            out = tmp_path / f"{check}_{threads}.json"
            code = run_command(["verify", check, "--seed", "42", "--level", str(level), "--samples", str(samples),
                                "--threads", str(threads), "--out", str(out)])
            assert code in (0, 1)
            outputs[(check, threads)] = strip_timestamps(out.read_text())
    ok = all(outputs[(c, t)] == outputs[(c, 1)] for c, t in outputs)
    criterion(10, ok, "verify reports identical across 1, 4 and 8 threads (lemma10, bhp)")
    assert ok
