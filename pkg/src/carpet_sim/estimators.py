"""Monte Carlo estimators of harmonic measure, Green values and exit times.

Each estimator runs independent trajectories of a :class:`JumpChainModel`
(see :func:`simulate`) and reduces them to an :class:`EstimateResult`.
Exit sets are evaluated after the run on the recorded landing points, so one
run can serve many boundary data at once (:func:`exit_probabilities`).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import cell_measure, carpet_mask
from .oracle import config_hash
from .stable_process import JumpChainModel, RunResult, as_domain, simulate

NONEXIT_TOLERANCE = 1e-3


@dataclass(frozen=True)
class EstimateResult:
    value: float
    stderr: float
    n_samples: int
    seed: int
    config_hash: str
    truncated_mass: float = 0.0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def z_score(self, reference: float) -> float:
        if self.stderr == 0.0:
            return 0.0 if self.value == reference else math.inf
        return (self.value - reference) / self.stderr


def _mean_stderr(samples: np.ndarray) -> tuple[float, float]:
    n = samples.size
    mean = float(np.mean(samples))
    if n < 2:
        return mean, 0.0
    return mean, float(np.std(samples, ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------------------
# exit sets


class ExitSet:
    """A set of landing points outside a domain.

    ``contains_cells`` decides level-``n`` cells, ``contains_xy`` decides the
    coarse-grained landing points of astronomically long jumps, and
    ``contains_far`` says whether the oracle's far sink belongs to the set
    (``None`` when that is not determined).
    """

    contains_far: bool | None = False

    def contains_cells(self, level, i, j) -> np.ndarray:
        raise NotImplementedError

    def contains_xy(self, x, y) -> np.ndarray:
        return np.zeros(np.shape(x), dtype=bool)

    def mask(self, run: RunResult) -> np.ndarray:
        out = np.zeros(run.n, dtype=bool)
        near = ~run.far
        out[near] = self.contains_cells(run.level, run.exit_i[near], run.exit_j[near])
        if run.far.any():
            out[run.far] = self.contains_xy(run.exit_x[run.far], run.exit_y[run.far])
        return out

    def key(self) -> str:
        return repr(self)

    def __or__(self, other):
        return UnionSet((self, other))

    def __sub__(self, other):
        return DifferenceSet(self, other)


class AllExits(ExitSet):
    contains_far = True

    def contains_cells(self, level, i, j):
        return np.ones(np.shape(i), dtype=bool)

    def contains_xy(self, x, y):
        return np.ones(np.shape(x), dtype=bool)

    def __repr__(self):
        return "All"


class NoExits(ExitSet):
    contains_far = False

    def contains_cells(self, level, i, j):
        return np.zeros(np.shape(i), dtype=bool)

    def __repr__(self):
        return "Empty"


class CellSet(ExitSet):
    """Union of carpet cells of one level (landing cells are matched by ancestor)."""

    contains_far = False

    def __init__(self, level: int, cells):
        self.level = int(level)
        self.cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        self._set = {(int(a), int(b)) for a, b in self.cells.tolist()}

    def contains_cells(self, level, i, j):
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        if level < self.level:
            raise ValueError("cells coarser than the set's level")
        f = 3 ** (level - self.level)
        a, b = np.floor_divide(i, f), np.floor_divide(j, f)
        return np.fromiter(((x, y) in self._set for x, y in zip(a.tolist(), b.tolist())), dtype=bool, count=a.size).reshape(a.shape)

    def __repr__(self):
        return f"Cells({self.level}:{sorted(self._set)})"


class BallSet(ExitSet):
    """Landing cells whose centre is in the open ball ``B(c, r)``."""

    contains_far = False

    def __init__(self, cx: float, cy: float, r: float):
        self.cx, self.cy, self.r = float(cx), float(cy), float(r)

    def contains_cells(self, level, i, j):
        u = 3.0**-level
        x = (np.asarray(i) + 0.5) * u
        y = (np.asarray(j) + 0.5) * u
        return (x - self.cx) ** 2 + (y - self.cy) ** 2 < self.r**2

    def contains_xy(self, x, y):
        return (np.asarray(x) - self.cx) ** 2 + (np.asarray(y) - self.cy) ** 2 < self.r**2

    def __repr__(self):
        return f"Ball({self.cx!r},{self.cy!r},{self.r!r})"


class BoxSet(ExitSet):
    """Landing cells whose centre is in ``[x0, x1) x [y0, y1)`` (infinite bounds allowed)."""

    def __init__(self, x0=-math.inf, x1=math.inf, y0=-math.inf, y1=math.inf):
        self.x0, self.x1, self.y0, self.y1 = map(float, (x0, x1, y0, y1))
        self.contains_far = None

    def contains_xy(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.x0) & (x < self.x1) & (y >= self.y0) & (y < self.y1)

    def contains_cells(self, level, i, j):
        u = 3.0**-level
        return self.contains_xy((np.asarray(i) + 0.5) * u, (np.asarray(j) + 0.5) * u)

    def __repr__(self):
        return f"Box({self.x0!r},{self.x1!r},{self.y0!r},{self.y1!r})"


class UnionSet(ExitSet):
    def __init__(self, parts):
        self.parts = tuple(parts)
        fars = [p.contains_far for p in self.parts]
        self.contains_far = True if any(f is True for f in fars) else (None if None in fars else False)

    def contains_cells(self, level, i, j):
        out = np.zeros(np.shape(i), dtype=bool)
        for p in self.parts:
            out |= p.contains_cells(level, i, j)
        return out

    def contains_xy(self, x, y):
        out = np.zeros(np.shape(x), dtype=bool)
        for p in self.parts:
            out |= p.contains_xy(x, y)
        return out

    def __repr__(self):
        return "Union(" + ",".join(map(repr, self.parts)) + ")"


class DifferenceSet(ExitSet):
    def __init__(self, a: ExitSet, b: ExitSet):
        self.a, self.b = a, b
        fa, fb = a.contains_far, b.contains_far
        self.contains_far = None if None in (fa, fb) else (fa and not fb)

    def contains_cells(self, level, i, j):
        return self.a.contains_cells(level, i, j) & ~self.b.contains_cells(level, i, j)

    def contains_xy(self, x, y):
        return self.a.contains_xy(x, y) & ~self.b.contains_xy(x, y)

    def __repr__(self):
        return f"Diff({self.a!r},{self.b!r})"


def complement(s: ExitSet) -> ExitSet:
    return DifferenceSet(AllExits(), s)


class DomainSet(ExitSet):
    """Landing cells inside a domain (useful for splitting exits of a sub-domain)."""

    contains_far = False

    def __init__(self, domain):
        self.domain = as_domain(domain)

    def contains_cells(self, level, i, j):
        return self.domain.contains(level, np.asarray(i, dtype=np.int64), np.asarray(j, dtype=np.int64))

    def __repr__(self):
        return f"Domain({self.domain.key()})"


@dataclass(frozen=True)
class HarmonicFunctionSpec:
    """``u(x) = P^x[X at the exit time of U lands in E]``."""

    domain: object
    boundary_data: ExitSet = field(default_factory=AllExits)

    def key(self) -> str:
        return f"{as_domain(self.domain).key()}|{self.boundary_data.key()}"


# ---------------------------------------------------------------------------
# estimators


def _check_nonexit(run: RunResult) -> None:
    if run.nonexit > NONEXIT_TOLERANCE * run.n:
        raise RuntimeError(f"non-exit: {run.nonexit} of {run.n} trajectories hit the step cap")


def _start_key(x):
    return (x.k, x.m) if hasattr(x, "k") else (int(x[0]), int(x[1]))


def _hash(model, D, x, n_samples, seed, *extra) -> str:
    return config_hash({
        "model": model.key(), "domain": as_domain(D).key(), "start": list(_start_key(x)),
        "n": int(n_samples), "seed": int(seed), "extra": [str(e) for e in extra],
    })


def exit_run(model: JumpChainModel, D, x, n_samples: int, seed: int, **kw) -> RunResult:
    run = simulate(model, D, _start_key(x), n_samples, seed, **kw)
    _check_nonexit(run)
    return run


def indicator_estimate(run: RunResult, mask: np.ndarray, chash: str) -> EstimateResult:
    v, se = _mean_stderr(mask[run.status == 0].astype(np.float64))
    return EstimateResult(v, se, run.n, run.seed, chash)


def exit_probabilities(run: RunResult, sets, chash: str = "") -> list[EstimateResult]:
    return [indicator_estimate(run, s.mask(run), chash) for s in sets]


def est_harmonic_measure(model, D, x, E: ExitSet, n_samples: int, seed: int, *, threads=None) -> EstimateResult:
    """``P^x[X_tau_D in E]`` with binomial standard error."""
    run = exit_run(model, D, x, n_samples, seed, threads=threads)
    return indicator_estimate(run, E.mask(run), _hash(model, D, x, n_samples, seed, "hm", E.key()))


def est_harmonic_fn(model, spec: HarmonicFunctionSpec, x, n_samples: int, seed: int, *, threads=None) -> EstimateResult:
    return est_harmonic_measure(model, spec.domain, x, spec.boundary_data, n_samples, seed, threads=threads)


def est_exit_time(model, D, x, n_samples: int, seed: int, *, threads=None) -> EstimateResult:
    run = exit_run(model, D, x, n_samples, seed, threads=threads)
    v, se = _mean_stderr(run.tau[run.status == 0])
    return EstimateResult(v, se, run.n, run.seed, _hash(model, D, x, n_samples, seed, "tau"))


def green_estimates(run: RunResult, group_sizes, chash: str = "") -> list[EstimateResult]:
    """Green averages per target group from a run with occupation targets."""
    out = []
    n = run.n
    for g, size in enumerate(group_sizes):
        mu = size * cell_measure(run.level)
        mean = run.occ_sum[g] / n
        var = max(run.occ_sq[g] / n - mean * mean, 0.0) * n / max(n - 1, 1)
        out.append(EstimateResult(mean / mu, math.sqrt(var / n) / mu, n, run.seed, chash))
    return out


def est_green(model, D, x, y_cell, n_samples: int, seed: int, *, threads=None) -> EstimateResult:
    """Expected occupation time of ``y_cell`` before leaving ``D``, divided by its measure.

    ``y_cell`` may also be an ``(K, 2)`` array of cells, giving the Green
    function averaged over their union.  Uses the next-event estimator of
    :func:`simulate`, which stays accurate when the target is rarely hit.
    """
    cells = np.asarray([_start_key(y_cell)] if hasattr(y_cell, "k") else y_cell, dtype=np.int64).reshape(-1, 2)
    if not as_domain(D).contains(model.level, cells[:, 0], cells[:, 1]).all():
        raise ValueError("Green target must lie in the domain")
    if not carpet_mask(cells[:, 0], cells[:, 1]).all():
        raise ValueError("Green target must consist of carpet cells")
    run = exit_run(model, D, x, n_samples, seed, green_target=cells, threads=threads)
    return green_from_visits(run, model, len(cells), _hash(model, D, x, n_samples, seed, "green", cells.tolist()))


def green_from_visits(run: RunResult, model: JumpChainModel, n_cells: int, chash: str = "") -> EstimateResult:
    """Green average from the next-event visit estimates of a run with ``green_target``."""
    mu = n_cells * cell_measure(run.level)
    v, se = _mean_stderr(run.visits * model.hold_mean / mu)
    return EstimateResult(v, se, run.n, run.seed, chash)
