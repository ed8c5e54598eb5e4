"""Exact absorbing-chain quantities by dense linear solves.

Interior states are the model cells inside the domain; every other explicit
state is absorbing, and one extra absorbing column collects the mass that
leaves the explicit states altogether (the ``far`` sink).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg

from .geometry import cell_measure
from .stable_process import JumpChainModel, as_domain

MAX_INTERIOR = 5000


@dataclass
class AbsorbingSystem:
    interior: np.ndarray  # (n, 2) cell indices
    absorbing: np.ndarray  # (m, 2) cell indices; the far sink is the extra last column of R_mat
    Q_mat: np.ndarray
    R_mat: np.ndarray  # (n, m + 1)
    hold: np.ndarray  # expected holding time per interior state
    weights: np.ndarray  # reversing weights of the embedded chain
    cell_mu: float

    def __post_init__(self):
        if len(self.interior) > MAX_INTERIOR:
            raise ValueError(f"interior state count {len(self.interior)} exceeds {MAX_INTERIOR}")
        self._index = {(int(a), int(b)): k for k, (a, b) in enumerate(np.asarray(self.interior).tolist())}

    @classmethod
    def from_matrices(cls, Q_mat, R_mat, hold, weights=None, cell_mu: float = 1.0) -> "AbsorbingSystem":
        Q_mat = np.atleast_2d(np.asarray(Q_mat, dtype=float))
        R_mat = np.atleast_2d(np.asarray(R_mat, dtype=float))
        n = Q_mat.shape[0]
        interior = np.stack([np.arange(n), np.zeros(n, dtype=int)], axis=1)
        absorbing = np.stack([np.arange(R_mat.shape[1] - 1), np.ones(R_mat.shape[1] - 1, dtype=int)], axis=1)
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        return cls(interior, absorbing, Q_mat, R_mat, np.broadcast_to(np.asarray(hold, float), (n,)).copy(), w, cell_mu)

    def index_of(self, cell) -> int:
        key = (int(cell[0]), int(cell[1])) if not hasattr(cell, "k") else (cell.k, cell.m)
        if key not in self._index:
            raise ValueError(f"{key} is not an interior state")
        return self._index[key]

    @cached_property
    def fundamental(self) -> np.ndarray:
        """``(I - Q)^-1`` by LU factorisation."""
        n = self.Q_mat.shape[0]
        A = np.eye(n) - self.Q_mat
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)  # singularity is checked below
                lu = scipy.linalg.lu_factor(A, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise np.linalg.LinAlgError("singular absorbing system") from exc
        if np.any(np.abs(np.diag(lu[0])) < 1e-14):
            raise np.linalg.LinAlgError("singular absorbing system")
        return scipy.linalg.lu_solve(lu, np.eye(n))

    @cached_property
    def exit_matrix(self) -> np.ndarray:
        return self.fundamental @ self.R_mat

    def row_sums(self) -> np.ndarray:
        return self.Q_mat.sum(axis=1) + self.R_mat.sum(axis=1)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.Q_mat)))) if len(self.Q_mat) else 0.0

    def absorbing_mask(self, exit_set, level: int) -> np.ndarray:
        """Indicator over absorbing columns (far sink last) of an exit set."""
        mask = exit_set.contains_cells(level, self.absorbing[:, 0], self.absorbing[:, 1])
        return np.append(mask, bool(exit_set.contains_far))


def build_absorbing_system(model: JumpChainModel, D) -> AbsorbingSystem:
    """Absorbing decomposition of ``model``'s explicit kernel for exits from ``D``."""
    K = model.explicit
    dom = as_domain(D)
    inside = dom.contains(model.level, K.states[:, 0], K.states[:, 1])
    if np.any(inside & K.halo_mask):
        raise ValueError("domain reaches into the halo; enlarge the bounding region")
    ii = np.nonzero(inside)[0]
    aa = np.nonzero(~inside)[0]
    if len(ii) > MAX_INTERIOR:
        raise ValueError(f"interior state count {len(ii)} exceeds {MAX_INTERIOR}")
    Q_mat = K.P[np.ix_(ii, ii)]
    R_mat = np.concatenate([K.P[np.ix_(ii, aa)], K.far[ii][:, None]], axis=1)
    hold = np.full(len(ii), model.hold_mean)
    return AbsorbingSystem(K.states[ii], K.states[aa], Q_mat, R_mat, hold, K.rates[ii], cell_measure(model.level))


def exact_exit_distribution(system: AbsorbingSystem, start) -> np.ndarray:
    """Law of the absorbing state hit first from ``start`` (far sink last)."""
    return system.exit_matrix[system.index_of(start)].copy()


def exact_green_row(system: AbsorbingSystem, x) -> np.ndarray:
    """``G(x, y)``: expected time in ``y`` before absorption divided by ``mu(y)``."""
    N = system.fundamental
    return N[system.index_of(x)] * system.hold / system.cell_mu


def exact_exit_time(system: AbsorbingSystem, start) -> float:
    return float(system.fundamental[system.index_of(start)] @ system.hold)


def exact_exit_times(system: AbsorbingSystem) -> np.ndarray:
    return system.fundamental @ system.hold


def harmonic_values(system: AbsorbingSystem, absorbing_mask: np.ndarray) -> np.ndarray:
    """Exit probability into the flagged absorbing columns, for every interior start."""
    return system.exit_matrix @ np.asarray(absorbing_mask, dtype=float)


# ---------------------------------------------------------------------------
# frozen reference vectors


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_fixture(path, config: dict, values) -> None:
    data = {"config": config, "config_hash": config_hash(config), "values": [float(v) for v in np.ravel(values)]}
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_fixture(path, config: dict | None = None) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    if config is not None and data["config_hash"] != config_hash(config):
        raise ValueError(f"fixture {path} was frozen for a different configuration")
    return np.asarray(data["values"], dtype=float)
