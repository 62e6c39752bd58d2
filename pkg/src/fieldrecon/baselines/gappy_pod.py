"""Gappy POD: least-squares fit of truncated POD modes to the observed entries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..base import BaseReconstructor, check_dataset, check_is_fitted, check_snapshot_split
from ..data import DataError, Dataset, ObservationSplit, Snapshot


@dataclass
class GappyPodModel:
    coords: np.ndarray          # canonical points [M_c, d_x]
    mean: np.ndarray            # [M_c, d_v]
    modes: np.ndarray           # [M_c * d_v, r], point-major
    singular_values: np.ndarray
    threshold: float

    @property
    def rank(self) -> int:
        return self.modes.shape[1]

    @property
    def d_v(self) -> int:
        return self.mean.shape[1]


@dataclass
class GappyDiagnostics:
    underdetermined: bool = False
    observed_entries: int = 0


def gappy_pod_fit(train: Dataset, threshold: float = 0.95) -> GappyPodModel:
    """POD of the mean-removed training snapshots, truncated at ``threshold`` energy.

    Rows are matched across snapshots by index, so the training snapshots
    must share a point ordering; the canonical coordinate of row ``i`` is
    the mean position of point ``i``.

    The retained rank is the smallest ``r`` whose cumulative squared singular
    values reach ``threshold`` of the total; an all-zero centred matrix gives
    ``r = 0``.
    """
    check_dataset(train, min_snapshots=2)
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if len({s.n_points for s in train}) != 1:
        raise DataError("Gappy POD requires canonical points: training snapshots must share a point ordering (equal M)")
    # row i of every snapshot is the same generator point; its mean position is canonical
    coords = np.mean([s.coords for s in train], axis=0)
    x = np.stack([s.values.reshape(-1) for s in train])
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    energy = sv ** 2
    total = energy.sum()
    if total <= 0 or sv[0] <= np.sqrt(x.size) * np.finfo(float).eps * max(1.0, np.abs(x).max()):
        r = 0
    else:
        frac = np.cumsum(energy) / total
        r = int(np.searchsorted(frac, threshold * (1 - 1e-12)) + 1)
        r = min(r, sv.size)
    return GappyPodModel(coords, mean.reshape(coords.shape[0], -1), vt[:r].T.copy(), sv, threshold)


def gappy_pod_predict(model: GappyPodModel, snap: Snapshot, split: ObservationSplit,
                      diagnostics: GappyDiagnostics | None = None) -> np.ndarray:
    """Values ``[n, d_v]`` at the query points from least-squares modal coefficients.

    Observed and query coordinates are matched to canonical points by
    nearest neighbour. Too few observed entries give the minimum-norm
    solution and set ``diagnostics.underdetermined``.
    """
    check_snapshot_split(snap, split)
    diag = diagnostics if diagnostics is not None else GappyDiagnostics()
    tree = cKDTree(model.coords)
    _, obs_rows = tree.query(snap.coords[split.observed])
    _, qry_rows = tree.query(snap.coords[split.query])
    dv = model.d_v
    if model.rank == 0:
        return model.mean[qry_rows].copy()
    entries = (obs_rows[:, None] * dv + np.arange(dv)[None, :]).ravel()
    target = (snap.values[split.observed] - model.mean[obs_rows]).ravel()
    diag.observed_entries = entries.size
    diag.underdetermined = entries.size < model.rank
    coef, *_ = np.linalg.lstsq(model.modes[entries], target, rcond=None)
    modes_q = model.modes.reshape(model.coords.shape[0], dv, -1)[qry_rows]
    return model.mean[qry_rows] + modes_q @ coef


class GappyPOD(BaseReconstructor):
    """Gappy POD baseline; ``fit`` needs training snapshots on one shared point set."""

    requires_fit = True

    def __init__(self, energy_threshold: float = 0.95):
        self.energy_threshold = energy_threshold

    def fit(self, train: Dataset | None = None):
        if train is None:
            raise DataError("GappyPOD.fit needs a training dataset")
        self.model_ = gappy_pod_fit(train, self.energy_threshold)
        return self

    def predict(self, snap, split):
        check_is_fitted(self, "model_")
        self.diagnostics_ = GappyDiagnostics()
        return gappy_pod_predict(self.model_, snap, split, self.diagnostics_)
