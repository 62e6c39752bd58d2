"""Estimator base class shared by every reconstruction method.

Reconstructors follow the scikit-learn conventions: hyperparameters are
constructor arguments (so ``get_params``/``set_params``/``clone`` work),
``fit`` learns from a training :class:`~fieldrecon.data.Dataset` and returns
``self``, and fitted state lives in attributes with a trailing underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DataError, Dataset, ObservationSplit, Snapshot

__all__ = ["BaseReconstructor", "check_snapshot_split", "check_dataset", "check_is_fitted",
           "nearest_fill"]


def check_snapshot_split(snap: Snapshot, split: ObservationSplit) -> None:
    if not isinstance(snap, Snapshot):
        raise TypeError(f"expected a Snapshot, got {type(snap).__name__}")
    if not isinstance(split, ObservationSplit):
        raise TypeError(f"expected an ObservationSplit, got {type(split).__name__}")
    top = max(split.observed.max(), split.query.max())
    if top >= snap.n_points or min(split.observed.min(), split.query.min()) < 0:
        raise DataError(f"split indexes point {top} but the snapshot has {snap.n_points} points")


def check_dataset(ds, min_snapshots: int = 1) -> Dataset:
    if not isinstance(ds, Dataset):
        raise TypeError(f"expected a Dataset, got {type(ds).__name__}")
    if len(ds) < min_snapshots:
        raise DataError(f"need at least {min_snapshots} training snapshots, got {len(ds)}")
    return ds


def nearest_fill(obs_coords: np.ndarray, obs_values: np.ndarray, query_coords: np.ndarray) -> np.ndarray:
    """Nearest-observation values at the query coordinates."""
    from scipy.spatial import cKDTree
    _, nn = cKDTree(obs_coords).query(query_coords)
    return obs_values[nn]


class BaseReconstructor(BaseEstimator):
    """Maps (snapshot, observation split) to values at the query points."""

    #: whether ``fit`` must run before ``predict``
    requires_fit = False

    def fit(self, train: Dataset | None = None):
        return self

    def predict(self, snap: Snapshot, split: ObservationSplit) -> np.ndarray:
        """Values ``[n, d_v]`` at ``split.query``, in the order of ``split.query``."""
        raise NotImplementedError

    def reconstruct(self, snap: Snapshot, split: ObservationSplit) -> np.ndarray:
        """Full ``[M, d_v]`` field: observed values kept, queries predicted."""
        check_snapshot_split(snap, split)
        field = np.full_like(snap.values, np.nan)
        field[split.observed] = snap.values[split.observed]
        field[split.query] = self.predict(snap, split)
        return field
