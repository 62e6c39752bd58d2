"""Gaussian-process (simple kriging) posterior mean with a squared-exponential kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from ..base import BaseReconstructor, check_snapshot_split, nearest_fill
from ..data import ObservationSplit, Snapshot


@dataclass(frozen=True)
class KrigingConfig:
    length_scale: float = 1.0
    noise: float = 1e-6
    jitter: float = 1e-6
    max_jitter: float = 1e-2
    max_points: int = 512
    normalize_target: bool = True

    def __post_init__(self):
        if min(self.length_scale, self.noise, self.jitter, self.max_points) <= 0:
            raise ValueError("kriging settings must be positive")


@dataclass
class KrigingDiagnostics:
    jitter_used: float = 0.0
    fallback: bool = False


def _rbf_kernel(a: np.ndarray, b: np.ndarray, length: float) -> np.ndarray:
    return np.exp(-0.5 * cdist(a, b, "sqeuclidean") / (length * length))


def kriging_reconstruct(snap: Snapshot, split: ObservationSplit, cfg: KrigingConfig = KrigingConfig(),
                        seed: int | None = None, diagnostics: KrigingDiagnostics | None = None) -> np.ndarray:
    """GP posterior mean ``[n, d_v]`` at the query points.

    At most ``max_points`` observations are kept, drawn without replacement
    with ``seed`` (default: the snapshot index); the same subset serves every
    component. The Cholesky factorisation retries with ten-fold larger jitter
    up to ``max_jitter`` before falling back to nearest-neighbour values.
    """
    check_snapshot_split(snap, split)
    diag = diagnostics if diagnostics is not None else KrigingDiagnostics()
    seed = snap.snapshot_index if seed is None else seed
    obs = split.observed
    if obs.size > cfg.max_points:
        obs = np.sort(np.random.default_rng(seed).choice(obs, size=cfg.max_points, replace=False))
    x, y = snap.coords[obs], snap.values[obs]
    xq = snap.coords[split.query]

    if cfg.normalize_target:
        mu, sd = y.mean(axis=0), y.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
    else:
        mu, sd = np.zeros(y.shape[1]), np.ones(y.shape[1])
    ys = (y - mu) / sd

    k = _rbf_kernel(x, x, cfg.length_scale)
    jitter = cfg.jitter
    while True:
        try:
            fac = cho_factor(k + (cfg.noise + jitter) * np.eye(len(x)), lower=True)
            break
        except LinAlgError:
            jitter *= 10.0
            if jitter > cfg.max_jitter:
                diag.fallback = True
                return nearest_fill(snap.coords[split.observed], snap.values[split.observed], xq)
    diag.jitter_used = jitter
    alpha = cho_solve(fac, ys)
    return _rbf_kernel(xq, x, cfg.length_scale) @ alpha * sd + mu


class Kriging(BaseReconstructor):
    """Kriging baseline; see :func:`kriging_reconstruct`."""

    def __init__(self, length_scale: float = 1.0, noise: float = 1e-6, jitter: float = 1e-6,
                 max_points: int = 512, normalize_target: bool = True):
        self.length_scale = length_scale
        self.noise = noise
        self.jitter = jitter
        self.max_points = max_points
        self.normalize_target = normalize_target

    def predict(self, snap, split):
        self.diagnostics_ = KrigingDiagnostics()
        cfg = KrigingConfig(self.length_scale, self.noise, self.jitter,
                            max_points=self.max_points, normalize_target=self.normalize_target)
        return kriging_reconstruct(snap, split, cfg, diagnostics=self.diagnostics_)
