"""Local thin-plate-spline interpolation over nearest observed neighbours."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..base import BaseReconstructor, check_snapshot_split, nearest_fill
from ..data import ObservationSplit, Snapshot


@dataclass(frozen=True)
class RbfConfig:
    neighbors: int = 128
    smoothing: float = 1e-8

    def __post_init__(self):
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")


@dataclass
class RbfDiagnostics:
    systems: int = 0
    failed_systems: int = 0
    fallback_queries: int = 0
    notes: list[str] = field(default_factory=list)


def _tps(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r * r * np.log(r)
    return np.where(r > 0, out, 0.0)


def _poly(x: np.ndarray, shift: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ones(x.shape[:-1] + (1,)), (x - shift) / scale], axis=-1)


def _solve_group(xs: np.ndarray, fs: np.ndarray, smoothing: float) -> tuple[np.ndarray, np.ndarray,
                                                                          np.ndarray, np.ndarray]:
    """Solve a batch of ``[G, k]`` local TPS systems with an affine tail."""
    g, k, d = xs.shape
    lo, hi = xs.min(axis=1, keepdims=True), xs.max(axis=1, keepdims=True)
    shift = 0.5 * (lo + hi)
    scale = np.where(hi - lo > 0, 0.5 * (hi - lo), 1.0)
    r = np.linalg.norm(xs[:, :, None, :] - xs[:, None, :, :], axis=-1)
    kern = _tps(r) + smoothing * np.eye(k)
    p = _poly(xs, shift, scale)
    q = d + 1
    lhs = np.zeros((g, k + q, k + q))
    lhs[:, :k, :k] = kern
    lhs[:, :k, k:] = p
    lhs[:, k:, :k] = np.swapaxes(p, 1, 2)
    rhs = np.concatenate([fs, np.zeros((g, q, fs.shape[-1]))], axis=1)
    coef = np.linalg.solve(lhs, rhs)
    return coef, shift, scale, lhs


def rbf_reconstruct(snap: Snapshot, split: ObservationSplit, cfg: RbfConfig = RbfConfig(),
                    diagnostics: RbfDiagnostics | None = None, batch: int = 128) -> np.ndarray:
    """TPS prediction ``[n, d_v]`` at the query points.

    Queries that share the same neighbour set share one linear system. Any
    system that cannot be solved falls back to nearest-neighbour values.
    """
    check_snapshot_split(snap, split)
    diag = diagnostics if diagnostics is not None else RbfDiagnostics()
    xo, fo = snap.coords[split.observed], snap.values[split.observed]
    xq = snap.coords[split.query]
    m, d = xo.shape
    if m < d + 2:
        diag.fallback_queries += xq.shape[0]
        diag.notes.append(f"m={m} < d_x+2; nearest-neighbour for all queries")
        return nearest_fill(xo, fo, xq)
    k = min(cfg.neighbors, m)
    _, nn = cKDTree(xo).query(xq, k=k)
    nn = np.sort(nn.reshape(xq.shape[0], k), axis=1)
    groups, inverse = np.unique(nn, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    pred = np.empty((xq.shape[0], fo.shape[1]))
    for start in range(0, groups.shape[0], batch):
        gsets = groups[start:start + batch]
        xs, fs = xo[gsets], fo[gsets]
        gid = np.arange(start, start + gsets.shape[0])
        diag.systems += gsets.shape[0]
        try:
            coef, shift, scale, _ = _solve_group(xs, fs, cfg.smoothing)
            ok = np.all(np.isfinite(coef), axis=(1, 2))
        except np.linalg.LinAlgError:
            coef, ok = None, np.zeros(gsets.shape[0], dtype=bool)
        for j, g in enumerate(gid):
            members = np.flatnonzero(inverse == g)
            if not ok[j]:
                diag.failed_systems += 1
                diag.fallback_queries += members.size
                pred[members] = nearest_fill(xo, fo, xq[members])
                continue
            x = xq[members]
            r = np.linalg.norm(x[:, None, :] - xs[j][None, :, :], axis=-1)
            pred[members] = _tps(r) @ coef[j, :k] + _poly(x, shift[j], scale[j]) @ coef[j, k:]
    return pred


class RbfInterpolation(BaseReconstructor):
    """Thin-plate-spline interpolation with an affine tail on the ``neighbors`` nearest observations.

    Parameters
    ----------
    neighbors : int, default=128
        Observed points per local system.
    smoothing : float, default=1e-8
        Tikhonov term added to the kernel diagonal.
    """

    def __init__(self, neighbors: int = 128, smoothing: float = 1e-8):
        self.neighbors = neighbors
        self.smoothing = smoothing

    def predict(self, snap, split):
        self.diagnostics_ = RbfDiagnostics()
        return rbf_reconstruct(snap, split, RbfConfig(self.neighbors, self.smoothing), self.diagnostics_)
