"""Reconstruction metrics and table-style aggregation across snapshots."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import griddata
from scipy.spatial import cKDTree

__all__ = ["MetricError", "relative_rmse", "rmse_by_component", "r_squared", "Spectrum",
           "energy_spectrum", "spectrum_distance", "SnapshotMetrics", "EvalReport", "aggregate",
           "format_table"]


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


def relative_rmse(pred, truth, per_component: bool = False, names: Sequence[str] | None = None):
    """``sqrt(sum (v - v_hat)^2) / sqrt(sum v^2)``.

    With ``per_component`` the ratio is taken column by column and an array
    is returned; otherwise all entries are pooled into one scalar.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if not per_component:
        den = np.sqrt(np.sum(truth ** 2))
        if den == 0:
            raise MetricError("relative RMSE undefined: truth is identically zero")
        return float(np.sqrt(np.sum((pred - truth) ** 2)) / den)
    truth2 = truth.reshape(truth.shape[0], -1)
    pred2 = pred.reshape(pred.shape[0], -1)
    den = np.sqrt(np.sum(truth2 ** 2, axis=0))
    for c, d in enumerate(den):
        if d == 0:
            label = names[c] if names is not None else f"component {c}"
            raise MetricError(f"relative RMSE undefined: {label} is identically zero")
    return np.sqrt(np.sum((pred2 - truth2) ** 2, axis=0)) / den


def rmse_by_component(pred, truth, names: Sequence[str]) -> dict[str, float]:
    """Per-component and ``total`` relative RMSE as an ordered dict."""
    per = relative_rmse(pred, truth, per_component=True, names=names)
    out = {n: float(v) for n, v in zip(names, per)}
    out["total"] = relative_rmse(pred, truth)
    return out


def r_squared(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0:
        raise MetricError("R^2 undefined: truth has zero variance")
    return float(1.0 - np.sum((truth - pred) ** 2) / ss_tot)


@dataclass
class Spectrum:
    k: np.ndarray        # shell centres, cycles per domain length
    energy: np.ndarray   # shell-summed kinetic energy

    def to_dict(self) -> dict:
        return {"k": self.k.tolist(), "energy": self.energy.tolist()}


def _grid_values(coords: np.ndarray, values: np.ndarray, resolution: int, lo, hi):
    axes = [lo[i] + (hi[i] - lo[i]) * np.arange(resolution) / resolution for i in range(coords.shape[1])]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, coords.shape[1])
    lin = griddata(coords, values, mesh, method="linear")
    holes = np.isnan(lin).any(axis=1)
    if holes.any():
        _, nn = cKDTree(coords).query(mesh[holes])
        lin[holes] = values[nn]
    return lin.reshape((resolution,) * coords.shape[1] + (values.shape[1],))


def energy_spectrum(coords, velocity, resolution: int | None = None, bounds=None) -> Spectrum:
    """Shell-binned kinetic-energy spectrum of scattered velocity samples.

    Each velocity component is linearly interpolated (nearest neighbour
    outside the convex hull) onto a regular ``G^d`` grid spanning the
    bounding box, transformed with an orthonormal DFT and binned by
    ``round(|k|)``. The shells then sum to ``0.5 * sum(|u|^2)`` over the grid.
    """
    coords = np.asarray(coords, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    if velocity.ndim == 1:
        velocity = velocity[:, None]
    d = coords.shape[1]
    if d not in (2, 3):
        raise MetricError("energy spectrum needs 2-D or 3-D coordinates")
    g = resolution or (64 if d == 2 else 48)
    lo, hi = (coords.min(0), coords.max(0)) if bounds is None else map(np.asarray, bounds)
    if np.any(hi - lo <= 0):
        raise MetricError("degenerate bounding box")
    grid = _grid_values(coords, velocity, g, lo, hi)
    freqs = np.meshgrid(*[np.fft.fftfreq(g, 1.0 / g)] * d, indexing="ij")
    shell = np.rint(np.sqrt(sum(f ** 2 for f in freqs))).astype(np.int64)
    power = np.zeros(shell.shape)
    for c in range(velocity.shape[1]):
        power += np.abs(np.fft.fftn(grid[..., c], norm="ortho")) ** 2
    energy = 0.5 * np.bincount(shell.ravel(), weights=power.ravel())
    return Spectrum(np.arange(energy.size, dtype=np.float64), energy)


def spectrum_distance(a: Spectrum, b: Spectrum, floor: float = 1e-12, k_min: int = 1) -> float:
    """L2 distance between log10 energies over shells ``k >= k_min``."""
    n = min(a.energy.size, b.energy.size)
    ea = np.log10(np.maximum(a.energy[k_min:n], floor))
    eb = np.log10(np.maximum(b.energy[k_min:n], floor))
    return float(np.sqrt(np.sum((ea - eb) ** 2)))


# --- reports -------------------------------------------------------------------

@dataclass
class SnapshotMetrics:
    snapshot_index: int
    rmse: dict[str, float]
    r2: dict[str, float] | None = None


@dataclass
class EvalReport:
    method: str
    components: list[str]
    snapshots: list[SnapshotMetrics]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    spectrum: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "components": self.components,
            "mean": self.mean,
            "std": self.std,
            "snapshots": [{"snapshot_index": s.snapshot_index, "rmse": s.rmse,
                           **({"r2": s.r2} if s.r2 is not None else {})} for s in self.snapshots],
            **({"spectrum": self.spectrum} if self.spectrum is not None else {}),
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def aggregate(method: str, components: Sequence[str], per_snapshot: Sequence[SnapshotMetrics]) -> EvalReport:
    """Unweighted mean and sample (n-1) standard deviation of every metric."""
    if not per_snapshot:
        raise MetricError("aggregate needs at least one snapshot")
    keys = list(components) + ["total"]
    mean, std = {}, {}
    for k in keys:
        vals = np.array([s.rmse[k] for s in per_snapshot], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return EvalReport(method, list(components), list(per_snapshot), mean, std)


def format_table(reports: Sequence[EvalReport], digits: int = 4) -> str:
    """Aligned plain-text table: one row per method, ``mean ± std`` per column."""
    if not reports:
        return ""
    cols = list(reports[0].components) + ["total"]
    header = ["Method"] + [c if c != "total" else "Total" for c in cols]
    rows = [[r.method] + [f"{r.mean[c]:.{digits}f} ± {r.std[c]:.{digits}f}" for c in cols] for r in reports]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    fmt = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(r) for r in rows] + [rule]) + "\n"
