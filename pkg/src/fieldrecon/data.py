"""Field snapshots, observation splits, normalisation and file formats.

A dataset on disk is a JSON manifest next to one CSV file per snapshot::

    {"d_x": 2, "d_v": 3, "components": ["u", "v", "p"],
     "snapshots": ["snap_0000.csv", ...]}

Each CSV has the header ``x0,x1,u,v,p`` and one point per row.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DataError", "Snapshot", "Dataset", "ObservationSplit", "NormalizationStats",
    "NoiseSpec", "load_dataset", "save_dataset", "load_snapshot_csv", "write_snapshot_csv",
    "sequential_split", "farthest_point_sampling", "SplitPool", "sample_observations", "add_noise",
    "normalize", "denormalize", "atomic_write",
]


class DataError(ValueError):
    """Malformed or inconsistent field data."""


@dataclass(frozen=True)
class Snapshot:
    coords: np.ndarray
    values: np.ndarray
    snapshot_index: int = 0

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] < 2:
            raise DataError("M ≥ 2 violated: a snapshot needs at least two points")
        if coords.shape[0] != values.shape[0]:
            raise DataError(f"coords has {coords.shape[0]} rows but values has {values.shape[0]}")
        if coords.shape[1] not in (1, 2, 3):
            raise DataError(f"d_x must be 1, 2 or 3, got {coords.shape[1]}")
        if values.shape[1] < 1:
            raise DataError("d_v must be >= 1")
        if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(values))):
            raise DataError("snapshot contains non-finite entries")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "snapshot_index", int(self.snapshot_index))

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def d_x(self) -> int:
        return self.coords.shape[1]

    @property
    def d_v(self) -> int:
        return self.values.shape[1]


@dataclass
class Dataset:
    snapshots: list[Snapshot]
    d_x: int
    d_v: int
    component_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.component_names:
            self.component_names = [f"c{i}" for i in range(self.d_v)]
        if len(self.component_names) != self.d_v:
            raise DataError("component_names must have d_v entries")
        last = None
        for s in self.snapshots:
            if s.d_x != self.d_x or s.d_v != self.d_v:
                raise DataError(f"snapshot {s.snapshot_index} has d_x={s.d_x}, d_v={s.d_v}; "
                                f"dataset expects {self.d_x}, {self.d_v}")
            if last is not None and s.snapshot_index <= last:
                raise DataError("snapshot indices must be unique and sorted")
            last = s.snapshot_index

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self):
        return iter(self.snapshots)

    def __getitem__(self, i) -> Snapshot:
        return self.snapshots[i]

    def subset(self, snapshots: Sequence[Snapshot]) -> "Dataset":
        return Dataset(list(snapshots), self.d_x, self.d_v, list(self.component_names))


@dataclass(frozen=True)
class ObservationSplit:
    observed: np.ndarray
    query: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=np.int64)
        qry = np.asarray(self.query, dtype=np.int64)
        if obs.size < 1 or qry.size < 1:
            raise DataError("a split needs at least one observed and one query point")
        if np.intersect1d(obs, qry).size:
            raise DataError("observed and query index sets overlap")
        object.__setattr__(self, "observed", np.sort(obs))
        object.__setattr__(self, "query", np.sort(qry))

    @property
    def m(self) -> int:
        return self.observed.size

    @property
    def n(self) -> int:
        return self.query.size

    @classmethod
    def from_observed(cls, observed, n_points: int) -> "ObservationSplit":
        mask = np.zeros(n_points, dtype=bool)
        mask[np.asarray(observed, dtype=np.int64)] = True
        return cls(np.flatnonzero(mask), np.flatnonzero(~mask))


@dataclass
class NormalizationStats:
    coord_mean: np.ndarray
    coord_std: np.ndarray
    value_mean: np.ndarray
    value_std: np.ndarray

    def __post_init__(self):
        for name in ("coord_mean", "coord_std", "value_mean", "value_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        self.coord_std = np.maximum(self.coord_std, 1e-12)
        self.value_std = np.maximum(self.value_std, 1e-12)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "NormalizationStats":
        coords = np.concatenate([s.coords for s in ds])
        values = np.concatenate([s.values for s in ds])
        return cls(coords.mean(0), coords.std(0), values.mean(0), values.std(0))

    @classmethod
    def identity(cls, d_x: int, d_v: int) -> "NormalizationStats":
        return cls(np.zeros(d_x), np.ones(d_x), np.zeros(d_v), np.ones(d_v))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("coord_mean", "coord_std", "value_mean", "value_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**{k: np.asarray(d[k]) for k in ("coord_mean", "coord_std", "value_mean", "value_std")})


@dataclass(frozen=True)
class NoiseSpec:
    scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scale < 0:
            raise DataError("noise scale must be >= 0")


# --- file formats ---------------------------------------------------------

def atomic_write(path, payload: bytes | str) -> None:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(tmp, mode, newline="" if mode == "w" else None) as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_snapshot_csv(path, snap: Snapshot, component_names: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(snap.d_x)] + list(component_names))
    # repr() round-trips float64 exactly
    for row in np.hstack([snap.coords, snap.values]):
        w.writerow([repr(float(v)) for v in row])
    atomic_write(path, buf.getvalue())


def load_snapshot_csv(path, d_x: int, d_v: int, snapshot_index: int = 0) -> Snapshot:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: M ≥ 2 violated (empty file)")
        if len(header) != d_x + d_v:
            raise DataError(f"{path}:1: expected {d_x + d_v} columns, header has {len(header)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d_x + d_v:
                raise DataError(f"{path}:{lineno}: expected {d_x + d_v} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if len(rows) < 2:
        raise DataError(f"{path}: M ≥ 2 violated ({len(rows)} rows)")
    arr = np.asarray(rows, dtype=np.float64)
    return Snapshot(arr[:, :d_x], arr[:, d_x:], snapshot_index)


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        man = json.loads(manifest_path.read_text())
        d_x, d_v = int(man["d_x"]), int(man["d_v"])
        files = list(man["snapshots"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{manifest_path}: malformed manifest ({exc})") from None
    names = list(man.get("components") or [f"c{i}" for i in range(d_v)])
    indices = man.get("indices") or list(range(len(files)))
    root = manifest_path.parent
    snaps = [load_snapshot_csv(root / f, d_x, d_v, idx) for f, idx in zip(files, indices)]
    return Dataset(snaps, d_x, d_v, names)


def save_dataset(ds: Dataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for s in ds:
        name = f"snapshot_{s.snapshot_index:05d}.csv"
        write_snapshot_csv(out_dir / name, s, ds.component_names)
        files.append(name)
    manifest = {"d_x": ds.d_x, "d_v": ds.d_v, "components": ds.component_names,
                "snapshots": files, "indices": [s.snapshot_index for s in ds]}
    path = out_dir / "manifest.json"
    atomic_write(path, json.dumps(manifest, indent=2) + "\n")
    return path


# --- splitting and sampling -------------------------------------------------

def sequential_split(ds: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """First ``floor(fraction * len)`` snapshots train, the rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie in (0, 1)")
    k = int(np.floor(train_fraction * len(ds)))
    if k == 0 or k == len(ds):
        raise DataError(f"split of {len(ds)} snapshots at {train_fraction} leaves one side empty")
    return ds.subset(ds.snapshots[:k]), ds.subset(ds.snapshots[k:])


def farthest_point_sampling(points: np.ndarray, m: int, start: int) -> np.ndarray:
    """Greedy max-min selection of ``m`` indices starting from ``start``."""
    if not 1 <= m <= points.shape[0]:
        raise DataError(f"cannot pick {m} of {points.shape[0]} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def sample_observations(snap: Snapshot, m: int, seed: int) -> ObservationSplit:
    """Farthest-point observation set of size ``m`` from a seeded random start."""
    if not 1 <= m < snap.n_points:
        raise DataError(f"need 1 <= m < M, got m={m}, M={snap.n_points}")
    start = int(np.random.default_rng(seed).integers(snap.n_points))
    return ObservationSplit.from_observed(farthest_point_sampling(snap.coords, m, start), snap.n_points)


class SplitPool:
    """Farthest-point observation sets, computed once per distinct point cloud.

    Training draws a fresh observation set per sequence; with a shared mesh
    re-running farthest-point sampling every step would dominate the cost,
    so ``size`` sets with different random starts are cached instead.
    """

    def __init__(self, size: int = 8, seed: int = 0):
        self.size = size
        self.seed = seed
        self._cache: dict[tuple[str, int], list[np.ndarray]] = {}

    def get(self, coords: np.ndarray, m: int) -> list[np.ndarray]:
        key = (hashlib.sha1(coords.tobytes()).hexdigest(), m)
        if key not in self._cache:
            rng = np.random.default_rng([self.seed, m, coords.shape[0]])
            starts = rng.choice(coords.shape[0], size=min(self.size, coords.shape[0]), replace=False)
            self._cache[key] = [np.sort(farthest_point_sampling(coords, m, int(s))) for s in starts]
        return self._cache[key]


def add_noise(snap: Snapshot, spec: NoiseSpec, train_std: np.ndarray) -> Snapshot:
    """Add N(0, (scale * train_std[c])^2) to every value of component c."""
    train_std = np.asarray(train_std, dtype=np.float64).reshape(-1)
    if np.any(train_std <= 0):
        raise DataError("train_std must be positive")
    if spec.scale == 0:
        return snap
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(snap.values.shape) * (spec.scale * train_std)
    return replace(snap, values=snap.values + noise)


def normalize(snap: Snapshot, stats: NormalizationStats) -> Snapshot:
    return replace(snap, coords=(snap.coords - stats.coord_mean) / stats.coord_std,
                   values=(snap.values - stats.value_mean) / stats.value_std)


def denormalize(snap: Snapshot, stats: NormalizationStats) -> Snapshot:
    return replace(snap, coords=snap.coords * stats.coord_std + stats.coord_mean,
                   values=snap.values * stats.value_std + stats.value_mean)
