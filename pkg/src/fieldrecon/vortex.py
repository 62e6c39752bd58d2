"""Analytic Karman-street surrogate built from Lamb-Oseen vortices.

Two staggered rows of vortices with opposite circulation ride on a uniform
stream and advect downstream at a fixed speed. Velocities are evaluated in
closed form, so snapshots can be sampled at arbitrary points without a mesh.
The pressure channel is the Bernoulli surrogate ``-(u^2 + v^2 - U^2) / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Snapshot

__all__ = ["VortexStreetConfig", "ConfigError", "vortex_centers", "induced_velocity",
           "street_fields", "sample_cells", "sample_points", "generate_vortex_street"]


class ConfigError(ValueError):
    """Invalid generator configuration."""


@dataclass(frozen=True)
class VortexStreetConfig:
    x_min: float = 0.0
    x_max: float = 12.0
    y_min: float = -3.0
    y_max: float = 3.0
    n_points: int = 5000
    n_snapshots: int = 100
    freestream: float = 1.0
    circulation: float = 1.2
    core_radius: float = 0.35
    spacing: float = 2.0          # streamwise distance between like-signed vortices
    row_gap: float = 0.6          # cross-stream distance between the rows
    advection: float = 0.8
    dt: float = 0.37
    n_pairs: int = 12             # truncation of the infinite street
    shared_points: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.core_radius <= 0:
            raise ConfigError("core_radius must be positive")
        if self.freestream <= 0:
            raise ConfigError("freestream must be positive")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError("box must satisfy min < max on every axis")
        if self.n_points < 2 or self.n_snapshots < 1 or self.n_pairs < 1:
            raise ConfigError("n_points >= 2, n_snapshots >= 1 and n_pairs >= 1 required")
        if self.spacing <= 0 or self.dt <= 0:
            raise ConfigError("spacing and dt must be positive")


def vortex_centers(t: float, cfg: VortexStreetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Centres ``[2K, 2]`` and circulations ``[2K]`` of the truncated street at time ``t``.

    The window holds the ``K`` pairs nearest the middle of the box.
    """
    x_mid = 0.5 * (cfg.x_min + cfg.x_max)
    kc = int(np.round((x_mid - cfg.x_min - cfg.advection * t) / cfg.spacing))
    ks = np.arange(kc - cfg.n_pairs // 2 + 1, kc - cfg.n_pairs // 2 + 1 + cfg.n_pairs)
    base = cfg.x_min + cfg.advection * t + ks * cfg.spacing
    upper = np.column_stack([base, np.full(ks.size, 0.5 * cfg.row_gap)])
    lower = np.column_stack([base + 0.5 * cfg.spacing, np.full(ks.size, -0.5 * cfg.row_gap)])
    centers = np.vstack([upper, lower])
    circ = np.concatenate([np.full(ks.size, -cfg.circulation), np.full(ks.size, cfg.circulation)])
    return centers, circ


def induced_velocity(points: np.ndarray, centers: np.ndarray, circ: np.ndarray,
                     core_radius: float) -> np.ndarray:
    """Summed Lamb-Oseen velocity ``[N, 2]``; zero at each vortex's own centre."""
    dx = points[:, None, 0] - centers[None, :, 0]
    dy = points[:, None, 1] - centers[None, :, 1]
    r2 = dx * dx + dy * dy
    rc2 = core_radius * core_radius
    with np.errstate(divide="ignore", invalid="ignore"):
        f = -np.expm1(-r2 / rc2) / r2
    f = np.where(r2 > 0, f, 1.0 / rc2)
    f = f * (circ / (2.0 * np.pi))[None, :]
    return np.column_stack([(-dy * f).sum(axis=1), (dx * f).sum(axis=1)])


def street_fields(points: np.ndarray, t: float, cfg: VortexStreetConfig) -> np.ndarray:
    """``[N, 3]`` array of (u, v, p) at ``points`` and time ``t``."""
    centers, circ = vortex_centers(t, cfg)
    vel = induced_velocity(points, centers, circ, cfg.core_radius)
    vel[:, 0] += cfg.freestream
    p = -0.5 * (vel[:, 0] ** 2 + vel[:, 1] ** 2 - cfg.freestream ** 2)
    return np.column_stack([vel, p])


def sample_cells(cfg: VortexStreetConfig, rng: np.random.Generator) -> tuple[np.ndarray, int, int]:
    """``M`` distinct cells of an ``nx x ny`` grid covering the box, in row-major order."""
    lx, ly = cfg.x_max - cfg.x_min, cfg.y_max - cfg.y_min
    nx = int(np.ceil(np.sqrt(cfg.n_points * lx / ly)))
    ny = int(np.ceil(cfg.n_points / nx))
    return np.sort(rng.choice(nx * ny, size=cfg.n_points, replace=False)), nx, ny


def sample_points(cfg: VortexStreetConfig, cells: np.ndarray, nx: int, ny: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Stratified-jittered points: one uniform draw inside each cell."""
    lx, ly = cfg.x_max - cfg.x_min, cfg.y_max - cfg.y_min
    ix, iy = cells % nx, cells // nx
    jitter = rng.random((cells.size, 2))
    return np.column_stack([cfg.x_min + (ix + jitter[:, 0]) * lx / nx,
                            cfg.y_min + (iy + jitter[:, 1]) * ly / ny])


def generate_vortex_street(cfg: VortexStreetConfig) -> Dataset:
    """Analytic vortex-street snapshots at times ``0, dt, 2 dt, ...``.

    The occupied cells (and so the point ordering) are drawn once per
    dataset; each snapshot jitters its points independently inside those
    cells, so snapshots share an ordering but not a mesh. With
    ``shared_points`` every snapshot uses the same points.
    """
    cfg.validate()
    base = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2**32 - 1]))
    cells, nx, ny = sample_cells(cfg, base)
    shared = sample_points(cfg, cells, nx, ny, base) if cfg.shared_points else None
    snaps = []
    for i in range(cfg.n_snapshots):
        pts = shared if shared is not None else sample_points(
            cfg, cells, nx, ny, np.random.default_rng(np.random.SeedSequence([cfg.seed, i])))
        snaps.append(Snapshot(pts, street_fields(pts, i * cfg.dt, cfg), i))
    return Dataset(snaps, 2, 3, ["u", "v", "p"])
