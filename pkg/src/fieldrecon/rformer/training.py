"""Training loop: per-step subsampling of observations and query targets."""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .. import tensor as T
from ..data import Dataset, NormalizationStats, SplitPool, normalize
from .checkpoint import Checkpoint, save_checkpoint
from .model import RFormer, relative_rmse_loss

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    obs_fraction: float = 0.02
    n_obs: int | None = None          # overrides obs_fraction
    m_b: int = 256                    # observations per training sequence
    n_b: int = 256                    # query targets per training sequence
    lr: float = 1e-3
    seed: int = 0
    samples_per_snapshot: int | None = None   # None: cover each snapshot's queries about once per epoch
    split_pool: int = 8               # distinct observation sets cached per point cloud
    noise_scale: float = 0.0          # observation noise, in multiples of the training std
    strict: bool = False

    def observed_count(self, n_points: int) -> int:
        m = self.n_obs if self.n_obs is not None else int(round(self.obs_fraction * n_points))
        return int(min(max(m, 1), n_points - 1))


@contextlib.contextmanager
def deterministic(strict: bool):
    """Pin BLAS to one thread when strict reproducibility is requested."""
    if strict:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def _batch(snaps, idx, pool: SplitPool, cfg: TrainConfig, m_b: int, n_b: int,
           rng: np.random.Generator):
    d_x, d_v = snaps[0].d_x, snaps[0].d_v
    toks = np.zeros((len(idx), m_b + n_b, d_x + d_v))
    truth = np.empty((len(idx), n_b, d_v))
    for b, i in enumerate(idx):
        s = snaps[i]
        m = cfg.observed_count(s.n_points)
        sets = pool.get(s.coords, m)
        observed = sets[int(rng.integers(len(sets)))]
        is_obs = np.zeros(s.n_points, dtype=bool)
        is_obs[observed] = True
        ctx = np.sort(rng.choice(observed, size=m_b, replace=False))
        qry = np.sort(rng.choice(np.flatnonzero(~is_obs), size=n_b, replace=False))
        vals = s.values[ctx]
        if cfg.noise_scale > 0:
            vals = vals + cfg.noise_scale * rng.standard_normal(vals.shape)
        toks[b, :m_b, :d_x] = s.coords[ctx]
        toks[b, :m_b, d_x:] = vals
        toks[b, m_b:, :d_x] = s.coords[qry]
        truth[b] = s.values[qry]
    return toks, truth


def train(model: RFormer, train_set: Dataset, cfg: TrainConfig,
          stats: NormalizationStats | None = None, resume: Checkpoint | None = None,
          checkpoint_path=None, on_epoch: Callable[[int, Checkpoint], None] | None = None) -> Checkpoint:
    """Fit ``model`` in place and return a checkpoint with the loss history.

    Each epoch visits every training snapshot ``samples_per_snapshot`` times
    in a shuffled order. Every visit draws a farthest-point observation set,
    then ``m_b`` of its points as context and ``n_b`` unobserved points as
    targets. The batch loss is the mean per-sequence relative RMSE.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    stats = stats or NormalizationStats.from_dataset(train_set)
    snaps = [normalize(s, stats) for s in train_set]
    n_min = min(s.n_points for s in snaps)
    m_min = min(cfg.observed_count(s.n_points) for s in snaps)
    m_b = min(cfg.m_b, m_min)
    n_b = min(cfg.n_b, n_min - max(cfg.observed_count(s.n_points) for s in snaps))
    if m_b + n_b > model.cfg.max_seq_len:
        raise ValueError(f"m_b + n_b = {m_b + n_b} exceeds max_seq_len={model.cfg.max_seq_len}")
    per_snap = cfg.samples_per_snapshot or max(1, math.ceil((n_min - m_min) / n_b))
    pool = SplitPool(cfg.split_pool, cfg.seed)

    opt = T.Adam(model.params.values(), lr=cfg.lr)
    history: list[float] = []
    start_epoch = 0
    if resume is not None:
        opt.state = resume.optimizer
        opt.state.lr = cfg.lr
        history = list(resume.metadata.get("loss_history", []))
        start_epoch = int(resume.metadata.get("epoch", 0))

    meta = {"seed": cfg.seed, "train_config": asdict(cfg), "m_b": m_b, "n_b": n_b,
            "samples_per_snapshot": per_snap,
            "steps_per_epoch": math.ceil(len(snaps) * per_snap / cfg.batch_size)}
    ckpt = None
    with deterministic(cfg.strict):
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(np.repeat(np.arange(len(snaps)), per_snap))
            for start in range(0, order.size, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                toks, truth = _batch(snaps, idx, pool, cfg, m_b, n_b, rng)
                with T.Tape() as tape:
                    loss = relative_rmse_loss(model(toks, None, m_b), truth)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at step {len(history)} (epoch {epoch}); snapshots "
                        f"{[train_set[i].snapshot_index for i in idx]}")
                T.backward(loss, tape)
                opt.step()
                history.append(value)
            recent = history[-max(1, order.size // cfg.batch_size):]
            log.info("epoch %d/%d  loss %.5f  (%.1fs)", epoch + 1, cfg.epochs,
                     float(np.mean(recent)), time.perf_counter() - t0)
            ckpt = Checkpoint(model.cfg, model.params, stats,
                              dict(meta, epoch=epoch + 1, loss_history=history), opt.state)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, ckpt)
            if on_epoch is not None:
                on_epoch(epoch + 1, ckpt)
    if ckpt is None:
        ckpt = Checkpoint(model.cfg, model.params, stats,
                          dict(meta, epoch=start_epoch, loss_history=history), opt.state)
    return ckpt
