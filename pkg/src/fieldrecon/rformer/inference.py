"""Full-field reconstruction with query chunking."""

from __future__ import annotations

import math

import numpy as np

from ..data import NormalizationStats, ObservationSplit, Snapshot, normalize
from .model import RFormer


def chunk_plan(n_query: int, chunk: int) -> list[np.ndarray]:
    """Query positions ``0..n_query-1`` cut into consecutive chunks of ``chunk``."""
    return [np.arange(c * chunk, min((c + 1) * chunk, n_query))
            for c in range(math.ceil(n_query / chunk))]


def select_context(split: ObservationSplit, max_context: int | None, seed: int) -> np.ndarray:
    """Observation subset fed to the model; all of them unless ``max_context`` binds."""
    if max_context is None or split.m <= max_context:
        return split.observed
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(split.observed, size=max_context, replace=False))


def reconstruct_chunked(model: RFormer, snap: Snapshot, split: ObservationSplit,
                        stats: NormalizationStats, chunk_budget: int | None = None,
                        max_context: int | None = None, batch_chunks: int = 4,
                        context_seed: int | None = None) -> np.ndarray:
    """Reconstruct the full ``[M, d_v]`` field of ``snap`` in physical units.

    One observation set is reused for every chunk of at most ``chunk_budget``
    queries (default and cap: ``max_seq_len - m``). Observed rows of the
    result carry the observed values.
    """
    cfg = model.cfg
    context = select_context(split, max_context,
                             snap.snapshot_index if context_seed is None else context_seed)
    m = context.size
    if m > cfg.max_seq_len - 1:
        raise ValueError(f"m={m} observations leave no room for queries within "
                         f"max_seq_len={cfg.max_seq_len}")
    chunk = cfg.max_seq_len - m if chunk_budget is None else min(chunk_budget, cfg.max_seq_len - m)
    if chunk < 1:
        raise ValueError("chunk_budget must be >= 1")

    norm = normalize(snap, stats)
    obs_tok = np.hstack([norm.coords[context], norm.values[context]])
    qidx = split.query
    chunks = chunk_plan(qidx.size, chunk)
    width = min(chunk, qidx.size)

    pred = np.empty((qidx.size, snap.d_v))
    for start in range(0, len(chunks), batch_chunks):
        group = chunks[start:start + batch_chunks]
        toks = np.empty((len(group), m + width, cfg.d_x + cfg.d_v))
        for b, idx in enumerate(group):
            padded = np.concatenate([idx, np.full(width - idx.size, idx[0])]).astype(np.int64)
            pts = qidx[padded]
            toks[b, :m] = obs_tok
            toks[b, m:, :cfg.d_x] = norm.coords[pts]
            toks[b, m:, cfg.d_x:] = 0.0
        out = model(toks, None, m).data.astype(np.float64)
        for b, idx in enumerate(group):
            pred[idx] = out[b, :idx.size]

    field = np.full_like(snap.values, np.nan)
    field[split.observed] = snap.values[split.observed]
    field[qidx] = pred * stats.value_std + stats.value_mean
    return field
