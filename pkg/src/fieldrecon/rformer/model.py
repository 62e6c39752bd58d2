"""Decoder-only reconstruction transformer: tokens, mask, forward pass, loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..data import NormalizationStats, ObservationSplit, Snapshot, normalize
from ..nn import ParameterStore, add_attention_block, add_linear, attention_block, linear, mlp
from ..tensor import Tensor

OBS = 0
QUERY = 1


class SequenceTooLongError(ValueError):
    """The token sequence exceeds ``max_seq_len``; reconstruct in chunks instead."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 8
    d_token: int = 128
    ffn_hidden: int = 128
    head_hidden: int = 128
    max_seq_len: int = 1024
    d_x: int = 2
    d_v: int = 3

    def __post_init__(self):
        if self.d_token % self.num_heads:
            raise ValueError(f"d_token={self.d_token} is not divisible by num_heads={self.num_heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if min(self.num_layers, self.ffn_hidden, self.head_hidden, self.d_x, self.d_v) < 1:
            raise ValueError("layer counts and widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    tokens: np.ndarray   # [s, d_x + d_v]
    roles: np.ndarray    # [s], OBS or QUERY
    origin: np.ndarray   # [s], point index in the snapshot

    @property
    def n_obs(self) -> int:
        return int(np.sum(self.roles == OBS))

    def __len__(self) -> int:
        return self.tokens.shape[0]


def build_tokens(snap: Snapshot, split: ObservationSplit, stats: NormalizationStats | None = None,
                 max_seq_len: int | None = None) -> TokenSequence:
    """Observation tokens ``[x, v]`` first, then query tokens ``[x, 0]``.

    If ``stats`` is given the snapshot is normalised first; otherwise it is
    assumed to be normalised already.
    """
    s = split.m + split.n
    if max_seq_len is not None and s > max_seq_len:
        raise SequenceTooLongError(
            f"{s} tokens exceed max_seq_len={max_seq_len}; use reconstruct_chunked")
    if stats is not None:
        snap = normalize(snap, stats)
    obs = np.hstack([snap.coords[split.observed], snap.values[split.observed]])
    qry = np.hstack([snap.coords[split.query], np.zeros((split.n, snap.d_v))])
    roles = np.concatenate([np.full(split.m, OBS), np.full(split.n, QUERY)]).astype(np.int8)
    return TokenSequence(np.vstack([obs, qry]), roles,
                         np.concatenate([split.observed, split.query]))


def build_mask(roles) -> np.ndarray:
    """Boolean ``[s, s]`` attend-permission matrix (row attends to column).

    Query rows see every observation plus themselves; observation rows see
    observations at or before their own position.
    """
    roles = np.asarray(roles)
    if roles.size == 0 or not np.any(roles == OBS):
        raise ValueError("roles must be non-empty and contain at least one observation")
    s = roles.size
    is_obs = roles == OBS
    pos = np.arange(s)
    causal = pos[None, :] <= pos[:, None]
    allowed = np.where(is_obs[:, None], causal & is_obs[None, :], is_obs[None, :])
    allowed |= np.eye(s, dtype=bool) & ~is_obs[:, None]
    return allowed


def init_parameters(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    p = ParameterStore()
    add_linear(p, "embed", cfg.d_x + cfg.d_v, cfg.d_token, rng)
    for i in range(cfg.num_layers):
        add_attention_block(p, f"blocks.{i}", cfg.d_token, cfg.ffn_hidden, rng)
    add_linear(p, "head.0", cfg.d_token, cfg.head_hidden, rng)
    add_linear(p, "head.1", cfg.head_hidden, cfg.d_v, rng)
    return p


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return init_parameters(cfg).shapes()


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in expected_shapes(cfg).values()))


def forward(tokens, mask: np.ndarray | None, params: ParameterStore, cfg: ModelConfig,
            n_obs: int) -> Tensor:
    """Predictions at query positions.

    ``tokens`` is ``[B, s, d_x + d_v]`` (or ``[s, d_x + d_v]``) with all
    observations before the queries; the result is ``[B, s - n_obs, d_v]``
    (batch axis dropped for unbatched input). With ``mask=None`` the
    reconstruction mask for ``n_obs`` observations is applied implicitly,
    which skips the query-query score block.
    """
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    if data.shape[-1] != cfg.d_x + cfg.d_v:
        raise T.ShapeError(f"tokens have {data.shape[-1]} channels, model expects {cfg.d_x + cfg.d_v}")
    if data.shape[1] > cfg.max_seq_len:
        raise SequenceTooLongError(f"{data.shape[1]} tokens exceed max_seq_len={cfg.max_seq_len}")
    h = linear(Tensor(data), params, "embed")
    for i in range(cfg.num_layers):
        h = attention_block(h, params, f"blocks.{i}", cfg.num_heads, mask, n_obs)
    hq = T.index(h, (slice(None), slice(n_obs, None)))
    out = mlp(hq, params, ["head.0", "head.1"])
    return T.reshape(out, out.shape[1:]) if squeeze else out


def relative_rmse_loss(pred: Tensor, truth) -> Tensor:
    """Mean over sequences of ``||pred - truth|| / ||truth||``.

    Accepts ``[n, d_v]`` (one sequence) or ``[B, n, d_v]``.
    """
    truth = np.asarray(truth, dtype=pred.data.dtype)
    if truth.shape != pred.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    batched = truth.ndim == 3
    axes = (1, 2) if batched else None
    norms = np.sqrt(np.sum(truth.astype(np.float64) ** 2, axis=axes))
    if np.any(norms == 0):
        raise ValueError("relative RMSE is undefined for an all-zero target")
    err = T.sqrt(T.tsum(T.square(T.sub(pred, truth)), axis=axes))
    ratio = T.div(err, norms.astype(pred.data.dtype))
    return T.tmean(ratio) if batched else ratio


class RFormer:
    """Parameters plus configuration; a thin handle used by training and inference."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: ParameterStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        want = expected_shapes(cfg)
        if self.params.shapes() != want:
            raise ValueError("parameter names/shapes do not match the model configuration")

    def __call__(self, tokens, mask, n_obs) -> Tensor:
        return forward(tokens, mask, self.params, self.cfg, n_obs)

    def predict_sequence(self, seq: TokenSequence) -> np.ndarray:
        """Query predictions ``[n, d_v]`` (normalised units) for one sequence."""
        m = seq.n_obs
        obs_first = bool(np.all(seq.roles[:m] == OBS))
        out = self(seq.tokens, None if obs_first else build_mask(seq.roles), m)
        return out.data.astype(np.float64)

    def n_parameters(self) -> int:
        return self.params.count()
