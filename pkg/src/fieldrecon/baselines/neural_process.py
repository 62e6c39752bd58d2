"""Conditional and transformer neural processes trained with a Gaussian likelihood.

Both models map a context set of ``(x, v)`` pairs and target locations to a
per-target mean and standard deviation ``sigma = 0.1 + 0.9 * softplus(raw)``.

CNP
    A pointwise MLP encoder, mean pooling over the context, and an MLP decoder
    applied to ``[r, x_target]``.
TNP
    Context tokens ``[x, v]`` and target tokens ``[x, 0]`` plus a learned role
    embedding pass through transformer blocks. Context attends to context,
    each target attends to the context and to itself, so targets never
    influence each other.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..base import BaseReconstructor, check_dataset, check_is_fitted, check_snapshot_split
from ..data import Dataset, NormalizationStats, ObservationSplit, Snapshot, SplitPool, normalize
from ..nn import ParameterStore, add_attention_block, add_linear, attention_block, linear, mlp
from ..rformer.training import TrainingError, deterministic
from ..tensor import Tensor

log = logging.getLogger(__name__)

SIGMA_FLOOR = 0.1


@dataclass(frozen=True)
class NpConfig:
    """Hyperparameters of a neural-process baseline.

    ``kind`` is ``"cnp"`` or ``"tnp"``. Use :meth:`cnp` / :meth:`tnp` for the
    default settings of each.
    """

    kind: str = "cnp"
    hidden: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 3
    transformer_layers: int = 4
    heads: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 10000
    max_query: int = 2048
    context_as_targets: bool = True
    obs_fraction: float = 0.02
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        if self.kind not in ("cnp", "tnp"):
            raise ValueError(f"kind must be 'cnp' or 'tnp', got {self.kind!r}")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.decoder_layers < 2:
            raise ValueError("decoder_layers must be >= 2")
        if min(self.hidden, self.encoder_layers, self.transformer_layers,
               self.batch_size, self.max_query) < 1:
            raise ValueError("sizes must be positive")

    @classmethod
    def cnp(cls, **kw) -> "NpConfig":
        return cls(**{"kind": "cnp", **kw})

    @classmethod
    def tnp(cls, **kw) -> "NpConfig":
        base = dict(kind="tnp", epochs=1000, weight_decay=0.01)
        return cls(**{**base, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


# --- parameters and forward passes -----------------------------------------

def init_np_parameters(cfg: NpConfig, d_x: int, d_v: int, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    p = ParameterStore()
    h = cfg.hidden
    if cfg.kind == "cnp":
        add_linear(p, "encoder.0", d_x + d_v, h, rng)
        for i in range(1, cfg.encoder_layers):
            add_linear(p, f"encoder.{i}", h, h, rng)
        # first decoder layer acts on [r, x_target]
        add_linear(p, "decoder.0", h + d_x, h, rng)
        for i in range(1, cfg.decoder_layers - 1):
            add_linear(p, f"decoder.{i}", h, h, rng)
        add_linear(p, f"decoder.{cfg.decoder_layers - 1}", h, 2 * d_v, rng)
    else:
        add_linear(p, "embed", d_x + d_v, h, rng)
        p.add("role", rng.normal(scale=0.02, size=(2, h)))
        for i in range(cfg.transformer_layers):
            add_attention_block(p, f"blocks.{i}", h, h, rng)
        add_linear(p, "head.0", h, h, rng)
        add_linear(p, "head.1", h, 2 * d_v, rng)
    return p


def _mean_sigma(out: Tensor, d_v: int) -> tuple[Tensor, Tensor]:
    mean = T.index(out, (..., slice(0, d_v)))
    raw = T.index(out, (..., slice(d_v, 2 * d_v)))
    return mean, T.add(T.scale(T.softplus(raw), 1.0 - SIGMA_FLOOR), SIGMA_FLOOR)


def cnp_forward(params: ParameterStore, cfg: NpConfig, context, targets) -> tuple[Tensor, Tensor]:
    """Mean and sigma ``[B, n, d_v]`` from context ``[B, m, d_x + d_v]`` and targets ``[B, n, d_x]``."""
    ctx = Tensor(np.asarray(context, dtype=T.default_dtype()))
    xt = Tensor(np.asarray(targets, dtype=T.default_dtype()))
    b, n, d_x = xt.shape
    h = cfg.hidden
    r = T.tmean(mlp(ctx, params, [f"encoder.{i}" for i in range(cfg.encoder_layers)]), axis=1)
    w0 = params["decoder.0.weight"]
    z = T.add(T.matmul(xt, T.index(w0, (slice(h, h + d_x),))),
              T.reshape(T.matmul(r, T.index(w0, (slice(0, h),))), (b, 1, h)))
    z = T.gelu(T.add(z, params["decoder.0.bias"]))
    out = mlp(z, params, [f"decoder.{i}" for i in range(1, cfg.decoder_layers)])
    return _mean_sigma(out, out.shape[-1] // 2)


def tnp_embed(params: ParameterStore, context, targets) -> tuple[Tensor, Tensor]:
    """Token encodings: ``[x, v]`` (context) and ``[x, 0]`` (targets), embedded plus role rows."""
    ctx = np.asarray(context, dtype=T.default_dtype())
    xt = np.asarray(targets, dtype=T.default_dtype())
    d_v = ctx.shape[-1] - xt.shape[-1]
    tgt = np.concatenate([xt, np.zeros(xt.shape[:-1] + (d_v,), dtype=xt.dtype)], axis=-1)
    role = params["role"]
    hc = T.add(linear(Tensor(ctx), params, "embed"), T.index(role, (slice(0, 1),)))
    ht = T.add(linear(Tensor(tgt), params, "embed"), T.index(role, (slice(1, 2),)))
    return hc, ht


def tnp_forward(params: ParameterStore, cfg: NpConfig, context, targets) -> tuple[Tensor, Tensor]:
    """Same contract as :func:`cnp_forward` for the transformer variant.

    Context tokens attend to each other bidirectionally; each target attends
    to the context and itself, never to other targets, so predictions do not
    depend on how targets are chunked.
    """
    hc, ht = tnp_embed(params, context, targets)
    m = hc.shape[1]
    d_v = np.shape(context)[-1] - np.shape(targets)[-1]
    h = T.concat([hc, ht], axis=1)
    for i in range(cfg.transformer_layers):
        h = attention_block(h, params, f"blocks.{i}", cfg.heads, n_obs=m, causal=False)
    out = mlp(T.index(h, (slice(None), slice(m, None))), params, ["head.0", "head.1"])
    return _mean_sigma(out, d_v)


def np_forward(params, cfg: NpConfig, context, targets) -> tuple[Tensor, Tensor]:
    fn = cnp_forward if cfg.kind == "cnp" else tnp_forward
    return fn(params, cfg, context, targets)


# --- training and prediction ----------------------------------------------

@dataclass
class NpModel:
    cfg: NpConfig
    params: ParameterStore
    stats: NormalizationStats
    d_x: int
    d_v: int
    loss_history: list


def _np_batch(snaps, idx, pool: SplitPool, cfg: NpConfig, rng: np.random.Generator):
    s0 = snaps[idx[0]]
    m = int(min(max(round(cfg.obs_fraction * s0.n_points), 1), s0.n_points - 1))
    n_q = min(cfg.max_query, s0.n_points - m)
    ctx, xt, yt = [], [], []
    for i in idx:
        s = snaps[i]
        sets = pool.get(s.coords, m)
        observed = sets[int(rng.integers(len(sets)))]
        rest = np.setdiff1d(np.arange(s.n_points), observed)
        qry = np.sort(rng.choice(rest, size=n_q, replace=False))
        tgt = np.concatenate([observed, qry]) if cfg.context_as_targets else qry
        ctx.append(np.hstack([s.coords[observed], s.values[observed]]))
        xt.append(s.coords[tgt])
        yt.append(s.values[tgt])
    return np.stack(ctx), np.stack(xt), np.stack(yt)


def train_neural_process(train_set: Dataset, cfg: NpConfig,
                         stats: NormalizationStats | None = None) -> NpModel:
    """Fit a CNP or TNP by minimising the Gaussian negative log likelihood.

    An epoch is one shuffled pass over the training snapshots in batches of
    ``batch_size``. Each snapshot contributes its farthest-point context and
    at most ``max_query`` random non-context targets, plus the context
    points themselves when ``context_as_targets`` is set.
    """
    check_dataset(train_set)
    if len({s.n_points for s in train_set}) != 1:
        raise ValueError("neural-process batches need snapshots with equal point counts")
    stats = stats or NormalizationStats.from_dataset(train_set)
    snaps = [normalize(s, stats) for s in train_set]
    params = init_np_parameters(cfg, train_set.d_x, train_set.d_v, cfg.seed)
    opt = T.Adam(params.values(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    pool = SplitPool(8, cfg.seed)
    history = []
    with deterministic(cfg.strict):
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(snaps))
            losses = []
            for start in range(0, order.size, cfg.batch_size):
                ctx, xt, yt = _np_batch(snaps, order[start:start + cfg.batch_size], pool, cfg, rng)
                with T.Tape() as tape:
                    mean, sigma = np_forward(params, cfg, ctx, xt)
                    loss = T.gaussian_nll(mean, sigma, yt)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite {cfg.kind} loss in epoch {epoch}")
                T.backward(loss, tape)
                opt.step()
                losses.append(value)
            history.append(float(np.mean(losses)))
            log.debug("%s epoch %d/%d  nll %.5f  (%.2fs)", cfg.kind, epoch + 1, cfg.epochs,
                      history[-1], time.perf_counter() - t0)
    return NpModel(cfg, params, stats, train_set.d_x, train_set.d_v, history)


def np_predict(model: NpModel, snap: Snapshot, split: ObservationSplit,
               return_sigma: bool = False):
    """Posterior mean ``[n, d_v]`` (and sigma) at the query points, physical units.

    Queries are processed in chunks of ``max_query`` with the full context.
    """
    check_snapshot_split(snap, split)
    norm = normalize(snap, model.stats)
    ctx = np.hstack([norm.coords[split.observed], norm.values[split.observed]])[None]
    xq = norm.coords[split.query]
    mean = np.empty((xq.shape[0], model.d_v))
    sig = np.empty_like(mean)
    step = model.cfg.max_query
    for s in range(0, xq.shape[0], step):
        mu, sd = np_forward(model.params, model.cfg, ctx, xq[None, s:s + step])
        mean[s:s + step] = mu.data[0]
        sig[s:s + step] = sd.data[0]
    mean = mean * model.stats.value_std + model.stats.value_mean
    if return_sigma:
        return mean, sig * model.stats.value_std
    return mean


class _NeuralProcess(BaseReconstructor):
    requires_fit = True
    _kind = "cnp"

    def _config(self) -> NpConfig:
        make = NpConfig.cnp if self._kind == "cnp" else NpConfig.tnp
        return make(**self.get_params())

    def fit(self, train: Dataset | None = None):
        if train is None:
            raise ValueError(f"{type(self).__name__}.fit needs a training dataset")
        self.model_ = train_neural_process(train, self._config())
        return self

    def predict(self, snap, split):
        check_is_fitted(self, "model_")
        return np_predict(self.model_, snap, split)


class CNP(_NeuralProcess):
    """Conditional neural process baseline. Parameters mirror :class:`NpConfig`."""

    _kind = "cnp"

    def __init__(self, hidden=128, encoder_layers=4, decoder_layers=3, lr=1e-4, batch_size=64,
                 epochs=10000, max_query=2048, context_as_targets=True, obs_fraction=0.02,
                 seed=0, strict=False):
        self.hidden = hidden
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_query = max_query
        self.context_as_targets = context_as_targets
        self.obs_fraction = obs_fraction
        self.seed = seed
        self.strict = strict


class TNP(_NeuralProcess):
    """Transformer neural process baseline (AdamW). Parameters mirror :class:`NpConfig`."""

    _kind = "tnp"

    def __init__(self, hidden=128, transformer_layers=4, heads=4, lr=1e-4, weight_decay=0.01,
                 batch_size=64, epochs=1000, max_query=2048, context_as_targets=True,
                 obs_fraction=0.02, seed=0, strict=False):
        self.hidden = hidden
        self.transformer_layers = transformer_layers
        self.heads = heads
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_query = max_query
        self.context_as_targets = context_as_targets
        self.obs_fraction = obs_fraction
        self.seed = seed
        self.strict = strict
