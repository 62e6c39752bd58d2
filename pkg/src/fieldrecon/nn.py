"""Layers shared by the transformer and neural-process models."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = ["ParameterStore", "linear", "mlp", "attention_block", "add_linear",
           "add_layer_norm", "add_attention_block",
           "masked_attention", "structured_attention"]


class ParameterStore(OrderedDict):
    """Ordered ``name -> Parameter`` mapping with seeded initialisation helpers."""

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self[name] = p
        return p

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(p.shape) for k, p in self.items()}

    def count(self) -> int:
        return int(sum(p.data.size for p in self.values()))


def add_linear(store: ParameterStore, prefix: str, fan_in: int, fan_out: int,
               rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    store.add(f"{prefix}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{prefix}.bias", np.zeros(fan_out))


def add_layer_norm(store: ParameterStore, prefix: str, d: int) -> None:
    store.add(f"{prefix}.gain", np.ones(d))
    store.add(f"{prefix}.bias", np.zeros(d))


def add_attention_block(store: ParameterStore, prefix: str, d: int, ffn_hidden: int,
                        rng: np.random.Generator) -> None:
    for name in ("query", "key", "value", "out"):
        add_linear(store, f"{prefix}.attn.{name}", d, d, rng)
    add_layer_norm(store, f"{prefix}.norm1", d)
    add_linear(store, f"{prefix}.ffn.0", d, ffn_hidden, rng)
    add_linear(store, f"{prefix}.ffn.1", ffn_hidden, d, rng)
    add_layer_norm(store, f"{prefix}.norm2", d)


def linear(x: Tensor, p: ParameterStore, prefix: str) -> Tensor:
    return T.add(T.matmul(x, p[f"{prefix}.weight"]), p[f"{prefix}.bias"])


def mlp(x: Tensor, p: ParameterStore, prefixes) -> Tensor:
    """Linear layers joined by GELU; no activation after the last."""
    prefixes = list(prefixes)
    for i, pre in enumerate(prefixes):
        x = linear(x, p, pre)
        if i < len(prefixes) - 1:
            x = T.gelu(x)
    return x


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Generic attention on ``[B, H, s, dh]`` heads under a boolean mask."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    mask = np.asarray(mask, dtype=bool)
    mask = mask[:, None] if mask.ndim == 3 else mask[None, None]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    return T.matmul(T.masked_softmax(scores, mask), v)


def structured_attention(q: Tensor, k: Tensor, v: Tensor, n_obs: int, causal: bool = True) -> Tensor:
    """Attention for an observations-first sequence under the reconstruction mask.

    Equal to :func:`masked_attention` with ``build_mask`` roles
    ``[OBS] * n_obs + [QUERY] * rest`` but never forms query-query scores:
    observation rows use a causal ``m x m`` block (full block when
    ``causal`` is False), query rows see the ``m`` observation keys plus
    their own key.
    """
    m = n_obs
    scale = 1.0 / math.sqrt(q.shape[-1])
    obs, qry = (slice(None), slice(None), slice(0, m)), (slice(None), slice(None), slice(m, None))
    k_obs_t = T.transpose(T.index(k, obs), (0, 1, 3, 2))
    v_obs = T.index(v, obs)
    allowed = np.tril(np.ones((m, m), dtype=bool)) if causal else np.ones((1, m), dtype=bool)
    s_oo = T.scale(T.matmul(T.index(q, obs), k_obs_t), scale)
    out_obs = T.matmul(T.masked_softmax(s_oo, allowed), v_obs)
    if q.shape[2] == m:
        return out_obs
    q_q, k_q, v_q = T.index(q, qry), T.index(k, qry), T.index(v, qry)
    s_qo = T.matmul(q_q, k_obs_t)
    s_qq = T.tsum(T.mul(q_q, k_q), axis=-1, keepdims=True)
    w = T.masked_softmax(T.scale(T.concat([s_qo, s_qq], axis=-1), scale),
                         np.ones((1, m + 1), dtype=bool))
    last = (slice(None), slice(None), slice(None))
    out_q = T.add(T.matmul(T.index(w, last + (slice(0, m),)), v_obs),
                  T.mul(T.index(w, last + (slice(m, m + 1),)), v_q))
    return T.concat([out_obs, out_q], axis=2)


def attention_block(h: Tensor, p: ParameterStore, prefix: str, heads: int,
                    mask: np.ndarray | None = None, n_obs: int | None = None,
                    causal: bool = True) -> Tensor:
    """Post-norm block: ``LN(h + MHA(h))`` then ``LN(h + FFN(h))``.

    ``h`` is ``[B, s, d]``. Either pass a boolean ``mask`` (``[s, s]`` or
    ``[B, s, s]``, True where the row token may attend to the column token)
    or ``n_obs`` to use the structured reconstruction mask without
    materialising it.
    """
    q = _split_heads(linear(h, p, f"{prefix}.attn.query"), heads)
    k = _split_heads(linear(h, p, f"{prefix}.attn.key"), heads)
    v = _split_heads(linear(h, p, f"{prefix}.attn.value"), heads)
    if mask is not None:
        att = masked_attention(q, k, v, mask)
    else:
        att = structured_attention(q, k, v, n_obs, causal)
    att = _merge_heads(att)
    h = T.layer_norm(T.add(h, linear(att, p, f"{prefix}.attn.out")),
                     p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"])
    f = linear(T.gelu(linear(h, p, f"{prefix}.ffn.0")), p, f"{prefix}.ffn.1")
    return T.layer_norm(T.add(h, f), p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"])
