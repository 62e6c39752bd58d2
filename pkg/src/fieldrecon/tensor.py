"""Minimal dense tensors with reverse-mode differentiation.

Only the primitives the reconstruction models need are provided. Operations
are recorded on the active :class:`Tape` when at least one input requires a
gradient; outside a tape every op is a plain numpy computation.

Example
-------
>>> w = Parameter("w", np.ones((2, 2)))
>>> with Tape() as tape:
...     loss = tsum(matmul(w, Tensor(np.eye(2))))
>>> backward(loss, tape)
>>> w.grad
array([[1., 1.],
       [1., 1.]], dtype=float32)
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Parameter", "Tape", "Adam", "AdamState",
    "ShapeError", "DomainError", "TapeStateError", "NonFiniteError",
    "set_debug", "default_dtype", "precision",
    "add", "sub", "mul", "div", "scale", "matmul", "transpose", "reshape",
    "index", "concat", "tsum", "tmean", "square", "sqrt", "softplus",
    "gelu", "layer_norm", "masked_softmax", "gaussian_nll", "backward",
    "gradcheck",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain of the primitive."""


class TapeStateError(RuntimeError):
    """Reverse accumulation requested on a tape that was already replayed."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf while debug checks were enabled."""


_DEBUG = os.environ.get("RECON_DEBUG", "0") not in ("", "0")
_DTYPE = np.dtype(np.float32)
_TAPES: list["Tape"] = []


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checks after every primitive."""
    global _DEBUG
    _DEBUG = bool(flag)


def default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are cast to."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    """Dense array plus the bookkeeping reverse accumulation needs."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)


class Parameter(Tensor):
    """Named trainable tensor whose gradient persists between steps."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {getattr(fn, '__qualname__', fn)}")
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPES[-1].nodes.append(_Node(out, tuple(inputs), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _emit(out, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _emit(out, (a,), lambda g: (g * sig,))


def gelu(a: Tensor) -> Tensor:
    """``x * Phi(x)`` with the exact normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _emit(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# --- shape and reductions --------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _emit(a.data @ b.data, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a: Tensor, key) -> Tensor:
    """Basic (slice) indexing; the gradient scatters back into zeros."""
    def fn(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)
    return _emit(a.data[key], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _emit(np.asarray(out), (a,), fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --- fused blocks ------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _emit(out, (x, gain, bias), fn)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = allowed).

    ``mask`` broadcasts against ``scores``; disallowed entries get exactly 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise DomainError("masked_softmax: a row has no allowed entries")
    y = np.where(mask, scores.data, -np.inf).astype(scores.data.dtype, copy=False)
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)        # exp(-inf) = 0 on masked entries
    y /= y.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _emit(y, (scores,), fn)


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_nll(mean: Tensor, sigma: Tensor, target) -> Tensor:
    """Mean Gaussian negative log likelihood over all elements."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=mean.data.dtype)
    if np.any(sigma.data <= 0):
        raise DomainError("gaussian_nll: sigma must be positive")
    n = mean.data.size
    r = target - mean.data
    s2 = sigma.data * sigma.data
    val = np.mean(np.log(sigma.data) + r * r / (2.0 * s2)) + _HALF_LOG_2PI

    def fn(g):
        return (g * (-r / s2) / n, g * (1.0 / sigma.data - r * r / (s2 * sigma.data)) / n)
    return _emit(np.asarray(val), (mean, sigma), fn)


# --- reverse accumulation -------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(parameter) into every parameter's ``grad``."""
    if tape.consumed:
        raise TapeStateError("backward already ran on this tape; run a new forward pass")
    if loss.data.size != 1:
        raise ShapeError("backward needs a scalar loss")
    tape.consumed = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            elif inp.grad is None:
                # backward functions may hand the same array to several inputs,
                # so non-parameter gradients are never updated in place
                inp.grad = np.asarray(gi, dtype=inp.data.dtype)
            else:
                inp.grad = inp.grad + gi
        if not isinstance(node.out, Parameter):
            node.out.grad = None
    tape.nodes.clear()


# --- optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias correction; ``weight_decay`` > 0 gives decoupled AdamW."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay)
        for p in self.params:
            self.state.m[p.name] = np.zeros_like(p.data)
            self.state.v[p.name] = np.zeros_like(p.data)

    def step(self) -> None:
        st = self.state
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        for p in self.params:
            g = p.grad
            m, v = st.m[p.name], st.v[p.name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + st.eps)
            if st.weight_decay:
                p.data -= (st.lr * st.weight_decay) * p.data
            p.data -= (st.lr * update).astype(p.data.dtype)
            p.zero_grad()


# --- gradient checking ------------------------------------------------------

def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-3,
              analytic_dtype=np.float32, floor: float = 1e-3) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    ``loss_fn`` must rebuild the forward pass from the current parameter data.
    The finite differences always run on a float64 copy. An entry's error is
    ``|a - n| / max(|a|, |n|, floor * max|n|)``.
    """
    originals = [p.data.copy() for p in params]

    def _run_analytic():
        for p, o in zip(params, originals):
            p.data = o.astype(analytic_dtype)
            p.zero_grad()
        with precision(analytic_dtype):
            with Tape() as tape:
                loss = loss_fn()
            backward(loss, tape)
        return [p.grad.astype(np.float64) for p in params]

    analytic = _run_analytic()
    numeric = []
    with precision(np.float64):
        for p, o in zip(params, originals):
            p.data = o.astype(np.float64)
        for p in params:
            flat = p.data.reshape(-1)
            g = np.zeros(flat.size)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                hi = loss_fn().item()
                flat[i] = keep - step
                lo = loss_fn().item()
                flat[i] = keep
                g[i] = (hi - lo) / (2.0 * step)
            numeric.append(g.reshape(p.shape))
    for p, o in zip(params, originals):
        p.data = o
        p.zero_grad()
    scale_ = max(float(np.abs(n).max()) for n in numeric) if numeric else 0.0
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale_, 1e-30))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
