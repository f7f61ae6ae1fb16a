"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations record their parents and a
closure mapping the output gradient to parent gradients; ``Tensor.backward``
walks the graph in reverse topological order. Gradients accumulate into
``.grad`` on leaf tensors only, so two backward passes through the same leaf
add up.

Randomness comes from numpy's ``Generator`` over the PCG64 bit generator
(see :func:`make_rng`), which yields identical streams on every platform for
a given seed.
"""

from __future__ import annotations

import contextlib
import math
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import EmptyTargetError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: numpy ``Generator`` over PCG64 seeded with a u64."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        """Propagate gradients from this tensor to every reachable leaf."""
        if not self.requires_grad:
            raise NumericError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    cdf = special.ndtr(x.data)
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _result((x.data * cdf).astype(x.dtype), (x,),
                   lambda g: ((g * (cdf + x.data * pdf)).astype(x.dtype),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: ((g * special.expit(x.data)).astype(x.dtype),))


def normal_cdf(x: Tensor) -> Tensor:
    out = special.ndtr(x.data).astype(x.dtype)
    pdf = (np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * pdf,))


# -- shape and reduction ops ---------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)
    return _result(x.data[index], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, back)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; grads flow to both operands."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return _result(a.data @ b.data, (a, b), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``-inf`` entries are allowed (they come out as exact zeros); NaN is not.
    """
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return _result(p, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx,
                _unbroadcast(g * xhat, gamma.shape),
                _unbroadcast(g, beta.shape))
    return _result(out.astype(x.dtype), (x, gamma, beta), back)


# -- indexing ----------------------------------------------------------------

def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows along axis -2.

    ``idx`` is ``(K,)`` for a matrix, or ``(..., K)`` matching the leading
    batch axes of ``x``. Backward scatters into the selected rows only.
    """
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows: {idx.min()}..{idx.max()}")
    if idx.ndim == 1:
        out = x.data[..., idx, :]

        def back(g):
            full = np.zeros_like(x.data)
            np.add.at(full, (..., idx, slice(None)), g)
            return (full,)
        return _result(out, (x,), back)
    ix = idx[..., None]
    out = np.take_along_axis(x.data, ix, axis=-2)

    def back(g):
        full = np.zeros_like(x.data)
        lead = np.indices(idx.shape)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)
    return _result(out, (x,), back)


def scatter_add_rows(src: Tensor, idx, n: int) -> Tensor:
    """Rows of ``src`` summed into a zero ``(n, D)`` matrix at ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src.data)
    return _result(out, (src,), lambda g: (g[idx],))


def take_along(x: Tensor, idx, axis: int = -1) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        full = np.zeros_like(x.data)
        ax = axis % x.ndim
        grids = list(np.indices(idx.shape))
        grids[ax] = idx
        np.add.at(full, tuple(grids), g)
        return (full,)
    return _result(np.take_along_axis(x.data, idx, axis=axis), (x,), back)


# -- losses ------------------------------------------------------------------

def cross_entropy_masked(logits: Tensor, targets, ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood over pixels whose target is not ``ignore_index``.

    ``logits`` is ``(..., C)`` and ``targets`` matches its leading shape.
    """
    targets = np.asarray(targets)
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    valid = t != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise EmptyTargetError("every target equals ignore_index")
    tv = t[valid].astype(np.intp)
    if tv.min() < 0 or tv.max() >= c:
        raise IndexError(f"target label out of range [0, {c})")
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, tv].sum() / count

    def back(g):
        p = np.exp(logp)
        p[~valid] = 0.0
        p[rows, tv] -= 1.0
        return ((p * (g / count)).reshape(logits.shape).astype(logits.dtype),)
    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# -- gradient oracle -----------------------------------------------------------

def finite_diff_check(f: Callable[..., Tensor], xs: Sequence[Tensor], h: float = 1e-4,
                      max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f(*xs)`` must return a scalar tensor. Each relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``. When ``max_entries``
    is set, at most that many entries of each input are probed, chosen with
    ``rng``.
    """
    xs = list(xs)
    for x in xs:
        x.requires_grad = True
        x.grad = np.zeros_like(x.data)
    out = f(*xs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"f(x) is not finite: {out.data}")
    out.backward()
    rng = rng or make_rng(0)
    worst = 0.0
    for x in xs:
        flat = x.data.reshape(-1)
        analytic = x.grad.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f(*xs).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f(*xs).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("f is not finite near x")
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- optimisation --------------------------------------------------------------

def sgd_momentum_step(params: Iterable[np.ndarray], grads: Iterable[np.ndarray],
                      velocity: Iterable[np.ndarray], lr: float, momentum: float):
    """In-place heavy-ball update: ``v <- momentum*v + g``; ``p <- p - lr*v``."""
    params, velocity = list(params), list(velocity)
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"sgd shapes differ: {p.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        raise ValueError("cosine_lr needs total steps > 0")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) redrawn outside two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


@lru_cache(maxsize=32)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` 1-D bilinear interpolation weights, half-pixel centres, no corner alignment.

    Source coordinates below zero clamp to the first sample, matching the
    usual ``align_corners=False`` resize.
    """
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.flags.writeable = False  # shared through the cache
    return m
