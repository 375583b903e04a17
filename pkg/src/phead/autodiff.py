"""A small dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays.  Every differentiable operation records its
parents and a closure that pushes the output gradient back to them.  Each
recorded node carries a construction sequence number, so ``backward`` can
walk the graph in exact reverse construction order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CheckPreconditionError, ConfigError, DataError, DimensionError

DEFAULT_DTYPE = np.float32

_seq_counter = itertools.count()
_grad_enabled = True
# when a list, relu appends its active-unit masks (grad_check uses this to spot kinks)
_relu_trace: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "name",
                 "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"
        self._seq = next(_seq_counter)

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        self._accum(np.asarray(grad))
        for node in reversed(graph(self)):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
    return out


def graph(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in construction order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = _make(a.data + b.data, (a, b), "add")

    def _backward():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))

    out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = _make(a.data * b.data, (a, b), "mul")

    def _backward():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), "neg")

    def _backward():
        a._accum(-out.grad)

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)
    out = _make(a.data * mask, (a,), "relu")

    def _backward():
        a._accum(out.grad * mask)

    out._backward = _backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")

    def _backward():
        a._accum(out.grad.reshape(a.shape))

    out._backward = _backward
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = _make(a.data.transpose(axes), (a,), "transpose")

    def _backward():
        a._accum(out.grad.transpose(inv))

    out._backward = _backward
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = _make(np.array(a.data[idx]), (a,), "getitem")

    def _backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accum(g)

    out._backward = _backward
    return out


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum")

    def _backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    out._backward = _backward
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward():
        for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            if t.requires_grad:
                t._accum(g)

    out._backward = _backward
    return out


# ----------------------------------------------------------------------
# linear algebra and neural-network primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules over leading dims."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), "matmul")

    def _backward():
        g = out.grad
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    out._backward = _backward
    return out


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.data, axis)
    out = _make(y, (x,), "softmax")

    def _backward():
        g = out.grad
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward = _backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the elementwise affine map."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")

    def _backward():
        g = out.grad
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            d = x.shape[-1]
            x._accum(inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))

    out._backward = _backward
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = _make(x.data * mask, (x,), "dropout")

    def _backward():
        x._accum(out.grad * mask)

    out._backward = _backward
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient is scatter-added back."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _make(weight.data[ids], (weight,), "embedding")

    def _backward():
        g = np.zeros_like(weight.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, weight.shape[-1]))
        weight._accum(g)

    out._backward = _backward
    return out


def cross_entropy(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``weights`` optionally masks rows (e.g. unmasked positions in MLM);
    the mean is then taken over the weight total.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch x classes] logits, got {logits.shape}")
    b, c = logits.shape
    if c < 2:
        raise DimensionError(f"cross_entropy needs at least 2 classes, got {c}")
    if targets.shape != (b,):
        raise DimensionError(f"targets shape {targets.shape} does not match batch {b}")
    if np.any(targets < 0) or np.any(targets >= c):
        raise DataError(f"target index out of range [0, {c})")
    w = np.ones(b, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    denom = float(w.sum())
    if denom <= 0:
        raise DataError("cross_entropy has no weighted rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -(logp[rows, targets] * w).sum() / denom
    out = _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy")

    def _backward():
        g = np.exp(logp)
        g[rows, targets] -= 1.0
        g *= (w / denom)[:, None]
        logits._accum(g * out.grad)

    out._backward = _backward
    return out


# ----------------------------------------------------------------------
# gradient checking


def _traced(f: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    global _relu_trace
    prev, _relu_trace = _relu_trace, []
    try:
        with no_grad():
            value = float(f().data)
        return value, _relu_trace
    finally:
        _relu_trace = prev


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-3,
               dtype=None, max_checks_per_param: int | None = None,
               rng: np.random.Generator | None = None, skip_kinks: bool = True,
               info: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar graph from ``params`` on every call.  When
    ``dtype`` is given (e.g. ``np.float64``) the parameters are cast for the
    duration of the check and restored afterwards.  The relative error uses
    the denominator ``max(|analytic|, |numeric|, 1e-6)``.

    With ``skip_kinks`` an entry is left out when the two perturbed forwards
    disagree on which ReLU units are active: the function is not
    differentiable inside that interval, so no difference quotient applies.
    If ``info`` is a dict it receives ``checked`` and ``skipped_kinks``.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise CheckPreconditionError(f"parameter {p.name or p.shape} does not require grad")
    originals = [p.data for p in params]
    if dtype is not None:
        for p in params:
            p.data = p.data.astype(dtype)
    rng = rng or np.random.default_rng(0)
    checked = skipped = 0
    try:
        first = float(f().data)
        second = float(f().data)
        if first != second:
            raise CheckPreconditionError("f is not deterministic across repeated forwards")
        for p in params:
            p.grad = None
        f().backward()
        worst = 0.0
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks_per_param is not None and flat.size > max_checks_per_param:
                idx = rng.choice(flat.size, size=max_checks_per_param, replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp, kp = _traced(f)
                flat[i] = old - h
                fm, km = _traced(f)
                flat[i] = old
                if skip_kinks and not _same_pattern(kp, km):
                    skipped += 1
                    continue
                checked += 1
                numeric = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, err)
        return worst
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None
        if info is not None:
            info.update(checked=checked, skipped_kinks=skipped)


def parameter(shape, rng: np.random.Generator, kind: str = "glorot", name: str = "") -> Tensor:
    """Create a trainable float32 tensor.

    ``kind`` is ``glorot`` (uniform, limit sqrt(6/(fan_in+fan_out))),
    ``zeros`` or ``ones``.
    """
    shape = tuple(shape)
    if kind == "zeros":
        data = np.zeros(shape, dtype=DEFAULT_DTYPE)
    elif kind == "ones":
        data = np.ones(shape, dtype=DEFAULT_DTYPE)
    elif kind == "glorot":
        fan_in, fan_out = (shape[0], shape[-1]) if len(shape) >= 2 else (shape[0], shape[0])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape).astype(DEFAULT_DTYPE)
    elif kind == "normal":
        data = (rng.standard_normal(shape) * 0.02).astype(DEFAULT_DTYPE)
    else:
        raise ConfigError(f"unknown init kind {kind!r}")
    return Tensor(data, requires_grad=True, name=name)
