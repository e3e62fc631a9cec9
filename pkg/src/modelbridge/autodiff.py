"""Dense float64 tensors with tape-based reverse-mode differentiation.

Recording is explicit: primitives only append to a :class:`Tape` while one is
active, so frozen inference pays no bookkeeping cost::

    with Tape() as tape:
        loss = (W @ x).sum()
    grads = backward(tape, loss)

Every primitive operates on batched arrays; a leading batch axis is the only
dynamic dimension the models use.
"""

from __future__ import annotations

import builtins
import copy
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "Node",
    "ShapeError",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv1d",
    "layer_norm",
    "attention",
    "gelu",
    "relu",
    "mean",
    "sum",
    "max",
    "reshape",
    "transpose",
    "softmax",
    "log_softmax",
    "exp",
    "log",
    "sqrt",
    "abs",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


_ids = itertools.count()


class Tensor:
    """Immutable-by-convention float64 array that may participate in a tape."""

    # make numpy operands defer to the Tensor operator overloads
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._requires_grad = requires_grad
        self.name = name
        self.uid = next(_ids)

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __deepcopy__(self, memo):
        # copies must not share identity with the original on a tape
        new = self.__class__.__new__(self.__class__)
        memo[id(self)] = new
        for key, value in self.__dict__.items():
            setattr(new, key, copy.deepcopy(value, memo))
        new.uid = next(_ids)
        return new

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A leaf tensor owned by a model. Only trainable parameters get gradients."""

    def __init__(self, data, trainable: bool = True, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, name={self.name!r}, trainable={self.trainable})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications captured while active."""

    nodes: list[Node] = field(default_factory=list)

    def begin(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def end(self) -> None:
        if not _ACTIVE or _ACTIVE[-1] is not self:
            raise RuntimeError("tape is not the innermost active recording")
        _ACTIVE.pop()

    def __enter__(self) -> "Tape":
        return self.begin()

    def __exit__(self, *exc) -> None:
        self.end()

    def __len__(self) -> int:
        return len(self.nodes)

    def check_order(self) -> bool:
        """True when every recorded node's inputs were produced earlier (or are leaves)."""
        produced: set[int] = set()
        outputs = {n.output.uid for n in self.nodes}
        for node in self.nodes:
            for t in node.inputs:
                if t.uid in outputs and t.uid not in produced:
                    return False
            produced.add(node.output.uid)
        return True


_ACTIVE: list[Tape] = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise FloatingPointError(f"{op}: non-finite output from finite inputs")
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, result, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _emit(
        "div",
        (a, b),
        out,
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _emit("gelu", (a,), out, vjp)


# ----------------------------------------------------------------- reductions


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", (a,), out, vjp)


def max(a, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum over one axis; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
        return (grad,)

    return _emit("max", (a,), out, vjp)


# ------------------------------------------------------------------- reshaping


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axis1: int = -1, axis2: int = -2) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, axis1, axis2)
    return _emit("transpose", (a,), out, lambda g: (np.swapaxes(g, axis1, axis2),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def conv1d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 1-D convolution.

    x: (B, N, C_in), w: (K, C_in, C_out), bias: (C_out,). Output (B, N_out, C_out)
    with N_out = (N + 2*padding - K) // stride + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv1d", f"expected x (B,N,C) and w (K,C_in,C_out), got {x.shape}, {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[2] != c_in:
        raise ShapeError("conv1d", f"input channels {x.shape[2]} != kernel channels {c_in}")
    n_pad = x.shape[1] + 2 * padding
    if n_pad < k:
        raise ShapeError("conv1d", f"padded length {n_pad} shorter than kernel {k}")
    n_out = (n_pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    # (B, N_win, C_in, K) -> keep every stride-th window
    windows = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :n_out]
    cols = windows.reshape(-1, c_in * k)
    w_flat = w.data.transpose(1, 0, 2).reshape(c_in * k, c_out)
    out = (cols @ w_flat).reshape(x.shape[0], n_out, c_out)
    inputs: tuple[Tensor, ...] = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError("conv1d", f"bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data
        inputs = (x, w, bias)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            span = stride * (n_out - 1) + 1
            for j in range(k):
                gxp[:, j : j + span : stride, :] += g @ w.data[j].T
            gx = gxp[:, padding : padding + x.shape[1], :] if padding else gxp
        if w.requires_grad:
            gw_flat = cols.T @ g.reshape(-1, c_out)
            gw = gw_flat.reshape(c_in, k, c_out).transpose(1, 0, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)) if bias.requires_grad else None)
        return grads

    return _emit("conv1d", inputs, out, vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"affine shapes {gamma.shape}, {beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", (x, gamma, beta), out, vjp)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    p = _softmax(a.data)
    return _emit("softmax", (a,), p, lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _emit("log_softmax", (a,), out, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def attention(q, k, v) -> Tensor:
    """Single-head scaled dot-product attention over (B, N, d) inputs."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", f"key tokens {k.shape[-2]} != value tokens {v.shape[-2]}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = _softmax(np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale)
    out = np.matmul(p, v.data)

    def vjp(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return _emit("attention", (q, k, v), out, vjp)


# ---------------------------------------------------------------- differentiation


def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter] = ()) -> dict[Parameter, np.ndarray]:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns gradients for every trainable parameter reached from the loss;
    parameters listed in ``params`` but not reached get zeros. Each returned
    gradient is also stored on ``param.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[int, Parameter] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.uid, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                leaves[inp.uid] = inp
            prev = grads.get(inp.uid)
            grads[inp.uid] = gi if prev is None else prev + gi
    result: dict[Parameter, np.ndarray] = {}
    for uid, p in leaves.items():
        p.grad = grads[uid].reshape(p.shape)
        result[p] = p.grad
    if isinstance(loss, Parameter) and loss.trainable:
        result[loss] = loss.grad = np.ones_like(loss.data)
    for p in params:
        if p.trainable and p not in result:
            p.grad = np.zeros_like(p.data)
            result[p] = p.grad
    return result


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the scalar loss from the current parameter values.
    The error for an entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)
    worst = 0.0
    for p in params:
        ga = analytic.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite loss probing {p.name or 'parameter'}[{i}]")
            numeric = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            err = builtins.abs(a - numeric) / builtins.max(1.0, builtins.abs(a))
            worst = builtins.max(worst, err)
    return worst
