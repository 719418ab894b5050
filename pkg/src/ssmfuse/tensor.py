"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable primitive records a node holding its parents and a
closure mapping the output gradient to one gradient per parent.  The graph is
taped per forward pass; :func:`backward` walks it once in reverse
topological order and then frees it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class ComputeGraph:
    """Recorded operations reachable from a root, in topological order.

    ``nodes`` lists every tensor that participates; producers always precede
    consumers, so iterating it reversed is a valid backward schedule.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.root = root
        self.nodes = order

    @property
    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.is_leaf]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    graph = ComputeGraph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in graph.operations:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise


def _bias_axes(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...]:
    if big == small:
        return ()
    if len(small) <= len(big) and big[len(big) - len(small):] == small:
        return tuple(range(len(big) - len(small)))
    raise DimensionError(f"cannot add shapes {big} and {small}: only bias broadcasting is supported")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a trailing-axes bias of ``a``."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if len(b.shape) < len(a.shape):
        axes = _bias_axes(a.shape, b.shape)
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)), "add_bias")
    axes = _bias_axes(b.shape, a.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g.sum(axis=axes), g), "add_bias")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x) evaluated as max(x, 0) + ln(1 + e^-|x|)."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        # sigmoid without overflow
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _make(out, (a,), bw, "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    axis = axis % a.ndim
    n = a.shape[axis]
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _make(a.data.mean(axis=axis), (a,), bw, "mean")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    if axis not in (-1, tensors[0].ndim - 1):
        raise ConfigError("concat only supports the last axis")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat leading shapes differ: {lead} vs {t.shape[:-1]}")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), bw, "concat")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects logits [B,C] and targets [B], got {logits.shape} and {targets.shape}")
    logp = log_softmax(logits)
    rows = np.arange(targets.shape[0])
    n = targets.shape[0]

    def bw(g):
        out = np.zeros_like(logp.data)
        out[rows, targets] = -g / n
        return (out,)

    return _make(np.array(-logp.data[rows, targets].mean()), (logp,), bw, "nll")


# ---------------------------------------------------------------- linear maps


def apply_linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_i x[..., i] W[i, j] (+ b[j])."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"apply_linear: x{x.shape} incompatible with W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"apply_linear: bias{b.shape} does not match W{W.shape}")
    xd, Wd = x.data, W.data
    # one 2-D GEMM instead of a stack of per-row-block products
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ Wd).reshape(xd.shape[:-1] + (Wd.shape[1],))
    if b is not None:
        out += b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wd.T).reshape(xd.shape) if x.requires_grad else None
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, bw, "linear")


def conv1d_depthwise(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 'same' convolution along axis 1 of a [B, L, D] tensor."""
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != x.shape[2]:
        raise DimensionError(f"conv1d_depthwise: x{x.shape} incompatible with kernel{kernel.shape}")
    K = kernel.shape[1]
    if K % 2 == 0:
        raise ConfigError(f"conv1d_depthwise needs an odd kernel size, got {K}")
    pad = (K - 1) // 2
    L = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    k = kernel.data
    out = np.zeros_like(x.data)
    for j in range(K):
        out += xp[:, j:j + L, :] * k[:, j]

    def bw(g):
        gk = np.empty_like(k)
        gxp = np.zeros_like(xp)
        for j in range(K):
            gk[:, j] = np.einsum("bld,bld->d", g, xp[:, j:j + L, :])
            gxp[:, j:j + L, :] += g * k[:, j]
        return gxp[:, pad:pad + L, :], gk

    return _make(out, (x, kernel), bw, "conv1d")
