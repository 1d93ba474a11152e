"""Dense float64 arrays with a reverse-mode gradient tape.

Only the operations a small encoder-decoder transformer needs are provided.
Each op records its parents and a backward closure on the output tensor;
:func:`backward` replays the closures in reverse topological order.

Two global switches control evaluation:

* :func:`no_grad` stops recording the tape (inference mode).
* :func:`deterministic` swaps in kernels whose per-row results do not depend
  on how many rows are computed together or on trailing masked entries, so
  incremental decoding reproduces a full recomputation bit for bit.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class UsageError(RuntimeError):
    """An operation was called outside its contract."""


_flags = threading.local()


def _flag(name: str, default: bool) -> bool:
    return getattr(_flags, name, default)


def is_grad_enabled() -> bool:
    return _flag("grad", True)


def is_deterministic() -> bool:
    return _flag("det", False)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _flags.grad = False
    try:
        yield
    finally:
        _flags.grad = prev


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    prev = is_deterministic()
    _flags.det = enabled
    try:
        yield
    finally:
        _flags.det = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: add(self, neg(_wrap(other)))
    __rsub__ = lambda self, other: add(other, neg(self))
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return a
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(a.shape) >= rate) * scale
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# --------------------------------------------------------------------- shapes


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


# --------------------------------------------------------------------- matmul


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _det_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # each output element is a contiguous last-axis reduction of fixed length,
    # so its value cannot depend on how many rows or columns are computed
    bt = np.ascontiguousarray(_swap(b))
    return (a[..., :, None, :] * bt[..., None, :, :]).sum(axis=-1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = _det_matmul(a.data, b.data) if is_deterministic() else np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from exc

    def rule(g):
        ga = np.matmul(g, _swap(b.data)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # fold the batch into one product instead of summing per-batch ones
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(_swap(a.data), g)
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(data, (a, b), rule)


def mix(weights: Tensor, values: Tensor) -> Tensor:
    """``weights @ values`` where the contracted axis may carry masked zeros.

    In deterministic mode the contraction accumulates one key at a time in
    index order, so trailing zero weights leave every sum bit-identical.
    """
    if not is_deterministic():
        return matmul(weights, values)
    if weights.shape[-1] != values.shape[-2]:
        raise ShapeError(f"mix: incompatible shapes {weights.shape} and {values.shape}")
    w, v = weights.data, values.data
    acc = w[..., :, 0:1] * v[..., 0:1, :]
    for j in range(1, w.shape[-1]):
        acc = acc + w[..., :, j : j + 1] * v[..., j : j + 1, :]

    def rule(g):
        return (
            _unbroadcast(np.matmul(g, _swap(v)), weights.shape),
            _unbroadcast(np.matmul(_swap(w), g), values.shape),
        )

    return _result(acc, (weights, values), rule)


# -------------------------------------------------------------------- softmax


def _seq_sum_last(x: np.ndarray) -> np.ndarray:
    acc = x[..., 0:1].copy()
    for j in range(1, x.shape[-1]):
        acc = acc + x[..., j : j + 1]
    return acc


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if is_deterministic() and axis in (-1, x.ndim - 1):
        return e / _seq_sum_last(e)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    p = _softmax_data(x.data, axis)

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ----------------------------------------------------------------- layer norm


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: parameters {gamma.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), rule)


# ------------------------------------------------------------------ embedding


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id outside [0, {table.shape[0]})")

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(table.data[ids], (table,), rule)


# --------------------------------------------------------------------- losses


def cross_entropy_label_smoothed(
    logits: Tensor,
    targets: np.ndarray,
    epsilon: float = 0.0,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Mean label-smoothed negative log-likelihood over unmasked positions.

    The smoothing mass ``epsilon`` is spread uniformly over the ``V - 1``
    non-target classes, so the target keeps probability ``1 - epsilon``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"target id outside vocabulary [0, {v})")
    keep = np.ones(flat.shape[0], dtype=bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise UsageError("cross entropy over an empty (fully masked) batch")

    shifted = flat - flat.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(flat.shape[0])
    off = epsilon / (v - 1) if v > 1 else 0.0
    q = np.full_like(flat, off)
    q[rows, targets] = 1.0 - epsilon
    per_pos = -(q * logp).sum(axis=1)
    loss = float((per_pos * keep).sum() / count)

    def rule(g):
        p = np.exp(logp)
        gl = (p - q) * (keep[:, None] / count) * g
        return (gl.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), rule)


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Any tensor in ``params`` that the loss does not reach is given an
    all-zero gradient.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def numerical_gradient(
    fn: Callable[[], float], param: Tensor, step: float = 1e-5, index=None
) -> np.ndarray:
    """Central-difference estimate of d(fn)/d(param), evaluated in place."""
    flat = param.data.reshape(-1)
    if not np.shares_memory(flat, param.data):
        raise UsageError("numerical_gradient needs a contiguous parameter")
    out = np.zeros(flat.shape[0])
    positions = range(flat.shape[0]) if index is None else index
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)
