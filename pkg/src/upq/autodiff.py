"""Minimal reverse-mode autodiff over dense numpy tensors.

Design constraints:

* 32-bit (or 64-bit) real arrays only; ops preserve the input dtype.
* Broadcasting is limited to a trailing-suffix / per-channel-column pattern;
  anything richer raises loudly.
* Reductions run in numpy's fixed evaluation order, so two runs with the same
  inputs produce bit-identical tapes and gradients.
* Custom-gradient ops (straight-through estimators) plug in through
  :class:`CustomGradOp`; their declared backward is used verbatim.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import ContractViolation, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher/eval forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense real array plus its position on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False, dtype=None, _check=True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if _check and not np.isfinite(arr).all():
            raise NumericError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # Convenience arithmetic (ops below do the real work).
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _node(op: str, out: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"op {op!r} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _check_broadcast(op: str, sa: tuple, sb: tuple):
    """Allow equal shapes, trailing-suffix broadcast, or an (m,1) column vs (m,n)."""
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return
    if len(small) == len(big) and all(
        x == y or x == 1 or y == 1 for x, y in zip(small, big)
    ):
        # per-channel column/row vectors against a matrix of matching extent
        if sum(1 for x, y in zip(small, big) if x != y) <= 1:
            return
    raise ContractViolation(f"{op}: unsupported broadcast of {sa} against {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an upstream gradient back to the shape of a broadcast input."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    out = a.data + b.data
    return _node(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data
    return _node(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    out = a.data * b.data
    return _node(
        "mul", out, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ContractViolation(
            f"matmul: inner dimensions differ ({a.shape} @ {b.shape})"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node("matmul", out, (a, b), vjp)


def transpose_last2(a) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, -1, -2).copy()
    return _node("transpose", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes).copy()
    return _node("permute", out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _node("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise NumericError("log: nonpositive input")
    out = np.log(a.data)
    return _node("log", out, (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
    return _node("clip", out, (a,), lambda g: (g * inside,))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return _node(
        "silu", out, (a,), lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),)
    )


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(
        "softmax", y, (a,),
        lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
    )


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _node(
        "log_softmax", out, (a,),
        lambda g: (g - sm * g.sum(axis=-1, keepdims=True),),
    )


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _node("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)
    return _node(
        "mean", out, (a,),
        lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),),
    )


def pick_last_axis(a, ids: np.ndarray) -> Tensor:
    """Gather one entry per position along the last axis (NLL target pick)."""
    a = _as_tensor(a)
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ContractViolation(
            f"pick: index shape {ids.shape} does not match {a.shape[:-1]}"
        )
    if (ids < 0).any() or (ids >= a.shape[-1]).any():
        raise ContractViolation("pick: index out of range")
    idx = ids[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g[..., None].astype(a.dtype), axis=-1)
        return (ga,)

    return _node("pick", out, (a,), vjp)


def embedding(table, ids: np.ndarray) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if (ids < 0).any() or (ids >= table.shape[0]).any():
        raise ContractViolation("embedding: token id out of range")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g.astype(table.dtype))
        return (gt,)

    return _node("embedding", out, (table,), vjp)


def rmsnorm(x, gain, eps: float = 1e-5) -> Tensor:
    """x * gain / rms(x) with the rms taken over the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    n = x.shape[-1]
    if gain.shape != (n,):
        raise ContractViolation("rmsnorm: gain must match the last axis")
    r = np.sqrt((x.data.astype(np.float64) ** 2).mean(axis=-1, keepdims=True) + eps)
    r = r.astype(x.dtype)
    out = x.data / r * gain.data

    def vjp(g):
        gw = g * gain.data
        dot = (gw * x.data).sum(axis=-1, keepdims=True)
        gx = gw / r - x.data * dot / (n * r**3)
        gg = (g * x.data / r).reshape(-1, n).sum(axis=0).astype(gain.dtype)
        return gx.astype(x.dtype), gg

    return _node("rmsnorm", out, (x, gain), vjp)


def rotate_half(x) -> Tensor:
    """(x1, x2) -> (-x2, x1) over the two halves of the last axis."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ContractViolation("rotate_half: last axis must be even")
    h = d // 2
    out = np.concatenate([-x.data[..., h:], x.data[..., :h]], axis=-1)
    return _node(
        "rotate_half", out, (x,),
        lambda g: (np.concatenate([g[..., h:], -g[..., :h]], axis=-1),),
    )


# ---------------------------------------------------------------------------
# Custom-gradient (straight-through) operations


@dataclass(frozen=True)
class CustomGradOp:
    """An op whose backward is supplied verbatim instead of derived.

    ``forward(*arrays)`` returns the output array, or ``(output, ctx)`` when the
    backward needs saved context.  ``backward(ctx, upstream)`` returns one
    gradient array (or None) per forward input.
    """

    name: str
    n_inputs: int
    forward: Callable[..., Any]
    backward: Callable[[Any, np.ndarray], tuple]


_custom_registry: dict[str, CustomGradOp] = {}


def register_custom(op: CustomGradOp) -> CustomGradOp:
    if op.n_inputs < 1:
        raise ContractViolation("custom op must take at least one input")
    if not callable(op.forward) or not callable(op.backward):
        raise ContractViolation("custom op forward/backward must be callable")
    _custom_registry[op.name] = op
    return op


def get_custom(name: str) -> CustomGradOp:
    return _custom_registry[name]


def apply_custom(op: CustomGradOp | str, *inputs) -> Tensor:
    if isinstance(op, str):
        op = _custom_registry[op]
    if len(inputs) != op.n_inputs:
        raise ContractViolation(
            f"custom op {op.name!r} expects {op.n_inputs} inputs, got {len(inputs)}"
        )
    tensors = tuple(_as_tensor(x) for x in inputs)
    res = op.forward(*(t.data for t in tensors))
    if isinstance(res, tuple):
        out, ctx = res
    else:
        out, ctx = res, None

    def vjp(g):
        grads = op.backward(ctx, g)
        if len(grads) != op.n_inputs:
            raise ContractViolation(
                f"custom op {op.name!r} backward returned {len(grads)} gradients "
                f"for {op.n_inputs} inputs"
            )
        for t, gr in zip(tensors, grads):
            if gr is not None and np.shape(gr) != t.shape:
                raise ContractViolation(
                    f"custom op {op.name!r}: gradient shape {np.shape(gr)} "
                    f"does not match input shape {t.shape}"
                )
        return grads

    return _node(f"custom:{op.name}", np.asarray(out), tensors, vjp)


# ---------------------------------------------------------------------------
# Backward pass


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Gradients accumulate into ``.grad`` of every requires_grad tensor reached;
    call again without resetting to keep accumulating.
    """
    if root.data.size != 1:
        raise ContractViolation("backward root must be a scalar")
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flows: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data)
    }
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        grads = node._vjp(g)
        for p, pg in zip(node._parents, grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if id(p) in flows:
                flows[id(p)] = flows[id(p)] + pg
            else:
                flows[id(p)] = pg
