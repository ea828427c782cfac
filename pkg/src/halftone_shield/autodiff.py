"""A small reverse-mode automatic differentiation engine over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :func:`backward` replays them in reverse.  Outside a tape operations
just compute values, which keeps inference cheap.

    with Tape():
        loss = softmax_cross_entropy(forward(params, x), labels)
    backward(loss)
    x.grad
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeUsageError(RuntimeError):
    pass


_active: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc):
        _active.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeUsageError("backward already ran on this tape; record a new one")
        if loss.values.size != 1:
            raise TapeUsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        # leaves never appear as a node output
        for node in self.nodes:
            for inp in node.inputs:
                key = id(inp)
                if key in grads:
                    inp.grad = grads.pop(key)
        # drop the graph: tensors point back at the tape, so keeping nodes would pin every activation
        self.nodes = []


def backward(loss: Tensor) -> None:
    if loss.tape is None:
        raise TapeUsageError("loss was not produced under an active tape")
    loss.tape.backward(loss)


def _record(inputs: tuple[Tensor, ...], values: np.ndarray, grad_fn) -> Tensor:
    tape = _active.get()
    out = Tensor(values)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(inputs, out, grad_fn))
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------------ primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return _record((a, b), a.values + b.values, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _record(
        (a, b), av * bv, lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))
    )


def sum_all(a: Tensor) -> Tensor:
    return _record((a,), np.asarray(a.values.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _record((a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _record((a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record((a,), out, lambda g: (g.reshape(a.shape),))


def _conv_geometry(h: int, w: int, k: int, stride: int):
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return pad, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input, (F, C, k, k) weights, zero same-padding."""
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    xv, wv = x.values, weight.values
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1] or wv.shape[2] != wv.shape[3] or wv.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and weight {weight.shape}")
    if bias is not None and bias.shape != (wv.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight {weight.shape}")
    n, c, h, w = xv.shape
    f, _, k, _ = wv.shape
    pad, ho, wo = _conv_geometry(h, w, k, stride)
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = wv.reshape(f, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.values
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w]
        if weight.requires_grad:
            gw = (gflat.T @ cols).reshape(wv.shape)
        if bias is not None and bias.requires_grad:
            gb = gflat.sum(axis=0)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(inputs, out, grad_fn)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first index."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial shape {(h, w)} not divisible by {size}")
    blocks = x.values.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // size, w // size, size * size)
    idx = flat.argmax(axis=-1)  # argmax returns the first maximal index
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gblocks.reshape(n, c, h, w),)

    return _record((x,), out, grad_fn)


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial shape {(h, w)} not divisible by {size}")
    out = x.values.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def grad_fn(g):
        return (np.repeat(np.repeat(g * scale, size, axis=2), size, axis=3),)

    return _record((x,), out, grad_fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under ``softmax(logits)``; ``reduction`` is mean or sum."""
    lv = logits.values
    if lv.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != lv.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for logits {logits.shape}")
    logp = log_softmax(lv)
    rows = np.arange(lv.shape[0])
    per = -logp[rows, labels]
    scale = 1.0 / lv.shape[0] if reduction == "mean" else 1.0
    loss = per.sum() * scale

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g * scale),)

    return _record((logits,), np.asarray(loss), grad_fn)


def surrogate(x: Tensor, forward_values: np.ndarray, vjp: Callable[[np.ndarray], np.ndarray] | None = None) -> Tensor:
    """Use ``forward_values`` in the forward pass; backpropagate through ``vjp`` (identity if None)."""
    values = np.asarray(forward_values, dtype=np.float64)
    if values.shape != x.shape:
        raise ShapeError(f"surrogate: forward values {values.shape} do not match input {x.shape}")
    return _record((x,), values, lambda g: (g if vjp is None else vjp(g),))
