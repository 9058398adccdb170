"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op records a node on the active :class:`Tape`.  A tape
is thread-confined; each thread gets its own default tape, and ``with Tape():``
installs a fresh one for the duration of a forward/backward pass.

Broadcasting is deliberately narrow: binary elementwise ops accept operands of
identical shape, a scalar (0-d) operand, or a 1-d operand matching the last
axis.  Anything else must go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class _Node:
    __slots__ = ("seq", "out", "inputs", "backward_fn")

    def __init__(self, seq: int, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn):
        self.seq = seq
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the differentiable ops executed while it was active."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._counter = 0

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn) -> None:
        node = _Node(self._counter, out, inputs, backward_fn)
        self._counter += 1
        self.nodes.append(node)
        out._node = node
        out._tape = self

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        # Every grad-carrying leaf seen by this tape ends up with a buffer,
        # zero if the loss does not reach it.
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None and t.grad is None:
                    t.grad = np.zeros_like(t.data)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi

    def clear(self) -> None:
        """Drop recorded ops and zero the gradient buffers of their leaves."""
        for node in self.nodes:
            for t in node.inputs:
                if t._node is None and t.grad is not None:
                    t.grad = np.zeros_like(t.data)
        self.nodes = []
        self._counter = 0

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = [Tape()]
        self.grad_enabled = True


_state = _ThreadState()


def current_tape() -> Tape:
    return _state.stack[-1]


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor is not on a tape; nothing to differentiate")
        self._tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._node = None
    out._tape = None
    out.name = None
    if needs:
        current_tape().record(out, tuple(inputs), backward_fn)
    return out


# --- elementwise -----------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# --- reductions and shape ops ------------------------------------------------


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    if out.size != a.data.size:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}")
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """``a[..., start:stop, ...]`` along ``axis``."""
    shape = a.shape
    ax = axis % a.ndim
    index = (slice(None),) * ax + (slice(start, stop),)

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules); gradient sums over the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}") from exc

    def bw(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), bw)


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# --- normalisations ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, x.ndim - 1):
        raise ShapeError("softmax is taken over the last axis")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"log_softmax: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx_hat = g * gd
        dx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = g.reshape(-1, d)
        return dx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


# --- spatial -----------------------------------------------------------------


def spatial_mix(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Depthwise 3x3 neighbourhood mixing of a ``[B, H, W, D]`` map, zero padded.

    ``kernel`` has shape ``[3, 3, D]`` and is a constant (never differentiated).
    """
    if x.ndim != 4:
        raise ShapeError(f"spatial_mix expects [B,H,W,D], got {x.shape}")
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3, x.shape[-1]):
        raise ShapeError(f"spatial_mix: kernel {kernel.shape} does not match width {x.shape[-1]}")
    _, h, w, _ = x.shape
    pad = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(x.data)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * pad[:, dy : dy + h, dx : dx + w, :]

    def bw(g):
        gpad = np.zeros_like(pad)
        for dy in range(3):
            for dx in range(3):
                gpad[:, dy : dy + h, dx : dx + w, :] += kernel[dy, dx] * g
        return (gpad[:, 1:-1, 1:-1, :],)

    return _make(out, (x,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
