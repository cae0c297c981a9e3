"""Dense float64 tensors with a reverse-mode gradient tape.

Operations executed while a :class:`Tape` is active are appended to it in
execution order; that order is already topological, so :func:`backward`
simply walks the tape in reverse.  Operations run outside a tape produce
constants.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @classmethod
    def from_op(
        cls,
        value: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> "Tensor":
        """Wrap a forward result; ``backward_fn`` maps the output gradient to
        one gradient per parent (``None`` to skip)."""
        out = cls.__new__(cls)
        out.data = value
        out.name = None
        out.parents = ()
        out.backward_fn = None
        out.tape = None
        tape = _current_tape()
        out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
            out.tape = tape
            tape.nodes.append(out)
        return out

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log; inputs must be strictly positive."""
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise ValueError(f"mean: empty reduction over shape {a.shape}")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape / indexing


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, index, unique: bool = False) -> Tensor:
    """Gather along axis 0; ``index`` is an integer array of any shape.

    ``unique=True`` promises no repeated indices, which allows a plain
    scatter in the backward pass.
    """
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take: index out of range for axis of length {a.shape[0]}")

    def bw(g):
        out = np.zeros(a.shape)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(a.data[idx], (a,), bw)


def pick(a, index) -> Tensor:
    """Select one entry per row along the last axis: ``out[i] = a[i, index[i]]``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ValueError(f"pick: shape mismatch {a.shape} vs index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"pick: index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros(a.shape)
        out[rows, idx] = g
        return (out,)

    return Tensor.from_op(a.data[rows, idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """2-D matrix product, or a batch of rows ``(..., K) @ (K, M)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    a2 = a.data.reshape(-1, a.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, b.shape[1])
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return Tensor.from_op(a.data @ b.data, (a, b), bw)


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 same-padded convolution in NHWC layout.

    ``w`` has shape ``(k, k, Cin, Cout)`` with odd ``k``.  Accumulation is
    direct over kernel offsets: for each kernel row, one matrix product of
    the padded input band with that row's taps, then the ``k`` column shifts
    are added into the output.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    n, h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    p = k // 2
    wp = wd + 2 * p
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    # taps of kernel row dy as one (Cin, k*Cout) matrix
    rows = [w.data[dy].transpose(1, 0, 2).reshape(cin, k * cout) for dy in range(k)]
    out = np.zeros((n, h, wd, cout))
    for dy in range(k):
        band = xp[:, dy:dy + h].reshape(-1, cin) @ rows[dy]
        band = band.reshape(n, h, wp, k, cout)
        for dx in range(k):
            out += band[:, :, dx:dx + wd, dx, :]

    def bw(g):
        gw = np.zeros(w.shape)
        gxp = np.zeros(xp.shape)
        spread = np.zeros((n, h, wp, k, cout))
        for dx in range(k):
            spread[:, :, dx:dx + wd, dx, :] = g
        spread2 = spread.reshape(-1, k * cout)
        for dy in range(k):
            band = xp[:, dy:dy + h].reshape(-1, cin)
            gw[dy] = (band.T @ spread2).reshape(cin, k, cout).transpose(1, 0, 2)
            gxp[:, dy:dy + h] += (spread2 @ rows[dy].T).reshape(n, h, wp, cin)
        return gxp[:, p:p + h, p:p + wd, :], gw

    y = Tensor.from_op(out, (x, w), bw)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------- softmax family


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), bw)


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    norm = sqrt(sum(mul(a, a), axis=axis, keepdims=True))
    return div(a, norm)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar; returns gradients of every reached leaf
    that requires grad (keyed by tensor identity)."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if not loss.requires_grad:
        return {}
    if loss.tape is None:
        # a leaf used directly as the loss
        return {loss: np.ones(loss.shape)}
    grads[id(loss)] = np.ones(loss.shape)
    tape = loss.tape
    end = tape.nodes.index(loss) if tape.nodes[-1] is not loss else len(tape.nodes) - 1
    for node in reversed(tape.nodes[: end + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent.tape is None:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return {leaves[k]: grads[k] for k in leaves}


def grad(f: Callable[..., Tensor], *xs: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f`` at fresh leaves built from ``xs`` and return
    ``(value, [d f / d x_i])``."""
    leaves = [parameter(x) for x in xs]
    with Tape():
        out = f(*leaves)
        g = backward(out)
    return out.item(), [g.get(leaf, np.zeros(leaf.shape)) for leaf in leaves]


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    x = np.array(x, dtype=np.float64)
    value, (analytic,) = grad(f, x)
    if not np.isfinite(value):
        raise ValueError("finite_diff_check: f(x) is not finite")
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(Tensor(x)).item()
        flat[i] = orig - step
        down = f(Tensor(x)).item()
        flat[i] = orig
        nflat[i] = (up - down) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def zeros(shape: Iterable[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))
