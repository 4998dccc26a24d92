"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the thread's current
:class:`Tape`.  :func:`backward` walks the tape in strict reverse insertion
order and accumulates gradients into leaf tensors that ``requires_grad``.
The tape is single-use: after a backward pass it must be cleared with
:func:`reset_tape` before the next graph is recorded.

Binary elementwise ops require identical shapes; the only implicit
broadcasting is against scalars.  Anything else goes through the explicit
:func:`expand` op so every gradient rule stays auditable.
"""

from __future__ import annotations

import contextlib
import math
import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "TapeError",
    "tensor",
    "get_tape",
    "reset_tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "silu",
    "sqrt",
    "elementwise",
    "matmul",
    "bmm",
    "linear",
    "softmax",
    "log_softmax",
    "logsumexp",
    "sum",
    "mean",
    "amax",
    "reshape",
    "transpose",
    "expand",
    "concat",
    "stack",
    "take",
    "layer_norm",
    "l2_normalize",
    "cosine_similarity",
    "conv2d",
    "bce_with_logits",
    "numeric_grad",
    "gradcheck",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass
class _Node:
    op: str
    inputs: tuple
    out: weakref.ref
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of the operations of one forward pass."""

    nodes: list = field(default_factory=list)
    consumed: bool = False
    enabled: bool = True

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> Tape:
    """Start a fresh tape for the calling thread and return it."""
    _local.tape = Tape()
    return _local.tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    """An n-dimensional float64 array with optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: weakref.ref | None = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise ShapeError(f"cannot assign data of shape {arr.shape} to tensor of shape {self.shape}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else id(self._node)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = get_tape()
    if not tape.enabled or not any(t.requires_grad for t in inputs):
        return out
    if tape.consumed:
        raise TapeError("tape already used by backward(); call reset_tape() before recording a new graph")
    for t in inputs:
        if t.requires_grad and t._node is not None and t._tape() is not tape:
            raise TapeError(f"input to '{op}' was recorded on a previous tape; detach() it first")
    out.requires_grad = True
    # no strong refs back to ``out`` or the tape, so a dropped graph is freed without the cycle collector
    node = _Node(op, tuple(inputs), weakref.ref(out), backward_fn)
    out._node = node
    out._tape = weakref.ref(tape)
    tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; call reset_tape() first")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        tape.consumed = True
        return
    if loss._tape() is not tape:
        raise TapeError("loss was recorded on a different tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        out = node.out()
        if out is None:  # nothing downstream can reach a dropped output
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"internal: gradient shape {gi.shape} for '{node.op}' input {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._node is None:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.consumed = True


# -- elementwise -------------------------------------------------------------


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(x.data)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return _record("silu", out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "silu": silu, "neg": neg, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, x, y=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op in _BINARY:
        if y is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](x, y)
    if op in _UNARY:
        if y is not None:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](x)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a, b) -> Tensor:
    """Batched product of (B, m, k) and (B, k, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    return _record("bmm", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is (out, in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[1])
    out = x2 @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        grads = [gx, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record("linear", out.reshape(*lead, weight.shape[0]), inputs, bw)


# -- reductions and normalisers ----------------------------------------------


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    weights = np.exp(x.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * weights,)

    return _record("logsumexp", out, (x,), bw)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(x, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; ties send the gradient to the first maximiser."""
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx_k, gk, axis=axis)
        return (gx,)

    return _record("amax", out, (x,), bw)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature scale and shift."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: scale {scale.shape}/shift {shift.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def bw(g):
        red = tuple(range(x.ndim - 1))
        gs = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gh = g * scale.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gs, gb

    return _record("layer_norm", out, (x, scale, shift), bw)


def l2_normalize(x, axis: int = -1, eps: float = 0.0) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DomainError("cannot normalise a zero vector")
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", out, (x,), bw)


def cosine_similarity(x, y) -> Tensor:
    """Cosine of the angle between two vectors (or matching rows along the last axis)."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"cosine_similarity: shapes {x.shape} and {y.shape} differ")
    return sum(mul(l2_normalize(x), l2_normalize(y)), axis=-1)


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def expand(x, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record("expand", out.copy(), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    axis = _norm_axis(axis, xs[0].ndim)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", out, xs, lambda g: np.split(g, bounds, axis=axis))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    n = len(xs)
    return _record("stack", out, xs,
                   lambda g: [np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)])


def take(x, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    x = _as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("take", np.array(out), (x,), bw)


# -- convolution -------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation in channels-last layout.

    ``x`` is (N, H, W, C_in); ``weight`` is (kh, kw, C_in, C_out); zero padding.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    n, h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    # win: (N, ho, wo, C_in, kh, kw) -> columns ordered (kh, kw, C_in) to match the kernel
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} must be ({cout},)")
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            # tap-major layout keeps each scatter-add contiguous
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin).transpose(3, 4, 0, 1, 2, 5).copy()
            gxp = np.zeros((n, hp, wp, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += gcols[i, j]
            gx = gxp[:, p:p + h, p:p + w, :] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record("conv2d", out.reshape(n, ho, wo, cout), inputs, bw)


# -- losses ------------------------------------------------------------------


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy in the overflow-free form
    ``max(x, 0) - x*y + log1p(exp(-|x|))``."""
    logits = _as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean())
    return _record("bce_with_logits", out, (logits,), lambda g: (g * (_sigmoid(x) - y) / x.size,))


# -- gradient checking -------------------------------------------------------


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``t``."""
    base = t.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            t.data = base
            fp = fn().item()
            flat[i] = orig - eps
            t.data = base
            fm = fn().item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * eps)
        t.data = base
    return grad.reshape(t.shape)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest normwise relative error between analytic and numeric gradients.

    The error for each parameter is ``max|a - n| / max(max|a|, max|n|)``; a
    parameter whose gradients are both identically zero counts as 0.
    """
    reset_tape()
    for p in params:
        p.zero_grad()
    backward(fn())
    reset_tape()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = numeric_grad(fn, p, eps)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst
