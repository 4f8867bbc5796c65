"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every value is a :class:`Tensor` wrapping a float64 array. Operations on
tensors that belong to a :class:`Tape` are appended to that tape; calling
:meth:`Tape.backward` walks the tape once in reverse and returns the
gradient of a scalar loss for every watched leaf.

The primitive set is closed (see :data:`PRIMITIVES`); composite functions
such as the network layers only ever call :func:`apply_primitive`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


@dataclass
class Node:
    kind: str
    inputs: tuple  # node ids, None for constant operands
    saved: Any
    vjp: Callable | None
    name: str | None = None  # leaves only


class Tape:
    """Append-only record of primitive applications.

    Edges always point to earlier nodes, so the tape is a DAG by
    construction and a single reverse sweep suffices.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._leaves: dict[str, int] = {}

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.reset()

    def reset(self) -> None:
        self.nodes = []
        self._leaves = {}

    def leaf(self, value, name: str) -> "Tensor":
        if name in self._leaves:
            raise ValueError(f"leaf {name!r} is already watched on this tape")
        data = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), data.shape, None, name))
        node_id = len(self.nodes) - 1
        self._leaves[name] = node_id
        return Tensor(data, tape=self, node_id=node_id)

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        """Register every entry of ``params`` as a named leaf."""
        return {name: self.leaf(value, name) for name, value in params.items()}

    def record(self, kind: str, inputs: tuple, saved: Any, vjp: Callable) -> int:
        self.nodes.append(Node(kind, inputs, saved, vjp))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every watched leaf.

        Leaves that the loss does not depend on get zero gradients. The
        tape is reset afterwards and cannot be reused for this pass.
        """
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        out: dict[str, np.ndarray] = {}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.kind == "leaf":
                out[node.name] = g
                continue
            if node.kind in _NEEDS_AWARE:
                in_grads = node.vjp(g, node.saved, tuple(i is not None for i in node.inputs))
            else:
                in_grads = node.vjp(g, node.saved)
            for parent, pg in zip(node.inputs, in_grads):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        result = {}
        for name, node_id in self._leaves.items():
            if name in out:
                result[name] = np.asarray(out[name], dtype=np.float64)
            else:
                result[name] = np.zeros(self.nodes[node_id].saved)
        self.reset()
        return result


class Tensor:
    """A float64 array that may participate in a tape."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad_enabled(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# Each primitive is forward(*arrays, **attrs) -> (out, saved) and
# vjp(g, saved) -> tuple of input gradients (None where not needed).

def _add_fwd(a, b):
    _broadcast_shape("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_vjp(g, saved):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_vjp(g, saved):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _mul_fwd(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, (a, b)


def _mul_vjp(g, saved, needs=(True, True)):
    a, b = saved
    ga = _unbroadcast(g * b, a.shape) if needs[0] else None
    gb = _unbroadcast(g * a, b.shape) if needs[1] else None
    return ga, gb


def _div_fwd(a, b):
    _broadcast_shape("div", a, b)
    if np.any(b == 0):
        raise DomainError("div: zero in denominator")
    out = a / b
    return out, (a.shape, b, out)


def _div_vjp(g, saved):
    sa, b, out = saved
    return _unbroadcast(g / b, sa), _unbroadcast(-g * out / b, b.shape)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b, (a, b)


def _matmul_vjp(g, saved, needs=(True, True)):
    a, b = saved
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if needs[0] else None
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if needs[1] else None
    return ga, gb


def _check_conv(kind, x, w, depthwise):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{kind}: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"{kind}: kernel must be square and odd, got {w.shape}")
    cin = w.shape[0] if depthwise else w.shape[1]
    if (depthwise and w.shape[1] != 1) or x.shape[1] != cin:
        raise ShapeError(f"{kind}: input {x.shape} does not match kernel {w.shape}")
    return k // 2


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) patches of the zero-padded input."""
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, h * w)


def _conv2d_fwd(x, w):
    _check_conv("conv2d", x, w, depthwise=False)
    n, _, h, wd = x.shape
    cout, k = w.shape[0], w.shape[2]
    cols = x.reshape(n, x.shape[1], h * wd) if k == 1 else _im2col(x, k)
    out = np.matmul(w.reshape(cout, -1), cols)
    return out.reshape(n, cout, h, wd), (x.shape, w, cols)


def _conv2d_vjp(g, saved, needs=(True, True)):
    shape, w, cols = saved
    n, cin, h, wd = shape
    cout, k = w.shape[0], w.shape[2]
    g2 = g.reshape(n, cout, h * wd)
    gw = gx = None
    if needs[1]:
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if needs[0]:
        # adjoint of a same-padded correlation: correlate with the flipped,
        # channel-transposed kernel
        wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        gcols = g2 if k == 1 else _im2col(g, k)
        gx = np.matmul(wt, gcols).reshape(shape)
    return gx, gw


def _dwconv_fwd(x, w):
    _check_conv("depthwise_conv2d", x, w, depthwise=True)
    n, c, h, wd = x.shape
    k = w.shape[2]
    cols = _im2col(x, k).reshape(n, c, k * k, h * wd)
    out = np.einsum("nckp,ck->ncp", cols, w.reshape(c, k * k), optimize=True)
    return out.reshape(x.shape), (x.shape, w, cols)


def _dwconv_vjp(g, saved, needs=(True, True)):
    shape, w, cols = saved
    n, c, h, wd = shape
    k = w.shape[2]
    g2 = g.reshape(n, c, 1, h * wd)
    gw = gx = None
    if needs[1]:
        gw = (cols * g2).sum(axis=(0, 3)).reshape(w.shape)
    if needs[0]:
        gcols = _im2col(g, k).reshape(n, c, k * k, h * wd)
        wflip = w[:, 0, ::-1, ::-1].reshape(c, k * k)
        gx = np.einsum("nckp,ck->ncp", gcols, wflip, optimize=True).reshape(shape)
    return gx, gw


def _relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def _relu_vjp(g, mask):
    return (g * mask,)


def _leaky_fwd(x, slope=LEAKY_SLOPE):
    scale = np.where(x > 0, 1.0, slope)
    return x * scale, scale


def _leaky_vjp(g, scale):
    return (g * scale,)


def _sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def _sigmoid_vjp(g, out):
    return (g * out * (1.0 - out),)


def _exp_fwd(x):
    out = np.exp(x)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow")
    return out, out


def _exp_vjp(g, out):
    return (g * out,)


def _log_fwd(x):
    if np.any(x <= 0):
        raise DomainError("log: non-positive argument")
    return np.log(x), x


def _log_vjp(g, x):
    return (g / x,)


def _abs_fwd(x):
    return np.abs(x), np.sign(x)


def _abs_vjp(g, sign):
    return (g * sign,)


def _power_fwd(x, exponent):
    exponent = float(exponent)
    if not exponent.is_integer() and np.any(x <= 0):
        raise DomainError(f"power: non-positive base with exponent {exponent}")
    return x**exponent, (x, exponent)


def _power_vjp(g, saved):
    x, exponent = saved
    return (g * exponent * x ** (exponent - 1.0),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum_fwd(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    return x.sum(axis=axes, keepdims=keepdims), (x.shape, axes, keepdims)


def _sum_vjp(g, saved):
    shape, axes, keepdims = saved
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return x.mean(axis=axes, keepdims=keepdims), (x.shape, axes, keepdims, count)


def _mean_vjp(g, saved):
    shape, axes, keepdims, count = saved
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / count, shape).copy(),)


def _softmax_fwd(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return out, (out, axis)


def _softmax_vjp(g, saved):
    out, axis = saved
    inner = (g * out).sum(axis=axis, keepdims=True)
    return (out * (g - inner),)


def _concat_fwd(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} do not conform on axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, (sizes, axis)


def _concat_vjp(g, saved):
    sizes, axis = saved
    return tuple(np.split(g, sizes, axis=axis))


def _slice_fwd(x, index):
    try:
        out = x[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None
    return out, (x.shape, index)


def _slice_vjp(g, saved):
    shape, index = saved
    gx = np.zeros(shape)
    if _has_array_index(index):
        np.add.at(gx, index, g)
    else:
        gx[index] = g
    return (gx,)


def _has_array_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _avgpool_fwd(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: spatial extents must be even, got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), None


def _avgpool_vjp(g, saved):
    return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)


def _upsample_fwd(x):
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4-d input, got {x.shape}")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def _upsample_vjp(g, shape):
    n, c, h, w = shape
    return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)


def _transpose_fwd(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    return x.transpose(axes), axes


def _transpose_vjp(g, axes):
    return (g.transpose(np.argsort(axes)),)


def _reshape_fwd(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return out, x.shape


def _reshape_vjp(g, shape):
    return (g.reshape(shape),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_vjp),
    "sub": (_sub_fwd, _sub_vjp),
    "mul": (_mul_fwd, _mul_vjp),
    "div": (_div_fwd, _div_vjp),
    "matmul": (_matmul_fwd, _matmul_vjp),
    "conv2d": (_conv2d_fwd, _conv2d_vjp),
    "depthwise_conv2d": (_dwconv_fwd, _dwconv_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "leaky_relu": (_leaky_fwd, _leaky_vjp),
    "sigmoid": (_sigmoid_fwd, _sigmoid_vjp),
    "exp": (_exp_fwd, _exp_vjp),
    "log": (_log_fwd, _log_vjp),
    "abs": (_abs_fwd, _abs_vjp),
    "power": (_power_fwd, _power_vjp),
    "sum": (_sum_fwd, _sum_vjp),
    "mean": (_mean_fwd, _mean_vjp),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "concat": (_concat_fwd, _concat_vjp),
    "slice": (_slice_fwd, _slice_vjp),
    "avgpool2": (_avgpool_fwd, _avgpool_vjp),
    "upsample_nearest": (_upsample_fwd, _upsample_vjp),
    "transpose": (_transpose_fwd, _transpose_vjp),
    "reshape": (_reshape_fwd, _reshape_vjp),
}


_NEEDS_AWARE = frozenset({"conv2d", "depthwise_conv2d", "matmul", "mul"})


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and record it if any input is on a tape."""
    try:
        forward, vjp = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    out, saved = forward(*(t.data for t in tensors), **attrs)
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ValueError(f"{kind}: operands belong to different tapes")
    tape = next(iter(tapes.values()))
    parents = tuple(t.node_id if t.tape is not None else None for t in tensors)
    node_id = tape.record(kind, parents, saved, vjp)
    return Tensor(out, tape=tape, node_id=node_id)


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def div(a, b):
    return apply_primitive("div", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def conv2d(x, w):
    """Stride-1 cross-correlation with zero padding that keeps H and W."""
    return apply_primitive("conv2d", [x, w])


def depthwise_conv2d(x, w):
    return apply_primitive("depthwise_conv2d", [x, w])


def relu(x):
    return apply_primitive("relu", [x])


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return apply_primitive("leaky_relu", [x], slope=slope)


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def abs_(x):
    return apply_primitive("abs", [x])


def power(x, exponent: float):
    return apply_primitive("power", [x], exponent=exponent)


def sum_(x, axis=None, keepdims: bool = False):
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False):
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def softmax(x, axis: int = -1):
    return apply_primitive("softmax", [x], axis=axis)


def concat(xs: Sequence, axis: int = 0):
    return apply_primitive("concat", list(xs), axis=axis)


def slice_(x, index):
    return apply_primitive("slice", [x], index=index)


def avgpool2(x):
    return apply_primitive("avgpool2", [x])


def upsample_nearest(x):
    return apply_primitive("upsample_nearest", [x])


def transpose(x, axes=None):
    return apply_primitive("transpose", [x], axes=axes)


def reshape(x, shape):
    return apply_primitive("reshape", [x], shape=tuple(shape))
