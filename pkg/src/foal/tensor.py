"""Reverse-mode autodiff on numpy arrays with a dynamic tape.

Every operation that sees at least one gradient-requiring input records a
node holding its inputs and a vector-Jacobian closure.  ``backward`` replays
those nodes in the exact reverse of recording order, which is a valid
topological order because an op can only consume tensors that already exist.
Gradients are accumulated additively at fan-out points and into leaf ``.grad``
buffers across repeated backward calls.

All arithmetic is float64.  The tape is not thread-safe; confine a graph and
its backward pass to one thread.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GradError(RuntimeError):
    """Raised on invalid backward requests (non-scalar root, detached root)."""


_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


_op_counter = itertools.count()


class Tensor:
    """A float64 ndarray plus optional tape bookkeeping.

    Leaves are built directly (``Tensor(data, requires_grad=True)``); op
    outputs are built through :func:`_record` and carry a vjp closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._order = -1

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        tag = "leaf" if self.is_leaf else "op"
        return f"Tensor(shape={self.shape}, {tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor],
            vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result, recording a tape node if gradients are live."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._order = next(_op_counter)
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``.

    root must be scalar.  Repeated calls keep adding; use ``zero_grad``
    between independent passes.
    """
    if root.data.size != 1:
        raise GradError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GradError("backward on a tensor that is not connected to any "
                        "gradient-requiring leaf")

    seed = np.ones_like(root.data)
    if root.is_leaf:
        root.grad = seed if root.grad is None else root.grad + seed
        return

    # Reachable op nodes, replayed strictly in reverse recording order.
    nodes: list[Tensor] = []
    seen = {id(root)}
    stack = [root]
    while stack:
        t = stack.pop()
        if not t.is_leaf:
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
    nodes.sort(key=lambda t: t._order, reverse=True)

    pending: dict[int, np.ndarray] = {id(root): seed}
    for node in nodes:
        gy = pending.pop(id(node), None)
        if gy is None:
            continue
        for parent, g in zip(node._parents, node._vjp(gy)):
            if g is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = g if parent.grad is None else parent.grad + g
            else:
                pid = id(parent)
                if pid in pending:
                    pending[pid] = pending[pid] + g
                else:
                    pending[pid] = g


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _binary_check(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: operand shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    # allow scalar on either side, nothing fancier
    if a.data.size == 1:
        return _record(a.data + b.data, (a, b), lambda g: (np.sum(g, keepdims=a.ndim > 0).reshape(a.shape), g))
    if b.data.size == 1:
        return _record(a.data + b.data, (a, b), lambda g: (g, np.sum(g, keepdims=b.ndim > 0).reshape(b.shape)))
    raise ShapeError(f"add: operand shapes {a.shape} and {b.shape} differ")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_check(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_check(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _record(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(a.shape, float(g) / n),))


def total(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    return _record(np.asarray(a.data.sum()), (a,),
                   lambda g: (np.full(a.shape, float(g)),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _record(a.data.reshape(shape).copy(), (a,),
                   lambda g: (g.reshape(a.shape),))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = _as_tensor(a)
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    # gradient at exactly 0 takes the negative-side slope
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _record(np.where(a.data > 0.0, a.data, a.data * slope), (a,),
                   lambda g: (g * factor,))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (third from the end)."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_channels of an empty sequence")
    for t in ts:
        if t.ndim < 3:
            raise ShapeError(f"concat_channels needs >=3 dims, got shape {t.shape}")
        if t.shape[:-3] != ts[0].shape[:-3] or t.shape[-2:] != ts[0].shape[-2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible "
                             f"with {ts[0].shape} outside the channel axis")
    sizes = [t.shape[-3] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-3))

    return _record(np.concatenate([t.data for t in ts], axis=-3), ts, vjp)


def take_channel(a, index: int) -> Tensor:
    """Select one channel from the third-from-last axis, dropping that axis."""
    a = _as_tensor(a)
    if a.ndim < 3:
        raise ShapeError(f"take_channel needs >=3 dims, got shape {a.shape}")
    c = a.shape[-3]
    if not 0 <= index < c:
        raise ShapeError(f"take_channel: index {index} outside {c} channels")

    def vjp(g):
        out = np.zeros(a.shape)
        sl = (Ellipsis, index, slice(None), slice(None))
        out[sl] = g
        return (out,)

    return _record(a.data[..., index, :, :].copy(), (a,), vjp)


def slice_hw(a, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    """Slice the trailing two (height, width) axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"slice_hw needs >=2 dims, got shape {a.shape}")
    H, W = a.shape[-2], a.shape[-1]
    if not (0 <= h0 <= h1 <= H and 0 <= w0 <= w1 <= W):
        raise ShapeError(f"slice_hw: window [{h0}:{h1}, {w0}:{w1}] outside ({H}, {W})")

    def vjp(g):
        out = np.zeros(a.shape)
        out[..., h0:h1, w0:w1] = g
        return (out,)

    return _record(a.data[..., h0:h1, w0:w1].copy(), (a,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
#
# conv2d and conv_transpose2d are exact adjoints of each other in the input
# argument, and both backwards reuse the same im2col/col2im kernels, so the
# inner-product identity <conv(u,w), v> == <u, convT(v,w)> holds to rounding.


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[N,C,Hp,Wp] padded input -> [N, C*k*k, oh*ow] patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + (oh - 1) * stride + 1:stride,
                                  j:j + (ow - 1) * stride + 1:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, k: int, stride: int, pad: int,
            h: int, w: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: [N, C*k*k, oh*ow] -> [N, C, h, w]."""
    n = cols.shape[0]
    c = cols.shape[1] // (k * k)
    cols = cols.reshape(n, c, k, k, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + (oh - 1) * stride + 1:stride,
               j:j + (ow - 1) * stride + 1:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor,
                     stride: int, pad: int, name: str,
                     in_axis: int, out_axis: int) -> None:
    if x.ndim not in (3, 4):
        raise ShapeError(f"{name}: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"{name}: weight must be 4-d, got {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"{name}: kernel must be square, got {weight.shape[2:]}")
    if weight.shape[2] % 2 != 1 and name == "conv2d":
        raise ShapeError(f"{name}: kernel size {weight.shape[2]} must be odd")
    if bias.ndim != 1 or bias.shape[0] != weight.shape[out_axis]:
        raise ShapeError(f"{name}: bias shape {bias.shape} does not match "
                         f"{weight.shape[out_axis]} output channels")
    cin = x.shape[-3]
    if cin != weight.shape[in_axis]:
        raise ShapeError(f"{name}: input has {cin} channels, weight expects "
                         f"{weight.shape[in_axis]}")
    if stride < 1:
        raise ShapeError(f"{name}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"{name}: padding must be >= 0, got {pad}")


def conv2d(x, weight, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x [C_in,H,W] or [N,C_in,H,W]; weight [C_out,C_in,k,k]; bias [C_out].
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _check_conv_args(x, weight, bias, stride, pad, "conv2d", in_axis=1, out_axis=0)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, _, k, _ = weight.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d: padded input ({h + 2 * pad}, {w + 2 * pad}) "
                         f"smaller than kernel {k}")
    oh, ow = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, oh, ow)                    # [N, Cin*k*k, L]
    w2 = weight.data.reshape(cout, cin * k * k)
    y = np.matmul(w2, cols).reshape(n, cout, oh, ow) + bias.data[None, :, None, None]

    def vjp(g):
        if not batched:
            g = g[None] if g.ndim == 3 else g
        gf = g.reshape(n, cout, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, gf)
            gx = _col2im(gcols, k, stride, pad, h, w, oh, ow)
            if not batched:
                gx = gx[0]
        if weight.requires_grad:
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(cout, cin, k, k)
        if bias.requires_grad:
            gb = gf.sum(axis=(0, 2))
        return gx, gw, gb

    return _record(y if batched else y[0], (x, weight, bias), vjp)


def conv_transpose2d(x, weight, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of conv2d in its input.

    x [C_in,H,W] or [N,C_in,H,W]; weight [C_in,C_out,k,k]; bias [C_out].
    Output spatial size is (H-1)*stride - 2*pad + k.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _check_conv_args(x, weight, bias, stride, pad, "conv_transpose2d",
                     in_axis=0, out_axis=1)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    _, cout, k, _ = weight.shape
    oh = (h - 1) * stride - 2 * pad + k
    ow = (w - 1) * stride - 2 * pad + k
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: output size ({oh}, {ow}) is empty")

    w2 = weight.data.reshape(cin, cout * k * k)
    xf = xd.reshape(n, cin, h * w)
    ycols = np.matmul(w2.T, xf)                              # [N, Cout*k*k, h*w]
    y = _col2im(ycols, k, stride, pad, oh, ow, h, w) + bias.data[None, :, None, None]

    def vjp(g):
        if not batched:
            g = g[None] if g.ndim == 3 else g
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gcols = _im2col(gp, k, stride, h, w)                 # [N, Cout*k*k, h*w]
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(n, cin, h, w)
            if not batched:
                gx = gx[0]
        if weight.requires_grad:
            gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(cin, cout, k, k)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record(y if batched else y[0], (x, weight, bias), vjp)
