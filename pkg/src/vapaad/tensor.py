"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation is a
:class:`Function` subclass; applying one to tensors that require gradients
records the function on the output, and :func:`backward` replays the
recorded operations in reverse execution order.

Scalars default to 32-bit floats.  Gradient checks switch to 64-bit with
:func:`default_dtype`::

    with default_dtype(np.float64):
        ...
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import _kernels

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward was requested on something that cannot be differentiated."""


class _State:
    dtype = np.dtype(np.float32)
    grad_enabled = True
    check_finite = True


_state = _State()
_counter = itertools.count()


def get_default_dtype() -> np.dtype:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"default dtype must be float32 or float64, got {dtype}")
    _state.dtype = dtype


@contextmanager
def default_dtype(dtype):
    prev = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Evaluate without recording operations (inference)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def _assert_finite(arr: np.ndarray, op: str) -> None:
    # min/max propagate NaN and avoid allocating a boolean mask
    if arr.size and not (np.isfinite(arr.max()) and np.isfinite(arr.min())):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_ctx", "_seq", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _state.dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._ctx: Optional[Function] = None
        self._seq = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._ctx = None
        t._seq = -1
        return t

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    # -- gradient plumbing --------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def backward(self, grad: Optional[np.ndarray] = None) -> "Tape":
        return backward(self, grad)

    # -- operators ----------------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor._wrap(np.asarray(other, dtype=self.dtype), False)

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other):
        return Div.apply(self._lift(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, idx):
        return GetItem.apply(self, idx=idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def tanh(self):
        return Tanh.apply(self)


class Function:
    """A differentiable operation.

    Subclasses implement ``forward`` on raw arrays (stashing whatever the
    backward pass needs on ``self``) and ``backward``, which maps the output
    gradient to one gradient per input (``None`` for inputs that receive
    none).
    """

    inputs: tuple = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        track = _state.grad_enabled and any(t.requires_grad for t in inputs)
        fn.needs_grad = tuple(t.requires_grad for t in inputs) if track else ()
        with np.errstate(all="ignore"):
            out = fn.forward(*(t.data for t in inputs), **kwargs)
        if _state.check_finite:
            _assert_finite(out, cls.__name__)
        res = Tensor._wrap(out, track)
        if track:
            fn.inputs = inputs
            res._ctx = fn
            res._seq = next(_counter)
        return res


class Tape:
    """The recorded operations reachable from a root, in execution order."""

    def __init__(self, root: Tensor):
        nodes: dict[int, Tensor] = {}
        leaves: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            key = id(t)
            if t._ctx is None:
                if t.requires_grad:
                    leaves[key] = t
                continue
            if key in nodes:
                continue
            nodes[key] = t
            stack.extend(t._ctx.inputs)
        self.nodes = sorted(nodes.values(), key=lambda t: t._seq)
        self.leaves = list(leaves.values())

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def operations(self) -> list[str]:
        return [type(t._ctx).__name__ for t in self.nodes]

    def run_backward(self, root: Tensor, seed: np.ndarray, visit=None) -> None:
        if root._ctx is None:
            _accumulate(root, seed)
        pending = {id(root): seed}
        # buffers allocated here may be updated in place; others may alias
        # arrays held elsewhere
        owned = set()
        for t in reversed(self.nodes):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if visit is not None:
                visit(t)
            fn = t._ctx
            scatter = getattr(fn, "scatter_index", None)
            if scatter is not None and fn.inputs[0]._ctx is not None:
                inp = fn.inputs[0]
                if not inp.requires_grad:
                    continue
                key = id(inp)
                buf = pending.get(key)
                if buf is None or key not in owned:
                    fresh = np.zeros(inp.shape, dtype=g.dtype)
                    if buf is not None:
                        fresh += buf
                    buf = pending[key] = fresh
                    owned.add(key)
                buf[scatter] += g
                continue
            in_grads = fn.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for inp, ig in zip(fn.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{type(fn).__name__}.backward returned grad of shape "
                                     f"{ig.shape} for input of shape {inp.shape}")
                if inp._ctx is None:
                    _accumulate(inp, ig)
                    continue
                key = id(inp)
                prev = pending.get(key)
                if prev is None:
                    pending[key] = ig
                elif key in owned:
                    prev += ig
                else:
                    pending[key] = prev + ig
                    owned.add(key)
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> Tape:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate: calling this twice without zeroing doubles them.
    Leaves that are reachable but receive no gradient (for example through a
    stop-gradient) get a zero array, so every reachable parameter ends up
    with a populated ``grad``.
    """
    if not isinstance(loss, Tensor):
        raise TapeError(f"backward needs a Tensor, got {type(loss).__name__}")
    if grad is None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if loss._ctx is None and not loss.requires_grad:
        raise TapeError("loss is not on the tape: no recorded operation requires grad")
    tape = Tape(loss)
    tape.run_backward(loss, np.asarray(grad, dtype=loss.dtype))
    return tape


# --------------------------------------------------------------------------
# broadcasting helpers
# --------------------------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast "
                         "(trailing dimensions must match or be 1)") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        a, b = self.a, self.b
        ga = _unbroadcast(g * b, a.shape) if self.needs_grad[0] else None
        gb = _unbroadcast(g * a, b.shape) if self.needs_grad[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        a, b = self.a, self.b
        ga = _unbroadcast(g / b, a.shape) if self.needs_grad[0] else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if self.needs_grad[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return g * self.out


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return g / self.a


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        s = self.out
        return g * s * (1 - s)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return g * (1 - self.out * self.out)


class LeakyRelu(Function):
    def forward(self, a, slope=0.2):
        self.pos = a > 0
        self.slope = slope
        return np.where(self.pos, a, a * slope).astype(a.dtype, copy=False)

    def backward(self, g):
        return np.where(self.pos, g, g * self.slope).astype(g.dtype, copy=False)


class Clip(Function):
    def forward(self, a, lo, hi):
        self.inside = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, g):
        return g * self.inside


_UNARY = {"neg": Neg, "exp": Exp, "log": Log, "sigmoid": Sigmoid, "tanh": Tanh,
          "leaky_relu": LeakyRelu}
_BINARY = {"add": Add, "sub": Sub, "mul": Mul, "div": Div}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None, **kwargs) -> Tensor:
    """Apply a named scalar function elementwise.

    Unary ops: ``neg exp log sigmoid tanh leaky_relu``; binary ops:
    ``add sub mul div`` with trailing-dimension broadcasting.
    """
    if b is None:
        if op not in _UNARY:
            raise ValueError(f"unknown unary op {op!r}")
        return _UNARY[op].apply(a, **kwargs)
    if op not in _BINARY:
        raise ValueError(f"unknown binary op {op!r}")
    return _BINARY[op].apply(a, a._lift(b))


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return LeakyRelu.apply(x, slope=slope)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return np.broadcast_to(g, self.shape).copy()


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes]))
        return np.asarray(a.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return np.broadcast_to(g / self.count, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(self, g):
        return g.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.ascontiguousarray(a.transpose(self.axes))

    def backward(self, g):
        return np.ascontiguousarray(g.transpose(np.argsort(self.axes)))


class GetItem(Function):
    def forward(self, a, idx):
        self.shape = a.shape
        self.idx = idx
        # basic slices are scattered straight into the tape's gradient buffer
        self.scatter_index = idx if _is_basic_index(idx) else None
        return np.array(a[idx], copy=True)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        if _is_basic_index(self.idx):
            out[self.idx] = g
        else:
            np.add.at(out, self.idx, g)
        return out


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer))
               for p in parts)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat along axis {axis}: {exc}") from None

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        try:
            return np.stack(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"stack along axis {axis}: {exc}") from None

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul batch")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.a, self.b
        ga = gb = None
        if self.needs_grad[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if self.needs_grad[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return y * (g - (g * y).sum(axis=self.axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; slices along ``axis`` sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _as_tuple(v, n: int) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def _resolve_padding(padding, ksize: tuple) -> tuple:
    if padding == "valid":
        return (0,) * len(ksize)
    if padding == "same":
        if any(k % 2 == 0 for k in ksize):
            raise ShapeError(f"'same' padding needs odd kernel sizes, got {ksize}")
        return tuple(k // 2 for k in ksize)
    return _as_tuple(padding, len(ksize))


class Conv(Function):
    """Cross-correlation over 2 or 3 trailing spatial axes.

    Forward sums each output element in row-major ``(c_in, kernel offset)``
    order; backward goes through im2col and matrix products.
    """

    def forward(self, x, w, b, stride, padding, nd):
        unbatched = x.ndim == nd + 1
        if unbatched:
            x = x[None]
        if x.ndim != nd + 2 or w.ndim != nd + 2:
            raise ShapeError(f"conv{nd}d: bad ranks, input {x.shape}, kernel {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv{nd}d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv{nd}d: bias shape {b.shape} != ({w.shape[0]},)")
        if min(x.shape[2:], default=0) < 1:
            raise ShapeError(f"conv{nd}d: zero-sized spatial dims in {x.shape}")
        ksize = w.shape[2:]
        pads = _resolve_padding(padding, ksize)
        stride = _as_tuple(stride, nd)
        lift = (1,) * (3 - nd)
        x5 = x.reshape(x.shape[:2] + lift + x.shape[2:])
        w5 = w.reshape(w.shape[:2] + lift + ksize)
        pads3 = (0,) * (3 - nd) + pads
        stride3 = lift + stride
        ks3 = w5.shape[2:]
        if any(pads3):
            xp = np.pad(x5, ((0, 0), (0, 0)) + tuple((p, p) for p in pads3))
        else:
            xp = np.ascontiguousarray(x5)
        out_sp = tuple((xp.shape[2 + i] - ks3[i]) // stride3[i] + 1 for i in range(3))
        if min(out_sp) < 1:
            raise ShapeError(f"conv{nd}d: kernel {ksize} larger than padded input {xp.shape[2:]}")
        out = _kernels.conv_forward(xp, w5, stride3, out_sp)
        out += b[None, :, None, None, None]
        self.saved = (xp, w5, ks3, stride3, pads3, out_sp, x5.shape, x.shape, w.shape, unbatched)
        out = out.reshape(out.shape[:2] + out_sp[3 - nd:])
        return out[0] if unbatched else out

    def backward(self, g):
        xp, w5, ks3, stride3, pads3, out_sp, x5_shape, x_shape, w_shape, unbatched = self.saved
        if unbatched:
            g = g[None]
        n, f = g.shape[:2]
        g2 = np.ascontiguousarray(g).reshape(n, f, -1)
        gx = gw = gb = None
        if self.needs_grad[1]:
            cols = _kernels.im2col(xp, ks3, stride3, out_sp)
            gw = _batched_outer(g2, cols).reshape(w_shape)
        if self.needs_grad[2]:
            gb = g2.sum(axis=(0, 2))
        if self.needs_grad[0]:
            gcols = np.matmul(w5.reshape(f, -1).T, g2)
            gxp = _kernels.col2im(gcols, xp.shape, ks3, stride3, out_sp)
            d, h, w = x5_shape[2:]
            pd, ph, pw = pads3
            gx = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w].reshape(x_shape)
            if unbatched:
                gx = gx[0]
        return gx, gw, gb


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_n a[n] @ b[n].T`` without materializing a transposed copy of ``b``."""
    out = np.matmul(a[0], b[0].T)
    for n in range(1, a.shape[0]):
        out += np.matmul(a[n], b[n].T)
    return out


def _zero_bias(w: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros(w.shape[0], dtype=w.dtype), False)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding="same", stride=1) -> Tensor:
    """2-d cross-correlation.

    Args:
        x: ``(C_in, H, W)`` or batched ``(N, C_in, H, W)``.
        w: ``(C_out, C_in, kH, kW)``.
        b: ``(C_out,)`` or None.
        padding: ``"same"`` (zero padding, odd kernels), ``"valid"`` or an int.
    """
    return Conv.apply(x, w, b if b is not None else _zero_bias(w),
                      stride=stride, padding=padding, nd=2)


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding="same", stride=1) -> Tensor:
    """3-d cross-correlation on ``(N, C_in, D, H, W)`` with ``w`` of ``(C_out, C_in, kD, kH, kW)``."""
    return Conv.apply(x, w, b if b is not None else _zero_bias(w),
                      stride=stride, padding=padding, nd=3)


def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
