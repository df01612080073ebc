"""Dense NHWC tensors with reverse-mode automatic differentiation.

Every value in the library is a :class:`Tensor` wrapping a numpy array.  An
operation is a :class:`Function` subclass with a ``forward`` on raw arrays
and a ``backward`` that maps the output gradient to input gradients.  When
any input requires a gradient, the output records a :class:`Node`; node ids
come from a global counter, so creation order is a valid topological order
and :func:`backward` only has to sort the reachable nodes by id.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from types import SimpleNamespace
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, UsageError

__all__ = [
    "Tensor",
    "Function",
    "Node",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "debug_mode",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "reshape",
    "transpose",
    "concat",
    "slice_",
    "reduce_sum",
    "reduce_mean",
    "l2_norm",
    "batched_matmul",
    "softmax",
    "conv2d",
    "conv2d_transpose",
    "conv_output_size",
    "same_padding",
    "backward",
    "zero_grad",
]


class _State(threading.local):
    def __init__(self):
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True
        self.debug = False


_state = _State()
_node_ids = itertools.count()


def get_default_dtype() -> np.dtype:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported precision {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def debug_mode(enabled: bool = True):
    """Raise :class:`NumericError` whenever an op produces NaN or Inf."""
    previous = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = previous


class Node:
    """One recorded operation in the computation graph."""

    __slots__ = ("id", "fn", "inputs", "ctx")

    def __init__(self, fn, inputs, ctx):
        self.id = next(_node_ids)
        self.fn = fn
        self.inputs = inputs
        self.ctx = ctx


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data)
        arr = arr.astype(dtype or _state.dtype, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None

    # construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, node: Node | None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = node is not None
        out.grad = None
        out._node = node
        return out

    @property
    def node_id(self) -> int | None:
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self) -> bool:
        return self._node is None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        """Same data, cut from the graph."""
        return Tensor._from_op(self.data, None)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return batched_matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """Differentiable operation on tensors.

    Subclasses implement ``forward(ctx, *arrays, **kwargs)`` returning an
    array and ``backward(ctx, grad)`` returning one gradient (or ``None``)
    per tensor input.
    """

    name = "function"

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        ctx = SimpleNamespace()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        if _state.debug and not np.all(np.isfinite(out)):
            raise NumericError(f"{cls.name} produced non-finite values")
        node = None
        if _state.grad_enabled and any(t.requires_grad for t in tensors):
            node = Node(cls, tensors, ctx)
        return Tensor._from_op(out, node)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(
            f"{name}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# elementwise ----------------------------------------------------------------


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("add", a, b)
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return unbroadcast(grad, ctx.shapes[0]), unbroadcast(grad, ctx.shapes[1])


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("sub", a, b)
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return unbroadcast(grad, ctx.shapes[0]), unbroadcast(-grad, ctx.shapes[1])


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("mul", a, b)
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return (
            unbroadcast(grad * ctx.b, ctx.a.shape),
            unbroadcast(grad * ctx.a, ctx.b.shape),
        )


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("div", a, b)
        ctx.a, ctx.b = a, b
        return a / b

    @staticmethod
    def backward(ctx, grad):
        ga = grad / ctx.b
        gb = -grad * ctx.a / (ctx.b * ctx.b)
        return unbroadcast(ga, ctx.a.shape), unbroadcast(gb, ctx.b.shape)


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Power(Function):
    name = "power"

    @staticmethod
    def forward(ctx, a, exponent):
        ctx.a, ctx.exponent = a, exponent
        return a**exponent

    @staticmethod
    def backward(ctx, grad):
        p = ctx.exponent
        return (grad * p * ctx.a ** (p - 1),)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        ctx.out = np.exp(a)
        return ctx.out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.out,)


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        ctx.a = a
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx.a,)


class Sqrt(Function):
    name = "sqrt"

    @staticmethod
    def forward(ctx, a):
        ctx.out = np.sqrt(a)
        return ctx.out

    @staticmethod
    def backward(ctx, grad):
        return (grad / (2.0 * ctx.out),)


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        ctx.mask = a > 0
        return np.where(ctx.mask, a, 0).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        ctx.out = out
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.out * (1.0 - ctx.out),)


# shape ----------------------------------------------------------------------


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}") from None

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx.inverse = tuple(np.argsort(axes))
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, grad):
        return (np.transpose(grad, ctx.inverse),)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ranks = {a.ndim for a in arrays}
        if len(ranks) != 1:
            raise ConfigurationError(f"concat: mixed ranks {[a.shape for a in arrays]}")
        axis = axis % arrays[0].ndim
        for a in arrays[1:]:
            if a.shape[:axis] + a.shape[axis + 1:] != arrays[0].shape[:axis] + arrays[0].shape[axis + 1:]:
                raise ConfigurationError(
                    f"concat: shapes {arrays[0].shape} and {a.shape} differ off axis {axis}"
                )
        ctx.axis = axis
        ctx.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.split(grad, ctx.splits, axis=ctx.axis))


class GetItem(Function):
    name = "slice"

    @staticmethod
    def forward(ctx, a, index):
        ctx.shape, ctx.dtype, ctx.index = a.shape, a.dtype, index
        return a[index]

    @staticmethod
    def backward(ctx, grad):
        out = np.zeros(ctx.shape, dtype=ctx.dtype)
        if _is_basic_index(ctx.index):
            out[ctx.index] += grad
        else:
            np.add.at(out, ctx.index, grad)
        return (out,)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


# reductions -----------------------------------------------------------------


class Sum(Function):
    name = "reduce_sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad, ctx.shape).copy(),)


class L2Norm(Function):
    name = "l2_norm"

    @staticmethod
    def forward(ctx, a, axis=-1, keepdims=False):
        norm = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
        ctx.a, ctx.norm, ctx.axis, ctx.keepdims = a, norm, axis, keepdims
        return norm if keepdims else np.squeeze(norm, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        if not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        safe = np.where(ctx.norm > 0, ctx.norm, 1)
        # d|x|/dx is taken as 0 at the origin
        return (np.where(ctx.norm > 0, grad * ctx.a / safe, 0).astype(ctx.a.dtype, copy=False),)


# linear algebra -------------------------------------------------------------


class MatMul(Function):
    name = "batched_matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ConfigurationError(f"batched_matmul: cannot multiply {a.shape} by {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ConfigurationError(
                f"batched_matmul: batch dims of {a.shape} and {b.shape} do not broadcast"
            ) from None
        ctx.a, ctx.b = a, b
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, grad):
        ga = np.matmul(grad, np.swapaxes(ctx.b, -1, -2))
        gb = np.matmul(np.swapaxes(ctx.a, -1, -2), grad)
        return unbroadcast(ga, ctx.a.shape), unbroadcast(gb, ctx.b.shape)


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, a, axis=-1):
        if not -a.ndim <= axis < a.ndim:
            raise UsageError(f"softmax: axis {axis} out of range for {a.shape}")
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        ctx.out, ctx.axis = out, axis
        return out

    @staticmethod
    def backward(ctx, grad):
        y = ctx.out
        return (y * (grad - np.sum(grad * y, axis=ctx.axis, keepdims=True)),)


# convolution ----------------------------------------------------------------


def same_padding(kernel_size: int) -> tuple[int, int]:
    before = (kernel_size - 1) // 2
    return before, kernel_size - 1 - before


def _resolve_padding(padding, kernel_size: int) -> tuple[int, int]:
    if padding == "same":
        return same_padding(kernel_size)
    if padding == "valid":
        return 0, 0
    if isinstance(padding, int) and padding >= 0:
        return padding, padding
    raise ConfigurationError(f"unknown padding {padding!r}")


def conv_output_size(size: int, kernel_size: int, stride: int, padding) -> int:
    """Spatial extent after a convolution: floor((H + pads - K) / stride) + 1."""
    before, after = _resolve_padding(padding, kernel_size)
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if kernel_size > size + before + after:
        raise ConfigurationError(
            f"kernel {kernel_size} larger than padded input {size + before + after}"
        )
    return (size + before + after - kernel_size) // stride + 1


def transpose_output_size(size: int, kernel_size: int, stride: int, padding) -> int:
    if padding == "same":
        return size * stride
    if padding == "valid":
        return (size - 1) * stride + kernel_size
    raise ConfigurationError(f"conv2d_transpose supports same|valid padding, got {padding!r}")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, Hp, Wp, C) -> (N, Ho, Wo, K, K, C) patches of a padded input."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add (N, Ho, Wo, K, K, C) patches back into a padded image."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    ho, wo = cols.shape[1], cols.shape[2]
    for i in range(k):
        for j in range(k):
            out[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += cols[
                :, :, :, i, j
            ]
    return out


def _check_conv_args(name, x, kernel, bias, cin_axis, padding="valid"):
    if x.ndim != 4:
        raise ConfigurationError(f"{name}: input must be NHWC, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ConfigurationError(f"{name}: kernel must be (K, K, a, b), got {kernel.shape}")
    if kernel.shape[cin_axis] != x.shape[3]:
        raise ConfigurationError(
            f"{name}: input shape {x.shape} does not match kernel shape {kernel.shape}"
        )
    if cin_axis == 2:
        k = kernel.shape[0]
        before, after = _resolve_padding(padding, k)
        if k > min(x.shape[1], x.shape[2]) + before + after:
            raise ConfigurationError(
                f"{name}: kernel shape {kernel.shape} is larger than padded input shape {x.shape}"
            )
    cout = kernel.shape[5 - cin_axis]
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"{name}: bias shape {bias.shape} does not match kernel {kernel.shape}")


class Conv2d(Function):
    """NHWC cross-correlation via im2col; kernel is (K, K, Cin, Cout)."""

    name = "conv2d"

    @staticmethod
    def forward(ctx, x, kernel, bias, stride=1, padding="valid"):
        _check_conv_args("conv2d", x, kernel, bias, 2, padding)
        k = kernel.shape[0]
        n, h, w, cin = x.shape
        ho = conv_output_size(h, k, stride, padding)
        wo = conv_output_size(w, k, stride, padding)
        pb, pa = _resolve_padding(padding, k)
        xp = np.pad(x, ((0, 0), (pb, pa), (pb, pa), (0, 0))) if pb or pa else x
        cols = _im2col(xp, k, stride, ho, wo)
        wmat = kernel.reshape(k * k * cin, -1)
        out = cols.reshape(n * ho * wo, -1) @ wmat + bias
        ctx.cols, ctx.kernel, ctx.xp_shape = cols, kernel, xp.shape
        ctx.stride, ctx.pads, ctx.x_shape = stride, (pb, pa), x.shape
        return out.reshape(n, ho, wo, -1)

    @staticmethod
    def backward(ctx, grad):
        kernel = ctx.kernel
        k, cin, cout = kernel.shape[0], kernel.shape[2], kernel.shape[3]
        g2 = grad.reshape(-1, cout)
        cols2 = ctx.cols.reshape(g2.shape[0], -1)
        gkernel = (cols2.T @ g2).reshape(kernel.shape)
        gbias = g2.sum(axis=0)
        gcols = (g2 @ kernel.reshape(-1, cout).T).reshape(ctx.cols.shape)
        gxp = _col2im(gcols, ctx.xp_shape, k, ctx.stride)
        pb, _ = ctx.pads
        h, w = ctx.x_shape[1], ctx.x_shape[2]
        return gxp[:, pb : pb + h, pb : pb + w], gkernel, gbias


class Conv2dTranspose(Function):
    """Adjoint of :class:`Conv2d` w.r.t. its input; kernel is (K, K, Cout, Cin).

    The kernel layout is the one a forward conv mapping the (Cout-channel)
    output back to the (Cin-channel) input would use.
    """

    name = "conv2d_transpose"

    @staticmethod
    def forward(ctx, x, kernel, bias, stride=1, padding="valid"):
        _check_conv_args("conv2d_transpose", x, kernel, bias, 3)
        if stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {stride}")
        k, cout = kernel.shape[0], kernel.shape[2]
        n, h, w, cin = x.shape
        ho = transpose_output_size(h, k, stride, padding)
        wo = transpose_output_size(w, k, stride, padding)
        pb, pa = (0, 0) if padding == "valid" else same_padding(k)
        padded = (n, ho + pb + pa, wo + pb + pa, cout)
        wmat = kernel.reshape(k * k * cout, cin)
        cols = (x.reshape(-1, cin) @ wmat.T).reshape(n, h, w, k, k, cout)
        out = _col2im(cols, padded, k, stride)[:, pb : pb + ho, pb : pb + wo]
        ctx.x, ctx.kernel, ctx.stride, ctx.pads = x, kernel, stride, (pb, pa)
        return out + bias

    @staticmethod
    def backward(ctx, grad):
        x, kernel = ctx.x, ctx.kernel
        k, cout, cin = kernel.shape[0], kernel.shape[2], kernel.shape[3]
        n, h, w, _ = x.shape
        pb, pa = ctx.pads
        gp = np.pad(grad, ((0, 0), (pb, pa), (pb, pa), (0, 0))) if pb or pa else grad
        cols = _im2col(gp, k, ctx.stride, h, w).reshape(n * h * w, k * k * cout)
        gx = (cols @ kernel.reshape(k * k * cout, cin)).reshape(x.shape)
        gkernel = (cols.T @ x.reshape(-1, cin)).reshape(kernel.shape)
        gbias = grad.reshape(-1, cout).sum(axis=0)
        return gx, gkernel, gbias


# functional API ---------------------------------------------------------------


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def power(a, exponent: float) -> Tensor:
    return Power.apply(a, exponent=exponent)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return Sqrt.apply(a)


def relu(a) -> Tensor:
    return ReLU.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def slice_(a, index) -> Tensor:
    return GetItem.apply(a, index=index)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return L2Norm.apply(a, axis=axis, keepdims=keepdims)


def batched_matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def conv2d(x, kernel, bias=None, stride: int = 1, padding="valid") -> Tensor:
    kernel = as_tensor(kernel)
    if bias is None:
        bias = Tensor(np.zeros(kernel.shape[3]))
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def conv2d_transpose(x, kernel, bias=None, stride: int = 1, padding="valid") -> Tensor:
    kernel = as_tensor(kernel)
    if bias is None:
        bias = Tensor(np.zeros(kernel.shape[2]))
    return Conv2dTranspose.apply(x, kernel, bias, stride=stride, padding=padding)


# backpropagation --------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not isinstance(root, Tensor) or root.size != 1:
        shape = getattr(root, "shape", None)
        raise UsageError(f"backward needs a scalar root, got shape {shape}")
    seed = np.ones_like(root.data)
    if root._node is None:
        if root.requires_grad:
            root.grad += seed
        return

    # gather reachable interior tensors
    interior: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in interior:
            continue
        interior[id(t)] = t
        stack.extend(i for i in t._node.inputs if i._node is not None)

    grads: dict[int, np.ndarray] = {id(root): seed}
    for t in sorted(interior.values(), key=lambda t: t._node.id, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        in_grads = node.fn.backward(node.ctx, g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad += ig
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
