"""
Differentiable primitives

Each primitive is a Function subclass with a matching lowercase helper that
accepts Tensors (or scalars, wrapped as constants). Broadcasting follows
numpy; backward passes reduce gradients back to each input's shape.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit

from services.common.exceptions import ContractError, DimensionError
from services.engine.tensor import Function, Tensor, as_tensor

Axis = Optional[Union[int, Tuple[int, ...]]]

# log(1e-12): floor for the log-probabilities inside the BCE loss
LOG_PROB_FLOOR = float(np.log(1e-12))
GELU_COEFF = float(np.sqrt(2.0 / np.pi))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that broadcasting expanded to reach `grad.shape`"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast",
                             expected=a.shape, actual=b.shape) from None


# ============ Elementwise arithmetic ============

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = unbroadcast(grad * self.b, self.a.shape) if self.needs_input_grad[0] else None
        gb = unbroadcast(grad * self.a, self.b.shape) if self.needs_input_grad[1] else None
        return ga, gb


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = unbroadcast(grad / self.b, self.a.shape) if self.needs_input_grad[0] else None
        gb = (
            unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape)
            if self.needs_input_grad[1]
            else None
        )
        return ga, gb


class Neg(Function):
    name = "neg"

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Abs(Function):
    name = "abs"

    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


class Square(Function):
    name = "square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (2.0 * grad * self.x,)


class Log(Function):
    name = "log"

    def forward(self, x):
        self.x = x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


# ============ Activations ============

class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyReLU(Function):
    name = "leaky_relu"

    def forward(self, x, slope: float = 0.2):
        self.scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Tanh(Function):
    """Output kept in the open interval (-1, 1); float32 tanh rounds to +-1 from |x| of about 9"""

    name = "tanh"

    def forward(self, x):
        bound = np.nextafter(x.dtype.type(1), x.dtype.type(0))
        self.y = np.clip(np.tanh(x), -bound, bound)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        self.y = expit(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class GELU(Function):
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))"""

    name = "gelu"

    def forward(self, x):
        self.x = x
        self.t = np.tanh(GELU_COEFF * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        du = GELU_COEFF * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis: int = -1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


# ============ Reductions and shape ops ============

class Sum(Function):
    name = "sum"

    def forward(self, x, axis: Axis = None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x, axis: Axis = None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        reduced = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        self.count = max(reduced, 1)
        return np.asarray(x.mean(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape: Tuple[int, ...] = ()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape: cannot view {x.shape} as {shape}",
                                 expected=x.shape, actual=tuple(shape)) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Permute(Function):
    name = "permute"

    def forward(self, x, axes: Tuple[int, ...] = ()):
        if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
            raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
        self.inverse = tuple(np.argsort([a % x.ndim for a in axes]))
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad):
        return (np.ascontiguousarray(grad.transpose(self.inverse)),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise DimensionError(
                f"concat: incompatible shapes {[a.shape for a in arrays]} along axis {axis}"
            ) from None

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Slice(Function):
    """Basic (non-fancy) indexing"""

    name = "slice"

    def forward(self, x, index=()):
        self.shape, self.index = x.shape, index
        return np.array(x[index], copy=True)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[self.index] = grad
        return (out,)


class NearestUpsample2x(Function):
    name = "nearest_upsample2x"

    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError("nearest_upsample2x expects b x c x h x w",
                                 expected=4, actual=x.ndim)
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        b, c, h2, w2 = grad.shape
        return (grad.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


# ============ Linear algebra ============

class MatMul(Function):
    """Batched matrix product over the last two axes (leading axes broadcast)"""

    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError("matmul expects operands of rank >= 2",
                                 expected=2, actual=min(a.ndim, b.ndim))
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(
                f"matmul: inner dimensions differ ({a.shape} @ {b.shape})",
                expected=a.shape[-1],
                actual=b.shape[-2],
            )
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = gb = None
        if self.needs_input_grad[0]:
            ga = unbroadcast(np.matmul(grad, np.swapaxes(self.b, -1, -2)), self.a.shape)
        if self.needs_input_grad[1]:
            gb = unbroadcast(np.matmul(np.swapaxes(self.a, -1, -2), grad), self.b.shape)
        return ga, gb


class Conv2d(Function):
    """
    2-D cross-correlation, b x c_in x h x w -> b x c_out x h' x w'

    Patches are gathered with a strided window view and multiplied against
    the flattened kernel; backward scatters patch gradients back with one
    strided add per kernel offset.
    """

    name = "conv2d"

    def forward(self, x, weight, bias, stride: int = 1, padding: int = 0):
        if x.ndim != 4:
            raise DimensionError("conv2d expects b x c x h x w input", expected=4, actual=x.ndim)
        b, c, h, w = x.shape
        c_out, c_in, k, k2 = weight.shape
        if c != c_in:
            raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c_in}",
                                 expected=c_in, actual=c)
        if k != k2:
            raise DimensionError("conv2d: kernels must be square", expected=k, actual=k2)
        if bias.shape != (c_out,):
            raise DimensionError("conv2d: bias must have one entry per output channel",
                                 expected=(c_out,), actual=bias.shape)
        hp, wp = h + 2 * padding, w + 2 * padding
        if hp < k or wp < k:
            raise DimensionError(f"conv2d: padded input {hp}x{wp} smaller than kernel {k}",
                                 expected=k, actual=(hp, wp))

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        h_out, w_out = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h_out * w_out, c * k * k)
        kernel = weight.reshape(c_out, -1)

        out = cols @ kernel.T + bias
        self.cols, self.kernel = cols, kernel
        self.geometry = (x.shape, weight.shape, stride, padding, h_out, w_out)
        return np.ascontiguousarray(out.reshape(b, h_out, w_out, c_out).transpose(0, 3, 1, 2))

    def backward(self, grad):
        (b, c, h, w), w_shape, stride, padding, h_out, w_out = self.geometry
        c_out, _, k, _ = w_shape
        g = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)

        gx = gw = gb = None
        if self.needs_input_grad[1]:
            gw = (g.T @ self.cols).reshape(w_shape)
        if self.needs_input_grad[2]:
            gb = g.sum(axis=0)
        if self.needs_input_grad[0]:
            dcols = (g @ self.kernel).reshape(b, h_out, w_out, c, k, k)
            dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
            row_end = stride * (h_out - 1) + 1
            col_end = stride * (w_out - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + row_end:stride, j:j + col_end:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb


# ============ Normalisation ============

class BatchNorm2d(Function):
    """
    Per-channel batch normalisation over (batch, h, w)

    In training mode the batch statistics normalise the input and the
    running buffers are updated in place (unbiased variance). In eval mode
    the running buffers normalise and nothing is updated.
    """

    name = "batch_norm"

    def forward(
        self,
        x,
        gamma,
        beta,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        training: bool = True,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
            raise DimensionError("batch_norm: channel mismatch",
                                 expected=gamma.shape[0], actual=x.shape)
        self.training = training
        shape = (1, -1, 1, 1)
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if running_mean is not None:
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean
            if running_var is not None:
                unbiased = var * count / (count - 1) if count > 1 else var
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
            self.count = count
        else:
            mean, var = running_mean, running_var
        mean = mean.astype(x.dtype, copy=False)
        var = var.astype(x.dtype, copy=False)

        self.inv_std = (1.0 / np.sqrt(var + eps)).reshape(shape)
        self.xhat = (x - mean.reshape(shape)) * self.inv_std
        self.gamma = gamma.reshape(shape)
        return self.gamma * self.xhat + beta.reshape(shape)

    def backward(self, grad):
        xhat = self.xhat
        g_gamma = (grad * xhat).sum(axis=(0, 2, 3))
        g_beta = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma
        if self.training:
            n = self.count
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = self.inv_std / n * (n * dxhat - sum_d - xhat * sum_dx)
        else:
            gx = dxhat * self.inv_std
        return gx, g_gamma, g_beta


# ============ Losses ============

class BCEWithLogits(Function):
    """
    Elementwise -[t log sigmoid(z) + (1 - t) log(1 - sigmoid(z))]

    Computed in log space; each log-probability is floored at log(1e-12) and
    carries zero gradient where the floor is active.
    """

    name = "bce_with_logits"

    def forward(self, z, target: float = 1.0):
        log_p = log_expit(z)
        log_q = log_expit(-z)
        self.live_p = log_p > LOG_PROB_FLOOR
        self.live_q = log_q > LOG_PROB_FLOOR
        self.p = expit(z)
        self.target = target
        return -(target * np.maximum(log_p, LOG_PROB_FLOOR)
                 + (1.0 - target) * np.maximum(log_q, LOG_PROB_FLOOR))

    def backward(self, grad):
        # d/dz log sigmoid(z) = 1 - p ; d/dz log(1 - sigmoid(z)) = -p
        t, p = self.target, self.p
        dz = -(t * (1.0 - p) * self.live_p - (1.0 - t) * p * self.live_q)
        return (grad * dz,)


# ============ Functional helpers ============

def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a, b) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def abs_(x: Tensor) -> Tensor:
    return Abs.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(x, axes=tuple(axes))


def transpose(x: Tensor, axis_a: int = -2, axis_b: int = -1) -> Tensor:
    axes = list(range(x.ndim))
    axes[axis_a], axes[axis_b] = axes[axis_b], axes[axis_a]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def slice_(x: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not isinstance(item, (int, slice, type(Ellipsis))) and item is not None:
            raise ContractError(f"slice_ supports basic indexing only, got {type(item).__name__}")
    return Slice.apply(x, index=index)


def nearest_upsample2x(x: Tensor) -> Tensor:
    return NearestUpsample2x.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: invalid stride={stride} padding={padding}")
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    return BatchNorm2d.apply(
        x, gamma, beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of `logits` against a constant 0/1 label"""
    return mean(BCEWithLogits.apply(logits, target=float(target)))
