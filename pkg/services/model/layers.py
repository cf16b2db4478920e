"""
Leaf layers and weight initialisation
"""

import logging

import numpy as np

from services.common.exceptions import ContractError, DimensionError
from services.engine import ops
from services.engine.rng import Rng
from services.engine.tensor import Tensor
from services.model.module import Module, Parameter, Shape

logger = logging.getLogger(__name__)

INIT_STD = 0.02


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2dLayer(Module):
    """Square-kernel convolution with bias"""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int = 1):
        super().__init__()
        if min(c_in, c_out, kernel, stride) < 1 or padding < 0:
            raise ContractError(
                f"Invalid conv geometry c_in={c_in} c_out={c_out} k={kernel} s={stride} p={padding}"
            )
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = Parameter(np.zeros((c_out, c_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = shape
        if c != self.c_in:
            raise DimensionError(f"{self.qualified_name or 'conv'}: expected {self.c_in} channels",
                                 expected=self.c_in, actual=c)
        return (
            self.c_out,
            conv_output_size(h, self.kernel, self.stride, self.padding),
            conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def trace(self, tracer, shape: Shape) -> Shape:
        out = self.output_shape(shape)
        macs = out[1] * out[2] * self.c_out * self.c_in * self.kernel * self.kernel
        tracer.layer(out, self.num_parameters(), macs)
        return out


class Dense(Module):
    """Affine map over the last axis: x @ W^T + b"""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        if min(in_features, out_features) < 1:
            raise ContractError(f"Invalid dense size {in_features}->{out_features}")
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(np.zeros((out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"{self.qualified_name or 'dense'}: last axis is {x.shape[-1]}",
                expected=self.in_features,
                actual=x.shape[-1],
            )
        return ops.matmul(x, ops.transpose(self.weight)) + self.bias

    def trace(self, tracer, shape: Shape) -> Shape:
        sites = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        out = tuple(shape[:-1]) + (self.out_features,)
        tracer.layer(out, self.num_parameters(), sites * self.in_features * self.out_features)
        return out


class BatchNormLayer(Module):
    """Batch normalisation over channels of b x c x h x w maps"""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta,
            self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )

    def trace(self, tracer, shape: Shape) -> Shape:
        if shape[0] != self.channels:
            raise DimensionError("batch norm channel mismatch", expected=self.channels, actual=shape[0])
        tracer.layer(shape, self.num_parameters(), 0)
        return shape


class ConvNormAct(Module):
    """Conv2d, optional batch norm, ReLU"""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 1,
        norm: bool = True,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        super().__init__()
        self.conv = Conv2dLayer(c_in, c_out, kernel, stride, padding)
        self.norm = BatchNormLayer(c_out, bn_momentum, bn_eps) if norm else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return ops.relu(x)

    def trace(self, tracer, shape: Shape) -> Shape:
        shape = self.trace_child("conv", tracer, shape)
        if self.norm is not None:
            shape = self.trace_child("norm", tracer, shape)
        return shape


def init_weights(module: Module, rng: Rng) -> None:
    """
    Initialise every conv/dense weight ~ Normal(0, 0.02) and zero the biases;
    batch norm gets gamma=1, beta=0 and fresh running statistics.

    Each weight draws from its own stream labelled by the layer's qualified
    name (see `Module.assign_names`), falling back to its relative name.
    """
    layers = dict(module.named_modules())
    for name, layer in layers.items():
        if isinstance(layer, (Conv2dLayer, Dense)):
            gen = rng.fresh(f"init/{layer.qualified_name or name}")
            layer.weight.data[...] = gen.normal(0.0, INIT_STD, size=layer.weight.shape)
            layer.bias.data[...] = 0.0
        elif isinstance(layer, BatchNormLayer):
            layer.gamma.data[...] = 1.0
            layer.beta.data[...] = 0.0
            layer.running_mean[...] = 0.0
            layer.running_var[...] = 1.0
    logger.debug(f"Initialised {module.num_parameters()} parameters from seed {rng.seed}")
