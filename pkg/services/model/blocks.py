"""
Encoder stem, upsampling block and decoder head
"""

from typing import Sequence

from services.common.exceptions import DimensionError
from services.engine import ops
from services.engine.tensor import Tensor
from services.model.layers import Conv2dLayer, ConvNormAct
from services.model.module import Module, Shape

STEM_WIDTHS = (16, 32, 32)


def _check_channels(x: Tensor, expected: int, where: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise DimensionError(f"{where}: expected b x {expected} x h x w, got {x.shape}",
                             expected=expected, actual=x.shape)


class EncoderStem(Module):
    """
    Stride-2 conv then two stride-1 convs, each with BN + ReLU

    b x 3 x H x W -> b x widths[-1] x H/2 x W/2 (the L1 feature).
    """

    def __init__(self, c_in: int = 3, widths: Sequence[int] = STEM_WIDTHS,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        w1, w2, w3 = widths
        self.c_in, self.c_out = c_in, w3
        self.down = ConvNormAct(c_in, w1, stride=2, bn_momentum=bn_momentum, bn_eps=bn_eps)
        self.conv1 = ConvNormAct(w1, w2, bn_momentum=bn_momentum, bn_eps=bn_eps)
        self.conv2 = ConvNormAct(w2, w3, bn_momentum=bn_momentum, bn_eps=bn_eps)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "encoder stem")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"encoder stem needs even H and W, got {x.shape[2:]}",
                                 expected="even", actual=x.shape[2:])
        return self.conv2(self.conv1(self.down(x)))

    def trace(self, tracer, shape: Shape) -> Shape:
        for name in ("down", "conv1", "conv2"):
            shape = self.trace_child(name, tracer, shape)
        return shape


class UpsampleBlock(Module):
    """Nearest x2 upsampling then two 3x3 convs with BN + ReLU (c_in -> c_out -> c_out)"""

    def __init__(self, c_in: int, c_out: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.conv1 = ConvNormAct(c_in, c_out, bn_momentum=bn_momentum, bn_eps=bn_eps)
        self.conv2 = ConvNormAct(c_out, c_out, bn_momentum=bn_momentum, bn_eps=bn_eps)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "upsample block")
        return self.conv2(self.conv1(ops.nearest_upsample2x(x)))

    def trace(self, tracer, shape: Shape) -> Shape:
        c, h, w = shape
        if c != self.c_in:
            raise DimensionError("upsample block channel mismatch", expected=self.c_in, actual=c)
        shape = self.trace_child("conv1", tracer, (c, 2 * h, 2 * w))
        return self.trace_child("conv2", tracer, shape)


class DecoderHead(Module):
    """Two 3x3 conv + BN + ReLU stages, a final 3x3 conv to RGB, then tanh"""

    def __init__(self, c_in: int, c_out: int = 3, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.c_in = c_in
        self.conv1 = ConvNormAct(c_in, c_in, bn_momentum=bn_momentum, bn_eps=bn_eps)
        self.conv2 = ConvNormAct(c_in, c_in, bn_momentum=bn_momentum, bn_eps=bn_eps)
        self.out = Conv2dLayer(c_in, c_out, kernel=3, stride=1, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c_in, "decoder head")
        return ops.tanh(self.out(self.conv2(self.conv1(x))))

    def trace(self, tracer, shape: Shape) -> Shape:
        for name in ("conv1", "conv2", "out"):
            shape = self.trace_child(name, tracer, shape)
        return shape
