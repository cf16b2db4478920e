"""
Parallel ConvMLP encoder block

A strided conv pair downsamples b x c x h x w to X' (b x 2c x h/2 x w/2).
X' is split by channel parity; the odd-indexed half runs through an MLP
along the channel axis (per spatial site) and the even-indexed half through
an MLP along the flattened spatial axis (per channel). The two results are
concatenated (channel branch first) and added back onto X'. Because the
concat undoes the parity interleave, the residual sum mixes neighbouring
channels of X' with each other.
"""

import logging
from typing import Optional, Tuple

from services.common.exceptions import ContractError, DimensionError
from services.engine import ops
from services.engine.tensor import Tensor
from services.model.layers import ConvNormAct, Dense
from services.model.module import Module, Shape

logger = logging.getLogger(__name__)

DEFAULT_SPATIAL_CAP = 256


def parity_split(x: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Split channels by (1-based) parity

    Returns:
        (x_c, x_s): channels 0, 2, 4, ... and channels 1, 3, 5, ... (0-based)
    """
    if x.ndim != 4 or x.shape[1] % 2:
        raise DimensionError(f"parity_split needs an even channel count, got {x.shape}",
                             expected="even channels", actual=x.shape)
    return ops.slice_(x, (slice(None), slice(0, None, 2))), ops.slice_(x, (slice(None), slice(1, None, 2)))


def interleave_channels(x_c: Tensor, x_s: Tensor) -> Tensor:
    """Inverse of parity_split"""
    if x_c.shape != x_s.shape:
        raise DimensionError("interleave_channels needs equal shapes",
                             expected=x_c.shape, actual=x_s.shape)
    b, c, h, w = x_c.shape
    stacked = ops.concat([ops.reshape(x_c, (b, c, 1, h, w)), ops.reshape(x_s, (b, c, 1, h, w))], axis=2)
    return ops.reshape(stacked, (b, 2 * c, h, w))


class ConvDownBlock(Module):
    """
    downConv (c -> 2c, stride 2) then conv (2c -> 2c), each with BN + ReLU

    Used on its own as the plain-convolution encoder stage and as the
    encoding half of ParallelConvMLPBlock.
    """

    def __init__(self, c: int, resolution: Optional[Tuple[int, int]] = None,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        if c < 1:
            raise ContractError(f"block width must be positive, got {c}")
        self.c = c
        self.resolution = tuple(resolution) if resolution else None
        self.down = ConvNormAct(c, 2 * c, stride=2, bn_momentum=bn_momentum, bn_eps=bn_eps)
        self.conv = ConvNormAct(2 * c, 2 * c, bn_momentum=bn_momentum, bn_eps=bn_eps)

    def _check_input(self, shape: Shape) -> None:
        c, h, w = shape[-3:]
        if c != self.c:
            raise DimensionError(f"expected {self.c} input channels, got {c}",
                                 expected=self.c, actual=c)
        if h % 2 or w % 2:
            raise DimensionError(f"block input must have even h, w, got {h}x{w}",
                                 expected="even", actual=(h, w))
        if self.resolution is not None and (h, w) != self.resolution:
            n = (self.resolution[0] // 2) * (self.resolution[1] // 2)
            raise DimensionError(
                f"block is bound to {self.resolution[0]}x{self.resolution[1]} inputs (n={n}), got {h}x{w}",
                expected=n,
                actual=(h // 2) * (w // 2),
            )

    def conv_encode(self, x: Tensor) -> Tensor:
        self._check_input(x.shape)
        return self.conv(self.down(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.conv_encode(x)

    def trace(self, tracer, shape: Shape) -> Shape:
        self._check_input(shape)
        shape = self.trace_child("down", tracer, shape)
        return self.trace_child("conv", tracer, shape)


class ParallelConvMLPBlock(ConvDownBlock):
    """
    ConvDownBlock plus parallel channel/spatial MLPs with a residual fuse

    Args:
        c: Input channels (output has 2c)
        resolution: Input (h, w); fixes n = (h/2)(w/2) for the spatial MLP
        channel_expansion: Channel-MLP hidden width h_c = c * expansion
        channel_hidden: Explicit h_c, overriding channel_expansion
        spatial_hidden_cap: Spatial-MLP hidden width h_s = min(n, cap)
    """

    def __init__(
        self,
        c: int,
        resolution: Tuple[int, int],
        channel_expansion: int = 1,
        spatial_hidden_cap: int = DEFAULT_SPATIAL_CAP,
        channel_hidden: Optional[int] = None,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        super().__init__(c, resolution, bn_momentum, bn_eps)
        h, w = resolution
        self.n = (h // 2) * (w // 2)
        self.hidden_channels = channel_hidden or c * channel_expansion
        self.hidden_spatial = min(self.n, spatial_hidden_cap)
        self.channel_fc1 = Dense(c, self.hidden_channels)
        self.channel_fc2 = Dense(self.hidden_channels, c)
        self.spatial_fc1 = Dense(self.n, self.hidden_spatial)
        self.spatial_fc2 = Dense(self.hidden_spatial, self.n)

    def parallel_mlps(self, x_c: Tensor, x_s: Tensor) -> Tuple[Tensor, Tensor]:
        b, c, h, w = x_c.shape
        if h * w != self.n or x_s.shape != x_c.shape:
            raise DimensionError(
                f"parallel MLPs expect n={self.n} sites, got {h}x{w}",
                expected=self.n,
                actual=h * w,
            )
        # channel MLP: b x n x c, mixing along c at every site
        tokens = ops.permute(ops.reshape(x_c, (b, c, h * w)), (0, 2, 1))
        f_c = self.channel_fc2(ops.gelu(self.channel_fc1(tokens)))
        f_c = ops.reshape(ops.permute(f_c, (0, 2, 1)), (b, c, h, w))

        # spatial MLP: b x c x n, mixing along n within every channel
        rows = ops.reshape(x_s, (b, c, h * w))
        f_s = self.spatial_fc2(ops.gelu(self.spatial_fc1(rows)))
        return f_c, ops.reshape(f_s, (b, c, h, w))

    def forward(self, x: Tensor) -> Tensor:
        encoded = self.conv_encode(x)
        f_c, f_s = self.parallel_mlps(*parity_split(encoded))
        return encoded + ops.concat([f_c, f_s], axis=1)

    def trace(self, tracer, shape: Shape) -> Shape:
        encoded = super().trace(tracer, shape)
        c2, h, w = encoded
        half = c2 // 2
        self.trace_child("channel_fc1", tracer, (h * w, half))
        self.trace_child("channel_fc2", tracer, (h * w, self.hidden_channels))
        self.trace_child("spatial_fc1", tracer, (half, h * w))
        self.trace_child("spatial_fc2", tracer, (half, self.hidden_spatial))
        return encoded
