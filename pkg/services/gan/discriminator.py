"""
Patch discriminator

Scores (aerial, ground) pairs. The two images are concatenated along
channels (6 in) and pass through 4x4 convolutions: `n_layers` stride-2
stages, one stride-1 stage and a stride-1 projection to a single logit
channel. Each output logit scores one overlapping receptive-field patch.
"""

import logging

from pydantic import BaseModel, ConfigDict, Field

from services.common.exceptions import DimensionError
from services.engine import ops
from services.engine.tensor import Tensor
from services.model.layers import BatchNormLayer, Conv2dLayer, conv_output_size
from services.model.module import Module, ModuleList, Shape

logger = logging.getLogger(__name__)

KERNEL = 4
LEAKY_SLOPE = 0.2


class DiscriminatorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    in_channels: int = Field(6, ge=1)
    base_channels: int = Field(64, ge=1, description="width of the first stage")
    n_layers: int = Field(3, ge=1, le=6, description="number of stride-2 stages")
    bn_momentum: float = Field(0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)

    def stage_widths(self) -> list:
        """Output channels of every conv, ending with the logit channel"""
        cap = self.base_channels * 8
        widths = [min(self.base_channels * 2 ** i, cap) for i in range(self.n_layers + 1)]
        return widths + [1]


class DiscriminatorStage(Module):
    """4x4 conv, optional batch norm, optional LeakyReLU(0.2)"""

    def __init__(self, c_in: int, c_out: int, stride: int, norm: bool, activate: bool,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.conv = Conv2dLayer(c_in, c_out, kernel=KERNEL, stride=stride, padding=1)
        self.norm = BatchNormLayer(c_out, bn_momentum, bn_eps) if norm else None
        self.activate = activate

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return ops.leaky_relu(x, LEAKY_SLOPE) if self.activate else x

    def trace(self, tracer, shape: Shape) -> Shape:
        shape = self.trace_child("conv", tracer, shape)
        if self.norm is not None:
            shape = self.trace_child("norm", tracer, shape)
        return shape


class PatchDiscriminator(Module):
    """
    Conditional patch discriminator

    Example:
        d = PatchDiscriminator(DiscriminatorConfig())
        logits = d(aerial, ground)     # 1 x 1 x 30 x 30 for 256 x 256 inputs
    """

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        widths = config.stage_widths()
        stages = ModuleList()
        c_in = config.in_channels
        for i, c_out in enumerate(widths):
            strided = i < config.n_layers
            last = i == len(widths) - 1
            stages.append(DiscriminatorStage(
                c_in, c_out,
                stride=2 if strided else 1,
                norm=0 < i and not last,
                activate=not last,
                bn_momentum=config.bn_momentum,
                bn_eps=config.bn_eps,
            ))
            c_in = c_out
        self.stages = stages
        self.assign_names()

    def output_size(self, size: int) -> int:
        for i in range(len(self.stages)):
            size = conv_output_size(size, KERNEL, 2 if i < self.config.n_layers else 1, 1)
        return size

    def forward(self, source: Tensor, target: Tensor) -> Tensor:
        if source.shape != target.shape:
            raise DimensionError("discriminator inputs must share a shape",
                                 expected=source.shape, actual=target.shape)
        x = ops.concat([source, target], axis=1)
        if x.shape[1] != self.config.in_channels:
            raise DimensionError("discriminator channel mismatch",
                                 expected=self.config.in_channels, actual=x.shape[1])
        if self.output_size(x.shape[2]) < 1:
            raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} is too small for the discriminator",
                                 actual=x.shape[2:])
        for stage in self.stages:
            x = stage(x)
        return x

    def trace(self, tracer, shape: Shape) -> Shape:
        c, h, w = shape
        x = (2 * c, h, w)
        scoped = tracer.scope("stages")
        for i, stage in enumerate(self.stages):
            x = stage.trace(scoped.scope(str(i)), x)
        return x
