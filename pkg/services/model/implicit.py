"""
Implicit transformation: residual spatial attention across views

The semantic-map feature (query) attends over the direct-translation feature
(key) to re-weight the value feature:

    Q = q_proj(F_Q), K = k_proj(F_K)      b x c/4 x n
    A = softmax(Q^T K, axis=-1)           b x n x n
    out = V + V A^T                       b x c x n
"""

import logging
from typing import Dict, Tuple

import numpy as np

from services.common.exceptions import ConfigError, DimensionError
from services.engine import ops
from services.engine.tensor import Tensor
from services.model.blocks import UpsampleBlock
from services.model.layers import Conv2dLayer
from services.model.module import Module, Shape

logger = logging.getLogger(__name__)

LEVELS = ("L4", "L3", "L2")


class ImplicitTransform(Module):
    """Q/K 1x1 projections (c -> c/4) plus the residual attention"""

    def __init__(self, c: int, scale_scores: bool = False):
        super().__init__()
        if c % 4:
            raise ConfigError(f"implicit transform width must be divisible by 4, got {c}", field="c")
        self.c = c
        self.scale_scores = scale_scores
        self.q_proj = Conv2dLayer(c, c // 4, kernel=1, stride=1, padding=0)
        self.k_proj = Conv2dLayer(c, c // 4, kernel=1, stride=1, padding=0)

    def attention(self, f_q: Tensor, f_k: Tensor) -> Tensor:
        """Row-stochastic b x n x n attention map"""
        b, _, h, w = f_q.shape
        n = h * w
        q = ops.reshape(self.q_proj(f_q), (b, self.c // 4, n))
        k = ops.reshape(self.k_proj(f_k), (b, self.c // 4, n))
        scores = ops.matmul(ops.transpose(q, 1, 2), k)
        if self.scale_scores:
            scores = scores * float(1.0 / np.sqrt(self.c // 4))
        return ops.softmax(scores, axis=-1)

    def forward(self, f_q: Tensor, f_k: Tensor, f_v: Tensor) -> Tensor:
        if not (f_q.shape == f_k.shape == f_v.shape):
            raise DimensionError(
                "implicit transform inputs must share a shape",
                expected=f_v.shape,
                actual=(f_q.shape, f_k.shape),
            )
        b, c, h, w = f_v.shape
        if c != self.c:
            raise DimensionError(f"implicit transform expects {self.c} channels",
                                 expected=self.c, actual=c)
        attn = self.attention(f_q, f_k)
        v = ops.reshape(f_v, (b, c, h * w))
        out = v + ops.matmul(v, ops.transpose(attn, 1, 2))
        return ops.reshape(out, (b, c, h, w))

    def trace(self, tracer, shape: Shape) -> Shape:
        c, h, w = shape
        n = h * w
        self.trace_child("q_proj", tracer, shape)
        self.trace_child("k_proj", tracer, shape)
        # scores Q^T K plus the weighted sum V A^T
        tracer.scope("attention").layer((c, h, w), 0, n * n * (c // 4) + n * n * c, kind="op")
        return shape


class LevelChain(Module):
    """
    Fuse semantic queries with direct-branch keys at L4, L3 and L2

    The value at L4 is F_Q + F_K; each level's output is upsampled to become
    the next level's value. With `use_itm=False` the attention steps are
    skipped and the chain reduces to upsampling F_Q^{L4} + F_K^{L4}.
    """

    def __init__(self, widths: Dict[str, int], use_itm: bool = True, scale_scores: bool = False,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.widths = dict(widths)
        self.use_itm = use_itm
        if use_itm:
            self.itm_l4 = ImplicitTransform(widths["L4"], scale_scores)
            self.itm_l3 = ImplicitTransform(widths["L3"], scale_scores)
            self.itm_l2 = ImplicitTransform(widths["L2"], scale_scores)
        self.up_l3 = UpsampleBlock(widths["L4"], widths["L3"], bn_momentum, bn_eps)
        self.up_l2 = UpsampleBlock(widths["L3"], widths["L2"], bn_momentum, bn_eps)

    def _check_levels(self, queries: Dict[str, Tensor], keys: Dict[str, Tensor]) -> None:
        for level in LEVELS:
            if level not in queries or level not in keys:
                raise DimensionError(f"level chain is missing level {level}", level=level)
            q, k = queries[level], keys[level]
            if q.shape != k.shape or q.shape[1] != self.widths[level]:
                raise DimensionError(
                    f"level {level}: query {q.shape} and key {k.shape} must both have "
                    f"{self.widths[level]} channels",
                    expected=self.widths[level],
                    actual=(q.shape, k.shape),
                    level=level,
                )

    def forward(self, queries: Dict[str, Tensor], keys: Dict[str, Tensor]) -> Tensor:
        return self.forward_levels(queries, keys)[-1][1]

    def forward_levels(self, queries: Dict[str, Tensor],
                       keys: Dict[str, Tensor]) -> Tuple[Tuple[str, Tensor], ...]:
        """Run the chain and return (name, tensor) for every level output"""
        self._check_levels(queries, keys)
        value = queries["L4"] + keys["L4"]
        outputs = []
        if self.use_itm:
            value = self.itm_l4(queries["L4"], keys["L4"], value)
        outputs.append(("fused.L4", value))
        value = self.up_l3(value)
        if self.use_itm:
            value = self.itm_l3(queries["L3"], keys["L3"], value)
        outputs.append(("fused.L3", value))
        value = self.up_l2(value)
        if self.use_itm:
            value = self.itm_l2(queries["L2"], keys["L2"], value)
        outputs.append(("fused.L2", value))
        return tuple(outputs)

    def trace(self, tracer, shapes: Dict[str, Shape]) -> Shape:
        shape = shapes["L4"]
        if self.use_itm:
            shape = self.trace_child("itm_l4", tracer, shape)
        tracer.mark("fused.L4", shape)
        shape = self.trace_child("up_l3", tracer, shape)
        if self.use_itm:
            shape = self.trace_child("itm_l3", tracer, shape)
        tracer.mark("fused.L3", shape)
        shape = self.trace_child("up_l2", tracer, shape)
        if self.use_itm:
            shape = self.trace_child("itm_l2", tracer, shape)
        tracer.mark("fused.L2", shape)
        return shape
