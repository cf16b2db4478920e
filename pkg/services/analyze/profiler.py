"""
Static cost analysis

A CostTracer walks a model's `trace` methods with per-image shapes (no batch
axis) and collects one row per leaf layer:

    conv      params c_out*c_in*k*k + c_out, MACs k*k*c_in*c_out*H_out*W_out
    dense     params out*in + out,           MACs in*out per application site
    BN        params 2c (running statistics excluded), 0 MACs
    attention no params, n*n*(c/4) + n*n*c MACs

Elementwise operations cost nothing. Composite models also drop named
shape marks ("aerial.L1", "fused.L2", ...), which `trace_shapes` returns
alongside the layer rows.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from services.common.exceptions import DimensionError
from services.engine.tensor import Tensor, no_grad
from services.gan.discriminator import DiscriminatorConfig, PatchDiscriminator
from services.model.generator import Generator, GeneratorConfig
from services.model.module import Module, Shape, record_shapes

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["layer", "out_shape", "params", "macs"]

# reported complexity of the full model, for side-by-side comparison
REFERENCE_PARAMS = 40_870_000
REFERENCE_MACS = 6_640_000_000


@dataclass
class CostRow:
    name: str
    out_shape: Shape
    params: int = 0
    macs: int = 0
    kind: str = "layer"  # layer | op | mark


class CostTracer:
    """Collects rows; `scope` returns a tracer sharing the same row list"""

    def __init__(self, prefix: str = "", rows: Optional[List[CostRow]] = None):
        self.prefix = prefix
        self.rows: List[CostRow] = rows if rows is not None else []

    def scope(self, name: str) -> "CostTracer":
        return CostTracer(f"{self.prefix}.{name}" if self.prefix else name, self.rows)

    def layer(self, out_shape: Shape, params: int, macs: int, kind: str = "layer") -> None:
        self.rows.append(CostRow(self.prefix, tuple(int(d) for d in out_shape), int(params), int(macs), kind))

    def mark(self, name: str, shape: Shape) -> None:
        self.rows.append(CostRow(name, tuple(int(d) for d in shape), kind="mark"))


@dataclass
class CostReport:
    """Per-layer rows plus totals"""

    rows: List[CostRow] = field(default_factory=list)
    output: Any = None

    @property
    def cost_rows(self) -> List[CostRow]:
        return [r for r in self.rows if r.kind != "mark"]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.cost_rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.cost_rows)

    def marks(self) -> "OrderedDict[str, Shape]":
        return OrderedDict((r.name, r.out_shape) for r in self.rows if r.kind == "mark")

    def totals_by_module(self, depth: int = 1) -> "OrderedDict[str, Tuple[int, int]]":
        """(params, macs) summed over rows sharing the first `depth` name parts"""
        totals: "OrderedDict[str, Tuple[int, int]]" = OrderedDict()
        for row in self.cost_rows:
            key = ".".join(row.name.split(".")[:depth]) or "<root>"
            params, macs = totals.get(key, (0, 0))
            totals[key] = (params + row.params, macs + row.macs)
        return totals

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "layer": r.name,
                    "out_shape": "x".join(str(d) for d in r.out_shape),
                    "params": r.params,
                    "macs": r.macs,
                }
                for r in self.cost_rows
            ],
            columns=CSV_COLUMNS,
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    def format_table(self) -> str:
        frame = self.to_frame()
        if frame.empty:
            return "(no layers)\nTOTAL params=0 macs=0"
        return (
            frame.to_string(index=False)
            + f"\nTOTAL params={self.total_params:,} macs={self.total_macs:,}"
        )


# ============ Entry points ============

def trace_model(model: Module, input_shape: Shape) -> CostReport:
    """
    Run the static trace of `model` on a per-image input shape

    Raises:
        DimensionError: If the shape is invalid for the model
    """
    if any(int(d) < 1 for d in input_shape):
        raise DimensionError("input shape must be positive", actual=tuple(input_shape))
    tracer = CostTracer()
    output = model.trace(tracer, tuple(int(d) for d in input_shape))
    return CostReport(rows=tracer.rows, output=output)


def count_params(model: Module) -> Tuple["OrderedDict[str, int]", int]:
    """
    Per-layer and total learnable parameter counts (buffers excluded)

    Independent of the input shape: counts come from the registered
    parameters of every module that owns some directly.
    """
    per_layer: "OrderedDict[str, int]" = OrderedDict()
    for name, module in model.named_modules():
        own = sum(p.size for p in module._parameters.values())
        if own:
            per_layer[name or type(module).__name__] = own
    return per_layer, sum(per_layer.values())


def count_macs(model: Module, input_shape: Shape) -> Tuple["OrderedDict[str, int]", int]:
    """Per-row and total MACs for one image"""
    report = trace_model(model, input_shape)
    per_row: "OrderedDict[str, int]" = OrderedDict()
    for row in report.cost_rows:
        per_row[row.name] = per_row.get(row.name, 0) + row.macs
    return per_row, report.total_macs


def trace_shapes(model: Module, input_shape: Shape) -> List[Tuple[str, Shape]]:
    """Ordered (name, per-image output shape) for every layer, op and level mark"""
    return [(r.name, r.out_shape) for r in trace_model(model, input_shape).rows]


def _model_inputs(model: Module, input_shape: Shape) -> Sequence[Tensor]:
    x = Tensor(np.zeros((1,) + tuple(input_shape)))
    if isinstance(model, (Generator, PatchDiscriminator)):
        return (x, x)
    return (x,)


def dynamic_shapes(model: Module, input_shape: Shape) -> List[Tuple[str, Shape]]:
    """(name, shape) of every leaf layer call during a real batch-1 forward"""
    was_training = model.training
    model.eval()
    try:
        with no_grad(), record_shapes() as shapes:
            model(*_model_inputs(model, input_shape))
    finally:
        model.train(was_training)
    return list(shapes)


def cross_check(model: Module, input_shape: Shape) -> List[str]:
    """
    Compare the static trace with a real forward

    Returns:
        Human-readable mismatches; empty when the trace is exact
    """
    static = [(r.name, r.out_shape) for r in trace_model(model, input_shape).rows if r.kind == "layer"]
    dynamic = dynamic_shapes(model, input_shape)
    problems = []
    if len(static) != len(dynamic):
        problems.append(f"{len(static)} traced layers vs {len(dynamic)} executed")
    for (s_name, s_shape), (d_name, d_shape) in zip(static, dynamic):
        if s_name != d_name or s_shape != d_shape:
            problems.append(f"traced {s_name} {s_shape} vs executed {d_name} {d_shape}")
    return problems


# ============ Whole-model summary ============

@dataclass
class ModelCostSummary:
    """Generator and discriminator reports with the generator, +D and +2D aggregations"""

    generator: CostReport
    discriminator: CostReport
    image_size: int

    def aggregations(self) -> "OrderedDict[str, Tuple[int, int]]":
        g_params, g_macs = self.generator.total_params, self.generator.total_macs
        d_params, d_macs = self.discriminator.total_params, self.discriminator.total_macs
        return OrderedDict([
            ("generator", (g_params, g_macs)),
            ("generator+D", (g_params + d_params, g_macs + d_macs)),
            ("generator+2D", (g_params + 2 * d_params, g_macs + 2 * d_macs)),
        ])

    def breakdown(self) -> pd.DataFrame:
        """Per top-level module totals, discriminators last"""
        records = [
            {"module": name, "params": p, "macs": m}
            for name, (p, m) in self.generator.totals_by_module().items()
        ]
        records.append({
            "module": "discriminator (x2)",
            "params": 2 * self.discriminator.total_params,
            "macs": 2 * self.discriminator.total_macs,
        })
        return pd.DataFrame(records, columns=["module", "params", "macs"])

    def level_shapes(self) -> "OrderedDict[str, Shape]":
        return self.generator.marks()

    def format(self, include_discriminators: bool = True) -> str:
        lines = [f"image size {self.image_size}x{self.image_size}", "", "levels:"]
        for name, shape in self.level_shapes().items():
            lines.append(f"  {name:<16} {'x'.join(str(d) for d in shape)}")
        lines += ["", "per-module totals:", self.breakdown().to_string(index=False), ""]
        for name, (params, macs) in self.aggregations().items():
            if name != "generator" and not include_discriminators:
                continue
            lines.append(
                f"{name:<14} params={params:,} ({params / REFERENCE_PARAMS:.2f}x of 40.87M) "
                f"macs={macs:,} ({macs / REFERENCE_MACS:.2f}x of 6.64G)"
            )
        return "\n".join(lines)


def summarize(gen_config: GeneratorConfig,
              disc_config: Optional[DiscriminatorConfig] = None) -> ModelCostSummary:
    """Trace a freshly built generator and discriminator for the given configs"""
    disc_config = disc_config or DiscriminatorConfig()
    size = gen_config.image_size
    generator = Generator(gen_config)
    discriminator = PatchDiscriminator(disc_config)
    summary = ModelCostSummary(
        generator=trace_model(generator, (3, size, size)),
        discriminator=trace_model(discriminator, (3, size, size)),
        image_size=size,
    )
    for name, (params, macs) in summary.aggregations().items():
        logger.info(f"{name}: params={params} macs={macs}")
    return summary
