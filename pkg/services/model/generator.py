"""
Dual-branch cross-view generator

Two encoders (aerial image, ground-view semantic map) each run a stem and
three encoder stages, producing features at L1 (C, H/2) through
L4 (8C, H/16). The direct branch decodes the aerial L4 feature to I_g' and
exposes its L3/L2 activations as attention keys. The fused branch runs the
level chain (semantic queries against those keys) and decodes to I_g''.
"""

import logging
from collections import OrderedDict
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from services.common.config import build_model
from services.common.exceptions import ConfigError, DimensionError
from services.engine.tensor import Tensor
from services.model.blocks import DecoderHead, EncoderStem, UpsampleBlock
from services.model.implicit import LevelChain
from services.model.module import Module, ModuleList, Shape
from services.model.parallel_mlp import DEFAULT_SPATIAL_CAP, ConvDownBlock, ParallelConvMLPBlock

logger = logging.getLogger(__name__)

EncoderVariant = Literal["parallel_mlp", "basic_conv"]

# published-scale spatial hidden width; at the default cap the 256 x 256 model has ~9 M parameters
FULL_SCALE_SPATIAL_CAP = 1024


# ============ Configuration ============

class BatchNormConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    momentum: float = Field(0.1, gt=0.0, le=1.0)
    eps: float = Field(1e-5, gt=0.0)


class GeneratorConfig(BaseModel):
    """
    Architecture hyperparameters

    Serialised (via `canonical_items`) into every checkpoint; a checkpoint
    only loads into a generator built from the same values.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = Field(256, ge=16, description="H = W of inputs and outputs")
    c_l1: int = Field(32, ge=2, description="channel width at L1")
    channel_expansion: int = Field(1, ge=1, description="channel-MLP hidden = c * expansion")
    spatial_hidden_cap: int = Field(DEFAULT_SPATIAL_CAP, ge=1, description="spatial-MLP hidden = min(n, cap)")
    itm_scale_scores: bool = Field(False, description="scale attention scores by 1/sqrt(c/4)")
    encoder_variant: EncoderVariant = "parallel_mlp"
    use_itm: bool = True
    seed: int = Field(0, ge=0)
    batch_norm: BatchNormConfig = Field(default_factory=BatchNormConfig)

    @field_validator("image_size")
    @classmethod
    def check_image_size(cls, v: int) -> int:
        if v % 16:
            raise ValueError(f"image_size must be divisible by 16, got {v}")
        return v

    @field_validator("c_l1")
    @classmethod
    def check_c_l1(cls, v: int) -> int:
        if v % 2:
            raise ValueError(f"c_l1 must be even, got {v}")
        return v

    @model_validator(mode="after")
    def check_level_widths(self) -> "GeneratorConfig":
        for level, width in self.level_widths().items():
            if level != "L1" and width % 4:
                raise ValueError(f"{level} width {width} must be divisible by 4")
        return self

    @classmethod
    def full(cls, **overrides) -> "GeneratorConfig":
        base = {"image_size": 256, "c_l1": 32, "spatial_hidden_cap": FULL_SCALE_SPATIAL_CAP}
        return build_model(cls, {**base, **overrides}, "generator config")

    @classmethod
    def desk(cls, **overrides) -> "GeneratorConfig":
        return build_model(cls, {"image_size": 64, "c_l1": 8, **overrides}, "generator config")

    def level_widths(self) -> Dict[str, int]:
        c = self.c_l1
        return {"L1": c, "L2": 2 * c, "L3": 4 * c, "L4": 8 * c}

    def level_shapes(self) -> Dict[str, Shape]:
        """Per-sample (c, h, w) at every level"""
        h = self.image_size
        widths = self.level_widths()
        return {
            "L1": (widths["L1"], h // 2, h // 2),
            "L2": (widths["L2"], h // 4, h // 4),
            "L3": (widths["L3"], h // 8, h // 8),
            "L4": (widths["L4"], h // 16, h // 16),
        }

    def decoder_widths(self) -> Tuple[int, int]:
        """Post-L2 path: c_L2 -> c_L2/2 -> c_L2/4, then the head"""
        c_l2 = 2 * self.c_l1
        return c_l2 // 2, c_l2 // 4

    def stem_widths(self) -> Tuple[int, int, int]:
        return (self.c_l1 // 2, self.c_l1, self.c_l1)

    def canonical_items(self) -> List[Tuple[str, str]]:
        """Flat, sorted (key, value) pairs; booleans lower-case"""
        flat = self.model_dump(exclude={"batch_norm"})
        flat["bn_momentum"] = self.batch_norm.momentum
        flat["bn_eps"] = self.batch_norm.eps
        return sorted((k, _format_value(v)) for k, v in flat.items())

    def canonical_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.canonical_items())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


# ============ Ablation variants ============

VARIANTS: Dict[str, Dict[str, object]] = OrderedDict(
    A={"encoder_variant": "basic_conv", "use_itm": False},
    E={"encoder_variant": "parallel_mlp", "use_itm": False},
    F={"encoder_variant": "parallel_mlp", "use_itm": True},
)
VARIANT_ALIASES = {"basic_conv": "A", "parallel_mlp": "E", "full": "F"}


def resolve_variant(name: str) -> str:
    """Canonical variant letter for a letter or alias"""
    key = VARIANT_ALIASES.get(name, name)
    if key not in VARIANTS:
        known = sorted(set(VARIANTS) | set(VARIANT_ALIASES))
        raise ConfigError(f"Unknown variant {name!r}; expected one of {known}", field="variant")
    return key


def variant_config(cfg: GeneratorConfig, variant: str) -> GeneratorConfig:
    return cfg.model_copy(update=VARIANTS[resolve_variant(variant)])


def variant_of(cfg: GeneratorConfig) -> Optional[str]:
    for name, toggles in VARIANTS.items():
        if all(getattr(cfg, k) == v for k, v in toggles.items()):
            return name
    return None


# ============ Generator ============

class Generator(Module):
    """
    Full generator

    Parameter enumeration order (the checkpoint contract): aerial_stem,
    aerial_encoder.{0,1,2}, semantic_stem, semantic_encoder.{0,1,2},
    direct_up.{0,1}, direct_out.{0,1}, direct_head, fusion, fused_out.{0,1},
    fused_head.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        bn = config.batch_norm
        widths = config.level_widths()
        shapes = config.level_shapes()

        self.aerial_stem = EncoderStem(3, config.stem_widths(), bn.momentum, bn.eps)
        self.aerial_encoder = self._build_encoder(shapes)
        self.semantic_stem = EncoderStem(3, config.stem_widths(), bn.momentum, bn.eps)
        self.semantic_encoder = self._build_encoder(shapes)

        mid, head = config.decoder_widths()
        self.direct_up = ModuleList([
            UpsampleBlock(widths["L4"], widths["L3"], bn.momentum, bn.eps),
            UpsampleBlock(widths["L3"], widths["L2"], bn.momentum, bn.eps),
        ])
        self.direct_out = ModuleList([
            UpsampleBlock(widths["L2"], mid, bn.momentum, bn.eps),
            UpsampleBlock(mid, head, bn.momentum, bn.eps),
        ])
        self.direct_head = DecoderHead(head, 3, bn.momentum, bn.eps)

        self.fusion = LevelChain(widths, config.use_itm, config.itm_scale_scores, bn.momentum, bn.eps)
        self.fused_out = ModuleList([
            UpsampleBlock(widths["L2"], mid, bn.momentum, bn.eps),
            UpsampleBlock(mid, head, bn.momentum, bn.eps),
        ])
        self.fused_head = DecoderHead(head, 3, bn.momentum, bn.eps)
        self.assign_names()

    def _build_encoder(self, shapes: Dict[str, Shape]) -> ModuleList:
        cfg, bn = self.config, self.config.batch_norm
        blocks = ModuleList()
        for level in ("L1", "L2", "L3"):
            c, h, w = shapes[level]
            if cfg.encoder_variant == "basic_conv":
                blocks.append(ConvDownBlock(c, (h, w), bn.momentum, bn.eps))
            else:
                blocks.append(ParallelConvMLPBlock(
                    c, (h, w),
                    channel_expansion=cfg.channel_expansion,
                    spatial_hidden_cap=cfg.spatial_hidden_cap,
                    bn_momentum=bn.momentum,
                    bn_eps=bn.eps,
                ))
        return blocks

    # ---- forward ----

    def _check_inputs(self, aerial: Tensor, semantic: Optional[Tensor], first: str = "aerial") -> None:
        size = self.config.image_size
        expected = (3, size, size)
        for name, x in ((first, aerial), ("semantic", semantic)):
            if x is None:
                continue
            if x.ndim != 4 or tuple(x.shape[1:]) != expected:
                raise DimensionError(f"{name} input must be b x 3 x {size} x {size}, got {x.shape}",
                                     expected=expected, actual=x.shape)
        if semantic is not None and semantic.shape != aerial.shape:
            raise DimensionError("aerial and semantic inputs must share a shape",
                                 expected=aerial.shape, actual=semantic.shape)

    def _encode(self, prefix: str, x: Tensor, trace: "OrderedDict[str, Tensor]") -> Dict[str, Tensor]:
        stem = getattr(self, f"{prefix}_stem")
        encoder = getattr(self, f"{prefix}_encoder")
        levels = {"L1": stem(x)}
        trace[f"{prefix}.L1"] = levels["L1"]
        for block, (src, dst) in zip(encoder, (("L1", "L2"), ("L2", "L3"), ("L3", "L4"))):
            levels[dst] = block(levels[src])
            trace[f"{prefix}.{dst}"] = levels[dst]
        return levels

    def encode_semantic(self, semantic: Tensor) -> Dict[str, Tensor]:
        self._check_inputs(semantic, None, first="semantic")
        return self._encode("semantic", semantic, OrderedDict())

    def forward_with_trace(self, aerial: Tensor,
                           semantic: Tensor) -> Tuple[Tensor, Tensor, "OrderedDict[str, Tensor]"]:
        """
        Run both branches, returning (I_g', I_g'', trace)

        The trace maps names such as "aerial.L4", "direct.L3", "fused.L2" and
        "direct.output" to the intermediate tensors, in execution order.
        """
        self._check_inputs(aerial, semantic)
        trace: "OrderedDict[str, Tensor]" = OrderedDict()

        aerial_levels = self._encode("aerial", aerial, trace)
        semantic_levels = self._encode("semantic", semantic, trace)

        keys = {"L4": aerial_levels["L4"]}
        x = aerial_levels["L4"]
        for up, level in zip(self.direct_up, ("L3", "L2")):
            x = up(x)
            keys[level] = x
            trace[f"direct.{level}"] = x
        for i, up in enumerate(self.direct_out):
            x = up(x)
            trace[f"direct.up{i}"] = x
        direct = self.direct_head(x)
        trace["direct.output"] = direct

        queries = {level: semantic_levels[level] for level in ("L2", "L3", "L4")}
        for name, value in self.fusion.forward_levels(queries, keys):
            trace[name] = value
        y = trace["fused.L2"]
        for i, up in enumerate(self.fused_out):
            y = up(y)
            trace[f"fused.up{i}"] = y
        fused = self.fused_head(y)
        trace["fused.output"] = fused
        return direct, fused, trace

    def forward(self, aerial: Tensor, semantic: Tensor) -> Tuple[Tensor, Tensor]:
        direct, fused, _ = self.forward_with_trace(aerial, semantic)
        return direct, fused

    # ---- static trace ----

    def trace(self, tracer, shape: Shape) -> Tuple[Shape, Shape]:
        size = self.config.image_size
        if tuple(shape) != (3, size, size):
            raise DimensionError(f"generator input must be 3 x {size} x {size}, got {shape}",
                                 expected=(3, size, size), actual=tuple(shape))
        levels = {}
        for prefix in ("aerial", "semantic"):
            x = self.trace_child(f"{prefix}_stem", tracer, shape)
            tracer.mark(f"{prefix}.L1", x)
            encoder = self.trace_child_list(f"{prefix}_encoder", tracer)
            for i, dst in enumerate(("L2", "L3", "L4")):
                x = encoder(i, x)
                tracer.mark(f"{prefix}.{dst}", x)
            levels[prefix] = x

        x = levels["aerial"]
        direct_up = self.trace_child_list("direct_up", tracer)
        for i, level in enumerate(("L3", "L2")):
            x = direct_up(i, x)
            tracer.mark(f"direct.{level}", x)
        direct_out = self.trace_child_list("direct_out", tracer)
        for i in range(2):
            x = direct_out(i, x)
            tracer.mark(f"direct.up{i}", x)
        direct = self.trace_child("direct_head", tracer, x)
        tracer.mark("direct.output", direct)

        y = self.trace_child("fusion", tracer, self.config.level_shapes())
        fused_out = self.trace_child_list("fused_out", tracer)
        for i in range(2):
            y = fused_out(i, y)
            tracer.mark(f"fused.up{i}", y)
        fused = self.trace_child("fused_head", tracer, y)
        tracer.mark("fused.output", fused)
        return direct, fused

    def trace_child_list(self, name: str, tracer):
        container = self._modules[name]
        scoped = tracer.scope(name)

        def run(index: int, shape: Shape) -> Shape:
            return container[index].trace(scoped.scope(str(index)), shape)

        return run


# ============ Functional surface ============

def apply_ablation(cfg: GeneratorConfig, variant: Optional[str] = None) -> Generator:
    """
    Build an (uninitialised) generator for a config, optionally forcing an
    ablation variant: "A"/"basic_conv", "E"/"parallel_mlp", "F"/"full".

    Raises:
        ConfigError: Unknown variant name
    """
    if variant is not None:
        cfg = variant_config(cfg, variant)
    generator = Generator(cfg)
    logger.info(
        f"Built generator variant={variant_of(cfg) or 'custom'} size={cfg.image_size} "
        f"c_l1={cfg.c_l1} params={generator.num_parameters()}"
    )
    return generator


def generator_forward(aerial: Tensor, semantic: Tensor, generator: Generator) -> Tuple[Tensor, Tensor]:
    return generator(aerial, semantic)


def semantic_level_taps(generator: Generator, semantic: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Semantic-encoder features at (L2, L3, L4), the queries of the level chain"""
    levels = generator.encode_semantic(semantic)
    return levels["L2"], levels["L3"], levels["L4"]
