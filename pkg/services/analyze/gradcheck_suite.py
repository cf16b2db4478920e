"""
Gradient-check suite

Probes every differentiable primitive, every block (stem, parallel ConvMLP,
upsampling, decoder head, discriminator, implicit transform, losses) and the
whole generator, both from a 16-weight slice of one of its parameters and from
its aerial input, against central finite differences. Vector-valued
functions are reduced to a scalar by a fixed random projection scaled by
1/sqrt(size).
"""

import logging
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Sequence, Tuple

import numpy as np
import pandas as pd

from services.common import metrics
from services.common.exceptions import ContractError
from services.engine import ops
from services.engine.gradcheck import Probe, ProbeResult, run_probes
from services.engine.rng import Rng, make_stream
from services.engine.tensor import Tensor, no_grad
from services.gan.discriminator import DiscriminatorConfig, PatchDiscriminator
from services.gan.extractors import RandomConvExtractor
from services.gan.losses import adversarial_loss, l1_loss, perceptual_loss, tv_loss
from services.model.blocks import DecoderHead, EncoderStem, UpsampleBlock
from services.model.generator import Generator, GeneratorConfig
from services.model.implicit import ImplicitTransform
from services.model.layers import INIT_STD, init_weights
from services.model.module import Module, Parameter
from services.model.parallel_mlp import ParallelConvMLPBlock

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
GENERATOR_TOLERANCE = 2e-2
GENERATOR_PROBE_PARAMETER = "aerial_stem.down.conv.weight"
PARAMETER_PROBE_SIZE = 16

InputFactory = Callable[[np.random.Generator], Tensor]

_projections: Dict[Tuple[str, Tuple[int, ...]], np.ndarray] = {}


def project(name: str, y: Tensor) -> Tensor:
    """Scalar <y, R> with a fixed R per (name, shape)"""
    key = (name, tuple(y.shape))
    if key not in _projections:
        gen = make_stream(0, f"gradcheck/projection/{name}")
        _projections[key] = gen.standard_normal(y.shape) / np.sqrt(max(y.size, 1))
    return ops.sum(y * Tensor(_projections[key]))


# ============ Input factories ============

def normal(*shape: int) -> InputFactory:
    return lambda gen: Tensor(gen.standard_normal(shape))


def away_from_zero(*shape: int) -> InputFactory:
    """|x| in [0.2, 1.0] so kinks at 0 stay outside the difference stencil"""
    def make(gen: np.random.Generator) -> Tensor:
        signs = np.where(gen.uniform(size=shape) < 0.5, -1.0, 1.0)
        return Tensor(signs * gen.uniform(0.2, 1.0, size=shape))
    return make


def positive(*shape: int) -> InputFactory:
    return lambda gen: Tensor(gen.uniform(0.5, 2.0, size=shape))


def image(*shape: int) -> InputFactory:
    return lambda gen: Tensor(np.tanh(gen.standard_normal(shape)))


def offset_from(reference: Tensor) -> InputFactory:
    """reference plus offsets of magnitude 0.2..0.5, keeping |x - reference| off its kink"""
    def make(gen: np.random.Generator) -> Tensor:
        signs = np.where(gen.uniform(size=reference.shape) < 0.5, -1.0, 1.0)
        return Tensor(reference.data + signs * gen.uniform(0.2, 0.5, size=reference.shape))
    return make


def ramp(*shape: int) -> InputFactory:
    """Per-channel signed ramps; neighbour differences stay near 0.1 and 0.07"""
    def make(gen: np.random.Generator) -> Tensor:
        h, w = shape[-2:]
        base = 0.1 * np.arange(h)[:, None] + 0.07 * np.arange(w)[None, :]
        signs = np.where(gen.uniform(size=shape[:-2] + (1, 1)) < 0.5, -1.0, 1.0)
        return Tensor(signs * (base + gen.uniform(0.0, 0.01, size=shape)))
    return make


# ============ Probe sets ============

def _fixed(shape: Tuple[int, ...], label: str, scale: float = 1.0) -> Tensor:
    return Tensor(make_stream(1, f"gradcheck/const/{label}").standard_normal(shape) * scale)


def primitive_probes() -> List[Probe]:
    w_mat = _fixed((5, 3), "matmul")
    w_conv = _fixed((4, 3, 3, 3), "conv", 0.3)
    b_conv = _fixed((4,), "conv_bias")
    x_conv = _fixed((2, 3, 6, 6), "conv_input")
    gamma, beta = _fixed((3,), "bn_gamma"), _fixed((3,), "bn_beta")
    other = _fixed((2, 3, 4), "binary")

    def bn(x: Tensor) -> Tensor:
        running_mean, running_var = np.zeros(3, np.float32), np.ones(3, np.float32)
        return ops.batch_norm(x, gamma, beta, running_mean, running_var, training=True)

    return [
        Probe("add", lambda x: project("add", x + other), normal(2, 3, 4)),
        Probe("sub", lambda x: project("sub", other - x), normal(2, 3, 4)),
        Probe("mul", lambda x: project("mul", x * x * other), normal(2, 3, 4)),
        Probe("div", lambda x: project("div", ops.div(x, ops.square(x) + 1.0)), normal(2, 3, 4)),
        Probe("neg", lambda x: project("neg", -x), normal(2, 3, 4)),
        Probe("abs", lambda x: project("abs", ops.abs_(x)), away_from_zero(2, 3, 4)),
        Probe("square", lambda x: project("square", ops.square(x)), normal(2, 3, 4)),
        Probe("log", lambda x: project("log", ops.log(x)), positive(2, 3, 4)),
        Probe("relu", lambda x: project("relu", ops.relu(x)), away_from_zero(2, 3, 4)),
        Probe("leaky_relu", lambda x: project("leaky_relu", ops.leaky_relu(x, 0.2)), away_from_zero(2, 3, 4)),
        Probe("tanh", lambda x: project("tanh", ops.tanh(x)), normal(2, 3, 4)),
        Probe("sigmoid", lambda x: project("sigmoid", ops.sigmoid(x)), normal(2, 3, 4)),
        Probe("gelu", lambda x: project("gelu", ops.gelu(x)), normal(2, 3, 4)),
        Probe("softmax", lambda x: project("softmax", ops.softmax(x, axis=-1)), normal(2, 3, 4)),
        Probe("sum", lambda x: project("sum", ops.sum(x, axis=1)), normal(2, 3, 4)),
        Probe("mean", lambda x: project("mean", ops.mean(x, axis=(0, 2), keepdims=True)), normal(2, 3, 4)),
        Probe("reshape_permute",
              lambda x: project("reshape_permute", ops.permute(ops.reshape(x, (6, 4)), (1, 0))),
              normal(2, 3, 4)),
        Probe("concat", lambda x: project("concat", ops.concat([x, x * 2.0], axis=1)), normal(2, 3, 4)),
        Probe("slice", lambda x: project("slice", x[:, 0::2, 1:]), normal(2, 4, 4)),
        Probe("upsample", lambda x: project("upsample", ops.nearest_upsample2x(x)), normal(1, 2, 3, 3)),
        Probe("matmul", lambda x: project("matmul", ops.matmul(x, w_mat)), normal(2, 4, 5)),
        Probe("conv2d_input", lambda x: project("conv2d_input", ops.conv2d(x, w_conv, b_conv, 2, 1)),
              normal(2, 3, 6, 6)),
        Probe("conv2d_weight", lambda w: project("conv2d_weight", ops.conv2d(x_conv, w, b_conv, 1, 1)),
              normal(4, 3, 3, 3)),
        Probe("batch_norm", lambda x: project("batch_norm", bn(x)), normal(4, 3, 3, 3)),
        Probe("bce_with_logits", lambda z: ops.bce_with_logits(z, 1.0) + ops.bce_with_logits(z, 0.0),
              normal(2, 1, 3, 3)),
    ]


def _prepared(module: Module, name: str, rng: Rng) -> Module:
    """Named, initialised and in eval mode so the batch-norm layers normalise with running statistics"""
    module.assign_names(name)
    init_weights(module, rng)
    return module.eval()


def block_probes() -> List[Probe]:
    rng = Rng(0)
    pconv = _prepared(
        ParallelConvMLPBlock(4, (8, 8), channel_expansion=2, spatial_hidden_cap=8), "pconv", rng
    )
    itm = ImplicitTransform(8).assign_names("itm")
    init_weights(itm, rng)
    # wider projections than the init std so attention is far from uniform
    for p in itm.parameters():
        p.data *= 25.0
    stem = _prepared(EncoderStem(3, (4, 8, 8)), "stem", rng)
    upsample = _prepared(UpsampleBlock(4, 4), "upsample", rng)
    head = _prepared(DecoderHead(4), "head", rng)
    discriminator = _prepared(
        PatchDiscriminator(DiscriminatorConfig(base_channels=4, n_layers=1)), "discriminator", rng
    )
    f_q, f_k = _fixed((1, 8, 4, 4), "itm_q"), _fixed((1, 8, 4, 4), "itm_k")
    f_v = _fixed((1, 8, 4, 4), "itm_v")
    source = Tensor(np.tanh(_fixed((1, 3, 6, 6), "source").data))
    extractor = RandomConvExtractor()
    real = Tensor(np.tanh(_fixed((1, 3, 8, 8), "real").data))
    logits_real = _fixed((1, 1, 3, 3), "logits_real")

    return [
        Probe("parallel_conv_mlp", lambda x: project("parallel_conv_mlp", pconv(x)), normal(1, 4, 8, 8)),
        Probe("encoder_stem", lambda x: project("encoder_stem", stem(x)), normal(1, 3, 6, 6)),
        Probe("upsample_block", lambda x: project("upsample_block", upsample(x)), normal(1, 4, 6, 6)),
        Probe("decoder_head", lambda x: project("decoder_head", head(x)), normal(1, 4, 6, 6)),
        Probe("discriminator", lambda y: project("discriminator", discriminator(source, y)),
              image(1, 3, 6, 6)),
        Probe("itm_value", lambda v: project("itm_value", itm(f_q, f_k, v)), normal(1, 8, 4, 4)),
        Probe("itm_query", lambda q: project("itm_query", itm(q, f_k, f_v)), normal(1, 8, 4, 4)),
        Probe("itm_key", lambda k: project("itm_key", itm(f_q, k, f_v)), normal(1, 8, 4, 4)),
        Probe("l1_loss", lambda x: l1_loss(x, real), offset_from(real)),
        Probe("tv_loss", lambda x: tv_loss(x), ramp(1, 3, 8, 8)),
        Probe("perceptual_loss", lambda x: perceptual_loss(x, real, extractor), image(1, 3, 8, 8)),
        Probe("adversarial_loss",
              lambda z: ops.add(*adversarial_loss(logits_real, z)),
              normal(1, 1, 3, 3)),
    ]


# ============ Parameter probes ============

def spliced(param: Tensor, start: int, values: Tensor) -> Tensor:
    """`param` with flat elements [start, start + values.size) taken from `values`"""
    flat = param.data.reshape(-1)
    if start < 0 or start + values.size > flat.size:
        raise ContractError(f"slice [{start}, {start + values.size}) outside {flat.size} elements")
    pieces = [Tensor(flat[:start]), values, Tensor(flat[start + values.size:])]
    return ops.reshape(ops.concat([p for p in pieces if p.size], axis=0), param.shape)


@contextmanager
def substituted(module: Module, name: str, value: Tensor) -> Iterator[Parameter]:
    """Temporarily read `value` wherever `module` uses its parameter `name`"""
    param = dict(module.named_parameters())[name]
    owner_path, _, attr = name.rpartition(".")
    owner = dict(module.named_modules())[owner_path]
    object.__setattr__(owner, attr, value)
    try:
        yield param
    finally:
        object.__setattr__(owner, attr, param)


def generator_parameter_probe(parameter: str = GENERATOR_PROBE_PARAMETER) -> Probe:
    """
    End-to-end: mean of the fused output w.r.t. 16 weights of `parameter`

    Desk-scale generator (64 x 64, C_L1 = 8) in eval mode. Its running
    statistics come from one training pass over the probe pair, so the
    eval-mode activations are unit scale rather than shrunk by the 0.02 init.
    """
    cfg = GeneratorConfig.desk(batch_norm={"momentum": 1.0})
    generator = Generator(cfg)
    init_weights(generator, Rng(cfg.seed))
    size = cfg.image_size
    aerial = Tensor(np.tanh(_fixed((1, 3, size, size), "desk_aerial").data))
    semantic = Tensor(np.tanh(_fixed((1, 3, size, size), "desk_semantic").data))
    with no_grad():
        generator(aerial, semantic)
    generator.eval()

    param = dict(generator.named_parameters())[parameter]
    base = param.data.reshape(-1)[:PARAMETER_PROBE_SIZE].astype(np.float64)

    def fn(values: Tensor) -> Tensor:
        with substituted(generator, parameter, spliced(param, 0, values)):
            _, fused = generator(aerial, semantic)
        return ops.mean(fused)

    def make_input(gen: np.random.Generator) -> Tensor:
        # each seed checks a nearby point
        return Tensor(base + INIT_STD * gen.standard_normal(base.shape))

    return Probe("generator_parameters", fn, make_input, tolerance=GENERATOR_TOLERANCE)


def generator_input_probe() -> Probe:
    """End-to-end: aerial input of a 16 x 16, C_L1 = 4 generator"""
    cfg = GeneratorConfig(image_size=16, c_l1=4, spatial_hidden_cap=8)
    generator = Generator(cfg)
    init_weights(generator, Rng(cfg.seed))
    # running statistics: at 16 x 16 the L4 maps are 1 x 1, where batch statistics degenerate
    generator.eval()
    semantic = Tensor(np.tanh(_fixed((1, 3, 16, 16), "semantic").data))

    def fn(aerial: Tensor) -> Tensor:
        direct, fused = generator(aerial, semantic)
        return project("generator_direct", direct) + project("generator_fused", fused)

    return Probe("generator_input", fn, image(1, 3, 16, 16), tolerance=GENERATOR_TOLERANCE)


def all_probes() -> List[Probe]:
    return primitive_probes() + block_probes() + [generator_parameter_probe(), generator_input_probe()]


# ============ Runner ============

def summarize(results: Sequence[ProbeResult]) -> pd.DataFrame:
    """One row per probe: worst error over seeds and whether every seed passed"""
    frame = pd.DataFrame([r.__dict__ for r in results], columns=["name", "seed", "max_error", "passed"])
    if frame.empty:
        return pd.DataFrame(columns=["probe", "max_error", "passed"])
    table = frame.groupby("name", sort=False).agg(max_error=("max_error", "max"), passed=("passed", "all"))
    return table.reset_index().rename(columns={"name": "probe"})


def gradcheck_suite(
    seeds: Sequence[int] = DEFAULT_SEEDS,
    eps: float = 1e-3,
    tolerance: float = 1e-2,
) -> pd.DataFrame:
    """
    Run every probe under every seed

    Returns:
        Per-probe table with columns probe, max_error, passed
    """
    results = run_probes(all_probes(), seeds, eps=eps, tolerance=tolerance)
    table = summarize(results)
    for row in table.itertuples(index=False):
        metrics.gradcheck_max_error.labels(probe=row.probe).set(row.max_error)
    failed = table[~table["passed"]]
    if len(failed):
        logger.warning(f"gradcheck: {len(failed)} probes above tolerance: {list(failed['probe'])}")
    else:
        logger.info(f"gradcheck: all {len(table)} probes within tolerance")
    return table
