"""
Training objective

Generator objective:
    100 * L1 + 5 * cGAN_g + 1 * TV + 50 * Per

where L1 covers both outputs, cGAN_g sums the generator-side adversarial
losses of the two discriminators, TV regularises the final output and Per
compares the final output with the ground truth in feature space. The
discriminator objective sums both discriminators' real/fake BCE losses.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

from pydantic import BaseModel, ConfigDict, Field

from services.common.exceptions import DimensionError
from services.engine import ops
from services.engine.tensor import Tensor
from services.gan.discriminator import PatchDiscriminator
from services.gan.extractors import BaseFeatureExtractor

logger = logging.getLogger(__name__)

COMPONENTS = ("l1", "cgan_g", "tv", "per")


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    l1: float = Field(100.0, gt=0.0)
    cgan: float = Field(5.0, gt=0.0)
    tv: float = Field(1.0, gt=0.0)
    per: float = Field(50.0, gt=0.0)

    def combine(self, l1, cgan_g, tv, per):
        """Weighted sum; works on floats and Tensors alike"""
        return l1 * self.l1 + cgan_g * self.cgan + tv * self.tv + per * self.per


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes differ", expected=a.shape, actual=b.shape)


# ============ Component losses ============

def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "l1_loss")
    return ops.mean(ops.abs_(a - b))


def adversarial_loss(logits_real: Tensor, logits_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Vanilla GAN losses from discriminator logits

    Returns:
        (d_loss, g_loss): d_loss = BCE(real, 1) + BCE(fake, 0),
        g_loss = BCE(fake, 1)
    """
    _same_shape(logits_real, logits_fake, "adversarial_loss")
    d_loss = ops.bce_with_logits(logits_real, 1.0) + ops.bce_with_logits(logits_fake, 0.0)
    g_loss = ops.bce_with_logits(logits_fake, 1.0)
    return d_loss, g_loss


def discriminator_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    _same_shape(logits_real, logits_fake, "discriminator_loss")
    return ops.bce_with_logits(logits_real, 1.0) + ops.bce_with_logits(logits_fake, 0.0)


def generator_adversarial_loss(logits_fake: Tensor) -> Tensor:
    return ops.bce_with_logits(logits_fake, 1.0)


def tv_loss(img: Tensor) -> Tensor:
    """Mean absolute vertical difference plus mean absolute horizontal difference"""
    if img.ndim != 4 or img.shape[2] < 2 or img.shape[3] < 2:
        raise DimensionError("tv_loss needs b x c x H x W with H, W >= 2", actual=img.shape)
    vertical = img[:, :, 1:, :] - img[:, :, :-1, :]
    horizontal = img[:, :, :, 1:] - img[:, :, :, :-1]
    return ops.mean(ops.abs_(vertical)) + ops.mean(ops.abs_(horizontal))


def perceptual_loss(a: Tensor, b: Tensor, extractor: BaseFeatureExtractor) -> Tensor:
    """Sum over extractor stages of the mean squared feature difference"""
    _same_shape(a, b, "perceptual_loss")
    total = None
    for fa, fb in zip(extractor.features(a), extractor.features(b)):
        term = ops.mean(ops.square(fa - fb))
        total = term if total is None else total + term
    return total


# ============ Objectives ============

@dataclass
class ObjectiveResult:
    """Scalar objectives plus their named components"""

    g_total: Tensor
    d_total: Tensor
    components: Dict[str, Tensor] = field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        out = {name: t.item() for name, t in self.components.items()}
        out["g_total"] = self.g_total.item()
        out["d_total"] = self.d_total.item()
        return out


def discriminator_objective(
    aerial: Tensor,
    real: Tensor,
    fake_direct: Tensor,
    fake_final: Tensor,
    d_direct: PatchDiscriminator,
    d_final: PatchDiscriminator,
) -> Tensor:
    """Sum of both discriminators' real/fake losses"""
    d_loss_direct = discriminator_loss(d_direct(aerial, real), d_direct(aerial, fake_direct))
    d_loss_final = discriminator_loss(d_final(aerial, real), d_final(aerial, fake_final))
    return d_loss_direct + d_loss_final


def generator_objective(
    aerial: Tensor,
    real: Tensor,
    fake_direct: Tensor,
    fake_final: Tensor,
    d_direct: PatchDiscriminator,
    d_final: PatchDiscriminator,
    extractor: BaseFeatureExtractor,
    weights: LossWeights,
) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Weighted generator objective

    Returns:
        (g_total, components) with components keyed "l1", "cgan_g", "tv", "per"
    """
    for t in (fake_direct, fake_final, aerial):
        _same_shape(real, t, "generator_objective")
    components = {
        "l1": l1_loss(fake_direct, real) + l1_loss(fake_final, real),
        "cgan_g": generator_adversarial_loss(d_direct(aerial, fake_direct))
        + generator_adversarial_loss(d_final(aerial, fake_final)),
        "tv": tv_loss(fake_final),
        "per": perceptual_loss(fake_final, real, extractor),
    }
    g_total = weights.combine(components["l1"], components["cgan_g"], components["tv"], components["per"])
    return g_total, components


def total_objective(
    fake_direct: Tensor,
    fake_final: Tensor,
    real: Tensor,
    aerial: Tensor,
    d_direct: PatchDiscriminator,
    d_final: PatchDiscriminator,
    weights: LossWeights,
    extractor: BaseFeatureExtractor,
) -> ObjectiveResult:
    """Both objectives and all components for one batch"""
    g_total, components = generator_objective(
        aerial, real, fake_direct, fake_final, d_direct, d_final, extractor, weights
    )
    d_total = discriminator_objective(aerial, real, fake_direct, fake_final, d_direct, d_final)
    return ObjectiveResult(g_total=g_total, d_total=d_total, components=components)
