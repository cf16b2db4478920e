"""
Flat run configuration

One `key=value` per line (or a flat YAML mapping). Every key is listed in
RunConfig with its default; unknown keys are rejected. The defaults are
the desk protocol (64 x 64, C_L1 = 8, batch 4, 30 epochs).
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from services.common.config import build_model, parse_key_values, parse_overrides, read_config_file
from services.common.exceptions import ConfigError
from services.gan.discriminator import DiscriminatorConfig
from services.gan.extractors import DEFAULT_PERCEPTUAL_SEED
from services.gan.losses import LossWeights
from services.model.generator import (
    BatchNormConfig,
    GeneratorConfig,
    VARIANTS,
    resolve_variant,
)
from services.model.parallel_mlp import DEFAULT_SPATIAL_CAP

logger = logging.getLogger(__name__)

# keys that do not affect the trained weights; excluded from checkpoint blobs
RUN_ONLY_KEYS = frozenset({"data_dir", "out_dir", "epochs", "checkpoint_every", "eval_every"})


class AdamConfig(BaseModel):
    """Adam hyperparameters as the optimizer consumes them"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(2e-4, gt=0.0)
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(0, ge=0, description="run seed: weight init and data order")

    # generator
    image_size: int = Field(64, ge=16, description="H = W")
    c_l1: int = Field(8, ge=2, description="channel width at L1")
    channel_expansion: int = Field(1, ge=1, description="channel-MLP hidden = c * expansion")
    spatial_hidden_cap: int = Field(DEFAULT_SPATIAL_CAP, ge=1, description="spatial-MLP hidden = min(n, cap)")
    itm_scale_scores: bool = Field(False, description="scale attention scores by 1/sqrt(c/4)")
    variant: str = Field("F", description="ablation variant: A/basic_conv, E/parallel_mlp, F/full")
    bn_momentum: float = Field(0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)

    # objective
    lambda_l1: float = Field(100.0, gt=0.0)
    lambda_cgan: float = Field(5.0, gt=0.0)
    lambda_tv: float = Field(1.0, gt=0.0)
    lambda_per: float = Field(50.0, gt=0.0)
    perceptual_extractor: str = Field("random_conv", description="registered feature extractor")
    perceptual_seed: int = Field(DEFAULT_PERCEPTUAL_SEED, ge=0)

    # discriminators
    disc_base_channels: int = Field(64, ge=1)
    disc_layers: int = Field(3, ge=1, le=6, description="stride-2 stages")

    # optimisation
    lr: float = Field(2e-4, gt=0.0)
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(30, ge=1)
    checkpoint_every: int = Field(5, ge=1, description="epochs between ckpt_epoch_<k> files")
    eval_every: int = Field(1, ge=0, description="epochs between held-out evaluations; 0 disables")

    # paths
    data_dir: Optional[str] = None
    out_dir: str = "runs/desk"

    @field_validator("variant")
    @classmethod
    def check_variant(cls, v: str) -> str:
        try:
            return resolve_variant(v)
        except ConfigError as exc:
            raise ValueError(exc.message) from exc

    @field_validator("data_dir", mode="before")
    @classmethod
    def empty_is_none(cls, v):
        return None if v == "" else v

    # ---- derived configs ----

    def generator_config(self) -> GeneratorConfig:
        return build_model(GeneratorConfig, {
            "image_size": self.image_size,
            "c_l1": self.c_l1,
            "channel_expansion": self.channel_expansion,
            "spatial_hidden_cap": self.spatial_hidden_cap,
            "itm_scale_scores": self.itm_scale_scores,
            "seed": self.seed,
            "batch_norm": BatchNormConfig(momentum=self.bn_momentum, eps=self.bn_eps),
            **VARIANTS[self.variant],
        }, "generator config")

    def loss_weights(self) -> LossWeights:
        return LossWeights(l1=self.lambda_l1, cgan=self.lambda_cgan, tv=self.lambda_tv, per=self.lambda_per)

    def discriminator_config(self) -> DiscriminatorConfig:
        return build_model(DiscriminatorConfig, {
            "base_channels": self.disc_base_channels,
            "n_layers": self.disc_layers,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }, "discriminator config")

    def adam_config(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)

    # ---- canonical text ----

    def canonical_items(self, exclude: Iterable[str] = ()) -> List[Tuple[str, str]]:
        skip = set(exclude)
        return sorted((k, _format_value(v)) for k, v in self.model_dump().items() if k not in skip)

    def canonical_text(self) -> str:
        """Every key, sorted; logged at run start and written as resolved.cfg"""
        return "".join(f"{k}={v}\n" for k, v in self.canonical_items())

    def model_blob(self) -> str:
        """Keys that shape the trained state; stored in checkpoints"""
        return "".join(f"{k}={v}\n" for k, v in self.canonical_items(RUN_ONLY_KEYS))


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    extra: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """
    Resolve a run config: defaults <- file <- `extra` <- `--set` overrides

    Raises:
        ConfigError: Unreadable file, malformed line, unknown key or invalid value
    """
    values: Dict[str, object] = {}
    source = "defaults"
    if path is not None:
        values.update(read_config_file(path))
        source = str(path)
    if extra:
        values.update({k: v for k, v in extra.items() if v is not None})
    values.update(parse_overrides(overrides))
    config = build_model(RunConfig, values, source)
    logger.debug(f"Resolved run config from {source}")
    return config


def config_from_blob(blob: str) -> RunConfig:
    """Rebuild a RunConfig from a checkpoint blob (run-only keys at defaults)"""
    values = parse_key_values(blob.splitlines(), source="checkpoint config")
    return build_model(RunConfig, {k: v for k, v in values.items() if v != ""}, "checkpoint config")
