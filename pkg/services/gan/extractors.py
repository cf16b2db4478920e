"""
Perceptual feature extractors - pluggable registry

The perceptual loss compares images in the feature space of a frozen
network. Extractors implement BaseFeatureExtractor and are looked up by name
in an ExtractorRegistry, so a pretrained network can be plugged in later
without touching the loss code.
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Sequence, Type

import numpy as np

from services.common.exceptions import ConfigError, DimensionError
from services.engine import ops
from services.engine.rng import Rng
from services.engine.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_PERCEPTUAL_SEED = 20220101


class BaseFeatureExtractor(ABC):
    """
    Frozen feature network

    Implementations return one feature map per stage; the perceptual loss
    sums the mean squared stage differences. Extractor weights never receive
    gradients (they are plain constant tensors), but gradients do flow
    through them to the input image.
    """

    name: str = "base"

    @property
    @abstractmethod
    def num_stages(self) -> int:
        """Number of feature maps returned by `features`"""

    @abstractmethod
    def features(self, image: Tensor) -> List[Tensor]:
        """
        Feature maps for a b x 3 x H x W image in [-1, 1]

        Returns:
            One tensor per stage, coarser as the index grows
        """


class RandomConvExtractor(BaseFeatureExtractor):
    """
    Fixed random convolutional features

    Three 3x3 stride-2 conv + ReLU stages (3 -> 16 -> 32 -> 64) with
    weights drawn once from a seeded stream at He scale, so feature
    magnitudes stay comparable across stages.
    """

    name = "random_conv"

    def __init__(self, seed: int = DEFAULT_PERCEPTUAL_SEED, widths: Sequence[int] = (16, 32, 64)):
        rng = Rng(seed)
        self.seed = seed
        self.kernels: List[Tensor] = []
        self.biases: List[Tensor] = []
        c_in = 3
        for i, c_out in enumerate(widths):
            gen = rng.fresh(f"perceptual/stage{i}")
            std = np.sqrt(2.0 / (c_in * 9))
            self.kernels.append(Tensor(gen.normal(0.0, std, size=(c_out, c_in, 3, 3))))
            self.biases.append(Tensor(np.zeros(c_out)))
            c_in = c_out

    @property
    def num_stages(self) -> int:
        return len(self.kernels)

    def features(self, image: Tensor) -> List[Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError("perceptual extractor expects b x 3 x H x W",
                                 expected=3, actual=image.shape)
        feats = []
        x = image
        for kernel, bias in zip(self.kernels, self.biases):
            x = ops.relu(ops.conv2d(x, kernel, bias, stride=2, padding=1))
            feats.append(x)
        return feats


class ExtractorRegistry:
    """
    Registry of perceptual feature extractors

    Example:
        registry = ExtractorRegistry()
        registry.register("random_conv", RandomConvExtractor)
        extractor = registry.create("random_conv", seed=7)
    """

    def __init__(self) -> None:
        self._extractors: Dict[str, Type[BaseFeatureExtractor]] = {}

    def register(self, name: str, extractor_class: Type[BaseFeatureExtractor]) -> None:
        """
        Register an extractor implementation

        Raises:
            TypeError: If extractor_class doesn't inherit from BaseFeatureExtractor
        """
        if not issubclass(extractor_class, BaseFeatureExtractor):
            raise TypeError(
                f"Extractor class {extractor_class.__name__} must inherit from BaseFeatureExtractor"
            )
        if name in self._extractors:
            logger.warning(f"Extractor '{name}' already registered, overwriting")
        self._extractors[name] = extractor_class
        logger.debug(f"Registered extractor: {name} -> {extractor_class.__name__}")

    def create(self, name: str, seed: Optional[int] = None) -> BaseFeatureExtractor:
        """
        Instantiate an extractor by name

        Raises:
            ConfigError: If the name is not registered
        """
        if name not in self._extractors:
            raise ConfigError(
                f"Unknown perceptual extractor: '{name}'. Available: {self.list_extractors()}",
                field="perceptual_extractor",
            )
        extractor_class = self._extractors[name]
        extractor = extractor_class() if seed is None else extractor_class(seed=seed)
        logger.info(f"Created perceptual extractor: {name} ({extractor_class.__name__})")
        return extractor

    def list_extractors(self) -> List[str]:
        return sorted(self._extractors)


_registry = ExtractorRegistry()
_registry.register(RandomConvExtractor.name, RandomConvExtractor)


def get_extractor_registry() -> ExtractorRegistry:
    """Process-wide registry with the built-in extractors"""
    return _registry
