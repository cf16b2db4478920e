"""
Test the discriminators, perceptual extractors and training objective
"""

import numpy as np
import pytest

from services.common.exceptions import ConfigError, DimensionError
from services.engine.rng import Rng
from services.engine.tensor import Tape, Tensor, backward
from services.gan.discriminator import DiscriminatorConfig, PatchDiscriminator
from services.gan.extractors import (
    BaseFeatureExtractor,
    ExtractorRegistry,
    RandomConvExtractor,
    get_extractor_registry,
)
from services.gan.losses import (
    COMPONENTS,
    LossWeights,
    adversarial_loss,
    discriminator_objective,
    generator_objective,
    l1_loss,
    perceptual_loss,
    total_objective,
    tv_loss,
)
from services.model.layers import init_weights

LOG2 = float(np.log(2.0))


def small_discriminator(root: str = "d") -> PatchDiscriminator:
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=8, n_layers=2)).assign_names(root)
    init_weights(d, Rng(0))
    return d


# ============ Discriminator ============

def test_default_discriminator_patch_size():
    """Five 4x4 convs map 256 x 256 inputs to a 30 x 30 logit map"""
    d = PatchDiscriminator()
    assert d.output_size(256) == 30
    assert d.output_size(64) == 6
    assert len(d.stages) == 5
    assert d.config.stage_widths() == [64, 128, 256, 512, 1]


def test_discriminator_forward(gen):
    d = small_discriminator()
    a = Tensor(gen.uniform(-1, 1, size=(2, 3, 32, 32)))
    g = Tensor(gen.uniform(-1, 1, size=(2, 3, 32, 32)))
    logits = d(a, g)
    assert logits.shape == (2, 1, d.output_size(32), d.output_size(32))


def test_discriminator_rejects_mismatched_pair():
    d = small_discriminator()
    with pytest.raises(DimensionError):
        d(Tensor(np.zeros((1, 3, 32, 32))), Tensor(np.zeros((1, 3, 16, 16))))


def test_discriminator_rejects_tiny_inputs():
    d = PatchDiscriminator()
    x = Tensor(np.zeros((1, 3, 16, 16)))
    with pytest.raises(DimensionError):
        d(x, x)


# ============ Component losses ============

def test_adversarial_loss_at_zero_logits():
    z = Tensor(np.zeros((1, 1, 4, 4)))
    d_loss, g_loss = adversarial_loss(z, z)
    assert d_loss.item() == pytest.approx(2 * LOG2, rel=1e-6)
    assert g_loss.item() == pytest.approx(LOG2, rel=1e-6)


def test_adversarial_loss_hand_values():
    d_loss, g_loss = adversarial_loss(Tensor([[2.0]]), Tensor([[-1.0]]))
    assert d_loss.item() == pytest.approx(0.44019, abs=1e-5)
    assert g_loss.item() == pytest.approx(1.31326, abs=1e-5)

    confident, _ = adversarial_loss(Tensor([[30.0]]), Tensor([[-30.0]]))
    assert confident.item() < 1e-6


def test_adversarial_loss_shapes_must_match():
    with pytest.raises(DimensionError):
        adversarial_loss(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))))


def test_l1_loss_value():
    a = Tensor([[1.0, -1.0], [0.5, 0.0]])
    b = Tensor([[0.0, 0.0], [0.0, 0.0]])
    assert l1_loss(a, b).item() == pytest.approx(0.625)


def test_tv_loss_of_constant_and_stripes():
    flat = Tensor(np.full((1, 3, 4, 4), 0.3))
    assert tv_loss(flat).item() == pytest.approx(0.0, abs=1e-7)

    stripes = np.zeros((1, 1, 4, 4))
    stripes[..., 1::2] = 1.0
    # horizontal neighbours always differ by 1, vertical ones never do
    assert tv_loss(Tensor(stripes)).item() == pytest.approx(1.0)


def test_tv_loss_needs_two_pixels():
    with pytest.raises(DimensionError):
        tv_loss(Tensor(np.zeros((1, 3, 1, 4))))


def test_perceptual_loss_zero_for_identical_images(gen):
    x = Tensor(gen.uniform(-1, 1, size=(1, 3, 16, 16)))
    extractor = RandomConvExtractor()
    assert perceptual_loss(x, x, extractor).item() == pytest.approx(0.0, abs=1e-9)


def test_loss_weights_combine():
    weights = LossWeights()
    assert weights.combine(1.0, 1.0, 1.0, 1.0) == pytest.approx(156.0)
    assert weights.combine(0.2, 0.7, 0.05, 0.1) == pytest.approx(28.55)


# ============ Extractors ============

def test_random_conv_extractor_is_seeded(gen):
    x = Tensor(gen.uniform(-1, 1, size=(1, 3, 16, 16)))
    a, b = RandomConvExtractor(seed=3), RandomConvExtractor(seed=3)
    for fa, fb in zip(a.features(x), b.features(x)):
        np.testing.assert_array_equal(fa.data, fb.data)
    other = RandomConvExtractor(seed=4)
    assert not np.array_equal(a.features(x)[0].data, other.features(x)[0].data)


def test_random_conv_extractor_stage_shapes(gen):
    feats = RandomConvExtractor().features(Tensor(gen.uniform(-1, 1, size=(2, 3, 32, 32))))
    assert [f.shape for f in feats] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4)]


def test_registry_lists_and_creates():
    registry = get_extractor_registry()
    assert "random_conv" in registry.list_extractors()
    extractor = registry.create("random_conv", seed=9)
    assert isinstance(extractor, RandomConvExtractor)
    assert extractor.seed == 9


def test_registry_rejects_unknown_name():
    with pytest.raises(ConfigError) as exc_info:
        ExtractorRegistry().create("vgg19")
    assert exc_info.value.details["field"] == "perceptual_extractor"


def test_registry_rejects_non_extractors():
    with pytest.raises(TypeError):
        ExtractorRegistry().register("bad", dict)


def test_custom_extractor_plugs_in(gen):
    class MeanColour(BaseFeatureExtractor):
        name = "mean_colour"

        @property
        def num_stages(self) -> int:
            return 1

        def features(self, image):
            return [image.mean(axis=(2, 3))]

    registry = ExtractorRegistry()
    registry.register("mean_colour", MeanColour)
    a = Tensor(np.zeros((1, 3, 4, 4)))
    b = Tensor(np.ones((1, 3, 4, 4)))
    assert perceptual_loss(a, b, registry.create("mean_colour")).item() == pytest.approx(1.0)


# ============ Objectives ============

@pytest.fixture
def objective_inputs(gen):
    shape = (2, 3, 32, 32)
    return {
        "aerial": Tensor(gen.uniform(-1, 1, size=shape)),
        "real": Tensor(gen.uniform(-1, 1, size=shape)),
        "fake_direct": Tensor(gen.uniform(-1, 1, size=shape), requires_grad=True),
        "fake_final": Tensor(gen.uniform(-1, 1, size=shape), requires_grad=True),
    }


def test_generator_objective_components(objective_inputs):
    d_direct, d_final = small_discriminator("d_direct"), small_discriminator("d_final")
    x = objective_inputs
    g_total, components = generator_objective(
        x["aerial"], x["real"], x["fake_direct"], x["fake_final"],
        d_direct, d_final, RandomConvExtractor(), LossWeights(),
    )
    assert tuple(components) == COMPONENTS
    expected = LossWeights().combine(*(components[c].item() for c in COMPONENTS))
    assert g_total.item() == pytest.approx(expected, rel=1e-5)
    assert components["l1"].item() == pytest.approx(
        l1_loss(x["fake_direct"], x["real"]).item() + l1_loss(x["fake_final"], x["real"]).item(), rel=1e-6
    )


def test_discriminator_objective_gradients_skip_detached_fakes(objective_inputs):
    d_direct, d_final = small_discriminator("d_direct"), small_discriminator("d_final")
    x = objective_inputs
    with Tape() as tape:
        d_total = discriminator_objective(
            x["aerial"], x["real"], x["fake_direct"].detach(), x["fake_final"].detach(), d_direct, d_final
        )
    backward(d_total, tape)
    assert x["fake_direct"].grad is None
    assert all(p.grad is not None for p in d_direct.parameters())
    assert all(p.grad is not None for p in d_final.parameters())


def test_total_objective_values(objective_inputs):
    d_direct, d_final = small_discriminator("d_direct"), small_discriminator("d_final")
    x = objective_inputs
    result = total_objective(
        x["fake_direct"], x["fake_final"], x["real"], x["aerial"],
        d_direct, d_final, LossWeights(), RandomConvExtractor(),
    )
    values = result.values()
    assert set(values) == set(COMPONENTS) | {"g_total", "d_total"}
    assert all(np.isfinite(v) for v in values.values())
