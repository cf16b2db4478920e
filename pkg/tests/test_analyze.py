"""
Test the static cost analyzer and the gradient-check suite
"""

import numpy as np
import pandas as pd
import pytest

from services.analyze.gradcheck_suite import (
    PARAMETER_PROBE_SIZE,
    block_probes,
    generator_input_probe,
    generator_parameter_probe,
    gradcheck_suite,
    primitive_probes,
    spliced,
    substituted,
    summarize as summarize_probes,
)
from services.analyze.profiler import (
    CSV_COLUMNS,
    REFERENCE_MACS,
    REFERENCE_PARAMS,
    count_macs,
    count_params,
    cross_check,
    summarize,
    trace_model,
    trace_shapes,
)
from services.common.exceptions import ContractError, DimensionError
from services.engine import ops
from services.engine.gradcheck import ProbeResult, run_probes
from services.engine.tensor import Tape, Tensor, backward
from services.gan.discriminator import DiscriminatorConfig, PatchDiscriminator
from services.model.generator import Generator, GeneratorConfig
from services.model.implicit import ImplicitTransform
from services.model.layers import BatchNormLayer, Conv2dLayer, ConvNormAct, Dense


# ============ Leaf formulas ============

def test_conv_cost_formula():
    conv = Conv2dLayer(3, 8, kernel=3, stride=2, padding=1)
    report = trace_model(conv, (3, 16, 16))
    assert report.output == (8, 8, 8)
    assert report.total_params == 8 * 3 * 9 + 8
    assert report.total_macs == 8 * 8 * 8 * 3 * 9


def test_dense_cost_counts_every_site():
    dense = Dense(5, 7)
    report = trace_model(dense, (4, 5))
    assert report.output == (4, 7)
    assert report.total_params == 7 * 5 + 7
    assert report.total_macs == 4 * 5 * 7


def test_trace_rejects_non_positive_shapes():
    with pytest.raises(DimensionError):
        trace_model(Dense(2, 2), (0, 2))


def test_hand_counted_costs():
    assert count_params(Conv2dLayer(3, 16, kernel=3))[1] == 448
    assert count_params(BatchNormLayer(32))[1] == 64
    assert count_params(Dense(4096, 256))[1] == 1_048_832
    _, macs = count_macs(Conv2dLayer(3, 16, kernel=3, stride=2, padding=1), (3, 64, 64))
    assert macs == 442_368


def test_attention_cost_at_smallest_level():
    per_row, _ = count_macs(ImplicitTransform(64), (64, 4, 4))
    attention = [macs for name, macs in per_row.items() if name.endswith("attention")]
    assert attention == [20_480]


# ============ Whole models ============

def test_generator_params_match_registered_parameters(tiny_generator_config):
    generator = Generator(tiny_generator_config)
    report = trace_model(generator, (3, 32, 32))
    per_layer, total = count_params(generator)
    assert total == generator.num_parameters()
    assert report.total_params == total
    assert all(count > 0 for count in per_layer.values())


def test_generator_macs_are_positive_per_row(tiny_generator_config):
    per_row, total = count_macs(Generator(tiny_generator_config), (3, 32, 32))
    assert total == sum(per_row.values())
    assert total > 0
    assert any(name.endswith("attention") for name in per_row)


def test_level_marks_follow_config(tiny_generator_config):
    report = trace_model(Generator(tiny_generator_config), (3, 32, 32))
    marks = report.marks()
    shapes = tiny_generator_config.level_shapes()
    for level in ("L2", "L3", "L4"):
        assert marks[f"aerial.{level}"] == shapes[level]
        assert marks[f"semantic.{level}"] == shapes[level]
    assert marks["direct.output"] == (3, 32, 32)
    assert marks["fused.output"] == (3, 32, 32)


def test_trace_shapes_include_marks(tiny_generator_config):
    names = [name for name, _ in trace_shapes(Generator(tiny_generator_config), (3, 32, 32))]
    assert "fused.L4" in names
    assert names[-1] == "fused.output"


def test_static_trace_matches_real_forward(tiny_generator):
    assert cross_check(tiny_generator, (3, 32, 32)) == []


def test_cross_check_discriminator():
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=8, n_layers=2)).assign_names()
    assert cross_check(d, (3, 32, 32)) == []


def test_generator_trace_rejects_wrong_size(tiny_generator_config):
    with pytest.raises(DimensionError):
        trace_model(Generator(tiny_generator_config), (3, 64, 64))


# ============ Reports ============

def test_aggregations_add_two_discriminators(tiny_generator_config):
    summary = summarize(tiny_generator_config, DiscriminatorConfig(base_channels=8, n_layers=2))
    aggregations = summary.aggregations()
    g_params, g_macs = aggregations["generator"]
    all_params, all_macs = aggregations["generator+2D"]
    assert all_params == g_params + 2 * summary.discriminator.total_params
    assert all_macs == g_macs + 2 * summary.discriminator.total_macs
    one_params, one_macs = aggregations["generator+D"]
    assert one_params == g_params + summary.discriminator.total_params
    assert one_macs == g_macs + summary.discriminator.total_macs


def test_breakdown_sums_to_totals(tiny_generator_config):
    summary = summarize(tiny_generator_config, DiscriminatorConfig(base_channels=8, n_layers=2))
    breakdown = summary.breakdown()
    assert breakdown["module"].iloc[-1] == "discriminator (x2)"
    assert breakdown["params"].sum() == summary.aggregations()["generator+2D"][0]
    assert breakdown["macs"].sum() == summary.aggregations()["generator+2D"][1]


def test_summary_text_mentions_both_aggregations(tiny_generator_config):
    text = summarize(tiny_generator_config, DiscriminatorConfig(base_channels=8, n_layers=2)).format()
    assert "generator " in text
    assert "generator+2D" in text
    assert "aerial.L4" in text


def test_cost_csv_header(tmp_path, tiny_generator_config):
    report = trace_model(Generator(tiny_generator_config), (3, 32, 32))
    report.to_csv(tmp_path / "costs.csv")
    frame = pd.read_csv(tmp_path / "costs.csv")
    assert list(frame.columns) == CSV_COLUMNS
    assert frame["params"].sum() == report.total_params
    assert (tmp_path / "costs.csv").read_text().splitlines()[0] == "layer,out_shape,params,macs"


def test_format_table_ends_with_totals():
    table = trace_model(Dense(2, 3), (2,)).format_table()
    assert table.splitlines()[-1] == "TOTAL params=9 macs=6"


@pytest.mark.slow
def test_full_config_is_same_order_as_reported():
    """At 256 x 256, C_L1 = 32 the generator and generator+D land within 2x of the reported size"""
    summary = summarize(GeneratorConfig.full())
    params, macs = summary.aggregations()["generator"]
    assert 0.5 <= params / REFERENCE_PARAMS <= 2.0
    assert 0.5 <= macs / REFERENCE_MACS <= 2.0
    params, macs = summary.aggregations()["generator+D"]
    assert 0.5 <= params / REFERENCE_PARAMS <= 2.0
    assert 0.5 <= macs / REFERENCE_MACS <= 2.0


# ============ Gradient-check suite ============

@pytest.mark.parametrize("probe", primitive_probes(), ids=lambda p: p.name)
def test_primitive_gradients(probe):
    [result] = run_probes([probe], seeds=[0])
    assert result.passed, f"{probe.name}: {result.max_error:.3e}"


@pytest.mark.slow
@pytest.mark.parametrize("probe", block_probes(), ids=lambda p: p.name)
def test_block_gradients(probe):
    results = run_probes([probe], seeds=[0, 1])
    assert all(r.passed for r in results), [(r.seed, r.max_error) for r in results]


def test_block_checks_cover_every_block():
    names = {p.name for p in block_probes()}
    assert {"parallel_conv_mlp", "encoder_stem", "upsample_block", "decoder_head", "discriminator"} <= names


def test_spliced_parameter_routes_gradient_to_the_slice():
    conv = Conv2dLayer(2, 3)
    conv.weight.data[...] = np.arange(54, dtype=np.float32).reshape(3, 2, 3, 3)
    values = Tensor(conv.weight.data.reshape(-1)[4:20].copy(), requires_grad=True)

    with Tape() as tape:
        weight = spliced(conv.weight, 4, values)
        out = ops.sum(weight * 2.0)
    backward(out, tape)

    np.testing.assert_array_equal(weight.data, conv.weight.data)
    np.testing.assert_allclose(values.grad, np.full(16, 2.0))


def test_spliced_rejects_slice_past_the_end():
    conv = Conv2dLayer(1, 1)
    with pytest.raises(ContractError):
        spliced(conv.weight, 0, Tensor(np.zeros(10)))


def test_substituted_parameter_is_restored():
    block = ConvNormAct(2, 3)
    original = block.conv.weight
    stand_in = Tensor(np.zeros(original.shape))
    x = Tensor(np.ones((1, 2, 4, 4)))

    with substituted(block, "conv.weight", stand_in) as param:
        assert param is original
        assert block.conv.weight is stand_in
        block.eval()
        assert np.all(block(x).data == 0.0)
    assert block.conv.weight is original
    assert dict(block.named_parameters())["conv.weight"] is original


@pytest.mark.slow
def test_generator_gradient():
    probe = generator_parameter_probe()
    assert probe.make_input(np.random.default_rng(0)).shape == (PARAMETER_PROBE_SIZE,)
    [result] = run_probes([probe], seeds=[0])
    assert result.passed, f"{result.max_error:.3e}"


@pytest.mark.slow
def test_generator_input_gradient():
    [result] = run_probes([generator_input_probe()], seeds=[0])
    assert result.passed, f"{result.max_error:.3e}"


def test_probe_summary_takes_worst_seed():
    results = [
        ProbeResult("relu", 0, 1e-4, True),
        ProbeResult("relu", 1, 3e-2, False),
        ProbeResult("tanh", 0, 2e-4, True),
    ]
    table = summarize_probes(results)
    assert list(table["probe"]) == ["relu", "tanh"]
    assert table.loc[0, "max_error"] == pytest.approx(3e-2)
    assert not table.loc[0, "passed"]
    assert table.loc[1, "passed"]


def test_probe_summary_of_nothing():
    assert list(summarize_probes([]).columns) == ["probe", "max_error", "passed"]


def test_suite_reports_failures_with_impossible_tolerance(mocker):
    mocker.patch(
        "services.analyze.gradcheck_suite.all_probes",
        return_value=primitive_probes()[:2],
    )
    table = gradcheck_suite(seeds=[0], tolerance=-1.0)
    assert len(table) == 2
    assert not table["passed"].any()
    assert np.all(table["max_error"] >= 0.0)
