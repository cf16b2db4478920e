"""
Test the tensor engine: primitives, the tape and finite-difference checking
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from services.common.exceptions import ContractError, DimensionError, FormatError, NonFiniteError
from services.engine import ops
from services.engine.gradcheck import gradcheck, numeric_gradient
from services.engine.rng import Rng
from services.engine.tensor import Function, Tape, Tensor, backward, check_finite, no_grad
from services.model.layers import conv_output_size


def leaf(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


# ============ Tape ============

def test_broadcast_add_gradients():
    """Gradients of a broadcast operand are summed back to its shape"""
    x = leaf(np.ones((2, 3)))
    b = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        y = ops.sum(x + b)
    backward(y, tape)
    np.testing.assert_allclose(x.grad, np.ones((2, 3)))
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


def test_fan_out_accumulates():
    """A tensor used twice receives the sum of both gradient paths"""
    x = leaf([1.0, -2.0, 3.0])
    with Tape() as tape:
        y = ops.sum(x * x + x)
    backward(y, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_grads_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            y = ops.sum(x * 3.0)
        backward(y, tape)
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_backward_needs_scalar_root():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_backward_root_must_come_from_tape():
    x = leaf([1.0, 2.0])
    with Tape():
        y = ops.sum(x)
    with pytest.raises(ContractError):
        backward(y, Tape())


def test_tape_can_be_reentered():
    """Recording continues on the same tape across separate `with` blocks"""
    x = leaf([2.0])
    tape = Tape()
    with tape:
        y = x * x
    with tape:
        z = ops.sum(y * 3.0)
    backward(z, tape)
    np.testing.assert_allclose(x.grad, [12.0])
    assert len(tape) == 3


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        with no_grad():
            y = ops.sum(x * x)
    assert len(tape) == 0
    assert y.op is None
    assert not y.requires_grad


def test_detach_stops_gradient():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ops.sum(x.detach() * x)
    backward(y, tape)
    np.testing.assert_allclose(x.grad, x.data)


def test_untracked_inputs_are_not_recorded():
    a = Tensor([1.0, 2.0])
    with Tape() as tape:
        ops.sum(a * a)
    assert len(tape) == 0


# ============ Primitive values ============

def test_matmul_batched():
    a = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    b = np.arange(6, dtype=np.float32).reshape(3, 2)
    out = ops.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, a @ b)


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_rows_sum_to_one_for_large_inputs():
    x = Tensor([[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]])
    out = ops.softmax(x, axis=-1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=-1), [1.0, 1.0], rtol=1e-6)


def test_small_value_oracles():
    np.testing.assert_allclose(
        ops.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5
    )
    gelu = ops.gelu(Tensor([0.0, 1.0, 10.0])).data
    assert gelu[0] == 0.0
    assert gelu[1] == pytest.approx(0.84119, abs=1e-4)
    assert gelu[2] == pytest.approx(10.0, abs=1e-4)
    product = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]])).data
    np.testing.assert_array_equal(product, [[17.0], [39.0]])


def test_conv2d_small_cases():
    ones = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))),
                      Tensor(np.zeros(1)), stride=1, padding=0)
    assert ones.shape == (1, 1, 1, 1)
    assert ones.item() == 9.0

    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    scaled = ops.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)),
                        stride=2, padding=0).data
    np.testing.assert_array_equal(scaled, 2.0 * x[:, :, ::2, ::2])


def test_reshape_and_permute_invert_exactly(gen):
    x = Tensor(gen.normal(size=(2, 3, 4, 5)))
    back = ops.reshape(ops.reshape(x, (6, 20)), (2, 3, 4, 5))
    np.testing.assert_array_equal(back.data, x.data)
    swapped = ops.permute(ops.permute(x, (0, 2, 3, 1)), (0, 3, 1, 2))
    np.testing.assert_array_equal(swapped.data, x.data)


def test_batch_norm_output_has_unit_variance(gen):
    x = Tensor(gen.normal(-1.0, 4.0, size=(4, 3, 6, 6)))
    out = ops.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32), training=True)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-2)


def test_bce_with_logits_values():
    """BCE at zero logits is log 2; extreme logits stay finite via the 1e-12 clamp"""
    zero = ops.bce_with_logits(Tensor(np.zeros((1, 1, 2, 2))), 1.0)
    assert zero.item() == pytest.approx(np.log(2.0), rel=1e-6)

    extreme = ops.bce_with_logits(Tensor([[-1e4, 1e4]]), 1.0)
    assert np.isfinite(extreme.item())
    assert extreme.item() == pytest.approx(-np.log(1e-12) / 2, rel=1e-4)


def test_conv2d_matches_reference_loop(gen):
    x = gen.normal(size=(2, 3, 6, 5)).astype(np.float32)
    w = gen.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = gen.normal(size=4).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    h_out, w_out = (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
    expected = np.zeros((2, 4, h_out, w_out))
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            expected[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    assert out.shape == (2, 4, 3, 3)
    np.testing.assert_allclose(out, expected, rtol=1e-4, atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(
    size=st.integers(min_value=4, max_value=12),
    kernel=st.integers(min_value=1, max_value=4),
    stride=st.integers(min_value=1, max_value=3),
    padding=st.integers(min_value=0, max_value=2),
)
def test_conv2d_output_size_formula(size, kernel, stride, padding):
    """The executed output size always matches the static formula"""
    x = Tensor(np.ones((1, 2, size, size)))
    w = Tensor(np.ones((3, 2, kernel, kernel)))
    out = ops.conv2d(x, w, Tensor(np.zeros(3)), stride=stride, padding=padding)
    expected = conv_output_size(size, kernel, stride, padding)
    assert out.shape == (1, 3, expected, expected)


def test_nearest_upsample_repeats_pixels():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.nearest_upsample2x(x).data
    np.testing.assert_array_equal(out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_batch_norm_updates_running_stats_in_train_mode(gen):
    x = Tensor(gen.normal(2.0, 3.0, size=(4, 2, 5, 5)))
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    running_mean = np.zeros(2, dtype=np.float32)
    running_var = np.ones(2, dtype=np.float32)

    out = ops.batch_norm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), [0.0, 0.0], atol=1e-5)
    np.testing.assert_allclose(running_mean, 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-5)

    frozen_mean = running_mean.copy()
    ops.batch_norm(x, gamma, beta, running_mean, running_var, training=False)
    np.testing.assert_array_equal(running_mean, frozen_mean)


def test_slice_rejects_advanced_indexing():
    with pytest.raises(ContractError):
        ops.slice_(Tensor(np.zeros((3, 3))), (np.array([0, 1]),))


def test_concat_needs_inputs():
    with pytest.raises(ContractError):
        ops.concat([], axis=0)


def test_check_finite_names_the_primitive():
    with check_finite():
        with pytest.raises(NonFiniteError) as exc_info:
            ops.div(Tensor([1.0, 1.0]), Tensor([1.0, 0.0]))
    assert exc_info.value.details["op"] == "div"
    assert exc_info.value.details["index"] == [1]


def test_check_finite_off_by_default():
    out = ops.log(Tensor([0.0]))
    assert np.isneginf(out.data[0])


# ============ Finite differences ============

class _WrongSquare(Function):
    """x^2 with a backward that forgets the factor 2"""

    name = "wrong_square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (grad * self.x,)


def test_gradcheck_accepts_correct_gradient(gen):
    x = Tensor(gen.normal(size=(3, 4)))
    error = gradcheck(lambda t: ops.sum(ops.tanh(t) * t), x)
    assert error < 1e-2


def test_tanh_never_reaches_one_in_float32():
    y = ops.tanh(Tensor([-30.0, -10.0, 0.0, 10.0, 30.0])).data
    assert y.dtype == np.float32
    assert np.all(np.abs(y) < 1.0)
    assert y[2] == 0.0
    assert y[3] == np.nextafter(np.float32(1), np.float32(0))


def test_gradcheck_of_sums_is_tight(gen):
    x = Tensor(gen.normal(size=(2, 5)))
    assert gradcheck(lambda t: ops.sum(t), x) <= 1e-6
    assert gradcheck(lambda t: ops.sum(ops.softmax(t, axis=-1)), x) <= 1e-5


def test_gradcheck_flags_wrong_gradient(gen):
    x = Tensor(gen.uniform(0.5, 1.5, size=(5,)))
    error = gradcheck(lambda t: ops.sum(_WrongSquare.apply(t)), x)
    assert error > 0.1


def test_gradcheck_restores_probe_state(gen):
    x = Tensor(gen.normal(size=(4,)))
    gradcheck(lambda t: ops.sum(ops.square(t)), x)
    assert not x.requires_grad
    assert x.grad is None


def test_numeric_gradient_of_quadratic():
    x = Tensor([1.0, -2.0, 0.5])
    numeric = numeric_gradient(lambda t: ops.sum(ops.square(t)), x, eps=1e-3)
    np.testing.assert_allclose(numeric, 2 * x.data, rtol=1e-6)


@pytest.mark.parametrize("eps", [1e-5, 0.1])
def test_gradcheck_rejects_eps_out_of_range(eps):
    with pytest.raises(ContractError):
        gradcheck(lambda t: ops.sum(t), Tensor([1.0]), eps=eps)


def test_gradcheck_rejects_large_probe():
    with pytest.raises(ContractError):
        gradcheck(lambda t: ops.sum(t), Tensor(np.zeros(1001)))


# ============ Seeded streams ============

def test_named_streams_are_independent_and_reproducible():
    a, b = Rng(3), Rng(3)
    assert np.array_equal(a.stream("x").normal(size=4), b.stream("x").normal(size=4))
    assert not np.array_equal(Rng(3).fresh("x").normal(size=4), Rng(3).fresh("y").normal(size=4))


def test_stream_persists_and_fresh_restarts():
    rng = Rng(5)
    first = rng.stream("order").permutation(10)
    second = rng.stream("order").permutation(10)
    assert not np.array_equal(first, second)
    np.testing.assert_array_equal(rng.fresh("order").permutation(10), first)


def test_rng_json_resumes_streams():
    rng = Rng(11)
    rng.stream("data-order").permutation(20)
    restored = Rng.from_json(rng.to_json())
    np.testing.assert_array_equal(
        restored.stream("data-order").permutation(20),
        rng.stream("data-order").permutation(20),
    )


def test_rng_json_rejects_garbage():
    with pytest.raises(FormatError):
        Rng.from_json("not json")
