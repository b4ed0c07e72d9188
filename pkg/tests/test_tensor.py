"""
Tests for the tensor engine: forward semantics of every primitive, reverse-mode
gradients against central differences, and the Adam update.
"""
import numpy as np
import pytest

from src.errors import ContractError, DimensionError, NonFiniteError
from src.gradcheck import check_gradients
from src.losses import loss_total
from src.model import forward
from src.parse.voc import AnnotationSet
from src.tensor import (
    AdamState,
    Tensor,
    activation,
    adam_step,
    backward,
    concat_channels,
    conv2d,
    default_dtype,
    elementwise,
    no_grad,
    pad_edge,
    precision,
    reduce,
    relu,
    sigmoid,
    sqrt,
)
from tests.helpers import weighted_sum


def _away_from_zero(rng, shape, lo=0.1):
    """Random values with |x| >= lo, so ReLU kinks stay out of the finite-difference step."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


# =============================================================================
# Convolution
# =============================================================================


class TestConv2d:
    def test_identity_kernel_1x1(self, rng):
        """A 1x1 kernel of weight 1 and bias 0 returns the input."""
        x = rng.uniform(size=(1, 4, 5))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), padding=0)
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_box_filter_with_zero_padding(self):
        """All-ones 3x3 kernel on all-ones 4x4: corners 4, edges 6, interior 9."""
        x = Tensor(np.ones((1, 4, 4)))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1).data[0]
        expected = np.array(
            [
                [4, 6, 6, 4],
                [6, 9, 9, 6],
                [6, 9, 9, 6],
                [4, 6, 6, 4],
            ],
            dtype=np.float64,
        )
        np.testing.assert_array_equal(out, expected)

    def test_zero_weight_gives_bias(self, rng):
        x = Tensor(rng.uniform(size=(3, 5, 5)))
        b = np.array([0.25, -1.5])
        out = conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(b))
        assert out.shape == (2, 5, 5)
        np.testing.assert_array_equal(out.data[0], np.full((5, 5), 0.25, dtype=out.dtype))
        np.testing.assert_array_equal(out.data[1], np.full((5, 5), -1.5, dtype=out.dtype))

    def test_matches_direct_loop(self, rng):
        """Cross-correlation, not convolution: no kernel flip."""
        x = rng.normal(size=(2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        with precision(64):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((3, 5, 6))
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    expected[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_batched_input(self, rng):
        x = rng.uniform(size=(2, 1, 4, 4))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        assert out.shape == (2, 1, 4, 4)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError, match="channels"):
            conv2d(Tensor(rng.uniform(size=(2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_input_smaller_than_kernel(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=0)


# =============================================================================
# Pointwise ops and reductions
# =============================================================================


class TestActivations:
    def test_examples(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert relu(Tensor(-3.2)).item() == 0.0
        assert relu(Tensor(2.5)).item() == 2.5

    def test_sigmoid_symmetry(self, rng):
        x = rng.normal(scale=4.0, size=100)
        total = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    def test_sigmoid_stays_open_when_saturated(self):
        out = sigmoid(Tensor([-1000.0, -100.0, 100.0, 1000.0])).data
        assert np.all(out > 0.0)
        assert np.all(out < 1.0)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            activation(Tensor(1.0), "tanh")

    def test_relu_never_negative(self, rng):
        assert relu(Tensor(rng.normal(size=(3, 7, 7)))).data.min() >= 0.0


class TestElementwise:
    def test_examples(self):
        a, b = Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0])
        np.testing.assert_array_equal(elementwise(a, b, "add").data, [5.0, 7.0, 9.0])
        np.testing.assert_array_equal(elementwise(a, b, "sub").data, [-3.0, -3.0, -3.0])
        np.testing.assert_array_equal(elementwise(a, b, "mul").data, [4.0, 10.0, 18.0])

    def test_scalar_pairs_with_anything(self):
        a = Tensor(np.ones((2, 3)))
        np.testing.assert_array_equal((a * 2.0).data, np.full((2, 3), 2.0))
        np.testing.assert_array_equal((1.0 - a).data, np.zeros((2, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_reductions(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert reduce(x, "sum").item() == 15.0
        assert reduce(x, "mean").item() == 2.5
        with pytest.raises(ContractError):
            reduce(x, "max")

    def test_sqrt_needs_positive_input(self):
        assert sqrt(Tensor(4.0)).item() == 2.0
        with pytest.raises(ContractError):
            sqrt(Tensor([1.0, 0.0]))

    def test_concat_order(self, rng):
        a = rng.uniform(size=(2, 3, 3))
        b = rng.uniform(size=(3, 3, 3))
        out = concat_channels(Tensor(a), Tensor(b)).data
        assert out.shape == (5, 3, 3)
        np.testing.assert_allclose(out[:2], a, rtol=1e-6)
        np.testing.assert_allclose(out[2:], b, rtol=1e-6)

    def test_concat_with_empty_operand(self, rng):
        a = Tensor(rng.uniform(size=(2, 3, 3)))
        out = concat_channels(a, Tensor(np.zeros((0, 3, 3))))
        np.testing.assert_array_equal(out.data, a.data)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            concat_channels(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 3, 4))))

    def test_pad_edge_replicates_border(self):
        x = Tensor(np.arange(4.0).reshape(1, 2, 2))
        expected = np.array([[[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]], dtype=np.float64)
        np.testing.assert_array_equal(pad_edge(x).data, expected)


# =============================================================================
# Reverse mode
# =============================================================================


class TestBackward:
    def test_linear(self):
        x = Tensor(np.ones(5), requires_grad=True)
        grads = backward((x * 2.0).sum(), [x])
        np.testing.assert_array_equal(grads[x], np.full(5, 2.0))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        grads = backward((x * x).sum(), [x])
        np.testing.assert_array_equal(grads[x], [2.0, 4.0])

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        grads = backward((y + y).sum(), [x])
        np.testing.assert_array_equal(grads[x], [12.0])

    def test_root_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_unreachable_leaf_gets_zeros(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        grads = backward(x.sum(), [x, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))

    def test_deterministic(self, tiny_params, small_pair):
        def grads_once():
            named = tiny_params.named_parameters()
            art = forward(small_pair, tiny_params)
            total = loss_total(art.fused, small_pair.ir, small_pair.vis_y, AnnotationSet("p")).total
            g = backward(total, list(named.values()))
            return [g[t].copy() for t in named.values()]

        for a, b in zip(grads_once(), grads_once()):
            np.testing.assert_array_equal(a, b)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.is_leaf


class TestFiniteness:
    def test_nan_input(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_overflow_in_forward(self):
        with precision(64):
            big = Tensor([1e300])
            with pytest.raises(NonFiniteError, match="mul"):
                big * big


class TestPrecision:
    def test_switch_is_scoped(self):
        before = default_dtype()
        with precision(64):
            assert Tensor(1.0).dtype == np.float64
        assert default_dtype() is before

    def test_unknown_precision(self):
        with pytest.raises(ContractError):
            with precision(16):
                pass


# =============================================================================
# Gradients against central differences
# =============================================================================

TOLERANCE = {32: 1e-3, 64: 1e-6}


@pytest.mark.parametrize("bits", [32, 64])
class TestGradients:
    def test_conv2d_weight_1x1x4x4(self, rng, bits):
        x = rng.normal(size=(1, 1, 4, 4))
        w = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        err = check_gradients(lambda x_, w_, b_: weighted_sum(conv2d(x_, w_, b_, padding=1)), [x, w, b], bits=bits, eps=1e-3)
        assert err < TOLERANCE[bits]

    def test_conv2d_multichannel_no_padding(self, rng, bits):
        x = rng.normal(size=(3, 5, 6))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        err = check_gradients(lambda x_, w_, b_: weighted_sum(conv2d(x_, w_, b_, padding=0)), [x, w, b], bits=bits)
        assert err < TOLERANCE[bits]

    def test_relu(self, rng, bits):
        err = check_gradients(lambda x: weighted_sum(relu(x)), [_away_from_zero(rng, (2, 4, 4))], bits=bits)
        assert err < TOLERANCE[bits]

    def test_sigmoid(self, rng, bits):
        err = check_gradients(lambda x: weighted_sum(sigmoid(x)), [rng.normal(size=(2, 4, 4))], bits=bits)
        assert err < TOLERANCE[bits]

    def test_sqrt(self, rng, bits):
        err = check_gradients(lambda x: weighted_sum(sqrt(x)), [rng.uniform(0.5, 2.0, size=(3, 3))], bits=bits)
        assert err < TOLERANCE[bits]

    def test_elementwise(self, rng, bits):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        for kind in ("add", "sub", "mul"):
            err = check_gradients(lambda a_, b_: weighted_sum(elementwise(a_, b_, kind)), [a, b], bits=bits)
            assert err < TOLERANCE[bits], kind

    def test_mean(self, rng, bits):
        err = check_gradients(lambda x: reduce(x * x, "mean"), [rng.normal(size=(4, 5))], bits=bits)
        assert err < TOLERANCE[bits]

    def test_concat(self, rng, bits):
        a, b = rng.normal(size=(1, 3, 3)), rng.normal(size=(2, 3, 3))
        err = check_gradients(lambda a_, b_: weighted_sum(concat_channels(a_, b_)), [a, b], bits=bits)
        assert err < TOLERANCE[bits]

    def test_pad_edge(self, rng, bits):
        err = check_gradients(lambda x: weighted_sum(pad_edge(x, 2)), [rng.normal(size=(1, 3, 4))], bits=bits)
        assert err < TOLERANCE[bits]


# =============================================================================
# Adam
# =============================================================================


def _scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return p


class TestAdam:
    def test_first_step_moves_by_lr(self):
        with precision(64):
            p = Tensor([1.0], requires_grad=True)
            adam_step({"p": p}, {"p": np.array([0.5])}, AdamState(), lr=1e-3)
        assert p.data[0] == pytest.approx(1.0 - 1e-3, rel=1e-9)

    def test_zero_gradient_leaves_parameter(self):
        p = Tensor([0.7, -0.2], requires_grad=True)
        before = p.data.copy()
        state = adam_step({"p": p}, {"p": np.zeros(2, dtype=p.dtype)}, AdamState(), lr=1e-2)
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 1

    def test_matches_scalar_reference(self):
        grads = [0.3, -1.2, 0.05, 2.0, -0.4]
        with precision(64):
            p = Tensor([0.25], requires_grad=True)
            state = AdamState()
            for g in grads:
                adam_step({"p": p}, {"p": np.array([g])}, state, lr=1e-2)
        assert p.data[0] == pytest.approx(_scalar_adam(0.25, grads, 1e-2), rel=1e-12)
        assert state.step == len(grads)

    def test_moments_follow_parameter_shape(self):
        p = Tensor(np.zeros((2, 3)), requires_grad=True)
        state = adam_step({"p": p}, {"p": np.ones((2, 3), dtype=p.dtype)}, AdamState(), lr=1e-3)
        assert state.m["p"].shape == (2, 3)
        assert state.v["p"].dtype == p.dtype

    def test_gradient_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(DimensionError):
            adam_step({"p": p}, {"p": np.zeros(4)}, AdamState(), lr=1e-3)

    def test_non_finite_update_changes_nothing(self):
        a = Tensor([0.5, 0.5], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        state = AdamState()
        grads = {"a": np.array([0.1, 0.2], dtype=a.dtype), "b": np.array([np.inf], dtype=b.dtype)}
        with pytest.raises(NonFiniteError, match="adam update of b"):
            adam_step({"a": a, "b": b}, grads, state, lr=1e-3)
        np.testing.assert_array_equal(a.data, [0.5, 0.5])
        assert state.step == 0
        assert state.m == {} and state.v == {}
