import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import brute_conv1d_rows, direct_conv2d, numeric_grad, relative_error
from pixelrnn import tensor as T
from pixelrnn.errors import ConfigurationError, NumericError
from pixelrnn.tensor import Parameter, Tensor


def _fd_check(build, arrays, rng, coords=20):
    """Backprop vs central differences for ``sum(w * build(*params))`` with random ``w``."""
    params = [Parameter(a.copy(), f"p{i}") for i, a in enumerate(arrays)]
    out_shape = build(*params).shape
    w = Tensor(rng.normal(size=out_shape))

    def loss():
        return T.sum(T.mul(build(*params), w))

    T.backward(loss())
    worst = 0.0
    for p in params:
        for _ in range(coords):
            idx = tuple(int(rng.integers(s)) for s in p.shape)

            def value():
                with T.no_grad():
                    return float(loss().data)

            worst = max(worst, relative_error(float(p.grad[idx]), numeric_grad(value, p.data, idx)))
    return worst


class TestElementwise:
    def test_sigmoid_and_tanh_at_zero(self):
        z = Tensor(np.zeros((2, 3)))
        assert np.all(T.sigmoid(z).data == 0.5)
        assert np.all(T.tanh(z).data == 0.0)

    def test_mul_by_zeros(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert np.all(T.pointwise("mul", x, Tensor(np.zeros((3, 4)))).data == 0.0)

    @pytest.mark.parametrize("op", ["add", "mul"])
    def test_binary_shape_mismatch(self, op):
        with pytest.raises(ConfigurationError):
            T.pointwise(op, Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_unknown_pointwise(self):
        with pytest.raises(ConfigurationError):
            T.pointwise("softplus", Tensor(np.zeros(1)))

    def test_relu_propagates_nan(self):
        with T.nonfinite_allowed():
            out = T.relu(Tensor(np.array([np.nan, -1.0, 2.0]))).data
        assert np.isnan(out[0]) and out[1] == 0.0 and out[2] == 2.0

    def test_sigmoid_saturates_without_overflow(self):
        s = T.sigmoid(Tensor(np.array([-1e4, 1e4]))).data
        assert s[0] == 0.0 and s[1] == 1.0

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "relu"])
    def test_unary_gradients(self, op, rng):
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 0.05] = 0.3  # keep relu away from its kink
        assert _fd_check(lambda p: T.pointwise(op, p), [x], rng) < 1e-6

    @pytest.mark.parametrize("op", ["add", "mul"])
    def test_binary_gradients(self, op, rng):
        a, b = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
        assert _fd_check(lambda p, q: T.pointwise(op, p, q), [a, b], rng) < 1e-6

    @given(hnp.arrays(np.float64, (3, 3), elements=st.floats(-5, 5)))
    def test_tanh_is_odd(self, x):
        assert np.array_equal(T.tanh(Tensor(-x)).data, -T.tanh(Tensor(x)).data)


class TestShapeOps:
    @pytest.mark.parametrize("name,build", [
        ("reshape", lambda p: T.reshape(p, (6, 2))),
        ("slice", lambda p: p[:, 1:3]),
        ("concat", lambda p: T.concat([p, T.scale(p, 2.0)], axis=1)),
        ("stack", lambda p: T.stack([p, p], axis=0)),
        ("pad", lambda p: T.pad(p, ((1, 0), (2, 1)))),
        ("flip", lambda p: T.flip(p, 1)),
        ("where", lambda p: T.where(np.eye(3, 4, dtype=bool), p, T.scale(p, -3.0))),
        ("broadcast", lambda p: T.broadcast_to(T.reshape(p, (1, 3, 4)), (2, 3, 4))),
        ("mean", lambda p: T.reshape(T.mean(p), (1,))),
    ])
    def test_gradients(self, name, build, rng):
        assert _fd_check(build, [rng.normal(size=(3, 4))], rng) < 1e-6

    def test_upsample_nearest(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        up = T.upsample_nearest(Tensor(x), 3).data
        assert up.shape == (1, 2, 6, 6)
        assert np.array_equal(up[:, :, ::3, ::3], x)
        assert _fd_check(lambda p: T.upsample_nearest(p, 2), [x], rng) < 1e-6

    def test_add_bias(self, rng):
        x, b = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3)
        assert _fd_check(T.add_bias, [x, b], rng) < 1e-6
        with pytest.raises(ConfigurationError):
            T.add_bias(Tensor(x), Tensor(np.zeros(4)))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(3, 5, 5))
        k = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        assert np.array_equal(T.conv2d(Tensor(x), k).data, x)

    def test_zero_kernel(self, rng):
        out = T.conv2d(Tensor(rng.normal(size=(2, 4, 4))), Tensor(np.zeros((5, 2, 3, 3))))
        assert out.shape == (5, 4, 4) and np.all(out.data == 0)

    def test_matches_direct_loops(self):
        # frozen oracle case: random 2x4x4 input, 3x2x3x3 kernel
        r = np.random.default_rng(7)
        x, k = r.normal(size=(2, 4, 4)), r.normal(size=(3, 2, 3, 3))
        got = T.conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_allclose(got, direct_conv2d(x, k, (1, 1)), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kh,kw", [(1, 1), (1, 3), (3, 1), (5, 3), (7, 7)])
    def test_matches_direct_loops_shapes(self, kh, kw, rng):
        x, k = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, kh, kw))
        got = T.conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_allclose(got, direct_conv2d(x, k, (kh // 2, kw // 2)), rtol=0, atol=1e-12)

    def test_linearity(self, rng):
        x, y = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        lhs = T.conv2d(Tensor(2.5 * x - 0.75 * y), k).data
        rhs = 2.5 * T.conv2d(Tensor(x), k).data - 0.75 * T.conv2d(Tensor(y), k).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_gradients_both_arguments(self, rng):
        x, k, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        assert _fd_check(lambda p, q, r: T.conv2d(p, q, r), [x, k, b], rng) < 1e-6

    def test_explicit_padding(self, rng):
        x, k = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 1, 2, 1))
        got = T.conv2d(Tensor(x), Tensor(k), padding=((1, 0), (0, 0))).data
        want = k[0, 0, 0, 0] * np.vstack([np.zeros((1, 4)), x[0, :-1]]) + k[0, 0, 1, 0] * x[0]
        np.testing.assert_allclose(got[0], want, atol=1e-14)

    def test_feature_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))))

    def test_even_kernel_same_padding(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_non_finite_input(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        with T.nonfinite_allowed():
            out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        assert np.isnan(out.data[0, 1, 1]) and np.isfinite(out.data).sum() == 8

    def test_replay_is_bit_identical(self, rng):
        x, k = Tensor(rng.normal(size=(2, 3, 6, 6))), Tensor(rng.normal(size=(4, 3, 3, 3)))
        assert np.array_equal(T.conv2d(x, k).data, T.conv2d(x, k).data)


class TestConv1dRows:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 3, 4))
        k = Tensor(np.eye(2).reshape(2, 2, 1))
        assert np.array_equal(T.conv1d_rows(Tensor(x), k).data, x)

    def test_width_one_uses_centre_only(self, rng):
        x = rng.normal(size=(1, 3, 1))
        k = rng.normal(size=(1, 1, 3))
        np.testing.assert_allclose(T.conv1d_rows(Tensor(x), Tensor(k)).data, k[0, 0, 1] * x, atol=1e-15)

    def test_agrees_with_conv2d(self, rng):
        x, k = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3))
        one = T.conv1d_rows(Tensor(x), Tensor(k)).data
        two = T.conv2d(Tensor(x), Tensor(k[:, :, None, :])).data
        assert np.array_equal(one, two)
        np.testing.assert_allclose(one, brute_conv1d_rows(x, k), atol=1e-12)

    def test_even_kernel(self):
        with pytest.raises(ConfigurationError):
            T.conv1d_rows(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 2))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Parameter(np.arange(6.0).reshape(2, 3), "x")
        T.backward(T.sum(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Parameter(np.array([1.0, 2.0, 3.0]), "x")
        T.backward(T.sum(T.mul(x, x)))
        assert np.array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_unreachable_parameter_gets_zero(self):
        x, y = Parameter(np.ones(2), "x"), Parameter(np.ones(2), "y")
        T.backward(T.sum(x))
        assert np.array_equal(y.grad, np.zeros(2))

    def test_non_scalar(self):
        x = Parameter(np.ones(2), "x")
        with pytest.raises(ConfigurationError):
            T.backward(T.scale(x, 2.0))

    def test_twice(self):
        x = Parameter(np.ones(2), "x")
        loss = T.sum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(ConfigurationError):
            T.backward(loss)

    def test_not_recorded(self):
        x = Parameter(np.ones(2), "x")
        with T.no_grad():
            loss = T.sum(x)
        with pytest.raises(ConfigurationError):
            T.backward(loss)

    def test_shared_subexpression_accumulates(self):
        x = Parameter(np.array([3.0]), "x")
        y = T.mul(x, x)
        T.backward(T.sum(T.add(y, y)))
        assert x.grad[0] == 12.0

    def test_grad_shape_matches(self, rng):
        p = Parameter(rng.normal(size=(2, 3, 4)), "p")
        T.backward(T.sum(T.tanh(p)))
        assert p.grad.shape == p.data.shape


class TestParameter:
    def test_mask_zeroes_on_creation(self):
        class M:
            pattern = np.array([[1.0, 0.0], [0.0, 1.0]])

        p = Parameter(-np.ones((2, 2)), "w", M())
        assert np.array_equal(p.data, [[-1.0, 0.0], [0.0, -1.0]])
        assert not np.signbit(p.data[0, 1])

    def test_mask_shape_mismatch(self):
        class M:
            pattern = np.ones((3, 3))

        with pytest.raises(ConfigurationError):
            Parameter(np.ones((2, 2)), "w", M())
