import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynaguide import tensor as T
from dynaguide.exceptions import ConfigurationError, TapeError
from dynaguide.gradcheck import check_gradients
from dynaguide.tensor import Tensor


def naive_conv(x, kernel, bias, mode="zeros"):
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    r = k // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            y, z = i + dy - r, j + dx - r
                            if mode == "replicate":
                                y, z = min(max(y, 0), h - 1), min(max(z, 0), w - 1)
                            elif mode == "reflect":
                                y = -y if y < 0 else (2 * (h - 1) - y if y >= h else y)
                                z = -z if z < 0 else (2 * (w - 1) - z if z >= w else z)
                            elif not (0 <= y < h and 0 <= z < w):
                                continue
                            acc += kernel[o, c, dy, dx] * x[c, y, z]
                out[o, i, j] = acc
    return out


def conv(x, kernel, bias, mode="zeros"):
    k = kernel.shape[-1]
    return T.conv2d(Tensor(x), Tensor(kernel), Tensor(bias), (k - 1) // 2, mode).data


class TestConv2d:
    def test_single_pixel_centre_tap(self):
        out = conv(np.array([[[0.7]]]), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 0.7

    def test_zero_kernel_gives_bias(self, rng):
        x = rng.standard_normal((2, 4, 5))
        out = conv(x, np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]))
        for o, b in enumerate([1.0, -2.0, 0.5]):
            assert np.all(out[o] == b)

    def test_matches_loop_reference(self, rng):
        x = rng.standard_normal((2, 5, 5))
        kernel = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        np.testing.assert_allclose(conv(x, kernel, bias), naive_conv(x, kernel, bias),
                                   rtol=0, atol=1e-12)

    @pytest.mark.parametrize("mode", ["replicate", "reflect"])
    def test_padding_modes_match_loop_reference(self, rng, mode):
        x = rng.standard_normal((2, 5, 6))
        kernel = rng.standard_normal((2, 2, 3, 3))
        bias = rng.standard_normal(2)
        np.testing.assert_allclose(conv(x, kernel, bias, mode), naive_conv(x, kernel, bias, mode),
                                   rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(c_in=st.integers(1, 4), c_out=st.integers(1, 3), h=st.integers(1, 8),
           w=st.integers(1, 8), k=st.sampled_from([1, 3]), seed=st.integers(0, 2**31))
    def test_loop_reference_property(self, c_in, c_out, h, w, k, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((c_in, h, w))
        kernel = rng.standard_normal((c_out, c_in, k, k))
        bias = rng.standard_normal(c_out)
        np.testing.assert_allclose(conv(x, kernel, bias), naive_conv(x, kernel, bias),
                                   rtol=0, atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ConfigurationError, match="C_in"):
            conv(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError, match="odd"):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))),
                     Tensor(np.zeros(1)), 1)

    def test_wrong_padding_rejected(self):
        with pytest.raises(ConfigurationError, match="padding"):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                     Tensor(np.zeros(1)), 0)

    @pytest.mark.parametrize("mode", ["zeros", "replicate", "reflect"])
    def test_gradients(self, rng, mode):
        w = rng.standard_normal((2, 5, 5))
        res = check_gradients(
            "conv2d", lambda a: T.dot(T.conv2d(a[0], a[1], a[2], 1, mode), w),
            [Tensor(rng.standard_normal((3, 5, 5))), Tensor(rng.standard_normal((2, 3, 3, 3))),
             Tensor(rng.standard_normal(2))])
        assert res.passed, res


class TestBatchNorm:
    def test_two_values(self):
        x = Tensor(np.array([[[1.0, 3.0]]]))
        out = T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), 1e-12).data
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-9)

    def test_constant_channel_gives_beta(self):
        x = Tensor(np.full((2, 3, 3), 4.2))
        out = T.batch_norm(x, Tensor(np.array([3.0, -1.0])), Tensor(np.array([0.5, 2.0])), 1e-5)
        assert np.allclose(out.data[0], 0.5) and np.allclose(out.data[1], 2.0)

    def test_statistics(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 3)) * 5 + 2)
        out = T.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-12).data
        flat = out.reshape(4, -1)
        assert np.all(np.abs(flat.mean(axis=1)) < 1e-9)
        assert np.all(np.abs(flat.var(axis=1) - 1) < 1e-6)

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            T.batch_norm(Tensor(np.zeros((1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), 0.0)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])

    def test_relu_all_negative_has_zero_gradient(self):
        x = Tensor(-np.ones((2, 3)), requires_grad=True)
        with T.Tape() as tape:
            y = T.total(T.relu(x))
        tape.backward(y)
        assert np.all(y.data == 0) and np.all(x.grad == 0)

    def test_add_identities(self, rng):
        a = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(T.add(Tensor(a), Tensor(np.zeros_like(a))).data, a)
        np.testing.assert_array_equal(T.add(Tensor(a), Tensor(-a)).data, 0.0)

    def test_add_gradient_is_ones(self, rng):
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.total(T.add(a, b))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, 1.0)
        np.testing.assert_array_equal(b.grad, 1.0)

    def test_add_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestLogSoftmax:
    def test_two_equal_channels(self):
        out = T.log_softmax(Tensor(np.zeros((2, 1, 1)))).data.ravel()
        np.testing.assert_allclose(out, [np.log(0.5)] * 2, atol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((5, 3, 3))
        a = T.log_softmax(Tensor(x)).data
        b = T.log_softmax(Tensor(x + 17.3)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_normalizes(self, seed):
        x = np.random.default_rng(seed).standard_normal((5, 1, 1)) * 10
        total = np.exp(T.log_softmax(Tensor(x)).data).sum()
        assert abs(total - 1) <= 1e-12

    def test_large_logits_stay_finite(self):
        out = T.log_softmax(Tensor(np.array([[[1e4]], [[-1e4]]]))).data
        assert np.all(np.isfinite(out))


class TestTape:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.total(x)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, 1.0)
        assert tape.consumed

    def test_half_sum_of_squares_gradient_is_x(self, rng):
        data = rng.standard_normal((3, 3))
        x = Tensor(data, requires_grad=True)
        with T.Tape() as tape:
            loss = T.total(T.huber(x, 1e9))  # quadratic branch everywhere: 0.5 * sum(x^2)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, data)

    def test_backward_twice_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.total(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_untaped_loss_rejected(self):
        with pytest.raises(TapeError):
            T.backward(T.total(Tensor(np.ones(3), requires_grad=True)))

    def test_reverse_order(self):
        order = []
        x = Tensor(np.ones(2), requires_grad=True)
        with T.Tape() as tape:
            a = T.scale(x, 2.0)
            b = T.scale(a, 3.0)
            loss = T.total(b)
        for i, (out, _, fn) in enumerate(list(tape._nodes)):
            tape._nodes[i] = (out, _, (lambda f, k: lambda g: (order.append(k), f(g)))(fn, i))
        tape.backward(loss)
        assert order == [2, 1, 0]

    def test_forward_is_deterministic(self, rng):
        x = rng.standard_normal((3, 6, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        first = conv(x, k, b)
        assert np.array_equal(first, conv(x, k, b))

    def test_fault_injection_scales_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.inject_backward_fault("scale", 2.0), T.Tape() as tape:
            loss = T.total(T.scale(x, 3.0))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 6.0)
