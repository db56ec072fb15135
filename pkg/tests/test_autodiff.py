"""Autodiff core: forward oracles, finite-difference checks, determinism."""

import numpy as np
import pytest

from biasseg import autodiff as ad
from biasseg.autodiff import Tensor
from biasseg import gradcheck as gc
from biasseg.errors import ConfigError, GraphError, ShapeError


class TestForwardOracles:
    """Hand-computed values for the forward pass of each op."""

    def test_exp_known_values(self):
        out = ad.exp(Tensor([0.0, np.log(2.0)]))
        np.testing.assert_allclose(out.data, [1.0, 2.0], atol=1e-12)

    def test_matmul_2x2(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_softmax_two_logits(self):
        out = ad.softmax(Tensor([1.0, 2.0]))
        np.testing.assert_allclose(out.data, [0.26894142, 0.73105858], atol=1e-8)

    def test_sigmoid_known_value(self):
        out = ad.sigmoid(Tensor([2.0]))
        np.testing.assert_allclose(out.data, [0.88079708], atol=1e-8)
        # symmetric tail: sigmoid(-x) = 1 - sigmoid(x)
        neg = ad.sigmoid(Tensor([-2.0]))
        np.testing.assert_allclose(neg.data + out.data, [1.0], atol=1e-12)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = ad.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)

    def test_conv2d_ones_counts_neighbourhood(self):
        # All-ones image and kernel: each output pixel counts the valid taps.
        x = Tensor(np.ones((1, 5, 5)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, stride=1)
        assert out.shape == (1, 5, 5)
        assert out.data[0, 2, 2] == pytest.approx(9.0)
        assert out.data[0, 0, 0] == pytest.approx(4.0)
        assert out.data[0, 0, 2] == pytest.approx(6.0)

    def test_conv2d_stride2_shape(self):
        x = Tensor(np.ones((2, 8, 8)))
        k = Tensor(np.ones((4, 2, 3, 3)))
        assert ad.conv2d(x, k, stride=2).shape == (4, 4, 4)

    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(1, 4, 4))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0  # centre tap only: convolution is the identity
        out = ad.conv2d(Tensor(img), Tensor(k), stride=1)
        np.testing.assert_allclose(out.data, img, atol=1e-12)

    def test_bilinear_2x2_to_3x3(self):
        x = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        out = ad.bilinear_upsample(x, (3, 3))
        expected = np.array([[[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]]])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_bilinear_corners_exact(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 5))
        out = ad.bilinear_upsample(Tensor(x), (9, 13)).data
        np.testing.assert_allclose(out[:, 0, 0], x[:, 0, 0], atol=1e-12)
        np.testing.assert_allclose(out[:, -1, -1], x[:, -1, -1], atol=1e-12)
        np.testing.assert_allclose(out[:, 0, -1], x[:, 0, -1], atol=1e-12)
        np.testing.assert_allclose(out[:, -1, 0], x[:, -1, 0], atol=1e-12)

    def test_bilinear_constant_field(self):
        x = Tensor(np.full((1, 3, 3), 0.7))
        out = ad.bilinear_upsample(x, (8, 8))
        np.testing.assert_allclose(out.data, 0.7, atol=1e-12)

    def test_take_and_gather(self):
        t = Tensor(np.arange(12.0).reshape(4, 3))
        np.testing.assert_allclose(t[1:3].data, [[3, 4, 5], [6, 7, 8]])
        g = ad.gather_rows(t, [0, 0, 2])
        np.testing.assert_allclose(g.data, [[0, 1, 2], [0, 1, 2], [6, 7, 8]])

    def test_concat_axis0(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.zeros((1, 3)))
        out = ad.concat([a, b], axis=0)
        assert out.shape == (3, 3)
        np.testing.assert_allclose(out.data[2], 0.0)


class TestInvariants:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            x = rng.normal(scale=5.0, size=(4, 9))
            out = ad.softmax(Tensor(x), axis=-1)
            np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 6))
        a = ad.softmax(Tensor(x), axis=-1).data
        b = ad.softmax(Tensor(x + 100.0), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_sigmoid_bounded(self):
        rng = np.random.default_rng(9)
        x = rng.normal(scale=20.0, size=100)
        out = ad.sigmoid(Tensor(x)).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_mean_matches_sum(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 7))
        m = ad.tmean(Tensor(x)).item()
        s = ad.tsum(Tensor(x)).item()
        assert m == pytest.approx(s / 35.0, rel=1e-12)


class TestShapeAndConfigErrors:
    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_no_general_broadcasting(self):
        # (3,4) + (4,) broadcasting is intentionally unsupported.
        with pytest.raises(ShapeError):
            Tensor(np.ones((3, 4))) + Tensor(np.ones(4))

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_conv_stride_rejected(self):
        x, k = Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            ad.conv2d(x, k, stride=3)

    def test_conv_kernel_shape_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))

    def test_downsample_rejected(self):
        with pytest.raises(ShapeError):
            ad.bilinear_upsample(Tensor(np.ones((1, 4, 4))), (2, 2))

    def test_backward_needs_scalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            ad.backward(t * 2.0)

    def test_unknown_elementwise_tag(self):
        with pytest.raises(ConfigError):
            ad.elementwise("pow", Tensor([1.0]), 2.0)


class TestBackwardBasics:
    def test_grad_accumulates_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x  # dy/dx = 2x = 6
        ad.backward(ad.tsum(y))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_stop_gradient_blocks_flow(self):
        x = Tensor([2.0], requires_grad=True)
        y = x.detach() * x
        ad.backward(ad.tsum(y))
        np.testing.assert_allclose(x.grad, [2.0])  # only the live branch

    def test_backward_twice_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.tsum(x * 3.0))
        ad.backward(ad.tsum(x * 3.0))
        np.testing.assert_allclose(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph_sums_paths(self):
        x = Tensor([2.0], requires_grad=True)
        a = x * 3.0
        b = x * 5.0
        ad.backward(ad.tsum(a + b))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_gather_duplicate_rows_accumulate(self):
        w = Tensor(np.zeros((3, 2)), requires_grad=True)
        out = ad.gather_rows(w, [1, 1, 1])
        ad.backward(ad.tsum(out))
        np.testing.assert_allclose(w.grad, [[0, 0], [3, 3], [0, 0]])

    def test_backward_bit_identical(self):
        # The same graph evaluated twice must give byte-equal gradients.
        rng = np.random.default_rng(42)
        x_val = rng.normal(size=(2, 6, 6))
        k_val = rng.normal(size=(3, 2, 3, 3))

        def run():
            x = Tensor(x_val.copy(), requires_grad=True)
            k = Tensor(k_val.copy(), requires_grad=True)
            h = ad.relu(ad.conv2d(x, k, stride=1))
            up = ad.bilinear_upsample(h, (9, 9))
            ad.backward(ad.tsum(ad.sigmoid(up)))
            return x.grad.tobytes(), k.grad.tobytes()

        assert run() == run()


class TestFiniteDifference:
    """Property-style FD checks across many seeds (central diff, step 1e-3)."""

    SEEDS = list(range(20))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_all_ops_within_tolerance(self, seed):
        for op, err in gc.op_checks(seed).items():
            assert err < 1e-4, f"op {op} rel error {err:.3e} at seed {seed}"

    def test_numeric_gradient_on_quadratic(self):
        # Oracle for the checker itself: d/dx sum(x^2) = 2x.
        x = np.array([1.0, -2.0, 0.5])
        g = gc.numeric_gradient(lambda v: float(np.sum(v * v)), x.copy())
        np.testing.assert_allclose(g, 2 * x, atol=1e-6)

    def test_rel_error_metric(self):
        assert gc.rel_error(np.array([1.0]), np.array([1.0])) == 0.0
        assert gc.rel_error(np.array([1.0]), np.array([2.0])) == pytest.approx(0.5)
