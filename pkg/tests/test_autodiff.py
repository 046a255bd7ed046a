"""Tensor ops, recorded gradients, and the finite-difference checker."""

import math

import numpy as np
import pytest

import wstabnet.autodiff as ad
from wstabnet.autodiff import (
    EmptyAfterIgnore,
    IdOutOfRange,
    NotScalar,
    ShapeMismatch,
    Tensor,
    backward,
    grad_check,
)


def leaf(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def fd_check(build, params, tol=1e-6, h=1e-5):
    """Assert recorded gradients match central differences."""
    report = grad_check(build, params, h=h, tol=tol)
    assert report["pass"], report
    return report


class TestMatmul:
    def test_identity(self, rng):
        a = leaf(rng.normal(size=(3, 3)))
        out = ad.matmul(a, Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_scalar_product(self):
        out = ad.matmul(leaf([[2.0]]), leaf([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(leaf(np.zeros((2, 3))), leaf(np.zeros((2, 3))))

    def test_gradient_matches_fd(self, rng):
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(4, 2)))
        fd_check(lambda: ad.tsum(ad.matmul(a, b)), {"a": a, "b": b})

    def test_grad_of_sum_is_ones_bt(self, rng):
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(4, 2)))
        loss = ad.tsum(ad.matmul(a, b))
        backward(loss)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_large_values_stable(self):
        out = ad.softmax(Tensor([[1000.0, 0.0]]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(4, 5))
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 3.7)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = ad.softmax(Tensor(rng.normal(size=(6, 8)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradient(self, rng):
        x = leaf(rng.normal(size=(3, 5)))
        w = Tensor(rng.normal(size=(3, 5)))
        fd_check(lambda: ad.tsum(ad.mul(ad.softmax(x), w)), {"x": x})


class TestCrossEntropy:
    def test_uniform_logits_ln_v(self):
        v = 7
        loss = ad.cross_entropy(Tensor(np.zeros((3, v))), [0, 3, 6])
        assert float(loss.data) == pytest.approx(math.log(v), abs=1e-12)

    def test_confident_correct_is_tiny(self):
        loss = ad.cross_entropy(Tensor([[10.0, -10.0]]), [0])
        assert float(loss.data) < 1e-8

    def test_all_ignored_raises(self):
        with pytest.raises(EmptyAfterIgnore):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 0], ignore_id=0)

    def test_ignored_positions_contribute_nothing(self, rng):
        logits = rng.normal(size=(4, 5))
        full = ad.cross_entropy(Tensor(logits[:2]), [1, 2])
        padded = ad.cross_entropy(Tensor(logits), [1, 2, 0, 0], ignore_id=0)
        assert float(full.data) == pytest.approx(float(padded.data), abs=1e-12)

    def test_nonnegative(self, rng):
        for _ in range(20):
            logits = leaf(rng.normal(size=(5, 9)) * 3)
            targets = rng.integers(0, 9, size=5)
            assert float(ad.cross_entropy(logits, targets).data) >= 0.0

    def test_target_out_of_range(self):
        with pytest.raises(IdOutOfRange):
            ad.cross_entropy(Tensor(np.zeros((1, 3))), [5])

    def test_gradient_with_ignore(self, rng):
        x = leaf(rng.normal(size=(5, 6)))
        targets = [2, 0, 5, 0, 1]
        fd_check(lambda: ad.cross_entropy(x, targets, ignore_id=0), {"x": x})


class TestLayerNorm:
    def test_constant_vector_zeros(self):
        x = Tensor(np.full((2, 8), 3.5))
        out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_normalizes_last_axis(self, rng):
        x = Tensor(rng.normal(size=(4, 16)) * 5 + 2)
        out = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_gradient(self, rng):
        x = leaf(rng.normal(size=(3, 6)))
        g = leaf(rng.normal(size=6))
        b = leaf(rng.normal(size=6))
        w = Tensor(rng.normal(size=(3, 6)))
        fd_check(
            lambda: ad.tsum(ad.mul(ad.layer_norm(x, g, b), w)),
            {"x": x, "g": g, "b": b},
        )


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 5)))
        kernel = Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, kernel, stride=1, pad=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_known_sum_kernel(self):
        x = Tensor(np.arange(9.0).reshape(1, 3, 3))
        kernel = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, kernel, stride=1, pad=0)
        assert out.data.shape == (1, 1, 1)
        assert out.data.item() == 36.0

    def test_stride_and_pad_shapes(self, rng):
        x = Tensor(rng.normal(size=(2, 8, 8)))
        kernel = Tensor(rng.normal(size=(4, 2, 3, 3)))
        out = ad.conv2d(x, kernel, stride=2, pad=1)
        assert out.data.shape == (4, 4, 4)

    def test_gradient(self, rng):
        x = leaf(rng.normal(size=(2, 5, 5)))
        k = leaf(rng.normal(size=(3, 2, 3, 3)) * 0.5)
        b = leaf(rng.normal(size=3))
        w = Tensor(rng.normal(size=(3, 3, 3)))
        fd_check(
            lambda: ad.tsum(ad.mul(ad.conv2d(x, k, b, stride=2, pad=1), w)),
            {"x": x, "k": k, "b": b},
        )


class TestEmbedAndShapes:
    def test_embed_gathers_rows(self, rng):
        table = leaf(rng.normal(size=(7, 4)))
        out = ad.embed(table, [3])
        np.testing.assert_array_equal(out.data[0], table.data[3])

    def test_embed_out_of_range(self):
        with pytest.raises(IdOutOfRange):
            ad.embed(leaf(np.zeros((3, 2))), [3])

    def test_embed_gradient_with_repeats(self, rng):
        table = leaf(rng.normal(size=(5, 3)))
        w = Tensor(rng.normal(size=(4, 3)))
        fd_check(lambda: ad.tsum(ad.mul(ad.embed(table, [1, 1, 4, 0]), w)), {"t": table})

    def test_narrow_concat_roundtrip(self, rng):
        x = leaf(rng.normal(size=(4, 6)))
        parts = [ad.narrow(x, 1, i * 2, 2) for i in range(3)]
        out = ad.concat(parts, axis=1)
        np.testing.assert_array_equal(out.data, x.data)
        fd_check(lambda: ad.tsum(ad.mul(ad.concat([ad.narrow(x, 1, 2, 3)], axis=1), Tensor(np.ones((4, 3))))), {"x": x})

    def test_transpose_reshape_gradients(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(12, 2)))
        fd_check(
            lambda: ad.tsum(ad.mul(ad.reshape(ad.transpose_axes(x, (2, 1, 0)), (12, 2)), w)),
            {"x": x},
        )

    def test_suffix_broadcast_add(self, rng):
        x = leaf(rng.normal(size=(5, 3)))
        bias = leaf(rng.normal(size=3))
        out = ad.add(x, bias)
        np.testing.assert_allclose(out.data, x.data + bias.data)
        fd_check(lambda: ad.tsum(ad.mul(ad.add(x, bias), Tensor(np.ones((5, 3))))), {"x": x, "b": bias})

    def test_bad_broadcast_rejected(self):
        with pytest.raises(ShapeMismatch):
            ad.add(leaf(np.zeros((4, 3))), leaf(np.zeros(4)))


class TestBackward:
    def test_square_gradient(self):
        x = leaf(3.0)
        backward(ad.mul(x, x))
        assert float(x.grad) == 6.0

    def test_sum_of_two(self):
        x, y = leaf(1.0), leaf(2.0)
        backward(ad.add(x, y))
        assert float(x.grad) == 1.0 and float(y.grad) == 1.0

    def test_accumulation_without_reset(self):
        x = leaf(3.0)
        backward(ad.mul(x, x))
        first = float(x.grad)
        backward(ad.mul(x, x))
        assert float(x.grad) == 2 * first

    def test_not_scalar(self):
        with pytest.raises(NotScalar):
            backward(leaf(np.zeros(3)))

    def test_nonparticipating_leaf_grad_is_zero(self):
        x, z = leaf(2.0), leaf(5.0)
        backward(ad.mul(x, x))
        assert float(z.grad) == 0.0

    def test_deep_chain_is_iterative(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = ad.add(y, 1.0)
        backward(y)
        assert float(x.grad) == 1.0

    def test_determinism_bit_identical(self, rng):
        def run():
            r = np.random.default_rng(5)
            a = leaf(r.normal(size=(4, 4)))
            b = leaf(r.normal(size=(4, 4)))
            loss = ad.tsum(ad.relu(ad.matmul(a, b)))
            backward(loss)
            return loss.data.copy(), a.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_no_grad_suspends_recording(self):
        x = leaf(2.0)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y._backward is None and not y.requires_grad


class TestGradCheckHarness:
    def test_zero_parameter_function_passes(self):
        report = grad_check(lambda: Tensor(np.float64(1.0)), {})
        assert report["pass"] and report["max_rel_err"] == 0.0

    def test_linear_layer_with_cross_entropy(self, rng):
        w = leaf(rng.normal(size=(4, 6)))
        b = leaf(rng.normal(size=6))
        x = Tensor(rng.normal(size=(3, 4)))
        targets = [1, 5, 2]

        def f():
            return ad.cross_entropy(ad.add(ad.matmul(x, w), b), targets)

        report = grad_check(f, {"w": w, "b": b}, h=1e-5, tol=1e-6)
        assert report["pass"], report

    def test_detects_wrong_gradient(self, rng):
        x = leaf(rng.normal(size=(3,)))

        def wrong(g):
            return (2.0 * g,)

        def f():
            out = ad.tsum(x)
            out._backward = wrong
            return out

        report = grad_check(f, {"x": x}, tol=1e-6)
        assert not report["pass"]


class TestDropout:
    def test_disabled_without_rng(self, rng):
        x = leaf(rng.normal(size=(4, 4)))
        assert ad.dropout(x, 0.5, None) is x

    def test_scales_kept_values(self):
        x = Tensor(np.ones((1000,)))
        out = ad.dropout(x, 0.25, np.random.default_rng(0))
        kept = out.data[out.data != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert 650 < kept.size < 850
