import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tbnet import tensor as te
from tbnet.gradcheck import check_case, Case, relative_error
from tbnet.tensor import ContractError, DimensionError, Tensor


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def numeric_grad(f, x: np.ndarray, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        up = f()
        x[i] = orig - eps
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def naive_conv2d(x, w, stride, pad):
    """Direct loop over output positions, frames treated independently."""
    B, C, H, W = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, co, Ho, Wo))
    for b in range(B):
        for o in range(co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


class TestElementwise:
    def test_add_values(self):
        assert np.array_equal(te.elementwise(leaf([1, 2, 3]), leaf([4, 5, 6]), "add").data, [5, 7, 9])

    def test_mul_identity(self):
        assert np.array_equal(te.elementwise(leaf([1, 2, 3]), leaf([1, 1, 1]), "mul").data, [1, 2, 3])

    def test_mul_gradient_is_other_operand(self):
        a, b = leaf([2.0, 3.0]), leaf([5.0, 7.0])
        te.sum_all(te.elementwise(a, b, "mul")).backward()
        assert np.allclose(a.grad, [5, 7])
        num = numeric_grad(lambda: float(np.sum(a.data * b.data)), a.data)
        assert np.allclose(num, [5, 7], atol=1e-8)

    def test_broadcast_leading_ones(self):
        a = leaf(np.ones((2, 3, 4)))
        b = leaf(np.arange(4.0).reshape(1, 4))
        out = te.elementwise(a, b, "add")
        te.sum_all(out).backward()
        assert out.shape == (2, 3, 4)
        assert np.allclose(b.grad, 6.0)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3,\).*\(2,\)|\(2,\).*\(3,\)"):
            te.elementwise(leaf([1, 2]), leaf([1, 2, 3]), "add")

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            te.elementwise(leaf([1]), leaf([1]), "div")

    def test_inputs_not_mutated(self, rng):
        a, b = leaf(rng.standard_normal(5)), leaf(rng.standard_normal(5))
        a0, b0 = a.data.copy(), b.data.copy()
        te.sum_all(te.mul(a, b)).backward()
        assert np.array_equal(a.data, a0) and np.array_equal(b.data, b0)


class TestReduceSum:
    def test_axis0(self):
        assert np.array_equal(te.reduce_sum(leaf([[1, 2], [3, 4]]), 0).data, [4, 6])

    def test_axis1(self):
        assert np.array_equal(te.reduce_sum(leaf([[1, 2], [3, 4]]), 1).data, [3, 7])

    def test_gradient_all_ones(self, rng):
        a = leaf(rng.standard_normal((2, 3, 4)))
        te.sum_all(te.reduce_sum(a, 1)).backward()
        assert np.array_equal(a.grad, np.ones((2, 3, 4)))

    def test_axis_out_of_range(self):
        with pytest.raises(IndexError):
            te.reduce_sum(leaf([[1, 2]]), 2)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1))
    def test_round_trip_with_broadcast(self, n, m, axis):
        g = np.random.default_rng(n * 10 + m).standard_normal((n, m)[1 - axis])
        reduced_extent = (n, m)[axis]
        a = leaf(np.zeros((n, m)))
        out = te.reduce_sum(a, axis)
        out.backward(g)
        # the backward broadcast of g summed back over the axis gives g * extent
        assert np.allclose(a.grad.sum(axis=axis), g * reduced_extent)


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 5, 5)))
        w = Tensor(np.eye(4).reshape(4, 4, 1, 1))
        assert np.array_equal(te.conv2d_spatial(x, w).data, x.data)

    def test_box_sum_of_delta(self):
        x = np.zeros((1, 1, 1, 3, 3))
        x[0, 0, 0, 1, 1] = 1.0
        y = te.conv2d_spatial(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), 1, 1)
        assert np.array_equal(y.data[0, 0, 0], np.ones((3, 3)))

    @given(st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(1, 2), st.integers(0, 2),
           st.integers(3, 7))
    def test_matches_naive_loop(self, c, k, stride, pad, size):
        rng = np.random.default_rng(c * 100 + k * 10 + size)
        if k > size + 2 * pad:
            return
        x = rng.standard_normal((2, 2, c, size, size))
        w = rng.standard_normal((3, c, k, k))
        y = te.conv2d_spatial(Tensor(x), Tensor(w), stride, pad).data
        ref = naive_conv2d(x.reshape(4, c, size, size), w, stride, pad).reshape(2, 2, 3, *y.shape[3:])
        assert np.max(np.abs(y - ref)) < 1e-12

    def test_output_extent_formula(self):
        y = te.conv2d_spatial(Tensor(np.zeros((1, 8, 3, 112, 112))), Tensor(np.zeros((4, 3, 7, 7))), 2, 3)
        assert y.shape == (1, 8, 4, 56, 56)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            te.conv2d_spatial(Tensor(np.zeros((1, 1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            te.conv2d_spatial(Tensor(np.zeros((1, 1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))

    def test_weight_gradient_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))
        w = leaf(rng.standard_normal((2, 1, 3, 3)))
        R = rng.standard_normal((2, 1, 2, 4, 4))
        te.sum_all(te.mul(te.conv2d_spatial(x, w, 1, 1), Tensor(R))).backward()
        num = numeric_grad(lambda: float(np.sum(te.conv2d_spatial(x, Tensor(w.data), 1, 1).data * R)), w.data,
                           1e-5)
        assert relative_error(w.grad, num) < 1e-5


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        y = te.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(y.data, x)

    def test_worked_value(self):
        y = te.linear(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([5.0]))
        assert y.data.tolist() == [[16.0]]

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            te.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_gradient(self, rng):
        x, w, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((2, 4))), leaf(rng.standard_normal(2))
        R = rng.standard_normal((3, 2))
        case = Case(lambda: te.sum_all(te.mul(te.linear(x, w, b), Tensor(R))), [x, w, b])
        assert check_case(case, rng) < 1e-5


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = te.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)
        assert round(loss.item(), 4) == 1.3863

    def test_saturated_no_overflow(self):
        loss = te.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert math.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_formula(self, rng):
        logits = leaf(rng.standard_normal((2, 3)))
        labels = np.array([2, 0])
        te.softmax_cross_entropy(logits, labels).backward()
        p = te.softmax(logits.data)
        p[np.arange(2), labels] -= 1
        assert np.allclose(logits.grad, p / 2)
        num = numeric_grad(lambda: te.softmax_cross_entropy(Tensor(logits.data), labels).item(), logits.data)
        assert relative_error(logits.grad, num) < 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            te.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestBackward:
    def test_sum_gives_ones(self):
        a = leaf([1.0, 2.0, 3.0])
        te.sum_all(a).backward()
        assert np.array_equal(a.grad, np.ones(3))

    def test_square(self):
        a = leaf([3.0])
        te.sum_all(te.mul(a, a)).backward()
        assert a.grad.tolist() == [6.0]

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            te.mul(leaf([1.0, 2.0]), leaf([1.0, 2.0])).backward()

    def test_accumulates_without_reset(self):
        a = leaf([1.0, 2.0])
        te.sum_all(a).backward()
        te.sum_all(a).backward()
        assert np.array_equal(a.grad, [2.0, 2.0])
        te.zero_grads([a])
        assert a.grad is None

    def test_shared_node_visited_once(self):
        a = leaf([2.0])
        b = te.mul(a, a)
        c = te.add(b, b)  # d/da 2a^2 = 4a
        te.sum_all(c).backward()
        assert a.grad.tolist() == [8.0]

    def test_non_participating_tensor_untouched(self):
        a, unused = leaf([1.0]), leaf([5.0])
        te.sum_all(a).backward()
        assert unused.grad is None

    def test_no_grad_records_nothing(self):
        a = leaf([1.0])
        with te.no_grad():
            b = te.mul(a, a)
        assert b.op == "leaf" or not b._parents


class TestHeInit:
    def test_deterministic(self):
        a = te.he_init((4, 4), 4, seed=3)
        b = te.he_init((4, 4), 4, seed=3)
        assert a.data.tobytes() == b.data.tobytes()

    def test_std_fan_in_8(self):
        x = te.he_init((1_000_000,), 8, seed=0).data
        assert abs(x.std() - 0.5) < 0.01

    def test_variance_fan_in_2(self):
        x = te.he_init((1_000_000,), 2, seed=1).data
        assert abs(x.var() - 1.0) < 0.02

    def test_bad_fan_in(self):
        with pytest.raises(ContractError):
            te.he_init((2,), 0)


class TestNorms:
    def test_batch_norm_normalizes_per_channel(self, rng):
        x = Tensor(3 + 2 * rng.standard_normal((4, 3, 2, 5, 5)))
        rm, rv = np.zeros(2), np.ones(2)
        y = te.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
        assert np.allclose(y.data.mean(axis=(0, 1, 3, 4)), 0, atol=1e-12)
        assert np.allclose(y.data.var(axis=(0, 1, 3, 4)), 1, atol=1e-3)
        assert np.all(rm != 0)

    def test_batch_norm_eval_uses_running_stats(self):
        x = Tensor(np.full((1, 1, 1, 1, 1), 3.0))
        y = te.batch_norm(x, Tensor([2.0]), Tensor([1.0]), np.array([1.0]), np.array([4.0]), False, eps=0.0)
        assert y.data.item() == pytest.approx(2.0 * (3 - 1) / 2 + 1)

    def test_sample_norm_independent_of_batch(self, rng):
        x = rng.standard_normal((3, 2, 4, 3, 3))
        g, b = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        whole = te.sample_norm(Tensor(x), g, b).data
        single = te.sample_norm(Tensor(x[1:2]), g, b).data
        assert np.allclose(whole[1:2], single, atol=1e-14)

    def test_sample_norm_scale_invariant(self, rng):
        x = rng.standard_normal((2, 2, 3, 2, 2))
        g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
        a = te.sample_norm(Tensor(x), g, b, eps=0.0).data
        c = te.sample_norm(Tensor(1e6 * x), g, b, eps=0.0).data
        assert np.allclose(a, c, atol=1e-10)
