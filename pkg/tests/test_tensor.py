import numpy as np
import pytest

from mmte import tensor as T
from mmte.tensor import (
    Tensor,
    backward,
    concat,
    cross_entropy,
    finite_difference_check,
    layer_norm,
    matmul,
    max_,
    mean,
    relu,
    softmax,
    sum_,
    take,
    use_dtype,
)


def triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = Tensor(rng.normal(size=(3, 5)))
        eye = Tensor(np.eye(3))
        np.testing.assert_array_equal(matmul(eye, b).data, b.data)

    def test_hand_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[2.0], [4.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        got = matmul(Tensor(a), Tensor(b)).data
        want = triple_loop_matmul(a, b)
        assert np.max(np.abs(got - want) / (np.abs(want) + 1e-12)) < 1e-6

    def test_shape_error_names_dims(self):
        with pytest.raises(ValueError, match="7.*4|4.*7"):
            matmul(Tensor(np.zeros((2, 7))), Tensor(np.zeros((4, 3))))

    def test_batched_weight_gradient(self):
        with use_dtype("float64"):
            rng = np.random.default_rng(3)
            x = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
            loss = sum_(matmul(x, w))
            backward(loss)
            # dL/dw sums over the batch
            want = sum(x.data[i].T @ np.ones((4, 5)) for i in range(2))
            np.testing.assert_allclose(w.grad, want, rtol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-7)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0, 0.0])
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 17.5)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_extreme_values_no_nan(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        out = softmax(Tensor(rng.normal(size=(6, 9)) * 30), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-6)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        d = 8
        out = layer_norm(Tensor(np.full((2, d), 3.7)), Tensor(np.ones(d)), Tensor(np.zeros(d)))
        np.testing.assert_allclose(out.data, np.zeros((2, d)), atol=1e-5)

    def test_mean_and_std(self):
        rng = np.random.default_rng(11)
        d = 64
        gain = Tensor(np.full(d, 2.0))
        bias = Tensor(np.full(d, 0.5))
        out = layer_norm(Tensor(rng.normal(size=(4, d)) * 3 + 1), gain, bias).data
        np.testing.assert_allclose(out.mean(axis=-1), np.full(4, 0.5), atol=1e-4)
        np.testing.assert_allclose(out.std(axis=-1), np.full(4, 2.0), atol=1e-3)

    def test_against_two_pass_oracle(self):
        with use_dtype("float64"):
            rng = np.random.default_rng(13)
            d = 10
            x = rng.normal(size=(3, d))
            gain = rng.normal(size=d)
            bias = rng.normal(size=d)
            got = layer_norm(Tensor(x), Tensor(gain), Tensor(bias), eps=1e-6).data
            mu = np.array([[row.sum() / d] for row in x])
            var = np.array([[((row - row.sum() / d) ** 2).sum() / d] for row in x])
            want = (x - mu) / np.sqrt(var + 1e-6) * gain + bias
            assert np.max(np.abs(got - want)) < 1e-6

    def test_finite_for_any_finite_input(self):
        d = 4
        x = Tensor(np.array([[1e30, -1e30, 0.0, 1.0]]))
        out = layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)))
        assert np.all(np.isfinite(out.data))


class TestCrossEntropy:
    def test_confident_correct_goes_to_zero(self):
        logits = np.full((3, 5), -100.0)
        for i, t in enumerate([1, 2, 0]):
            logits[i, t] = 100.0
        loss = cross_entropy(Tensor(logits), [1, 2, 0], pad_id=-1)
        assert loss.item() < 1e-6

    def test_uniform_is_log_vocab(self):
        V = 11
        loss = cross_entropy(Tensor(np.zeros((4, V))), [0, 3, 7, 10], pad_id=-1)
        np.testing.assert_allclose(loss.item(), np.log(V), rtol=1e-6)

    def test_against_logsumexp_oracle(self):
        with use_dtype("float64"):
            rng = np.random.default_rng(17)
            logits = rng.normal(size=(4, 11)) * 5
            targets = [3, 0, 10, 5]
            got = cross_entropy(Tensor(logits), targets, pad_id=-1).item()
            want = 0.0
            for row, t in zip(logits, targets):
                lse = np.log(np.exp(row - row.max()).sum()) + row.max()
                want += lse - row[t]
            want /= 4
            assert abs(got - want) < 1e-6

    def test_pad_positions_ignored(self):
        logits = np.zeros((4, 3))
        full = cross_entropy(Tensor(logits), [0, 1, 2, 0], pad_id=9).item()
        padded = cross_entropy(Tensor(logits), [0, 1, 9, 9], pad_id=9).item()
        np.testing.assert_allclose(full, padded, rtol=1e-6)

    def test_all_pad_raises(self):
        with pytest.raises(ValueError, match="pad"):
            cross_entropy(Tensor(np.zeros((2, 3))), [7, 7], pad_id=7)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic_gradient(self):
        with use_dtype("float64"):
            x = Tensor([[1.0], [2.0], [3.0]], requires_grad=True)
            loss = sum_(matmul(x.T, x))
            backward(loss)
            np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x + x)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.ones(4), requires_grad=True)
        backward(sum_(x + x))
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0))

    def test_shared_output_gradients_are_independent(self):
        # two parents receiving the same upstream array must not alias
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        s = a + b
        backward(sum_(s))
        a.grad += 5.0
        np.testing.assert_array_equal(b.grad, np.ones(3))

    def test_deterministic_forward(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(16, 16))
        w = rng.normal(size=(16, 16))
        one = matmul(softmax(Tensor(x)), Tensor(w)).data
        two = matmul(softmax(Tensor(x)), Tensor(w)).data
        assert np.array_equal(one, two)


class TestStructuralOps:
    def test_take_scatter_add(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = take(table, np.array([1, 1, 3]))
        backward(sum_(out))
        want = np.zeros((4, 3))
        want[1] = 2.0
        want[3] = 1.0
        np.testing.assert_array_equal(table.grad, want)

    def test_concat_roundtrip_grads(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        out = concat([a, b], axis=0)
        backward(sum_(out * out))
        np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((1, 3), 2.0))

    def test_max_routes_to_first_argmax(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        backward(sum_(max_(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_mean_gradient(self):
        x = Tensor(np.ones((2, 5)), requires_grad=True)
        backward(mean(x))
        np.testing.assert_allclose(x.grad, np.full((2, 5), 0.1))


class TestFiniteDifferenceCheck:
    def test_quadratic_form_is_exact(self):
        with use_dtype("float64"):
            rng = np.random.default_rng(29)
            A = Tensor(rng.normal(size=(6, 6)))
            x = Tensor(rng.normal(size=(6, 1)), requires_grad=True)
            params = {"x": x}
            err = finite_difference_check(lambda: sum_(matmul(x.T, matmul(A, x))), params)
            assert err < 1e-8

    def test_catches_wrong_gradient(self):
        with use_dtype("float64"):
            x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)

            def bad_op(a):
                out = a.data * 2.0

                def bw(g):
                    return (g * 3.0,)  # wrong: claims d(2a)/da = 3

                return Tensor._from_op(out, "bad", (a,), bw)

            err = finite_difference_check(lambda: sum_(bad_op(x)), {"x": x})
            assert err > 0.1

    def test_composite_ops(self):
        with use_dtype("float64"):
            rng = np.random.default_rng(31)
            w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
            g = Tensor(rng.normal(size=4), requires_grad=True)
            b = Tensor(rng.normal(size=4), requires_grad=True)
            x = Tensor(rng.normal(size=(3, 5)))
            targets = [0, 3, 1]

            def f():
                h = layer_norm(matmul(x, w), g, b)
                return cross_entropy(softmax(h) + h, targets, pad_id=-1)

            err = finite_difference_check(f, {"w": w, "g": g, "b": b}, h=1e-5)
            assert err < 1e-6


class TestPropertyInvariants:
    def test_op_gradients_pass_fd_on_three_seeds(self):
        with use_dtype("float64"):
            for seed in (0, 1, 2):
                rng = np.random.default_rng(seed)
                w1 = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
                w2 = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
                gn = Tensor(rng.normal(size=8), requires_grad=True)
                bs = Tensor(rng.normal(size=8), requires_grad=True)
                x = Tensor(rng.normal(size=(4, 6)))
                t = [1, 4, 0, 2]

                def f():
                    h = relu(matmul(x, w1))
                    h = layer_norm(h, gn, bs)
                    z = matmul(softmax(h, axis=-1) + h, w2)
                    pooled = max_(z, axis=0, keepdims=True)
                    return cross_entropy(concat([z, pooled], axis=0), t + [3], pad_id=-1)

                err = finite_difference_check(
                    f, {"w1": w1, "w2": w2, "gn": gn, "bs": bs}, h=1e-5, seed=seed
                )
                assert err < 1e-3, f"seed {seed}: {err}"
