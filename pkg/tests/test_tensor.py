import numpy as np
import pytest

from ladlab import tensor as T
from ladlab.errors import NumericalError, UsageError


def scalar_loss(t):
    return T.sum(T.square(t))


class TestForwardOps:
    def test_matmul_hand_example(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = T.Tensor([[1.0], [1.0]])
        out = T.matmul(a, b)
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_relu_definition(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_softmax_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = T.softmax(T.Tensor(rng.normal(size=(5, 7))))
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(UsageError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
        with pytest.raises(UsageError, match="add"):
            T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))

    def test_nonfinite_output_raises(self):
        with pytest.raises(NumericalError, match="log"):
            T.log(T.Tensor([0.0]))
        with pytest.raises(NumericalError, match="exp"):
            T.exp(T.Tensor([1e4]))

    def test_dispatcher_matches_direct_call(self):
        a = T.Tensor([[1.0, -2.0]])
        via_dispatch = T.forward("relu", [a])
        assert np.array_equal(via_dispatch.data, [[1.0, 0.0]])
        cat = T.forward("concat", [T.Tensor([1.0]), T.Tensor([2.0])], axis=0)
        assert np.array_equal(cat.data, [1.0, 2.0])
        with pytest.raises(UsageError, match="unknown op"):
            T.forward("conv2d", [a])

    def test_slice_and_reshape_round_trip(self):
        t = T.Tensor(np.arange(12.0).reshape(3, 4))
        row = t[1]
        assert np.array_equal(row.data, [4.0, 5.0, 6.0, 7.0])
        back = T.reshape(T.reshape(t, (12,)), (3, 4))
        assert np.array_equal(back.data, t.data)

    def test_broadcast_add_bias_row(self):
        x = T.Tensor(np.ones((2, 3)))
        b = T.Tensor([1.0, 2.0, 3.0])
        out = T.add(x, b)
        assert np.array_equal(out.data, [[2.0, 3.0, 4.0]] * 2)


class TestBackward:
    def test_sum_of_squares(self):
        x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with T.Graph() as g:
            loss = T.sum(T.square(x))
        T.backward(g, loss)
        assert np.allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-15)

    def test_product_rule(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        y = T.Tensor([3.0, 4.0], requires_grad=True)
        with T.Graph() as g:
            loss = T.sum(T.mul(x, y))
        T.backward(g, loss)
        assert np.allclose(x.grad, [3.0, 4.0], atol=1e-15)
        assert np.allclose(y.grad, [1.0, 2.0], atol=1e-15)

    def test_fanout_accumulates(self):
        x = T.Tensor([2.0], requires_grad=True)
        with T.Graph() as g:
            loss = T.sum(T.add(T.mul(x, x), x))  # x^2 + x -> grad 2x + 1
        T.backward(g, loss)
        assert np.allclose(x.grad, [5.0], atol=1e-15)

    def test_backward_requires_scalar(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Graph() as g:
            out = T.square(x)
        with pytest.raises(UsageError, match="scalar"):
            T.backward(g, out)

    def test_backward_outside_graph_rejected(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.Graph() as g:
            _ = T.square(x)
        stray = T.Tensor([1.0], requires_grad=True)
        with pytest.raises(UsageError, match="not part of the given graph"):
            T.backward(g, stray)

    def test_two_layer_net_matches_finite_difference(self):
        rng = np.random.default_rng(7)
        w1 = rng.normal(scale=0.7, size=(4, 5))
        w2 = rng.normal(scale=0.7, size=(5, 3))
        x0 = rng.normal(scale=1.0, size=(2, 4))

        def net(xt):
            h = T.relu(T.add(T.matmul(xt, T.Tensor(w1)), T.Tensor(0.3 * np.ones(5))))
            out = T.matmul(h, T.Tensor(w2))
            return T.mean(T.square(out))

        err = T.finite_difference_check(net, T.Tensor(x0), h=1e-5)
        assert err < 1e-4

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            v = rng.normal(size=6)
            a, b = rng.uniform(0.5, 2.0, size=2)

            def f_loss(t):
                return T.sum(T.square(t))

            def g_loss(t):
                return T.sum(T.mul(t, T.Tensor(np.arange(1.0, 7.0))))

            grads = []
            for fn in (f_loss, g_loss):
                x = T.Tensor(v, requires_grad=True)
                with T.Graph() as g:
                    loss = fn(x)
                T.backward(g, loss)
                grads.append(x.grad.copy())

            x = T.Tensor(v, requires_grad=True)
            with T.Graph() as g:
                combo = T.add(T.mul(T.Tensor(a), f_loss(x)), T.mul(T.Tensor(b), g_loss(x)))
            T.backward(g, combo)
            assert np.allclose(x.grad, a * grads[0] + b * grads[1], atol=1e-10)

    def test_slice_concat_gradients(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with T.Graph() as g:
            top = x[0:1]
            cat = T.concat([top, top], axis=0)
            loss = T.sum(cat)
        T.backward(g, loss)
        assert np.array_equal(x.grad, [[2.0, 2.0, 2.0], [0.0, 0.0, 0.0]])

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            with T.Graph() as g:
                out = T.softmax(T.matmul(T.sigmoid(x), w))
                loss = T.mean(T.square(out))
            T.backward(g, loss)
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first = run()
        second = run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


class TestFiniteDifference:
    def test_quadratic_is_nearly_exact(self):
        err = T.finite_difference_check(lambda t: T.sum(T.square(t)), T.Tensor([3.0]), h=1e-5)
        assert err < 1e-6

    def test_relu_kink_is_flagged(self):
        err = T.finite_difference_check(lambda t: T.sum(T.relu(t)), T.Tensor([0.0]), h=1e-5)
        assert err > 1.0  # large disagreement marks the non-differentiable point

    def test_rejects_bad_h(self):
        with pytest.raises(UsageError):
            T.finite_difference_check(scalar_loss, T.Tensor([1.0]), h=0.0)

    def test_mlp_cross_entropy_style_graph(self):
        rng = np.random.default_rng(19)
        w1 = rng.normal(scale=0.6, size=(3, 8))
        w2 = rng.normal(scale=0.6, size=(8, 4))
        onehot = np.zeros((2, 4))
        onehot[[0, 1], [1, 3]] = 1.0

        def f(xt):
            h = T.relu(T.add(T.matmul(xt, T.Tensor(w1)), T.Tensor(0.25 * np.ones(8))))
            z = T.matmul(h, T.Tensor(w2))
            m = T.Tensor(z.data.max(axis=1, keepdims=True))
            lse = T.add(T.reshape(m, (2,)), T.log(T.sum(T.exp(T.sub(z, m)), axis=1)))
            picked = T.sum(T.mul(z, T.Tensor(onehot)), axis=1)
            return T.mean(T.sub(lse, picked))

        err = T.finite_difference_check(f, T.Tensor(rng.normal(size=(2, 3))), h=1e-5)
        assert err < 1e-4
