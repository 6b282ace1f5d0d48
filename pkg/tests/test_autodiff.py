"""Finite-difference and contract tests for the reverse-mode engine."""

import numpy as np
import pytest

from subseg import autodiff as ad

TOL = 1e-4    # relative error threshold, central differences with eps=1e-5
N_SEEDS = 100  # random instances per op


def check(f, x0, tol=TOL):
    err = ad.grad_check(f, ad.Tensor(np.asarray(x0, dtype=np.float64)))
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"


class TestElementwise:
    def test_add_sub_mul_div(self):
        rng = np.random.default_rng(7)
        for _ in range(N_SEEDS):
            a0 = rng.normal(size=(3, 4))
            b = ad.Tensor(rng.normal(size=(3, 4)))
            check(lambda t: ad.tsum(ad.add(t, b)), a0)
            check(lambda t: ad.tsum(ad.sub(b, t)), a0)
            check(lambda t: ad.tsum(ad.mul(t, b)), a0)
            # keep denominators away from zero
            check(lambda t: ad.tsum(ad.div(b, ad.add(ad.mul(t, t), 1.0))), a0)

    def test_scalar_operand_broadcast(self):
        rng = np.random.default_rng(8)
        b = ad.Tensor(rng.normal(size=(4, 4)))
        for _ in range(N_SEEDS):
            s0 = rng.normal(size=())
            check(lambda t: ad.tsum(ad.mul(t, b)), s0)
            check(lambda t: ad.tsum(ad.add(b, t)), s0)

    def test_scalar_mul(self):
        rng = np.random.default_rng(9)
        for _ in range(N_SEEDS):
            check(lambda t: ad.tsum(ad.scalar_mul(t, -2.5)), rng.normal(size=(5,)))

    def test_shape_mismatch_raises(self):
        a = ad.Tensor(np.zeros((2, 3)))
        b = ad.Tensor(np.zeros((3, 2)))
        with pytest.raises(ad.ShapeMismatch):
            ad.add(a, b)
        with pytest.raises(ad.ShapeMismatch):
            ad.matmul(a, a)
        # error message names the op and both shapes
        try:
            ad.add(a, b)
        except ad.ShapeMismatch as e:
            assert "add" in str(e) and "(2, 3)" in str(e) and "(3, 2)" in str(e)

    def test_python_scalars_lift(self):
        x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with ad.Tape():
            y = ad.tsum(2.0 * x + 1.0)
            ad.backward(y)
        assert np.allclose(x.grad, [2.0, 2.0])


class TestLinalg:
    def test_matmul_both_sides(self):
        rng = np.random.default_rng(11)
        for _ in range(N_SEEDS):
            b = ad.Tensor(rng.normal(size=(4, 3)))
            check(lambda t: ad.tsum(ad.matmul(t, b)), rng.normal(size=(5, 4)))
            a = ad.Tensor(rng.normal(size=(5, 4)))
            check(lambda t: ad.tsum(ad.matmul(a, t)), rng.normal(size=(4, 3)))

    def test_matmul_vector(self):
        rng = np.random.default_rng(12)
        for _ in range(N_SEEDS):
            a = ad.Tensor(rng.normal(size=(3, 4)))
            check(lambda t: ad.tsum(ad.matmul(a, t)), rng.normal(size=(4,)))

    def test_dot(self):
        rng = np.random.default_rng(13)
        for _ in range(N_SEEDS):
            b = ad.Tensor(rng.normal(size=(6,)))
            check(lambda t: ad.dot(t, b), rng.normal(size=(6,)))

    def test_dot_value(self):
        a = ad.Tensor([1.0, 2.0, 3.0])
        b = ad.Tensor([4.0, 5.0, 6.0])
        assert ad.dot(a, b).item() == 32.0

    def test_dot_self_gradient(self):
        x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with ad.Tape():
            ad.backward(ad.dot(x, x))
        assert np.array_equal(x.grad, [2.0, 4.0])


class TestActivations:
    def test_relu_value(self):
        y = ad.relu(ad.Tensor([-1.0, 2.0]))
        assert np.array_equal(y.data, [0.0, 2.0])

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(21)
        for _ in range(N_SEEDS):
            x0 = rng.normal(size=(4, 4))
            x0 = np.where(np.abs(x0) < 0.05, 0.2, x0)  # keep FD off the kink
            check(lambda t: ad.tsum(ad.relu(t)), x0)

    def test_relu_subgradient_zero_at_zero(self):
        x = ad.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        with ad.Tape():
            ad.backward(ad.tsum(ad.relu(x)))
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_leaky_relu(self):
        rng = np.random.default_rng(22)
        for _ in range(N_SEEDS):
            x0 = rng.normal(size=(4, 4))
            x0 = np.where(np.abs(x0) < 0.05, -0.2, x0)
            check(lambda t: ad.tsum(ad.leaky_relu(t, 0.1)), x0)

    def test_log_exp(self):
        rng = np.random.default_rng(23)
        for _ in range(N_SEEDS):
            check(lambda t: ad.tsum(ad.log(t)), rng.uniform(0.5, 3.0, size=(3, 3)))
            check(lambda t: ad.tsum(ad.exp(t)), rng.normal(size=(3, 3)))

    def test_softmax_value_symmetric(self):
        s = ad.softmax(ad.Tensor([0.0, 0.0]), axis=0)
        assert np.array_equal(s.data, [0.5, 0.5])

    def test_softmax_grad(self):
        rng = np.random.default_rng(24)
        for _ in range(N_SEEDS):
            c = ad.Tensor(rng.normal(size=(4, 6)))
            check(lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=0), c)),
                  rng.normal(size=(4, 6)) * 3.0)

    def test_softmax_normalization_invariants(self):
        rng = np.random.default_rng(25)
        s = ad.softmax(ad.Tensor(rng.normal(size=(5, 7)) * 50.0), axis=0)
        assert np.all(np.abs(s.data.sum(axis=0) - 1.0) < 1e-12)
        assert np.all(s.data >= 0.0) and np.all(s.data <= 1.0)

    def test_softmax_large_logits_stable(self):
        s = ad.softmax(ad.Tensor(np.array([[1000.0], [1001.0]])), axis=0)
        assert np.all(np.isfinite(s.data))
        assert abs(s.data.sum() - 1.0) < 1e-12


class TestNormalize:
    def test_l2_normalize_grad(self):
        rng = np.random.default_rng(31)
        for _ in range(N_SEEDS):
            c = ad.Tensor(rng.normal(size=(4, 5)))
            x0 = rng.normal(size=(4, 5))
            x0 += np.sign(x0) * 0.5  # keep norms well away from zero
            check(lambda t: ad.tsum(ad.mul(ad.l2_normalize(t, axis=0), c)), x0)

    def test_unit_norm_output(self):
        rng = np.random.default_rng(32)
        x = ad.Tensor(rng.normal(size=(8, 10)))
        y = ad.l2_normalize(x, axis=0)
        assert np.all(np.abs(np.linalg.norm(y.data, axis=0) - 1.0) < 1e-12)

    def test_zero_vector_maps_to_zero_with_zero_grad(self):
        x = ad.Tensor(np.zeros((3, 2)), requires_grad=True)
        with ad.Tape():
            y = ad.l2_normalize(x, axis=0)
            ad.backward(ad.tsum(y))
        assert np.array_equal(y.data, np.zeros((3, 2)))
        assert np.array_equal(x.grad, np.zeros((3, 2)))


class TestReductionsReshape:
    def test_sum_mean(self):
        rng = np.random.default_rng(41)
        for _ in range(N_SEEDS):
            check(lambda t: ad.tsum(t), rng.normal(size=(3, 5)))
            check(lambda t: ad.tmean(t), rng.normal(size=(3, 5)))

    def test_mean_empty_raises(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.tmean(ad.Tensor(np.zeros((0,))))

    def test_reshape(self):
        rng = np.random.default_rng(42)
        for _ in range(N_SEEDS):
            c = ad.Tensor(rng.normal(size=(12,)))
            check(lambda t: ad.tsum(ad.mul(ad.reshape(t, (12,)), c)),
                  rng.normal(size=(3, 4)))
        with pytest.raises(ad.ShapeMismatch):
            ad.reshape(ad.Tensor(np.zeros((3, 4))), (5,))

    def test_concat(self):
        rng = np.random.default_rng(43)
        for _ in range(N_SEEDS):
            b = ad.Tensor(rng.normal(size=(2, 3)))
            c = ad.Tensor(rng.normal(size=(5, 3)))
            check(lambda t: ad.tsum(ad.mul(ad.concat([t, b], axis=0), c)),
                  rng.normal(size=(3, 3)))

    def test_concat_axis1_grad_routing(self):
        a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        b = ad.Tensor(np.ones((2, 3)), requires_grad=True)
        w = ad.Tensor(np.arange(10.0).reshape(2, 5))
        with ad.Tape():
            ad.backward(ad.tsum(ad.mul(ad.concat([a, b], axis=1), w)))
        assert np.array_equal(a.grad, [[0.0, 1.0], [5.0, 6.0]])
        assert np.array_equal(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])

    def test_gather_repeated_indices_accumulate(self):
        x = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        with ad.Tape():
            y = ad.gather(x, 0, [1, 1, 2])
            ad.backward(ad.tsum(y))
        assert np.array_equal(y.data, [[2.0, 3.0], [2.0, 3.0], [4.0, 5.0]])
        assert np.array_equal(x.grad, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])

    def test_gather_grad(self):
        rng = np.random.default_rng(44)
        for _ in range(N_SEEDS):
            c = ad.Tensor(rng.normal(size=(4, 5)))
            idx = rng.integers(0, 6, size=4).tolist()
            check(lambda t: ad.tsum(ad.mul(ad.gather(t, 0, idx), c)),
                  rng.normal(size=(6, 5)))

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather(ad.Tensor(np.zeros((3, 2))), 0, [0, 3])


class TestConv:
    def test_forward_ones_oracle(self):
        # all-ones 3x3 image, all-ones 3x3 kernel, zero padding 1:
        # corners see 4 taps, edges 6, center 9
        x = ad.Tensor(np.ones((1, 1, 3, 3)))
        w = ad.Tensor(np.ones((1, 1, 3, 3)))
        y = ad.conv2d(x, w, padding=1)
        expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
        assert np.array_equal(y.data[0, 0], expected)

    def test_stride2_shape(self):
        x = ad.Tensor(np.zeros((2, 3, 8, 8)))
        w = ad.Tensor(np.zeros((5, 3, 3, 3)))
        assert ad.conv2d(x, w, stride=2, padding=1).shape == (2, 5, 4, 4)

    def test_conv_grads_all_arguments(self):
        rng = np.random.default_rng(51)
        for trial in range(N_SEEDS):
            stride, pad = [(1, 0), (1, 1), (2, 1)][trial % 3]
            x0 = rng.normal(size=(1, 2, 4, 4))
            w0 = rng.normal(size=(2, 2, 3, 3))
            b0 = rng.normal(size=(2,))
            xt, wt, bt = ad.Tensor(x0), ad.Tensor(w0), ad.Tensor(b0)
            oh = (4 + 2 * pad - 3) // stride + 1
            c = ad.Tensor(rng.normal(size=(1, 2, oh, oh)))

            def loss_x(t):
                return ad.tsum(ad.mul(ad.conv2d(t, wt, bt, stride=stride, padding=pad), c))

            def loss_w(t):
                return ad.tsum(ad.mul(ad.conv2d(xt, t, bt, stride=stride, padding=pad), c))

            def loss_b(t):
                return ad.tsum(ad.mul(ad.conv2d(xt, wt, t, stride=stride, padding=pad), c))

            check(loss_x, x0)
            check(loss_w, w0)
            check(loss_b, b0)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))),
                      ad.Tensor(np.zeros((3, 1, 3, 3))))


class TestTransposedConv:
    def test_exact_upsampling_shape(self):
        x = ad.Tensor(np.zeros((2, 3, 5, 5)))
        w = ad.Tensor(np.zeros((3, 4, 2, 2)))
        assert ad.conv2d_transpose(x, w).shape == (2, 4, 10, 10)

    def test_single_pixel_spreads_kernel(self):
        x = ad.Tensor(np.array([[[[2.0]]]]))
        w = ad.Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        y = ad.conv2d_transpose(x, w)
        assert np.array_equal(y.data[0, 0], [[0.0, 2.0], [4.0, 6.0]])

    def test_grads_all_arguments(self):
        rng = np.random.default_rng(52)
        for _ in range(N_SEEDS):
            x0 = rng.normal(size=(1, 2, 3, 3))
            w0 = rng.normal(size=(2, 2, 2, 2))
            b0 = rng.normal(size=(2,))
            xt, wt, bt = ad.Tensor(x0), ad.Tensor(w0), ad.Tensor(b0)
            c = ad.Tensor(rng.normal(size=(1, 2, 6, 6)))
            check(lambda t: ad.tsum(ad.mul(ad.conv2d_transpose(t, wt, bt), c)), x0)
            check(lambda t: ad.tsum(ad.mul(ad.conv2d_transpose(xt, t, bt), c)), w0)
            check(lambda t: ad.tsum(ad.mul(ad.conv2d_transpose(xt, wt, t), c)), b0)


class TestTapeSemantics:
    def test_no_tape_no_grad_propagation(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = ad.tsum(ad.mul(x, x))
        assert not y.requires_grad

    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.Tape():
            y = ad.mul(x, x)
            with pytest.raises(ValueError):
                ad.backward(y)

    def test_grad_accumulates_across_reuse(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        with ad.Tape():
            y = ad.tsum(ad.add(ad.mul(x, x), x))  # x^2 + x -> 2x + 1 = 7
            ad.backward(y)
        assert np.allclose(x.grad, [7.0])

    def test_constant_function_zero_grad(self):
        c = ad.Tensor(np.array(4.0))
        err = ad.grad_check(lambda t: ad.tsum(ad.mul(c, c)), ad.Tensor(np.ones(3)))
        assert err == 0.0

    def test_backward_consumes_records(self):
        # the sweep must drop the graph so step memory is freed by refcount,
        # not deferred to the cycle collector
        x = ad.Tensor(np.ones(4), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.tsum(ad.mul(x, x))
            assert len(tape) > 0
            ad.backward(y)
            assert len(tape) == 0
        assert np.allclose(x.grad, 2 * np.ones(4))

    def test_exiting_block_releases_records(self):
        x = ad.Tensor(np.ones(4), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.tsum(ad.mul(x, x))
        assert len(tape) == 0
        with pytest.raises(RuntimeError):
            ad.backward(y)  # graph was released with the block

    def test_chain_grad_value(self):
        # d/dx mean(relu(2x)) at x=[1,-1] -> [1, 0]
        x = ad.Tensor(np.array([1.0, -1.0]), requires_grad=True)
        with ad.Tape():
            ad.backward(ad.tmean(ad.relu(ad.scalar_mul(x, 2.0))))
        assert np.allclose(x.grad, [1.0, 0.0])

    def test_debug_checks_flag_nonfinite(self):
        ad.set_debug_checks(True)
        try:
            with np.errstate(divide="ignore"):
                with pytest.raises(FloatingPointError):
                    ad.log(ad.Tensor([0.0]))
        finally:
            ad.set_debug_checks(False)

    def test_deterministic_bitwise(self):
        def run():
            rng = np.random.default_rng(99)
            x = ad.Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
            w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            with ad.Tape():
                h = ad.relu(ad.conv2d(x, w, padding=1))
                s = ad.softmax(h, axis=1)
                loss = ad.tmean(ad.mul(s, s))
                ad.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert gx1.tobytes() == gx2.tobytes()
        assert gw1.tobytes() == gw2.tobytes()


class TestGradCheckHarness:
    def test_flags_wrong_gradient(self):
        # a deliberately broken op: forward x^2 but gradient claims 3x
        def broken(t):
            out = ad._make("broken", t.data * t.data, (t,),
                           lambda g: (g * 3.0 * t.data,))
            return ad.tsum(out)

        with ad.Tape():
            err = ad.grad_check(broken, ad.Tensor(np.array([1.0, 2.0])))
        assert err > 1e-2
