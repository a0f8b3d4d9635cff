import numpy as np
import pytest

from oracles import naive_conv2d, naive_matmul, naive_resize
from vig_landcover.errors import DimensionError, UsageError
from vig_landcover.gradcheck import grad_check, nudge_from_zero
from vig_landcover.tensor import (
    RunningStats,
    Tensor,
    activation,
    backward,
    batch_norm,
    bilinear_resize,
    build_trace,
    conv2d,
    global_avg_pool,
    make_op,
    matmul,
    pad_replicate,
    relu,
    set_debug,
    sigmoid,
    softmax,
)


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1, 2], [3, 4]])
        assert np.array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)

    def test_zero(self, rng):
        out = matmul(Tensor(np.zeros((2, 3))), Tensor(rng.normal(size=(3, 4))))
        assert out.shape == (2, 4) and not out.data.any()

    def test_against_triple_loop(self):
        expected = naive_matmul([[1, 2], [3, 4]], [[5], [6]])
        assert expected.tolist() == [[17.0], [39.0]]
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        assert np.array_equal(out.data, expected)

    def test_random_shapes(self, rng, f64):
        for _ in range(5):
            m, k, n = rng.integers(1, 6, size=3)
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-12)

    def test_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 1, 5, 5)))
        out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
        assert np.array_equal(out.data, x.data)

    def test_ones(self):
        expected = naive_conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)))
        assert expected.shape == (1, 1, 2, 2) and np.all(expected == 4)
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
        assert np.array_equal(out.data, expected)

    def test_shape_rule(self):
        out = conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1)
        assert out.shape == (1, 1, 2, 2)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), pad=1)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_direct_convolution(self, seed, f64):
        r = np.random.default_rng(seed)
        B, C, O = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
        H, W = r.integers(3, 8, size=2)
        k = int(r.integers(1, 4))
        stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
        x, w, b = r.normal(size=(B, C, H, W)), r.normal(size=(O, C, k, k)), r.normal(size=O)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_bitwise_on_exact_inputs(self, f64):
        # small integers: every partial sum is exact, so any summation order agrees bitwise
        r = np.random.default_rng(7)
        x = r.integers(-4, 5, size=(2, 3, 7, 6)).astype(np.float64)
        w = r.integers(-3, 4, size=(4, 3, 3, 3)).astype(np.float64)
        out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
        assert np.array_equal(out.data, naive_conv2d(x, w, None, 2, 1))

    def test_float32_close(self, rng):
        x = rng.normal(size=(2, 3, 9, 9)).astype(np.float32)
        w = rng.normal(size=(5, 3, 3, 3)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
        ref = naive_conv2d(x, w, None, 2, 1)
        assert np.max(np.abs(out.data - ref) / np.maximum(1.0, np.abs(ref))) < 1e-5


class TestBilinearResize:
    def test_identity_bitwise(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 4)))
        assert np.array_equal(bilinear_resize(x, 5, 4).data, x.data)

    def test_constant_extension(self):
        out = bilinear_resize(Tensor(np.full((1, 1, 1, 1), 2.5)), 4, 7)
        assert out.shape == (1, 1, 4, 7) and np.all(out.data == 2.5)

    def test_2x2_to_3x3(self):
        src = np.array([[0.0, 1.0], [2.0, 3.0]])
        expected = naive_resize(src, 3, 3)
        assert expected[1, 1] == 1.5
        out = bilinear_resize(Tensor(src[None, None]), 3, 3).data[0, 0]
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-7)
        assert out[0, 0] == 0 and out[0, 2] == 1 and out[2, 0] == 2 and out[2, 2] == 3

    @pytest.mark.parametrize("shape", [(4, 5, 9, 13), (3, 3, 1, 8), (6, 2, 20, 120)])
    def test_matches_formula(self, shape, f64):
        H, W, oh, ow = shape
        img = np.random.default_rng(H * W).normal(size=(H, W))
        out = bilinear_resize(Tensor(img[None, None]), oh, ow).data[0, 0]
        np.testing.assert_allclose(out, naive_resize(img, oh, ow), atol=1e-12)

    def test_bad_target(self):
        with pytest.raises(DimensionError):
            bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)


class TestActivations:
    def test_relu(self):
        assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_softmax_equal_logits(self):
        out = softmax(Tensor(np.full((2, 5), 3.0))).data
        np.testing.assert_allclose(out, 0.2, rtol=1e-6)

    def test_softmax_rows(self, rng):
        x = Tensor(rng.normal(scale=20, size=(50, 7)))
        assert np.all(np.abs(softmax(x).data.sum(axis=1) - 1) < 1e-6)

    def test_sigmoid_open_interval(self, rng, f64):
        # float32 rounds to exactly 1.0 beyond ~16.6, so check in 64-bit (open up to |x| ~ 36)
        s = sigmoid(Tensor(rng.uniform(-30, 30, size=1000))).data
        assert np.all((s > 0) & (s < 1))

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            activation("gelu", Tensor([1.0]))


class TestBatchNorm:
    def _params(self, c, gamma=1.0, beta=0.0):
        return Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)), RunningStats.init(c)

    def test_constant_input(self):
        g, b, rs = self._params(3)
        out = batch_norm(Tensor(np.full((4, 3, 2, 2), 7.0)), g, b, rs, training=True)
        assert np.all(np.abs(out.data) <= 1e-3)

    def test_gamma_zero(self, rng):
        g, b, rs = self._params(2, gamma=0.0, beta=0.25)
        out = batch_norm(Tensor(rng.normal(size=(3, 2, 4))), g, b, rs, training=True)
        assert np.all(out.data == 0.25)

    def test_plus_minus_one(self):
        g, b, rs = self._params(1)
        out = batch_norm(Tensor(np.array([[-1.0], [1.0]])), g, b, rs, training=True).data
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        assert abs(expected - 0.999995) < 1e-6
        np.testing.assert_allclose(out[:, 0], [-expected, expected], rtol=1e-6)

    def test_running_stats_momentum(self):
        g, b, rs = self._params(1)
        batch_norm(Tensor(np.array([[1.0], [3.0]])), g, b, rs, training=True)
        np.testing.assert_allclose(rs.mean, [0.2], rtol=1e-6)            # 0.9*0 + 0.1*2
        np.testing.assert_allclose(rs.var, [0.9 + 0.1 * 2.0], rtol=1e-6)  # unbiased var of {1,3} = 2

    def test_eval_uses_running_stats(self):
        g, b, rs = self._params(1)
        rs.mean[:] = 1.0
        rs.var[:] = 4.0
        out = batch_norm(Tensor(np.array([[5.0]])), g, b, rs, training=False).data
        np.testing.assert_allclose(out, [[4.0 / np.sqrt(4.0 + 1e-5)]], rtol=1e-6)

    def test_single_sample_train_rejected(self):
        g, b, rs = self._params(2)
        with pytest.raises(DimensionError):
            batch_norm(Tensor(np.ones((1, 2, 3, 3))), g, b, rs, training=True)


class TestPooling:
    def test_constant(self):
        assert np.all(global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.5))).data == 1.5)

    def test_mean(self):
        out = global_avg_pool(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])))
        assert out.shape == (1, 1) and out.data[0, 0] == 4.0


class TestBackward:
    def test_sum(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        (x ** 2).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_relu_linear_finite_differences_32bit(self):
        r = np.random.default_rng(3)
        x = Tensor(nudge_from_zero(r.normal(size=(4, 3)), 0.05), requires_grad=True)
        w = Tensor(r.normal(size=(3, 5)), requires_grad=True)
        # keep pre-activations away from the relu kink for the 1e-3 step
        while np.min(np.abs(x.data @ w.data)) < 0.05:
            w.data[...] = r.normal(size=(3, 5))
        report = grad_check(lambda a, b: relu(a @ b).sum(), [x, w], tol=1e-3)
        assert report.passed, report

    def test_fan_out_accumulates(self):
        x = Tensor([2.0, -1.0], requires_grad=True)
        (x * x + x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        assert x.grad.tolist() == [2.0, 2.0]

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(x * 2.0)

    def test_trace_is_topological(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        h = relu(x @ w)
        loss = (h * h).sum() + h.sum()
        trace = build_trace(loss)
        pos = trace.ids()
        for node in trace.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]
        assert len(pos) == len(trace.nodes)   # each node once


class TestGradCheck:
    def test_quadratic_form(self, f64):
        r = np.random.default_rng(0)
        A = r.normal(size=(6, 6))
        x = Tensor(r.normal(size=(6, 1)), requires_grad=True)
        At = Tensor(A)
        report = grad_check(lambda v: (v.T @ At @ v).sum(), x, tol=1e-6)
        assert report.passed and report.max_rel_error < 1e-6
        # closed form gradient (A + A^T) x
        x.zero_grad()
        (x.T @ At @ x).sum().backward()
        np.testing.assert_allclose(x.grad, (A + A.T) @ x.data, rtol=1e-12)

    def test_doubled_gradient_fails(self, f64):
        def doubled_square(t):
            return make_op(t.data ** 2, (t,), lambda g: (g * 4 * t.data,), "bad_square")

        x = Tensor(np.array([3.0, -2.0, 1.5]), requires_grad=True)
        report = grad_check(lambda v: doubled_square(v).sum(), x, tol=1e-4)
        assert not report.passed
        assert abs(report.max_rel_error - 0.5) < 1e-6

    def test_non_scalar_rejected(self, f64):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            grad_check(lambda v: v * 2.0, x)


def test_ops_are_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    runs = [conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data for _ in range(3)]
    assert all(np.array_equal(runs[0], r) for r in runs[1:])
    runs = [bilinear_resize(Tensor(x), 13, 5).data for _ in range(3)]
    assert all(np.array_equal(runs[0], r) for r in runs[1:])


def test_pad_replicate_values():
    x = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
    out = pad_replicate(x, 1, 1).data[0, 0]
    assert out.tolist() == [[0, 1, 2, 2], [3, 4, 5, 5], [3, 4, 5, 5]]


def test_debug_mode_flags_non_finite():
    set_debug(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            Tensor([1e30]) * Tensor([1e30])
    finally:
        set_debug(False)


def test_relu_propagates_nan():
    out = relu(Tensor([np.nan, -1.0, 2.0])).data
    assert np.isnan(out[0]) and out[1:].tolist() == [0.0, 2.0]
