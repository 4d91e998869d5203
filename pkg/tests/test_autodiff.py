import numpy as np
import pytest

from conftest import central_difference, relative_error
from polarmil import autodiff as ad
from polarmil.autodiff import Tensor


def check_op(build, x0, h=1e-5, tol=1e-4):
    """Finite-difference check of a scalar-valued graph w.r.t. its input."""
    t = Tensor(x0, requires_grad=True)
    out = build(t)
    out.backward()
    fd = central_difference(lambda x: float(build(Tensor(x)).values), x0, h=h)
    assert relative_error(t.grad, fd) <= tol


class TestBasics:
    def test_tensor_fields(self):
        t = Tensor([[1.0, 2.0]], requires_grad=True)
        assert t.shape == (1, 2)
        assert t.size == 2
        assert t.grad is None
        t.zero_grad()
        assert np.all(t.grad == 0.0)

    def test_backward_requires_scalar(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(RuntimeError, match="scalar"):
            (t * 2.0).backward()

    def test_backward_without_recorded_graph(self):
        with pytest.raises(RuntimeError, match="recorded"):
            Tensor(3.0).backward()

    def test_identity_sum_gradient_all_ones(self):
        t = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        t.sum().backward()
        assert np.array_equal(t.grad, np.ones((3, 4)))

    def test_grad_accumulates_across_uses(self):
        t = Tensor(2.0, requires_grad=True)
        out = t * 3.0 + t * t
        out.backward()
        assert t.grad == pytest.approx(3.0 + 2 * 2.0)

    def test_zero_grad_resets(self):
        t = Tensor(2.0, requires_grad=True)
        (t * t).backward()
        assert t.grad != 0
        t.zero_grad()
        assert t.grad == 0.0

    def test_no_grad_suppresses_tape(self):
        t = Tensor(1.0, requires_grad=True)
        with ad.no_grad():
            out = t * 2.0
        assert not out.requires_grad

    def test_values_forced_float64(self):
        assert Tensor(np.array([1, 2], dtype=np.int32)).values.dtype == np.float64


class TestElementwiseGradients:
    def test_arithmetic(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.5, 1.5, (3, 4))
        check_op(lambda t: ((t * 2.0 + 1.0) / (t + 3.0) - t).sum(), x)

    def test_broadcasting(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.5, 1.5, (3, 4))
        col = Tensor(rng.uniform(0.5, 1.5, (3, 1)), requires_grad=True)
        row = np.array([1.0, 2.0, 3.0, 4.0])
        out = ((Tensor(x) * col + row) ** 2.0).sum()
        out.backward()
        fd = central_difference(
            lambda c: float((((Tensor(x) * Tensor(c)) + row) ** 2.0).values.sum()), col.values
        )
        assert relative_error(col.grad, fd) <= 1e-4

    def test_exp_log_pow(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.2, 0.8, 6)
        check_op(lambda t: (t.exp() + (t * 0.9).log() + t**2.5).sum(), x)

    def test_relu_sigmoid(self):
        x = np.array([-1.5, -0.1, 0.3, 2.0])
        check_op(lambda t: (t.relu() + t.sigmoid() * 2.0).sum(), x)

    def test_clip_blocks_gradient_outside(self):
        t = Tensor(np.array([-0.5, 0.5, 1.5]), requires_grad=True)
        t.clip(0.0, 1.0).sum().backward()
        assert t.grad.tolist() == [0.0, 1.0, 0.0]

    def test_div_gradient_wrt_denominator(self):
        x = np.array([1.0, 2.0, 4.0])
        check_op(lambda t: (Tensor(np.ones(3)) / t).sum(), x)


class TestShapeOps:
    def test_sum_axis(self):
        x = np.random.default_rng(3).uniform(0, 1, (4, 5))
        check_op(lambda t: (t.sum(axis=0) ** 2.0).sum(), x)
        check_op(lambda t: (t.sum(axis=1, keepdims=True) * 3.0).sum(), x)

    def test_reshape_transpose(self):
        x = np.random.default_rng(4).uniform(0, 1, (2, 6))
        check_op(lambda t: (t.reshape(3, 4).transpose((1, 0)) ** 2.0).sum(), x)

    def test_getitem_slice_and_index(self):
        x = np.random.default_rng(5).uniform(0, 1, (4, 4))
        check_op(lambda t: (t[1:, :-1] ** 2.0).sum(), x)
        check_op(lambda t: (t[2] * 3.0).sum(), x)

    def test_concat(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.uniform(0, 1, (2, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0, 1, (2, 2)), requires_grad=True)
        ad.concat([a, b], axis=1).sum().backward()
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, np.ones((2, 2)))

    def test_mean(self):
        x = np.random.default_rng(7).uniform(0, 1, 10)
        check_op(lambda t: ad.mean(t) * 5.0, x)


class TestLinearOps:
    def test_matmul(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(0, 1, (3, 4))
        b = Tensor(rng.uniform(0, 1, (4, 2)), requires_grad=True)
        out = ad.matmul(Tensor(a), b)
        (out**2.0).sum().backward()
        fd = central_difference(lambda w: float(((a @ w) ** 2).sum()), b.values)
        assert relative_error(b.grad, fd) <= 1e-4

    def test_take_flat(self):
        x = np.random.default_rng(9).uniform(0, 1, (3, 3))
        idx = np.array([0, 4, 4, 8])
        t = Tensor(x, requires_grad=True)
        ad.take_flat(t, idx).sum().backward()
        want = np.zeros(9)
        np.add.at(want, idx, 1.0)
        assert np.array_equal(t.grad.ravel(), want)

    def test_gather_linear_matches_dense(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(0, 1, (4, 4))
        idx = rng.integers(0, 16, (6, 4))
        wgt = rng.uniform(0, 1, (6, 4))
        t = Tensor(x, requires_grad=True)
        out = ad.gather_linear(t, idx, wgt)
        assert out.values == pytest.approx((x.ravel()[idx] * wgt).sum(axis=1))
        (out**2.0).sum().backward()
        fd = central_difference(
            lambda v: float((((v.ravel()[idx] * wgt).sum(axis=1)) ** 2).sum()), x
        )
        assert relative_error(t.grad, fd) <= 1e-4


class TestConvStack:
    def test_conv3x3_matches_hand_computation(self):
        # 4x4 single-channel input, one 3x3 kernel, zero padding
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0] = [[0, 1, 0], [1, -4, 1], [0, 1, 0]]  # laplacian stencil
        out = ad.conv3x3(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        # interior pixel (1,1): up+left+right+down - 4*centre
        want_11 = x[0, 0, 0, 1] + x[0, 0, 1, 0] + x[0, 0, 1, 2] + x[0, 0, 2, 1] - 4 * x[0, 0, 1, 1]
        assert out.values[0, 0, 1, 1] == want_11
        # corner (0,0): missing neighbours read as zero
        want_00 = x[0, 0, 0, 1] + x[0, 0, 1, 0] - 4 * x[0, 0, 0, 0]
        assert out.values[0, 0, 0, 0] == want_00

    def test_conv3x3_gradients(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 1, (2, 2, 5, 5))
        w = Tensor(rng.uniform(-0.5, 0.5, (3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-0.1, 0.1, 3), requires_grad=True)
        t = Tensor(x, requires_grad=True)
        (ad.conv3x3(t, w, b) ** 2.0).sum().backward()

        def forward(xv, wv, bv):
            out = ad.conv3x3(Tensor(xv), Tensor(wv), Tensor(bv))
            return float((out.values**2).sum())

        assert relative_error(t.grad, central_difference(lambda v: forward(v, w.values, b.values), x)) <= 1e-4
        assert relative_error(w.grad, central_difference(lambda v: forward(x, v, b.values), w.values)) <= 1e-4
        assert relative_error(b.grad, central_difference(lambda v: forward(x, w.values, v), b.values)) <= 1e-4

    def test_conv1x1_gradients(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(0, 1, (2, 3, 4, 4))
        w = Tensor(rng.uniform(-0.5, 0.5, (2, 3)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        t = Tensor(x, requires_grad=True)
        (ad.conv1x1(t, w, b) ** 2.0).sum().backward()

        def forward(xv, wv):
            return float((ad.conv1x1(Tensor(xv), Tensor(wv), Tensor(np.zeros(2))).values ** 2).sum())

        assert relative_error(t.grad, central_difference(lambda v: forward(v, w.values), x)) <= 1e-4
        assert relative_error(w.grad, central_difference(lambda v: forward(x, v), w.values)) <= 1e-4

    def test_pool_and_upsample(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(0, 1, (1, 2, 4, 4))
        check_op(lambda t: (ad.avgpool2(t) ** 2.0).sum(), x)
        check_op(lambda t: (ad.upsample2(t) ** 2.0).sum(), x)
        up = ad.upsample2(Tensor(x))
        assert up.shape == (1, 2, 8, 8)
        assert np.array_equal(up.values[0, 0, :2, :2], np.full((2, 2), x[0, 0, 0, 0]))
        down = ad.avgpool2(Tensor(x))
        assert down.values[0, 0, 0, 0] == pytest.approx(x[0, 0, :2, :2].mean())
        with pytest.raises(ValueError):
            ad.avgpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_quasimax_graph_matches_analytic_gradient():
    # same quantity via tensor ops and via the closed-form kernel
    from polarmil.smoothmax import weighted_quasimax

    rng = np.random.default_rng(14)
    p = rng.uniform(0.1, 0.9, 5)
    w = np.array([1.0, 0.9, 0.7, 0.5, 0.4])
    alpha = 3.0
    t = Tensor(p, requires_grad=True)
    z = t * w
    m = float((w * p).max())
    lse = ad.log(((z - m) * alpha).exp().sum()) * (1.0 / alpha) + m
    (lse - np.log(5.0) / alpha).backward()
    _, analytic = weighted_quasimax(p, w, alpha)
    assert relative_error(t.grad, analytic) <= 1e-10
