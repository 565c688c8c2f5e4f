import numpy as np
import pytest
from numpy.testing import assert_allclose

from hvqc import autodiff as ad
from hvqc.autodiff import Adam, Var, grad_check


def _fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        c = it.multi_index
        old = x[c]
        x[c] = old + h
        fp = f()
        x[c] = old - h
        fm = f()
        x[c] = old
        g[c] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def _check_op(build, x, rtol=1e-6, atol=1e-8):
    """build(Var) -> Var; compares reverse-mode grad of sum(output) to FD."""
    v = Var(x.copy())
    out = ad.sumv(build(v))
    out.backward()
    got = v.grad
    want = _fd_grad(lambda: float(np.sum(build(Var(v.data)).data)), v.data)
    assert_allclose(got, want, rtol=rtol, atol=atol)


class TestElementwise:
    def test_add_mul_div_pow(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4)) + 3.0
        _check_op(lambda v: (v * 2.0 + 1.0) / (v + 5.0), x)
        _check_op(lambda v: v**3, x)
        _check_op(lambda v: 2.0 / v, x)

    def test_exp_log(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.5, 2.0, size=(5,))
        _check_op(lambda v: ad.exp(v), x)
        _check_op(lambda v: ad.log(v), x)

    def test_erf(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(7,))
        _check_op(lambda v: ad.erf(v), x)

    def test_relu_softplus(self):
        x = np.array([-2.0, -0.5, 0.3, 1.7])
        _check_op(lambda v: ad.relu(v), x)
        _check_op(lambda v: ad.softplus(v), x)

    def test_softplus_stable_at_large_inputs(self):
        v = Var(np.array([800.0, -800.0]))
        out = ad.softplus(v)
        assert np.all(np.isfinite(out.data))
        assert_allclose(out.data[0], 800.0)
        assert_allclose(out.data[1], 0.0, atol=1e-300)

    def test_clamp_min(self):
        x = np.array([-1.0, 0.5, 2.0])
        v = Var(x)
        out = ad.sumv(ad.clamp_min(v, 0.4) * 3.0)
        out.backward()
        assert_allclose(ad.clamp_min(Var(x), 0.4).data, [0.4, 0.5, 2.0])
        assert_allclose(v.grad, [0.0, 3.0, 3.0])

    def test_stop_grad_blocks(self):
        v = Var(np.array([2.0]))
        out = ad.sumv(v * ad.stop_grad(v))
        out.backward()
        assert_allclose(v.grad, [2.0])  # only the live factor contributes


class TestBroadcastingAndShapes:
    def test_broadcast_add_grad(self):
        rng = np.random.default_rng(4)
        a = Var(rng.normal(size=(3, 1, 5)))
        b = Var(rng.normal(size=(4, 5)))
        out = ad.sumv(a + b)
        out.backward()
        assert a.grad.shape == (3, 1, 5)
        assert b.grad.shape == (4, 5)
        assert_allclose(a.grad, np.full((3, 1, 5), 4.0))
        assert_allclose(b.grad, np.full((4, 5), 3.0))

    def test_broadcast_mul_grad_matches_fd(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3,))
        va = Var(a.copy())
        out = ad.sumv(va * b)
        out.backward()
        want = _fd_grad(lambda: float(np.sum(va.data * b)), va.data)
        assert_allclose(va.grad, want, rtol=1e-6)

    def test_sum_axis_keepdims(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 4))
        _check_op(lambda v: ad.sumv(v, axis=0, keepdims=True) * np.arange(4.0), x)
        _check_op(lambda v: ad.sumv(v, axis=1) ** 2, x)

    def test_reshape_transpose(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6))
        _check_op(lambda v: ad.reshape(v, (3, 4)) * np.arange(12.0).reshape(3, 4), x)
        _check_op(lambda v: ad.transpose(v, (1, 0)) * np.arange(12.0).reshape(6, 2), x)

    def test_matmul_grad(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(3, 4))
        B = rng.normal(size=(4, 2))
        va = Var(A.copy())
        vb = Var(B.copy())
        out = ad.sumv(ad.matmul(va, vb) ** 2)
        out.backward()
        wa = _fd_grad(lambda: float(np.sum((va.data @ vb.data) ** 2)), va.data)
        wb = _fd_grad(lambda: float(np.sum((va.data @ vb.data) ** 2)), vb.data)
        assert_allclose(va.grad, wa, rtol=1e-5, atol=1e-7)
        assert_allclose(vb.grad, wb, rtol=1e-5, atol=1e-7)


class TestIndexing:
    def test_take_axis_scatter_adds_repeats(self):
        table = Var(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        idx = np.array([0, 2, 0, 0])
        out = ad.sumv(ad.take_axis(table, idx, 0))
        out.backward()
        assert_allclose(table.grad, [[3.0, 3.0], [0.0, 0.0], [1.0, 1.0]])

    def test_pick(self):
        m = Var(np.arange(12.0).reshape(3, 4))
        rows = np.array([0, 1, 1])
        cols = np.array([2, 3, 3])
        out = ad.sumv(ad.pick(m, rows, cols) * np.array([1.0, 10.0, 100.0]))
        out.backward()
        assert out.item() == 2.0 + 70.0 + 700.0
        want = np.zeros((3, 4))
        want[0, 2] = 1.0
        want[1, 3] = 110.0
        assert_allclose(m.grad, want)


def _naive_conv2d(x, w, b, stride, pad):
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, Co, Ho, Wo))
    for n in range(N):
        for co in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, co, i, j] = np.sum(patch * w[co]) + b[co]
    return out


class TestConv:
    @pytest.mark.parametrize("stride,pad,size", [(1, 1, (5, 5)), (2, 1, (6, 7)), (2, 1, (2, 2)), (1, 0, (4, 4))])
    def test_forward_matches_naive(self, stride, pad, size):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, *size))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = ad.conv2d(Var(x), Var(w), Var(b), stride=stride, pad=pad).data
        assert_allclose(got, _naive_conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_grads_match_fd(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        mask = rng.normal(size=(1, 3, 2, 2))
        vx, vw, vb = Var(x.copy()), Var(w.copy()), Var(b.copy())

        def run():
            return ad.sumv(ad.conv2d(vx, vw, vb, stride=2, pad=1) * mask)

        run().backward()

        def val():
            return float(np.sum(_naive_conv2d(vx.data, vw.data, vb.data, 2, 1) * mask))

        assert_allclose(vx.grad, _fd_grad(val, vx.data), rtol=1e-5, atol=1e-7)
        assert_allclose(vw.grad, _fd_grad(val, vw.data), rtol=1e-5, atol=1e-7)
        assert_allclose(vb.grad, _fd_grad(val, vb.data), rtol=1e-5, atol=1e-7)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ad.conv2d(Var(np.zeros((1, 2, 4, 4))), Var(np.zeros((3, 5, 3, 3))), Var(np.zeros(3)))


class TestUpsample:
    def test_forward(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        out = ad.upsample2(Var(x)).data
        want = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float)
        assert_allclose(out[0, 0], want)

    def test_backward_sums_blocks(self):
        v = Var(np.ones((1, 1, 2, 2)))
        g = np.arange(16.0).reshape(1, 1, 4, 4)
        out = ad.sumv(ad.upsample2(v) * g)
        out.backward()
        want = np.array([[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]], dtype=float)
        assert_allclose(v.grad[0, 0], want)


class TestAdam:
    def test_single_step_matches_formula(self):
        p = Var(np.array([1.0]))
        opt = Adam([p], lr=0.1)
        p.grad = np.array([0.5])
        opt.step()
        # First step: mhat = g, vhat = g^2, update = lr * g / (|g| + eps).
        assert_allclose(p.data, 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), rtol=1e-12)

    def test_minimizes_quadratic(self):
        rng = np.random.default_rng(11)
        target = rng.normal(size=5)
        p = Var(np.zeros(5))
        opt = Adam([p], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            loss = ad.sumv((p - target) ** 2)
            loss.backward()
            opt.step()
        assert_allclose(p.data, target, atol=1e-3)


class TestGradCheck:
    def test_linear_quadratic_exact(self):
        rng = np.random.default_rng(12)
        W = Var(rng.normal(size=(3, 3)))
        x = rng.normal(size=(3, 1))

        def loss():
            return ad.sumv(ad.matmul(W, x) ** 2)

        report = grad_check(loss, [W], np.random.default_rng(0), n_coords=9)
        assert report.passed
        assert report.max_rel_err < 1e-9

    def test_dead_path_both_sides_zero(self):
        used = Var(np.array([1.0]))
        dead = Var(np.array([5.0]))

        def loss():
            return ad.sumv(used * used) + ad.sumv(dead * 0.0)

        report = grad_check(loss, [used, dead], np.random.default_rng(1), n_coords=2)
        assert report.passed

    def test_reports_failures(self):
        p = Var(np.array([2.0]))

        def broken_loss():
            out = Var(p.data**2, (p,))

            def bw(g):
                p.grad = (p.grad or 0) + g * 3.0  # wrong: should be 2*p

            out._bw = bw
            return out

        report = grad_check(broken_loss, [p], np.random.default_rng(2), n_coords=1)
        assert not report.passed
        assert report.failures[0].param == 0


class TestGraph:
    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            Var(np.zeros(3)).backward()

    def test_shared_subgraph_accumulates_once_per_path(self):
        v = Var(np.array([3.0]))
        y = v * v  # reused node
        out = ad.sumv(y + y)
        out.backward()
        assert_allclose(v.grad, [12.0])  # d/dv of 2v^2
