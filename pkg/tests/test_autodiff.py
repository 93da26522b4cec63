import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import shortflow.autodiff as adx


def central_diff_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        g.ravel()[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


# A tiny 2-layer MLP expressed on a flat parameter vector, used as the
# nonlinear workhorse for the finite-difference checks below.
D_IN, D_H = 3, 5


def mlp_sizes():
    return D_IN * D_H, D_H, D_H * D_IN, D_IN


def unpack(theta):
    n1, n2, n3, n4 = mlp_sizes()
    o = 0
    W1 = theta[o : o + n1].reshape((D_IN, D_H))
    o += n1
    b1 = theta[o : o + n2]
    o += n2
    W2 = theta[o : o + n3].reshape((D_H, D_IN))
    o += n3
    b2 = theta[o : o + n4]
    return W1, b1, W2, b2


def mlp_field(theta, x):
    """x (B, D_IN) -> (B, D_IN), works for arrays, Vars, and Duals."""
    W1, b1, W2, b2 = unpack(theta)
    h = adx.tanh(x @ W1 + b1)
    return adx.swish(h @ W2 + b2)


def random_theta(rng):
    n = sum(mlp_sizes())
    return rng.normal(size=n) * 0.7


class TestGrad:
    def test_quadratic(self):
        val, g = adx.grad(lambda th: (th * th).sum(), [1.0, 2.0])
        assert val == 5.0
        np.testing.assert_allclose(g, [2.0, 4.0])

    def test_product_rule(self):
        _, g = adx.grad(lambda th: th[0] * th[1], [3.0, 4.0])
        np.testing.assert_allclose(g, [4.0, 3.0])

    def test_mlp_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        theta = random_theta(rng)
        x = rng.normal(size=(4, D_IN))

        def scalar(th):
            out = mlp_field(th, x)
            return (out * out).sum() if isinstance(out, adx.Var) else float(
                np.sum(out * out)
            )

        val, g = adx.grad(scalar, theta)
        fd = central_diff_grad(lambda t: scalar_np(t, x), theta)
        assert rel_err(g, fd) < 1e-4

    def test_nonfinite_reports_node(self):
        with pytest.raises(adx.NonFiniteError, match="node"):
            adx.grad(lambda th: adx.log(th[0] - 2.0), [1.0])

    def test_determinism(self):
        rng = np.random.default_rng(3)
        theta = random_theta(rng)
        x = rng.normal(size=(2, D_IN))

        def scalar(th):
            out = mlp_field(th, x)
            return (out * out).sum()

        v1, g1 = adx.grad(scalar, theta)
        v2, g2 = adx.grad(scalar, theta)
        assert v1 == v2
        assert np.array_equal(g1, g2)


def scalar_np(theta, x):
    out = mlp_field(theta, x)
    return float(np.sum(out * out))


class TestJvp:
    def test_linear_map(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        y, t = adx.jvp(lambda xd: xd @ A.T, [1.0, 1.0], [1.0, 0.0])
        np.testing.assert_allclose(y, [3.0, 7.0])
        np.testing.assert_allclose(t, [1.0, 3.0])

    def test_identity(self):
        y, t = adx.jvp(lambda xd: xd, [0.3, -0.7, 2.0], [1.0, 2.0, 3.0])
        np.testing.assert_allclose(t, [1.0, 2.0, 3.0])

    def test_mlp_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        theta = random_theta(rng)
        x = rng.normal(size=D_IN)
        u = rng.normal(size=D_IN)
        _, t = adx.jvp(lambda xd: mlp_field(theta, xd.reshape((1, D_IN))), x, u)
        h = 1e-6
        fd = (
            mlp_field(theta, (x + h * u).reshape(1, -1))
            - mlp_field(theta, (x - h * u).reshape(1, -1))
        ) / (2 * h)
        assert rel_err(t, fd) < 1e-4

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            adx.jvp(lambda xd: xd, [1.0, 2.0], [1.0])

    @given(
        a=st.floats(-3, 3, allow_nan=False),
        b=st.floats(-3, 3, allow_nan=False),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        theta = random_theta(rng)
        x = rng.normal(size=D_IN)
        u = rng.normal(size=D_IN)
        w = rng.normal(size=D_IN)

        def f(xd):
            return mlp_field(theta, xd.reshape((1, D_IN)))

        _, tu = adx.jvp(f, x, u)
        _, tw = adx.jvp(f, x, w)
        _, tc = adx.jvp(f, x, a * u + b * w)
        np.testing.assert_allclose(tc, a * tu + b * tw, rtol=1e-9, atol=1e-9)


class TestDivergence:
    def test_linear_field_is_trace(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        d = adx.divergence(lambda xd: xd @ A.T, [0.1, -0.4])
        np.testing.assert_allclose(d, np.trace(A))

    def test_identity_field(self):
        for dim in (1, 3, 7):
            d = adx.divergence(lambda xd: xd, np.zeros(dim))
            np.testing.assert_allclose(d, dim)

    def test_mlp_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        theta = random_theta(rng)
        pts = rng.normal(size=(10, D_IN))
        div = adx.divergence(lambda xd: mlp_field(theta, xd), pts)
        h = 1e-5
        for b in range(10):
            fd = 0.0
            for i in range(D_IN):
                e = np.zeros(D_IN)
                e[i] = h
                fp = mlp_field(theta, (pts[b] + e).reshape(1, -1))[0, i]
                fm = mlp_field(theta, (pts[b] - e).reshape(1, -1))[0, i]
                fd += (fp - fm) / (2 * h)
            assert abs(div[b] - fd) / max(1.0, abs(fd)) < 1e-3

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        theta = random_theta(rng)
        pts = rng.normal(size=(6, D_IN))
        div_batch = adx.divergence(lambda xd: mlp_field(theta, xd), pts)
        for b in range(6):
            one = adx.divergence(
                lambda xd: mlp_field(theta, xd.reshape((1, D_IN))), pts[b]
            )
            np.testing.assert_allclose(div_batch[b], one, rtol=1e-12)


class TestReverseOverForward:
    def test_grad_of_divergence_vs_finite_differences(self):
        rng = np.random.default_rng(4)
        theta = random_theta(rng)
        pts = rng.normal(size=(3, D_IN))

        def g(th):
            if isinstance(th, adx.Var):
                div = adx.divergence(
                    lambda xd: mlp_field(th, xd), pts, tape=th.tape
                )
                return div.sum()
            return float(
                np.sum(adx.divergence(lambda xd: mlp_field(th, xd), pts))
            )

        _, grad_val = adx.grad(g, theta)
        fd = central_diff_grad(g, theta)
        assert rel_err(grad_val, fd) < 1e-3

    def test_tangent_nodes_live_on_tape(self):
        tape = adx.Tape()
        x = np.array([[0.5, -0.2, 0.1]])
        theta = random_theta(np.random.default_rng(6))
        n_before = len(tape.nodes)
        adx.divergence(lambda xd: mlp_field(theta, xd), x, tape=tape)
        assert len(tape.nodes) > n_before
        tans = [n for n in tape.nodes if n.tan is not None]
        assert tans, "dual propagation should mirror tangents onto nodes"


class TestTapeInvariants:
    def test_topological_order(self):
        tape = adx.Tape()
        a = tape.leaf([1.0, 2.0])
        b = adx.exp(a) * a + 3.0
        (b * b).sum()
        for i, node in enumerate(tape.nodes):
            assert all(j < i for j in node.args)

    def test_root_adjoint_is_one_and_all_finite(self):
        tape = adx.Tape()
        a = tape.leaf([0.5, 1.5])
        out = (adx.tanh(a) * adx.sin(a) + adx.sigmoid(a)).sum()
        tape.backward(out)
        assert tape.nodes[out.idx].adj == 1.0
        for node in tape.nodes:
            if node.adj is not None:
                assert np.all(np.isfinite(node.adj))
