"""Oracle tests for the autodiff core.

Every analytic gradient is checked against central finite differences
computed with no knowledge of the reverse-mode code, and the double-backprop
primitive is additionally checked against FD over the *parameters* of the
exact input gradient.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from near import diffcore as dc


def random_net(rng, dims=None, activation=None):
    if dims is None:
        n_hidden = rng.integers(1, 3)
        dims = [int(rng.integers(1, 5))] + [int(rng.integers(2, 8)) for _ in range(n_hidden)] + [1]
    if activation is None:
        activation = str(rng.choice(["elu", "tanh", "sigmoid"]))
    return dc.make_mlp(dims, activation, rng)


def fd_input_gradient(net, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (dc.forward(net, xp)[0] - dc.forward(net, xm)[0]) / (2 * h)
    return g


def fd_param_grads(loss_fn, net, h=1e-6):
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            lp = loss_fn(net)
            p[idx] = old - h
            lm = loss_fn(net)
            p[idx] = old
            g[idx] = (lp - lm) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def rel_err(a, b):
    num = max(np.max(np.abs(np.asarray(ai) - np.asarray(bi))) for ai, bi in zip(a, b))
    den = max(1e-8, max(np.max(np.abs(np.asarray(bi))) for bi in b))
    return num / den


class TestForward:
    def test_identity_single_layer(self):
        net = dc.DenseNetwork([dc.Layer(np.eye(3), np.zeros(3), "identity")])
        x = np.array([1.0, -2.0, 3.0])
        assert np.allclose(dc.forward(net, x), x)

    def test_affine_values(self):
        net = dc.DenseNetwork([dc.Layer(np.array([[2.0, 0.0], [0.0, -1.0]]),
                                        np.array([1.0, 1.0]), "identity")])
        assert np.allclose(dc.forward(net, np.array([3.0, 4.0])), [7.0, -3.0])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        net = random_net(rng, dims=[3, 5, 1])
        X = rng.normal(size=(7, 3))
        Y = dc.forward_batch(net, X)
        for i in range(7):
            assert np.allclose(Y[i], dc.forward(net, X[i]))

    def test_dim_mismatch_raises(self):
        rng = np.random.default_rng(0)
        net = random_net(rng, dims=[3, 4, 1])
        with pytest.raises(dc.DiffcoreError):
            dc.forward(net, np.zeros(2))

    def test_layer_chain_validation(self):
        with pytest.raises(dc.DiffcoreError):
            dc.DenseNetwork([
                dc.Layer(np.zeros((3, 2)), np.zeros(3), "elu"),
                dc.Layer(np.zeros((1, 4)), np.zeros(1), "identity"),
            ])


class TestActivationDerivatives:
    @pytest.mark.parametrize("name", sorted(dc.ACTIVATIONS))
    def test_first_derivative_fd(self, name):
        f, d1, _ = dc.ACTIVATIONS[name]
        z = np.linspace(-3, 3, 41)
        z = z[np.abs(z) > 1e-3]  # keep away from relu kink
        h = 1e-6
        fd = (f(z + h) - f(z - h)) / (2 * h)
        assert np.allclose(d1(z), fd, atol=1e-8)

    @pytest.mark.parametrize("name", sorted(dc.ACTIVATIONS))
    def test_second_derivative_fd(self, name):
        _, d1, d2 = dc.ACTIVATIONS[name]
        z = np.linspace(-3, 3, 41)
        z = z[np.abs(z) > 1e-3]
        h = 1e-6
        fd = (d1(z + h) - d1(z - h)) / (2 * h)
        assert np.allclose(d2(z), fd, atol=1e-7)


class TestInputGradient:
    def test_linear_net_exact(self):
        w = np.array([[1.5, -2.0, 0.25]])
        net = dc.DenseNetwork([dc.Layer(w, np.zeros(1), "identity")])
        assert np.allclose(dc.input_gradient(net, np.array([1.0, 2.0, 3.0])), w[0])

    def test_fd_oracle_many_nets(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            net = random_net(rng)
            x = rng.normal(size=net.in_dim)
            g = dc.input_gradient(net, x)
            fd = fd_input_gradient(net, x)
            assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_requires_scalar_output(self):
        rng = np.random.default_rng(2)
        net = dc.make_mlp([3, 4, 2], "elu", rng)
        with pytest.raises(dc.DiffcoreError):
            dc.input_gradient(net, np.zeros(3))


class TestBackwardBatch:
    def test_param_grads_fd_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            net = random_net(rng, dims=[2, 4, 3, 1])
            X = rng.normal(size=(5, 2))

            def loss(n):
                return float(np.sum(dc.forward_batch(n, X) ** 2))

            Y = dc.forward_batch(net, X)
            _, grads, _ = dc.backward_batch(net, X, 2.0 * Y)
            fd = fd_param_grads(loss, net)
            assert rel_err(grads, fd) < 1e-5

    def test_dx_matches_input_gradient(self):
        rng = np.random.default_rng(4)
        net = random_net(rng, dims=[3, 6, 1])
        X = rng.normal(size=(4, 3))
        _, _, dX = dc.backward_batch(net, X, np.ones((4, 1)))
        assert np.allclose(dX, dc.input_gradient_batch(net, X))


class TestDoubleBackprop:
    def test_value_equals_v_dot_grad(self):
        rng = np.random.default_rng(5)
        net = random_net(rng, dims=[3, 8, 4, 1])
        X = rng.normal(size=(6, 3))
        V = rng.normal(size=(6, 3))
        value, _ = dc.input_grad_functional_param_grads(net, X, V)
        direct = float(np.sum(V * dc.input_gradient_batch(net, X)))
        assert abs(value - direct) < 1e-10 * max(1.0, abs(direct))

    def test_param_grads_fd_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            net = random_net(rng)
            X = rng.normal(size=(4, net.in_dim))
            V = rng.normal(size=(4, net.in_dim))

            def loss(n):
                return float(np.sum(V * dc.input_gradient_batch(n, X)))

            _, grads = dc.input_grad_functional_param_grads(net, X, V)
            fd = fd_param_grads(loss, net)
            assert rel_err(grads, fd) < 1e-4

    def test_linear_network_param_grads_analytic(self):
        # e(x) = w.x + b: grad_x e = w, so sum_b V.grad = sum_b V.w and
        # d/dw = sum_b V, d/db = 0.
        w = np.array([[0.5, -1.0]])
        net = dc.DenseNetwork([dc.Layer(w.copy(), np.zeros(1), "identity")])
        X = np.array([[1.0, 2.0], [3.0, 4.0]])
        V = np.array([[1.0, 0.0], [0.0, 2.0]])
        value, grads = dc.input_grad_functional_param_grads(net, X, V)
        assert np.isclose(value, 0.5 * 1.0 + (-1.0) * 2.0)
        assert np.allclose(grads[0], V.sum(axis=0, keepdims=True))
        assert np.allclose(grads[1], 0.0)


class TestAdam:
    def test_single_step_closed_form(self):
        # After one step from zero state, mhat = g, vhat = g^2, so the update
        # is -lr * g / (|g| + eps) = -lr * sign(g) (up to eps).
        p = [np.array([1.0, -2.0])]
        g = [np.array([0.3, -0.7])]
        st_ = dc.AdamState.init(p, lr=0.1)
        new_p, new_st = dc.adam_step(p, g, st_)
        expected = p[0] - 0.1 * g[0] / (np.abs(g[0]) + 1e-8)
        assert np.allclose(new_p[0], expected)
        assert new_st.step == 1

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(7)
        p = [rng.normal(size=(3, 2)), rng.normal(size=3)]
        st_ = dc.AdamState.init(p, lr=0.01)
        m = [np.zeros_like(x) for x in p]
        v = [np.zeros_like(x) for x in p]
        ref = [x.copy() for x in p]
        for t in range(1, 20):
            g = [rng.normal(size=x.shape) for x in p]
            p, st_ = dc.adam_step(p, g, st_)
            for i in range(len(ref)):
                m[i] = 0.9 * m[i] + 0.1 * g[i]
                v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
                mh = m[i] / (1 - 0.9 ** t)
                vh = v[i] / (1 - 0.999 ** t)
                ref[i] = ref[i] - 0.01 * mh / (np.sqrt(vh) + 1e-8)
        for a, b in zip(p, ref):
            assert np.allclose(a, b, atol=1e-12)

    def test_nan_grads_raise(self):
        p = [np.zeros(2)]
        st_ = dc.AdamState.init(p, lr=0.1)
        with pytest.raises(dc.DiffcoreError):
            dc.adam_step(p, [np.array([np.nan, 0.0])], st_)


class TestEma:
    def test_update_formula(self):
        ema = dc.EmaState.init([np.array([1.0])], decay=0.9)
        ema = dc.ema_update(ema, [np.array([2.0])])
        assert np.allclose(ema.shadow[0], 0.9 * 1.0 + 0.1 * 2.0)

    def test_converges_to_constant(self):
        ema = dc.EmaState.init([np.array([0.0])], decay=0.5)
        for _ in range(60):
            ema = dc.ema_update(ema, [np.array([5.0])])
        assert abs(ema.shadow[0][0] - 5.0) < 1e-12

    def test_invalid_decay(self):
        with pytest.raises(dc.DiffcoreError):
            dc.EmaState.init([np.zeros(1)], decay=1.0)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        arrays = {
            "a": rng.normal(size=(3, 4)),
            "b": rng.normal(size=7),
            "c": np.array(3.5),
        }
        meta = {"kind": "test", "note": ["x", 1]}
        path = tmp_path / "ck.bin"
        dc.save_checkpoint(path, meta, arrays)
        meta2, arrays2 = dc.load_checkpoint(path)
        assert meta2 == meta
        for k in arrays:
            assert arrays2[k].shape == arrays[k].shape
            assert np.array_equal(arrays2[k], arrays[k])
            assert arrays2[k].tobytes() == arrays[k].tobytes()

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(dc.DiffcoreError):
            dc.load_checkpoint(path)

    def test_truncated_raises(self, tmp_path):
        path = tmp_path / "ck.bin"
        dc.save_checkpoint(path, {}, {"a": np.ones(10)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(dc.DiffcoreError):
            dc.load_checkpoint(path)

    def test_network_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        net = dc.make_mlp([3, 5, 1], "elu", rng)
        meta, arrays = dc.network_to_arrays(net, "net")
        path = tmp_path / "net.bin"
        dc.save_checkpoint(path, meta, arrays)
        meta2, arrays2 = dc.load_checkpoint(path)
        net2 = dc.network_from_arrays(meta2, arrays2, "net")
        X = rng.normal(size=(4, 3))
        assert np.array_equal(dc.forward_batch(net, X), dc.forward_batch(net2, X))


class TestXavier:
    def test_bound_and_shape(self):
        rng = np.random.default_rng(10)
        w = dc.xavier_uniform_init(20, 30, rng)
        assert w.shape == (30, 20)
        bound = np.sqrt(6.0 / 50.0)
        assert np.all(np.abs(w) <= bound)
        # Uniform on [-b, b] has variance b^2/3 = 2/(fan_in+fan_out).
        assert abs(w.var() - bound ** 2 / 3) < 0.1 * bound ** 2 / 3


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_input_gradient_fd_property(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.normal(size=net.in_dim)
    assert np.allclose(dc.input_gradient(net, x), fd_input_gradient(net, x),
                       rtol=1e-4, atol=1e-6)
