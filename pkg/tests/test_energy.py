"""Oracle tests for the noise scale, DSM loss, and energy training."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from near import diffcore as dc
from near import energy as en


class TestGeometricScale:
    def test_endpoints_exact(self):
        s = en.geometric_scale(20.0, 0.01, 50)
        assert s.sigmas[0] == 20.0
        assert s.sigmas[-1] == 0.01
        assert len(s) == 50

    def test_offset5_anchor(self):
        # 20 * (0.01/20)^(5/49) computed independently.
        s = en.geometric_scale(20.0, 0.01, 50)
        expected = 20.0 * (0.01 / 20.0) ** (5.0 / 49.0)
        assert abs(s.sigmas[5] - expected) < 1e-12
        assert abs(s.sigmas[5] - 9.2088) < 1e-3

    def test_constant_ratio(self):
        s = en.geometric_scale(20.0, 0.01, 50)
        ratios = s.sigmas[1:] / s.sigmas[:-1]
        assert np.all(np.abs(ratios - ratios[0]) < 1e-12)

    def test_two_levels(self):
        s = en.geometric_scale(3.0, 0.5, 2)
        assert np.allclose(s.sigmas, [3.0, 0.5])

    def test_invalid_ordering(self):
        with pytest.raises(en.EnergyError):
            en.geometric_scale(0.01, 20.0, 50)
        with pytest.raises(en.EnergyError):
            en.geometric_scale(1.0, -1.0, 10)
        with pytest.raises(en.EnergyError):
            en.geometric_scale(1.0, 0.1, 1)

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(min_value=0.5, max_value=100.0),
        st.floats(min_value=1e-4, max_value=0.4),
        st.integers(min_value=2, max_value=80),
    )
    def test_geometric_form_property(self, smax, smin, L):
        s = en.geometric_scale(smax, smin, L)
        r = (smin / smax) ** (1.0 / (L - 1))
        expected = smax * r ** np.arange(L)
        assert np.allclose(s.sigmas, expected, rtol=1e-9)


class TestConditionalEnergy:
    def make_energy(self, seed=0, dim=3):
        rng = np.random.default_rng(seed)
        return en.init_energy_network(dim, [8, 8], rng)

    def test_divide_by_sigma(self):
        e = self.make_energy()
        x = np.array([0.3, -0.2, 1.0])
        e1 = en.conditional_energy(e, x, 1.0)
        e2 = en.conditional_energy(e, x, 2.0)
        assert np.isclose(e2, e1 / 2.0)
        assert np.isclose(en.conditional_energy(e, x, 0.5), 2.0 * e1)

    def test_sigma_one_is_unconditional(self):
        e = self.make_energy()
        x = np.array([0.1, 0.2, 0.3])
        raw = dc.forward(e.net, e.standardize(x))[0]
        assert np.isclose(en.conditional_energy(e, x, 1.0), raw)

    def test_invalid_sigma(self):
        e = self.make_energy()
        with pytest.raises(en.EnergyError):
            en.conditional_energy(e, np.zeros(3), 0.0)

    def test_score_fd_oracle(self):
        e = self.make_energy(seed=1)
        e.mean = np.array([0.5, -0.5, 0.0])
        e.std = np.array([2.0, 0.5, 1.5])
        rng = np.random.default_rng(2)
        for sigma in (0.3, 1.0, 4.0):
            x = rng.normal(size=3)
            g = en.score(e, x, sigma)
            h = 1e-6
            fd = np.zeros(3)
            for i in range(3):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd[i] = (en.conditional_energy(e, xp, sigma)
                         - en.conditional_energy(e, xm, sigma)) / (2 * h)
            assert np.allclose(g, fd, rtol=1e-4, atol=1e-8)

    def test_linear_energy_score_analytic(self):
        w = np.array([[1.0, -2.0]])
        net = dc.DenseNetwork([dc.Layer(w, np.zeros(1), "identity")])
        e = en.EnergyNetwork(net, np.zeros(2), np.ones(2),
                             dc.EmaState.init(net.params(), 0.9))
        assert np.allclose(en.score(e, np.array([3.0, 4.0]), 2.0), w[0] / 2.0)

    def test_constant_network_zero_score(self):
        net = dc.DenseNetwork([dc.Layer(np.zeros((1, 2)), np.array([5.0]), "identity")])
        e = en.EnergyNetwork(net, np.zeros(2), np.ones(2),
                             dc.EmaState.init(net.params(), 0.9))
        assert np.allclose(en.score(e, np.array([1.0, 1.0]), 1.0), 0.0)

    def test_ema_weights_used(self):
        e = self.make_energy(seed=3)
        # Perturb live weights away from the EMA shadow.
        e.net.layers[0].weight = e.net.layers[0].weight + 1.0
        x = np.array([0.1, 0.2, 0.3])
        live = en.conditional_energy(e, x, 1.0, use_ema=False)
        shadow = en.conditional_energy(e, x, 1.0, use_ema=True)
        assert not np.isclose(live, shadow)


class TestDsmLoss:
    def test_zero_network_expected_loss_1d(self):
        # e == 0: loss per sample is 0.5 * ||(x - x')/sigma^2||^2 with
        # x' - x = sigma * eps, so E[loss] = d / (2 sigma^2).
        net = dc.DenseNetwork([dc.Layer(np.zeros((1, 1)), np.zeros(1), "identity")])
        e = en.EnergyNetwork(net, np.zeros(1), np.ones(1),
                             dc.EmaState.init(net.params(), 0.9))
        scale = en.NoiseScale(np.array([1.0, 0.999]))
        rng = np.random.default_rng(0)
        batch = np.zeros((20000, 1))
        levels = np.zeros(20000, dtype=int)
        loss, _ = en.dsm_minibatch_loss(e, batch, levels, scale, rng)
        # Loss is averaged within the level, so it is a Monte-Carlo mean.
        assert abs(loss - 0.5) < 0.02

    def test_zero_network_expected_loss_d4_sigma2(self):
        net = dc.DenseNetwork([dc.Layer(np.zeros((1, 4)), np.zeros(1), "identity")])
        e = en.EnergyNetwork(net, np.zeros(4), np.ones(4),
                             dc.EmaState.init(net.params(), 0.9))
        scale = en.NoiseScale(np.array([2.0, 1.999]))
        rng = np.random.default_rng(1)
        batch = np.zeros((20000, 4))
        levels = np.zeros(20000, dtype=int)
        loss, _ = en.dsm_minibatch_loss(e, batch, levels, scale, rng)
        assert abs(loss - 4.0 / (2.0 * 4.0)) < 0.02

    def test_perfect_score_zero_loss(self):
        # Linear energy e(x) = w.x gives score w/sigma regardless of x; pick
        # the perturbation so the target matches exactly by intercepting eps.
        # Instead: verify loss == 0.5*||score - target||^2 via direct recompute.
        rng = np.random.default_rng(2)
        e = en.init_energy_network(2, [6], rng)
        scale = en.NoiseScale(np.array([2.0, 0.5]))
        batch = rng.normal(size=(16, 2))
        levels = rng.integers(0, 2, size=16)
        state = rng.bit_generator.state
        loss, _ = en.dsm_minibatch_loss(e, batch, levels, scale, rng)
        # Oracle: replay the same noise draw and compute the loss by hand.
        rng2 = np.random.default_rng()
        rng2.bit_generator.state = state
        sig = scale.sigmas[levels][:, None]
        eps = rng2.standard_normal(batch.shape)
        x_pert = batch + sig * eps
        target = (batch - x_pert) / sig**2
        model = np.stack([en.score(e, x_pert[i], float(sig[i, 0])) for i in range(16)])
        per = 0.5 * np.sum((model - target) ** 2, axis=1)
        expected = np.mean([per[levels == l].mean() for l in np.unique(levels)])
        assert np.isclose(loss, expected, rtol=1e-10)

    def test_param_grads_fd_oracle(self):
        rng = np.random.default_rng(3)
        e = en.init_energy_network(2, [5], rng)
        e.mean = np.array([0.1, -0.1])
        e.std = np.array([1.5, 0.8])
        scale = en.NoiseScale(np.array([1.5, 0.4]))
        batch = rng.normal(size=(6, 2))
        levels = rng.integers(0, 2, size=6)
        state = rng.bit_generator.state

        def loss_at(params):
            e.net.set_params([p.copy() for p in params])
            r = np.random.default_rng()
            r.bit_generator.state = state
            loss, _ = en.dsm_minibatch_loss(e, batch, levels, scale, r)
            return loss

        base = [p.copy() for p in e.net.params()]
        r = np.random.default_rng()
        r.bit_generator.state = state
        _, grads = en.dsm_minibatch_loss(e, batch, levels, scale, r)
        h = 1e-6
        for k, p in enumerate(base):
            flat = p.reshape(-1)
            for j in range(0, flat.size, max(1, flat.size // 5)):
                pp = [q.copy() for q in base]
                pp[k].reshape(-1)[j] += h
                lp = loss_at(pp)
                pm = [q.copy() for q in base]
                pm[k].reshape(-1)[j] -= h
                lm = loss_at(pm)
                fd = (lp - lm) / (2 * h)
                assert abs(grads[k].reshape(-1)[j] - fd) < 1e-5 * max(1.0, abs(fd))
        e.net.set_params(base)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(4)
        e = en.init_energy_network(3, [8], rng)
        scale = en.geometric_scale(5.0, 0.1, 10)
        for _ in range(10):
            batch = rng.normal(size=(12, 3))
            levels = rng.integers(0, 10, size=12)
            loss, _ = en.dsm_minibatch_loss(e, batch, levels, scale, rng)
            assert loss >= 0.0

    def test_empty_batch_raises(self):
        rng = np.random.default_rng(5)
        e = en.init_energy_network(2, [4], rng)
        scale = en.NoiseScale(np.array([1.0, 0.5]))
        with pytest.raises(en.EnergyError):
            en.dsm_minibatch_loss(e, np.zeros((0, 2)), np.zeros(0, dtype=int), scale, rng)


class TestTrainEnergy:
    def test_zero_iterations_keeps_weights(self):
        rng = np.random.default_rng(6)
        data = en.ExpertDataset(rng.normal(size=(50, 2)))
        scale = en.NoiseScale(np.array([1.0, 0.5]))
        cfg = en.EnergyTrainConfig(hidden=[8], iterations=0)
        seed_rng = np.random.default_rng(7)
        e = en.train_energy(data, scale, cfg, seed_rng)
        ref = en.init_energy_network(2, [8], np.random.default_rng(7))
        for a, b in zip(e.net.params(), ref.net.params()):
            assert np.array_equal(a, b)
        # but stats are fitted
        assert np.allclose(e.mean, data.features.mean(axis=0))

    def test_single_point_dsm_analytic_optimum(self):
        # Training on {0} with sigma = 1 only: the optimal score is -x'.
        data = en.ExpertDataset(np.zeros((64, 1)))
        scale = en.geometric_scale(1.0, 0.999, 2)
        cfg = en.EnergyTrainConfig(hidden=[64, 64], iterations=8000, lr=1e-3,
                                   calibrate_mean_energy=None)
        e = en.train_energy(data, scale, cfg, np.random.default_rng(0))
        xs = np.linspace(-2, 2, 41)
        scores = np.array([en.score(e, np.array([x]), 1.0, use_ema=True)[0] for x in xs])
        assert np.max(np.abs(scores + xs)) < 0.1

    def test_symmetric_dataset_symmetric_energy(self):
        data = en.ExpertDataset(np.array([[-1.0], [1.0]] * 32))
        scale = en.geometric_scale(2.0, 0.1, 8)
        cfg = en.EnergyTrainConfig(hidden=[32, 32], iterations=4000, lr=1e-3,
                                   calibrate_mean_energy=None)
        e = en.train_energy(data, scale, cfg, np.random.default_rng(1))
        xs = np.linspace(0.2, 2.0, 10)
        vals_p = np.array([en.conditional_energy(e, np.array([x]), 1.0, True) for x in xs])
        vals_m = np.array([en.conditional_energy(e, np.array([-x]), 1.0, True) for x in xs])
        spread = vals_p.max() - vals_p.min()
        assert np.max(np.abs(vals_p - vals_m)) < 0.25 * max(spread, 1.0)

    def test_loss_log_written(self, tmp_path):
        rng = np.random.default_rng(8)
        data = en.ExpertDataset(rng.normal(size=(64, 2)))
        scale = en.geometric_scale(2.0, 0.1, 5)
        cfg = en.EnergyTrainConfig(hidden=[8], iterations=300, lr=1e-4,
                                   loss_log_every=50)
        path = tmp_path / "loss.csv"
        en.train_energy(data, scale, cfg, rng, loss_log_path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iter,sigma_level_mean,loss"
        assert len(lines) == 1 + 300 // 50
        for line in lines[1:]:
            it, lvl, loss = line.split(",")
            assert np.isfinite(float(loss))

    def test_calibration_sets_dataset_mean(self):
        rng = np.random.default_rng(9)
        data = en.ExpertDataset(rng.normal(size=(64, 2)))
        scale = en.geometric_scale(2.0, 0.1, 5)
        cfg = en.EnergyTrainConfig(hidden=[8], iterations=200, lr=1e-4,
                                   calibrate_mean_energy=2.0)
        e = en.train_energy(data, scale, cfg, rng)
        m = np.mean(en.conditional_energy_batch(e, data.features, 1.0, use_ema=True))
        assert abs(m - 2.0) < 1e-9

    def test_standardization_frozen_from_dataset(self):
        rng = np.random.default_rng(10)
        feats = rng.normal(size=(100, 3)) * np.array([1.0, 5.0, 0.2]) + 3.0
        data = en.ExpertDataset(feats)
        scale = en.geometric_scale(2.0, 0.1, 5)
        cfg = en.EnergyTrainConfig(hidden=[8], iterations=10, lr=1e-4)
        e = en.train_energy(data, scale, cfg, rng)
        assert np.allclose(e.mean, feats.mean(axis=0))
        assert np.allclose(e.std, feats.std(axis=0))

    def test_degenerate_std_guard(self):
        mean, std = en.fit_standardization(np.ones((10, 2)))
        assert np.all(std == 1.0)


class TestEnergyCheckpoint:
    def test_roundtrip_identical_outputs(self, tmp_path):
        rng = np.random.default_rng(11)
        e = en.init_energy_network(4, [8, 8], rng)
        e.mean = rng.normal(size=4)
        e.std = np.abs(rng.normal(size=4)) + 0.5
        scale = en.geometric_scale(20.0, 0.01, 50)
        path = tmp_path / "energy.ckpt"
        en.save_energy_checkpoint(path, e, scale)
        e2, scale2 = en.load_energy_checkpoint(path)
        assert np.array_equal(scale2.sigmas, scale.sigmas)
        X = rng.normal(size=(10, 4))
        for use_ema in (False, True):
            assert np.array_equal(
                en.conditional_energy_batch(e, X, 0.7, use_ema),
                en.conditional_energy_batch(e2, X, 0.7, use_ema),
            )

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        dc.save_checkpoint(path, {"kind": "policy"}, {"a": np.zeros(1)})
        with pytest.raises(en.EnergyError):
            en.load_energy_checkpoint(path)
