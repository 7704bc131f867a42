import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coarse2fine.em import (
    FitConfig,
    NewtonError,
    e_step,
    em_fit,
    final_rho,
    initialize,
    m_step_mu,
    m_step_w,
    mu_residual,
    solve_mu,
)
from coarse2fine.estimators import naive_fit
from coarse2fine.model import BehaviorBinning, Dataset, GroupObservations, LatentState, logit, sigmoid
from coarse2fine.simulation import SimulationConfig, figure4_scenario, sample, s_curve

from conftest import random_dataset
import oracles

# root of mu + sigmoid(mu) = 1, from oracles.bisect_mu(0, [1], [1], 1)
ROOT_WH1_Z1 = 0.40105813754154696


def one_group(he, bins, weights=None, K=2):
    return Dataset(BehaviorBinning(K), (GroupObservations("g", he, bins, weights),))


class TestConfig:
    def test_defaults(self):
        c = FitConfig()
        assert c.wh == 10.0
        assert c.mu_clamp == 30.0

    @pytest.mark.parametrize(
        "kw", [{"wh": -1}, {"tol": 0}, {"mu_clamp": 5}, {"newton_tol": 0}, {"max_iters": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)


class TestInitialize:
    def test_empty(self):
        st_ = initialize(Dataset(BehaviorBinning(3), ()), FitConfig())
        assert st_.w0 == pytest.approx([1 / 3] * 3)
        assert st_.w1 == pytest.approx([1 / 3] * 3)

    def test_symmetric(self, rng):
        groups = [GroupObservations(f"g{i}", 0.0, rng.integers(1, 4, size=5)) for i in range(6)]
        st_ = initialize(Dataset(BehaviorBinning(3), tuple(groups)), FitConfig())
        assert np.all(st_.z == 0.5)
        assert np.array_equal(st_.w0, st_.w1)
        assert np.array_equal(st_.mu, np.zeros(6))

    def test_hand_example(self):
        st_ = initialize(one_group(logit(0.8), [1]), FitConfig())
        assert st_.w1 == pytest.approx([1.8 / 2.8, 1 / 2.8], abs=1e-15)
        assert st_.w0 == pytest.approx([1.2 / 2.2, 1 / 2.2], abs=1e-15)

    def test_matches_oracle(self, rng):
        for _ in range(50):
            ds = random_dataset(rng)
            st_ = initialize(ds, FitConfig())
            w0, w1 = oracles.init_w(ds)
            assert st_.w0 == pytest.approx(w0, abs=1e-12)
            assert st_.w1 == pytest.approx(w1, abs=1e-12)

    def test_reproduces_naive(self, rng):
        for _ in range(20):
            ds = random_dataset(rng)
            st_ = initialize(ds, FitConfig())
            assert np.array_equal(final_rho(ds, st_), naive_fit(ds).rho)


class TestEStep:
    def _state(self, mu, w0, w1):
        return LatentState(np.array([mu]), np.zeros(0), np.array(w0), np.array(w1))

    def test_equal_w(self):
        ds = one_group(0.0, [1, 2, 2], K=2)
        z = e_step(ds, self._state(0.7, [0.4, 0.6], [0.4, 0.6]))
        assert z == pytest.approx([sigmoid(0.7)] * 2, abs=1e-15)

    def test_hand_bayes(self):
        ds = one_group(0.0, [1])
        z = e_step(ds, self._state(0.0, [0.1, 0.9], [0.3, 0.7]))
        assert z[0] == pytest.approx(0.75, abs=1e-15)

    def test_hand_bayes_2(self):
        ds = one_group(0.0, [1])
        z = e_step(ds, self._state(logit(0.8), [0.3, 0.7], [0.1, 0.9]))
        assert z[0] == pytest.approx(4 / 7, abs=1e-12)

    def test_matches_oracle(self, rng):
        for _ in range(50):
            ds = random_dataset(rng)
            mu = rng.normal(size=ds.n_groups)
            w0 = rng.dirichlet(np.ones(ds.K))
            w1 = rng.dirichlet(np.ones(ds.K))
            st_ = LatentState(mu, np.zeros(0), w0, w1)
            st_.z = e_step(ds, st_)
            flat = np.concatenate(st_.item_z(ds)) if ds.n_items else np.zeros(0)
            assert flat == pytest.approx(oracles.e_step_items(ds, mu, w0, w1), abs=1e-12)


class TestMStepW:
    def test_all_positive(self, rng):
        ds = one_group(0.0, rng.integers(1, 5, size=10), K=4)
        w0, w1 = m_step_w(ds, np.ones(ds.cells().weight.size))
        assert w0 == pytest.approx([0.25] * 4, abs=1e-15)
        assert w1.sum() == pytest.approx(1.0)

    def test_all_negative(self, rng):
        ds = one_group(0.0, rng.integers(1, 5, size=10), K=4)
        w0, w1 = m_step_w(ds, np.zeros(ds.cells().weight.size))
        assert w1 == pytest.approx([0.25] * 4, abs=1e-15)

    def test_hand_example(self):
        ds = one_group(0.0, [1, 2])
        w0, w1 = m_step_w(ds, np.array([0.5, 0.5]))
        assert w1 == pytest.approx([0.5, 0.5], abs=1e-15)
        assert w0 == pytest.approx([0.5, 0.5], abs=1e-15)


class TestMStepMu:
    def test_infinite_wh(self):
        g = GroupObservations("g", 1.3, [1, 2])
        assert m_step_mu(g, [0.9, 0.9], FitConfig(wh=math.inf)) == 1.3

    def test_no_prior_symmetric(self):
        g = GroupObservations("g", 2.0, [1, 2, 1, 2])
        assert m_step_mu(g, [0.2, 0.8, 0.4, 0.6], FitConfig(wh=0.0)) == pytest.approx(0.0, abs=1e-10)

    def test_hand_root(self):
        g = GroupObservations("g", 0.0, [1])
        mu = m_step_mu(g, [1.0], FitConfig(wh=1.0))
        assert mu == pytest.approx(ROOT_WH1_Z1, abs=1e-10)
        assert abs(mu + sigmoid(mu) - 1.0) < 1e-10

    def test_oracle_root_constant(self):
        assert oracles.bisect_mu(0.0, [1.0], [1.0], 1.0) == pytest.approx(ROOT_WH1_Z1, abs=1e-12)

    def test_empty_group_keeps_signal(self):
        g = GroupObservations("g", -0.7, [])
        assert m_step_mu(g, [], FitConfig(wh=0.0)) == -0.7
        assert m_step_mu(g, [], FitConfig(wh=3.0)) == pytest.approx(-0.7, abs=1e-12)

    def test_clamp_binds_without_prior(self):
        mu, clamped = solve_mu(np.array([0.0]), np.array([5.0]), np.array([5.0]), 0.0, mu_clamp=30)
        assert mu[0] == 30.0 and clamped[0]
        mu, clamped = solve_mu(np.array([0.0]), np.array([5.0]), np.array([0.0]), 0.0, mu_clamp=30)
        assert mu[0] == -30.0 and clamped[0]

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(0, 50),
        st.floats(-8, 8),
        st.lists(st.tuples(st.floats(0.01, 1), st.floats(0, 1)), min_size=0, max_size=30),
    )
    def test_residual(self, wh, he, items):
        w = np.array([a for a, _ in items])
        z = np.array([b for _, b in items])
        mu, clamped = solve_mu(np.array([he]), np.array([w.sum()]), np.array([np.dot(w, z)]), wh)
        if not clamped[0]:
            assert abs(mu_residual(he, w.sum(), np.dot(w, z), wh, mu[0])) <= 1e-10

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 20), st.floats(-5, 5), st.floats(0.5, 50), st.floats(0, 1), st.floats(-25, 25))
    def test_g_increasing(self, wh, he, W, frac, x):
        h = 1e-4
        lo = mu_residual(he, W, frac * W, wh, x - h)
        hi = mu_residual(he, W, frac * W, wh, x + h)
        assert hi > lo

    def test_vectorised_matches_scalar(self, rng):
        he = rng.normal(0, 2, size=200)
        W = rng.uniform(0, 40, size=200)
        S = W * rng.uniform(0, 1, size=200)
        for wh in (0.0, 0.1, 10.0):
            mu, _ = solve_mu(he, W, S, wh)
            for i in range(0, 200, 17):
                one, _ = solve_mu(he[i : i + 1], W[i : i + 1], S[i : i + 1], wh)
                assert one[0] == pytest.approx(mu[i], abs=1e-9)

    def test_iteration_cap_raises(self):
        with pytest.raises(NewtonError):
            solve_mu(np.array([0.0]), np.array([1e3]), np.array([700.0]), 0.0, tol=1e-300, max_iters=1)


class TestEmFit:
    def test_no_items(self):
        ds = Dataset(BehaviorBinning(3), (GroupObservations("a", 1.0, []), GroupObservations("b", -1.0, [])))
        res = em_fit(ds)
        assert res.estimate.rho.tolist() == [0.5] * 3
        assert res.converged and res.iterations == 1

    def test_symmetric_fixed_point(self, rng):
        groups = [GroupObservations(f"g{i}", 0.0, rng.integers(1, 4, size=7)) for i in range(10)]
        ds = Dataset(BehaviorBinning(3), tuple(groups))
        res = em_fit(ds, FitConfig(wh=1.0))
        assert res.converged and res.iterations == 1
        assert res.estimate.rho == pytest.approx([0.5] * 3, abs=1e-15)
        assert np.all(res.state.z == 0.5)

    def test_matches_literal_em_loop(self, rng):
        # five sweeps of a pure-python EM with bisection for mu
        for _ in range(10):
            ds = random_dataset(rng, max_groups=4, max_items=5, max_bins=3)
            wh = float(rng.choice([0.5, 3.0]))
            res = em_fit(ds, FitConfig(wh=wh, max_iters=5, tol=1e-300))
            mu = [g.he for g in ds.groups]
            w0, w1 = oracles.init_w(ds)
            z = None
            for _ in range(5):
                z = oracles.e_step_items(ds, mu, w0, w1)
                K = ds.K
                c0, c1, t0, t1 = [1.0] * K, [1.0] * K, float(K), float(K)
                for (i, b, w), zz in zip(oracles.items(ds), z):
                    c1[b - 1] += w * zz
                    c0[b - 1] += w * (1 - zz)
                    t1 += w * zz
                    t0 += w * (1 - zz)
                w0, w1 = [c / t0 for c in c0], [c / t1 for c in c1]
                new_mu = []
                pos = 0
                for g in ds.groups:
                    zg = z[pos : pos + g.n_items]
                    pos += g.n_items
                    new_mu.append(oracles.bisect_mu(g.he, g.weights.tolist(), zg, wh))
                mu = new_mu
            assert res.estimate.rho == pytest.approx(oracles.final_rho(ds, z), abs=1e-9)
            assert res.state.mu == pytest.approx(mu, abs=1e-8)

    @pytest.mark.parametrize("wh", [0.0, 0.1, 10.0, math.inf])
    def test_monotone_and_interior(self, wh):
        cfg = SimulationConfig(60, 8, BehaviorBinning(6), s_curve(6, -2, 0.8), seed=7)
        res = em_fit(sample(cfg).dataset, FitConfig(wh=wh))
        tr = np.array(res.state.objective_trace)
        assert len(tr) == res.iterations + 1
        assert np.all(np.diff(tr) >= -1e-9 * (1 + np.abs(tr[:-1])))
        assert np.all((res.state.z > 0) & (res.state.z < 1))
        assert np.all((res.estimate.rho > 0) & (res.estimate.rho < 1))

    def test_deterministic(self):
        ds = sample(figure4_scenario(5, seed=2)).dataset
        a, b = em_fit(ds), em_fit(ds)
        assert a.estimate.rho.tobytes() == b.estimate.rho.tobytes()
        assert a.state.mu.tobytes() == b.state.mu.tobytes()
        assert a.state.objective_trace == b.state.objective_trace

    @pytest.mark.parametrize("seed", range(5))
    def test_label_anchoring(self, seed):
        truth = sample(figure4_scenario(5, seed=seed))
        rho = em_fit(truth.dataset, FitConfig(wh=10)).estimate.rho
        # spearman correlation with the increasing truth
        ranks = np.argsort(np.argsort(rho))
        assert np.corrcoef(ranks, np.arange(15))[0, 1] > 0

    def test_infinite_wh_pins_mu(self):
        ds = sample(figure4_scenario(5, seed=1)).dataset
        res = em_fit(ds, FitConfig(wh=math.inf))
        assert np.array_equal(res.state.mu, ds.he)

    def test_nonconvergence_flagged(self, caplog):
        ds = sample(figure4_scenario(5, seed=1)).dataset
        res = em_fit(ds, FitConfig(max_iters=2))
        assert not res.converged and res.iterations == 2
        assert "without converging" in caplog.text
