import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coarse2fine.estimators import RankDeficientError, build_omega, mom_fit, naive_fit
from coarse2fine.model import BehaviorBinning, Dataset, GroupObservations, logit, sigmoid

from conftest import random_dataset
import oracles


class TestNaive:
    def test_empty_dataset(self):
        ds = Dataset(BehaviorBinning(4), ())
        assert naive_fit(ds).rho.tolist() == [0.5] * 4

    def test_hand_example(self, small_dataset):
        rho = naive_fit(small_dataset).rho
        assert rho == pytest.approx([0.65, 0.60], abs=1e-15)
        assert naive_fit(small_dataset).method == "naive"

    def test_converges_to_common_signal(self):
        c = 0.83
        n = 10_000
        groups = [GroupObservations(f"g{i}", logit(c), np.repeat([1, 2, 3], n // 10)) for i in range(10)]
        rho = naive_fit(Dataset(BehaviorBinning(3), tuple(groups))).rho
        assert np.all(rho > 0.5) and np.all(rho < c)
        assert rho == pytest.approx([c] * 3, abs=1e-3)

    def test_matches_oracle(self, rng):
        for _ in range(50):
            ds = random_dataset(rng)
            assert naive_fit(ds).rho == pytest.approx(oracles.naive_rho(ds), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_interior(self, seed):
        ds = random_dataset(np.random.default_rng(seed), max_groups=6, max_items=8)
        rho = naive_fit(ds).rho
        assert np.all((rho > 0) & (rho < 1))

    def test_permutation_invariant(self, rng):
        ds = random_dataset(rng, max_groups=6, max_items=6)
        perm = rng.permutation(ds.n_groups)
        groups = []
        for p in perm:
            g = ds.groups[p]
            o = rng.permutation(g.n_items)
            groups.append(GroupObservations(g.group_id, g.he, g.bins[o], g.weights[o]))
        other = naive_fit(Dataset(ds.binning, tuple(groups))).rho
        assert other == pytest.approx(naive_fit(ds).rho, rel=1e-13)

    def test_split_group_invariant(self, rng):
        ds = random_dataset(rng, max_groups=4, max_items=6)
        g = max(ds.groups, key=lambda g: g.n_items)
        h = g.n_items // 2
        a = GroupObservations(g.group_id + "a", g.he, g.bins[:h], g.weights[:h])
        b = GroupObservations(g.group_id + "b", g.he, g.bins[h:], g.weights[h:])
        rest = [x for x in ds.groups if x is not g]
        split = Dataset(ds.binning, tuple(rest + [a, b]))
        assert naive_fit(split).rho == pytest.approx(naive_fit(ds).rho, rel=1e-13)

    def test_rejects_invalid(self):
        ds = Dataset(BehaviorBinning(2), (GroupObservations("a", 0.0, [3]),))
        with pytest.raises(ValueError):
            naive_fit(ds)


class TestOmega:
    def test_pure_bin(self):
        ds = Dataset(BehaviorBinning(4), (GroupObservations("a", 0.0, [3, 3, 3]),))
        assert build_omega(ds).rows.tolist() == [[0, 0, 1, 0]]

    def test_counts(self):
        ds = Dataset(BehaviorBinning(2), (GroupObservations("a", 0.0, [1, 1, 2]),))
        assert build_omega(ds).rows[0] == pytest.approx([2 / 3, 1 / 3], abs=1e-15)

    def test_weighted(self):
        ds = Dataset(BehaviorBinning(2), (GroupObservations("a", 0.0, [1, 1, 2], [0.5, 0.5, 1.0]),))
        assert build_omega(ds).rows[0] == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_drops_empty_groups(self, caplog):
        ds = Dataset(
            BehaviorBinning(2),
            (GroupObservations("a", 0.0, [1]), GroupObservations("empty", 0.0, [])),
        )
        with caplog.at_level(logging.WARNING):
            om = build_omega(ds)
        assert om.group_ids == ("a",)
        assert om.dropped == ("empty",)
        assert "dropping 1 groups" in caplog.text

    def test_rows_are_distributions(self, rng):
        for _ in range(20):
            om = build_omega(random_dataset(rng))
            if om.rows.size:
                assert np.allclose(om.rows.sum(axis=1), 1.0, atol=1e-12)


class TestMoments:
    def test_identity_interpolates(self):
        he = [-1.0, 0.3, 2.0]
        ds = Dataset(
            BehaviorBinning(3),
            tuple(GroupObservations(f"g{k}", h, [k + 1] * 4) for k, h in enumerate(he)),
        )
        assert mom_fit(ds).rho == pytest.approx(sigmoid(np.array(he)), abs=1e-12)

    def test_constant_target(self, rng):
        K = 5
        groups = [GroupObservations(f"g{i}", logit(0.5), rng.integers(1, K + 1, size=8)) for i in range(40)]
        rho = mom_fit(Dataset(BehaviorBinning(K), tuple(groups))).rho
        assert rho == pytest.approx([0.5] * K, abs=1e-8)

    def test_normal_equation_residual(self, rng):
        for _ in range(20):
            K = int(rng.integers(2, 6))
            groups = [
                GroupObservations(f"g{i}", rng.normal(), rng.integers(1, K + 1, size=6), rng.uniform(0.1, 1, 6))
                for i in range(3 * K)
            ]
            ds = Dataset(BehaviorBinning(K), tuple(groups))
            try:
                rho = mom_fit(ds).rho
            except RankDeficientError:
                continue
            om = build_omega(ds).rows
            r = om.T @ (sigmoid(ds.he) - om @ rho)
            scale = np.abs(om.T) @ (np.abs(sigmoid(ds.he)) + np.abs(om @ rho))
            assert np.all(np.abs(r) <= 1e-8 * scale)

    def test_exact_rational_oracle(self, rng):
        checked = 0
        while checked < 30:
            K = int(rng.integers(2, 4))
            I = int(rng.integers(K, 11))
            groups = [
                GroupObservations(f"g{i}", rng.normal(), rng.integers(1, K + 1, size=int(rng.integers(1, 6))))
                for i in range(I)
            ]
            ds = Dataset(BehaviorBinning(K), tuple(groups))
            try:
                rho = mom_fit(ds).rho
            except RankDeficientError:
                continue
            om = build_omega(ds)
            if om.condition_number > 1e8:
                continue
            expected = oracles.exact_least_squares(om.rows.tolist(), sigmoid(ds.he).tolist())
            assert rho == pytest.approx(expected, abs=1e-6)
            checked += 1

    def test_rank_deficient(self):
        # bins 1 and 2 always appear together in the same proportion
        ds = Dataset(
            BehaviorBinning(3),
            (
                GroupObservations("a", 0.1, [1, 2]),
                GroupObservations("b", 0.5, [1, 2, 3, 3]),
                GroupObservations("c", -0.2, [1, 1, 2, 2]),
            ),
        )
        with pytest.raises(RankDeficientError) as err:
            mom_fit(ds)
        assert err.value.rank == 2
        assert err.value.n_bins == 3

    def test_not_clamped(self):
        # two pure-ish groups with extreme signals push one bin outside [0, 1]
        ds = Dataset(
            BehaviorBinning(2),
            (
                GroupObservations("a", 6.0, [1, 1, 1, 2]),
                GroupObservations("b", -6.0, [1, 2, 2, 2]),
                GroupObservations("c", 6.0, [1, 1, 1, 1, 1, 1, 1, 2]),
            ),
        )
        est = mom_fit(ds)
        assert not est.in_unit_interval.all()
        assert est.rho.max() > 1.0
