import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppde_lab.decomp import (
    DecompositionError,
    backward_reflection,
    compensator_at,
    doob_meyer,
    dyadic,
    is_feasible,
    martingale_repr,
    minimality_counterexample,
    skorokhod,
)
from ppde_lab.nlexp import DriftControl, tilted_table
from ppde_lab.pathspace import PathTree, TreeProcess, canonical_process, hitting_time
from ppde_lab.snell import snell_drift, snell_envelope

from conftest import integer_process


def martingale(tree, rng, mu):
    """A P_mu-martingale built backward from integer leaves."""
    return tilted_table(TreeProcess.from_leaves(tree, rng.integers(-4, 5, tree.n_leaves).astype(float)), mu)


class TestDoobMeyer:
    def test_martingale_has_no_compensator(self, rng):
        tree = PathTree(3, 0.25)
        mu = DriftControl.constant(tree, 1.0, 0.5)
        Y = martingale(tree, rng, mu)
        dm = doob_meyer(Y, mu)
        assert dm.A.sup_norm() == 0
        assert dm.M.equals(Y - Y.root)

    def test_deterministic_example(self):
        tree = PathTree(1, 1.0)
        Y = TreeProcess(tree, [[1.0], [0.5, 0.5]])
        dm = doob_meyer(Y, DriftControl.constant(tree, 0.0, 0.0))
        assert dm.M.sup_norm() == 0
        assert dm.A.levels[1].tolist() == [0.5, 0.5]

    def test_reassembly_and_monotone_compensator(self, rng):
        tree = PathTree(4, 0.25)
        for _ in range(20):
            X = integer_process(tree, rng)
            res = snell_envelope(X, L=1.0)
            Y, mu = res.Y, snell_drift(res)
            dm = doob_meyer(Y, mu)
            assert dm.reassemble().equals(Y)
            for k in range(tree.depth):
                assert np.all(np.repeat(dm.A.levels[k], 2) <= dm.A.levels[k + 1])
            mr = martingale_repr(dm.M, mu)
            assert mr.reconstruct(0.0).equals(dm.M)

    def test_rejects_submartingale(self):
        tree = PathTree(1, 1.0)
        Y = TreeProcess(tree, [[0.0], [1.0, 1.0]])
        with pytest.raises(DecompositionError) as err:
            doob_meyer(Y, DriftControl.constant(tree, 0.0, 0.0))
        assert err.value.node == "0:"

    def test_flat_before_optimal_stop(self, rng):
        tree = PathTree(4, 0.25)
        for _ in range(20):
            X = integer_process(tree, rng)
            res = snell_envelope(X, L=1.0)
            dm = doob_meyer(res.Y, snell_drift(res))
            assert np.all(compensator_at(dm, res.tau_star) == 0)


class TestMartingaleRepr:
    def test_canonical_process(self):
        tree = PathTree(3, 0.25)
        mr = martingale_repr(canonical_process(tree), DriftControl.constant(tree, 1.0, 0.0))
        assert all(np.all(z == 1.0) for z in mr.Z)

    def test_constant(self):
        tree = PathTree(3, 0.25)
        mr = martingale_repr(TreeProcess.constant(tree, 2.0), DriftControl.constant(tree, 1.0, 1.0))
        assert all(np.all(z == 0.0) for z in mr.Z)

    def test_random_reconstruction(self, rng):
        tree = PathTree(4, 0.25)
        for mu0 in (-2.0, 0.0, 1.0):
            mu = DriftControl.constant(tree, 2.0, mu0)
            M = martingale(tree, rng, mu)
            assert martingale_repr(M, mu).reconstruct(M.root).equals(M)

    def test_rejects_non_martingale(self):
        tree = PathTree(2, 0.25)
        with pytest.raises(DecompositionError):
            martingale_repr(canonical_process(tree), DriftControl.constant(tree, 1.0, 1.0))


class TestSkorokhod:
    def test_nonnegative(self):
        pair = skorokhod([0, 1, 0.5, 2])
        assert pair.kappa.tolist() == [0, 0, 0, 0]
        assert pair.eta.tolist() == [0, 1, 0.5, 2]

    def test_example(self):
        pair = skorokhod([0, -1, 0.5, -2])
        assert pair.kappa.tolist() == [0, 1, 1, 2]
        assert pair.eta.tolist() == [0, 0, 1.5, 0]
        assert pair.identity_gap() == 0
        assert pair.flat_off_mass() == 0

    def test_pure_reflection(self):
        k = np.array([0, 0.5, 0.5, 2, 3])
        pair = skorokhod(-k)
        assert np.all(pair.eta == 0)
        assert np.array_equal(pair.kappa, k)

    def test_requires_zero_start(self):
        with pytest.raises(ValueError):
            skorokhod([1, 0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(-8, 8), min_size=0, max_size=11))
    def test_invariants(self, tail):
        lam = np.array([0] + tail, dtype=float) / 4
        pair = skorokhod(lam)
        assert pair.identity_gap() == 0
        assert np.all(pair.eta >= 0)
        assert np.all(np.diff(pair.kappa) >= 0)
        assert pair.flat_off_mass() == 0
        assert is_feasible(lam, pair.kappa)

    @pytest.mark.parametrize("lam", [[0, -1, 1, -2], [0, 1, -1, -1, 0.5, -0.5], [0, -0.5, -0.5, 1, -1.5]])
    def test_minimality(self, lam):
        grid = np.arange(0, 3.01, 0.5)
        assert minimality_counterexample(lam, grid) is None

    def test_feasibility(self):
        assert not is_feasible(np.array([0.0, -1.0]), np.array([0.0, 0.5]))
        assert is_feasible(np.array([0.0, -1.0]), np.array([0.0, 1.5]))


class TestReflection:
    def test_supermartingale_obstacle(self):
        tree = PathTree(3, 0.25)
        X = TreeProcess.constant(tree, 1.0)
        res = snell_envelope(X, L=1.0)
        rep = backward_reflection(X, res, snell_drift(res))
        assert rep.exact
        assert np.all(np.nan_to_num(rep.kappa_bar) == 0)

    def test_constant_obstacle(self):
        tree = PathTree(2, 0.25)
        X = TreeProcess.constant(tree, -3.0)
        res = snell_envelope(X, L=0.5)
        assert backward_reflection(X, res, snell_drift(res)).max_deviation == 0

    def test_snell_example(self):
        tree = PathTree(2, 0.25)
        X = TreeProcess(tree, [[0.4], [0.0, 1.0], [1.0, 0.0, 0.0, 2.0]])
        res = snell_envelope(X, L=1.0)
        rep = backward_reflection(X, res, snell_drift(res), keep_paths=True)
        assert rep.exact
        assert len(rep.to_dict()["paths"]) == 4

    def test_random_dyadic(self, rng):
        for depth in (2, 3, 4):
            tree = PathTree(depth, 0.25)
            for _ in range(10):
                X = integer_process(tree, rng)
                res = snell_envelope(X, L=1.0)
                assert backward_reflection(X, res, snell_drift(res)).exact

    def test_hitting_horizon(self, rng):
        tree = PathTree(4, 0.25)
        region = hitting_time(tree, 0.75, (-1.0, 1.0))
        X = integer_process(tree, rng)
        res = snell_envelope(X, region, L=1.0)
        assert backward_reflection(X, res, snell_drift(res)).exact

    def test_dyadic_helper(self):
        assert dyadic(0.375)
        assert not dyadic(0.1)
