import numpy as np
import pytest

from ppde_lab.nlexp import one_step_sup, sup_expectation, tilted_table, worst_drift
from ppde_lab.pathspace import PathTree, StoppingRegion, TreeProcess, hitting_time, time_process
from ppde_lab.snell import (
    brute_force_snell,
    describe,
    enumerate_regions,
    fundamental_point,
    snell_drift,
    snell_envelope,
    stopped_at,
)
from ppde_lab.viscosity import JetCandidate, one_step_horizon, subjet_test

from conftest import integer_process


def one_step(x0, x1):
    tree = PathTree(1, 1.0)
    return TreeProcess(tree, [[x0], list(x1)])


class TestSnellEnvelope:
    def test_constant(self):
        tree = PathTree(3, 0.25)
        res = snell_envelope(TreeProcess.constant(tree, 2.0), L=1.0)
        assert res.Y.equals(TreeProcess.constant(tree, 2.0))
        assert res.tau_star == StoppingRegion.root(tree)
        assert res.value == 2.0

    def test_continue_example(self):
        # leaves (down, up) = (0, 1)
        res = snell_envelope(one_step(0.4, [0, 1]), L=0.0)
        assert res.value == 0.5
        assert res.tau_star == StoppingRegion.leaves(res.Y.tree)

    def test_stop_example(self):
        res = snell_envelope(one_step(0.6, [0, 1]), L=0.0)
        assert res.value == 0.6
        assert res.tau_star == StoppingRegion.root(res.Y.tree)

    def test_optimal_stopping_guarantees(self, rng):
        tree = PathTree(4, 0.25)
        for _ in range(30):
            X = integer_process(tree, rng)
            res = snell_envelope(X, L=1.0)
            for k in tree.levels():
                assert np.all(res.Y.levels[k] >= X.levels[k])
            assert np.array_equal(res.Y.leaves, X.leaves)
            stopped = stopped_at(X, res.tau_star)
            assert sup_expectation(stopped, upto=res.tau_star, L=1.0) == res.value
            for k, m in enumerate(res.tau_star.marks):
                assert np.array_equal(res.Y.levels[k][m], X.levels[k][m])

    def test_supermartingale(self, rng):
        tree = PathTree(4, 0.25)
        for _ in range(20):
            X = integer_process(tree, rng)
            res = snell_envelope(X, L=1.0)
            active = res.tau_star.active()
            for k in range(tree.depth):
                cont = one_step_sup(res.Y.levels[k + 1][1::2], res.Y.levels[k + 1][0::2], 1.0, 0.25)
                assert np.all(res.Y.levels[k] >= cont)
                assert np.array_equal(res.Y.levels[k][active[k]], cont[active[k]])

    def test_supermartingale_under_every_drift(self, rng):
        tree = PathTree(3, 0.25)
        X = integer_process(tree, rng)
        res = snell_envelope(X, L=1.0)
        for _ in range(20):
            mu = worst_drift(integer_process(tree, rng), L=1.0)
            h = tree.step
            for k in range(tree.depth):
                up, down = res.Y.levels[k + 1][1::2], res.Y.levels[k + 1][0::2]
                p = (1 + mu.levels[k] * h) / 2
                assert np.all(p * up + (1 - p) * down <= res.Y.levels[k])

    def test_horizon_freezes(self, rng):
        tree = PathTree(3, 0.25)
        X = integer_process(tree, rng)
        region = StoppingRegion.at_level(tree, 1)
        res = snell_envelope(X, region, L=1.0)
        assert res.value == max(X.root, one_step_sup(X.levels[1][1], X.levels[1][0], 1.0, 0.25))
        assert describe(res)["value"] == res.value

    def test_drift_reproduces_value(self, rng):
        tree = PathTree(4, 0.25)
        X = integer_process(tree, rng)
        res = snell_envelope(X, L=1.0)
        mu = snell_drift(res)
        stopped = stopped_at(X, res.tau_star)
        assert tilted_table(stopped, mu, res.tau_star).root == res.value


class TestBruteForce:
    def test_examples(self):
        assert brute_force_snell(one_step(0.4, [0, 1])) == 0.5
        assert brute_force_snell(one_step(0.6, [0, 1])) == 0.6
        tree = PathTree(3, 0.25)
        assert brute_force_snell(TreeProcess.constant(tree, -1.5), L=1.0) == -1.5

    def test_increasing_obstacle_stops_at_horizon(self):
        tree = PathTree(3, 0.25)
        X = time_process(tree)
        assert brute_force_snell(X, L=1.0) == tree.horizon
        assert snell_envelope(X, L=1.0).tau_star == StoppingRegion.leaves(tree)

    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    def test_matches_envelope(self, rng, depth):
        tree = PathTree(depth, 0.25)
        for _ in range(15):
            X = integer_process(tree, rng)
            for L in (0.0, 1.0, 2.0):
                assert snell_envelope(X, L=L).value == brute_force_snell(X, L=L)

    def test_region_enumeration_agrees(self, rng):
        tree = PathTree(3, 0.25)
        X = integer_process(tree, rng)
        regions = enumerate_regions(StoppingRegion.leaves(tree))
        assert len(regions) == 26
        best = max(sup_expectation(stopped_at(X, r), upto=r, L=1.0) for r in regions)
        assert best == brute_force_snell(X, L=1.0)

    def test_hitting_horizon(self, rng):
        tree = PathTree(4, 0.25)
        region = hitting_time(tree, 0.75, (-0.75, 0.75))
        for _ in range(10):
            X = integer_process(tree, rng)
            assert snell_envelope(X, region, L=1.0).value == brute_force_snell(X, region, L=1.0)

    def test_depth_limit(self):
        tree = PathTree(6, 0.01)
        with pytest.raises(ValueError):
            brute_force_snell(TreeProcess.constant(tree, 0.0))


class TestFundamentalPoint:
    def test_decreasing_gives_root(self):
        tree = PathTree(3, 0.25)
        u = time_process(tree) * -1.0
        a = fundamental_point(u, StoppingRegion.leaves(tree), L=1.0)
        assert a == tree.root

    def test_constant_violates_hypothesis(self):
        tree = PathTree(3, 0.25)
        assert fundamental_point(TreeProcess.constant(tree, 1.0), StoppingRegion.leaves(tree)) is None

    def test_engineered_example(self):
        tree = PathTree(2, 0.25)
        u = TreeProcess(tree, [[1.0], [0.0, 2.0], [0.0, 0.0, 0.0, 0.0]])
        region = StoppingRegion.leaves(tree)
        a = fundamental_point(u, region, L=1.0)
        assert a is not None and a.level < 2
        res = snell_envelope(stopped_at(u, region), region, L=1.0)
        assert res.Y[a] == u[a]
        assert res.value == brute_force_snell(u, region, L=1.0)
        assert subjet_test(u, a, JetCandidate(0.0, 0.0, one_step_horizon(tree, a)), L=1.0)

    def test_random(self, rng):
        tree = PathTree(3, 0.25)
        region = StoppingRegion.leaves(tree)
        found = 0
        for _ in range(40):
            u = integer_process(tree, rng)
            a = fundamental_point(u, region, L=1.0)
            if a is None:
                assert u.root <= sup_expectation(u, L=1.0)
                continue
            found += 1
            assert a.level < tree.depth
            assert subjet_test(u, a, JetCandidate(0.0, 0.0, one_step_horizon(tree, a)), L=1.0)
        assert found > 0
