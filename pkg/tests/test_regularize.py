import numpy as np
import pytest

from ppde_lab.pathspace import (
    PathPoint,
    PathTree,
    TreeProcess,
    backward_distance,
    backward_matrix,
    dupire_matrix,
)
from ppde_lab.regularize import (
    envelope_family,
    epsilon_n,
    epsilon_n_process,
    finite_threshold,
    inf_convolution,
    is_n_lipschitz,
    lsc_envelope,
    min_positive_distance,
    modulus_process,
    sup_convolution,
    usc_envelope,
)

from conftest import integer_process


def brute_sup_convolution(u, n):
    D = backward_matrix(u.tree)
    return (u.flat()[None, :] - n * D).max(axis=1)


class TestSupConvolution:
    def test_matches_full_search(self, rng):
        tree = PathTree(4, 0.25)
        for _ in range(10):
            u = integer_process(tree, rng)
            for n in (0.5, 1.0, 3.0, 10.0):
                assert np.array_equal(sup_convolution(u, n).un.flat(), brute_sup_convolution(u, n))

    def test_chunking_does_not_matter(self, rng):
        tree = PathTree(5, 0.04)
        u = integer_process(tree, rng)
        a = sup_convolution(u, 2.0, chunk=7).un
        b = sup_convolution(u, 2.0).un
        assert a.equals(b)

    def test_two_point_example(self):
        tree = PathTree(1, 1.0)
        down, up = tree.point(1, 0), tree.point(1, 1)
        assert backward_distance(down, up) == 2.0
        # the root sits far below so only the two leaves compete
        u = TreeProcess(tree, [[-10.0], [0.0, 1.0]])
        assert sup_convolution(u, 0.25).un[down] == 0.5

    def test_constant(self):
        tree = PathTree(3, 0.25)
        u = TreeProcess.constant(tree, 1.5)
        for n in (0.1, 1.0, 100.0):
            assert sup_convolution(u, n).un.equals(u)

    def test_exact_above_threshold(self, rng):
        tree = PathTree(4, 0.25)
        assert min_positive_distance(tree) == 0.25
        for _ in range(10):
            u = integer_process(tree, rng)
            res = sup_convolution(u, finite_threshold(u) * 1.01 + 1e-9)
            assert res.un.equals(u)
            assert res.threshold == finite_threshold(u)

    def test_order_monotonicity_and_lipschitz(self, rng):
        tree = PathTree(4, 0.25)
        for _ in range(10):
            u = integer_process(tree, rng)
            prev = None
            for n in (0.5, 1.0, 2.0, 4.0, 8.0, 16.0):
                un = sup_convolution(u, n).un
                assert np.all(un.flat() >= u.flat())
                if prev is not None:
                    assert np.all(un.flat() <= prev.flat())
                ok, worst = is_n_lipschitz(un, n)
                assert ok, worst
                prev = un

    def test_duality(self, rng):
        tree = PathTree(3, 0.25)
        v = integer_process(tree, rng)
        assert inf_convolution(v, 2.0).un.equals(-sup_convolution(-v, 2.0).un)
        assert np.all(inf_convolution(v, 2.0).un.flat() <= v.flat())

    def test_leaf_only_marks(self, rng):
        tree = PathTree(3, 0.25)
        u = TreeProcess.from_leaves(tree, np.full(8, 5.0), fill=0.0)
        res = sup_convolution(u, 1.0)
        assert not res.leaf_only[tree.depth].any()
        assert res.leaf_only[0][0]
        assert "0:" in res.leaf_only_labels()

    def test_rejects_nonpositive_weight(self):
        tree = PathTree(2, 0.25)
        with pytest.raises(ValueError):
            sup_convolution(TreeProcess.constant(tree, 0.0), 0.0)


class TestEnvelopes:
    def test_zero_radius(self, rng):
        tree = PathTree(3, 0.25)
        w = integer_process(tree, rng)
        assert usc_envelope(w, 0.0).equals(w)
        assert lsc_envelope(w, 0.0).equals(w)

    def test_large_radius(self, rng):
        tree = PathTree(3, 0.25)
        w = integer_process(tree, rng)
        diam = dupire_matrix(tree).max()
        assert usc_envelope(w, diam).equals(TreeProcess.constant(tree, w.max()))
        assert lsc_envelope(w, diam).equals(TreeProcess.constant(tree, w.min()))

    def test_isolated_dip(self):
        tree = PathTree(2, 0.25)
        w = TreeProcess(tree, [[1.0], [-5.0, 1.0], [1.0, 1.0, 1.0, 1.0]])
        dip = tree.point(1, 0)
        D = dupire_matrix(tree)
        r = D[tree.flat_id(1, 0)][D[tree.flat_id(1, 0)] > 0].min()
        assert usc_envelope(w, r)[dip] == 1.0
        assert lsc_envelope(w, r)[dip] == -5.0

    def test_family_is_monotone(self, rng):
        tree = PathTree(3, 0.25)
        w = integer_process(tree, rng)
        fam = envelope_family(w, [0.0, 0.3, 1.0, 2.0])
        radii = sorted(fam)
        for a, b in zip(radii, radii[1:]):
            assert np.all(fam[a].flat() <= fam[b].flat())

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            usc_envelope(TreeProcess.constant(PathTree(1, 1.0), 0.0), -1.0)


class TestEpsilonN:
    def test_zero_bound(self):
        a = PathPoint.from_values([0, 1, 0.5], 1.0)
        assert epsilon_n(a, 4.0, 0.0) == 0.25

    def test_constant_path(self):
        a = PathPoint.from_values([0, 0, 0, 0], 0.25)
        assert epsilon_n(a, 4.0, 2.0) == 5.0 / 4.0

    def test_example(self):
        a = PathPoint.from_values([0, 1, 0.5], 1.0)
        assert epsilon_n(a, 4.0, 1.0) == 0.75

    def test_process_matches_scalar(self):
        tree = PathTree(4, 0.25)
        proc = epsilon_n_process(tree, 3.0, 1.0)
        for p in tree.nodes():
            assert proc[p] == epsilon_n(p, 3.0, 1.0)
        assert modulus_process(tree, 0.0).sup_norm() == 0

    def test_invalid(self):
        a = PathPoint.from_values([0], 1.0)
        with pytest.raises(ValueError):
            epsilon_n(a, 0.0, 1.0)
        with pytest.raises(ValueError):
            epsilon_n(a, 1.0, -1.0)
