import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppde_lab.pathspace import (
    GridMismatchError,
    InvalidRegionError,
    PathPoint,
    PathTree,
    StoppingRegion,
    TreeProcess,
    backward_distance,
    backward_matrix,
    canonical_process,
    concat,
    dupire_distance,
    dupire_matrix,
    format_label,
    hitting_time,
    modulus,
    parse_label,
    running_max_process,
    shift_process,
    time_process,
)

from conftest import integer_process


def pt(values, dt=1.0):
    return PathPoint.from_values(values, dt)


class TestPathTree:
    def test_counts_and_layout(self):
        tree = PathTree(3, 0.25)
        assert tree.n_nodes == 2**4 - 1
        assert tree.n_leaves == 8
        assert tree.step == 0.5
        assert tree.horizon == 0.75
        assert tree.values(0).tolist() == [0.0]
        # bits run from the first step, 1 = up
        assert tree.path_matrix(3)[0b101].tolist() == [0.0, 0.5, 0.0, 0.5]

    def test_path_value_is_signed_increment_sum(self):
        tree = PathTree(4, 0.04)
        for k in tree.levels():
            pm = tree.path_matrix(k)
            assert np.allclose(np.diff(np.abs(np.diff(pm, axis=1)), axis=1) if k > 1 else 0, 0)
            assert np.allclose(np.abs(np.diff(pm, axis=1)), tree.step)

    def test_labels_round_trip(self):
        tree = PathTree(3, 1.0)
        for p in tree.nodes():
            assert tree.parse(p.label) == p
        assert parse_label("3:101") == (3, 5)
        assert format_label(0, 0) == "0:"

    def test_json_round_trip(self):
        tree = PathTree(5, 0.01)
        assert PathTree.from_json(tree.to_json()) == tree
        assert json.loads(tree.to_json()) == {"depth": 5, "dt": 0.01, "dim": 1}

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            PathTree(0, 1.0)
        with pytest.raises(ValueError):
            PathTree(3, -1.0)
        with pytest.raises(ValueError):
            PathTree(15, 1.0)


class TestDistances:
    def test_identity(self):
        a = pt([0, 1, 0.5])
        assert dupire_distance(a, a) == 0
        assert backward_distance(a, a) == 0

    def test_dupire_example(self):
        assert dupire_distance(pt([0, 1, 0.5]), pt([0, 1])) == 1.5

    def test_backward_example(self):
        assert backward_distance(pt([0, 1, 0.5]), pt([0, 1])) == 2.0

    def test_same_time_distances_coincide(self, rng):
        tree = PathTree(4, 0.25)
        for _ in range(20):
            a = tree.point(4, int(rng.integers(16)))
            b = tree.point(4, int(rng.integers(16)))
            assert dupire_distance(a, b) == backward_distance(a, b)

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            dupire_distance(pt([0, 1], 1.0), pt([0, 1], 0.5))
        with pytest.raises(GridMismatchError):
            backward_distance(pt([0, 1], 1.0), pt([0, 1], 0.5))

    def test_pseudo_metric_axioms_exhaustive(self):
        tree = PathTree(3, 0.25)
        for matrix in (dupire_matrix(tree), backward_matrix(tree)):
            assert np.all(matrix >= 0)
            assert np.array_equal(matrix, matrix.T)
            assert np.all(np.diag(matrix) == 0)
            # triangle inequality over all triples
            through = (matrix[:, :, None] + matrix[None, :, :]).min(axis=1)
            assert np.all(matrix <= through + 1e-15)

    def test_matrices_match_scalar_distances(self):
        tree = PathTree(3, 0.25)
        nodes = list(tree.nodes())
        D, Db = dupire_matrix(tree), backward_matrix(tree)
        for i, a in enumerate(nodes):
            for j, b in enumerate(nodes):
                assert D[i, j] == dupire_distance(a, b)
                assert Db[i, j] == backward_distance(a, b)


class TestModulus:
    def test_zero_window(self):
        assert modulus(pt([0, 1, 0.5]), 0) == 0

    def test_example(self):
        assert modulus(pt([0, 1, 0.5]), 1) == 1

    def test_full_window_is_oscillation(self):
        a = pt([0, 1, -0.5, 2])
        assert modulus(a, 10) == 2.5

    def test_negative_window_rejected(self):
        with pytest.raises(ValueError):
            modulus(pt([0, 1]), -1)


class TestConcat:
    def test_example(self):
        assert concat([0, 1], [0, -1]).tolist() == [0, 1, 0]

    def test_zero_tail_freezes(self):
        assert concat([0, 1, 2], [0, 0, 0]).tolist() == [0, 1, 2, 2, 2]

    def test_root_concatenation_returns_tail(self):
        assert concat([0], [0, 1, 0.5]).tolist() == [0, 1, 0.5]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            concat([0, 1], [0, 1], length=5)
        with pytest.raises(ValueError):
            concat([0, 1], [1, 1])


class TestShift:
    def test_root_shift_is_identity(self, rng):
        tree = PathTree(3, 0.25)
        X = integer_process(tree, rng)
        assert shift_process(X, tree.root).equals(X)

    def test_time_projection(self):
        tree = PathTree(4, 0.25)
        a = tree.point(2, 3)
        S = shift_process(time_process(tree), a)
        for j in S.tree.levels():
            assert np.all(S.levels[j] == (2 + j) * 0.25)

    def test_running_max(self):
        tree = PathTree(2, 1.0)
        a = tree.point(1, 1)  # path (0, 1), prefix max 1
        S = shift_process(running_max_process(tree), a)
        # continuation up gives 2, down gives max(1, 0) = 1
        assert S.levels[1].tolist() == [1.0, 2.0]

    def test_concat_round_trip(self, rng):
        tree = PathTree(4, 0.25)
        X = TreeProcess.from_function(tree, lambda t, paths: paths.max(axis=1) + t * paths[:, -1])
        for _ in range(10):
            k = int(rng.integers(0, 4))
            a = tree.point(k, int(rng.integers(2**k)))
            S = shift_process(X, a)
            j = int(rng.integers(0, tree.depth - k + 1))
            i = int(rng.integers(2**j))
            tail = S.tree.path_matrix(j)[i]
            full = concat(a.stopped(), tail)
            target = (a.index << j) + i
            assert np.array_equal(tree.path_matrix(k + j)[target], full)
            assert S.levels[j][i] == X.levels[k + j][target]


class TestStoppingRegion:
    def test_constructors_are_valid(self):
        tree = PathTree(3, 1.0)
        for region in (StoppingRegion.leaves(tree), StoppingRegion.root(tree), StoppingRegion.at_level(tree, 2)):
            region.validate()

    def test_rejects_uncovered_and_overlapping(self):
        tree = PathTree(2, 1.0)
        with pytest.raises(InvalidRegionError):
            StoppingRegion(tree, [[False], [False, False], [True, True, False, True]])
        with pytest.raises(InvalidRegionError):
            StoppingRegion(tree, [[False], [True, False], [True, True, True, True]])

    def test_stop_levels_round_trip(self):
        tree = PathTree(3, 1.0)
        region = StoppingRegion(tree, [[False], [True, False], [False, False, True, False],
                                       [False] * 6 + [True, True]])
        assert StoppingRegion.from_stop_levels(tree, region.stop_levels()) == region


class TestHittingTime:
    def test_whole_line_gives_leaves(self):
        tree = PathTree(3, 1.0)
        assert hitting_time(tree, 3.0, (-np.inf, np.inf)) == StoppingRegion.leaves(tree)

    def test_narrow_box_gives_first_level(self):
        tree = PathTree(3, 0.25)
        h = tree.step
        assert hitting_time(tree, tree.horizon, (-h / 2, h / 2)) == StoppingRegion.at_level(tree, 1)

    def test_enumerated_example(self):
        tree = PathTree(2, 1.0)
        assert hitting_time(tree, 2.0, (-1.5, 1.5)) == StoppingRegion.at_level(tree, 2)

    def test_box_must_contain_origin(self):
        with pytest.raises(ValueError):
            hitting_time(PathTree(2, 1.0), 2.0, (0.5, 1.5))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.floats(0.05, 3.0), st.floats(0.05, 3.0), st.integers(1, 5))
    def test_always_valid_and_positive(self, depth, lo, hi, steps):
        tree = PathTree(depth, 0.25)
        region = hitting_time(tree, min(steps, depth) * 0.25, (-lo, hi))
        region.validate()
        assert region.is_positive


class TestTreeProcess:
    def test_arithmetic_and_access(self):
        tree = PathTree(2, 1.0)
        B = canonical_process(tree)
        assert (B * 2 - B).equals(B)
        assert B["2:11"] == 2.0
        assert B[tree.point(1, 0)] == -1.0
        assert (-B).positive_part().levels[1].tolist() == [1.0, 0.0]

    def test_flat_round_trip(self, rng):
        tree = PathTree(3, 1.0)
        X = integer_process(tree, rng)
        assert TreeProcess.from_flat(tree, X.flat()).equals(X)

    def test_distance_gap_bounded_by_modulus(self):
        tree = PathTree(3, 0.25)
        nodes = list(tree.nodes())
        for a, b in itertools.product(nodes, nodes):
            gap = abs(dupire_distance(a, b) - backward_distance(a, b))
            assert gap <= modulus(a, abs(a.t - b.t))
