"""Discrete path space on a non-recombining binary tree.

A node at level ``k`` is addressed by an integer ``index`` whose ``k``-bit
binary expansion records the increments from the root, most significant bit
first, with ``1`` for an up-move (+h) and ``0`` for a down-move (-h).  The
textual form is ``"level:bitstring"``, e.g. ``"3:101"`` is up, down, up.
Children of ``(k, i)`` are ``(k + 1, 2 i)`` (down) and ``(k + 1, 2 i + 1)``
(up).  Paths start at the origin and the spatial step is ``h = sqrt(dt)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

MAX_DEPTH = 14
_TIME_EPS = 1e-9


class GridMismatchError(ValueError):
    """Raised when two path points do not share a time grid."""


class InvalidRegionError(ValueError):
    """Raised when a stopping region is not an antichain covering every path."""


@dataclass(frozen=True)
class PathTree:
    depth: int
    dt: float
    dim: int = 1
    max_depth: int = MAX_DEPTH

    def __post_init__(self) -> None:
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"depth must be an integer >= 1, got {self.depth}")
        if self.depth > self.max_depth:
            raise ValueError(
                f"depth {self.depth} exceeds the enumeration cap {self.max_depth}"
            )
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.dim != 1:
            raise ValueError("only dim = 1 trees are supported")

    @property
    def step(self) -> float:
        return math.sqrt(self.dt)

    h = step

    @property
    def horizon(self) -> float:
        return self.depth * self.dt

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.depth + 1) - 1

    @property
    def n_leaves(self) -> int:
        return 2**self.depth

    def level_size(self, level: int) -> int:
        return 2**level

    def time(self, level: int) -> float:
        return level * self.dt

    def levels(self) -> range:
        return range(self.depth + 1)

    def values(self, level: int) -> np.ndarray:
        """Path value omega_t at every node of ``level`` (read-only)."""
        return _level_values(self.dt, level)

    def path_matrix(self, level: int) -> np.ndarray:
        """Stopped paths of all nodes at ``level``, shape ``(2**level, level + 1)`` (read-only)."""
        return _path_matrix(self.dt, level)

    def running_max(self, level: int) -> np.ndarray:
        return _running_max(self.dt, level)

    def point(self, level: int, index: int) -> "PathPoint":
        if not 0 <= level <= self.depth:
            raise ValueError(f"level {level} outside [0, {self.depth}]")
        if not 0 <= index < 2**level:
            raise ValueError(f"index {index} outside level {level}")
        return PathPoint(
            path=tuple(self.path_matrix_row(level, index)),
            dt=self.dt,
            index=index,
        )

    def path_matrix_row(self, level: int, index: int) -> np.ndarray:
        return np.array(self.path_matrix(level)[index])

    def parse(self, label: str) -> "PathPoint":
        level, index = parse_label(label)
        return self.point(level, index)

    @property
    def root(self) -> "PathPoint":
        return self.point(0, 0)

    def nodes(self) -> Iterator["PathPoint"]:
        for k in self.levels():
            for i in range(2**k):
                yield self.point(k, i)

    def flat_id(self, level: int, index: int) -> int:
        return 2**level - 1 + index

    def node_levels(self) -> np.ndarray:
        """Level of every node in flat (level-major) order."""
        return np.concatenate([np.full(2**k, k) for k in self.levels()])

    def node_times(self) -> np.ndarray:
        return self.node_levels() * self.dt

    def forward_paths(self) -> np.ndarray:
        """All stopped paths frozen after their own time, shape ``(n_nodes, N + 1)``."""
        rows = []
        for k in self.levels():
            pm = self.path_matrix(k)
            pad = np.repeat(pm[:, -1:], self.depth - k, axis=1)
            rows.append(np.hstack([pm, pad]))
        return np.vstack(rows)

    def backward_paths(self) -> np.ndarray:
        """Paths read backwards from their own time: column ``s`` is omega at ``(t - s) v 0``."""
        rows = []
        for k in self.levels():
            pm = self.path_matrix(k)[:, ::-1]
            pad = np.zeros((pm.shape[0], self.depth - k))
            rows.append(np.hstack([pm, pad]))
        return np.vstack(rows)

    def to_json(self) -> str:
        return json.dumps({"depth": self.depth, "dt": self.dt, "dim": self.dim})

    @classmethod
    def from_json(cls, text: str | dict) -> "PathTree":
        data = json.loads(text) if isinstance(text, str) else dict(text)
        return cls(depth=int(data["depth"]), dt=float(data["dt"]), dim=int(data.get("dim", 1)))


@lru_cache(maxsize=256)
def _path_matrix(dt: float, level: int) -> np.ndarray:
    h = math.sqrt(dt)
    idx = np.arange(2**level, dtype=np.int64)
    out = np.zeros((idx.size, level + 1))
    for j in range(1, level + 1):
        bit = (idx >> (level - j)) & 1
        out[:, j] = out[:, j - 1] + h * (2 * bit - 1)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=256)
def _level_values(dt: float, level: int) -> np.ndarray:
    out = _path_matrix(dt, level)[:, -1].copy()
    out.flags.writeable = False
    return out


@lru_cache(maxsize=256)
def _running_max(dt: float, level: int) -> np.ndarray:
    out = _path_matrix(dt, level).max(axis=1)
    out.flags.writeable = False
    return out


def parse_label(label: str) -> tuple[int, int]:
    level_txt, _, bits = label.partition(":")
    level = int(level_txt)
    if len(bits) != level or any(c not in "01" for c in bits):
        raise ValueError(f"malformed node label {label!r}")
    return level, int(bits, 2) if bits else 0


def format_label(level: int, index: int) -> str:
    return f"{level}:{format(index, f'0{level}b') if level else ''}"


@dataclass(frozen=True)
class PathPoint:
    """A point theta = (t, omega) given by its stopped path on a time grid.

    ``index`` is the bitstring integer when the point is a node of a tree;
    free-standing points (arbitrary path values) leave it as ``None``.
    """

    path: tuple[float, ...]
    dt: float
    index: int | None = None

    @property
    def level(self) -> int:
        return len(self.path) - 1

    @property
    def t(self) -> float:
        return self.level * self.dt

    @property
    def value(self) -> float:
        return self.path[-1]

    @property
    def label(self) -> str:
        if self.index is None:
            raise ValueError("free-standing path point has no tree label")
        return format_label(self.level, self.index)

    def stopped(self) -> np.ndarray:
        return np.asarray(self.path, dtype=float)

    @classmethod
    def from_values(cls, values: Sequence[float], dt: float) -> "PathPoint":
        return cls(path=tuple(float(v) for v in values), dt=dt)


def _check_grid(a: PathPoint, b: PathPoint) -> None:
    if not math.isclose(a.dt, b.dt, rel_tol=1e-12, abs_tol=0.0):
        raise GridMismatchError(f"time steps differ: {a.dt} vs {b.dt}")


def _frozen(path: np.ndarray, length: int) -> np.ndarray:
    return np.concatenate([path, np.full(length - path.size, path[-1])])


def dupire_distance(a: PathPoint, b: PathPoint) -> float:
    """|t - t'| + sup_s |omega_{t^s} - omega'_{t'^s}| on the common grid."""
    _check_grid(a, b)
    n = max(a.level, b.level) + 1
    fa, fb = _frozen(a.stopped(), n), _frozen(b.stopped(), n)
    return abs(a.level - b.level) * a.dt + float(np.max(np.abs(fa - fb)))


def backward_distance(a: PathPoint, b: PathPoint) -> float:
    """|t - t'| + sup_s |omega_{(t-s) v 0} - omega'_{(t'-s) v 0}|, paths aligned at the right."""
    _check_grid(a, b)
    n = max(a.level, b.level) + 1
    ra = np.concatenate([a.stopped()[::-1], np.zeros(n - a.level - 1)])
    rb = np.concatenate([b.stopped()[::-1], np.zeros(n - b.level - 1)])
    return abs(a.level - b.level) * a.dt + float(np.max(np.abs(ra - rb)))


def max_lag(delta: float, dt: float) -> int:
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return int(math.floor(delta / dt + _TIME_EPS))


def modulus(a: PathPoint, delta: float) -> float:
    """Oscillation of the stopped path over grid windows of width ``delta``."""
    lag = max_lag(delta, a.dt)
    return path_modulus(a.stopped(), lag)


def path_modulus(path: np.ndarray, lag: int) -> float:
    best = 0.0
    for j in range(1, min(lag, path.size - 1) + 1):
        best = max(best, float(np.max(np.abs(path[j:] - path[:-j]))))
    return best


def modulus_matrix(paths: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """Row-wise modulus of forward-frozen paths for per-row lag limits."""
    out = np.zeros(paths.shape[0])
    for j in range(1, paths.shape[1]):
        osc = np.max(np.abs(paths[:, j:] - paths[:, :-j]), axis=1)
        out = np.where(lags >= j, np.maximum(out, osc), out)
    return out


def dupire_matrix(tree: PathTree, rows: np.ndarray | None = None) -> np.ndarray:
    """Pairwise Dupire distances between ``rows`` (flat ids) and all nodes."""
    return _pairwise(tree, tree.forward_paths(), rows)


def backward_matrix(tree: PathTree, rows: np.ndarray | None = None) -> np.ndarray:
    return _pairwise(tree, tree.backward_paths(), rows)


def _pairwise(tree: PathTree, paths: np.ndarray, rows: np.ndarray | None) -> np.ndarray:
    times = tree.node_times()
    rows = np.arange(tree.n_nodes) if rows is None else np.asarray(rows)
    sup = np.zeros((rows.size, tree.n_nodes))
    for s in range(paths.shape[1]):
        np.maximum(sup, np.abs(paths[rows, s][:, None] - paths[None, :, s]), out=sup)
    return np.abs(times[rows][:, None] - times[None, :]) + sup


def concat(prefix: Sequence[float], tail: Sequence[float], length: int | None = None) -> np.ndarray:
    """Concatenate a stopped path with a tail started at the origin."""
    prefix = np.asarray(prefix, dtype=float)
    tail = np.asarray(tail, dtype=float)
    if prefix.size == 0 or tail.size == 0:
        raise ValueError("prefix and tail must be nonempty")
    if tail[0] != 0.0:
        raise ValueError("tail must start at the origin")
    out = np.concatenate([prefix, prefix[-1] + tail[1:]])
    if length is not None and out.size != length:
        raise ValueError(f"concatenated length {out.size} != grid length {length}")
    return out


class TreeProcess:
    """One real value per node of a :class:`PathTree`."""

    __slots__ = ("tree", "levels")

    def __init__(self, tree: PathTree, levels: Sequence[Sequence[float]]):
        if len(levels) != tree.depth + 1:
            raise ValueError(f"expected {tree.depth + 1} levels, got {len(levels)}")
        arrays = []
        for k, row in enumerate(levels):
            arr = np.array(row, dtype=float)
            if arr.shape != (2**k,):
                raise ValueError(f"level {k} must have {2**k} values, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite value at level {k}")
            arrays.append(arr)
        self.tree = tree
        self.levels = tuple(arrays)

    @classmethod
    def constant(cls, tree: PathTree, c: float) -> "TreeProcess":
        return cls(tree, [np.full(2**k, float(c)) for k in tree.levels()])

    @classmethod
    def from_function(
        cls, tree: PathTree, fn: Callable[[float, np.ndarray], np.ndarray]
    ) -> "TreeProcess":
        """Build from ``fn(t, paths)`` where ``paths`` has shape ``(2**k, k + 1)``."""
        return cls(
            tree,
            [
                np.broadcast_to(np.asarray(fn(tree.time(k), tree.path_matrix(k)), float), (2**k,))
                for k in tree.levels()
            ],
        )

    @classmethod
    def from_leaves(cls, tree: PathTree, leaves: Sequence[float], fill: float = 0.0) -> "TreeProcess":
        leaves = np.asarray(leaves, dtype=float)
        if leaves.shape != (tree.n_leaves,):
            raise ValueError(f"expected {tree.n_leaves} leaf values, got {leaves.shape}")
        return cls(tree, [np.full(2**k, fill) for k in range(tree.depth)] + [leaves])

    @classmethod
    def from_flat(cls, tree: PathTree, flat: np.ndarray) -> "TreeProcess":
        flat = np.asarray(flat, dtype=float)
        return cls(tree, [flat[2**k - 1 : 2 ** (k + 1) - 1] for k in tree.levels()])

    @property
    def root(self) -> float:
        return float(self.levels[0][0])

    @property
    def leaves(self) -> np.ndarray:
        return self.levels[-1]

    def flat(self) -> np.ndarray:
        return np.concatenate(self.levels)

    def __getitem__(self, key) -> float:
        if isinstance(key, PathPoint):
            if key.index is None:
                raise KeyError("path point is not a tree node")
            return float(self.levels[key.level][key.index])
        if isinstance(key, str):
            key = parse_label(key)
        level, index = key
        return float(self.levels[level][index])

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TreeProcess":
        return TreeProcess(self.tree, [fn(v) for v in self.levels])

    def _binary(self, other, op) -> "TreeProcess":
        if isinstance(other, TreeProcess):
            if other.tree != self.tree:
                raise ValueError("processes live on different trees")
            return TreeProcess(self.tree, [op(a, b) for a, b in zip(self.levels, other.levels)])
        return TreeProcess(self.tree, [op(a, other) for a in self.levels])

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)

    def maximum(self, other) -> "TreeProcess":
        return self._binary(other, np.maximum)

    def minimum(self, other) -> "TreeProcess":
        return self._binary(other, np.minimum)

    def positive_part(self) -> "TreeProcess":
        return self.map(lambda v: np.maximum(v, 0.0))

    def sup_norm(self) -> float:
        return float(max(np.max(np.abs(v)) for v in self.levels))

    def max(self) -> float:
        return float(max(np.max(v) for v in self.levels))

    def min(self) -> float:
        return float(min(np.min(v) for v in self.levels))

    def equals(self, other: "TreeProcess") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))

    def max_abs_diff(self, other: "TreeProcess") -> float:
        return float(max(np.max(np.abs(a - b)) for a, b in zip(self.levels, other.levels)))

    def __repr__(self) -> str:
        return f"TreeProcess(depth={self.tree.depth}, root={self.root:.12g})"


def time_process(tree: PathTree) -> TreeProcess:
    return TreeProcess(tree, [np.full(2**k, tree.time(k)) for k in tree.levels()])


def canonical_process(tree: PathTree) -> TreeProcess:
    """The canonical process B: omega_t at each node."""
    return TreeProcess(tree, [tree.values(k) for k in tree.levels()])


def running_max_process(tree: PathTree) -> TreeProcess:
    return TreeProcess(tree, [tree.running_max(k) for k in tree.levels()])


def subtree(tree: PathTree, level: int) -> PathTree:
    """Tree of the remaining horizon below a node at ``level``."""
    if level >= tree.depth:
        raise ValueError("no subtree below a leaf")
    return PathTree(depth=tree.depth - level, dt=tree.dt, max_depth=tree.max_depth)


def descendants(level: int, index: int, rel_level: int) -> np.ndarray:
    """Indices at ``level + rel_level`` below node ``(level, index)``."""
    return (index << rel_level) + np.arange(2**rel_level)


def shift_process(X: TreeProcess, a: PathPoint) -> TreeProcess:
    """X^{t,omega}: the process on the subtree at ``a``, X(t + s, omega (x)_t omega')."""
    if a.index is None:
        raise ValueError("shift needs a tree node")
    if a.level == 0:
        return X
    sub = subtree(X.tree, a.level)
    return TreeProcess(
        sub, [X.levels[a.level + j][descendants(a.level, a.index, j)] for j in sub.levels()]
    )


class StoppingRegion:
    """Boolean marks per node; each root-to-leaf path carries exactly one mark."""

    __slots__ = ("tree", "marks")

    def __init__(self, tree: PathTree, marks: Sequence[Sequence[bool]], validate: bool = True):
        self.tree = tree
        self.marks = tuple(np.array(m, dtype=bool) for m in marks)
        if validate:
            self.validate()

    def validate(self) -> None:
        if len(self.marks) != self.tree.depth + 1:
            raise InvalidRegionError("wrong number of levels")
        stopped = np.zeros(1, dtype=bool)
        for k, m in enumerate(self.marks):
            if m.shape != (2**k,):
                raise InvalidRegionError(f"level {k} has shape {m.shape}")
            if k:
                stopped = np.repeat(stopped, 2)
            clash = m & stopped
            if clash.any():
                bad = int(np.flatnonzero(clash)[0])
                raise InvalidRegionError(
                    f"node {format_label(k, bad)} lies below another marked node"
                )
            stopped = stopped | m
        if not stopped.all():
            bad = int(np.flatnonzero(~stopped)[0])
            raise InvalidRegionError(
                f"path ending at {format_label(self.tree.depth, bad)} is never stopped"
            )

    @classmethod
    def leaves(cls, tree: PathTree) -> "StoppingRegion":
        return cls.at_level(tree, tree.depth)

    @classmethod
    def at_level(cls, tree: PathTree, level: int) -> "StoppingRegion":
        return cls(tree, [np.full(2**k, k == level) for k in tree.levels()])

    @classmethod
    def root(cls, tree: PathTree) -> "StoppingRegion":
        return cls.at_level(tree, 0)

    @classmethod
    def from_stop_levels(cls, tree: PathTree, stop_levels: Sequence[int]) -> "StoppingRegion":
        """Build from the stopping level of every leaf path (must be consistent)."""
        stop_levels = np.asarray(stop_levels)
        marks = []
        for k in tree.levels():
            per = stop_levels.reshape(2**k, -1)
            marks.append(per[:, 0] == k)
        return cls(tree, marks)

    @property
    def is_positive(self) -> bool:
        return not bool(self.marks[0][0])

    def contains(self, level: int, index: int) -> bool:
        return bool(self.marks[level][index])

    def active(self) -> tuple[np.ndarray, ...]:
        """Per level, nodes strictly before the region (not yet stopped)."""
        out = []
        stopped = np.zeros(1, dtype=bool)
        for k, m in enumerate(self.marks):
            if k:
                stopped = np.repeat(stopped, 2)
            out.append(~stopped & ~m)
            stopped = stopped | m
        return tuple(out)

    def reached(self) -> tuple[np.ndarray, ...]:
        """Per level, nodes at or before the region."""
        return tuple(a | m for a, m in zip(self.active(), self.marks))

    def stop_levels(self) -> np.ndarray:
        """Level at which each leaf path is stopped."""
        out = np.empty(self.tree.n_leaves, dtype=int)
        for k, m in enumerate(self.marks):
            hit = np.repeat(m, 2 ** (self.tree.depth - k))
            out[hit] = k
        return out

    def dominates(self, point: PathPoint) -> bool:
        """True when no strict ancestor of ``point`` is marked."""
        if point.index is None:
            return False
        return not any(
            self.marks[j][point.index >> (point.level - j)] for j in range(point.level)
        )

    def shifted(self, point: PathPoint) -> "StoppingRegion":
        """Restriction of the region to the subtree at ``point``."""
        sub = subtree(self.tree, point.level)
        return StoppingRegion(
            sub,
            [self.marks[point.level + j][descendants(point.level, point.index, j)] for j in sub.levels()],
        )

    def labels(self) -> list[str]:
        return [format_label(k, int(i)) for k, m in enumerate(self.marks) for i in np.flatnonzero(m)]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, StoppingRegion)
            and other.tree == self.tree
            and all(np.array_equal(a, b) for a, b in zip(self.marks, other.marks))
        )

    def __repr__(self) -> str:
        return f"StoppingRegion({', '.join(self.labels()[:8])}{'...' if len(self.labels()) > 8 else ''})"


def hitting_time(tree: PathTree, s: float, box: tuple[float, float], positive: bool = True) -> StoppingRegion:
    """First node with time >= s or path value outside the open interval ``box``."""
    lo, hi = box
    if not 0 < s <= tree.horizon + _TIME_EPS:
        raise ValueError(f"s must lie in (0, T], got {s}")
    if positive and not lo < 0.0 < hi:
        raise ValueError("the box must contain the origin for a positive hitting time")
    marks = []
    stopped = np.zeros(1, dtype=bool)
    for k in tree.levels():
        if k:
            stopped = np.repeat(stopped, 2)
        x = tree.values(k)
        exit_ = (tree.time(k) >= s - _TIME_EPS) | (x <= lo) | (x >= hi)
        m = exit_ & ~stopped
        marks.append(m)
        stopped = stopped | m
    return StoppingRegion(tree, marks)
