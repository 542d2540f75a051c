"""Drift-controlled expectations on the binary tree.

Under a drift ``mu`` the up-move has probability ``p = (1 + mu h) / 2``.  The
family of measures is every adapted drift with ``|mu| <= L``; the one-step
objective is affine in ``mu`` so the optimum sits at ``mu = +-L``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pathspace import (
    InvalidRegionError,
    PathPoint,
    PathTree,
    StoppingRegion,
    TreeProcess,
    format_label,
    parse_label,
    shift_process,
)


class DriftBoundError(ValueError):
    """Raised when L * sqrt(dt) > 1, i.e. tilted probabilities leave [0, 1]."""


def check_drift_bound(L: float, dt: float) -> None:
    if L < 0:
        raise DriftBoundError(f"drift bound must be nonnegative, got {L}")
    if L * math.sqrt(dt) > 1.0 + 1e-15:
        raise DriftBoundError(f"L * sqrt(dt) = {L * math.sqrt(dt):.6g} > 1")


@dataclass(frozen=True)
class DriftBound:
    L: float
    dt: float

    def __post_init__(self) -> None:
        check_drift_bound(self.L, self.dt)

    @property
    def h(self) -> float:
        return math.sqrt(self.dt)


def one_step_sup(v_up, v_down, L: float, dt: float):
    """max over |mu| <= L of p(mu) v_up + (1 - p(mu)) v_down."""
    check_drift_bound(L, dt)
    return _sup(v_up, v_down, L * math.sqrt(dt) / 2)


def one_step_inf(v_up, v_down, L: float, dt: float):
    check_drift_bound(L, dt)
    return _inf(v_up, v_down, L * math.sqrt(dt) / 2)


# The tilted mean below uses the same operation order, so under the argmax
# drift it reproduces _sup bit for bit.
def _sup(a, b, half_lh):
    return (a + b) / 2 + half_lh * np.abs(a - b)


def _inf(a, b, half_lh):
    return (a + b) / 2 - half_lh * np.abs(a - b)


def tilted_mean(v_up, v_down, mu, dt: float):
    """E^{P_mu}[child | node] for drift ``mu`` (scalar or array)."""
    h = math.sqrt(dt)
    return (v_up + v_down) / 2 + (np.asarray(mu, dtype=float) * h / 2) * (v_up - v_down)


def children(level_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(up, down) child values for every parent of a level."""
    return level_values[1::2], level_values[0::2]


@dataclass(frozen=True)
class DriftControl:
    """One drift per non-leaf node, |mu| <= L."""

    tree: PathTree
    L: float
    levels: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        check_drift_bound(self.L, self.tree.dt)
        if len(self.levels) != self.tree.depth:
            raise ValueError("a drift control has one level per non-leaf level")
        for k, mu in enumerate(self.levels):
            if np.shape(mu) != (2**k,):
                raise ValueError(f"drift level {k} has shape {np.shape(mu)}")
            if np.any(np.abs(mu) > self.L + 1e-15):
                raise ValueError(f"drift exceeds the bound {self.L} at level {k}")

    @classmethod
    def constant(cls, tree: PathTree, L: float, mu: float) -> "DriftControl":
        return cls(tree, L, tuple(np.full(2**k, float(mu)) for k in range(tree.depth)))

    def __getitem__(self, key) -> float:
        if isinstance(key, str):
            key = parse_label(key)
        level, index = key
        return float(self.levels[level][index])

    def to_json(self) -> str:
        nodes = {
            format_label(k, i): float(mu[i]) for k, mu in enumerate(self.levels) for i in range(mu.size)
        }
        return json.dumps(
            {"depth": self.tree.depth, "dt": self.tree.dt, "L": self.L, "drift": nodes},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DriftControl":
        data = json.loads(text)
        tree = PathTree(depth=int(data["depth"]), dt=float(data["dt"]))
        levels = [np.zeros(2**k) for k in range(tree.depth)]
        for label, mu in data["drift"].items():
            k, i = parse_label(label)
            levels[k][i] = mu
        return cls(tree, float(data["L"]), tuple(levels))


def as_process(X, tree: PathTree | None = None) -> TreeProcess:
    """Accept a TreeProcess or a vector of leaf values."""
    if isinstance(X, TreeProcess):
        return X
    if tree is None:
        raise ValueError("leaf values need a tree")
    return TreeProcess.from_leaves(tree, X)


def _resolve(X, upto: StoppingRegion | None, tree: PathTree | None) -> tuple[TreeProcess, StoppingRegion]:
    if isinstance(X, TreeProcess):
        proc = X
    else:
        if upto is not None and tree is None:
            tree = upto.tree
        proc = as_process(X, tree)
        if upto is not None and any(m.any() for m in upto.marks[:-1]):
            raise InvalidRegionError("leaf values can only be stopped at the leaves")
    region = StoppingRegion.leaves(proc.tree) if upto is None else upto
    if region.tree != proc.tree:
        raise InvalidRegionError("stopping region lives on a different tree")
    return proc, region


def backward_table(X: TreeProcess, upto: StoppingRegion, L: float, sign: int = 1) -> TreeProcess:
    """Conditional E_L-bar (sign=+1) or E_L-under (sign=-1) of X stopped at ``upto``.

    Nodes past the region carry the stopped value X_tau of their path.
    """
    tree = X.tree
    check_drift_bound(L, tree.dt)
    half = L * tree.step / 2
    op = _sup if sign > 0 else _inf
    reached = upto.reached()
    out: list[np.ndarray] = [None] * (tree.depth + 1)  # type: ignore[list-item]
    out[tree.depth] = X.levels[tree.depth].copy()
    for k in range(tree.depth - 1, -1, -1):
        up, down = children(out[k + 1])
        cont = op(up, down, half)
        out[k] = np.where(upto.marks[k], X.levels[k], cont)
    # nodes past the region keep the stopped value of their path
    for k in range(1, tree.depth + 1):
        out[k] = np.where(reached[k], out[k], np.repeat(out[k - 1], 2))
    return TreeProcess(tree, out)


def conditional_sup(X, upto: StoppingRegion | None = None, L: float = 0.0, tree: PathTree | None = None) -> TreeProcess:
    proc, region = _resolve(X, upto, tree)
    return backward_table(proc, region, L, sign=1)


def conditional_inf(X, upto: StoppingRegion | None = None, L: float = 0.0, tree: PathTree | None = None) -> TreeProcess:
    proc, region = _resolve(X, upto, tree)
    return backward_table(proc, region, L, sign=-1)


def _value_at(table: TreeProcess, region: StoppingRegion, at: PathPoint | None) -> float:
    if at is None:
        return table.root
    if not region.dominates(at):
        raise InvalidRegionError(f"stopping region does not dominate {at.label}")
    return table[at]


def sup_expectation(X, at: PathPoint | None = None, upto: StoppingRegion | None = None,
                    L: float = 0.0, tree: PathTree | None = None) -> float:
    """E_L-bar of X stopped at ``upto``, conditioned on the node ``at`` (root by default)."""
    proc, region = _resolve(X, upto, tree)
    return _value_at(backward_table(proc, region, L, 1), region, at)


def inf_expectation(X, at: PathPoint | None = None, upto: StoppingRegion | None = None,
                    L: float = 0.0, tree: PathTree | None = None) -> float:
    proc, region = _resolve(X, upto, tree)
    return _value_at(backward_table(proc, region, L, -1), region, at)


def argmax_drift(table: TreeProcess, L: float) -> DriftControl:
    """Per-node drift maximizing the tilted child mean of ``table``; ties go to +L."""
    levels = []
    for k in range(table.tree.depth):
        up, down = children(table.levels[k + 1])
        levels.append(np.where(up >= down, L, -L).astype(float))
    return DriftControl(table.tree, L, tuple(levels))


def argmin_drift(table: TreeProcess, L: float) -> DriftControl:
    levels = []
    for k in range(table.tree.depth):
        up, down = children(table.levels[k + 1])
        levels.append(np.where(up <= down, -L, L).astype(float))
    return DriftControl(table.tree, L, tuple(levels))


def worst_drift(X, upto: StoppingRegion | None = None, L: float = 0.0, tree: PathTree | None = None) -> DriftControl:
    """The maximizing drift of the E_L-bar problem (ties -> +L)."""
    return argmax_drift(conditional_sup(X, upto, L, tree), L)


def tilted_table(X, mu: DriftControl, upto: StoppingRegion | None = None) -> TreeProcess:
    """Plain conditional expectation under P_mu of X stopped at ``upto``."""
    proc, region = _resolve(X, upto, mu.tree)
    tree = proc.tree
    out: list[np.ndarray] = [None] * (tree.depth + 1)  # type: ignore[list-item]
    out[tree.depth] = proc.levels[tree.depth].copy()
    for k in range(tree.depth - 1, -1, -1):
        up, down = children(out[k + 1])
        out[k] = np.where(region.marks[k], proc.levels[k], tilted_mean(up, down, mu.levels[k], tree.dt))
    return TreeProcess(tree, out)


def tilted_expectation(X, mu: DriftControl, upto: StoppingRegion | None = None) -> float:
    return tilted_table(X, mu, upto).root


def controlled_value(running: TreeProcess, terminal, L: float, discount: float = 0.0,
                     sign: int = 1) -> TreeProcess:
    """E_L-bar[ sum_s e^{lambda s} running_{t+s} dt + e^{lambda (T-t)} terminal | F_t ].

    Left-point rule in time; the DP is V = running dt + e^{lambda dt} E_L-bar[V_child].
    """
    tree = running.tree
    check_drift_bound(L, tree.dt)
    terminal = np.asarray(terminal.leaves if isinstance(terminal, TreeProcess) else terminal, float)
    if terminal.shape != (tree.n_leaves,):
        raise ValueError("terminal must hold one value per leaf")
    half = L * tree.step / 2
    op = _sup if sign > 0 else _inf
    growth = math.exp(discount * tree.dt)
    out: list[np.ndarray] = [None] * (tree.depth + 1)  # type: ignore[list-item]
    out[tree.depth] = terminal.copy()
    for k in range(tree.depth - 1, -1, -1):
        up, down = children(out[k + 1])
        out[k] = running.levels[k] * tree.dt + growth * op(up, down, half)
    return TreeProcess(tree, out)


# ---------------------------------------------------------------------------
# Brute-force oracle


def _bang_bang_probs(depth: int, L: float, dt: float, codes: np.ndarray) -> np.ndarray:
    """Reach probabilities of the 2**depth level-``depth`` nodes for each control code.

    Bit ``j`` of a code sets the drift of the ``j``-th interior node (flat,
    level-major order) to +L when 1, -L when 0.
    """
    h = math.sqrt(dt)
    p_plus, p_minus = (1 + L * h) / 2, (1 - L * h) / 2
    probs = np.ones((codes.size, 1))
    for k in range(depth):
        flat0 = 2**k - 1
        bits = (codes[:, None] >> (flat0 + np.arange(2**k))[None, :]) & 1
        p_up = np.where(bits == 1, p_plus, p_minus)
        nxt = np.empty((codes.size, 2 ** (k + 1)))
        nxt[:, 1::2] = probs * p_up
        nxt[:, 0::2] = probs * (1 - p_up)
        probs = nxt
    return probs


def brute_force_sup(leaves: Sequence[float], depth: int, L: float, dt: float,
                    sign: int = 1, chunk: int = 1 << 14) -> float:
    """Optimum of the tilted expectation of leaf payoffs over bang-bang drift controls.

    Depth <= 4 enumerates every control on every interior node.  At depth 5
    the 2**31 controls are out of reach, so controls on levels 0..3 are
    enumerated and each last-level node independently takes the better of its
    two drifts (its choice touches only its own two leaves).
    """
    leaves = np.asarray(leaves, dtype=float)
    if leaves.shape != (2**depth,):
        raise ValueError("leaf vector does not match depth")
    if depth > 5:
        raise ValueError("brute-force enumeration is limited to depth <= 5")
    check_drift_bound(L, dt)
    pick = np.max if sign > 0 else np.min
    if depth <= 4:
        top, values = depth, leaves
    else:
        h = math.sqrt(dt)
        p_plus, p_minus = (1 + L * h) / 2, (1 - L * h) / 2
        up, down = leaves[1::2], leaves[0::2]
        both = np.stack([p_plus * up + (1 - p_plus) * down, p_minus * up + (1 - p_minus) * down])
        top, values = depth - 1, pick(both, axis=0)
    n_codes = 2 ** (2**top - 1)
    best = -np.inf if sign > 0 else np.inf
    for start in range(0, n_codes, chunk):
        codes = np.arange(start, min(start + chunk, n_codes), dtype=np.int64)
        vals = _bang_bang_probs(top, L, dt, codes) @ values
        best = max(best, float(vals.max())) if sign > 0 else min(best, float(vals.min()))
    return best


def brute_force_controlled(running: TreeProcess, terminal: Sequence[float], L: float,
                           discount: float = 0.0) -> float:
    """Root value of the controlled running-cost problem by enumerating all bang-bang controls."""
    tree = running.tree
    if tree.depth > 4:
        raise ValueError("brute-force enumeration is limited to depth <= 4")
    terminal = np.asarray(terminal, dtype=float)
    n_codes = 2 ** (2**tree.depth - 1)
    codes = np.arange(n_codes, dtype=np.int64)
    total = np.zeros(n_codes)
    for k in range(tree.depth):
        weight = math.exp(discount * k * tree.dt) * tree.dt
        total += weight * (_bang_bang_probs(k, L, tree.dt, codes) @ running.levels[k])
    total += math.exp(discount * tree.horizon) * (_bang_bang_probs(tree.depth, L, tree.dt, codes) @ terminal)
    return float(total.max())


def exhaustive_sup_from(X: TreeProcess, at: PathPoint, L: float, sign: int = 1) -> float:
    """Brute-force E_L value of the leaf payoff conditioned on ``at`` (subtree enumeration)."""
    sub = shift_process(X, at)
    return brute_force_sup(sub.leaves, sub.tree.depth, L, sub.tree.dt, sign=sign)
