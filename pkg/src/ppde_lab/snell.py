"""Optimal stopping under the sublinear expectation E_L-bar."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nlexp import _sup, argmax_drift, check_drift_bound, children, sup_expectation
from .pathspace import (
    InvalidRegionError,
    PathPoint,
    StoppingRegion,
    TreeProcess,
    format_label,
)

BRUTE_FORCE_MAX_DEPTH = 5


@dataclass(frozen=True)
class SnellResult:
    envelope: TreeProcess
    optimal_region: StoppingRegion
    value: float
    horizon: StoppingRegion
    L: float

    @property
    def Y(self) -> TreeProcess:
        return self.envelope

    @property
    def tau_star(self) -> StoppingRegion:
        return self.optimal_region


def stopped_at(X: TreeProcess, horizon: StoppingRegion) -> TreeProcess:
    """X_{t ^ H}: values after the horizon replaced by the value at the horizon."""
    reached = horizon.reached()
    out = [X.levels[0].copy()]
    for k in range(1, X.tree.depth + 1):
        out.append(np.where(reached[k], X.levels[k], np.repeat(out[k - 1], 2)))
    return TreeProcess(X.tree, out)


def snell_envelope(X: TreeProcess, horizon: StoppingRegion | None = None, L: float = 0.0) -> SnellResult:
    """Smallest E_L-bar supermartingale above X up to ``horizon``.

    Y = X on the horizon and Y = max(X, one-step sup of the children) before
    it.  Past the horizon Y is frozen at its horizon value.  The optimal rule
    marks, on each path, the first node where Y == X; since Y is a ``max`` of
    X and the continuation, the equality test is exact.
    """
    tree = X.tree
    horizon = StoppingRegion.leaves(tree) if horizon is None else horizon
    if horizon.tree != tree:
        raise InvalidRegionError("horizon lives on a different tree")
    check_drift_bound(L, tree.dt)
    half = L * tree.step / 2
    reached = horizon.reached()
    Y: list[np.ndarray] = [None] * (tree.depth + 1)  # type: ignore[list-item]
    Y[tree.depth] = X.levels[tree.depth].copy()
    for k in range(tree.depth - 1, -1, -1):
        up, down = children(Y[k + 1])
        cont = np.maximum(X.levels[k], _sup(up, down, half))
        Y[k] = np.where(horizon.marks[k], X.levels[k], cont)
    for k in range(1, tree.depth + 1):
        Y[k] = np.where(reached[k], Y[k], np.repeat(Y[k - 1], 2))

    marks = []
    stopped = np.zeros(1, dtype=bool)
    for k in tree.levels():
        if k:
            stopped = np.repeat(stopped, 2)
        contact = (Y[k] == X.levels[k]) | horizon.marks[k]
        m = contact & ~stopped & reached[k]
        marks.append(m)
        stopped |= m
    envelope = TreeProcess(tree, Y)
    return SnellResult(
        envelope=envelope,
        optimal_region=StoppingRegion(tree, marks),
        value=envelope.root,
        horizon=horizon,
        L=L,
    )


def snell_drift(result: SnellResult):
    """Drift attaining the one-step sup of the envelope at every node."""
    return argmax_drift(result.envelope, result.L)


def _rule_values(X: TreeProcess, horizon: StoppingRegion, L: float, level: int, index: int) -> np.ndarray:
    """E_L-bar value of every stopping rule (dominated by the horizon) on the subtree at a node."""
    x = X.levels[level][index]
    if horizon.marks[level][index]:
        return np.array([x])
    up = _rule_values(X, horizon, L, level + 1, 2 * index + 1)
    down = _rule_values(X, horizon, L, level + 1, 2 * index)
    half = L * X.tree.step / 2
    pairs = _sup(up[:, None], down[None, :], half).ravel()
    return np.concatenate([[x], pairs])


def brute_force_snell(X: TreeProcess, horizon: StoppingRegion | None = None, L: float = 0.0,
                      max_depth: int = BRUTE_FORCE_MAX_DEPTH) -> float:
    """Maximum over every stopping rule tau <= H of E_L-bar[X_tau], by enumeration.

    The enumeration is recursive: a rule either stops at the node or pairs a
    rule on each child subtree, and each rule is valued by its own E_L-bar.
    """
    tree = X.tree
    horizon = StoppingRegion.leaves(tree) if horizon is None else horizon
    last = max(k for k, m in enumerate(horizon.marks) if m.any())
    if last > max_depth:
        raise ValueError(f"horizon depth {last} exceeds the brute-force limit {max_depth}")
    check_drift_bound(L, tree.dt)
    return float(_rule_values(X, horizon, L, 0, 0).max())


def enumerate_regions(horizon: StoppingRegion) -> list[StoppingRegion]:
    """Every stopping region dominated by ``horizon`` (small trees only)."""
    tree = horizon.tree

    def rules(level: int, index: int) -> list[dict[tuple[int, int], bool]]:
        here = [{(level, index): True}]
        if horizon.marks[level][index]:
            return here
        ups = rules(level + 1, 2 * index + 1)
        downs = rules(level + 1, 2 * index)
        return here + [{**u, **d} for u in ups for d in downs]

    out = []
    for marks_dict in rules(0, 0):
        marks = [np.zeros(2**k, dtype=bool) for k in tree.levels()]
        for (k, i) in marks_dict:
            marks[k][i] = True
        out.append(StoppingRegion(tree, marks))
    return out


def fundamental_point(u: TreeProcess, horizon: StoppingRegion, L: float = 0.0) -> PathPoint | None:
    """A node strictly before the horizon where (0, 0) is in the subjet of u.

    Returns None when u_0 <= E_L-bar[u_H] (hypothesis not met).
    """
    X = stopped_at(u, horizon)
    if not u.root > sup_expectation(X, upto=horizon, L=L):
        return None
    result = snell_envelope(X, horizon, L)
    active = horizon.active()
    for k, m in enumerate(result.optimal_region.marks):
        hits = np.flatnonzero(m & active[k])
        if hits.size:
            return u.tree.point(k, int(hits[0]))
    raise AssertionError("no contact before the horizon although u_0 > E[u_H]")


def describe(result: SnellResult) -> dict:
    return {
        "value": result.value,
        "L": result.L,
        "tau_star": result.optimal_region.labels(),
        "horizon": result.horizon.labels(),
    }

