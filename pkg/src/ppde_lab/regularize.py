"""Sup/inf-convolution in the backward distance, semicontinuous envelopes, and eps_n."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pathspace import (
    PathPoint,
    PathTree,
    TreeProcess,
    backward_matrix,
    dupire_matrix,
    format_label,
    max_lag,
    modulus,
)

CHUNK = 256


@dataclass(frozen=True)
class ConvolutionResult:
    regularized: TreeProcess
    n: float
    M: float
    threshold: float
    argmax: np.ndarray
    # non-leaf nodes whose maximizers are all leaves
    leaf_only: tuple[np.ndarray, ...]

    @property
    def un(self) -> TreeProcess:
        return self.regularized

    def leaf_only_labels(self) -> list[str]:
        return [format_label(k, int(i)) for k, m in enumerate(self.leaf_only) for i in np.flatnonzero(m)]


def min_positive_distance(tree: PathTree) -> float:
    """Smallest nonzero backward distance between two nodes.

    Nodes at different levels are at least dt apart; two paths of one level
    differ somewhere by a nonzero multiple of 2h.
    """
    if tree.depth == 0:
        return math.inf
    return min(tree.dt, 2 * tree.step)


def finite_threshold(u: TreeProcess) -> float:
    """Above this weight the penalty beats every gain and u^n = u exactly."""
    return 2 * u.sup_norm() / min_positive_distance(u.tree)


def sup_convolution(u: TreeProcess, n: float, chunk: int = CHUNK) -> ConvolutionResult:
    """u^n(theta) = max over all nodes theta' of u(theta') - n * backward_distance(theta, theta').

    Candidates farther than 2M/n cannot beat theta' = theta and are pruned.
    """
    if not n > 0:
        raise ValueError(f"penalty weight must be positive, got {n}")
    tree = u.tree
    flat = u.flat()
    M = u.sup_norm()
    radius = 2 * M / n
    levels = tree.node_levels()
    out = np.empty(tree.n_nodes)
    arg = np.empty(tree.n_nodes, dtype=np.int64)
    leaf_only = np.zeros(tree.n_nodes, dtype=bool)
    for start in range(0, tree.n_nodes, chunk):
        rows = np.arange(start, min(start + chunk, tree.n_nodes))
        D = backward_matrix(tree, rows)
        val = np.where(D <= radius, flat[None, :] - n * D, -np.inf)
        best = val.max(axis=1)
        out[rows] = best
        arg[rows] = val.argmax(axis=1)
        ties = val == best[:, None]
        interior = levels[None, :] < tree.depth
        leaf_only[rows] = ~np.any(ties & interior, axis=1) & (levels[rows] < tree.depth)
    reg = TreeProcess.from_flat(tree, out)
    split = TreeProcess.from_flat(tree, leaf_only.astype(float))
    return ConvolutionResult(
        regularized=reg,
        n=float(n),
        M=M,
        threshold=finite_threshold(u),
        argmax=arg,
        leaf_only=tuple(lv.astype(bool) for lv in split.levels),
    )


def inf_convolution(v: TreeProcess, n: float, chunk: int = CHUNK) -> ConvolutionResult:
    """v^n = -(sup-convolution of -v)."""
    res = sup_convolution(-v, n, chunk)
    return ConvolutionResult(
        regularized=-res.regularized,
        n=res.n,
        M=res.M,
        threshold=res.threshold,
        argmax=res.argmax,
        leaf_only=res.leaf_only,
    )


def _envelope(w: TreeProcess, radius: float, sign: float) -> TreeProcess:
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    tree = w.tree
    flat = sign * w.flat()
    out = np.empty(tree.n_nodes)
    for start in range(0, tree.n_nodes, CHUNK):
        rows = np.arange(start, min(start + CHUNK, tree.n_nodes))
        D = dupire_matrix(tree, rows)
        out[rows] = np.where(D <= radius + 1e-12, flat[None, :], -np.inf).max(axis=1)
    return TreeProcess.from_flat(tree, sign * out)


def usc_envelope(w: TreeProcess, radius: float) -> TreeProcess:
    """max of w over the closed Dupire ball of the given radius."""
    return _envelope(w, radius, 1.0)


def lsc_envelope(w: TreeProcess, radius: float) -> TreeProcess:
    return _envelope(w, radius, -1.0)


def envelope_family(w: TreeProcess, radii: Sequence[float], upper: bool = True) -> dict[float, TreeProcess]:
    """The radius-indexed family standing in for the limsup (or liminf)."""
    fn = usc_envelope if upper else lsc_envelope
    return {float(r): fn(w, r) for r in sorted(radii, reverse=True)}


def epsilon_n(a: PathPoint, n: float, M: float) -> float:
    """(2M + 1) / n + rho-bar(a, 2M / n)."""
    if not n > 0:
        raise ValueError("n must be positive")
    if M < 0:
        raise ValueError("M must be nonnegative")
    return (2 * M + 1) / n + modulus(a, 2 * M / n)


def modulus_process(tree: PathTree, delta: float) -> TreeProcess:
    """rho-bar(theta, delta) at every node."""
    lag = max_lag(delta, tree.dt)
    levels = []
    for k in tree.levels():
        pm = tree.path_matrix(k)
        osc = np.zeros(pm.shape[0])
        for j in range(1, min(lag, k) + 1):
            osc = np.maximum(osc, np.max(np.abs(pm[:, j:] - pm[:, :-j]), axis=1))
        levels.append(osc)
    return TreeProcess(tree, levels)


def epsilon_n_process(tree: PathTree, n: float, M: float) -> TreeProcess:
    """epsilon_n at every node."""
    if not n > 0:
        raise ValueError("n must be positive")
    return modulus_process(tree, 2 * M / n) + (2 * M + 1) / n


def is_n_lipschitz(u: TreeProcess, n: float, slack: float = 0.0) -> tuple[bool, float]:
    """Check |u(a) - u(b)| <= n * backward_distance(a, b) over all pairs; returns (ok, worst excess)."""
    tree = u.tree
    flat = u.flat()
    worst = -math.inf
    for start in range(0, tree.n_nodes, CHUNK):
        rows = np.arange(start, min(start + CHUNK, tree.n_nodes))
        D = backward_matrix(tree, rows)
        excess = np.abs(flat[rows][:, None] - flat[None, :]) - n * D
        worst = max(worst, float(excess.max()))
    return worst <= slack, worst
