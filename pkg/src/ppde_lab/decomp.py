"""Discrete Doob-Meyer and Skorokhod decompositions.

On a finite tree the Doob-Meyer split of a supermartingale is exact and read
off node by node: the compensator increment is the one-step drop of the
conditional mean, and it is known at the parent, so predictability comes for
free.  None of the convex-combination machinery needed in continuous time is
required here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nlexp import DriftControl, children, tilted_mean
from .pathspace import PathTree, TreeProcess, format_label
from .snell import SnellResult


class DecompositionError(ValueError):
    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} at node {node}")
        self.node = node


@dataclass(frozen=True)
class DoobMeyer:
    Y: TreeProcess
    M: TreeProcess
    A: TreeProcess
    mu: DriftControl

    def reassemble(self) -> TreeProcess:
        return self.M - self.A + self.Y.root


@dataclass(frozen=True)
class MartingaleRepr:
    Z: tuple[np.ndarray, ...]
    mu: DriftControl

    def reconstruct(self, M0: float = 0.0) -> TreeProcess:
        """Rebuild M from M0 via M_child = M_node + Z (dB - mu dt)."""
        tree = self.mu.tree
        h, dt = tree.step, tree.dt
        out = [np.array([float(M0)])]
        for k in range(tree.depth):
            drift = self.mu.levels[k] * dt
            nxt = np.empty(2 ** (k + 1))
            nxt[1::2] = out[k] + self.Z[k] * (h - drift)
            nxt[0::2] = out[k] + self.Z[k] * (-h - drift)
            out.append(nxt)
        return TreeProcess(tree, out)


@dataclass(frozen=True)
class SkorokhodPair:
    lam: np.ndarray
    eta: np.ndarray
    kappa: np.ndarray

    def identity_gap(self) -> float:
        return float(np.max(np.abs(self.lam - (self.eta - self.kappa))))

    def flat_off_mass(self) -> float:
        """sum_t 1{eta_t != 0} * (kappa_t - kappa_{t-1})."""
        dk = np.diff(self.kappa)
        return float(np.sum(dk[self.eta[1:] != 0]))


def _tol(scale: float) -> float:
    return 1e-12 * max(1.0, scale)


def doob_meyer(Y: TreeProcess, mu: DriftControl, tol: float | None = None) -> DoobMeyer:
    """Y = Y_0 + M - A with M a P_mu-martingale and A predictable nondecreasing."""
    tree = Y.tree
    if mu.tree != tree:
        raise DecompositionError("drift control lives on a different tree")
    tol = _tol(Y.sup_norm()) if tol is None else tol
    M = [np.zeros(1)]
    A = [np.zeros(1)]
    for k in range(tree.depth):
        up, down = children(Y.levels[k + 1])
        mean = tilted_mean(up, down, mu.levels[k], tree.dt)
        dA = Y.levels[k] - mean
        bad = np.flatnonzero(dA < -tol)
        if bad.size:
            raise DecompositionError(
                f"not a supermartingale (drop {dA[bad[0]]:.3g})", format_label(k, int(bad[0]))
            )
        dM = np.empty(2 ** (k + 1))
        dM[1::2] = up - mean
        dM[0::2] = down - mean
        M.append(np.repeat(M[k], 2) + dM)
        A.append(np.repeat(A[k] + dA, 2))
    return DoobMeyer(Y=Y, M=TreeProcess(tree, M), A=TreeProcess(tree, A), mu=mu)


def martingale_repr(M: TreeProcess, mu: DriftControl, tol: float | None = None) -> MartingaleRepr:
    """Z(node) = (M_up - M_down) / (2h) for a P_mu-martingale M."""
    tree = M.tree
    tol = _tol(M.sup_norm()) if tol is None else tol
    Z = []
    for k in range(tree.depth):
        up, down = children(M.levels[k + 1])
        gap = tilted_mean(up, down, mu.levels[k], tree.dt) - M.levels[k]
        bad = np.flatnonzero(np.abs(gap) > tol)
        if bad.size:
            raise DecompositionError(
                f"not a martingale (drift {gap[bad[0]]:.3g})", format_label(k, int(bad[0]))
            )
        Z.append((up - down) / (2 * tree.step))
    return MartingaleRepr(Z=tuple(Z), mu=mu)


def skorokhod(lam: Sequence[float]) -> SkorokhodPair:
    """kappa_t = -min_{s<=t} lambda_s, eta_t = lambda_t + kappa_t."""
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0 or lam[0] != 0.0:
        raise ValueError("lambda must start at 0")
    kappa = -np.minimum.accumulate(lam) + 0.0
    return SkorokhodPair(lam=lam, eta=lam + kappa, kappa=kappa)


def is_feasible(lam: np.ndarray, kappa: np.ndarray) -> bool:
    """(lam + kappa, kappa) is an admissible split: eta >= 0, kappa nondecreasing from 0."""
    return bool(
        kappa[0] == 0.0 and np.all(np.diff(kappa) >= 0) and np.all(lam + kappa >= 0)
    )


def minimality_counterexample(lam: Sequence[float], grid: Sequence[float]) -> np.ndarray | None:
    """Search grid-valued alternatives kappa' for one beating kappa somewhere.

    Enumerates every nondecreasing kappa' with kappa'_0 = 0 and values in
    ``grid``; returns the first feasible one with kappa'_t < kappa_t for some t.
    """
    lam = np.asarray(lam, dtype=float)
    kappa = skorokhod(lam).kappa
    grid = np.unique(np.asarray(grid, dtype=float))
    grid = grid[grid >= 0]
    n = lam.size

    def extend(prefix: list[float], start: int):
        if len(prefix) == n:
            yield np.array(prefix)
            return
        for j in range(start, grid.size):
            if lam[len(prefix)] + grid[j] < 0:
                continue
            yield from extend(prefix + [grid[j]], j)

    for alt in extend([0.0], int(np.searchsorted(grid, 0.0))):
        if np.any(alt < kappa):
            return alt
    return None


@dataclass
class ReflectionReport:
    max_deviation: float
    per_path: list[dict] = field(default_factory=list)
    kappa_bar: np.ndarray | None = None
    A_gap: np.ndarray | None = None

    @property
    def exact(self) -> bool:
        return self.max_deviation == 0.0

    def to_dict(self) -> dict:
        return {"max_deviation": self.max_deviation, "exact": self.exact, "paths": self.per_path}


def path_values(X: TreeProcess, leaf: int, upto: int) -> np.ndarray:
    """Values of X along the path to ``leaf`` for levels 0..upto."""
    N = X.tree.depth
    return np.array([X.levels[k][leaf >> (N - k)] for k in range(upto + 1)])


def backward_reflection(X: TreeProcess, snell: SnellResult, mu_star: DriftControl,
                        keep_paths: bool = False) -> ReflectionReport:
    """Compare the time-reversed Skorokhod compensator with A*_T - A*_t, path by path.

    With lambda_s = (M*_{T-s} - X_{T-s}) - (M*_T - X_T), the forward
    compensator kappa-bar_t = kappa_{T-t} must equal A*_T - A*_t, where T is
    the path's horizon level.
    """
    tree = X.tree
    if snell.envelope.tree != tree or mu_star.tree != tree:
        raise DecompositionError("inputs live on different trees")
    dm = doob_meyer(snell.envelope, mu_star)
    stop = snell.horizon.stop_levels()
    worst = 0.0
    paths = []
    kb_all = np.full((tree.n_leaves, tree.depth + 1), np.nan)
    ag_all = np.full_like(kb_all, np.nan)
    for leaf in range(tree.n_leaves):
        T = int(stop[leaf])
        Mp = path_values(dm.M, leaf, T)
        Xp = path_values(X, leaf, T)
        Ap = path_values(dm.A, leaf, T)
        lam = (Mp - Xp)[::-1] - (Mp[T] - Xp[T])
        pair = skorokhod(lam)
        kappa_bar = pair.kappa[::-1]
        A_gap = Ap[T] - Ap
        dev = float(np.max(np.abs(kappa_bar - A_gap)))
        worst = max(worst, dev)
        kb_all[leaf, : T + 1] = kappa_bar
        ag_all[leaf, : T + 1] = A_gap
        if keep_paths or dev != 0.0:
            paths.append({"leaf": format_label(tree.depth, leaf), "deviation": dev})
    return ReflectionReport(max_deviation=worst, per_path=paths, kappa_bar=kb_all, A_gap=ag_all)


def compensator_at(dm: DoobMeyer, region) -> np.ndarray:
    """A evaluated on the nodes of a stopping region, one entry per leaf path."""
    tree = dm.A.tree
    stop = region.stop_levels()
    return np.array([dm.A.levels[stop[j]][j >> (tree.depth - stop[j])] for j in range(tree.n_leaves)])


def dyadic(x: float, bits: int = 40) -> bool:
    """True if x is an integer multiple of 2**-bits (exactness check for fixtures)."""
    return math.ldexp(x, bits) == round(math.ldexp(x, bits))

