"""Semijets, viscosity sub/supersolution checks and the special subsolution eta.

A pair (alpha, beta) is in the subjet of u at a node when stopping at once is
optimal for the obstacle u - alpha * t - beta * B on the subtree, under the
upper expectation E_L-bar up to a positive horizon H.  The admissible alphas
form an up-closed half-line, so each (node, beta, H) has a frontier alpha*.

Every positive horizon contains the one-step rule, so the one-step frontier
is the smallest one over all horizons; hitting-time horizons can only raise it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import generators as gen
from .generators import Generator, NodeState
from .nlexp import DriftControl, _inf, _sup, check_drift_bound, children
from .pathspace import (
    InvalidRegionError,
    PathPoint,
    PathTree,
    StoppingRegion,
    TreeProcess,
    canonical_process,
    format_label,
    hitting_time,
    parse_label,
    shift_process,
    subtree,
    time_process,
)
from .snell import snell_envelope

BISECT_TOL = 1e-10
_MAX_EXPAND = 200


@dataclass(frozen=True)
class JetCandidate:
    alpha: float
    beta: float
    horizon: StoppingRegion

    def __post_init__(self) -> None:
        if not self.horizon.is_positive:
            raise InvalidRegionError("jet horizons must be positive (no mark at the root)")


def one_step_horizon(tree: PathTree, at: PathPoint) -> StoppingRegion:
    sub = subtree(tree, at.level)
    return StoppingRegion.at_level(sub, 1)


def hitting_horizon(tree: PathTree, at: PathPoint, steps: int, width: float) -> StoppingRegion:
    """Exit of the shifted path from (-width*h, width*h) or time steps*dt, whichever first."""
    sub = subtree(tree, at.level)
    s = min(steps, sub.depth) * tree.dt
    return hitting_time(sub, s, (-width * tree.step, width * tree.step))


def _test_value(u: TreeProcess, at: PathPoint, cand: JetCandidate, L: float) -> float:
    U = shift_process(u, at)
    sub = U.tree
    if cand.horizon.tree != sub:
        raise InvalidRegionError("horizon must live on the subtree at the node")
    X = U - time_process(sub) * cand.alpha - canonical_process(sub) * cand.beta
    return snell_envelope(X, cand.horizon, L).value


def subjet_test(u: TreeProcess, at: PathPoint, cand: JetCandidate, L: float = 0.0,
                atol: float = 0.0) -> bool:
    """True when immediate stopping is optimal for u^theta - alpha t - beta B up to the horizon."""
    return _test_value(u, at, cand, L) <= u[at] + atol


def superjet_test(u: TreeProcess, at: PathPoint, cand: JetCandidate, L: float = 0.0,
                  atol: float = 0.0) -> bool:
    return subjet_test(-u, at, JetCandidate(-cand.alpha, -cand.beta, cand.horizon), L, atol)


def subjet_frontier(u: TreeProcess, at: PathPoint, beta: float, horizon: StoppingRegion,
                    L: float = 0.0, atol: float = 0.0, lo: float = -1.0, hi: float = 1.0) -> float:
    """inf{alpha : subjet_test passes}, by bracketing then bisection to 1e-10.

    Returns +inf when no admissible alpha is found while expanding the bracket.
    """

    def ok(a: float) -> bool:
        return subjet_test(u, at, JetCandidate(a, beta, horizon), L, atol)

    step = 1.0
    while not ok(hi):
        lo = hi
        hi += step
        step *= 2
        if step > 2.0**_MAX_EXPAND:
            return math.inf
    step = 1.0
    while ok(lo):
        hi = lo
        lo -= step
        step *= 2
        if step > 2.0**_MAX_EXPAND:
            return -math.inf
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def superjet_frontier(u: TreeProcess, at: PathPoint, beta: float, horizon: StoppingRegion,
                      L: float = 0.0, atol: float = 0.0) -> float:
    """sup{alpha : superjet_test passes} = -subjet_frontier(-u, -beta)."""
    return -subjet_frontier(-u, at, -beta, horizon, L, atol)


# ---------------------------------------------------------------------------
# Vectorized frontiers over a whole level


def one_step_frontier(u: TreeProcess, level: int, betas: np.ndarray, L: float) -> np.ndarray:
    """Closed-form one-step alpha*, shape (n_beta, 2**level)."""
    tree = u.tree
    h, dt = tree.step, tree.dt
    up, down = children(u.levels[level + 1])
    b = np.asarray(betas, float)[:, None]
    return (_sup(up - b * h, down + b * h, L * h / 2) - u.levels[level]) / dt


def _subtree_stack(u: TreeProcess, level: int, depth: int) -> list[np.ndarray]:
    """Values of u below every node of ``level``, one (2**level, 2**j) block per relative level j."""
    n = 2**level
    return [u.levels[level + j].reshape(n, 2**j) for j in range(depth + 1)]


def _snell_excess(stack, marks, times, paths, alpha, betas, half):
    """Y_0 - X_0 of the tangency stopping problem for each (beta, node)."""
    depth = len(stack) - 1
    b = betas[:, None, None]
    a = alpha[:, :, None]
    Y = None
    for j in range(depth, -1, -1):
        X = stack[j][None] - a * times[j] - b * paths[j][None, None, :]
        if Y is None:
            Y = X
        else:
            cont = _sup(Y[..., 1::2], Y[..., 0::2], half)
            Y = np.where(marks[j], X, np.maximum(X, cont))
    return Y[..., 0] - stack[0][None, :, 0]


def hitting_frontier(u: TreeProcess, level: int, betas: np.ndarray, L: float,
                     steps: int, width: float, lower: np.ndarray | None = None,
                     atol: float = 0.0) -> np.ndarray:
    """alpha* for the hitting-time horizon at every node of ``level``, shape (n_beta, 2**level).

    Bisection runs in lockstep for all (beta, node) pairs; ``lower`` (the
    one-step frontier) is a valid lower bracket.
    """
    tree = u.tree
    sub = subtree(tree, level)
    H = hitting_time(sub, min(steps, sub.depth) * tree.dt, (-width * tree.step, width * tree.step))
    depth = int(H.stop_levels().max())
    stack = _subtree_stack(u, level, depth)
    marks = H.marks[: depth + 1]
    times = [j * tree.dt for j in range(depth + 1)]
    paths = [sub.values(j) for j in range(depth + 1)]
    betas = np.asarray(betas, float)
    half = L * tree.step / 2
    if lower is None:
        lower = one_step_frontier(u, level, betas, L)

    def ok(a):
        return _snell_excess(stack, marks, times, paths, a, betas, half) <= atol

    lo = lower - 1.0
    hi = lower.copy()
    span = np.ones_like(hi)
    bad = ~ok(hi)
    # the one-step frontier bounds every horizon's frontier from below
    lo = np.where(bad, lo, hi)
    for _ in range(_MAX_EXPAND):
        if not bad.any():
            break
        lo = np.where(bad, hi, lo)
        hi = np.where(bad, hi + span, hi)
        span = np.where(bad, 2 * span, span)
        bad = ~ok(hi)
    hi = np.where(bad, np.inf, hi)
    finite = np.isfinite(hi)
    while True:
        gap = np.where(finite, hi - lo, 0.0)
        if gap.max(initial=0.0) <= BISECT_TOL:
            break
        mid = 0.5 * (lo + hi)
        if np.all((mid == lo) | (mid == hi) | ~finite):
            break
        good = ok(np.where(finite, mid, lo))
        hi = np.where(finite & good, mid, hi)
        lo = np.where(finite & ~good, mid, lo)
    return hi


# ---------------------------------------------------------------------------
# Checkers


@dataclass(frozen=True)
class JetSample:
    """Which jets to sample: a beta grid plus one-step and hitting-time horizons."""

    betas: tuple[float, ...] | None = None
    n_beta: int = 9
    hitting: tuple[tuple[int, float], ...] = ((3, 1.5),)
    L: float | None = None
    atol: float = 0.0

    def beta_grid(self, u: TreeProcess) -> np.ndarray:
        if self.betas is not None:
            return np.asarray(self.betas, float)
        return default_betas(u, self.n_beta)


def default_betas(u: TreeProcess, n: int = 9) -> np.ndarray:
    """Symmetric grid on [-B, B] with B = 2 sup |z-slope of u| (1 if u is flat)."""
    tree = u.tree
    slope = 0.0
    for k in range(tree.depth):
        up, down = children(u.levels[k + 1])
        if up.size:
            slope = max(slope, float(np.max(np.abs(up - down))) / (2 * tree.step))
    B = 2 * slope if slope > 0 else 1.0
    return np.linspace(-B, B, n)


@dataclass
class CheckReport:
    role: str
    generator: str
    tol: float
    L: float
    betas: list[float]
    horizons: list[str]
    n_checked: int = 0
    max_margin: float = -math.inf
    worst_by_horizon: dict[str, float] = field(default_factory=dict)
    violations: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "generator": self.generator,
            "tol": self.tol,
            "L": self.L,
            "betas": self.betas,
            "horizons": self.horizons,
            "n_checked": self.n_checked,
            "max_margin": self.max_margin,
            "worst_by_horizon": self.worst_by_horizon,
            "passed": self.passed,
            "violations": self.violations,
        }

    def summary(self) -> str:
        verdict = "PASS" if self.passed else f"FAIL ({len(self.violations)} violations)"
        return (f"{self.role}solution check for {self.generator}: {verdict}; "
                f"max margin {self.max_margin:.6g} vs tol {self.tol:.6g} over {self.n_checked} jets")


def _check(u: TreeProcess, F: Generator, sample: JetSample, tol: float, role: str,
           where: Sequence[np.ndarray] | None, max_violations: int) -> CheckReport:
    tree = u.tree
    L = F.lipschitz if sample.L is None else sample.L
    check_drift_bound(L, tree.dt)
    sign = 1.0 if role == "sub" else -1.0
    # superjets of u are negated subjets of -u
    w = u if role == "sub" else -u
    betas = sample.beta_grid(u)
    hnames = ["one-step"] + [f"hit(s={s},w={wd:g})" for s, wd in sample.hitting]
    report = CheckReport(role=role, generator=F.name, tol=tol, L=L,
                         betas=[float(b) for b in betas], horizons=hnames)
    report.worst_by_horizon = {name: -math.inf for name in hnames}
    for k in range(tree.depth):
        mask = None if where is None else np.asarray(where[k], bool)
        if mask is not None and not mask.any():
            continue
        state = NodeState.level_of(tree, k)
        # margin = -alpha* - F(u, beta) for sub; alpha^* + F(u, beta) for super
        Fv = F(state, u.levels[k][None, :], betas[:, None])
        frontiers = [one_step_frontier(w, k, sign * betas, L)]
        for s, wd in sample.hitting:
            if min(s, tree.depth - k) > 1:
                frontiers.append(hitting_frontier(w, k, sign * betas, L, s, wd,
                                                  lower=frontiers[0], atol=sample.atol))
            else:
                frontiers.append(frontiers[0])
        for name, alpha in zip(hnames, frontiers):
            margin = -alpha - sign * Fv
            if mask is not None:
                margin = np.where(mask[None, :], margin, -np.inf)
                report.n_checked += int(mask.sum()) * betas.size
            else:
                report.n_checked += margin.size
            worst = float(margin.max())
            report.worst_by_horizon[name] = max(report.worst_by_horizon[name], worst)
            report.max_margin = max(report.max_margin, worst)
            for bi, ni in zip(*np.nonzero(margin > tol)):
                if len(report.violations) >= max_violations:
                    break
                report.violations.append({
                    "node": format_label(k, int(ni)),
                    "beta": float(betas[bi]),
                    "horizon": name,
                    "margin": float(margin[bi, ni]),
                })
    report.violations.sort(key=lambda v: (tree.flat_id(*parse_label(v["node"])), v["beta"], v["horizon"]))
    return report


def check_subsolution(u: TreeProcess, F: Generator, sample: JetSample | None = None,
                      tol: float = 0.0, where: Sequence[np.ndarray] | None = None,
                      max_violations: int = 1000) -> CheckReport:
    """Check -alpha - F(theta, u, beta) <= tol for every sampled subjet element.

    ``where`` optionally restricts the check to a boolean mask per level.
    """
    return _check(u, F, sample or JetSample(), tol, "sub", where, max_violations)


def check_supersolution(u: TreeProcess, F: Generator, sample: JetSample | None = None,
                        tol: float = 0.0, where: Sequence[np.ndarray] | None = None,
                        max_violations: int = 1000) -> CheckReport:
    """Check -alpha - F(theta, u, beta) >= -tol for every sampled superjet element."""
    return _check(u, F, sample or JetSample(), tol, "super", where, max_violations)


# ---------------------------------------------------------------------------
# Special subsolution


def special_solution(u: TreeProcess, horizon: StoppingRegion, alpha: float, beta: float,
                     L: float) -> TreeProcess:
    """eta(theta) = E_L-under[ u_H - alpha (H - t) - beta (B_H - B_t) | theta ].

    Equal to u on and after the horizon.
    """
    tree = u.tree
    if horizon.tree != tree:
        raise InvalidRegionError("horizon lives on a different tree")
    check_drift_bound(L, tree.dt)
    h, dt = tree.step, tree.dt
    half = L * h / 2
    active = horizon.active()
    out: list[np.ndarray] = [None] * (tree.depth + 1)  # type: ignore[list-item]
    out[tree.depth] = u.levels[tree.depth].copy()
    for k in range(tree.depth - 1, -1, -1):
        up, down = children(out[k + 1])
        step = _inf(up - alpha * dt - beta * h, down - alpha * dt + beta * h, half)
        out[k] = np.where(active[k], step, u.levels[k])
    return TreeProcess(tree, out)


@dataclass(frozen=True)
class SpecialRepresentation:
    """eta_child = eta + Z dW + (alpha + beta mu*) dt with dW = dB - mu* dt, mu* = -L sgn(Z - beta)."""

    Z: tuple[np.ndarray, ...]
    mu: DriftControl
    active: tuple[np.ndarray, ...]
    alpha: float
    beta: float

    def reassemble(self, eta0: float, u: TreeProcess) -> TreeProcess:
        """Forward rebuild of eta from its root value; u fills nodes on and after the horizon."""
        tree = self.mu.tree
        h, dt = tree.step, tree.dt
        out = [np.array([float(eta0)])]
        for k in range(tree.depth):
            mu = self.mu.levels[k]
            drift = (self.alpha + self.beta * mu) * dt
            nxt = np.empty(2 ** (k + 1))
            nxt[1::2] = out[k] + self.Z[k] * (h - mu * dt) + drift
            nxt[0::2] = out[k] + self.Z[k] * (-h - mu * dt) + drift
            parent_active = np.repeat(self.active[k], 2)
            out.append(np.where(parent_active, nxt, u.levels[k + 1]))
        return TreeProcess(tree, out)


def special_representation(eta: TreeProcess, horizon: StoppingRegion, alpha: float,
                           beta: float, L: float) -> SpecialRepresentation:
    tree = eta.tree
    active = horizon.active()
    Z, mu = [], []
    for k in range(tree.depth):
        up, down = children(eta.levels[k + 1])
        z = np.where(active[k], (up - down) / (2 * tree.step), 0.0)
        Z.append(z)
        mu.append(np.where(active[k], -L * np.sign(z - beta), 0.0))
    return SpecialRepresentation(
        Z=tuple(Z), mu=DriftControl(tree, L, mu), active=active, alpha=alpha, beta=beta
    )


def special_generator(alpha: float, beta: float, L: float) -> Generator:
    return gen.special(alpha, beta, L)


def sibling_lipschitz(X: TreeProcess) -> float:
    """max |X_up - X_down| / d(up, down); siblings sit at Dupire distance 2h."""
    tree = X.tree
    best = 0.0
    for k in range(1, tree.depth + 1):
        up, down = children(X.levels[k])
        best = max(best, float(np.max(np.abs(up - down))) / (2 * tree.step))
    return best


# ---------------------------------------------------------------------------
# Change of variable


def change_variable(u: TreeProcess, F: Generator, rate: float) -> tuple[TreeProcess, Generator]:
    """u~ = e^{rate t} u with F~(theta, y, z) = -rate y + e^{rate t} F(theta, e^{-rate t} y, e^{-rate t} z)."""
    if rate > 0:
        raise ValueError("the change of variable needs a nonpositive rate")
    if rate == 0:
        return u, F
    tree = u.tree
    scaled = TreeProcess(tree, [math.exp(rate * tree.time(k)) * u.levels[k] for k in tree.levels()])
    base = F

    def fn(state: NodeState, y, z):
        g = math.exp(rate * state.t)
        return -rate * y + g * base.fn(state, y / g, z / g)

    def modulus(delta: float, y: float) -> float:
        return base.modulus(delta, y)

    transformed = Generator(
        name=f"{F.name}@rate{rate:g}",
        fn=fn,
        lipschitz=abs(rate) + F.lipschitz,
        monotone_in_y=F.monotone_in_y,
        modulus=modulus,
        bound=F.bound,
        params={**F.params, "rate": rate},
        rho_doc=F.rho_doc,
    )
    return scaled, transformed


def node_mask(tree: PathTree, points: Sequence[PathPoint]) -> list[np.ndarray]:
    masks = [np.zeros(2**k, dtype=bool) for k in tree.levels()]
    for p in points:
        masks[p.level][p.index] = True
    return masks
