"""Backward-induction oracle, Perron construction and comparison harnesses.

The oracle is the explicit discrete BSDE scheme
    u = m + dt * F(theta, m, z),  m = (u_up + u_down) / 2,  z = (u_up - u_down) / (2h),
with F evaluated at the conditional mean.  Its consistency error is O(dt),
which is what the default tolerance absorbs.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import generators as gen
from .generators import Generator, NodeState
from .nlexp import check_drift_bound, children, controlled_value
from .pathspace import (
    PathTree,
    StoppingRegion,
    TreeProcess,
    format_label,
    hitting_time,
    time_process,
)
from .regularize import epsilon_n_process, modulus_process, sup_convolution
from .viscosity import (
    CheckReport,
    JetSample,
    check_subsolution,
    check_supersolution,
    special_solution,
)


class ContractionError(ValueError):
    """Raised when the explicit scheme's step-size conditions fail."""


@dataclass(frozen=True)
class TerminalCondition:
    xi: np.ndarray

    def __post_init__(self) -> None:
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 1 or not np.all(np.isfinite(xi)):
            raise ValueError("terminal values must be a finite 1-d array")
        object.__setattr__(self, "xi", xi)

    @classmethod
    def from_function(cls, tree: PathTree, fn) -> "TerminalCondition":
        """fn maps the (n_leaves, N+1) leaf path matrix to one value per leaf."""
        return cls(np.asarray(fn(tree.path_matrix(tree.depth)), dtype=float))

    def sup(self) -> float:
        return float(np.max(np.abs(self.xi)))


def _xi(xi) -> np.ndarray:
    return xi.xi if isinstance(xi, TerminalCondition) else np.asarray(xi, dtype=float)


def check_contraction(F: Generator, dt: float) -> None:
    try:
        check_drift_bound(F.lipschitz, dt)
    except ValueError as exc:
        raise ContractionError(str(exc)) from None
    if not F.lipschitz * dt < 1:
        raise ContractionError(f"dt * L = {F.lipschitz * dt:.6g} must be < 1")


def ppde_solve(F: Generator, xi, tree: PathTree) -> TreeProcess:
    """Explicit backward scheme with u = xi at the leaves."""
    check_contraction(F, tree.dt)
    leaves = _xi(xi)
    if leaves.shape != (tree.n_leaves,):
        raise ValueError(f"expected {tree.n_leaves} terminal values, got {leaves.shape}")
    h, dt = tree.step, tree.dt
    out: list[np.ndarray] = [None] * (tree.depth + 1)  # type: ignore[list-item]
    out[tree.depth] = leaves.copy()
    for k in range(tree.depth - 1, -1, -1):
        up, down = children(out[k + 1])
        m = (up + down) / 2
        z = (up - down) / (2 * h)
        out[k] = m + dt * F(NodeState.level_of(tree, k), m, z)
    return TreeProcess(tree, out)


def default_tol(tree: PathTree, F: Generator, xi) -> float:
    """5 dt (1 + L) (1 + sup|xi|)."""
    return 5 * tree.dt * (1 + F.lipschitz) * (1 + float(np.max(np.abs(_xi(xi)))))


def remaining(tree: PathTree) -> TreeProcess:
    """T - t at every node."""
    return time_process(tree).map(lambda a: tree.horizon - a)


# ---------------------------------------------------------------------------
# Subsolution families and Perron


@dataclass(frozen=True)
class FamilySpec:
    """Shifts delta give oracle - delta (T - t); triples (alpha, beta, horizon) give eta members.

    A horizon is ``{"level": k}`` or ``{"hit": [steps, width]}`` (exit of
    (-width h, width h) or time steps*dt, from the root).
    """

    shifts: tuple[float, ...] = ()
    triples: tuple[tuple[float, float, dict], ...] = ()
    bound_slack: float = 0.1

    @classmethod
    def from_dict(cls, data: dict) -> "FamilySpec":
        triples = tuple(
            (float(t["alpha"]), float(t["beta"]), dict(t.get("horizon", {"level": 1})))
            for t in data.get("triples", [])
        )
        return cls(shifts=tuple(float(s) for s in data.get("shifts", [])), triples=triples,
                   bound_slack=float(data.get("bound_slack", 0.1)))

    def to_dict(self) -> dict:
        return {
            "shifts": list(self.shifts),
            "triples": [{"alpha": a, "beta": b, "horizon": hz} for a, b, hz in self.triples],
            "bound_slack": self.bound_slack,
        }

    def union(self, other: "FamilySpec") -> "FamilySpec":
        shifts = tuple(dict.fromkeys(self.shifts + other.shifts))
        seen, triples = set(), []
        for t in self.triples + other.triples:
            key = (t[0], t[1], repr(sorted(t[2].items())))
            if key not in seen:
                seen.add(key)
                triples.append(t)
        return FamilySpec(shifts, tuple(triples), self.bound_slack)


def horizon_region(tree: PathTree, spec: dict) -> StoppingRegion:
    if "level" in spec:
        level = int(spec["level"])
        if not 1 <= level <= tree.depth:
            raise ValueError(f"horizon level {level} outside 1..{tree.depth}")
        return StoppingRegion.at_level(tree, level)
    if "hit" in spec:
        steps, width = spec["hit"]
        s = min(int(steps), tree.depth) * tree.dt
        return hitting_time(tree, s, (-float(width) * tree.step, float(width) * tree.step))
    raise ValueError(f"unknown horizon spec {spec}")


@dataclass
class SubsolutionFamily:
    members: list[TreeProcess] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)
    dropped: list[dict] = field(default_factory=list)
    bound: TreeProcess | None = None
    generator: str = ""
    spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)


def _threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("PPDE_LAB_THREADS", "1") or 1)
    return max(1, threads)


def build_subsolution_family(F: Generator, xi, tree: PathTree, spec: FamilySpec,
                             tol: float | None = None, sample: JetSample | None = None,
                             threads: int | None = None) -> SubsolutionFamily:
    """Members from down-shifted oracles and special solutions; failures are dropped and reported.

    The declared supersolution bound is oracle + bound_slack (T - t).
    """
    tol = default_tol(tree, F, xi) if tol is None else tol
    u = ppde_solve(F, xi, tree)
    rem = remaining(tree)
    bound = u + rem * spec.bound_slack
    candidates: list[tuple[dict, TreeProcess]] = []
    for d in spec.shifts:
        candidates.append(({"kind": "shift", "delta": d}, u - rem * d))
    for a, b, hz in spec.triples:
        eta = special_solution(u, horizon_region(tree, hz), a, b, F.lipschitz)
        candidates.append(({"kind": "eta", "alpha": a, "beta": b, "horizon": hz}, eta))

    def screen(item):
        prov, proc = item
        rep = check_subsolution(proc, F, sample, tol=tol, max_violations=5)
        above = float(np.max(proc.flat() - bound.flat()))
        return prov, proc, rep, above

    n = _threads(threads)
    if n > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(screen, candidates))
    else:
        results = [screen(c) for c in candidates]

    fam = SubsolutionFamily(bound=bound, generator=F.name, spec=spec.to_dict())
    for prov, proc, rep, above in results:
        if rep.passed and above <= tol:
            fam.members.append(proc)
            fam.provenance.append({**prov, "max_margin": rep.max_margin})
        else:
            reason = "subsolution check failed" if not rep.passed else "exceeds supersolution bound"
            fam.dropped.append({**prov, "reason": reason, "max_margin": rep.max_margin,
                                "above_bound": above})
    return fam


@dataclass(frozen=True)
class PerronResult:
    value: TreeProcess
    argmax: tuple[np.ndarray, ...]
    provenance: list[dict]

    def node_provenance(self, level: int, index: int) -> dict:
        return self.provenance[int(self.argmax[level][index])]


def perron_construct(F: Generator, family: SubsolutionFamily) -> PerronResult:
    """Pointwise maximum over the family; ties go to the earliest member."""
    if not family.members:
        raise ValueError("empty subsolution family")
    tree = family.members[0].tree
    value, arg = [], []
    for k in tree.levels():
        stack = np.stack([m.levels[k] for m in family.members])
        value.append(stack.max(axis=0))
        arg.append(stack.argmax(axis=0))
    return PerronResult(TreeProcess(tree, value), tuple(arg), list(family.provenance))


# ---------------------------------------------------------------------------
# Comparison and maximum principle


@dataclass
class ComparisonReport:
    tol: float
    terminal_ok: bool
    max_gap: float
    violations: list[dict] = field(default_factory=list)
    terminal_violations: list[str] = field(default_factory=list)
    preconditions: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def preconditions_ok(self) -> bool:
        return all(v.get("passed", True) for v in self.preconditions.values())

    @property
    def passed(self) -> bool:
        return self.terminal_ok and not self.violations and self.preconditions_ok

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "terminal_ok": self.terminal_ok,
            "terminal_violations": self.terminal_violations,
            "preconditions": self.preconditions,
            "max_gap": self.max_gap,
            "violations": self.violations,
            **self.extra,
        }


def _precondition(rep: CheckReport | None) -> dict | None:
    if rep is None:
        return None
    return {"role": rep.role, "generator": rep.generator, "passed": rep.passed,
            "max_margin": rep.max_margin, "tol": rep.tol}


def _dominance(u: TreeProcess, v: TreeProcess, tol: float, limit: int = 1000) -> tuple[float, list[dict]]:
    tree = u.tree
    gap = u.flat() - v.flat()
    bad = np.flatnonzero(gap > tol)
    levels = tree.node_levels()
    out = []
    for fid in bad[:limit]:
        k = int(levels[fid])
        out.append({"node": format_label(k, int(fid - (2**k - 1))), "gap": float(gap[fid])})
    return float(gap.max()), out


def comparison_check(u: TreeProcess, v: TreeProcess, tol: float = 0.0,
                     sub_report: CheckReport | None = None,
                     super_report: CheckReport | None = None) -> ComparisonReport:
    """u_T <= v_T on every leaf, then u <= v + tol at every node."""
    if u.tree != v.tree:
        raise ValueError("processes live on different trees")
    tree = u.tree
    leaf_bad = np.flatnonzero(u.leaves > v.leaves)
    max_gap, viol = _dominance(u, v, tol)
    pre = {}
    if sub_report is not None:
        pre["u_subsolution"] = _precondition(sub_report)
    if super_report is not None:
        pre["v_supersolution"] = _precondition(super_report)
    return ComparisonReport(
        tol=tol,
        terminal_ok=leaf_bad.size == 0,
        max_gap=max_gap,
        violations=viol,
        terminal_violations=[format_label(tree.depth, int(i)) for i in leaf_bad],
        preconditions=pre,
    )


def pucci_max_principle(u: TreeProcess, L: float, n: float = 8.0, m: float = 4.0,
                        tol: float | None = None, C: float | None = None,
                        sample: JetSample | None = None) -> ComparisonReport:
    """u <= tol everywhere for subsolutions of -Lu - L u^+ - L|d_omega u| = 0 with u_T <= 0.

    The intermediate step builds
        v^{n,m} = E_L-bar[ sum e^{Ls} (rho^{n,m} + L (u^m - u^n)^+) ds + e^{L(T-t)} (u^n_T)^+ ]
    with rho^{n,m} = C m (1/n + rho-bar(theta, C/n)), C = 2M + 1 by default,
    and asserts u <= u^n <= v^{n,m} + tol.
    """
    tree = u.tree
    F = gen.pucci_plus(L)
    tol = default_tol(tree, F, u.leaves) if tol is None else tol
    sub = check_subsolution(u, F, sample, tol=tol, max_violations=20)
    M = u.sup_norm()
    C = 2 * M + 1 if C is None else C
    un = sup_convolution(u, n).regularized
    um = sup_convolution(u, m).regularized
    rho_nm = (modulus_process(tree, C / n) + 1.0 / n) * (C * m)
    running = rho_nm + (um - un).positive_part() * L
    v = controlled_value(running, np.maximum(un.leaves, 0.0), L, discount=L)

    max_gap, viol = _dominance(u, TreeProcess.constant(tree, 0.0), tol)
    gap_n, viol_n = _dominance(un, v, tol)
    gap_u, viol_u = _dominance(u, v, tol)
    leaf_bad = np.flatnonzero(u.leaves > 0)
    rep = ComparisonReport(
        tol=tol,
        terminal_ok=leaf_bad.size == 0,
        max_gap=max_gap,
        violations=viol + [{"step": "u^n <= v^{n,m}", **x} for x in viol_n]
        + [{"step": "u <= v^{n,m}", **x} for x in viol_u],
        terminal_violations=[format_label(tree.depth, int(i)) for i in leaf_bad],
        preconditions={"u_subsolution": _precondition(sub)},
        extra={"n": n, "m": m, "C": C, "max_un_minus_v": gap_n, "max_u_minus_v": gap_u},
    )
    return rep


@dataclass
class DifferenceReport:
    check: CheckReport
    n: float | None
    excluded: list[str]
    preconditions: dict

    @property
    def passed(self) -> bool:
        return self.check.passed and all(v.get("passed", True) for v in self.preconditions.values())

    def to_dict(self) -> dict:
        return {"passed": self.passed, "n": self.n, "excluded": self.excluded,
                "preconditions": self.preconditions, "check": self.check.to_dict()}


def difference_subsolution_check(u: TreeProcess, v: TreeProcess, F0: Generator, delta: TreeProcess,
                                 tol: float = 0.0, n: float | None = None,
                                 sample: JetSample | None = None,
                                 sub_report: CheckReport | None = None,
                                 super_report: CheckReport | None = None) -> DifferenceReport:
    """w = u - v against G(theta, y, z) = L|z| + delta(theta) [+ 2 rho0(theta, eps_n(theta))].

    With ``n`` the pair is first regularized (u^n, v^n); nodes whose
    convolution maximizers are all leaves carry no jet information to
    transfer and are excluded (listed in the report).
    """
    tree = u.tree
    L = F0.lipschitz
    where = None
    excluded: list[str] = []
    offset = delta
    if n is not None:
        cu, cv = sup_convolution(u, n), sup_convolution(-v, n)
        u, v = cu.regularized, -cv.regularized
        M = max(cu.M, cv.M)
        eps = epsilon_n_process(tree, n, M)
        rho = TreeProcess(tree, [np.array([F0.modulus(float(e), 0.0) for e in lv]) for lv in eps.levels])
        offset = delta + rho * 2.0
        where = [~(a | b) for a, b in zip(cu.leaf_only, cv.leaf_only)]
        excluded = sorted(set(cu.leaf_only_labels()) | set(cv.leaf_only_labels()))
    w = u - v
    G = gen.pucci(L).plus(gen.node_offset(tree, offset), name=f"pucci({L:g})+delta")
    check = check_subsolution(w, G, sample, tol=tol, where=where)
    pre = {}
    if sub_report is not None:
        pre["u_subsolution"] = _precondition(sub_report)
    if super_report is not None:
        pre["v_supersolution"] = _precondition(super_report)
    return DifferenceReport(check=check, n=n, excluded=excluded, preconditions=pre)


def shifted_variants(u: TreeProcess, slack: float) -> tuple[TreeProcess, TreeProcess]:
    """(u - slack (T - t), u + slack (T - t))."""
    rem = remaining(u.tree)
    return u - rem * slack, u + rem * slack


def sandwich(F: Generator, xi, tree: PathTree, slack: float = 0.1, tol: float | None = None,
             sample: JetSample | None = None) -> dict:
    """Oracle +- slack (T - t): sub/super checks and the comparison between them."""
    tol = default_tol(tree, F, xi) if tol is None else tol
    u = ppde_solve(F, xi, tree)
    lo, hi = shifted_variants(u, slack)
    sub = check_subsolution(lo, F, sample, tol=tol)
    sup = check_supersolution(hi, F, sample, tol=tol)
    comp = comparison_check(lo, hi, tol, sub, sup)
    return {"oracle": u, "sub": sub, "super": sup, "comparison": comp,
            "passed": sub.passed and sup.passed and comp.passed}

