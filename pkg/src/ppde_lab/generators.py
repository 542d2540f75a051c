"""Nonlinearities F(theta, y, z) and the named registry used by the CLI."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .pathspace import PathPoint, PathTree


@dataclass(frozen=True)
class NodeState:
    """Vectorized view of the nodes of one tree level, passed to generator functions."""

    tree: PathTree
    level: int
    index: np.ndarray

    @property
    def t(self) -> float:
        return self.tree.time(self.level)

    @property
    def x(self) -> np.ndarray:
        return self.tree.values(self.level)[self.index]

    @property
    def running_max(self) -> np.ndarray:
        return self.tree.running_max(self.level)[self.index]

    @classmethod
    def level_of(cls, tree: PathTree, level: int) -> "NodeState":
        return cls(tree, level, np.arange(2**level))

    @classmethod
    def of_point(cls, tree: PathTree, point: PathPoint) -> "NodeState":
        return cls(tree, point.level, np.array([point.index]))


GenFn = Callable[[NodeState, np.ndarray, np.ndarray], np.ndarray]
ModulusFn = Callable[[float, float], float]


def _zero_modulus(delta: float, y: float) -> float:
    return 0.0


@dataclass(frozen=True)
class Generator:
    """F(theta, y, z) with Lipschitz constant ``lipschitz`` in (y, z).

    ``modulus(delta, y)`` bounds |F(theta, y, .) - F(theta', y, .)| for
    d(theta, theta') <= delta; ``bound(state)`` dominates |F(theta, 0, 0)|.
    """

    name: str
    fn: GenFn
    lipschitz: float
    monotone_in_y: bool = True
    modulus: ModulusFn = _zero_modulus
    bound: Callable[[NodeState], np.ndarray] | None = None
    params: dict = field(default_factory=dict)
    rho_doc: str = "0"

    def __call__(self, state: NodeState, y, z) -> np.ndarray:
        return np.asarray(self.fn(state, np.asarray(y, float), np.asarray(z, float)), float)

    def at(self, tree: PathTree, point: PathPoint, y: float, z: float) -> float:
        return float(self(NodeState.of_point(tree, point), np.array([y]), np.array([z]))[0])

    def plus(self, extra: Callable[[NodeState], np.ndarray], name: str | None = None,
             extra_modulus: ModulusFn | None = None) -> "Generator":
        """F + extra(theta), with the moduli added."""
        base = self

        def fn(state, y, z):
            return base.fn(state, y, z) + extra(state)

        def modulus(delta, y):
            return base.modulus(delta, y) + (extra_modulus(delta, y) if extra_modulus else 0.0)

        return replace(self, name=name or f"{self.name}+extra", fn=fn, modulus=modulus)


def zero() -> Generator:
    return Generator("zero", lambda s, y, z: np.zeros(np.broadcast(y, z).shape), 0.0,
                     bound=lambda s: np.zeros(s.index.size))


def constant(c: float = 1.0) -> Generator:
    return Generator("constant", lambda s, y, z: np.full(np.broadcast(y, z).shape, float(c)), 0.0,
                     bound=lambda s: np.full(s.index.size, abs(c)), params={"c": c})


def linear(a: float = 0.5, b: float = 0.5) -> Generator:
    return Generator("linear", lambda s, y, z: a * y + b * z, max(abs(a), abs(b)),
                     monotone_in_y=a >= 0, bound=lambda s: np.zeros(s.index.size),
                     params={"a": a, "b": b})


def pucci(L: float = 1.0) -> Generator:
    """L |z|: the upper Pucci-type operator without zeroth-order term."""
    return Generator("pucci", lambda s, y, z: L * np.abs(z) + 0.0 * y, L,
                     bound=lambda s: np.zeros(s.index.size), params={"L": L})


def pucci_plus(L: float = 1.0) -> Generator:
    """L y^+ + L |z|."""
    return Generator("pucci_plus", lambda s, y, z: L * np.maximum(y, 0.0) + L * np.abs(z), L,
                     bound=lambda s: np.zeros(s.index.size), params={"L": L})


def running_max(a: float = 0.5, b: float = 0.5, zcap: float = 50.0) -> Generator:
    """c(max_s omega_s) * clip(z, -zcap, zcap) with c(m) = a + b tanh(m).

    The clip keeps the theta-modulus uniform in z: |F(theta) - F(theta')| <= b zcap d.
    """

    def fn(state, y, z):
        c = a + b * np.tanh(state.running_max)
        return c * np.clip(z, -zcap, zcap) + 0.0 * y

    return Generator(
        "running_max", fn, abs(a) + abs(b),
        modulus=lambda delta, y: abs(b) * zcap * delta,
        bound=lambda s: np.zeros(s.index.size),
        params={"a": a, "b": b, "zcap": zcap},
        rho_doc="|b| * zcap * delta",
    )


def special(alpha: float, beta: float, L: float) -> Generator:
    """-alpha - L |beta - z|: the equation solved by the stochastic-representation subsolution."""
    return Generator("special", lambda s, y, z: -alpha - L * np.abs(beta - z) + 0.0 * y, L,
                     bound=lambda s: np.full(s.index.size, abs(alpha) + L * abs(beta)),
                     params={"alpha": alpha, "beta": beta, "L": L})


def node_offset(tree: PathTree, values) -> Callable[[NodeState], np.ndarray]:
    """A theta-dependent additive term read from a TreeProcess."""

    def extra(state: NodeState) -> np.ndarray:
        return values.levels[state.level][state.index]

    return extra


REGISTRY: dict[str, dict] = {
    "zero": {"factory": zero, "params": {}, "rho": "0"},
    "constant": {"factory": constant, "params": {"c": 1.0}, "rho": "0"},
    "linear": {"factory": linear, "params": {"a": 0.5, "b": 0.5}, "rho": "0"},
    "pucci": {"factory": pucci, "params": {"L": 1.0}, "rho": "0"},
    "pucci_plus": {"factory": pucci_plus, "params": {"L": 1.0}, "rho": "0"},
    "running_max": {"factory": running_max, "params": {"a": 0.5, "b": 0.5, "zcap": 50.0},
                    "rho": "|b| * zcap * delta"},
}


def make(name: str, **params) -> Generator:
    try:
        entry = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown generator {name!r}; known: {sorted(REGISTRY)}") from None
    unknown = set(params) - set(entry["params"])
    if unknown:
        raise ValueError(f"generator {name!r} has no parameters {sorted(unknown)}")
    return entry["factory"](**{**entry["params"], **params})


def lipschitz_violations(F: Generator, tree: PathTree, rng: np.random.Generator,
                         n: int = 200, scale: float = 5.0) -> int:
    """Spot-check |F(y,z) - F(y',z')| <= L|y-y'| + L|z-z'| on random triples."""
    count = 0
    for k in range(tree.depth + 1):
        state = NodeState.level_of(tree, k)
        m = state.index.size
        for _ in range(max(1, n // (tree.depth + 1))):
            y, y2, z, z2 = (rng.uniform(-scale, scale, m) for _ in range(4))
            lhs = np.abs(F(state, y, z) - F(state, y2, z2))
            rhs = F.lipschitz * (np.abs(y - y2) + np.abs(z - z2))
            count += int(np.sum(lhs > rhs * (1 + 1e-12) + 1e-12))
    return count


def monotonicity_violations(F: Generator, tree: PathTree, rng: np.random.Generator,
                            n: int = 200, scale: float = 5.0) -> int:
    count = 0
    for k in range(tree.depth + 1):
        state = NodeState.level_of(tree, k)
        m = state.index.size
        for _ in range(max(1, n // (tree.depth + 1))):
            y, y2, z = (rng.uniform(-scale, scale, m) for _ in range(3))
            lo, hi = np.minimum(y, y2), np.maximum(y, y2)
            count += int(np.sum(F(state, lo, z) > F(state, hi, z) + 1e-12))
    return count


def describe_registry() -> list[dict]:
    return [
        {"name": name, "params": dict(entry["params"]), "rho": entry["rho"]}
        for name, entry in sorted(REGISTRY.items())
    ]


def exp_factor(rate: float, t: float) -> float:
    return math.exp(rate * t)
