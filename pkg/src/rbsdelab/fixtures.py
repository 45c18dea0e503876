"""Standard random-time models and random RBSDE instances used by tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .horizon import AzemaBundle, GTree, RandomTimeModel, build_azema, build_gtree
from .lattice import FiltrationTree, TreeProcess
from .rbsde import Driver, RBSDEData

MODEL_NAMES = ("immersion", "adapted", "lookahead", "terminal", "survives")

_PARAMS = {
    "immersion": ("independent", {"p": 0.1}),
    "adapted": ("adapted", {"base": 0.1, "tilt": 0.5}),
    "lookahead": ("lookahead", {"base": 0.1, "tilt": 0.8}),
    "terminal": ("terminal", {"base": 0.1, "tilt": 0.5}),
    "survives": ("survives", {}),
}


@dataclass
class Fixture:
    name: str
    model: RandomTimeModel
    bundle: AzemaBundle
    gtree: GTree

    @property
    def tree(self) -> FiltrationTree:
        return self.model.tree


def model_spec(name: str) -> dict:
    kind, params = _PARAMS[name]
    return {"model_kind": kind, "parameters": dict(params)}


def fixture(name: str, depth: int, horizon: float = 1.0) -> Fixture:
    """One of the five standard models on a symmetric tree with ``dt = horizon / depth``."""
    if name not in _PARAMS:
        raise KeyError(f"unknown fixture {name!r}; choose from {MODEL_NAMES}")
    tree = FiltrationTree.symmetric(depth, horizon / depth)
    model = RandomTimeModel.from_spec(tree, model_spec(name))
    bundle = build_azema(model)
    return Fixture(name, model, bundle, build_gtree(model, bundle))


def all_fixtures(depth: int) -> list[Fixture]:
    return [fixture(name, depth) for name in MODEL_NAMES]


def geometric(depth: int, p: float = 0.5) -> Fixture:
    """Constant hazard ``p`` with ``dt = 1``."""
    tree = FiltrationTree.symmetric(depth, 1.0)
    model = RandomTimeModel.independent_hazard(tree, p)
    bundle = build_azema(model)
    return Fixture("geometric", model, bundle, build_gtree(model, bundle))


def random_process(tree: FiltrationTree, rng: np.random.Generator, scale: float = 1.0) -> TreeProcess:
    return TreeProcess([rng.normal(scale=scale, size=2 ** t) for t in range(tree.steps + 1)])


def random_martingale(tree: FiltrationTree, rng: np.random.Generator) -> TreeProcess:
    from .lattice import martingale_of
    return martingale_of(tree, rng.normal(size=2 ** tree.steps))


def random_linear_data(tree: FiltrationTree, rng: np.random.Generator, barrier_prob: float = 0.5) -> RBSDEData:
    """Random ``(f, S, h)`` with ``h >= S``; the barrier is ``-inf`` at a random subset of nodes."""
    n = tree.steps
    f = [rng.normal(size=2 ** t) for t in range(n)]
    h = [rng.normal(size=2 ** t) for t in range(n + 1)]
    S = []
    for t in range(n + 1):
        s = np.minimum(h[t], rng.normal(loc=0.3, size=2 ** t))
        S.append(np.where(rng.random(2 ** t) < barrier_prob, s, -np.inf))
    return RBSDEData(Driver.linear(f), TreeProcess(S), TreeProcess(h))


def sin_plus_z_driver(tree: FiltrationTree, c_y: float, c_z: float, f0=None) -> Driver:
    """``f(t, y, z) = f0 + c_y sin(y) + c_z z`` with Lipschitz constant ``max(c_y, c_z)``."""
    n = tree.steps
    f0 = [np.zeros(2 ** t) for t in range(n)] if f0 is None else f0
    return Driver(lambda t, y, z: f0[t] + c_y * np.sin(y) + c_z * z, max(abs(c_y), abs(c_z)), None,
                  "sin_plus_z")


def random_lipschitz_data(tree: FiltrationTree, rng: np.random.Generator, c_lip: float) -> RBSDEData:
    base = random_linear_data(tree, rng)
    f0 = [rng.normal(size=2 ** t) for t in range(tree.steps)]
    c_y, c_z = rng.uniform(0.2, 1.0, size=2) * c_lip
    return RBSDEData(sin_plus_z_driver(tree, c_y, c_z, f0), base.barrier_S, base.terminal_h)
