"""Binary lattice carrying the Brownian filtration.

Nodes at step ``t`` are indexed by the integer path code ``0 .. 2**t - 1``.
The children of node ``i`` are ``2*i`` (down move) and ``2*i + 1`` (up move),
so the binary digits of a node index spell out its path prefix.  The global
node id used in serialized form is ``2**t - 1 + i``.

Processes are stored densely as one numpy array per step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_DEPTH = 22
OPTIONAL = "optional"
PREDICTABLE = "predictable"


class LatticeError(ValueError):
    """Raised for malformed trees, processes or out-of-range steps."""


class PositivityError(LatticeError):
    """A stochastic exponential factor ``1 + dx`` was not positive."""

    def __init__(self, step: int, node: int, factor: float):
        super().__init__(f"1 + dx = {factor!r} <= 0 at step {step}, node {node}")
        self.step = step
        self.node = node
        self.factor = factor


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    dt: float

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise LatticeError(f"steps must be a positive integer, got {self.steps!r}")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise LatticeError(f"dt must be positive, got {self.dt!r}")

    @property
    def horizon(self) -> float:
        return self.steps * self.dt


def expand(values: np.ndarray) -> np.ndarray:
    """Broadcast step-t node values onto the step-(t+1) children."""
    return np.repeat(values, 2)


def pair_sum(values: np.ndarray) -> np.ndarray:
    """Sum the two children of every parent node."""
    return values.reshape(-1, 2).sum(axis=1)


class FiltrationTree:
    """Non-recombining binary tree with per-node transition data.

    ``up_prob[t]``, ``dw_up[t]`` and ``dw_down[t]`` are arrays of length
    ``2**t`` for ``t = 0 .. N-1`` describing the move out of each node.
    """

    def __init__(self, grid: TimeGrid, up_prob, dw_up, dw_down, *, tol: float = 1e-12,
                 max_depth: int = MAX_DEPTH):
        self.grid = grid
        n = grid.steps
        if n > max_depth:
            raise LatticeError(f"depth {n} exceeds the cap {max_depth}")
        if not (len(up_prob) == len(dw_up) == len(dw_down) == n):
            raise LatticeError("transition data must have one array per step")
        self.up_prob = tuple(np.asarray(a, dtype=float) for a in up_prob)
        self.dw_up = tuple(np.asarray(a, dtype=float) for a in dw_up)
        self.dw_down = tuple(np.asarray(a, dtype=float) for a in dw_down)
        for t in range(n):
            for arr in (self.up_prob[t], self.dw_up[t], self.dw_down[t]):
                if arr.shape != (2 ** t,):
                    raise LatticeError(f"step {t}: expected shape {(2 ** t,)}, got {arr.shape}")
            p = self.up_prob[t]
            if np.any(p <= 0) or np.any(p >= 1):
                raise LatticeError(f"step {t}: up_prob must lie in (0, 1)")
            mean = p * self.dw_up[t] + (1 - p) * self.dw_down[t]
            var = p * self.dw_up[t] ** 2 + (1 - p) * self.dw_down[t] ** 2
            if np.max(np.abs(mean)) > tol:
                raise LatticeError(f"step {t}: increment not centered (max {np.max(np.abs(mean)):.3e})")
            if np.max(np.abs(var - grid.dt)) > tol:
                raise LatticeError(f"step {t}: conditional variance differs from dt")

        # transition probability into each node, and cumulative path probability
        self._trans = [np.ones(1)]
        self._path = [np.ones(1)]
        self._dw = [np.zeros(1)]
        for t in range(n):
            p = self.up_prob[t]
            trans = np.empty(2 ** (t + 1))
            trans[0::2] = 1 - p
            trans[1::2] = p
            dw = np.empty(2 ** (t + 1))
            dw[0::2] = self.dw_down[t]
            dw[1::2] = self.dw_up[t]
            self._trans.append(trans)
            self._path.append(expand(self._path[-1]) * trans)
            self._dw.append(dw)
        if abs(self._path[-1].sum() - 1.0) > tol:
            raise LatticeError("leaf probabilities do not sum to one")

    # -- construction -------------------------------------------------
    @classmethod
    def symmetric(cls, steps: int, dt: float, **kw) -> "FiltrationTree":
        grid = TimeGrid(steps, dt)
        s = np.sqrt(dt)
        return cls(grid,
                   [np.full(2 ** t, 0.5) for t in range(steps)],
                   [np.full(2 ** t, s) for t in range(steps)],
                   [np.full(2 ** t, -s) for t in range(steps)], **kw)

    @classmethod
    def from_up_prob(cls, steps: int, dt: float, up_prob: Sequence[np.ndarray]) -> "FiltrationTree":
        """Asymmetric tree: increments chosen to be centered with variance ``dt``."""
        grid = TimeGrid(steps, dt)
        ups, downs = [], []
        for p in up_prob:
            p = np.asarray(p, dtype=float)
            ups.append(np.sqrt(dt * (1 - p) / p))
            downs.append(-np.sqrt(dt * p / (1 - p)))
        return cls(grid, up_prob, ups, downs)

    def truncate(self, steps: int) -> "FiltrationTree":
        if not 1 <= steps <= self.steps:
            raise LatticeError(f"cannot truncate depth {self.steps} tree to {steps} steps")
        return FiltrationTree(TimeGrid(steps, self.dt), self.up_prob[:steps],
                              self.dw_up[:steps], self.dw_down[:steps])

    # -- basic accessors ----------------------------------------------
    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    def size(self, t: int) -> int:
        return 2 ** t

    def trans_prob(self, t: int) -> np.ndarray:
        """Probability of the move leading into each step-t node (t >= 1)."""
        return self._trans[t]

    def path_prob(self, t: int) -> np.ndarray:
        return self._path[t]

    def dw(self, t: int) -> np.ndarray:
        """Brownian increment arriving at each step-t node (zero at the root)."""
        return self._dw[t]

    def brownian(self) -> "TreeProcess":
        vals = [np.zeros(1)]
        for t in range(1, self.steps + 1):
            vals.append(expand(vals[-1]) + self._dw[t])
        return TreeProcess(vals)

    def time(self) -> "TreeProcess":
        return TreeProcess([np.full(2 ** t, t * self.dt) for t in range(self.steps + 1)])

    def constant(self, c: float) -> "TreeProcess":
        return TreeProcess([np.full(2 ** t, float(c)) for t in range(self.steps + 1)])

    def step_mean(self, t: int, child_values: np.ndarray) -> np.ndarray:
        """E[X_{t+1} | F_t] for values given at the step-(t+1) nodes."""
        return pair_sum(self._trans[t + 1] * child_values)

    def leaf_ancestors(self, t: int) -> np.ndarray:
        """Index of the step-t ancestor of each leaf."""
        return np.arange(2 ** self.steps) >> (self.steps - t)

    # -- serialization ------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        n = self.steps
        for t in range(n + 1):
            for i in range(2 ** t):
                node = {
                    "id": 2 ** t - 1 + i,
                    "step": t,
                    "parent": None if t == 0 else 2 ** (t - 1) - 1 + (i >> 1),
                    "branch": None if t == 0 else ("up" if i & 1 else "down"),
                }
                if t < n:
                    node.update(up_prob=float(self.up_prob[t][i]), dw_up=float(self.dw_up[t][i]),
                                dw_down=float(self.dw_down[t][i]))
                else:
                    node.update(up_prob=None, dw_up=None, dw_down=None)
                nodes.append(node)
        return {"grid": {"steps": n, "dt": self.dt}, "nodes": nodes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FiltrationTree":
        grid = TimeGrid(int(d["grid"]["steps"]), float(d["grid"]["dt"]))
        n = grid.steps
        up = [np.empty(2 ** t) for t in range(n)]
        du = [np.empty(2 ** t) for t in range(n)]
        dd = [np.empty(2 ** t) for t in range(n)]
        seen = set()
        for node in d["nodes"]:
            t = int(node["step"])
            i = int(node["id"]) - (2 ** t - 1)
            if not 0 <= i < 2 ** t:
                raise LatticeError(f"node id {node['id']} inconsistent with step {t}")
            seen.add(int(node["id"]))
            if t < n:
                up[t][i] = node["up_prob"]
                du[t][i] = node["dw_up"]
                dd[t][i] = node["dw_down"]
        if len(seen) != 2 ** (n + 1) - 1:
            raise LatticeError("node list does not cover the full tree")
        return cls(grid, up, du, dd)

    @classmethod
    def from_json(cls, text: str) -> "FiltrationTree":
        return cls.from_dict(json.loads(text))


class TreeProcess:
    """Dense process on a :class:`FiltrationTree`.

    Optional processes hold ``N + 1`` arrays (steps ``0..N``); predictable
    ones hold ``N`` arrays, entry ``t`` being the value used on ``(t, t+1]``.
    """

    __slots__ = ("values", "kind")

    def __init__(self, values, kind: str = OPTIONAL):
        if kind not in (OPTIONAL, PREDICTABLE):
            raise LatticeError(f"unknown process kind {kind!r}")
        vals = tuple(np.asarray(v, dtype=float) for v in values)
        for t, v in enumerate(vals):
            if v.shape != (2 ** t,):
                raise LatticeError(f"step {t}: expected {2 ** t} values, got shape {v.shape}")
        self.values = vals
        self.kind = kind

    @property
    def steps(self) -> int:
        return len(self.values) - 1 if self.kind == OPTIONAL else len(self.values)

    def __getitem__(self, t: int) -> np.ndarray:
        return self.values[t]

    def __len__(self) -> int:
        return len(self.values)

    def _combine(self, other, op):
        if isinstance(other, TreeProcess):
            if other.kind != self.kind or len(other) != len(self):
                raise LatticeError("process shape or kind mismatch")
            return TreeProcess([op(a, b) for a, b in zip(self.values, other.values)], self.kind)
        return TreeProcess([op(a, other) for a in self.values], self.kind)

    def __add__(self, other):
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __rsub__(self, other):
        return self._combine(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._combine(other, np.divide)

    def __rtruediv__(self, other):
        return self._combine(other, lambda a, b: b / a)

    def __neg__(self):
        return TreeProcess([-a for a in self.values], self.kind)

    def map(self, fn) -> "TreeProcess":
        return TreeProcess([fn(a) for a in self.values], self.kind)

    def left(self) -> "TreeProcess":
        """The predictable process ``x_-``: value of x at the left endpoint."""
        if self.kind != OPTIONAL:
            raise LatticeError("left limits are taken of optional processes")
        return TreeProcess(self.values[:-1], PREDICTABLE)

    def increments(self) -> list[np.ndarray]:
        """``dx[t] = x_t - x_{t-1}`` at step-t nodes; ``dx[0]`` is zero."""
        if self.kind != OPTIONAL:
            raise LatticeError("increments are taken of optional processes")
        out = [np.zeros(1)]
        for t in range(1, len(self.values)):
            out.append(self.values[t] - expand(self.values[t - 1]))
        return out

    def max_abs_diff(self, other: "TreeProcess") -> float:
        return max(float(np.max(np.abs(a - b))) if a.size else 0.0
                   for a, b in zip(self.values, other.values))

    def leaves(self) -> np.ndarray:
        return self.values[-1]

    def path_matrix(self) -> np.ndarray:
        """Values along every root-to-leaf path, shape ``(2**N, len)``."""
        n = len(self.values) - 1
        n_leaves = 2 ** n
        leaf = np.arange(n_leaves)
        return np.stack([v[leaf >> (n - t)] for t, v in enumerate(self.values)], axis=1)


def cumulate(increments: Sequence[np.ndarray], start: float = 0.0) -> TreeProcess:
    """Optional process with the given step increments (``increments[0]`` ignored)."""
    vals = [np.full(1, float(start))]
    for t in range(1, len(increments)):
        vals.append(expand(vals[-1]) + increments[t])
    return TreeProcess(vals)


def _require_optional(x: TreeProcess, name: str):
    if x.kind != OPTIONAL:
        raise LatticeError(f"{name} must be an optional process")


def cond_expect(tree: FiltrationTree, proc: TreeProcess, at_step: int, target_step: int) -> TreeProcess:
    """Conditional expectation of ``proc`` at ``target_step`` given ``F_at_step``.

    The returned optional process is ``t -> E[X_target | F_{min(t, at_step)}]``:
    beyond ``at_step`` it is frozen at the step-``at_step`` value.
    """
    _require_optional(proc, "proc")
    n = tree.steps
    if not (0 <= at_step <= target_step <= n) or proc.steps != n:
        raise LatticeError(f"need 0 <= at_step <= target_step <= {n}, got {at_step}, {target_step}")
    vals: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    cur = proc[target_step]
    for t in range(target_step - 1, at_step - 1, -1):
        cur = tree.step_mean(t, cur)
    vals[at_step] = cur
    for t in range(at_step - 1, -1, -1):
        vals[t] = tree.step_mean(t, vals[t + 1])
    for t in range(at_step + 1, n + 1):
        vals[t] = expand(vals[t - 1])
    return TreeProcess(vals)


def martingale_of(tree: FiltrationTree, leaf_values: np.ndarray) -> TreeProcess:
    """The martingale ``E[X | F_t]`` closed by a leaf-measurable variable."""
    n = tree.steps
    vals = [None] * (n + 1)
    vals[n] = np.asarray(leaf_values, dtype=float)
    for t in range(n - 1, -1, -1):
        vals[t] = tree.step_mean(t, vals[t + 1])
    return TreeProcess(vals)


def stochastic_integral(h: TreeProcess, x: TreeProcess) -> TreeProcess:
    if h.kind != PREDICTABLE:
        raise LatticeError("integrand must be predictable")
    _require_optional(x, "integrator")
    if h.steps != x.steps:
        raise LatticeError("integrand and integrator have different depths")
    dx = x.increments()
    return cumulate([None] + [expand(h[t - 1]) * dx[t] for t in range(1, x.steps + 1)])


def stochastic_exponential(x: TreeProcess, check_positive: bool = False) -> TreeProcess:
    _require_optional(x, "x")
    dx = x.increments()
    vals = [np.ones(1)]
    for t in range(1, len(dx)):
        factor = 1.0 + dx[t]
        if check_positive and np.any(factor <= 0):
            i = int(np.argmax(factor <= 0))
            raise PositivityError(t, i, float(factor[i]))
        vals.append(expand(vals[-1]) * factor)
    return TreeProcess(vals)


def bracket(x: TreeProcess, y: TreeProcess) -> TreeProcess:
    _require_optional(x, "x")
    _require_optional(y, "y")
    if x.steps != y.steps:
        raise LatticeError("shape mismatch")
    dx, dy = x.increments(), y.increments()
    return cumulate([None] + [dx[t] * dy[t] for t in range(1, len(dx))])


def is_martingale(tree: FiltrationTree, proc: TreeProcess, weights: TreeProcess | None = None,
                  tol: float = 1e-12) -> tuple[bool, float]:
    """Check the one-step martingale property at every node.

    ``weights`` optionally gives positive node masses of another measure; its
    transition probabilities are the ratios of child to parent mass.
    """
    _require_optional(proc, "proc")
    worst = 0.0
    for t in range(proc.steps):
        if weights is None:
            mean = tree.step_mean(t, proc[t + 1])
        else:
            mean = pair_sum(weights[t + 1] * proc[t + 1]) / weights[t]
        worst = max(worst, float(np.max(np.abs(mean - proc[t]))))
    return worst <= tol, worst
