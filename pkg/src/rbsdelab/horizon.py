"""Random default time on the lattice and the progressively enlarged filtration.

The random time ``tau`` takes values in ``{1, ..., N}`` or survives the window
(encoded as ``N + 1``).  Its law is given leaf by leaf, conditionally on the
whole Brownian path.  From it we build the Azema supermartingales, the
enlarged state space (alive nodes plus absorbed death states), the measure
``Qtilde`` and the G-martingales ``N^G`` and ``T(M)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import (OPTIONAL, FiltrationTree, LatticeError, TreeProcess, cumulate, expand,
                      is_martingale, pair_sum, stochastic_exponential, stochastic_integral)


class HorizonError(ValueError):
    pass


class PositivityViolation(HorizonError):
    def __init__(self, step: int, node: int, value: float):
        super().__init__(f"G = {value!r} <= 0 at step {step}, node {node}")
        self.step, self.node, self.value = step, node, value


class GTreeInconsistency(HorizonError):
    pass


class NotStopped(HorizonError):
    pass


class InputNotMartingale(HorizonError):
    pass


class ConversionMismatch(HorizonError):
    pass


class StoppingRuleError(HorizonError):
    pass


def exact_tol(steps: int) -> float:
    """Tolerance used for identities that hold exactly in exact arithmetic."""
    return 1e-12 if steps <= 12 else 1e-9


def block_mean(tree: FiltrationTree, leaf_values: np.ndarray, t: int) -> np.ndarray:
    """E[X | F_t] for a leaf-measurable X, computed by summing leaf blocks."""
    n = tree.steps
    w = tree.path_prob(n) * leaf_values
    return w.reshape(2 ** t, -1).sum(axis=1) / tree.path_prob(t)


# ---------------------------------------------------------------------------
# random time models

def _law_from_hazard(hazard: np.ndarray) -> np.ndarray:
    """Leaf law from per-step death hazards of shape (leaves, N)."""
    survive = np.cumprod(1.0 - hazard, axis=1)
    before = np.concatenate([np.ones((hazard.shape[0], 1)), survive[:, :-1]], axis=1)
    return np.concatenate([before * hazard, survive[:, -1:]], axis=1)


class RandomTimeModel:
    """Conditional law of ``tau`` given the terminal Brownian path.

    ``leaf_law`` has shape ``(2**N, N + 1)``: column ``s - 1`` is
    ``P(tau = s | F_N)`` and the last column is the survival mass.
    """

    def __init__(self, tree: FiltrationTree, leaf_law, kind: str = "explicit",
                 parameters: dict | None = None, tol: float = 1e-12):
        law = np.asarray(leaf_law, dtype=float)
        n = tree.steps
        if law.shape != (2 ** n, n + 1):
            raise HorizonError(f"leaf_law must have shape {(2 ** n, n + 1)}, got {law.shape}")
        if np.any(law < 0):
            raise HorizonError("leaf_law has negative entries")
        if np.max(np.abs(law.sum(axis=1) - 1.0)) > tol:
            raise HorizonError("leaf_law rows must sum to one")
        self.tree = tree
        self.leaf_law = law
        self.kind = kind
        self.parameters = dict(parameters or {})

    # named constructors -------------------------------------------------
    @classmethod
    def independent_hazard(cls, tree: FiltrationTree, p: float) -> "RandomTimeModel":
        if not 0 <= p < 1:
            raise HorizonError("hazard must lie in [0, 1)")
        hazard = np.full((2 ** tree.steps, tree.steps), float(p))
        return cls(tree, _law_from_hazard(hazard), "independent", {"p": p})

    @classmethod
    def survives(cls, tree: FiltrationTree) -> "RandomTimeModel":
        law = np.zeros((2 ** tree.steps, tree.steps + 1))
        law[:, -1] = 1.0
        return cls(tree, law, "survives", {})

    @classmethod
    def adapted_hazard(cls, tree: FiltrationTree, base: float, tilt: float) -> "RandomTimeModel":
        """Hazard at step s is a function of ``W_s`` (an F-stopping-time-like default)."""
        n = tree.steps
        paths = tree.brownian().path_matrix()[:, 1:]
        hazard = np.clip(base * np.exp(tilt * paths / np.sqrt(tree.grid.horizon)), 1e-6, 0.9)
        return cls(tree, _law_from_hazard(hazard), "adapted", {"base": base, "tilt": tilt})

    @classmethod
    def lookahead_hazard(cls, tree: FiltrationTree, base: float, tilt: float) -> "RandomTimeModel":
        """Hazard at step s depends on the Brownian move at step s + 1."""
        n = tree.steps
        leaves = np.arange(2 ** n)
        hazard = np.full((2 ** n, n), float(base))
        for s in range(1, n):
            up = (leaves >> (n - s - 1)) & 1
            hazard[:, s - 1] = base * np.where(up == 1, 1 + tilt, 1 - tilt)
        hazard = np.clip(hazard, 1e-6, 0.9)
        return cls(tree, _law_from_hazard(hazard), "lookahead", {"base": base, "tilt": tilt})

    @classmethod
    def terminal_hazard(cls, tree: FiltrationTree, base: float, tilt: float) -> "RandomTimeModel":
        """Hazard depends on the terminal value ``W_N``."""
        n = tree.steps
        w_n = tree.brownian().leaves() / np.sqrt(tree.grid.horizon)
        hazard = np.clip(np.outer(base * np.exp(tilt * w_n), np.ones(n)), 1e-6, 0.9)
        return cls(tree, _law_from_hazard(hazard), "terminal", {"base": base, "tilt": tilt})

    @classmethod
    def from_spec(cls, tree: FiltrationTree, spec: dict) -> "RandomTimeModel":
        kind = spec.get("model_kind")
        params = dict(spec.get("parameters", {}))
        if "leaf_law" in spec:
            return cls(tree, spec["leaf_law"], "explicit", {})
        builders = {
            "independent": cls.independent_hazard,
            "adapted": cls.adapted_hazard,
            "lookahead": cls.lookahead_hazard,
            "terminal": cls.terminal_hazard,
            "survives": cls.survives,
        }
        if kind not in builders:
            raise HorizonError(f"unknown model_kind {kind!r}")
        try:
            return builders[kind](tree, **params)
        except TypeError as exc:
            raise HorizonError(f"bad parameters for {kind}: {exc}") from None

    def to_dict(self, explicit: bool = False) -> dict:
        if explicit or self.kind == "explicit":
            return {"model_kind": "explicit", "leaf_law": self.leaf_law.tolist()}
        return {"model_kind": self.kind, "parameters": self.parameters}

    def to_json(self, explicit: bool = False) -> str:
        return json.dumps(self.to_dict(explicit))

    @classmethod
    def from_json(cls, tree: FiltrationTree, text: str) -> "RandomTimeModel":
        return cls.from_spec(tree, json.loads(text))

    def truncate(self, steps: int) -> "RandomTimeModel":
        """The same random time seen through an ``F_steps`` window."""
        tree = self.tree.truncate(steps)
        n = self.tree.steps
        law = np.empty((2 ** steps, steps + 1))
        for s in range(steps):
            law[:, s] = block_mean(self.tree, self.leaf_law[:, s], steps)
        law[:, steps] = block_mean(self.tree, self.leaf_law[:, steps:].sum(axis=1), steps)
        return RandomTimeModel(tree, law, "explicit", {"truncated_from": n})

    def tail(self) -> np.ndarray:
        """``R[:, j] = P(tau > j | F_N)`` for ``j = 0..N``."""
        return np.cumsum(self.leaf_law[:, ::-1], axis=1)[:, ::-1]


# ---------------------------------------------------------------------------
# Azema bundle

@dataclass(frozen=True)
class AzemaBundle:
    tree: FiltrationTree
    G: TreeProcess
    Gtilde: TreeProcess
    DoF: TreeProcess
    m: TreeProcess
    Ztilde: TreeProcess
    Etilde: TreeProcess
    VF: TreeProcess
    dD: tuple = field(repr=False, default=())

    @property
    def G0(self) -> float:
        return float(self.G[0][0])

    def to_rows(self):
        names = ("G", "Gtilde", "DoF", "m", "Ztilde", "Etilde", "VF")
        for t in range(self.tree.steps + 1):
            for i in range(2 ** t):
                yield [t, i] + [float(getattr(self, k)[t][i]) for k in names]


def build_azema(model: RandomTimeModel) -> AzemaBundle:
    tree = model.tree
    n = tree.steps
    tail = model.tail()
    G, Gt = [], []
    for t in range(n + 1):
        g = block_mean(tree, tail[:, t], t)
        gt = np.ones(1) if t == 0 else block_mean(tree, tail[:, t - 1], t)
        if np.any(g <= 0):
            i = int(np.argmax(g <= 0))
            raise PositivityViolation(t, i, float(g[i]))
        G.append(g)
        Gt.append(gt)
    G, Gt = TreeProcess(G), TreeProcess(Gt)
    dD = [np.zeros(1)] + [Gt[t] - G[t] for t in range(1, n + 1)]
    DoF = cumulate(dD)
    m = G + DoF
    # 1 / E(G_-^{-1} . m) has factors G_{t-1} / Gtilde_t since dm_t = Gtilde_t - G_{t-1};
    # using them directly avoids cancellation in m when G is small
    zt, etil = [np.ones(1)], [G[0] / Gt[0]]
    for t in range(1, n + 1):
        zt.append(expand(zt[-1]) * expand(G[t - 1]) / Gt[t])
        etil.append(expand(etil[-1]) * (1.0 - dD[t] / Gt[t]))
    Ztilde, Etilde = TreeProcess(zt), TreeProcess(etil)
    return AzemaBundle(tree, G, Gt, DoF, m, Ztilde, Etilde, 1.0 - Etilde, tuple(dD))


def ztilde_from_m(bundle: AzemaBundle) -> TreeProcess:
    """``1 / E(G_-^{-1} . m)`` evaluated literally from the martingale ``m``."""
    return stochastic_exponential(stochastic_integral((1.0 / bundle.G).left(), bundle.m)).map(np.reciprocal)


# ---------------------------------------------------------------------------
# enlarged state space

class GProcess:
    """Process on the enlarged tree, stopped at ``tau``.

    ``alive[t]`` holds the value on ``{t < tau}`` at each step-t node and
    ``dead[s]`` (``s >= 1``) the value frozen at death time ``s``, indexed by
    the step-s node.  ``dead[0]`` is an empty placeholder.
    """

    __slots__ = ("alive", "dead")

    def __init__(self, alive, dead):
        if isinstance(alive, TreeProcess):
            alive = alive.values
        self.alive = tuple(np.asarray(a, dtype=float) for a in alive)
        dead = list(dead)
        if len(dead) == len(self.alive) - 1:
            dead = [np.empty(0)] + dead
        self.dead = tuple([np.empty(0)] + [np.asarray(d, dtype=float) for d in dead[1:]])
        if len(self.dead) != len(self.alive):
            raise HorizonError("alive and dead parts have different depths")
        for s in range(1, len(self.dead)):
            if self.dead[s].shape != (2 ** s,):
                raise HorizonError(f"dead values at step {s} have shape {self.dead[s].shape}")

    @property
    def steps(self) -> int:
        return len(self.alive) - 1

    @property
    def xF(self) -> TreeProcess:
        return TreeProcess(self.alive)

    @property
    def k(self) -> tuple:
        return self.dead

    @classmethod
    def lift(cls, x: TreeProcess) -> "GProcess":
        """The stopped process ``x^tau`` of an F-optional process."""
        return cls(x.values, x.values)

    @classmethod
    def zeros(cls, steps: int) -> "GProcess":
        z = [np.zeros(2 ** t) for t in range(steps + 1)]
        return cls(z, z)

    @classmethod
    def from_increments(cls, start: float, inc_alive, inc_dead) -> "GProcess":
        alive = [np.full(1, float(start))]
        dead = [np.empty(0)]
        for t in range(1, len(inc_alive)):
            base = expand(alive[-1])
            alive.append(base + inc_alive[t])
            dead.append(base + inc_dead[t])
        return cls(alive, dead)

    def increments(self):
        inc_a, inc_d = [np.zeros(1)], [np.empty(0)]
        for t in range(1, len(self.alive)):
            base = expand(self.alive[t - 1])
            inc_a.append(self.alive[t] - base)
            inc_d.append(self.dead[t] - base)
        return inc_a, inc_d

    def _combine(self, other, op):
        if isinstance(other, GProcess):
            return GProcess([op(a, b) for a, b in zip(self.alive, other.alive)],
                            [np.empty(0)] + [op(a, b) for a, b in zip(self.dead[1:], other.dead[1:])])
        return GProcess([op(a, other) for a in self.alive],
                        [np.empty(0)] + [op(a, other) for a in self.dead[1:]])

    def __add__(self, other):
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._combine(other, np.divide)

    def __neg__(self):
        return self * -1.0

    def map(self, fn) -> "GProcess":
        return GProcess([fn(a) for a in self.alive], [np.empty(0)] + [fn(d) for d in self.dead[1:]])

    def max_abs_diff(self, other: "GProcess") -> float:
        worst = 0.0
        for a, b in zip(self.alive, other.alive):
            worst = max(worst, float(np.max(np.abs(a - b))))
        for a, b in zip(self.dead[1:], other.dead[1:]):
            diff = np.abs(a - b)
            diff[(a == b)] = 0.0  # equal infinities
            worst = max(worst, float(np.max(diff)))
        return worst

    def min(self) -> float:
        return min([float(a.min()) for a in self.alive] + [float(d.min()) for d in self.dead[1:]])


@dataclass(frozen=True)
class StateWeights:
    """Probability of reaching each alive or death state."""
    alive: tuple
    dead: tuple

    def terminal(self, horizon: int):
        return self.alive[horizon], self.dead[1:horizon + 1]

    def total(self, horizon: int) -> float:
        a, d = self.terminal(horizon)
        return float(a.sum() + sum(x.sum() for x in d))


class GTree:
    """Alive/dead state space with four-way transitions from every alive node.

    ``surv[measure][t]`` and ``die[measure][t]`` (``t >= 1``) are the
    probabilities, from the parent alive node at ``t - 1``, of moving to the
    step-t node and surviving, respectively dying at ``t``.
    """

    def __init__(self, model: RandomTimeModel, bundle: AzemaBundle, surv: dict, die: dict):
        self.model = model
        self.bundle = bundle
        self.tree = model.tree
        self.surv = surv
        self.die = die
        self._weights: dict = {}

    @property
    def steps(self) -> int:
        return self.tree.steps

    def step_mean(self, t: int, alive_next: np.ndarray, dead_next: np.ndarray, measure: str = "P"):
        """Conditional expectation at alive step-t nodes of a step-(t+1) value."""
        s, d = self.surv[measure][t + 1], self.die[measure][t + 1]
        return pair_sum(s * alive_next + d * dead_next)

    def state_weights(self, measure: str = "P") -> StateWeights:
        if measure not in self._weights:
            alive, dead = [np.ones(1)], [np.empty(0)]
            for t in range(1, self.steps + 1):
                base = expand(alive[-1])
                alive.append(base * self.surv[measure][t])
                dead.append(base * self.die[measure][t])
            self._weights[measure] = StateWeights(tuple(alive), tuple(dead))
        return self._weights[measure]

    def expect_terminal(self, alive_vals: np.ndarray, dead_vals, measure: str = "P",
                        horizon: int | None = None) -> float:
        h = self.steps if horizon is None else horizon
        w = self.state_weights(measure)
        total = float(np.dot(w.alive[h], alive_vals))
        for s in range(1, h + 1):
            total += float(np.dot(w.dead[s], dead_vals[s]))
        return total


def build_gtree(model: RandomTimeModel, bundle: AzemaBundle) -> GTree:
    tree = model.tree
    n = tree.steps
    tol = exact_tol(n)
    tail = model.tail()
    leaf_p = tree.path_prob(n)
    alive_mass = [np.ones(1)]
    death_mass = [np.empty(0)]
    for t in range(1, n + 1):
        alive_mass.append((leaf_p * tail[:, t]).reshape(2 ** t, -1).sum(axis=1))
        death_mass.append((leaf_p * model.leaf_law[:, t - 1]).reshape(2 ** t, -1).sum(axis=1))
    surv_p, die_p = [None], [None]
    for t in range(1, n + 1):
        parent = expand(alive_mass[t - 1])
        surv_p.append(alive_mass[t] / parent)
        die_p.append(death_mass[t] / parent)
        total = pair_sum(surv_p[t] + die_p[t])
        if np.max(np.abs(total - 1.0)) > tol:
            raise GTreeInconsistency(f"four-way weights at step {t - 1} do not sum to one")
    # forward accumulation reproduces G
    acc = np.ones(1)
    for t in range(1, n + 1):
        acc = expand(acc) * surv_p[t]
        gap = np.max(np.abs(acc - tree.path_prob(t) * bundle.G[t]))
        if gap > tol:
            raise GTreeInconsistency(f"survival mass differs from G at step {t} by {gap:.3e}")
    surv_q, die_q = [None], [None]
    for t in range(1, n + 1):
        trans = tree.trans_prob(t)
        surv_q.append(trans * bundle.G[t] / bundle.Gtilde[t])
        die_q.append(trans * bundle.dD[t] / bundle.Gtilde[t])
    return GTree(model, bundle, {"P": surv_p, "Q": surv_q}, {"P": die_p, "Q": die_q})


def qtilde_weights(gtree: GTree, bundle: AzemaBundle, horizon_step: int | None = None) -> StateWeights:
    """State weights of Qtilde, checked against the density ``Ztilde`` at ``horizon∧tau``."""
    n = gtree.steps
    h = n if horizon_step is None else horizon_step
    if not 0 <= h <= n:
        raise HorizonError(f"horizon {h} outside 0..{n}")
    tol = exact_tol(n)
    wq = gtree.state_weights("Q")
    wp = gtree.state_weights("P")
    Zt = bundle.Ztilde
    gap = float(np.max(np.abs(wq.alive[h] - wp.alive[h] * Zt[h])))
    for s in range(1, h + 1):
        gap = max(gap, float(np.max(np.abs(wq.dead[s] - wp.dead[s] * Zt[s]))))
    if gap > tol:
        raise GTreeInconsistency(f"Qtilde weights differ from P * Ztilde by {gap:.3e}")
    if abs(wq.total(h) - 1.0) > tol:
        raise GTreeInconsistency("Qtilde does not have unit mass")
    return StateWeights(wq.alive[:h + 1], wq.dead[:h + 1])


def g_martingale_deviation(gtree: GTree, x: GProcess, measure: str = "P",
                           horizon: int | None = None) -> float:
    """Largest one-step drift of a stopped G-process at alive nodes."""
    h = gtree.steps if horizon is None else horizon
    worst = 0.0
    for t in range(h):
        mean = gtree.step_mean(t, x.alive[t + 1], x.dead[t + 1], measure)
        worst = max(worst, float(np.max(np.abs(mean - x.alive[t]))))
    return worst


def g_integral(integrand_alive, integrand_dead, x: GProcess) -> GProcess:
    """``H . x`` with the integrand evaluated at the arrival step of each increment."""
    inc_a, inc_d = x.increments()
    n = x.steps
    return GProcess.from_increments(
        0.0,
        [None] + [integrand_alive[t] * inc_a[t] for t in range(1, n + 1)],
        [None] + [integrand_dead[t] * inc_d[t] for t in range(1, n + 1)])


# ---------------------------------------------------------------------------
# decomposition and the fundamental G-martingales

class GPathProcess:
    """A G-adapted process observed after death as well.

    ``post[s][u - s]`` holds the values at step ``u >= s`` on ``{tau = s}``,
    indexed by the step-u node.
    """

    def __init__(self, alive, post):
        self.alive = tuple(np.asarray(a, dtype=float) for a in alive)
        self.post = {int(s): tuple(np.asarray(v, dtype=float) for v in vals) for s, vals in post.items()}

    @classmethod
    def compose(cls, gp: GProcess) -> "GPathProcess":
        n = gp.steps
        post = {}
        for s in range(1, n + 1):
            vals = [gp.dead[s]]
            for _ in range(s + 1, n + 1):
                vals.append(expand(vals[-1]))
            post[s] = vals
        return cls(gp.alive, post)


def decompose_g2f(x: GPathProcess, stopped_at_tau: bool = True, tol: float = 0.0) -> GProcess:
    """Return the pair ``(X^F, k)`` with ``x = X^F`` before death and ``k`` at death."""
    n = len(x.alive) - 1
    dead = [np.empty(0)]
    for s in range(1, n + 1):
        vals = x.post[s]
        if stopped_at_tau:
            frozen = vals[0]
            for j, v in enumerate(vals[1:], start=1):
                frozen = expand(frozen)
                bad = np.abs(v - frozen) > tol
                if np.any(bad):
                    i = int(np.argmax(bad))
                    raise NotStopped(f"value changes after death at step {s}: step {s + j}, node {i}")
        dead.append(vals[0])
    return GProcess(x.alive, dead)


def optional_projection_kop(k, bundle: AzemaBundle, gtree: GTree | None = None) -> TreeProcess:
    """F-optional projection of the death payoff with respect to ``P (x) D``.

    Nodes without death mass get value 0.
    """
    n = bundle.tree.steps
    vals = [np.zeros(1)]
    for t in range(1, n + 1):
        mass = bundle.dD[t]
        num = np.asarray(k[t], dtype=float) * mass
        if gtree is not None:
            # same numerator measured on the enlarged tree: mass of the death state
            w = gtree.state_weights("P").dead[t] / bundle.tree.path_prob(t)
            num = np.asarray(k[t], dtype=float) * w
        out = np.zeros(2 ** t)
        pos = mass > 0
        out[pos] = num[pos] / mass[pos]
        vals.append(out)
    return TreeProcess(vals)


def build_ng(gtree: GTree, bundle: AzemaBundle) -> GProcess:
    n = gtree.steps
    hz = [None] + [bundle.dD[t] / bundle.Gtilde[t] for t in range(1, n + 1)]
    return GProcess.from_increments(0.0, [None] + [-hz[t] for t in range(1, n + 1)],
                                    [None] + [1.0 - hz[t] for t in range(1, n + 1)])


def discount_identity(L: TreeProcess, gtree: GTree, bundle: AzemaBundle) -> tuple[GProcess, GProcess, float]:
    """Both sides of ``(L / Etilde) 1_{[0, tau)} + (L / Etilde) . N^G = L_0 + (1 / Etilde_-) . L^tau``."""
    n = gtree.steps
    ratio = [L[t] / bundle.Etilde[t] for t in range(n + 1)]
    zero = [np.zeros(2 ** t) for t in range(n + 1)]
    lhs = GProcess(ratio, zero) + g_integral(ratio, ratio, build_ng(gtree, bundle))
    dL = L.increments()
    inc = [None] + [dL[t] / expand(bundle.Etilde[t - 1]) for t in range(1, n + 1)]
    rhs = GProcess.from_increments(float(L[0][0]), inc, inc)
    return lhs, rhs, lhs.max_abs_diff(rhs)


def death_indicator(n: int) -> GProcess:
    """The default process ``D = 1_{tau <= t}``."""
    return GProcess([np.zeros(2 ** t) for t in range(n + 1)], [np.ones(2 ** t) for t in range(n + 1)])


def transform_T(mart: TreeProcess, gtree: GTree, bundle: AzemaBundle, tol: float | None = None) -> GProcess:
    """``T(M) = M^tau - Gtilde^{-1} 1_{(0, tau]} . [M, m]``."""
    tree = gtree.tree
    n = tree.steps
    tol = exact_tol(n) if tol is None else tol
    ok, dev = is_martingale(tree, mart, tol=tol * max(1.0, float(np.max(np.abs(mart.leaves())))))
    if not ok:
        raise InputNotMartingale(f"input drifts by {dev:.3e}")
    dM, dm = mart.increments(), bundle.m.increments()
    inc = [None] + [dM[t] * (1.0 - dm[t] / bundle.Gtilde[t]) for t in range(1, n + 1)]
    return GProcess.from_increments(float(mart[0][0]), inc, inc)


def convert_conditional(x, gtree: GTree, bundle: AzemaBundle, t: int,
                        tol: float | None = None) -> np.ndarray:
    """``E[X | G_t]`` on ``{t < tau}`` evaluated by joint enumeration and by projection.

    ``x`` is either an optional :class:`TreeProcess` (then ``X = X_t``) or an
    array of leaf values (a terminal-path variable).
    """
    model = gtree.model
    tree = gtree.tree
    n = tree.steps
    if not 0 <= t <= n:
        raise HorizonError(f"step {t} outside 0..{n}")
    tol = exact_tol(n) if tol is None else tol
    if isinstance(x, TreeProcess):
        v = x[t][tree.leaf_ancestors(t)]
    else:
        v = np.asarray(x, dtype=float)
    leaf_p = tree.path_prob(n)
    # joint enumeration over (leaf, tau) restricted to the atom {node, tau > t}
    num = np.zeros(2 ** n)
    den = np.zeros(2 ** n)
    for j in range(t + 1, n + 2):
        w = leaf_p * model.leaf_law[:, j - 1]
        num += w * v
        den += w
    direct = num.reshape(2 ** t, -1).sum(axis=1) / den.reshape(2 ** t, -1).sum(axis=1)
    projected = block_mean(tree, v * model.tail()[:, t], t) / bundle.G[t]
    scale = max(1.0, float(np.max(np.abs(v))))
    gap = float(np.max(np.abs(direct - projected)))
    if gap > tol * scale:
        raise ConversionMismatch(f"conditional expectations differ by {gap:.3e} at step {t}")
    return projected


# ---------------------------------------------------------------------------
# stopping rules

class StoppingRule:
    """F-stopping time stored as the stopping step of every leaf."""

    def __init__(self, tree: FiltrationTree, times):
        self.tree = tree
        self.times = np.asarray(times, dtype=int)
        n = tree.steps
        if self.times.shape != (2 ** n,):
            raise StoppingRuleError("one stopping step per leaf required")
        if np.any(self.times < 0) or np.any(self.times > n):
            raise StoppingRuleError("stopping steps must lie in 0..N")
        for u in range(n + 1):
            block = (self.times == u).reshape(2 ** u, -1)
            if np.any(block.any(axis=1) != block.all(axis=1)):
                raise StoppingRuleError(f"event {{sigma = {u}}} is not F_{u}-measurable")

    @classmethod
    def constant(cls, tree: FiltrationTree, k: int) -> "StoppingRule":
        return cls(tree, np.full(2 ** tree.steps, int(k)))

    @classmethod
    def from_flags(cls, tree: FiltrationTree, flags) -> "StoppingRule":
        """First step whose flag is set along each path; the horizon otherwise."""
        n = tree.steps
        times = np.full(2 ** n, n)
        done = np.zeros(2 ** n, dtype=bool)
        for t in range(n):
            hit = np.asarray(flags[t], dtype=bool)[tree.leaf_ancestors(t)] & ~done
            times[hit] = t
            done |= hit
        return cls(tree, times)

    def flags(self) -> list[np.ndarray]:
        n = self.tree.steps
        return [(self.times == t).reshape(2 ** t, -1).any(axis=1) for t in range(n + 1)]

    def __le__(self, other: "StoppingRule") -> bool:
        return bool(np.all(self.times <= other.times))


def reduce_stopping_time(sigma_G: StoppingRule, sigma1: StoppingRule, sigma2: StoppingRule,
                         model: RandomTimeModel) -> StoppingRule:
    """F-stopping time ``sigma^F`` in ``[sigma1, sigma2]`` with ``sigma^F ∧ tau = sigma^G``.

    ``sigma^G`` is passed through an F-rule ``sigma`` with ``sigma^G = sigma ∧ tau``.
    """
    n = model.tree.steps
    taus = np.arange(1, n + 2)
    support = model.leaf_law > 0

    def witness(mask):
        leaf, j = np.argwhere(mask)[0]
        return f"leaf {leaf}, tau = {taus[j] if taus[j] <= n else 'survives'}"

    if not sigma1 <= sigma2:
        bad = sigma1.times > sigma2.times
        raise StoppingRuleError(f"sigma1 > sigma2 at leaf {int(np.argmax(bad))}")
    s, s1, s2 = (r.times[:, None] for r in (sigma_G, sigma1, sigma2))
    g = np.minimum(s, taus[None, :])
    low, high = np.minimum(s1, taus[None, :]), np.minimum(s2, taus[None, :])
    bad = support & ((g < low) | (g > high))
    if np.any(bad):
        raise StoppingRuleError("sigma^G outside [sigma1∧tau, sigma2∧tau] at " + witness(bad))
    out = StoppingRule(model.tree, np.minimum(np.maximum(sigma_G.times, sigma1.times), sigma2.times))
    f = out.times[:, None]
    bad = support & (np.minimum(f, taus[None, :]) != g)
    if np.any(bad):
        raise StoppingRuleError("reduction identity fails at " + witness(bad))
    return out
