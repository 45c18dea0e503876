"""Snell envelopes on the F-tree and on the enlarged tree, and the transfer formulas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .horizon import (AzemaBundle, GProcess, GTree, build_ng, death_indicator, g_integral,
                      optional_projection_kop, transform_T)
from .lattice import FiltrationTree, TreeProcess, cumulate, expand

MAX_BRUTE_F = 4
MAX_BRUTE_G = 3


class DepthTooLarge(ValueError):
    pass


@dataclass
class SnellResult:
    payoff: TreeProcess | GProcess
    value: TreeProcess | GProcess
    stop: list  # per-step boolean flags at (alive) nodes
    martingale: TreeProcess | GProcess
    compensator: TreeProcess | GProcess  # nondecreasing predictable part, value = M - A
    measure: str = "P"

    @property
    def root(self) -> float:
        v = self.value.values[0] if isinstance(self.value, TreeProcess) else self.value.alive[0]
        return float(v[0])

    def rows(self):
        """CSV rows ``(step, path, state, payoff, value, stop_flag)``."""
        if isinstance(self.value, TreeProcess):
            for t, (p, v, s) in enumerate(zip(self.payoff.values, self.value.values, self.stop)):
                for i in range(p.size):
                    yield t, i, "alive", p[i], v[i], int(s[i])
            return
        for t in range(len(self.value.alive)):
            p, v, s = self.payoff.alive[t], self.value.alive[t], self.stop[t]
            for i in range(p.size):
                yield t, i, "alive", p[i], v[i], int(s[i])
            if t:
                for i in range(self.value.dead[t].size):
                    yield t, i, "dead", self.payoff.dead[t][i], self.value.dead[t][i], 1


def _stop_flags(payoff_t, cont, tie_break):
    return payoff_t >= cont if tie_break == "stop" else payoff_t > cont


def snell(payoff, tree: FiltrationTree | GTree, measure: str = "P", tie_break: str = "stop") -> SnellResult:
    """Backward recursion ``V_t = max(X_t, E[V_{t+1} | .])`` under P or Qtilde."""
    if tie_break not in ("stop", "continue"):
        raise ValueError("tie_break must be 'stop' or 'continue'")
    with np.errstate(invalid="ignore"):
        if isinstance(tree, GTree):
            return _snell_g(payoff, tree, measure, tie_break)
        if measure != "P":
            raise ValueError("on the F-tree only the measure P is available")
        return _snell_f(payoff, tree, tie_break)


def _snell_f(payoff: TreeProcess, tree: FiltrationTree, tie_break: str) -> SnellResult:
    n = tree.steps
    val = [None] * (n + 1)
    stop = [None] * (n + 1)
    dA = [None] * (n + 1)
    val[n] = payoff[n].copy()
    stop[n] = np.ones(2 ** n, dtype=bool)
    for t in range(n - 1, -1, -1):
        cont = tree.step_mean(t, val[t + 1])
        val[t] = np.maximum(payoff[t], cont)
        stop[t] = _stop_flags(payoff[t], cont, tie_break)
        dA[t + 1] = expand(val[t] - cont)
    value = TreeProcess(val)
    A = cumulate([None] + dA[1:])
    return SnellResult(payoff, value, stop, value + A, A, "P")


def _snell_g(payoff: GProcess, gtree: GTree, measure: str, tie_break: str) -> SnellResult:
    n = gtree.steps
    val = [None] * (n + 1)
    stop = [None] * (n + 1)
    dA = [None] * (n + 1)
    val[n] = payoff.alive[n].copy()
    stop[n] = np.ones(2 ** n, dtype=bool)
    for t in range(n - 1, -1, -1):
        cont = gtree.step_mean(t, val[t + 1], payoff.dead[t + 1], measure)
        val[t] = np.maximum(payoff.alive[t], cont)
        stop[t] = _stop_flags(payoff.alive[t], cont, tie_break)
        dA[t + 1] = expand(val[t] - cont)
    value = GProcess(val, payoff.dead)
    A = GProcess.from_increments(0.0, dA, dA)
    return SnellResult(payoff, value, stop, value + A, A, measure)


def _all_rules(n: int):
    """Every assignment of stop flags to the nodes at steps 0..n-1."""
    n_internal = 2 ** n - 1
    codes = np.arange(2 ** n_internal, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n_internal)[None, :]) & 1).astype(bool)


def _rule_times(rules: np.ndarray, n: int) -> np.ndarray:
    """Stopping step per (rule, leaf) for flag-encoded rules; horizon if never flagged."""
    leaves = np.arange(2 ** n)
    times = np.full((rules.shape[0], 2 ** n), n)
    done = np.zeros_like(times, dtype=bool)
    for t in range(n):
        ids = 2 ** t - 1 + (leaves >> (n - t))
        hit = rules[:, ids] & ~done
        times[hit] = t
        done |= hit
    return times


def brute_force_snell(payoff, tree: FiltrationTree | GTree, measure: str = "P") -> float:
    """Best expected payoff over every stopping rule, by exhaustive enumeration."""
    if isinstance(tree, GTree):
        return _brute_g(payoff, tree, measure)
    n = tree.steps
    if n > MAX_BRUTE_F:
        raise DepthTooLarge(f"F-depth {n} exceeds {MAX_BRUTE_F}")
    times = _rule_times(_all_rules(n), n)
    paths = payoff.path_matrix()  # (leaves, n+1)
    leaves = np.arange(2 ** n)
    pay = paths[leaves[None, :], times]
    with np.errstate(invalid="ignore"):
        vals = pay @ tree.path_prob(n)
    return float(np.max(vals))


def _brute_g(payoff: GProcess, gtree: GTree, measure: str) -> float:
    n = gtree.steps
    if n > MAX_BRUTE_G:
        raise DepthTooLarge(f"G-depth {n} exceeds {MAX_BRUTE_G}")
    model, bundle = gtree.model, gtree.bundle
    times = _rule_times(_all_rules(n), n)  # (rules, leaves)
    leaves = np.arange(2 ** n)
    alive_paths = TreeProcess(payoff.alive).path_matrix()
    total = np.zeros(times.shape[0])
    # enumerate the joint law of (leaf, tau) directly from the model
    for j in range(1, n + 2):
        w = model.tree.path_prob(n) * model.leaf_law[:, j - 1]
        if measure == "Q":
            stop_at = min(j, n)
            w = w * bundle.Ztilde[stop_at][leaves >> (n - stop_at)]
        if j <= n:
            death_pay = payoff.dead[j][leaves >> (n - j)]
            pay = np.where(times < j, alive_paths[leaves[None, :], times], death_pay[None, :])
        else:
            pay = alive_paths[leaves[None, :], times]
        with np.errstate(invalid="ignore"):
            total = total + np.where(w[None, :] > 0, pay * w[None, :], 0.0).sum(axis=1)
    return float(np.max(total))


@dataclass
class TransferReport:
    formula: GProcess
    direct: GProcess
    residual: float


def _path_cumsum(inc) -> TreeProcess:
    return cumulate(inc)


def transfer_snell_P(xF: TreeProcess, k, bundle: AzemaBundle, gtree: GTree) -> TransferReport:
    """Right-hand side of the (G, P) transfer formula against the direct envelope."""
    tree = bundle.tree
    n = tree.steps
    kop = optional_projection_kop(k, bundle)
    V = _path_cumsum([None] + [kop[t] * bundle.dD[t] for t in range(1, n + 1)])
    U = snell(xF * bundle.G + V, tree).value
    NG = build_ng(gtree, bundle)
    Tm = transform_T(bundle.m, gtree, bundle)
    dead_zero = [np.zeros(2 ** t) for t in range(n + 1)]
    term1 = GProcess((U / bundle.G).values, dead_zero)
    term2 = g_integral(dead_zero, [None] + [np.asarray(k[t]) - kop[t] for t in range(1, n + 1)],
                       death_indicator(n))
    h3 = [None] + [expand(V[t - 1] / bundle.G[t - 1] ** 2) for t in range(1, n + 1)]
    term3 = g_integral(h3, h3, Tm)
    h4 = [None] + [kop[t] + V[t] / bundle.G[t] for t in range(1, n + 1)]
    term4 = g_integral(h4, h4, NG)
    formula = term1 + term2 + term3 + term4
    direct = snell(GProcess(xF, k), gtree, "P").value
    return TransferReport(formula, direct, formula.max_abs_diff(direct))


def transfer_snell_Q(xF: TreeProcess, k, bundle: AzemaBundle, gtree: GTree,
                     horizon: int | None = None) -> TransferReport:
    """Right-hand side of the (G, Qtilde) transfer formula against the direct envelope."""
    if horizon is not None and horizon != gtree.steps:
        raise ValueError("transfer formulas are evaluated at the tree horizon; truncate the model first")
    tree = bundle.tree
    n = tree.steps
    kop = optional_projection_kop(k, bundle)
    dE = bundle.Etilde.increments()
    L = _path_cumsum([None] + [kop[t] * dE[t] for t in range(1, n + 1)])
    U = snell(xF * bundle.Etilde - L, tree).value
    NG = build_ng(gtree, bundle)
    dead_zero = [np.zeros(2 ** t) for t in range(n + 1)]
    term1 = GProcess((U / bundle.Etilde).values, dead_zero)
    term2 = g_integral(dead_zero, [None] + [np.asarray(k[t]) - kop[t] for t in range(1, n + 1)],
                       death_indicator(n))
    h3 = [None] + [kop[t] - L[t] / bundle.Etilde[t] for t in range(1, n + 1)]
    term3 = g_integral(h3, h3, NG)
    formula = term1 + term2 + term3
    direct = snell(GProcess(xF, k), gtree, "Q").value
    return TransferReport(formula, direct, formula.max_abs_diff(direct))
