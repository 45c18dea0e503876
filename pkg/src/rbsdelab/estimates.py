"""Norms on the enlarged tree, explicit constants and audits of the a-priori estimates."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .horizon import AzemaBundle, GProcess, GTree, build_ng
from .lattice import TreeProcess, cumulate, expand
from .rbsde import GSolution, RBSDEData, solve_linear_G


class EstimateError(ValueError):
    pass


class ExplicitConstantViolated(EstimateError):
    def __init__(self, tag: str, instance: int, lhs: float, rhs: float):
        super().__init__(f"{tag}: instance {instance} has lhs {lhs!r} > rhs {rhs!r}")
        self.tag, self.instance, self.lhs, self.rhs = tag, instance, lhs, rhs


# ---------------------------------------------------------------------------
# pathwise functionals on the enlarged tree

def path_expectation(gtree: GTree, measure: str, contrib_alive, contrib_dead, mode: str,
                     finalize=lambda v: v) -> float:
    """``E[finalize(A)]`` where ``A`` accumulates per-state contributions along each G-path.

    ``mode`` is ``"sum"`` or ``"max"``.  ``contrib_alive[t]`` is the contribution of
    the alive step-t state (``t = 0`` included), ``contrib_dead[s]`` that of dying at ``s``.
    """
    op = np.add if mode == "sum" else np.maximum
    w = gtree.state_weights(measure)
    n = gtree.steps
    acc = np.asarray(contrib_alive[0], dtype=float).reshape(1)
    total = 0.0
    for t in range(1, n + 1):
        parent = expand(acc)
        dead = op(parent, contrib_dead[t])
        total += float(np.dot(w.dead[t], finalize(dead)))
        acc = op(parent, contrib_alive[t])
    return total + float(np.dot(w.alive[n], finalize(acc)))


def _as_gprocess(x) -> GProcess:
    return x if isinstance(x, GProcess) else GProcess.lift(x)


@dataclass(frozen=True)
class NormSpec:
    """``weight`` is ``None``, ``"Etilde"``, ``"Etilde_minus"`` or ``"exp"`` (with ``alpha``)."""
    p: float = 2.0
    measure: str = "P"
    weight: str | None = None
    alpha: float = 0.0
    horizon_step: int | None = None

    def __post_init__(self):
        if not self.p > 1:
            raise EstimateError("p must exceed 1")
        if self.measure not in ("P", "Q"):
            raise EstimateError("measure must be 'P' or 'Q'")
        if self.weight not in (None, "Etilde", "Etilde_minus", "exp"):
            raise EstimateError(f"unknown weight {self.weight!r}")


def _weight_at(spec: NormSpec, bundle: AzemaBundle, t: int, shifted: bool) -> np.ndarray | float:
    """Multiplicative weight on states at step ``t``; ``shifted`` uses the left limit."""
    if spec.weight is None:
        return 1.0
    dt = bundle.tree.dt
    if spec.weight == "exp":
        s = t - 1 if shifted else t
        return float(np.exp(spec.alpha * max(s, 0) * dt / 2))
    if spec.weight == "Etilde_minus" or shifted:
        if t == 0:
            return np.ones(1)
        return expand(bundle.Etilde[t - 1]) ** (1.0 / spec.p)
    return bundle.Etilde[t] ** (1.0 / spec.p)


def norm(x, kind: str, spec: NormSpec, gtree: GTree) -> float:
    """D, S, M or A norm of ``x`` up to ``horizon ∧ tau``.

    D: ``E[sup |w Y|^p]^{1/p}``; S: ``E[(sum w_-^2 Z^2 dt)^{p/2}]^{1/p}``;
    M: ``E[(sum w_-^2 d[M, M])^{p/2}]^{1/p}``; A: ``E[(sum w_- |dA|)^p]^{1/p}``.
    """
    bundle = gtree.bundle
    n = gtree.steps if spec.horizon_step is None else spec.horizon_step
    if n != gtree.steps:
        raise EstimateError("norms are evaluated at the tree horizon")
    p = spec.p
    if kind == "D":
        g = _as_gprocess(x)
        ca = [np.abs(g.alive[t]) * _weight_at(spec, bundle, t, False) for t in range(n + 1)]
        cd = [None] + [np.abs(g.dead[t]) * _weight_at(spec, bundle, t, False) for t in range(1, n + 1)]
        return path_expectation(gtree, spec.measure, ca, cd, "max", lambda v: v ** p) ** (1 / p)
    if kind == "S":
        z = x.values if isinstance(x, TreeProcess) else x
        dt = bundle.tree.dt
        c = [np.zeros(1)] + [expand(z[t - 1] ** 2) * dt * _weight_at(spec, bundle, t, True) ** 2
                             for t in range(1, n + 1)]
        return path_expectation(gtree, spec.measure, c, c, "sum", lambda v: v ** (p / 2)) ** (1 / p)
    if kind in ("M", "A"):
        inc_a, inc_d = _as_gprocess(x).increments()
        power = 2 if kind == "M" else 1
        fin = (lambda v: v ** (p / 2)) if kind == "M" else (lambda v: v ** p)
        ca = [np.zeros(1)] + [np.abs(inc_a[t]) ** power * _weight_at(spec, bundle, t, True) ** power
                              for t in range(1, n + 1)]
        cd = [None] + [np.abs(inc_d[t]) ** power * _weight_at(spec, bundle, t, True) ** power
                       for t in range(1, n + 1)]
        return path_expectation(gtree, spec.measure, ca, cd, "sum", fin) ** (1 / p)
    raise EstimateError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# constants

def kappa(a: float) -> float:
    """``3^{1/a} (5 + max(a, 1/a)^{1/a})``."""
    if not a > 0:
        raise EstimateError("kappa needs a > 0")
    return 3.0 ** (1.0 / a) * (5.0 + max(a, 1.0 / a) ** (1.0 / a))


@dataclass(frozen=True)
class EstimateConstants:
    p: float = 2.0
    C_Lip: float = 0.0
    C_DB: float | None = None
    kappa_p: float = 1.0
    alpha0: float = field(init=False)
    alpha1: float = field(init=False)

    def __post_init__(self):
        if not self.p > 1:
            raise EstimateError("p must exceed 1")
        if self.C_Lip < 0:
            raise EstimateError("C_Lip must be nonnegative")
        if self.C_DB is None:
            object.__setattr__(self, "C_DB", (self.p / (self.p - 1)) ** self.p)
        c, cdb, k = self.C_Lip, self.C_DB, self.kappa_p
        bracket = (1 + 9 * np.sqrt(2) * k * (1 + cdb) / (3 - np.sqrt(8))) ** 2
        object.__setattr__(self, "alpha0", float(max(2 * c + 2 * c * c + 1, 81 * bracket * cdb ** 2 * c ** 2)))
        object.__setattr__(self, "alpha1",
                           float(max(8 / 9 + 4 * c + 4 * c * c, 81 / 4 * cdb ** 2 * c ** 2 * bracket)))


# ---------------------------------------------------------------------------
# the process Vtilde^(a) and the domination checks

def vtilde_a(bundle: AzemaBundle, a: float) -> TreeProcess:
    """``(a / Gtilde) . D^{o,F}`` plus the jump correction; increments ``1 - (1 - dD / Gtilde)^a``."""
    if not a > 0:
        raise EstimateError("a must be positive")
    n = bundle.tree.steps
    inc = [None]
    for t in range(1, n + 1):
        x = bundle.dD[t] / bundle.Gtilde[t]
        inc.append(a * x + (-a * x + 1.0 - (1.0 - x) ** a))
    return cumulate(inc)


def vtilde_monotonicity(bundle: AzemaBundle, a: float) -> tuple[float, float]:
    """Smallest increments of ``Vtilde^(a)`` and of ``max(a, 1) Gtilde^{-1} . D^{o,F} - Vtilde^(a)``."""
    v = vtilde_a(bundle, a).increments()
    n = bundle.tree.steps
    lo_v, lo_gap = np.inf, np.inf
    for t in range(1, n + 1):
        lo_v = min(lo_v, float(v[t].min()))
        gap = max(a, 1.0) * bundle.dD[t] / bundle.Gtilde[t] - v[t]
        lo_gap = min(lo_gap, float(gap.min()))
    return lo_v, lo_gap


def _conditional_terminal(gtree: GTree, alive_final, dead_vals, measure: str) -> list:
    """``E[X | G_t]`` on alive step-t states of a variable fixed at the terminal state."""
    n = gtree.steps
    vals = [None] * (n + 1)
    vals[n] = np.asarray(alive_final, dtype=float)
    for t in range(n - 1, -1, -1):
        vals[t] = gtree.step_mean(t, vals[t + 1], dead_vals[t + 1], measure)
    return vals


@dataclass
class DominationReport:
    qtilde_excess_Gminus: float  # max over alive nodes of lhs - G_{t-}
    qtilde_max: float  # max over alive nodes of lhs
    p_hazard_max: float  # max over alive nodes of the P-conditional hazard sum
    qtilde_excess_Gtilde: float = -np.inf  # same lhs against Gtilde_t, sharp on the lattice

    @property
    def bounded_by_one(self) -> bool:
        return self.qtilde_max <= 1 + 1e-12 and self.p_hazard_max <= 1 + 1e-12


def dual_projection_domination(gtree: GTree) -> DominationReport:
    """Evaluate both conditional bounds at every alive node."""
    bundle = gtree.bundle
    n = gtree.steps
    D = bundle.DoF
    qv = _conditional_terminal(gtree, D[n], D.values, "Q")
    excess, excess_tilde, qmax = -np.inf, -np.inf, -np.inf
    for t in range(n + 1):
        before = np.zeros(1) if t == 0 else expand(D[t - 1])
        g_minus = np.ones(1) if t == 0 else expand(bundle.G[t - 1])
        lhs = qv[t] - before
        excess = max(excess, float(np.max(lhs - g_minus)))
        excess_tilde = max(excess_tilde, float(np.max(lhs - bundle.Gtilde[t])))
        qmax = max(qmax, float(np.max(lhs)))
    A = cumulate([None] + [bundle.dD[t] / bundle.Gtilde[t] for t in range(1, n + 1)])
    pv = _conditional_terminal(gtree, A[n], A.values, "P")
    pmax = max(float(np.max(pv[t] - A[t])) for t in range(n + 1))
    return DominationReport(excess, qmax, pmax, excess_tilde)


# ---------------------------------------------------------------------------
# change of measure

@dataclass
class IdentityReport:
    lhs_stopped: float
    rhs_stopped: float
    lhs_death: float
    rhs_death: float

    @property
    def gap(self) -> float:
        return max(abs(self.lhs_stopped - self.rhs_stopped), abs(self.lhs_death - self.rhs_death))


def identity_qtilde_to_p(x: TreeProcess, gtree: GTree, horizon: int | None = None) -> IdentityReport:
    """``E^Q[X_{T∧tau}]`` and ``E^Q[X_tau 1_{tau<=T}]`` against their P-side expressions."""
    bundle = gtree.bundle
    tree = bundle.tree
    n = tree.steps if horizon is None else horizon
    if n != tree.steps:
        raise EstimateError("identity is evaluated at the tree horizon")
    if abs(float(x[0][0])) > 0:
        raise EstimateError("X must start at 0")
    if min(float(v.min()) for v in x.values) < 0:
        raise EstimateError("X must be nonnegative")
    w = gtree.state_weights("Q")
    lhs_death = sum(float(np.dot(w.dead[s], x[s])) for s in range(1, n + 1))
    lhs = lhs_death + float(np.dot(w.alive[n], x[n]))
    dV = bundle.VF.increments()
    rhs_death = sum(float(np.dot(tree.path_prob(s), x[s] * dV[s])) for s in range(1, n + 1))
    rhs = rhs_death + float(np.dot(tree.path_prob(n), x[n] * bundle.Etilde[n]))
    return IdentityReport(lhs, bundle.G0 * rhs, lhs_death, bundle.G0 * rhs_death)


# ---------------------------------------------------------------------------
# admissibility of long-horizon data

def f_alpha(data: RBSDEData, dt: float, alpha: float) -> TreeProcess:
    """``F^(alpha)_t = (sum_{s<t} e^{alpha s} f(s,0,0)^2 ds)^{1/2}``."""
    n = data.steps
    inc = [None] + [expand(np.exp(alpha * (t - 1) * dt) * data.driver(t - 1, np.zeros(2 ** (t - 1)),
                                                                        np.zeros(2 ** (t - 1))) ** 2 * dt)
                    for t in range(1, n + 1)]
    return cumulate(inc).map(np.sqrt)


def admissibility(data: RBSDEData, bundle: AzemaBundle, p: float) -> float:
    """``E[sum (|h|^p + F^p + sup (S^+)^p) dV^F]`` with ``F = sum |f| dt``."""
    tree = bundle.tree
    n, dt = tree.steps, tree.dt
    zeros = [np.zeros(2 ** t) for t in range(n)]
    F = cumulate([None] + [expand(np.abs(data.driver(t - 1, zeros[t - 1], zeros[t - 1]))) * dt
                           for t in range(1, n + 1)])
    sp = [np.maximum(data.barrier_S[0], 0.0)]
    for t in range(1, n + 1):
        sp.append(np.maximum(expand(sp[-1]), np.maximum(data.barrier_S[t], 0.0)))
    dV = bundle.VF.increments()
    total = 0.0
    for t in range(1, n + 1):
        integrand = np.abs(data.terminal_h[t]) ** p + F[t] ** p + sp[t] ** p
        total += float(np.dot(tree.path_prob(t), integrand * dV[t]))
    return total


# ---------------------------------------------------------------------------
# audits

AUDIT_TAGS = ("T4.1", "T4.2", "L5.1b", "L5.1c", "T5.2")


@dataclass
class EstimateReport:
    tag: str
    rows: list  # (instance id, lhs, rhs, ratio, passed)

    @property
    def max_ratio(self) -> float:
        return max((r[3] for r in self.rows), default=0.0)

    @property
    def violations(self) -> list:
        return [r[0] for r in self.rows if not r[4]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["instance", "theorem", "lhs", "rhs", "ratio", "pass"])
        for i, lhs, rhs, ratio, ok in sorted(self.rows):
            w.writerow([i, self.tag, f"{lhs:.17g}", f"{rhs:.17g}", f"{ratio:.17g}", int(ok)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"theorem": self.tag, "instances": len(self.rows), "max_ratio": self.max_ratio,
                "violations": self.violations}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def _ratio(lhs: float, rhs: float) -> float:
    if rhs > 0:
        return lhs / rhs
    return 0.0 if lhs <= 0 else float("inf")


def _data_side(data: RBSDEData, gtree: GTree, p: float) -> float:
    """``E^Q[|xi|^p + (sum |f| dt)^p + sup (S^+)^p]`` up to ``T ∧ tau``."""
    n, dt = gtree.steps, gtree.tree.dt
    h, S = data.terminal_h, data.barrier_S
    f = data.linear_f()
    xi = gtree.expect_terminal(np.abs(h[n]) ** p, [None] + [np.abs(h[s]) ** p for s in range(1, n + 1)], "Q")
    fc = [np.zeros(1)] + [expand(np.abs(f[t - 1]) * dt) for t in range(1, n + 1)]
    fpart = path_expectation(gtree, "Q", fc, fc, "sum", lambda v: v ** p)
    sc = [np.maximum(S[t], 0.0) for t in range(n + 1)]
    spart = path_expectation(gtree, "Q", sc, [None] + sc[1:], "max", lambda v: v ** p)
    return xi + fpart + spart


def a_priori_sides(sol: GSolution, data: RBSDEData, gtree: GTree, p: float) -> tuple[float, float]:
    q = NormSpec(p, "Q")
    n, dt = gtree.steps, gtree.tree.dt
    ya = norm(sol.Y, "D", q, gtree) ** p
    ma, md = sol.M.increments()
    ca = [np.zeros(1)] + [expand(sol.Z[t - 1] ** 2) * dt + ma[t] ** 2 for t in range(1, n + 1)]
    cd = [None] + [expand(sol.Z[t - 1] ** 2) * dt + md[t] ** 2 for t in range(1, n + 1)]
    zm = path_expectation(gtree, "Q", ca, cd, "sum", lambda v: v ** (p / 2))
    kt = gtree.expect_terminal(sol.K.alive[n] ** p, [None] + [sol.K.dead[s] ** p for s in range(1, n + 1)], "Q")
    return ya + zm + kt, _data_side(data, gtree, p)


def estimate4p_lhs(sol: GSolution, gtree: GTree, p: float) -> float:
    spec = NormSpec(p, "P", "Etilde")
    return (norm(sol.Y, "D", spec, gtree) ** p + norm(sol.Z, "S", spec, gtree) ** p
            + norm(sol.K, "A", spec, gtree) ** p + norm(sol.M, "M", spec, gtree) ** p)


def difference_sides(s1: GSolution, s2: GSolution, d1: RBSDEData, d2: RBSDEData, gtree: GTree,
                     p: float, c1: float = 1.0, c2: float = 1.0) -> tuple[float, float]:
    n, dt = gtree.steps, gtree.tree.dt
    q = NormSpec(p, "Q")
    dY = s1.Y - s2.Y
    dZ = [a - b for a, b in zip(s1.Z.values, s2.Z.values)]
    ma, md = (s1.M - s2.M).increments()
    ca = [np.zeros(1)] + [expand(dZ[t - 1] ** 2) * dt + ma[t] ** 2 for t in range(1, n + 1)]
    cd = [None] + [expand(dZ[t - 1] ** 2) * dt + md[t] ** 2 for t in range(1, n + 1)]
    lhs = norm(dY, "D", q, gtree) ** p + path_expectation(gtree, "Q", ca, cd, "sum", lambda v: v ** (p / 2))
    h = d1.terminal_h - d2.terminal_h
    f1, f2 = d1.linear_f(), d2.linear_f()
    with np.errstate(invalid="ignore"):
        dS = [np.nan_to_num(np.abs(a - b), nan=0.0, posinf=np.inf) for a, b in
              zip(d1.barrier_S.values, d2.barrier_S.values)]
    xi = gtree.expect_terminal(np.abs(h[n]) ** p, [None] + [np.abs(h[s]) ** p for s in range(1, n + 1)], "Q")
    fc = [np.zeros(1)] + [expand(np.abs(f1[t - 1] - f2[t - 1]) * dt) for t in range(1, n + 1)]
    fpart = path_expectation(gtree, "Q", fc, fc, "sum", lambda v: v ** p)
    spart = path_expectation(gtree, "Q", dS, [None] + dS[1:], "max", lambda v: v ** p)
    rhs = c1 * (xi + fpart + spart) + c2 * spart ** 0.5 * np.sqrt(_data_side(d1, gtree, p) + _data_side(d2, gtree, p))
    return lhs, float(rhs)


def increasing_estimate_sides(K: GProcess, gtree: GTree, a: float) -> tuple[float, float]:
    bundle = gtree.bundle
    n = gtree.steps
    ia, idd = K.increments()
    wa = [np.zeros(1)] + [expand(bundle.Etilde[t - 1]) ** a * ia[t] for t in range(1, n + 1)]
    wd = [None] + [expand(bundle.Etilde[t - 1]) ** a * idd[t] for t in range(1, n + 1)]
    lhs = path_expectation(gtree, "P", wa, wd, "sum", lambda v: v ** (1 / a))
    kt = gtree.expect_terminal(K.alive[n] ** (1 / a), [None] + [K.dead[s] ** (1 / a) for s in range(1, n + 1)], "Q")
    ja = [np.zeros(1)] + [bundle.Gtilde[t] * ia[t] ** (1 / a) for t in range(1, n + 1)]
    jd = [None] + [bundle.Gtilde[t] * idd[t] ** (1 / a) for t in range(1, n + 1)]
    jumps = path_expectation(gtree, "Q", ja, jd, "sum")
    return lhs, kappa(a) / bundle.G0 * (kt + jumps)


def martingale_estimate_sides(H: GProcess, gtree: GTree, p: float) -> tuple[float, float]:
    bundle = gtree.bundle
    n = gtree.steps
    a = 2.0 / p
    na, nd = build_ng(gtree, bundle).increments()
    wa = [np.zeros(1)] + [expand(bundle.Etilde[t - 1]) ** (2 / p) * H.alive[t] * na[t] ** 2 for t in range(1, n + 1)]
    wd = [None] + [expand(bundle.Etilde[t - 1]) ** (2 / p) * H.dead[t] * nd[t] ** 2 for t in range(1, n + 1)]
    lhs = path_expectation(gtree, "P", wa, wd, "sum", lambda v: v ** (p / 2))
    ba = [np.zeros(1)] + [H.alive[t] * na[t] ** 2 for t in range(1, n + 1)]
    bd = [None] + [H.dead[t] * nd[t] ** 2 for t in range(1, n + 1)]
    br = path_expectation(gtree, "Q", ba, bd, "sum", lambda v: v ** (p / 2))
    va = [np.zeros(1)] + [H.alive[t] ** (p / 2) * bundle.Gtilde[t] * np.abs(na[t]) for t in range(1, n + 1)]
    vd = [None] + [H.dead[t] ** (p / 2) * bundle.Gtilde[t] * np.abs(nd[t]) for t in range(1, n + 1)]
    var = path_expectation(gtree, "Q", va, vd, "sum")
    return lhs, kappa(a) / bundle.G0 * (br + var)


def random_nondecreasing(gtree: GTree, rng: np.random.Generator, jump_prob: float = 0.5) -> GProcess:
    """G-optional nondecreasing process from zero with sparse exponential jumps."""
    n = gtree.steps
    ia, idd = [None], [None]
    for t in range(1, n + 1):
        ia.append(rng.exponential(size=2 ** t) * (rng.random(2 ** t) < jump_prob))
        idd.append(rng.exponential(size=2 ** t) * (rng.random(2 ** t) < jump_prob))
    return GProcess.from_increments(0.0, ia, idd)


def random_nonnegative(gtree: GTree, rng: np.random.Generator) -> GProcess:
    n = gtree.steps
    return GProcess([rng.exponential(size=2 ** t) for t in range(n + 1)],
                    [None] + [rng.exponential(size=2 ** t) for t in range(1, n + 1)])


def audit_estimate(tag: str, batch, gtree: GTree, constants: EstimateConstants | None = None,
                   a: float = 1.0, tol: float = 1e-12) -> EstimateReport:
    """Evaluate both sides of an estimate on every instance of ``batch``.

    For ``T4.1`` and ``T5.2`` instances are :class:`RBSDEData`; for ``T4.2`` pairs of
    them; for ``L5.1b`` nondecreasing :class:`GProcess` objects and for ``L5.1c``
    nonnegative ones.  The L5.1 audits carry their explicit constant and raise
    :class:`ExplicitConstantViolated` on the first failure.
    """
    constants = constants or EstimateConstants()
    p = constants.p
    rows = []
    for i, inst in enumerate(batch):
        if tag == "T4.1":
            lhs, rhs = a_priori_sides(solve_linear_G(inst, gtree), inst, gtree, p)
        elif tag == "T5.2":
            sol = solve_linear_G(inst, gtree)
            lhs, rhs = estimate4p_lhs(sol, gtree, p), _data_side(inst, gtree, p)
        elif tag == "T4.2":
            d1, d2 = inst
            lhs, rhs = difference_sides(solve_linear_G(d1, gtree), solve_linear_G(d2, gtree), d1, d2, gtree, p)
        elif tag == "L5.1b":
            lhs, rhs = increasing_estimate_sides(inst, gtree, a)
        elif tag == "L5.1c":
            lhs, rhs = martingale_estimate_sides(inst, gtree, p)
        else:
            raise EstimateError(f"unknown audit tag {tag!r}; choose from {AUDIT_TAGS}")
        ratio = _ratio(lhs, rhs)
        if tag.startswith("L5.1"):
            ok = lhs <= rhs * (1 + tol) + tol
            if not ok:
                raise ExplicitConstantViolated(tag, i, lhs, rhs)
        else:
            ok = bool(np.isfinite(ratio))
        rows.append((i, float(lhs), float(rhs), float(ratio), bool(ok)))
    return EstimateReport(tag, rows)
