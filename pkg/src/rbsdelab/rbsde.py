"""Reflected BSDEs on the enlarged tree and their F-counterparts.

Sign convention for the G-equation, per step on an alive node::

    Y_{t+1} - Y_t = -f_t dt - dK_{t+1} + dM_{t+1} + Z_t dW_{t+1}

so that ``M = (h - Y^F / Etilde) . N^G`` when the solution comes from the
F-equation.  The driver on ``(t, t+1]`` is evaluated at the step-t node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .horizon import AzemaBundle, GProcess, GTree, build_ng, exact_tol, g_martingale_deviation
from .lattice import PREDICTABLE, FiltrationTree, TreeProcess, cumulate, expand, pair_sum


class RBSDEError(ValueError):
    pass


class BarrierAboveTerminal(RBSDEError):
    pass


class LipschitzViolation(RBSDEError):
    pass


class InvariantViolation(RBSDEError):
    def __init__(self, what: str, step: int, node: int, size: float):
        super().__init__(f"{what}: {size:.3e} at step {step}, node {node}")
        self.what, self.step, self.node, self.size = what, step, node, size


class NoConvergence(RBSDEError):
    def __init__(self, max_iter: int, trace: list):
        super().__init__(f"Picard iteration did not converge in {max_iter} iterations "
                         f"(last deltas {trace[-3:]})")
        self.max_iter = max_iter
        self.trace = list(trace)


class LevelExceedsDepth(RBSDEError):
    pass


# ---------------------------------------------------------------------------
# data

class Driver:
    """Generator ``f(t, y, z)`` evaluated on all step-t nodes at once.

    ``fn(t, y, z)`` receives arrays of length ``2**t`` and returns one.
    """

    def __init__(self, fn: Callable, lipschitz: float = 0.0, linear_values=None, name: str = "custom"):
        self.fn = fn
        self.lipschitz = float(lipschitz)
        self.linear_values = linear_values
        self.name = name

    @classmethod
    def linear(cls, values) -> "Driver":
        """Driver that ignores ``(y, z)``; ``values[t]`` is the rate on ``(t, t+1]``."""
        vals = tuple(np.asarray(v, dtype=float) for v in (values.values if isinstance(values, TreeProcess) else values))
        return cls(lambda t, y, z: vals[t], 0.0, vals, "linear")

    @classmethod
    def zero(cls, steps: int) -> "Driver":
        return cls.linear([np.zeros(2 ** t) for t in range(steps)])

    @property
    def is_linear(self) -> bool:
        return self.linear_values is not None

    def __call__(self, t: int, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fn(t, y, z), dtype=float), y.shape)

    def scaled(self, lam: float) -> "Driver":
        """``lam * f(t, y / lam, z / lam)``: the driver of the solution scaled by ``lam``."""
        if self.is_linear:
            return Driver.linear([lam * v for v in self.linear_values])
        return Driver(lambda t, y, z: lam * self.fn(t, y / lam, z / lam), self.lipschitz, None, self.name)

    def probe_lipschitz(self, steps: int, rng: np.random.Generator, n_probe: int = 64,
                        scale: float = 3.0, slack: float = 1e-9) -> float:
        """Largest empirical Lipschitz ratio on random probes; raises above the declared constant."""
        worst = 0.0
        for t in range(steps):
            size = 2 ** t
            for _ in range(max(1, n_probe // steps)):
                y1, y2, z1, z2 = (rng.normal(scale=scale, size=size) for _ in range(4))
                num = np.abs(self(t, y1, z1) - self(t, y2, z2))
                den = np.abs(y1 - y2) + np.abs(z1 - z2)
                worst = max(worst, float(np.max(num / den)))
        if worst > self.lipschitz * (1 + slack) + slack:
            raise LipschitzViolation(f"empirical Lipschitz ratio {worst:.6g} exceeds declared {self.lipschitz}")
        return worst


@dataclass
class RBSDEData:
    driver: Driver
    barrier_S: TreeProcess
    terminal_h: TreeProcess
    horizon_step: int | None = None

    def __post_init__(self):
        n = self.terminal_h.steps
        if self.horizon_step is None:
            self.horizon_step = n
        if self.horizon_step != n or self.barrier_S.steps != n:
            raise RBSDEError("barrier, terminal process and horizon must share the tree depth")
        for t in range(n + 1):
            if not np.all(np.isfinite(self.terminal_h[t])):
                raise RBSDEError("terminal process h must be finite")
            if np.any(np.isnan(self.barrier_S[t])) or np.any(self.barrier_S[t] == np.inf):
                raise RBSDEError("barrier takes values in [-inf, inf)")
            bad = self.terminal_h[t] < self.barrier_S[t]
            if np.any(bad):
                raise BarrierAboveTerminal(f"h < S at step {t}, node {int(np.argmax(bad))}")

    @property
    def steps(self) -> int:
        return self.horizon_step

    def linear_f(self) -> tuple:
        if not self.driver.is_linear:
            raise RBSDEError("linear solver needs a driver independent of (y, z)")
        return self.driver.linear_values

    def scaled(self, lam: float) -> "RBSDEData":
        return RBSDEData(self.driver.scaled(lam), self.barrier_S * lam, self.terminal_h * lam)


@dataclass
class FData:
    fF: tuple  # rate on (t, t+1] at step-t nodes
    SF: TreeProcess
    xiF: np.ndarray
    h: TreeProcess
    VF: TreeProcess


def make_f_data(data: RBSDEData, bundle: AzemaBundle, f_values=None) -> FData:
    """Discounted F-data ``(Etilde f, Etilde S, Etilde_T h_T, V^F)`` for a linear driver."""
    E = bundle.Etilde
    f = data.linear_f() if f_values is None else f_values
    n = data.steps
    with np.errstate(invalid="ignore"):
        SF = TreeProcess([np.where(np.isneginf(S), -np.inf, e * S) for e, S in zip(E.values, data.barrier_S.values)])
    return FData(tuple(E[t] * f[t] for t in range(n)), SF, E[n] * data.terminal_h[n], data.terminal_h, bundle.VF)


def driver_F(driver: Driver, bundle: AzemaBundle) -> Driver:
    """``f^F(t, y, z) = Etilde_t f(t, y / Etilde_t, z / Etilde_t)``; same Lipschitz constant."""
    E = bundle.Etilde
    if driver.is_linear:
        return Driver.linear([E[t] * v for t, v in enumerate(driver.linear_values)])
    return Driver(lambda t, y, z: E[t] * driver(t, y / E[t], z / E[t]), driver.lipschitz, None,
                  driver.name + "^F")


# ---------------------------------------------------------------------------
# solutions

@dataclass
class GSolution:
    Y: GProcess
    Z: TreeProcess  # predictable
    K: GProcess
    M: GProcess
    dK: tuple  # dK[t] = K_{t+1} - K_t decided at step-t alive nodes
    f_values: tuple = field(repr=False, default=())
    iterations: int = 1

    @property
    def root(self) -> float:
        return float(self.Y.alive[0][0])

    def rows(self):
        n = self.Y.steps
        for t in range(n + 1):
            z = self.Z[t] if t < n else np.full(2 ** t, np.nan)
            for i in range(2 ** t):
                yield t, i, 1, self.Y.alive[t][i], z[i], self.K.alive[t][i], self.M.alive[t][i]
            if t:
                for i in range(2 ** t):
                    yield t, i, 0, self.Y.dead[t][i], np.nan, self.K.dead[t][i], self.M.dead[t][i]


@dataclass
class FSolution:
    Y: TreeProcess
    Z: TreeProcess  # predictable
    K: TreeProcess
    dK: tuple
    fF_values: tuple = field(repr=False, default=())
    iterations: int = 1

    @property
    def root(self) -> float:
        return float(self.Y[0][0])

    def rows(self):
        n = self.Y.steps
        for t in range(n + 1):
            z = self.Z[t] if t < n else np.full(2 ** t, np.nan)
            for i in range(2 ** t):
                yield t, i, 1, self.Y[t][i], z[i], self.K[t][i], 0.0


def _solve_g(f_vals, S: TreeProcess, h: TreeProcess, gtree: GTree, tie_break: str = "stop") -> GSolution:
    tree = gtree.tree
    n, dt = tree.steps, tree.dt
    Ya = [None] * (n + 1)
    Yd = [np.empty(0)] + [np.asarray(h[s], dtype=float).copy() for s in range(1, n + 1)]
    Ya[n] = np.asarray(h[n], dtype=float).copy()
    dK = [None] * n
    Z = [None] * n
    dMa, dMd = [None] * (n + 1), [None] * (n + 1)
    for t in range(n - 1, -1, -1):
        sq, dq = gtree.surv["Q"][t + 1], gtree.die["Q"][t + 1]
        E = pair_sum(sq * Ya[t + 1] + dq * Yd[t + 1])
        cont = f_vals[t] * dt + E
        take_barrier = S[t] >= cont if tie_break == "stop" else S[t] > cont
        Ya[t] = np.where(take_barrier, S[t], cont)
        dK[t] = np.where(take_barrier, S[t] - cont, 0.0)
        dw = tree.dw(t + 1)
        ma = Ya[t + 1] - expand(E)
        md = Yd[t + 1] - expand(E)
        Z[t] = pair_sum((sq * ma + dq * md) * dw) / pair_sum((sq + dq) * dw ** 2)
        dMa[t + 1] = ma - expand(Z[t]) * dw
        dMd[t + 1] = md - expand(Z[t]) * dw
    dK_inc = [None] + [expand(dK[t]) for t in range(n)]
    K = GProcess.from_increments(0.0, dK_inc, dK_inc)
    M = GProcess.from_increments(0.0, dMa, dMd)
    return GSolution(GProcess(Ya, Yd), TreeProcess(Z, PREDICTABLE), K, M, tuple(dK), tuple(f_vals))


def solve_linear_G(data: RBSDEData, gtree: GTree, bundle: AzemaBundle | None = None,
                   tie_break: str = "stop") -> GSolution:
    """Linear G-RBSDE through its (G, Qtilde)-Snell representation."""
    return _solve_g(data.linear_f(), data.barrier_S, data.terminal_h, gtree, tie_break)


def _solve_f(fF, SF: TreeProcess, xiF: np.ndarray, h: TreeProcess, VF: TreeProcess,
             tree: FiltrationTree, tie_break: str = "stop") -> FSolution:
    n, dt = tree.steps, tree.dt
    dV = VF.increments()
    Y = [None] * (n + 1)
    Y[n] = np.asarray(xiF, dtype=float).copy()
    dK, Z = [None] * n, [None] * n
    for t in range(n - 1, -1, -1):
        target = Y[t + 1] + h[t + 1] * dV[t + 1]
        E = tree.step_mean(t, target)
        cont = fF[t] * dt + E
        take_barrier = SF[t] >= cont if tie_break == "stop" else SF[t] > cont
        Y[t] = np.where(take_barrier, SF[t], cont)
        dK[t] = np.where(take_barrier, SF[t] - cont, 0.0)
        dw = tree.dw(t + 1)
        Z[t] = tree.step_mean(t, (target - expand(E)) * dw) / tree.step_mean(t, dw ** 2)
    K = cumulate([None] + [expand(dK[t]) for t in range(n)])
    return FSolution(TreeProcess(Y), TreeProcess(Z, PREDICTABLE), K, tuple(dK), tuple(fF))


def solve_linear_F(dataF: FData, tree: FiltrationTree, tie_break: str = "stop") -> FSolution:
    """Linear F-RBSDE through its F-Snell representation."""
    return _solve_f(dataF.fF, dataF.SF, dataF.xiF, dataF.h, dataF.VF, tree, tie_break)


def transform_F2G(solF: FSolution, data: RBSDEData, bundle: AzemaBundle, gtree: GTree,
                  check: bool = True, tol: float = 1e-10) -> GSolution:
    """Map an F-solution to the G-solution before and after the default."""
    n = gtree.steps
    E = bundle.Etilde
    h = data.terminal_h
    gamma = [solF.Y[t] / E[t] for t in range(n + 1)]
    Y = GProcess(gamma, [np.empty(0)] + [h[s] for s in range(1, n + 1)])
    Z = TreeProcess([solF.Z[t] / E[t] for t in range(n)], PREDICTABLE)
    dK = tuple(solF.dK[t] / E[t] for t in range(n))
    dK_inc = [None] + [expand(dK[t]) for t in range(n)]
    K = GProcess.from_increments(0.0, dK_inc, dK_inc)
    NG = build_ng(gtree, bundle)
    na, nd = NG.increments()
    integrand = [None] + [h[t] - gamma[t] for t in range(1, n + 1)]
    M = GProcess.from_increments(0.0, [None] + [integrand[t] * na[t] for t in range(1, n + 1)],
                                 [None] + [integrand[t] * nd[t] for t in range(1, n + 1)])
    f_vals = tuple(solF.fF_values[t] / E[t] for t in range(n)) if solF.fF_values else ()
    sol = GSolution(Y, Z, K, M, dK, f_vals, solF.iterations)
    if check:
        check_g_solution(sol, data, gtree, tol=tol)
    return sol


def g_dynamics_residual(sol: GSolution, gtree: GTree, f_vals=None) -> tuple[float, int, int]:
    """Largest violation of the per-step G-dynamics with its location."""
    tree = gtree.tree
    n, dt = tree.steps, tree.dt
    f_vals = sol.f_values if f_vals is None else f_vals
    worst, where = 0.0, (0, 0)
    ma, md = sol.M.increments()
    for t in range(n):
        base = expand(sol.Y.alive[t] - f_vals[t] * dt - sol.dK[t])
        zdw = expand(sol.Z[t]) * tree.dw(t + 1)
        for nxt, dm in ((sol.Y.alive[t + 1], ma[t + 1]), (sol.Y.dead[t + 1], md[t + 1])):
            r = np.abs(nxt - (base + dm + zdw))
            if r.max() > worst:
                worst, where = float(r.max()), (t + 1, int(np.argmax(r)))
    return worst, where[0], where[1]


def f_dynamics_residual(sol: FSolution, dataF: FData, tree: FiltrationTree, fF=None) -> float:
    n, dt = tree.steps, tree.dt
    fF = sol.fF_values if fF is None else fF
    dV = dataF.VF.increments()
    worst = 0.0
    for t in range(n):
        pred = expand(sol.Y[t] - fF[t] * dt - sol.dK[t]) - dataF.h[t + 1] * dV[t + 1] \
            + expand(sol.Z[t]) * tree.dw(t + 1)
        worst = max(worst, float(np.max(np.abs(sol.Y[t + 1] - pred))))
    return worst


def check_g_solution(sol: GSolution, data: RBSDEData, gtree: GTree, tol: float = 1e-10) -> dict:
    """Verify dynamics, terminal values, barrier, Skorokhod and the Q-martingale property."""
    n = gtree.steps
    h, S = data.terminal_h, data.barrier_S
    res, t, i = g_dynamics_residual(sol, gtree)
    if res > tol:
        raise InvariantViolation("dynamics residual", t, i, res)
    term = float(np.max(np.abs(sol.Y.alive[n] - h[n])))
    for s in range(1, n + 1):
        term = max(term, float(np.max(np.abs(sol.Y.dead[s] - h[s]))))
    if term > tol:
        raise InvariantViolation("terminal value", n, 0, term)
    sk = skorokhod_check(sol, S)
    if not sk.passed:
        raise InvariantViolation("Skorokhod condition", sk.worst_step, sk.worst_node,
                                 max(sk.flat_off_sum, -sk.min_gap, -sk.min_dK))
    mdev = g_martingale_deviation(gtree, sol.M, "Q")
    if mdev > tol:
        raise InvariantViolation("M drift under Qtilde", 0, 0, mdev)
    return {"dynamics": res, "terminal": term, "skorokhod": sk.flat_off_sum, "m_drift": mdev}


# ---------------------------------------------------------------------------
# Skorokhod

@dataclass
class SkorokhodReport:
    flat_off_sum: float
    min_gap: float
    min_dK: float
    passed: bool
    worst_step: int = 0
    worst_node: int = 0


def skorokhod_check(sol: GSolution | FSolution, barrier: TreeProcess) -> SkorokhodReport:
    """Pathwise ``sum (Y_- - S_-) dK`` (max over paths), barrier gap and K monotonicity."""
    Yalive = sol.Y.alive if isinstance(sol, GSolution) else sol.Y.values
    acc = np.zeros(1)
    min_gap, min_dk = np.inf, np.inf
    worst_term, where = 0.0, (0, 0)
    for t, dk in enumerate(sol.dK):
        gap = Yalive[t] - barrier[t]
        with np.errstate(invalid="ignore"):
            term = np.where(dk == 0, 0.0, gap * dk)
        acc = expand(acc + term)
        if term.max() > worst_term:
            worst_term, where = float(term.max()), (t, int(np.argmax(term)))
        min_gap = min(min_gap, float(gap.min()))
        min_dk = min(min_dk, float(dk.min()))
    total = float(acc.max())
    passed = total <= 1e-10 and min_gap >= -1e-10 and min_dk >= -1e-12
    return SkorokhodReport(total, min_gap, min_dk, passed, *where)


# ---------------------------------------------------------------------------
# general drivers

@dataclass
class PicardResult:
    solution: GSolution | FSolution
    trace: list
    iterations: int
    residual: float

    def ratios(self) -> list:
        tr = self.trace
        return [tr[i + 1] / tr[i] if tr[i] > 0 else 0.0 for i in range(len(tr) - 1)]


def solve_general(data: RBSDEData, where: str, tree_or_gtree, bundle: AzemaBundle,
                  tol: float = 1e-10, max_iter: int = 200) -> PicardResult:
    """Picard iteration: each step solves the linear problem with the driver frozen at the last iterate.

    Iterates start from zero.  ``trace[k]`` is the sup-distance in ``(Y, Z)``
    between iterates ``k + 1`` and ``k``; iteration stops once it drops below ``tol``.
    The reported count is the first iterate whose update fell below ``tol``, so a
    driver that ignores ``(y, z)`` converges in one iteration.
    """
    if where not in ("F", "G"):
        raise ValueError("where must be 'F' or 'G'")
    n = data.steps
    dt = bundle.tree.dt
    zeros = [np.zeros(2 ** t) for t in range(n)]
    trace = []
    if where == "G":
        gtree = tree_or_gtree
        y_prev, z_prev = GProcess.zeros(n), zeros
        for it in range(1, max_iter + 1):
            f_vals = tuple(data.driver(t, y_prev.alive[t], z_prev[t]) for t in range(n))
            sol = _solve_g(f_vals, data.barrier_S, data.terminal_h, gtree)
            delta = sol.Y.max_abs_diff(y_prev) + max(float(np.max(np.abs(a - b))) for a, b in zip(sol.Z.values, z_prev))
            trace.append(delta)
            y_prev, z_prev = sol.Y, sol.Z.values
            if delta < tol:
                break
        else:
            raise NoConvergence(max_iter, trace)
        sol.iterations = max(it - 1, 1)
        final_f = tuple(data.driver(t, sol.Y.alive[t], sol.Z[t]) for t in range(n))
        residual = g_dynamics_residual(sol, gtree, final_f)[0]
        return PicardResult(sol, trace, sol.iterations, residual)

    tree = tree_or_gtree
    fdrv = driver_F(data.driver, bundle)
    base = make_f_data(data, bundle, f_values=zeros)
    y_prev, z_prev = [np.zeros(2 ** t) for t in range(n + 1)], zeros
    for it in range(1, max_iter + 1):
        fF = tuple(fdrv(t, y_prev[t], z_prev[t]) for t in range(n))
        sol = _solve_f(fF, base.SF, base.xiF, base.h, base.VF, tree)
        delta = max(float(np.max(np.abs(a - b))) for a, b in zip(sol.Y.values, y_prev)) + \
            max(float(np.max(np.abs(a - b))) for a, b in zip(sol.Z.values, z_prev))
        trace.append(delta)
        y_prev, z_prev = sol.Y.values, sol.Z.values
        if delta < tol:
            break
    else:
        raise NoConvergence(max_iter, trace)
    sol.iterations = max(it - 1, 1)
    final_f = tuple(fdrv(t, sol.Y[t], sol.Z[t]) for t in range(n))
    residual = f_dynamics_residual(sol, base, tree, final_f)
    return PicardResult(sol, trace, sol.iterations, residual)


# ---------------------------------------------------------------------------
# unbounded horizon through truncation

@dataclass
class TruncationReport:
    levels: list
    distances: list  # one per consecutive pair of levels
    y_distances: list
    z_distances: list
    decreasing: bool
    roots: list


def truncate_data(data: RBSDEData, level: int) -> RBSDEData:
    """Data ``(f 1_{[0,n]}, h 1_{[0,n]}, S_{n ∧ .})`` for truncation level ``n``."""
    n = data.steps
    if not 0 <= level <= n:
        raise LevelExceedsDepth(f"level {level} exceeds tree depth {n}")
    f = data.linear_f()
    f_n = [f[t] if t < level else np.zeros_like(f[t]) for t in range(n)]
    h_n = [data.terminal_h[t] if t <= level else np.zeros(2 ** t) for t in range(n + 1)]
    S_vals = []
    for t in range(n + 1):
        if t <= level:
            S_vals.append(data.barrier_S[t])
        else:
            S_vals.append(expand(S_vals[-1]))
    return RBSDEData(Driver.linear(f_n), TreeProcess(S_vals), TreeProcess(h_n))


def horizon_truncation_study(data: RBSDEData, fx_gtree: GTree, levels, p: float = 2.0) -> TruncationReport:
    """Solve at each truncation level and measure Etilde-weighted distances between levels.

    The distance between consecutive levels is ``||Etilde^{1/p} dY||_D + ||Etilde_-^{1/p} dZ||_S``
    under P on the enlarged tree, with ``dY``, ``dZ`` the differences of the G-solutions.
    """
    from .estimates import NormSpec, norm

    gtree = fx_gtree
    bundle = gtree.bundle
    tree = bundle.tree
    n = tree.steps
    levels = sorted(int(x) for x in levels)
    if not levels or levels[-1] > n or levels[0] < 0:
        raise LevelExceedsDepth(f"levels must lie within 0..{n}")
    E = bundle.Etilde
    sols = []
    for lv in levels:
        d = truncate_data(data, lv)
        sF = solve_linear_F(make_f_data(d, bundle), tree)
        Y = GProcess([sF.Y[t] / E[t] for t in range(n + 1)], [None] + [d.terminal_h[s] for s in range(1, n + 1)])
        Z = TreeProcess([sF.Z[t] / E[t] for t in range(n)], PREDICTABLE)
        sols.append((Y, Z))
        del sF
    yspec = NormSpec(p, "P", "Etilde")
    zspec = NormSpec(p, "P", "Etilde_minus")
    ydist, zdist = [], []
    for (y1, z1), (y2, z2) in zip(sols, sols[1:]):
        ydist.append(norm(y2 - y1, "D", yspec, gtree))
        zdist.append(norm(TreeProcess([b - a for a, b in zip(z1.values, z2.values)], PREDICTABLE), "S", zspec, gtree))
    dist = [a + b for a, b in zip(ydist, zdist)]
    decreasing = all(b < a for a, b in zip(dist, dist[1:]))
    return TruncationReport(levels, dist, ydist, zdist, decreasing, [float(y.alive[0][0]) for y, _ in sols])
