import json
import math

import numpy as np
import pytest

from conftest import cached_fixture, explicit
from rbsdelab.estimates import (AUDIT_TAGS, EstimateConstants, EstimateError, ExplicitConstantViolated,
                                NormSpec, a_priori_sides, admissibility, audit_estimate,
                                dual_projection_domination, f_alpha, identity_qtilde_to_p,
                                increasing_estimate_sides, kappa, martingale_estimate_sides, norm,
                                random_nondecreasing, random_nonnegative, vtilde_a, vtilde_monotonicity)
from rbsdelab.fixtures import geometric, random_linear_data
from rbsdelab.horizon import GProcess, RandomTimeModel, build_azema, build_gtree
from rbsdelab.lattice import FiltrationTree, TreeProcess, cumulate
from rbsdelab.rbsde import Driver, RBSDEData, solve_linear_G


def test_kappa_values():
    assert kappa(1.0) == 18.0
    assert kappa(0.5) == pytest.approx(81.0, rel=1e-15)
    assert kappa(2.0) == pytest.approx(math.sqrt(3) * (5 + math.sqrt(2)), rel=1e-15)
    assert kappa(2.0) == pytest.approx(11.109743780627564, rel=1e-15)
    with pytest.raises(EstimateError):
        kappa(0.0)


def test_constants():
    c0 = EstimateConstants(2.0, 0.0)
    assert c0.C_DB == 4.0 and c0.alpha0 == 1.0 and c0.alpha1 == pytest.approx(8 / 9)
    prev = c0
    for c in (0.1, 0.5, 1.0, 2.0):
        cur = EstimateConstants(2.0, c)
        assert cur.alpha0 > prev.alpha0 and cur.alpha1 > prev.alpha1
        prev = cur
    assert EstimateConstants(3.0).C_DB == pytest.approx(1.5 ** 3)
    with pytest.raises(EstimateError):
        EstimateConstants(1.0)
    with pytest.raises(EstimateError):
        EstimateConstants(2.0, -1.0)


def test_norm_of_constant():
    fx = cached_fixture("adapted", 4)
    for m in ("P", "Q"):
        assert norm(fx.tree.constant(-3.0), "D", NormSpec(2.0, m), fx.gtree) == pytest.approx(3.0, rel=1e-14)


def test_bracket_norm_of_brownian():
    fx = cached_fixture("survives", 2)
    got = norm(fx.tree.brownian(), "M", NormSpec(2.0), fx.gtree)
    assert got ** 2 == pytest.approx(2 * fx.tree.dt, rel=1e-14)


def test_s_norm_stops_at_death():
    fx = geometric(2, 0.5)
    ones = TreeProcess([np.ones(1), np.ones(2)], "predictable")
    assert norm(ones, "S", NormSpec(2.0), fx.gtree) ** 2 == pytest.approx(1.5, rel=1e-14)


def test_a_norm_of_clock():
    fx = cached_fixture("survives", 4)
    clock = fx.tree.time()
    assert norm(clock, "A", NormSpec(3.0), fx.gtree) == pytest.approx(1.0, rel=1e-14)


def test_weighted_norms():
    fx = geometric(2, 0.5)
    one = fx.tree.constant(1.0)
    # sup of Etilde^{1/2} is attained at time zero
    assert norm(one, "D", NormSpec(2.0, "P", "Etilde"), fx.gtree) == pytest.approx(1.0)
    w = NormSpec(2.0, "P", "exp", alpha=2.0)
    assert norm(one, "D", w, fx.gtree) ** 2 == pytest.approx(0.5 * math.e ** 2 + 0.5 * math.e ** 4, rel=1e-14)
    with pytest.raises(EstimateError):
        NormSpec(2.0, "P", "bogus")
    with pytest.raises(EstimateError):
        norm(one, "X", NormSpec(), fx.gtree)


def test_vtilde():
    fx = cached_fixture("lookahead", 5)
    b = fx.bundle
    ref = cumulate([None] + [b.dD[t] / b.Gtilde[t] for t in range(1, 6)])
    assert vtilde_a(b, 1.0).max_abs_diff(ref) < 1e-15
    assert all(np.all(v == 0) for v in vtilde_a(cached_fixture("survives", 4).bundle, 2.0).values)
    for a in (0.5, 1.0, 2.0, 3.0):
        lo_v, lo_gap = vtilde_monotonicity(b, a)
        assert lo_v >= 0 and lo_gap >= -1e-15
    with pytest.raises(EstimateError):
        vtilde_a(b, -1.0)


def test_dual_projection_domination(fx6):
    rep = dual_projection_domination(fx6.gtree)
    assert rep.qtilde_excess_Gminus <= 1e-12
    assert rep.qtilde_excess_Gtilde <= 1e-12
    assert rep.bounded_by_one


def test_left_limit_bound_fails_on_a_jumpy_law():
    # after an up move, tau = 1 is unlikely if the next move is down and likely if it is up, so
    # G_1 = 0.5 there while the alive node (up, down) carries the jump dD_2 = 0.85
    tree = FiltrationTree.symmetric(2, 0.5)
    law = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.1, 0.85, 0.05], [0.9, 0.05, 0.05]])
    from rbsdelab.horizon import RandomTimeModel, build_azema, build_gtree
    model = RandomTimeModel(tree, law)
    b = build_azema(model)
    rep = dual_projection_domination(build_gtree(model, b))
    assert b.G[1].tolist() == pytest.approx([1.0, 0.5], abs=1e-15)
    assert b.dD[2][2] == pytest.approx(0.85, abs=1e-15)
    assert rep.qtilde_excess_Gminus == pytest.approx(0.35, abs=1e-12)
    assert rep.qtilde_excess_Gtilde <= 1e-12 and rep.bounded_by_one


def test_identity_examples(fx6, rng):
    clock = fx6.tree.time()
    rep = identity_qtilde_to_p(clock, fx6.gtree)
    assert rep.gap < 1e-12
    x = TreeProcess([np.zeros(1)] + [rng.exponential(size=2 ** t) for t in range(1, fx6.tree.steps + 1)])
    assert identity_qtilde_to_p(x, fx6.gtree).gap < 1e-12


def test_identity_telescoping_examples():
    tree = FiltrationTree.symmetric(1, 1.0)
    model = RandomTimeModel(tree, [[0.3, 0.7], [0.6, 0.4]])
    b = build_azema(model)
    g = build_gtree(model, b)
    step = TreeProcess([np.zeros(1), np.ones(2)])
    rep = identity_qtilde_to_p(step, g)
    assert rep.lhs_stopped == pytest.approx(1.0, abs=1e-15) and rep.rhs_stopped == pytest.approx(1.0, abs=1e-15)
    zero = identity_qtilde_to_p(tree.constant(0.0), g)
    assert zero.lhs_stopped == zero.rhs_stopped == 0.0


def test_s_norm_of_zero():
    fx = cached_fixture("terminal", 4)
    zero = TreeProcess([np.zeros(2 ** t) for t in range(4)], "predictable")
    assert norm(zero, "S", NormSpec(2.0, "Q", "Etilde"), fx.gtree) == 0.0


def test_vtilde_geometric_quadratic_case():
    # hazard ratio dD / Gtilde is 1/2 at every step, so each increment is 1 - (1/2)^2
    b = geometric(4, 0.5).bundle
    v = vtilde_a(b, 2.0)
    assert all(np.allclose(v[t], 0.75 * t, atol=1e-15) for t in range(5))


def test_identity_input_checks():
    fx = cached_fixture("adapted", 3)
    with pytest.raises(EstimateError):
        identity_qtilde_to_p(fx.tree.constant(1.0), fx.gtree)
    with pytest.raises(EstimateError):
        identity_qtilde_to_p(fx.tree.brownian(), fx.gtree)


def test_f_alpha_and_admissibility():
    fx = cached_fixture("immersion", 4)
    tree = fx.tree
    neg = TreeProcess([np.full(2 ** t, -np.inf) for t in range(5)])
    one = RBSDEData(Driver.linear([np.ones(2 ** t) for t in range(4)]), neg, tree.constant(0.0))
    F = f_alpha(one, tree.dt, 0.0)
    assert all(np.allclose(F[t], math.sqrt(t * tree.dt)) for t in range(5))
    zero = RBSDEData(Driver.zero(4), neg, tree.constant(0.0))
    assert admissibility(zero, fx.bundle, 2.0) == 0.0
    assert admissibility(one, fx.bundle, 2.0) > 0.0


def test_estimate_sides_vanish_on_zero_data():
    fx = cached_fixture("terminal", 4)
    neg = TreeProcess([np.full(2 ** t, -np.inf) for t in range(5)])
    data = RBSDEData(Driver.zero(4), neg, fx.tree.constant(0.0))
    assert a_priori_sides(solve_linear_G(data, fx.gtree), data, fx.gtree, 2.0) == (0.0, 0.0)
    rep = audit_estimate("T4.1", [data], fx.gtree)
    assert rep.max_ratio == 0.0 and rep.violations == []


def test_increasing_estimate_on_deterministic_staircase():
    fx = geometric(4, 0.5)
    K = GProcess.lift(cumulate([None] + [np.ones(2 ** t) for t in range(1, 5)]))
    lhs, rhs = increasing_estimate_sides(K, fx.gtree, 1.0)
    assert 0 < lhs <= rhs
    # at a = 1 the bound is 18 / G_0 times the unweighted sides
    kt = fx.gtree.expect_terminal(K.alive[4], [None] + [K.dead[s] for s in range(1, 5)], "Q")
    jumps = sum(fx.bundle.Gtilde[t][0] * 2.0 ** -(t - 1) for t in range(1, 5))
    assert rhs == pytest.approx(18.0 * (kt + jumps), rel=1e-14)
    other = cached_fixture("adapted", 5)
    for a in (0.5, 1.0, 2.0):
        lhs, rhs = increasing_estimate_sides(GProcess.lift(other.tree.time()), other.gtree, a)
        assert 0 < lhs <= rhs


def test_explicit_estimates_random(fx6, rng):
    for _ in range(10):
        lhs, rhs = increasing_estimate_sides(random_nondecreasing(fx6.gtree, rng), fx6.gtree, 1.0)
        assert lhs <= rhs
        lhs, rhs = martingale_estimate_sides(random_nonnegative(fx6.gtree, rng), fx6.gtree, 2.0)
        assert lhs <= rhs


def test_audit_reports(rng):
    fx = cached_fixture("lookahead", 4)
    batch = [random_linear_data(fx.tree, rng) for _ in range(4)]
    for tag in ("T4.1", "T5.2"):
        rep = audit_estimate(tag, batch, fx.gtree)
        assert len(rep.rows) == 4 and rep.violations == []
        assert rep.to_csv().splitlines()[0] == "instance,theorem,lhs,rhs,ratio,pass"
        assert json.loads(rep.to_json())["theorem"] == tag
    pairs = list(zip(batch[:2], batch[2:]))
    assert audit_estimate("T4.2", pairs, fx.gtree).violations == []
    ks = [random_nondecreasing(fx.gtree, rng) for _ in range(4)]
    assert audit_estimate("L5.1b", ks, fx.gtree, a=2.0).violations == []
    with pytest.raises(EstimateError):
        audit_estimate("T9.9", batch, fx.gtree)
    assert set(AUDIT_TAGS) == {"T4.1", "T4.2", "L5.1b", "L5.1c", "T5.2"}


def test_audit_raises_on_violated_constant(monkeypatch, rng):
    import rbsdelab.estimates as est
    fx = cached_fixture("adapted", 3)
    monkeypatch.setattr(est, "increasing_estimate_sides", lambda K, g, a: (2.0, 1.0))
    with pytest.raises(ExplicitConstantViolated) as err:
        audit_estimate("L5.1b", [random_nondecreasing(fx.gtree, rng)], fx.gtree)
    assert err.value.instance == 0
