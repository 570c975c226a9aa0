import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mglab import grid as G
from mglab import operators as op
from mglab import scenarios as S
from mglab import viscosity as V
from mglab.errors import PreconditionError

LAM = 1.0


def _bm():
    return op.GeneratorSpec(1, op.const_sigma([[1.0]]), op.const_drift([0.0]))


@pytest.fixture(scope="module")
def rbm():
    g = G.build_grid(S.interval_boundary(), 0.01)
    h = op.cosine([math.pi])
    u = G.solve_resolvent(G.assemble(_bm(), g, LAM), h)
    return g, h, u


@pytest.fixture(scope="module")
def ou_solve():
    sc = S.ou_1d()
    g = G.build_grid(sc.domain, 0.05)
    h = sc.field_for("manufactured", LAM)
    M = G.assemble(sc.spec, g, LAM, truncation="dirichlet",
                   trunc_data=sc.trunc_for("manufactured", LAM))
    return sc.spec, h, G.solve_resolvent(M, h)


def _spiked(u, node, size):
    v = u.values.copy()
    v[node] += size
    return G.GridFunction(u.grid, v)


# --- interior checks ------------------------------------------------------------


def test_certified_solve_passes(rbm):
    g, h, u = rbm
    assert V.subsolution_check(u, _bm(), LAM, h).passed
    assert V.supersolution_check(u, _bm(), LAM, h).passed


def test_certified_ou_solve_passes(ou_solve):
    spec, h, u = ou_solve
    assert V.subsolution_check(u, spec, LAM, h).passed
    assert V.supersolution_check(u, spec, LAM, h).passed


def test_spike_detected_at_node(rbm):
    g, h, u = rbm
    node = 37
    sub = V.subsolution_check(_spiked(u, node, 0.5), _bm(), LAM, h)
    assert sub.verdict == "fail" and sub.nodes() == [node]
    sup = V.supersolution_check(_spiked(u, node, -0.5), _bm(), LAM, h)
    assert sup.verdict == "fail" and sup.nodes() == [node]


def test_violations_exceed_slack(rbm):
    g, h, u = rbm
    rep = V.subsolution_check(_spiked(u, 60, 0.5), _bm(), LAM, h)
    assert all(v.lhs > rep.slack and v.margin > 0 for v in rep.violations)


def test_zero_function_with_signed_rhs(interval):
    g = G.build_grid(interval, 0.02)
    u = G.GridFunction(g, np.zeros(g.n_nodes))
    assert V.subsolution_check(u, _bm(), LAM, op.constant(0.3)).passed
    assert V.supersolution_check(u, _bm(), LAM, op.constant(-0.3)).passed


def test_empty_bank_rejected(rbm):
    g, h, u = rbm
    with pytest.raises(PreconditionError):
        V.subsolution_check(u, _bm(), LAM, h, bank=[])


def test_dimension_mismatch_rejected(rbm):
    g, h, u = rbm
    with pytest.raises(PreconditionError):
        V.subsolution_check(u, S.disk_tangential().spec, LAM, h)


@given(extra=st.floats(0.0, 1.0))
def test_verdict_monotone_in_slack(rbm, extra):
    g, h, u = rbm
    v = _spiked(u, 50, 0.05)
    bank = V.default_bank(v, nodes=range(40, 61))
    base = V.subsolution_check(v, _bm(), LAM, h, bank=bank, slack=0.05)
    if base.passed:
        assert V.subsolution_check(v, _bm(), LAM, h, bank=bank, slack=0.05 + extra).passed
    more = V.subsolution_check(v, _bm(), LAM, h, bank=bank, slack=0.05 + extra)
    assert len(more.violations) <= len(base.violations)


def test_default_slack_formula(rbm):
    g, h, u = rbm
    bank = [op.quadratic([0.0], [[3.0]]), op.quadratic([1.0], [[-1.0]])]
    assert V.default_slack(u, bank) == pytest.approx(10 * (0.01 + 0.01 * 3.0))


# --- boundary check -------------------------------------------------------------


def test_boundary_certified_rbm(rbm):
    g, h, u = rbm
    rep = V.boundary_viscosity_check(u, _bm(), S.interval_boundary(), LAM, h)
    assert rep.passed and rep.checked_count > 0


def test_boundary_counterexample(interval):
    # u - f peaks at x=0 where -B f = -f'(0) = 5 and the interior inequality fails by 1
    g = G.build_grid(interval, 0.02)
    u = G.GridFunction(g, -10.0 * g.coords[:, 0])
    f = op.quadratic([-5.0], [[0.0]])
    rep = V.boundary_viscosity_check(u, _bm(), interval, LAM, op.constant(-1.0), bank=[f],
                                     slack=0.1, which="sub")
    assert rep.verdict == "fail"
    assert rep.violations[0].node == 0 and rep.violations[0].lhs == pytest.approx(1.0)


def test_boundary_constant_solution(interval):
    g = G.build_grid(interval, 0.02)
    c = 0.7
    u = G.GridFunction(g, np.full(g.n_nodes, c))
    assert V.boundary_viscosity_check(u, _bm(), interval, LAM, op.constant(LAM * c)).passed


def test_boundary_needs_constrained_grid():
    g = G.build_grid(G.Box((0.0,), (1.0,)), 0.1)
    u = G.GridFunction(g, np.zeros(g.n_nodes))
    with pytest.raises(PreconditionError):
        V.boundary_viscosity_check(u, _bm(), None, LAM, op.constant(0.0))


def test_boundary_disk_certified(disk):
    g = G.build_grid(disk.bspec, disk.dx)
    h = disk.field_for(disk.h_default, LAM)
    u = G.solve_resolvent(G.assemble(disk.spec, g, LAM), h)
    nodes = np.flatnonzero(g.kind >= 1)[::7]
    bank = V.default_bank(u, nodes=nodes)
    assert V.boundary_viscosity_check(u, disk.spec, disk.bspec, LAM, h, bank=bank).passed


# --- sequential check -----------------------------------------------------------


def test_sequential_certified(rbm):
    g, h, u = rbm
    assert V.sequential_viscosity_check(u, _bm(), LAM, h, n_top=5).passed


def test_sequential_spike(rbm):
    g, h, u = rbm
    node = 37
    rep = V.sequential_viscosity_check(_spiked(u, node, 0.5), _bm(), LAM, h, n_top=5)
    assert node in rep.nodes()
    rep = V.sequential_viscosity_check(_spiked(u, node, -0.5), _bm(), LAM, h, n_top=5, sense=-1)
    assert node in rep.nodes()


def test_sequential_zero(interval):
    g = G.build_grid(interval, 0.02)
    u = G.GridFunction(g, np.zeros(g.n_nodes))
    assert V.sequential_viscosity_check(u, _bm(), LAM, op.constant(0.2)).passed


def test_sequential_n_top_clipped(interval):
    g = G.build_grid(interval, 0.25)
    u = G.GridFunction(g, np.zeros(g.n_nodes))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        rep = V.sequential_viscosity_check(u, _bm(), LAM, op.constant(0.0), n_top=50)
    assert rep.passed and any("clipped" in str(x.message) for x in w)


def test_plain_pass_implies_sequential_pass(rbm):
    g, h, u = rbm
    v = _spiked(u, 20, 0.08)
    bank = V.default_bank(v, seed=3)
    for s in (0.05, 0.2, 1.0):
        if V.subsolution_check(v, _bm(), LAM, h, bank=bank, slack=s).passed:
            assert V.sequential_viscosity_check(v, _bm(), LAM, h, bank=bank, slack=s).passed


# --- comparison -----------------------------------------------------------------


def test_comparison_shifted_pair(rbm):
    g, h, u = rbm
    rep = V.comparison_check(G.GridFunction(g, u.values - 0.1), G.GridFunction(g, u.values + 0.1))
    assert rep.verdict == "pass" and rep.gap == pytest.approx(-0.2)


def test_comparison_crossing_pair():
    g = G.build_grid(G.Box((-1.0,), (1.0,)), 0.1)
    x = g.coords[:, 0]
    rep = V.comparison_check(G.GridFunction(g, x), G.GridFunction(g, -x))
    assert rep.verdict == "fail" and rep.gap == pytest.approx(2.0)
    assert rep.x == pytest.approx([1.0])


def test_comparison_ordered_solves(interval):
    g = G.build_grid(interval, 0.02)
    M = G.assemble(_bm(), g, LAM)
    lo = G.solve_resolvent(M, op.cosine([math.pi]))
    hi = G.solve_resolvent(M, op.lincomb([(1.0, op.cosine([math.pi])), (1.0, op.constant(0.5))]))
    assert V.comparison_check(lo, hi, tol=0.0).passed


def test_comparison_grid_mismatch(interval):
    a = G.build_grid(interval, 0.02)
    b = G.build_grid(interval, 0.05)
    with pytest.raises(PreconditionError):
        V.comparison_check(G.GridFunction(a, np.zeros(a.n_nodes)),
                           G.GridFunction(b, np.zeros(b.n_nodes)))


@given(shift=st.floats(-0.5, 0.5))
def test_comparison_antisymmetric(rbm, shift):
    g, h, u = rbm
    v = G.GridFunction(g, u.values + shift)
    a, b = V.comparison_check(u, v), V.comparison_check(v, u)
    if a.passed and b.passed:
        assert np.max(np.abs(u.values - v.values)[g.active]) <= 2 * a.tol + 1e-12


# --- range residual -------------------------------------------------------------


def test_range_residual_member(ou):
    f = op.quadratic([0.3], [[1.0]])
    h = op.manufacture_rhs(ou, 2.0, f)
    rep = V.range_residual_check([op.constant(1.0), f], ou, 2.0, h, np.linspace(-2, 2, 41))
    assert rep.residual == pytest.approx(0.0, abs=1e-12)


def test_range_residual_constant(ou):
    rep = V.range_residual_check([op.constant(1.0)], ou, 3.0, op.constant(3.0),
                                 np.linspace(-2, 2, 11))
    assert rep.residual == pytest.approx(0.0, abs=1e-12)


def test_range_residual_cosine_positive(interval):
    g = G.build_grid(interval, 0.02)
    bank = [op.quadratic([p], [[q]]) for p in (-1.0, 0.0, 1.0) for q in (-2.0, 0.0, 2.0)]
    rep = V.range_residual_check(bank, _bm(), LAM, op.cosine([math.pi]), g)
    assert rep.residual > 0.1 and rep.bank_size == 9


# --- export ---------------------------------------------------------------------


def test_report_json_shape(rbm):
    g, h, u = rbm
    rep = V.subsolution_check(_spiked(u, 37, 0.5), _bm(), LAM, h)
    d = json.loads(rep.to_json())
    assert set(d) >= {"verdict", "violations", "slack", "bank_size"}
    assert set(d["violations"][0]) == {"node", "f", "lhs", "margin"}
