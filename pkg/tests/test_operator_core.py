import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mglab import jumps as J
from mglab import operators as op
from mglab import scenarios as S
from mglab.errors import (ConfigurationError, GeometryError, IntegrabilityError,
                          PreconditionError)

finite = st.floats(-3, 3, allow_nan=False)


# --- generator_apply --------------------------------------------------------


def test_constant_is_annihilated(bm1, ou):
    x = np.linspace(-2, 2, 9)
    for spec in (bm1, ou, S.jump_alpha_spec(), S.jump_poisson_spec()):
        assert np.allclose(op.generator_apply(spec, op.constant(3.0), x), 0.0, atol=1e-12)


def test_bm_square_at_origin(bm1):
    assert op.generator_apply(bm1, op.quadratic([0.0], [[2.0]]), 0.0) == pytest.approx(1.0)


def test_pure_jump_atom():
    spec = S.jump_poisson_spec(rate=2.0)
    assert op.generator_apply(spec, op.coordinate(0), 0.7) == pytest.approx(2.0)


def test_jump_part_of_cosine_matches_symbol():
    spec = S.jump_alpha_spec()
    x = np.array([0.0, 0.4, 1.3])
    got = op.generator_apply(spec, op.cosine([1.0]), x)
    assert np.allclose(got, S.stable_symbol(1.0) * np.cos(x), atol=1e-6)


@given(a=finite, b=finite, x=finite)
def test_generator_is_linear(ou, a, b, x):
    f, g = op.cosine([1.3]), op.quadratic([0.2], [[1.0]])
    lhs = op.generator_apply(ou, op.lincomb([(a, f), (b, g)]), x)
    rhs = a * op.generator_apply(ou, f, x) + b * op.generator_apply(ou, g, x)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_point_dimension_checked():
    spec = S.disk_tangential().spec
    with pytest.raises(PreconditionError):
        op.generator_apply(spec, op.constant(1.0, 2), np.zeros(3))


# --- boundary_apply ---------------------------------------------------------


def test_disk_tangent_point_direction():
    b = S.disk_boundary()
    assert op.boundary_apply(b, 1, op.coordinate(1, 2), [1.0, 0.0]) == pytest.approx(-1.0)
    assert op.boundary_apply(b, 1, op.constant(1.0, 2), [1.0, 0.0]) == 0.0


def test_interval_left_end(interval):
    assert op.boundary_apply(interval, 1, op.coordinate(0), 0.0) == pytest.approx(1.0)


def test_boundary_apply_rejects_interior_and_wrong_piece(interval):
    with pytest.raises(PreconditionError):
        op.boundary_apply(interval, 1, op.coordinate(0), 0.3)
    with pytest.raises(PreconditionError):
        op.boundary_apply(interval, 2, op.coordinate(0), 0.0)


@given(s=st.floats(0, 1), a=finite)
def test_boundary_apply_is_linear_on_circle(s, a):
    b = S.disk_boundary()
    x = S._circle_param(np.array([s]))
    f, g = op.bump([0.2, -0.1], 0.8), op.quadratic([1.0, -2.0], np.eye(2))
    lhs = op.boundary_apply(b, 1, op.lincomb([(a, f), (1.0, g)]), x)
    rhs = a * op.boundary_apply(b, 1, f, x) + op.boundary_apply(b, 1, g, x)
    assert np.allclose(lhs, rhs, atol=1e-9)


# --- manufacture_rhs --------------------------------------------------------


def test_manufactured_constant(ou):
    h = op.manufacture_rhs(ou, 2.5, op.constant(1.5))
    assert np.allclose(h(np.linspace(-1, 1, 5)), 2.5 * 1.5)


def test_manufactured_ou_square(ou):
    h = op.manufacture_rhs(ou, 1.0, op.quadratic([0.0], [[2.0]]))
    x = np.linspace(-2, 2, 11)
    assert np.allclose(h(x), 3 * x**2 - 1)


def test_manufactured_bm_cosine(bm1):
    h = op.manufacture_rhs(bm1, 1.0, op.cosine([1.0]))
    x = np.linspace(-3, 3, 13)
    assert np.allclose(h(x), 1.5 * np.cos(x))


def test_manufacture_rejects_nonpositive_rate(ou):
    with pytest.raises(PreconditionError):
        op.manufacture_rhs(ou, 0.0, op.constant(1.0))


@given(lam=st.floats(0.1, 10), x=finite)
def test_manufactured_pair_roundtrip(ou, lam, x):
    u = op.cosine([0.7], phase=0.3)
    h = op.manufacture_rhs(ou, lam, u)
    assert lam * u(x) - op.generator_apply(ou, u, x) == pytest.approx(h(x), abs=1e-10)


# --- jump conditions --------------------------------------------------------


def test_jd_integral_closed_form():
    js = J.JumpSpec(J.eta_scaled([1.0]), J.PowerLawMeasure(1.5, 1.0, 1.0, True))
    rep = J.validate_jump_conditions(js)
    assert rep.passed
    assert rep.integral == pytest.approx(4.0, abs=1e-3)


def test_jd_finite_measure():
    js = J.JumpSpec(J.eta_constant([1.0]), J.AtomicMeasure([(1.0, 2.0)]))
    rep = J.validate_jump_conditions(js)
    assert rep.passed and rep.small_integral == 0.0


def test_jd_divergent_measure():
    js = J.JumpSpec(J.eta_scaled([1.0]), J.PowerLawMeasure(2.0, 1.0, 1.0, True))
    rep = J.validate_jump_conditions(js)
    assert not rep.passed and not rep.integrable
    assert any("diverges" in d for d in rep.diagnostics)


@given(alpha=st.floats(0.2, 1.9))
def test_jd_integral_matches_formula(alpha):
    # 2 * int_0^1 z^2 z^{-1-alpha} dz = 2 / (2 - alpha)
    js = J.JumpSpec(J.eta_scaled([1.0]), J.PowerLawMeasure(alpha, 1.0, 1.0, True))
    rep = J.validate_jump_conditions(js)
    assert rep.integral == pytest.approx(2.0 / (2.0 - alpha), rel=1e-4)


def test_jump_apply_divergent_raises():
    js = J.JumpSpec(J.eta_scaled([1.0]), J.PowerLawMeasure(2.5, 1.0, 1.0, True))
    spec = op.GeneratorSpec(1, op.const_sigma([[0.0]]), op.const_drift([0.0]), jump=js)
    with pytest.raises(IntegrabilityError):
        op.generator_apply(spec, op.cosine([1.0]), 0.0)


def test_power_law_rejects_zero_alpha():
    with pytest.raises(ConfigurationError):
        J.PowerLawMeasure(0.0)


# --- reflection geometry ----------------------------------------------------


def _disk_with(ell):
    return dataclasses.replace(S.disk_boundary(), ell=ell)


def test_normal_reflection_has_no_degenerate_set():
    rep = op.validate_reflection_geometry(_disk_with(lambda x: -x / np.linalg.norm(x, axis=1,
                                                                              keepdims=True)))
    assert rep.passed and rep.degenerate_points == []


def test_example_disk_degenerate_point():
    rep = op.validate_reflection_geometry(S.disk_boundary())
    assert len(rep.degenerate_points) == 1
    assert np.allclose(rep.degenerate_points[0], [1.0, 0.0], atol=1e-6)


def test_outward_reflection_flagged():
    with pytest.raises(GeometryError) as ei:
        op.validate_reflection_geometry(_disk_with(lambda x: x))
    assert ei.value.report is not None and not ei.value.report.passed


def test_interval_geometry(interval):
    rep = op.validate_reflection_geometry(interval)
    assert rep.passed and rep.min_inner == pytest.approx(1.0)


# --- PK condition -----------------------------------------------------------


def test_pk_example_map():
    sc = S.disk_tangential()
    cmap, patch = sc.pk
    rep = op.check_condition_pk(sc.bspec, cmap, patch, spec=sc.spec)
    assert rep.residual < 1e-8 and rep.passed


def test_pk_identity_map_fails():
    b = _disk_with(lambda x: np.broadcast_to([1.0, 0.0], x.shape).copy())
    rep = op.check_condition_pk(b, op.identity_map(2), op.Patch(np.array([1.0, 0.0]), 0.1))
    assert rep.residual == pytest.approx(1.0) and not rep.passed


def test_pk_noninvertible_map():
    b = S.disk_boundary()
    bad = op.CoordinateMap(lambda z: np.stack([z[:, 0] ** 2, z[:, 1]], axis=1),
                           lambda z: np.zeros((len(z), 2, 2)),
                           lambda x: np.stack([np.abs(x[:, 0]) ** 0.5 * 0, x[:, 1]], axis=1))
    with pytest.raises(PreconditionError):
        op.check_condition_pk(b, bad, op.Patch(np.array([1.0, 0.0]), 0.1))


# --- misc -------------------------------------------------------------------


def test_validate_generator_psd(ou):
    rep = op.validate_generator(ou, np.linspace(-2, 2, 21))
    assert rep.passed and rep.lipschitz_estimate == pytest.approx(1.0)


@given(x=st.lists(finite, min_size=2, max_size=2))
def test_test_function_derivatives_consistent(x):
    f = op.tanh_of(op.quadratic([0.3, -0.2], [[1.0, 0.5], [0.5, 2.0]]))
    x = np.array(x)
    eps = 1e-6
    num = np.array([(f(x + e) - f(x - e)) / (2 * eps) for e in eps * np.eye(2)])
    assert np.allclose(num, f.gradient(x), atol=1e-6)
    hn = np.array([(f.gradient(x + e) - f.gradient(x - e)) / (2 * eps) for e in eps * np.eye(2)])
    assert np.allclose(hn, f.hessian(x), atol=1e-5)


def test_require_positive_lambda():
    assert op.require_positive_lambda(2) == 2.0
    for bad in (0, -1, math.inf, float("nan")):
        with pytest.raises(ConfigurationError):
            op.require_positive_lambda(bad)
