import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mglab import jumps as J
from mglab import operators as op
from mglab import paths as P
from mglab import scenarios as S
from mglab.errors import (ConfigurationError, PreconditionError, ReflectionError,
                          SimulationError)


def _spec(b, s):
    return op.GeneratorSpec(1, op.const_sigma([[s]]), op.const_drift([b]))


# --- diffusion ----------------------------------------------------------------


def test_frozen_path_is_constant():
    ens = P.simulate_diffusion(_spec(0.0, 0.0), [1.0], 1.0, 0.01, seed=3)
    assert np.all(ens.states == 1.0)


def test_unit_drift_reaches_one():
    dt = 0.01
    ens = P.simulate_diffusion(_spec(1.0, 0.0), [0.0], 1.0, dt)
    assert abs(ens.final[0, 0] - 1.0) <= dt


def test_bm_moments():
    n = 100_000
    ens = P.simulate_diffusion(_spec(0.0, 1.0), [0.0], 1.0, 0.01, seed=11, n_paths=n,
                               record="ends")
    x = ens.final[:, 0]
    assert abs(x.mean()) <= 3 / math.sqrt(n)
    assert abs(x.var() - 1.0) <= 0.05


@pytest.mark.filterwarnings("ignore:overflow")
def test_blow_up_reports_step():
    spec = op.GeneratorSpec(1, op.const_sigma([[0.0]]), lambda x: 1e200 * x**2)
    with pytest.raises(SimulationError) as ei:
        P.simulate_diffusion(spec, [1.0], 1.0, 0.1)
    assert ei.value.step is not None and ei.value.step >= 1


def test_bad_step_and_horizon():
    with pytest.raises(ConfigurationError):
        P.simulate_diffusion(_spec(0, 1), [0.0], 1.0, 0.0)
    with pytest.raises(ConfigurationError):
        P.simulate_diffusion(_spec(0, 1), [0.0], -1.0, 0.1)


def test_diffusion_rejects_jump_spec():
    with pytest.raises(PreconditionError):
        P.simulate_diffusion(S.jump_poisson_spec(), [0.0], 1.0, 0.1)


def test_reproducible_and_size_independent():
    spec = S.ou_spec()
    a = P.simulate_diffusion(spec, [0.3], 0.5, 0.01, seed=5, n_paths=300)
    b = P.simulate_diffusion(spec, [0.3], 0.5, 0.01, seed=5, n_paths=300)
    c = P.simulate_diffusion(spec, [0.3], 0.5, 0.01, seed=5, n_paths=7)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.states[:7], c.states)
    d = P.simulate_diffusion(spec, [0.3], 0.5, 0.01, seed=6, n_paths=7)
    assert not np.array_equal(c.states, d.states)


def test_coarsened_noise_sums_fine_increments():
    # coarse step built from the fine draws equals the sum of two fine steps for BM
    spec = _spec(0.0, 1.0)
    fine = P.simulate_diffusion(spec, [0.0], 0.2, 0.01, seed=2, n_paths=40)
    coarse = P.simulate_diffusion(spec, [0.0], 0.2, 0.02, seed=2, n_paths=40, coarsen=2)
    assert np.allclose(fine.states[:, ::2], coarse.states, atol=1e-12)
    assert coarse.meta["noise_key"] == fine.meta["noise_key"]


# --- jumps --------------------------------------------------------------------


def test_poisson_jump_count():
    n = 100_000
    spec = S.jump_poisson_spec(2.0)
    ens = P.simulate_jump_diffusion(spec, [0.0], 1.0, 0.01, seed=1, n_paths=n, record="ends")
    k = ens.jump_total
    assert abs(k.mean() - 2.0) <= 3 * math.sqrt(2.0 / n)
    assert np.allclose(ens.final[:, 0], k)


def test_no_jump_part_matches_diffusion():
    spec = S.ou_spec()
    a = P.simulate_diffusion(spec, [0.2], 0.5, 0.01, seed=9, n_paths=20)
    b = P.simulate_jump_diffusion(spec, [0.2], 0.5, 0.01, seed=9, n_paths=20)
    assert np.array_equal(a.states, b.states)


def test_compensator_drift_one_sided():
    js = J.JumpSpec(J.eta_scaled([1.0]), J.PowerLawMeasure(1.5, 1.0, 1.0, symmetric=False))
    spec = op.GeneratorSpec(1, op.const_sigma([[0.0]]), op.const_drift([0.0]), jump=js)
    ens = P.simulate_jump_diffusion(spec, [0.0], 0.1, 0.01, eps_cut=0.1, n_paths=2)
    exact = -2.0 * (math.sqrt(10.0) - 1.0)
    assert ens.meta["compensator_drift"][0] == pytest.approx(exact, abs=1e-6)
    # variance loss bound int_{|z|<0.1} z^2 z^{-2.5} dz = 2 * 0.1^0.5
    assert ens.meta["variance_loss_bound"] == pytest.approx(2 * math.sqrt(0.1), rel=1e-4)


def test_symmetric_compensator_vanishes():
    ens = P.simulate_jump_diffusion(S.jump_alpha_spec(), [0.0], 0.1, 0.01, n_paths=2)
    assert abs(ens.meta["compensator_drift"][0]) < 1e-10


class _InfiniteMass(J.PowerLawMeasure):
    def mass(self, lo, hi=math.inf):
        return math.inf


def test_infinite_restricted_mass():
    js = J.JumpSpec(J.eta_scaled([1.0]), _InfiniteMass(1.5))
    spec = op.GeneratorSpec(1, op.const_sigma([[0.0]]), op.const_drift([0.0]), jump=js)
    with pytest.raises(ConfigurationError):
        P.simulate(spec, [0.0], 0.1, 0.01, eps_cut=0.1)


def test_jump_log_consistent():
    spec = S.jump_poisson_spec(2.0)
    ens = P.simulate_jump_diffusion(spec, [0.0], 1.0, 0.05, seed=4, n_paths=50)
    assert len(ens.jump_log["path"]) == ens.jump_total.sum()
    rec = ens.path(3)
    assert len(rec.jumps) == ens.jump_total[3]
    assert rec.jump_flag.sum() == ens.jump_total[3]


# --- reflection ---------------------------------------------------------------


def test_reflected_frozen_path(interval):
    ens = P.simulate_reflected(_spec(0, 0), interval, [0.5], 1.0, 0.01)
    assert np.all(ens.states == 0.5) and np.all(ens.local_times == 0)


def test_reflected_start_outside(interval):
    with pytest.raises(PreconditionError):
        P.simulate_reflected(_spec(0, 1), interval, [1.5], 1.0, 0.01)


def test_halfline_local_time_mean():
    n = 20_000
    dt = 1e-3
    b = S.halfline_boundary()
    ens = P.simulate_reflected(_spec(0, 1), b, [0.0], 1.0, dt, seed=21, n_paths=n, record="ends")
    g = ens.gamma_T[:, 0]
    m, se = g.mean(), g.std(ddof=1) / math.sqrt(n)
    assert abs(m - math.sqrt(2 / math.pi)) <= 3 * se + 2 * math.sqrt(dt)
    # Skorokhod identity: X(1) = B(1) + gamma(1) >= 0
    assert np.all(ens.final[:, 0] >= -b.tol)


def test_interval_pushes_toward_interior(interval):
    ens = P.simulate_reflected(_spec(0, 1), interval, [0.5], 2.0, 0.01, seed=2, n_paths=200)
    assert np.all(interval.psi(ens.states.reshape(-1, 1)) >= -interval.tol)
    assert np.all(np.diff(ens.local_times, axis=1) >= 0)
    assert ens.local_times[:, 0].sum() == 0


@pytest.mark.slow
def test_disk_invariants():
    sc = S.disk_tangential()
    ens = P.simulate_reflected(sc.spec, sc.bspec, [0.5, 0.0], 1.0, 1e-3, seed=3, n_paths=300,
                               record="full", validate=False)
    psi = sc.bspec.psi(ens.states.reshape(-1, 2))
    assert np.all(psi >= -sc.bspec.tol)
    inc = np.diff(ens.local_times[:, :, 0], axis=1)
    assert np.all(inc >= 0)
    assert np.all(ens.contact[:, 1:][inc > 0])
    assert inc.sum() > 0


def test_push_budget_exhausted(interval):
    with pytest.raises(ReflectionError) as ei:
        P.simulate_reflected(_spec(0, 1), interval, [0.0], 1.0, 0.5, seed=1, n_paths=50,
                             max_push=1e-6)
    assert ei.value.point is not None


@given(seed=st.integers(0, 2**31), x0=st.floats(0.0, 1.0))
def test_reflected_invariants_property(interval, seed, x0):
    ens = P.simulate_reflected(_spec(0.3, 1.0), interval, [x0], 0.2, 0.01, seed=seed,
                               n_paths=8, validate=False)
    assert np.all(interval.psi(ens.states.reshape(-1, 1)) >= -interval.tol)
    inc = np.diff(ens.local_times, axis=1)
    assert np.all(inc >= 0)
    assert np.all(ens.contact[:, 1:][np.any(inc > 0, axis=2)])


# --- exit times and export ----------------------------------------------------


def test_exit_time_cap():
    ens = P.simulate_diffusion(_spec(0, 0), [0.0], 1.0, 0.01)
    tau, idx, branch = P.first_exit_time(ens.path(0), [0.0], 0.3)
    assert tau == 0.3 and branch == "cap" and ens.times[idx] >= 0.3 - 1e-12


@given(eps=st.floats(0.05, 0.9))
def test_exit_time_linear_path(eps):
    ens = P.simulate_diffusion(_spec(1.0, 0.0), [0.0], 1.0, 0.01)
    tau, idx, _ = P.first_exit_time(ens.path(0), [0.0], eps)
    assert tau == pytest.approx(eps, abs=0.01 + 1e-9)
    assert ens.times[idx] >= eps - 1e-9


def test_exit_time_bm_mean():
    ens = P.simulate_diffusion(_spec(0, 1), [0.0], 0.2, 1e-3, seed=8, n_paths=10_000)
    tau, _, _ = P.exit_times(ens.states, ens.times, [0.0], 0.1)
    assert 0 < tau.mean() <= 0.1


def test_csv_export(interval):
    ens = P.simulate_reflected(_spec(0, 1), interval, [0.5], 0.05, 0.01, seed=1, n_paths=3)
    text = ens.path(0).to_csv()
    lines = text.splitlines()
    assert lines[0] == "t,x1,gamma_1,gamma_2,jump_flag"
    assert len(lines) == len(ens.times) + 1
    cat = ens.to_csv()
    assert cat.splitlines()[0] == "path_id,t,x1,gamma_1,gamma_2,jump_flag"
    assert cat == ens.to_csv()
