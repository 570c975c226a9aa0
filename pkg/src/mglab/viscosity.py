"""Grid-level viscosity checks for ``lam u - A u = h`` and its boundary problem.

A test function touches ``u`` from above (subsolution) or below
(supersolution) at the grid argmax/argmin of ``u - f``.  The test is shifted
so that ``(u - f)(x0) = 0``; the generator is applied analytically to ``f``.
The slack absorbs the ``O(dx)`` gap between grid extrema and analytic
tangency.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .grid import INTERIOR, GridFunction
from .operators import (as_points, eval_field, generator_apply, quadratic, range_residual,
                        require_positive_lambda)

SLACK_CONSTANT = 10.0


@dataclass
class Violation:
    node: int
    f: str
    lhs: float
    margin: float
    x: list = field(default_factory=list)

    def to_dict(self):
        return {"node": self.node, "f": self.f, "lhs": self.lhs, "margin": self.margin}


@dataclass
class ViscosityReport:
    kind: str
    slack: float
    bank_size: int
    checked_count: int
    violations: list = field(default_factory=list)
    skipped: int = 0

    @property
    def verdict(self):
        return "fail" if self.violations else "pass"

    @property
    def passed(self):
        return not self.violations

    def nodes(self):
        return sorted({v.node for v in self.violations})

    def to_dict(self):
        return {"verdict": self.verdict,
                "violations": [v.to_dict() for v in self.violations],
                "slack": self.slack, "bank_size": self.bank_size,
                "checked_count": self.checked_count}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# banks and slack


def _grid_array(u):
    g = u.grid
    v = np.where(g.active, u.values, np.nan)
    return v.reshape(g.shape)


def discrete_derivatives(u):
    """Centered first differences ``(N, d)`` and max-abs second differences ``(N,)``."""
    g = u.grid
    arr = _grid_array(u)
    d = g.dim
    grads = np.gradient(arr, *g.dx) if d > 1 else [np.gradient(arr, g.dx[0])]
    p = np.stack([gi.ravel() for gi in grads], axis=1)
    p = np.nan_to_num(p, nan=0.0)
    curv = np.zeros(g.n_nodes)
    for ax in range(d):
        second = np.full(arr.shape, np.nan)
        lo = [slice(None)] * d
        mid = [slice(None)] * d
        hi = [slice(None)] * d
        lo[ax], mid[ax], hi[ax] = slice(None, -2), slice(1, -1), slice(2, None)
        second[tuple(mid)] = (arr[tuple(hi)] - 2 * arr[tuple(mid)] + arr[tuple(lo)]) / g.dx[ax] ** 2
        curv = np.fmax(curv, np.abs(second).ravel())
    return p, np.nan_to_num(curv, nan=0.0)


def bank_curvature(u, quantile=0.9):
    """Curvature level ``q`` for default banks.

    A high quantile rather than the max keeps isolated kinks (or spikes
    under test) from inflating the slack.
    """
    _, curv = discrete_derivatives(u)
    act = u.grid.kind == INTERIOR
    vals = curv[act] if np.any(act) else curv
    return max(1.0, 1.25 * float(np.quantile(vals, quantile)))


def default_bank(u, seed=0, jitter=0.1, random_q=True, nodes=None):
    """Quadratics centred at grid nodes.

    Each node contributes ``p = discrete gradient + jitter`` with
    ``Q = +qI``, ``Q = -qI`` and (optionally) a random symmetric matrix
    with spectrum in ``[-q, q]``.
    """
    g = u.grid
    rng = np.random.default_rng(seed)
    d = g.dim
    q = bank_curvature(u)
    p_all, _ = discrete_derivatives(u)
    idx = np.flatnonzero(g.active) if nodes is None else np.asarray(nodes, dtype=int)
    bank = []
    eye = np.eye(d)
    for i in idx:
        c = g.coords[i]
        base = p_all[i]
        mats = [q * eye, -q * eye]
        if random_q:
            A = rng.standard_normal((d, d))
            Qo, _ = np.linalg.qr(A)
            mats.append(Qo @ np.diag(rng.uniform(-q, q, d)) @ Qo.T)
        for Q in mats:
            p = base + jitter * (1.0 + np.abs(base)) * rng.standard_normal(d)
            bank.append(quadratic(p, Q, 0.0, center=c))
    return bank


def _bank_qnorm(bank):
    qmax = 0.0
    for f in bank:
        x0 = np.zeros((1, f.dim))
        qmax = max(qmax, float(np.linalg.norm(f.hessian_fn(x0)[0], 2)))
    return qmax


def default_slack(u, bank=None):
    """``C (dx + dx max ||Q||)`` over the bank (Hessian read at the origin)."""
    dx = u.grid.h
    qmax = _bank_qnorm(bank) if bank else 0.0
    return SLACK_CONSTANT * (dx + dx * qmax)


def _prepare(u, spec, lam, h, bank, slack):
    if not isinstance(u, GridFunction):
        raise PreconditionError("u must be a GridFunction")
    lam = require_positive_lambda(lam)
    if bank is None:
        bank = default_bank(u)
    bank = list(bank)
    if not bank:
        raise PreconditionError("empty test-function bank")
    if spec.dim != u.grid.dim:
        raise PreconditionError("generator and grid dimensions differ")
    if slack is None:
        slack = default_slack(u, bank)
    act = np.flatnonzero(u.grid.active)
    hv = np.full(u.grid.n_nodes, np.nan)
    hv[act] = eval_field(h, u.grid.coords[act])
    return lam, bank, float(slack), act, hv


def _lhs(spec, lam, u, hv, f, node):
    x0 = u.grid.coords[node][None, :]
    af = float(generator_apply(spec, f, x0)[0])
    return lam * float(u.values[node]) - af - float(hv[node])


def _touch(u, f, act, sense):
    diff = u.values[act] - f.value_fn(u.grid.coords[act])
    j = int(np.argmax(diff)) if sense > 0 else int(np.argmin(diff))
    return int(act[j]), diff


# ---------------------------------------------------------------------------
# checks


def _interior_check(u, spec, lam, h, bank, slack, sense, kind):
    lam, bank, slack, act, hv = _prepare(u, spec, lam, h, bank, slack)
    rep = ViscosityReport(kind, slack, len(bank), 0)
    for f in bank:
        node, _ = _touch(u, f, act, sense)
        if u.grid.kind[node] != INTERIOR:
            rep.skipped += 1
            continue
        rep.checked_count += 1
        lhs = _lhs(spec, lam, u, hv, f, node)
        margin = sense * lhs - slack
        if margin > 0:
            rep.violations.append(Violation(node, f.descriptor, lhs, margin,
                                            u.grid.coords[node].tolist()))
    return rep


def subsolution_check(u, spec, lam, h, bank=None, slack=None):
    """At the grid argmax ``x0`` of ``u - f`` require ``lam u - Af <= h + slack``.

    Touches landing on boundary or truncated nodes are skipped (see
    :func:`boundary_viscosity_check`).
    """
    return _interior_check(u, spec, lam, h, bank, slack, +1, "subsolution")


def supersolution_check(u, spec, lam, h, bank=None, slack=None):
    """Mirror of :func:`subsolution_check`: argmin, ``lam u - Af >= h - slack``."""
    return _interior_check(u, spec, lam, h, bank, slack, -1, "supersolution")


def boundary_viscosity_check(u, spec, bspec, lam, h, bank=None, slack=None, which="both"):
    """Relaxed boundary conditions at boundary touch points.

    Subsolution: ``min(lam u - Af - h, min_k -B_k f) <= slack``.
    Supersolution: ``max(lam u - Af - h, max_k -B_k f) >= -slack``.
    ``B_k f`` is read at the boundary foot of the node, for every piece whose
    closure contains the foot.
    """
    if bspec is None or u.grid.bspec is None:
        raise PreconditionError("boundary check needs a constrained scenario grid")
    lam, bank, slack, act, hv = _prepare(u, spec, lam, h, bank, slack)
    g = u.grid
    rep = ViscosityReport("boundary", slack, len(bank), 0)
    senses = {"both": (+1, -1), "sub": (+1,), "super": (-1,)}[which]
    foot_cache = {}
    for f in bank:
        for sense in senses:
            node, _ = _touch(u, f, act, sense)
            if g.kind[node] < 1:
                continue
            if node not in foot_cache:
                foot = bspec.normal_projection(g.coords[node][None, :])
                pieces = [k for k in range(1, bspec.n_pieces + 1) if bspec.in_piece(k, foot)[0]]
                if not pieces:
                    raise PreconditionError(
                        f"boundary node {node} at {g.coords[node].tolist()} has no piece index")
                foot_cache[node] = (foot, pieces)
            foot, pieces = foot_cache[node]
            rep.checked_count += 1
            interior = _lhs(spec, lam, u, hv, f, node)
            grad = f.gradient_fn(foot)[0]
            bvals = [-float(grad @ bspec.ell_k(k, foot)[0]) for k in pieces]
            if sense > 0:
                lhs = min(interior, min(bvals))
                margin = lhs - slack
            else:
                lhs = max(interior, max(bvals))
                margin = -lhs - slack
            if margin > 0:
                rep.violations.append(Violation(node, f.descriptor, lhs, margin,
                                                g.coords[node].tolist()))
    return rep


def sequential_viscosity_check(u, spec, lam, h, bank=None, n_top=5, slack=None, sense=+1):
    """Maximizing-sequence surrogate of the subsolution test (``sense=-1`` for super).

    For each ``f`` whose extreme over the grid sits at an interior node, the
    candidates are the ``n_top`` interior nodes ranked by ``u - f`` that also
    lie within ``slack`` of the extreme value; the test requires the best
    candidate to satisfy the inequality.
    """
    lam, bank, slack, act, hv = _prepare(u, spec, lam, h, bank, slack)
    n_int = int(np.sum(u.grid.kind[act] == INTERIOR))
    if n_top > n_int:
        warnings.warn(f"n_top={n_top} exceeds the {n_int} interior nodes; clipped",
                      stacklevel=2)
        n_top = n_int
    if n_top < 1:
        raise PreconditionError("n_top must be at least 1")
    rep = ViscosityReport("sequential", slack, len(bank), 0)
    for f in bank:
        diff = sense * (u.values[act] - f.value_fn(u.grid.coords[act]))
        order = np.argsort(-diff, kind="stable")
        best = float(diff[order[0]])
        if u.grid.kind[act[order[0]]] != INTERIOR:
            # extreme on the boundary or a truncation edge: not an interior test
            rep.skipped += 1
            continue
        cand = [int(act[j]) for j in order[:n_top]
                if u.grid.kind[act[j]] == INTERIOR and diff[j] >= best - slack]
        if not cand:
            rep.skipped += 1
            continue
        rep.checked_count += 1
        vals = [sense * _lhs(spec, lam, u, hv, f, c) for c in cand]
        k = int(np.argmin(vals))
        margin = vals[k] - slack
        if margin > 0:
            # reported at the extreme node, the limit point of the sequence
            top = cand[0]
            rep.violations.append(Violation(top, f.descriptor, sense * vals[k], margin,
                                            u.grid.coords[top].tolist()))
    return rep


@dataclass
class ComparisonReport:
    passed: bool
    gap: float
    node: int
    x: list
    tol: float

    @property
    def verdict(self):
        return "pass" if self.passed else "fail"

    def to_dict(self):
        return {"verdict": self.verdict, "gap": self.gap, "node": self.node, "x": self.x,
                "tol": self.tol}


def comparison_check(u_sub, u_super, tol=None):
    """Pass iff ``max(u_sub - u_super) <= tol`` on the common grid (default ``10 dx``)."""
    g1, g2 = u_sub.grid, u_super.grid
    if g1.shape != g2.shape or not np.allclose(g1.lo, g2.lo) or not np.allclose(g1.dx, g2.dx) \
            or not np.array_equal(g1.active, g2.active):
        raise PreconditionError("comparison needs grid functions on a common grid")
    if tol is None:
        tol = SLACK_CONSTANT * g1.h
    act = np.flatnonzero(g1.active)
    diff = u_sub.values[act] - u_super.values[act]
    j = int(np.argmax(diff))
    gap = float(diff[j])
    node = int(act[j])
    return ComparisonReport(gap <= tol, gap, node, g1.coords[node].tolist(), float(tol))


@dataclass
class RangeResidualReport:
    residual: float
    best: str
    bank_size: int
    n_points: int

    def to_dict(self):
        return {"residual": self.residual, "best": self.best, "bank_size": self.bank_size,
                "n_points": self.n_points}


def range_residual_check(f_bank, spec, lam, h, samples):
    """``min_f ||lam f - Af - h||_inf`` over the bank at ``samples``.

    ``samples`` is an array of points or a grid (its interior nodes are used).
    """
    lam = require_positive_lambda(lam)
    f_bank = list(f_bank)
    if hasattr(samples, "coords") and hasattr(samples, "kind"):
        samples = samples.coords[samples.kind == INTERIOR]
    pts, _ = as_points(samples, spec.dim)
    if not f_bank:
        return RangeResidualReport(float("inf"), "", 0, len(pts))
    best, best_f = range_residual(f_bank, spec, lam, h, pts)
    return RangeResidualReport(best, best_f.descriptor, len(f_bank), len(pts))
