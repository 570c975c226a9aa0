"""Generators, boundary operators, test functions and scenario validation.

Every callable in this module is vectorized: points are arrays of shape
``(n, d)``.  A 1-d array is read as ``n`` points when ``d == 1`` and as one
point otherwise; scalar inputs give scalar outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from . import jumps as _jumps
from .errors import ConfigurationError, GeometryError, PreconditionError

BOUNDARY_REL_TOL = 1e-8
DEGENERACY_TOL = 1e-6


def as_points(x, d):
    """Return ``(points (n, d), single)`` where ``single`` marks a lone point."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        if d == 1:
            return arr.reshape(-1, 1), False
        if arr.shape[0] != d:
            raise PreconditionError(f"point has {arr.shape[0]} coordinates, expected {d}")
        return arr.reshape(1, d), True
    if arr.shape[1] != d:
        raise PreconditionError(f"points have {arr.shape[1]} coordinates, expected {d}")
    return arr, False


def _squeeze(values, single):
    return float(values[0]) if single else values


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """A C^2 function with analytic gradient and Hessian."""

    __test__ = False  # not a pytest class

    dim: int
    value_fn: Callable
    gradient_fn: Callable
    hessian_fn: Callable
    descriptor: str

    def value(self, x):
        pts, single = as_points(x, self.dim)
        return _squeeze(self.value_fn(pts), single)

    __call__ = value

    def gradient(self, x):
        pts, single = as_points(x, self.dim)
        g = self.gradient_fn(pts)
        return g[0] if single else g

    def hessian(self, x):
        pts, single = as_points(x, self.dim)
        h = self.hessian_fn(pts)
        return h[0] if single else h

    def shifted(self, c):
        """``f + c``; used to normalize touching at a node."""
        return TestFunction(self.dim, lambda x: self.value_fn(x) + c, self.gradient_fn,
                            self.hessian_fn, f"{self.descriptor}+{c:.6g}")

    def __repr__(self):
        return f"TestFunction({self.descriptor})"


def constant(c, dim=1):
    c = float(c)
    return TestFunction(
        dim,
        lambda x: np.full(x.shape[0], c),
        lambda x: np.zeros_like(x),
        lambda x: np.zeros((x.shape[0], dim, dim)),
        f"constant({c:g})",
    )


def coordinate(i, dim=1):
    """``f(x) = x_i`` with a zero-based axis index."""
    e = np.zeros(dim)
    e[i] = 1.0
    return TestFunction(
        dim,
        lambda x: x[:, i].copy(),
        lambda x: np.broadcast_to(e, x.shape).copy(),
        lambda x: np.zeros((x.shape[0], dim, dim)),
        f"coordinate({i})",
    )


def quadratic(p, Q, c=0.0, center=None):
    """``c + p.(x-x0) + 0.5 (x-x0)^T Q (x-x0)``."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    dim = p.shape[0]
    Q = np.asarray(Q, dtype=float).reshape(dim, dim)
    Q = 0.5 * (Q + Q.T)
    x0 = np.zeros(dim) if center is None else np.atleast_1d(np.asarray(center, dtype=float))
    c = float(c)

    def value(x):
        y = x - x0
        return c + y @ p + 0.5 * np.einsum("ni,ij,nj->n", y, Q, y)

    def gradient(x):
        return p + (x - x0) @ Q

    def hessian(x):
        return np.broadcast_to(Q, (x.shape[0], dim, dim)).copy()

    desc = f"quadratic(p={np.round(p, 6).tolist()},Q={np.round(Q, 6).tolist()},c={c:.6g}"
    if center is not None:
        desc += f",x0={np.round(x0, 6).tolist()}"
    return TestFunction(dim, value, gradient, hessian, desc + ")")


def bump(center, s):
    """``exp(-|x-x0|^2 / s^2)``."""
    x0 = np.atleast_1d(np.asarray(center, dtype=float))
    dim = x0.shape[0]
    s2 = float(s) ** 2

    def value(x):
        return np.exp(-np.sum((x - x0) ** 2, axis=1) / s2)

    def gradient(x):
        return (-2.0 / s2) * (x - x0) * value(x)[:, None]

    def hessian(x):
        y = x - x0
        v = value(x)[:, None, None]
        return v * (4.0 / s2**2 * y[:, :, None] * y[:, None, :] - 2.0 / s2 * np.eye(dim))

    return TestFunction(dim, value, gradient, hessian, f"bump(x0={x0.tolist()},s={s:g})")


def cosine(k, amp=1.0, phase=0.0):
    """``amp * cos(k.x + phase)``."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    dim = k.shape[0]

    def value(x):
        return amp * np.cos(x @ k + phase)

    def gradient(x):
        return (-amp * np.sin(x @ k + phase))[:, None] * k

    def hessian(x):
        return (-amp * np.cos(x @ k + phase))[:, None, None] * np.outer(k, k)

    return TestFunction(dim, value, gradient, hessian,
                        f"cos(k={k.tolist()},amp={amp:g},phase={phase:g})")


def tanh_of(inner):
    """``tanh(g(x))`` for a test function ``g``."""

    def value(x):
        return np.tanh(inner.value_fn(x))

    def gradient(x):
        s2 = 1.0 - np.tanh(inner.value_fn(x)) ** 2
        return s2[:, None] * inner.gradient_fn(x)

    def hessian(x):
        t = np.tanh(inner.value_fn(x))
        s2 = 1.0 - t**2
        g = inner.gradient_fn(x)
        return (s2[:, None, None] * inner.hessian_fn(x)
                - (2.0 * t * s2)[:, None, None] * g[:, :, None] * g[:, None, :])

    return TestFunction(inner.dim, value, gradient, hessian, f"tanh({inner.descriptor})")


def lincomb(terms):
    """``sum_i a_i f_i`` for ``terms = [(a_i, f_i), ...]``."""
    terms = [(float(a), f) for a, f in terms]
    dim = terms[0][1].dim
    return TestFunction(
        dim,
        lambda x: sum(a * f.value_fn(x) for a, f in terms),
        lambda x: sum(a * f.gradient_fn(x) for a, f in terms),
        lambda x: sum(a * f.hessian_fn(x) for a, f in terms),
        " + ".join(f"{a:g}*{f.descriptor}" for a, f in terms),
    )


def random_bank(dim, n, rng, box=None, scale=1.0):
    """Random bank: constants, coordinates, quadratics and bumps."""
    rng = np.random.default_rng(rng)
    lo, hi = (np.full(dim, -1.0), np.full(dim, 1.0)) if box is None else map(np.asarray, box)
    bank = [constant(rng.normal(), dim)]
    bank += [coordinate(i, dim) for i in range(dim)]
    while len(bank) < n:
        kind = rng.integers(3)
        x0 = rng.uniform(lo, hi)
        if kind < 2:
            A = rng.normal(size=(dim, dim))
            bank.append(quadratic(scale * rng.normal(size=dim), scale * (A + A.T) / 2,
                                  rng.normal(), center=x0))
        else:
            width = float(np.max(hi - lo)) * rng.uniform(0.2, 0.6)
            bank.append(bump(x0, width))
    return bank[:n]


def as_field(h, dim=1):
    """Normalize a scalar field: TestFunction, callable on points, or a number."""
    if isinstance(h, TestFunction):
        return h
    if callable(h):
        return h
    return constant(float(h), dim)


def eval_field(h, x):
    if isinstance(h, TestFunction):
        return h.value_fn(x)
    if callable(h):
        return np.asarray(h(x), dtype=float).reshape(x.shape[0])
    return np.full(x.shape[0], float(h))


# ---------------------------------------------------------------------------
# generators


def const_sigma(matrix):
    m = np.atleast_2d(np.asarray(matrix, dtype=float))

    def sigma(x):
        return np.broadcast_to(m, (x.shape[0],) + m.shape)

    sigma.matrix = m  # lets the simulator skip per-path evaluation
    return sigma


def const_drift(vector):
    v = np.atleast_1d(np.asarray(vector, dtype=float))

    def drift(x):
        return np.broadcast_to(v, x.shape).copy()

    drift.vector = v
    return drift


def linear_drift(matrix, offset=None):
    """``b(x) = M x + c``."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    c = np.zeros(m.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    return lambda x: x @ m.T + c


@dataclass(frozen=True)
class GeneratorSpec:
    """``Af = 0.5 tr(a D^2 f) + grad f . b + Jf`` with ``a = sigma sigma^T``."""

    dim: int
    sigma: Callable
    drift: Callable
    jump: Optional[_jumps.JumpSpec] = None
    lipschitz: Optional[float] = None
    smooth: bool = True  # coefficients smooth enough for first-order weak rates

    def diffusion(self, x):
        s = self.sigma(x)
        return np.einsum("nik,njk->nij", s, s)

    @property
    def has_jumps(self):
        return self.jump is not None


def generator_apply(spec, f, x, return_error=False):
    """``Af(x)``; with ``return_error`` also the jump quadrature error bound."""
    pts, single = as_points(x, spec.dim)
    hess = f.hessian_fn(pts)
    out = 0.5 * np.einsum("nij,nij->n", spec.diffusion(pts), hess)
    out = out + np.einsum("ni,ni->n", f.gradient_fn(pts), spec.drift(pts))
    err = np.zeros(pts.shape[0])
    if spec.jump is not None:
        jv, err = _jumps.jump_part(spec.jump, f, pts)
        out = out + jv
    if return_error:
        return _squeeze(out, single), _squeeze(err, single)
    return _squeeze(out, single)


def manufacture_rhs(spec, lam, u):
    """``h = lam*u - Au`` as a callable on points."""
    if lam <= 0:
        raise PreconditionError("lambda must be positive")

    def h(x):
        pts, single = as_points(x, spec.dim)
        return _squeeze(lam * u.value_fn(pts) - generator_apply(spec, u, pts), single)

    h.descriptor = f"{lam:g}*u - Au, u={u.descriptor}"
    return h


@dataclass
class GeneratorReport:
    psd_ok: bool
    min_eigenvalue: float
    lipschitz_estimate: float
    lipschitz_ok: Optional[bool]

    @property
    def passed(self):
        return self.psd_ok and self.lipschitz_ok is not False

    def to_dict(self):
        return dict(psd_ok=self.psd_ok, min_eigenvalue=self.min_eigenvalue,
                    lipschitz_estimate=self.lipschitz_estimate,
                    lipschitz_ok=self.lipschitz_ok, passed=self.passed)


def validate_generator(spec, samples):
    """Sampled PSD check of ``a`` and difference quotients of ``sigma, b``."""
    pts, _ = as_points(samples, spec.dim)
    a = spec.diffusion(pts)
    a_sym = np.allclose(a, np.swapaxes(a, 1, 2), atol=1e-12)
    min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2)))))
    scale = max(1.0, float(np.max(np.abs(a))))
    psd_ok = a_sym and min_eig >= -1e-12 * scale
    lip = 0.0
    if pts.shape[0] > 1:
        i = np.arange(pts.shape[0] - 1)
        dx = np.linalg.norm(pts[i + 1] - pts[i], axis=1)
        keep = dx > 1e-12
        if np.any(keep):
            ds = np.linalg.norm((spec.sigma(pts[1:]) - spec.sigma(pts[:-1])).reshape(len(i), -1), axis=1)
            db = np.linalg.norm(spec.drift(pts[1:]) - spec.drift(pts[:-1]), axis=1)
            lip = float(np.max(np.maximum(ds, db)[keep] / dx[keep]))
    ok = None if spec.lipschitz is None else lip <= spec.lipschitz * (1 + 1e-9)
    return GeneratorReport(psd_ok, min_eig, lip, ok)


# ---------------------------------------------------------------------------
# boundaries


@dataclass(frozen=True)
class BoundarySpec:
    """Domain ``D = {psi > 0}`` with reflection field ``ell``.

    ``pieces`` is a sequence of ``(name, predicate)``; pieces are numbered
    from 1 in that order.  ``ell_pieces`` optionally gives a separate field
    per piece.  ``param`` maps ``s in [0,1]^(d-1)`` onto the boundary; for
    ``d == 1`` the finite boundary is ``points``.  ``bbox`` bounds the
    region used for grids; parts of its edge inside ``D`` are truncation
    edges rather than boundary.
    """

    dim: int
    psi: Callable
    psi_grad: Callable
    ell: Callable
    pieces: Sequence = ()
    bbox: tuple = None
    diam: float = 1.0
    param: Optional[Callable] = None
    points: Optional[np.ndarray] = None
    ell_pieces: Optional[Sequence[Callable]] = None
    psi_tilde: Optional[Callable] = None
    project: Optional[Callable] = None

    @property
    def tol(self):
        return BOUNDARY_REL_TOL * self.diam

    @property
    def n_pieces(self):
        return len(self.pieces)

    def normal(self, x):
        g = self.psi_grad(x)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def ell_k(self, k, x):
        if self.ell_pieces is not None:
            return self.ell_pieces[k - 1](x)
        return self.ell(x)

    def piece_index(self, x):
        """Piece number (1-based) of each point; 0 when no predicate holds."""
        out = np.zeros(x.shape[0], dtype=int)
        for k in range(len(self.pieces), 0, -1):
            out = np.where(self.pieces[k - 1][1](x), k, out)
        return out

    def in_piece(self, k, x):
        if not 1 <= k <= len(self.pieces):
            raise PreconditionError(f"boundary piece {k} does not exist")
        return np.asarray(self.pieces[k - 1][1](x), dtype=bool)

    def on_boundary(self, x):
        return np.abs(self.psi(x)) <= self.tol

    def normal_projection(self, x, iters=30):
        """``pi_nu``: closest boundary point, by Newton steps along ``grad psi``."""
        if self.project is not None:
            return self.project(x)
        y = np.array(x, dtype=float)
        for _ in range(iters):
            g = self.psi_grad(y)
            p = self.psi(y)
            y = y - (p / np.sum(g * g, axis=1))[:, None] * g
            if np.all(np.abs(p) <= 1e-14 * self.diam):
                break
        return y

    def sample_boundary(self, n, rng):
        rng = np.random.default_rng(rng)
        if self.dim == 1 or self.param is None:
            if self.points is None:
                raise PreconditionError("boundary has neither a parametrization nor points")
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            return pts[rng.integers(len(pts), size=n)] if n > len(pts) else pts
        return self.param(rng.random((n, self.dim - 1)))


def boundary_apply(bspec, k, f, x):
    """``B_k f(x) = grad f(x) . l_k(x)`` at boundary points of piece ``k``."""
    pts, single = as_points(x, bspec.dim)
    if np.any(~bspec.on_boundary(pts)):
        raise PreconditionError("point is not on the boundary (|psi| exceeds tolerance)")
    if np.any(~bspec.in_piece(k, pts)):
        raise PreconditionError(f"point is not on boundary piece {k}")
    return _squeeze(np.einsum("ni,ni->n", f.gradient_fn(pts), bspec.ell_k(k, pts)), single)


@dataclass
class GeometryReport:
    n_samples: int
    min_grad_psi: float
    min_inner: float
    min_abs_ell: float
    degenerate_points: list
    degenerate_extent: list
    tangential_to_degenerate: list
    passed: bool
    diagnostics: list = field(default_factory=list)

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "min_grad_psi": self.min_grad_psi,
            "min_inner": self.min_inner,
            "min_abs_ell": self.min_abs_ell,
            "degenerate_points": [list(map(float, p)) for p in self.degenerate_points],
            "degenerate_extent": self.degenerate_extent,
            "tangential_to_degenerate": self.tangential_to_degenerate,
            "pass": self.passed,
            "diagnostics": list(self.diagnostics),
        }


def _inner(bspec, x):
    ells = [bspec.ell_k(k, x) for k in range(1, max(1, bspec.n_pieces) + 1)] \
        if bspec.ell_pieces is not None else [bspec.ell(x)]
    nu = bspec.normal(x)
    return np.min([np.einsum("ni,ni->n", l_, nu) for l_ in ells], axis=0)


def validate_reflection_geometry(bspec, n_samples=2000, seed=0, tol=DEGENERACY_TOL):
    """Sample the boundary, check the reflection cone and locate ``d0 D``.

    Candidate local minima of ``<l, nu>`` are refined along the boundary
    parametrization; refined minima at or below ``tol`` form the reported
    degenerate set.  For each degenerate point the extent of
    ``{<l,nu> <= tol}`` along the parametrization is reported, and in 2-d
    ``l`` is checked to be transversal to the point set (trivially true) and,
    for ``d >= 3``, to the level set of ``psi_tilde``.
    """
    rng = np.random.default_rng(seed)
    d = bspec.dim
    diagnostics = []
    if d == 1 or bspec.param is None:
        x = bspec.sample_boundary(n_samples, rng)
        s = None
    else:
        if d == 2:
            s = ((np.arange(n_samples) + rng.random()) / n_samples)[:, None]
        else:
            s = rng.random((n_samples, d - 1))
        x = bspec.param(s)
    grad_norm = np.linalg.norm(bspec.psi_grad(x), axis=1)
    if not np.all(np.isfinite(grad_norm)):
        raise GeometryError("non-finite gradient of the defining function")
    ell_norm = np.linalg.norm(bspec.ell(x), axis=1)
    c = _inner(bspec, x)
    min_inner = float(np.min(c))

    if min_inner < -tol:
        i = int(np.argmin(c))
        msg = f"outward reflection: <l,nu> = {min_inner:.4g} at {x[i].tolist()}"
        report = GeometryReport(len(x), float(np.min(grad_norm)), min_inner,
                                float(np.min(ell_norm)), [], [], [], False, [msg])
        raise GeometryError(msg, report=report)

    degenerate = []
    extents = []
    if s is None:
        for xi, ci in zip(x, c):
            if ci <= tol and not any(np.allclose(xi, p) for p in degenerate):
                degenerate.append(xi.copy())
                extents.append(0.0)
    else:
        def cfun(si):
            return float(_inner(bspec, bspec.param(np.atleast_2d(si)))[0])

        if d == 2:
            # local minima on the periodic sample sequence
            left, right = np.roll(c, 1), np.roll(c, -1)
            cand = np.flatnonzero((c <= left) & (c <= right) & (c <= max(100 * tol, 1e-3)))
            h = 1.0 / n_samples
            for i in cand:
                s0 = s[i, 0]
                # bounded search: flat stretches of <l,nu> admit no strict bracket
                res = optimize.minimize_scalar(
                    lambda t: cfun([t % 1.0]), bounds=(s0 - h, s0 + h), method="bounded",
                    options={"xatol": 1e-12})
                smin = res.x % 1.0
                if res.fun <= tol:
                    p = bspec.param(np.array([[smin]]))[0]
                    if any(np.linalg.norm(p - q) < 1e-6 for q in degenerate):
                        continue
                    degenerate.append(p)
                    # extent of the sub-tolerance set along the parameter
                    lo = hi = 0.0
                    step = h / 64
                    while lo < 0.5 and cfun([(smin - lo - step) % 1.0]) <= tol:
                        lo += step
                    while hi < 0.5 and cfun([(smin + hi + step) % 1.0]) <= tol:
                        hi += step
                    extents.append(float(np.max(np.linalg.norm(
                        bspec.param(np.array([[(smin - lo) % 1.0], [(smin + hi) % 1.0]])) - p, axis=1))))
        else:
            order = np.argsort(c)[: min(20, len(c))]
            for i in order:
                if c[i] > max(100 * tol, 1e-3):
                    break
                res = optimize.minimize(lambda t: cfun(np.clip(t, 0, 1)), s[i],
                                        method="Nelder-Mead",
                                        options=dict(xatol=1e-10, fatol=1e-14))
                if res.fun <= tol:
                    p = bspec.param(np.clip(res.x, 0, 1)[None, :])[0]
                    if not any(np.linalg.norm(p - q) < 1e-4 for q in degenerate):
                        degenerate.append(p)
                        extents.append(float("nan"))

    tangential = []
    for p in degenerate:
        if d <= 2:
            tangential.append(False)
        elif bspec.psi_tilde is None:
            tangential.append(None)
            diagnostics.append("no second defining function: transversality not checked")
        else:
            # l is tangential to {psi=0, psi_tilde=0} iff it lies in the span of
            # neither normal, i.e. is orthogonal to both gradients
            P = p[None, :]
            n1 = bspec.psi_grad(P)[0]
            eps = 1e-6
            n2 = np.array([(bspec.psi_tilde(P + eps * e) - bspec.psi_tilde(P - eps * e))[0] / (2 * eps)
                           for e in np.eye(d)])
            lv = bspec.ell(P)[0]
            tangential.append(bool(abs(lv @ n1) <= tol * np.linalg.norm(n1)
                                   and abs(lv @ n2) <= tol * np.linalg.norm(n2)))

    passed = True
    if np.min(grad_norm) <= 0:
        passed = False
        diagnostics.append("gradient of the defining function vanishes on the boundary")
    if np.min(ell_norm) <= 0:
        passed = False
        diagnostics.append("reflection field vanishes on the boundary")
    if any(t is True for t in tangential):
        passed = False
        diagnostics.append("reflection field is tangential to the degenerate set")
    report = GeometryReport(
        n_samples=len(x),
        min_grad_psi=float(np.min(grad_norm)),
        min_inner=min_inner,
        min_abs_ell=float(np.min(ell_norm)),
        degenerate_points=degenerate,
        degenerate_extent=extents,
        tangential_to_degenerate=tangential,
        passed=passed,
        diagnostics=diagnostics,
    )
    if min_inner < -tol:
        i = int(np.argmin(c))
        report.passed = False
        report.diagnostics.append(f"outward reflection: <l,nu> = {min_inner:.4g} at {x[i].tolist()}")
        raise GeometryError(f"outward reflection: <l,nu> = {min_inner:.4g} at {x[i].tolist()}",
                            report=report)
    return report


# ---------------------------------------------------------------------------
# local coordinate check at the degenerate set


@dataclass(frozen=True)
class CoordinateMap:
    """Diffeomorphism ``phi`` with Jacobian ``jac`` (shape ``(n, d, d)``)."""

    phi: Callable
    jac: Callable
    phi_inv: Optional[Callable] = None
    descriptor: str = "custom"

    def inverse(self, x, iters=50):
        if self.phi_inv is not None:
            return self.phi_inv(x)
        z = np.array(x, dtype=float)
        for _ in range(iters):
            r = self.phi(z) - x
            if np.max(np.abs(r)) < 1e-15:
                break
            z = z - np.linalg.solve(self.jac(z), r[:, :, None])[:, :, 0]
        return z


def identity_map(dim):
    return CoordinateMap(lambda z: np.array(z, dtype=float),
                         lambda z: np.broadcast_to(np.eye(dim), (z.shape[0], dim, dim)).copy(),
                         lambda x: np.array(x, dtype=float), "identity")


@dataclass(frozen=True)
class Patch:
    center: np.ndarray
    radius: float


@dataclass
class PKReport:
    residual: float
    roundtrip_error: float
    clause_a: Optional[bool]
    clause_b: Optional[bool]
    clause_a_worst: Optional[float]
    clause_b_worst: Optional[float]
    n_boundary: int
    n_interior: int
    tol: float

    @property
    def passed(self):
        return (self.residual <= self.tol and self.clause_a is not False
                and self.clause_b is not False)

    def to_dict(self):
        return dict(residual=self.residual, roundtrip_error=self.roundtrip_error,
                    clause_a=self.clause_a, clause_b=self.clause_b,
                    clause_a_worst=self.clause_a_worst, clause_b_worst=self.clause_b_worst,
                    n_boundary=self.n_boundary, n_interior=self.n_interior,
                    tol=self.tol, passed=self.passed)


def transformed_coefficients(spec, cmap, z, h=1e-5):
    """``(sigma_tilde, b_tilde)`` at ``z`` for the generator pulled back by ``phi``.

    With ``psi = phi^-1``: ``sigma_tilde = J psi sigma`` and
    ``b_tilde^k = (J psi b)^k + 0.5 tr(a D^2 psi^k)`` evaluated at ``phi(z)``.
    """
    x = cmap.phi(z)
    d = spec.dim
    jpsi = np.linalg.inv(cmap.jac(z))
    sig_t = jpsi @ spec.sigma(x)
    b_t = np.einsum("nij,nj->ni", jpsi, spec.drift(x))
    a = spec.diffusion(x)
    # D^2 psi^k from central differences of J psi(x) = inv(J phi(psi(x)))
    hess = np.zeros((x.shape[0], d, d, d))  # [n, k, i, j]
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jp = np.linalg.inv(cmap.jac(cmap.inverse(x + e)))
        jm = np.linalg.inv(cmap.jac(cmap.inverse(x - e)))
        hess[:, :, :, j] = (jp - jm) / (2 * h)
    b_t = b_t + 0.5 * np.einsum("nij,nkij->nk", a, hess)
    return sig_t, b_t


def check_condition_pk(bspec, cmap, patch, spec=None, n_samples=400, seed=0,
                       tol=1e-8, clause_tol=1e-5):
    """Check ``J_d phi(z) = -l(phi(z))`` on the boundary inside the patch.

    The residual is the max-norm of ``J_d phi + l(phi)`` over sampled
    boundary points.  With a generator, the coordinate-dependence clauses on
    the transformed coefficients are checked by central differences at
    sampled points of ``D`` inside the patch: for ``i < d`` the components
    ``b_tilde^i`` and rows ``sigma_tilde^i`` must not depend on ``z_d``, and
    ``b_tilde^d`` must depend on ``z_d`` only.
    """
    rng = np.random.default_rng(seed)
    d = bspec.dim
    c = np.asarray(patch.center, dtype=float)
    r = float(patch.radius)

    # boundary samples in the patch
    raw = c + r * rng.uniform(-1, 1, size=(4 * n_samples, d))
    xb = bspec.normal_projection(raw)
    xb = xb[np.linalg.norm(xb - c, axis=1) <= r][:n_samples]
    xb = np.vstack([c[None, :], xb])
    # interior samples in the patch
    xi = c + r * rng.uniform(-1, 1, size=(4 * n_samples, d))
    xi = xi[(np.linalg.norm(xi - c, axis=1) <= r) & (bspec.psi(xi) >= 0)][:n_samples]

    zb = cmap.inverse(xb)
    rt = np.max(np.abs(cmap.inverse(cmap.phi(zb)) - zb))
    rt = max(rt, float(np.max(np.abs(cmap.phi(zb) - xb))))
    if not np.isfinite(rt) or rt >= 1e-8:
        raise PreconditionError(f"coordinate map is not invertible on the patch (round trip {rt:.3g})")
    jac = cmap.jac(zb)
    if np.any(np.abs(np.linalg.det(jac)) < 1e-12):
        raise PreconditionError("coordinate map has a singular Jacobian on the patch")
    residual = float(np.max(np.abs(jac[:, :, d - 1] + bspec.ell(cmap.phi(zb)))))

    ca = cb = None
    wa = wb = None
    if spec is not None and len(xi):
        zi = cmap.inverse(xi)
        step = 1e-4
        worst_a = 0.0
        worst_b = 0.0
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            sp, bp = transformed_coefficients(spec, cmap, zi + e)
            sm, bm = transformed_coefficients(spec, cmap, zi - e)
            db = (bp - bm) / (2 * step)
            ds = (sp - sm) / (2 * step)
            if j == d - 1:
                worst_a = max(worst_a, float(np.max(np.abs(db[:, : d - 1]))) if d > 1 else 0.0)
                worst_b = max(worst_b, float(np.max(np.abs(ds[:, : d - 1, :]))) if d > 1 else 0.0)
            else:
                worst_a = max(worst_a, float(np.max(np.abs(db[:, d - 1]))))
        wa, wb = worst_a, worst_b
        ca, cb = worst_a <= clause_tol, worst_b <= clause_tol
    return PKReport(residual, float(rt), ca, cb, wa, wb, len(xb), len(xi), tol)


def range_residual(bank, spec, lam, h, samples):
    """``min_f ||lam f - Af - h||_inf`` over ``bank`` at sample points."""
    pts, _ = as_points(samples, spec.dim)
    hv = eval_field(h, pts)
    best = math.inf
    best_f = None
    for f in bank:
        r = float(np.max(np.abs(lam * f.value_fn(pts) - generator_apply(spec, f, pts) - hv)))
        if r < best:
            best, best_f = r, f
    return best, best_f


def require_positive_lambda(lam):
    if not (isinstance(lam, (int, float)) and np.isfinite(lam) and lam > 0):
        raise ConfigurationError(f"lambda must be a positive number, got {lam!r}")
    return float(lam)
