"""Levy measures, jump amplitudes and the compensated jump integral.

Marks are scalar.  Small-jump integrals are summed over dyadic shells
``[top*2**-(j+1), top*2**-j)`` and the remainder below the last shell is
extrapolated geometrically from the last two shell sums; a shell ratio that
does not decay signals divergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DataError, IntegrabilityError

_GL_ORDER = 12
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)

CORE_CUTOFF = 2.0**-10
N_SHELLS = 48


class PowerLawMeasure:
    """``m(dz) = scale * |z|**(-1-alpha) dz`` on ``0 < |z| <= zmax``."""

    def __init__(self, alpha, scale=1.0, zmax=1.0, symmetric=True):
        if alpha == 0:
            raise ConfigurationError("power-law measure needs alpha != 0")
        if scale <= 0 or zmax <= 0:
            raise ConfigurationError("power-law measure needs scale > 0 and zmax > 0")
        self.alpha = float(alpha)
        self.scale = float(scale)
        self.zmax = float(zmax)
        self.symmetric = bool(symmetric)

    @property
    def support_radius(self):
        return self.zmax

    def describe(self):
        side = "symmetric" if self.symmetric else "positive"
        return f"power_law(alpha={self.alpha:g}, scale={self.scale:g}, zmax={self.zmax:g}, {side})"

    def density(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        with np.errstate(divide="ignore"):
            d = self.scale * a ** (-1.0 - self.alpha)
        inside = (a > 0) & (a <= self.zmax)
        if not self.symmetric:
            inside &= z > 0
        return np.where(inside, d, 0.0)

    def quad(self, lo, hi=math.inf):
        """Nodes and weights for the measure restricted to ``lo <= |z| < hi``."""
        if lo <= 0:
            raise ConfigurationError("quadrature over a neighbourhood of the origin is not finite")
        hi = min(hi, self.zmax * (1 + 1e-15))
        if hi <= lo:
            return np.empty(0), np.empty(0)
        ulo, uhi = math.log(lo), math.log(hi)
        n_panels = max(1, math.ceil((uhi - ulo) / math.log(2.0)))
        edges = np.linspace(ulo, uhi, n_panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        u = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
        wu = (half[:, None] * _GL_W[None, :]).ravel()
        z = np.exp(u)
        w = wu * self.scale * z ** (-self.alpha)  # density(z) * dz/du
        if self.symmetric:
            return np.concatenate([z, -z]), np.concatenate([w, w])
        return z, w

    def mass(self, lo, hi=math.inf):
        if lo <= 0:
            return math.inf if self.alpha > 0 else self.mass(1e-300, hi)
        hi = min(hi, self.zmax)
        if hi <= lo:
            return 0.0
        m = self.scale * (lo ** -self.alpha - hi ** -self.alpha) / self.alpha
        return 2 * m if self.symmetric else m

    def sample(self, rng, n, lo, hi=math.inf):
        hi = min(hi, self.zmax)
        u = rng.random(n)
        a = self.alpha
        z = (lo ** -a - u * (lo ** -a - hi ** -a)) ** (-1.0 / a)
        if self.symmetric:
            z = np.where(rng.random(n) < 0.5, -z, z)
        return z


class AtomicMeasure:
    """Finite measure ``sum_i w_i * delta_{z_i}``."""

    def __init__(self, atoms):
        atoms = [(float(z), float(w)) for z, w in atoms]
        if not atoms:
            raise ConfigurationError("atomic measure needs at least one atom")
        if any(z == 0 for z, _ in atoms):
            raise ConfigurationError("atoms must sit away from the origin")
        if any(w < 0 for _, w in atoms):
            raise ConfigurationError("atom weights must be nonnegative")
        self.z = np.array([a[0] for a in atoms])
        self.w = np.array([a[1] for a in atoms])

    @property
    def support_radius(self):
        return float(np.max(np.abs(self.z)))

    def describe(self):
        parts = ", ".join(f"{w:g}@{z:g}" for z, w in zip(self.z, self.w))
        return f"atoms({parts})"

    def density(self, z):
        return np.zeros_like(np.asarray(z, dtype=float))

    def _mask(self, lo, hi):
        a = np.abs(self.z)
        return (a >= lo) & (a < hi)

    def quad(self, lo, hi=math.inf):
        m = self._mask(lo, hi)
        return self.z[m], self.w[m]

    def mass(self, lo, hi=math.inf):
        return float(self.w[self._mask(lo, hi)].sum())

    def sample(self, rng, n, lo, hi=math.inf):
        m = self._mask(lo, hi)
        z, w = self.z[m], self.w[m]
        return z[rng.choice(len(z), size=n, p=w / w.sum())]


def eta_scaled(direction):
    """Amplitude ``eta(x, z) = z * direction``."""
    v = np.atleast_1d(np.asarray(direction, dtype=float))

    def eta(x, z):
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(z)[None, :, None] * v, (x.shape[0], len(z), len(v))).copy()

    eta.state_free = True
    eta.describe = f"scaled({v.tolist()})"
    return eta


def eta_constant(value):
    """Amplitude ``eta(x, z) = value`` for every mark."""
    v = np.atleast_1d(np.asarray(value, dtype=float))

    def eta(x, z):
        x = np.atleast_2d(x)
        return np.broadcast_to(v, (x.shape[0], len(z), len(v))).copy()

    eta.state_free = True
    eta.describe = f"constant({v.tolist()})"
    return eta


def rho_abs(z):
    return np.abs(np.asarray(z, dtype=float))


@dataclass(frozen=True)
class JumpSpec:
    """Jump part: amplitude ``eta``, Levy measure, and the growth bound ``rho``.

    ``eta(x, z)`` takes points ``(n, d)`` and marks ``(k,)`` and returns
    ``(n, k, d)``.  The compensator acts on marks with ``|z| < cutoff_unit``.
    """

    eta: Callable
    measure: object
    rho: Callable = rho_abs
    cutoff_unit: float = 1.0

    @property
    def state_free(self):
        return bool(getattr(self.eta, "state_free", False))

    def describe(self):
        return f"eta={getattr(self.eta, 'describe', 'custom')}, m={self.measure.describe()}"


def _shell_nodes(measure, top, n_shells):
    for j in range(n_shells):
        yield measure.quad(top * 2.0 ** -(j + 1), top * 2.0 ** -j)


def _extrapolate_tail(sums):
    """Geometric tail of a positive shell series.  Returns (tail, ratio)."""
    s = np.asarray(sums, dtype=float)
    nz = np.flatnonzero(np.abs(s) > 0)
    if len(nz) == 0 or nz[-1] < len(s) - 1:
        # shells vanish near the origin: nothing left to extrapolate
        return 0.0, 0.0
    if len(nz) < 2:
        return math.inf, math.inf
    r = s[-1] / s[-2]
    if not np.isfinite(r) or r >= 1.0 - 1e-6:
        return math.inf, float(r)
    return float(s[-1] * r / (1.0 - r)), float(r)


def small_jump_integral(jspec, fn, top, n_shells=N_SHELLS):
    """``int_{0<|z|<top} fn(z) m(dz)`` for a nonnegative mark function.

    Returns ``(value, tail_estimate, ratio)``; ``value`` includes the tail.
    """
    sums = []
    for z, w in _shell_nodes(jspec.measure, top, n_shells):
        vals = fn(z) * w if len(z) else np.zeros(0)
        if not np.all(np.isfinite(vals)):
            raise DataError("non-finite Levy density or mark function evaluation")
        sums.append(float(vals.sum()))
    tail, ratio = _extrapolate_tail(sums)
    return float(np.sum(sums)) + tail, tail, ratio


@dataclass
class JumpConditionReport:
    growth_ok: bool
    growth_worst_ratio: float
    rho_vanishes: bool
    small_integral: float
    large_mass: float
    truncation_error: float
    shell_ratio: float
    integrable: bool
    diagnostics: list = field(default_factory=list)

    @property
    def integral(self):
        return self.small_integral + self.large_mass

    @property
    def passed(self):
        return self.growth_ok and self.rho_vanishes and self.integrable

    def to_dict(self):
        return {
            "growth_ok": self.growth_ok,
            "growth_worst_ratio": self.growth_worst_ratio,
            "rho_vanishes": self.rho_vanishes,
            "small_integral": self.small_integral,
            "large_mass": self.large_mass,
            "integral": self.integral,
            "truncation_error": self.truncation_error,
            "shell_ratio": self.shell_ratio,
            "integrable": self.integrable,
            "pass": self.passed,
            "diagnostics": list(self.diagnostics),
        }


def validate_jump_conditions(jspec, dim=1, x_samples=None, n_samples=200, seed=0,
                             n_shells=N_SHELLS):
    """Check the growth bound on ``eta`` and integrability of ``rho^2`` near 0."""
    rng = np.random.default_rng(seed)
    if x_samples is None:
        x_samples = 3.0 * rng.standard_normal((n_samples, dim))
    x_samples = np.atleast_2d(np.asarray(x_samples, dtype=float))
    diagnostics = []

    u = jspec.cutoff_unit
    zs = [z for z, _ in _shell_nodes(jspec.measure, u, min(n_shells, 30)) if len(z)]
    z_small = np.concatenate(zs) if zs else np.empty(0)
    worst = 0.0
    if len(z_small):
        amp = np.linalg.norm(jspec.eta(x_samples, z_small), axis=-1)
        bound = jspec.rho(z_small)[None, :] * (1.0 + np.linalg.norm(x_samples, axis=1))[:, None]
        if not (np.all(np.isfinite(amp)) and np.all(np.isfinite(bound))):
            raise DataError("non-finite jump amplitude or rho evaluation")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(amp > 0, amp / bound, 0.0)
        worst = float(np.max(ratio))
    growth_ok = worst <= 1.0 + 1e-12
    if not growth_ok:
        diagnostics.append(f"|eta| exceeds rho(z)(1+|x|) by factor {worst:.4g}")

    tiny = u * 2.0 ** -n_shells
    rho_tiny = float(np.max(jspec.rho(np.array([tiny, -tiny]))))
    rho_vanishes = rho_tiny <= 1e-6 * max(1.0, float(np.max(jspec.rho(np.array([u, -u])))))
    if not rho_vanishes:
        diagnostics.append(f"rho does not vanish at the origin (rho({tiny:.2e})={rho_tiny:.3g})")

    small, tail, sratio = small_jump_integral(jspec, lambda z: jspec.rho(z) ** 2, u, n_shells)
    large = jspec.measure.mass(u)
    integrable = bool(np.isfinite(small) and np.isfinite(large))
    if not np.isfinite(small):
        diagnostics.append(
            "small-jump integral of rho^2 diverges: dyadic shell contributions do not "
            f"decay (ratio {sratio:.6g})")
    if not np.isfinite(large):
        diagnostics.append("mass of {|z| >= 1} is infinite")
    return JumpConditionReport(
        growth_ok=growth_ok,
        growth_worst_ratio=worst,
        rho_vanishes=rho_vanishes,
        small_integral=small,
        large_mass=large,
        truncation_error=abs(tail) if np.isfinite(tail) else math.inf,
        shell_ratio=sratio,
        integrable=integrable,
        diagnostics=diagnostics,
    )


def compensator(jspec, x, eps_cut):
    """``int_{eps_cut <= |z| < 1} eta(x, z) m(dz)``, shape ``(n, d)``."""
    x = np.atleast_2d(x)
    z, w = jspec.measure.quad(eps_cut, jspec.cutoff_unit)
    if len(z) == 0:
        return np.zeros_like(x)
    return np.einsum("nkd,k->nd", jspec.eta(x, z), w)


def variance_loss_bound(jspec, eps_cut):
    """``int_{|z| < eps_cut} rho(z)^2 m(dz)``: the part discarded by truncation."""
    value, _, _ = small_jump_integral(jspec, lambda z: jspec.rho(z) ** 2, eps_cut)
    return value


def jump_part(jspec, f, x, core_cutoff=CORE_CUTOFF, n_shells=N_SHELLS):
    """Compensated jump integral ``Jf(x)`` with an error bound per point.

    Marks with ``|z| >= core_cutoff`` are integrated by quadrature of
    ``f(x+eta) - f(x) - grad f(x) eta 1{|z|<1}``; the core below uses the
    second-order Taylor term ``0.5 tr(D^2 f(x) Sigma_core(x))``.  The error
    bound is ``0.5 * omega * tr(Sigma_core)`` with ``omega`` the sampled
    variation of the Hessian over the core jump radius, plus the geometric
    extrapolation tail.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    fx = f.value(x)
    out = np.zeros(n)

    def _accumulate(z, w, compensate):
        if len(z) == 0:
            return 0.0
        amp = jspec.eta(x, z)  # (n, k, d)
        fy = f.value((x[:, None, :] + amp).reshape(-1, d)).reshape(n, len(z))
        integrand = fy - fx[:, None]
        if compensate:
            integrand = integrand - np.einsum("nd,nkd->nk", f.gradient(x), amp)
        return integrand @ w

    u = jspec.cutoff_unit
    big_z, big_w = jspec.measure.quad(u)
    if not np.isfinite(jspec.measure.mass(u)):
        raise IntegrabilityError("jump measure has infinite mass on {|z| >= 1}")
    out += _accumulate(big_z, big_w, False)
    q = min(core_cutoff, u)
    mid_z, mid_w = jspec.measure.quad(q, u)
    out += _accumulate(mid_z, mid_w, True)

    sigma_core = np.zeros((n, d, d))
    shell_tr = []
    zmax_core = 0.0
    for z, w in _shell_nodes(jspec.measure, q, n_shells):
        if len(z) == 0:
            shell_tr.append(0.0)
            continue
        amp = jspec.eta(x, z)
        s = np.einsum("nki,nkj,k->nij", amp, amp, w)
        sigma_core += s
        shell_tr.append(float(np.max(np.trace(s, axis1=1, axis2=2))))
        zmax_core = max(zmax_core, float(np.max(np.linalg.norm(amp, axis=-1))))
    tail, ratio = _extrapolate_tail(shell_tr)
    if not np.isfinite(tail):
        raise IntegrabilityError(
            "jump integral diverges near the origin: rho^2 small-jump integrability fails "
            f"(shell ratio {ratio:.6g})")
    tr_core = np.trace(sigma_core, axis1=1, axis2=2)
    if tail > 0 and np.all(tr_core > 0):
        sigma_core *= (1.0 + tail / np.max(tr_core))
    hess = f.hessian(x)
    out += 0.5 * np.einsum("nij,nij->n", hess, sigma_core)

    omega = np.zeros(n)
    if zmax_core > 0:
        for i in range(d):
            for sgn in (-1.0, 1.0):
                shift = np.zeros(d)
                shift[i] = sgn * zmax_core
                dh = f.hessian(x + shift) - hess
                omega = np.maximum(omega, np.linalg.norm(dh, ord=2, axis=(1, 2)))
    err = 0.5 * omega * np.trace(sigma_core, axis1=1, axis2=2)
    err += 0.5 * np.linalg.norm(hess, ord=2, axis=(1, 2)) * tail
    return out, err
