"""Euler simulation of diffusions, jump diffusions and obliquely reflected diffusions.

All paths of an ensemble advance together as ``(n, d)`` arrays.  Noise is
drawn per block of paths from keyed substreams (see :mod:`mglab.rng`), in
slabs of time steps, so results are bit-identical for a given
``(scenario, seed, dt)`` regardless of slab size.

Reflection pushes a point ``Y`` with ``psi(Y) < 0`` along the flow of the
extended field ``F(y) = l(pi_nu(y))`` until ``psi >= 0``; the push length
``delta`` (the coefficient of ``l``) is the local-time increment.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import jumps as _jumps
from .errors import (ConfigurationError, IntegrabilityError, PreconditionError,
                     ReflectionError, SimulationError)
from .operators import validate_reflection_geometry
from .rng import BLOCK, EnsembleStreams

SLAB_BYTES = 1 << 25


@dataclass(frozen=True)
class PathRecord:
    """One simulated path on its recording grid."""

    times: np.ndarray
    states: np.ndarray  # (R+1, d)
    local_times: np.ndarray  # (R+1, m)
    jump_flag: np.ndarray  # jumps in (t_{j-1}, t_j], 0 at t_0
    contact: np.ndarray  # boundary contact in (t_{j-1}, t_j]
    jumps: list  # (time, amplitude)
    seed: int
    path_id: int
    dt: float
    eps_cut: float | None

    def header(self):
        d = self.states.shape[1]
        m = self.local_times.shape[1]
        return (["t"] + [f"x{i + 1}" for i in range(d)]
                + [f"gamma_{k + 1}" for k in range(m)] + ["jump_flag"])

    def rows(self):
        for j, t in enumerate(self.times):
            yield ([repr(float(t))] + [repr(float(v)) for v in self.states[j]]
                   + [repr(float(v)) for v in self.local_times[j]] + [str(int(self.jump_flag[j]))])

    def to_csv(self, target=None):
        buf = io.StringIO() if target is None else target
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerows(self.rows())
        return buf.getvalue() if target is None else None


@dataclass
class Ensemble:
    """Simulated paths sharing scenario, seed, step and horizon.

    ``states`` has shape ``(n, R+1, d)`` on the recording grid ``times``
    (only ``t=0`` and ``t=T`` in ``"ends"`` mode).  Jump and push logs are
    kept in ``"full"`` mode only; ``jump_total`` is always available.
    """

    times: np.ndarray
    states: np.ndarray
    local_times: np.ndarray
    contact: np.ndarray
    jump_counts: np.ndarray
    jump_total: np.ndarray
    jump_log: dict
    push_log: dict
    meta: dict
    observers: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def n_pieces(self):
        return self.local_times.shape[2]

    @property
    def x0(self):
        return self.states[:, 0]

    @property
    def final(self):
        return self.states[:, -1]

    @property
    def gamma_T(self):
        return self.local_times[:, -1]

    @property
    def dt(self):
        return self.meta["dt"]

    @property
    def horizon(self):
        return self.meta["T"]

    def path(self, i):
        jl = self.jump_log
        sel = jl["path"] == i if len(jl.get("path", ())) else np.zeros(0, bool)
        jumps = [(float(t), a.copy()) for t, a in zip(jl["time"][sel], jl["amplitude"][sel])] \
            if len(sel) else []
        return PathRecord(self.times, self.states[i], self.local_times[i], self.jump_counts[i],
                          self.contact[i], jumps, self.meta["seed"], int(i), self.meta["dt"],
                          self.meta.get("eps_cut"))

    def to_csv(self, target=None, paths=None):
        """Concatenated CSV with a leading ``path_id`` column."""
        buf = io.StringIO() if target is None else target
        w = csv.writer(buf, lineterminator="\n")
        ids = range(self.n_paths) if paths is None else paths
        first = True
        for i in ids:
            rec = self.path(i)
            if first:
                w.writerow(["path_id"] + rec.header())
                first = False
            for row in rec.rows():
                w.writerow([str(i)] + row)
        return buf.getvalue() if target is None else None


# ---------------------------------------------------------------------------
# reflection


def _push_field(bspec, y, p=None):
    if p is None:
        p = bspec.normal_projection(y)
    if bspec.ell_pieces is None:
        return bspec.ell(p)
    k = bspec.piece_index(p)
    out = np.zeros_like(y)
    for kk in np.unique(k):
        sel = k == kk
        out[sel] = bspec.ell_k(max(int(kk), 1), p[sel])
    return out


def _first_crossing(bspec, y0, F, b, lo, hi):
    """Point ``s`` in ``(0, b]`` with ``lo <= psi(y0 + s F) <= hi``.

    ``psi(y0) < 0 <= psi(y0 + b F)`` on entry.  Safeguarded Newton aimed at
    the middle of the window, bisecting whenever a step leaves the bracket.
    """
    a = np.zeros_like(b)
    s = b.copy()
    target = 0.5 * (lo + hi)
    todo = np.arange(len(b))
    for _ in range(100):
        if todo.size == 0:
            break
        ss = s[todo]
        yy = y0[todo] + ss[:, None] * F[todo]
        f = bspec.psi(yy)
        g = np.einsum("ni,ni->n", bspec.psi_grad(yy), F[todo])
        inside = f >= lo
        b[todo[inside]] = ss[inside]
        a[todo[~inside]] = ss[~inside]
        aa, bb = a[todo], b[todo]
        done = (inside & (f <= hi)) | (bb - aa <= 1e-15 * (1.0 + bb))
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = ss + (target - f) / g
        bad = ~((cand > aa) & (cand < bb)) | ~(g > 0)
        cand[bad] = 0.5 * (aa[bad] + bb[bad])
        s[todo] = cand
        todo = todo[~done]
    return b


def reflect(bspec, Y, max_push, push_step, step=None):
    """Push points with ``psi < 0`` back into the closed domain.

    Each point moves along the reflection field at its boundary foot until
    ``psi`` lands in ``[0, tol/2]``.  Newton steps aim at ``psi = tol/4``;
    overshoots past the window are pulled back by a bracketed search.
    Returns ``(X, delta, boundary_points)``.
    """
    Y = np.asarray(Y, dtype=float)
    y = Y.copy()
    delta = np.zeros(y.shape[0])
    hi = 0.5 * bspec.tol
    target = 0.25 * bspec.tol
    # nearly all points need the same number of Newton steps, so the loop
    # runs on the full set with zero steps for finished points
    ps = bspec.psi(y)
    foot = bspec.normal_projection(Y)
    F = _push_field(bspec, y, foot)
    # first step linearizes psi at the foot rather than at the point: exact
    # for flat pieces, and the Newton steps below only mop up curvature
    gf = bspec.psi_grad(foot)
    g = np.einsum("ni,ni->n", gf, F)
    lin = target - np.einsum("ni,ni->n", gf, y - foot)
    for _ in range(10_000):
        need = ps < 0
        if not np.any(need):
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            st = np.where(g > 0, np.minimum(push_step, lin / g), push_step)
        st[~need] = 0.0
        ynew = y + st[:, None] * F
        pn = bspec.psi(ynew)
        far = pn > hi
        far &= need
        if np.any(far):
            s = _first_crossing(bspec, y[far], F[far], st[far].copy(), 0.0, hi)
            ynew[far] = y[far] + s[:, None] * F[far]
            st[far] = s
            pn[far] = bspec.psi(ynew[far])
        y, ps = ynew, pn
        delta += st
        over = delta > max_push
        over &= ps < 0
        if np.any(over):
            bad = int(np.flatnonzero(over)[0])
            raise ReflectionError(
                f"push along the reflection field exceeded max_push={max_push:g} "
                f"from {Y[bad].tolist()}", point=Y[bad].copy(), step=step)
        still = ps < 0
        if np.any(still):
            F[still] = _push_field(bspec, y[still])
        g = np.einsum("ni,ni->n", bspec.psi_grad(y), F)
        lin = target - ps
    else:
        bad = int(np.flatnonzero(ps < 0)[0])
        raise ReflectionError("push iteration limit reached", point=Y[bad].copy(), step=step)
    return y, delta, foot


# ---------------------------------------------------------------------------
# engine


def _initial_states(x0, n_paths, dim):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = x0.reshape(1)
    if x0.ndim == 1:
        if x0.shape[0] != dim:
            raise PreconditionError(f"initial point has {x0.shape[0]} coordinates, expected {dim}")
        return np.tile(x0, (n_paths, 1))
    if x0.shape != (n_paths, dim):
        raise PreconditionError(f"initial states must have shape ({n_paths}, {dim})")
    return x0.copy()


def horizon_steps(T, dt):
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, dt):
        n = int(math.ceil(T / dt - 1e-9))
    return max(n, 1)


def simulate(spec, x0, T, dt, n_paths=1, seed=0, bspec=None, eps_cut=None, record="full",
             record_every=1, observers=(), coarsen=1, bitgen="sfc64", max_push=None,
             push_step=None, scenario="custom", slab_bytes=SLAB_BYTES):
    """Simulate an ensemble.  See the wrappers below for the public entry points."""
    if not (dt > 0 and np.isfinite(dt)):
        raise ConfigurationError(f"time step must be positive, got {dt!r}")
    if not (T > 0 and np.isfinite(T)):
        raise ConfigurationError(f"horizon must be positive, got {T!r}")
    if int(n_paths) < 1:
        raise ConfigurationError("n_paths must be at least 1")
    if record not in ("full", "ends"):
        raise ConfigurationError(f"unknown record mode {record!r}")
    n = int(n_paths)
    d = spec.dim
    n_steps = horizon_steps(T, dt)
    T = n_steps * dt
    s_rec = int(record_every)
    if record == "full" and (s_rec < 1 or n_steps % s_rec):
        raise ConfigurationError(f"record_every={record_every} must divide the {n_steps} steps")
    coarsen = int(coarsen)
    if coarsen < 1:
        raise ConfigurationError("coarsen must be a positive integer")

    X = _initial_states(x0, n, d)
    # pad to whole noise blocks so each step's normals are a free view
    n_pad = -(-n // BLOCK) * BLOCK
    n_blocks = n_pad // BLOCK
    m = bspec.n_pieces if bspec is not None else 0
    if bspec is not None:
        if np.any(bspec.psi(X) < -bspec.tol):
            raise PreconditionError("initial state outside the closed domain")
        max_push = bspec.diam if max_push is None else float(max_push)
        push_step = 0.25 * bspec.diam if push_step is None else float(push_step)

    sig0 = spec.sigma(X[:1])
    r = sig0.shape[2]
    sig_const = getattr(spec.sigma, "matrix", None)
    drift_const = getattr(spec.drift, "vector", None)
    sq = math.sqrt(dt)
    sig_diag = sig_scaled_T = None
    if sig_const is not None:
        sig_const = np.asarray(sig_const, dtype=float)
        sig_scaled_T = np.ascontiguousarray((sq * sig_const).T)
        # tiny matmuls are slow; broadcast instead when the matrix allows it
        if r == 1:
            sig_diag = sq * sig_const[:, 0]
        elif r == d and np.count_nonzero(sig_const - np.diag(np.diag(sig_const))) == 0:
            sig_diag = sq * np.diag(sig_const)

    jspec = spec.jump
    rate = 0.0
    comp_const = None
    variance_loss = None
    if jspec is not None:
        if coarsen != 1:
            raise ConfigurationError("coupled coarse steps are not supported with jumps")
        if eps_cut is None:
            eps_cut = 0.01
        if not 0 < eps_cut <= jspec.cutoff_unit:
            raise ConfigurationError("eps_cut must lie in (0, cutoff_unit]")
        rate = jspec.measure.mass(eps_cut)
        if not np.isfinite(rate):
            raise ConfigurationError(f"restricted jump mass m(|z| >= {eps_cut:g}) is infinite")
        if jspec.state_free:
            comp_const = _jumps.compensator(jspec, X[:1], eps_cut)[0]
        variance_loss = _jumps.variance_loss_bound(jspec, eps_cut)

    streams = EnsembleStreams(seed, n, bitgen)

    if record == "full":
        R = n_steps // s_rec
        times = np.arange(R + 1) * (s_rec * dt)
    else:
        R = 1
        times = np.array([0.0, T])
    states = np.empty((n, R + 1, d))
    states[:, 0] = X
    X = np.concatenate([X, np.repeat(X[-1:], n_pad - n, axis=0)])
    gam_rec = np.zeros((n, R + 1, m))
    contact = np.zeros((n, R + 1), dtype=bool)
    jcount = np.zeros((n, R + 1), dtype=np.int64)
    jump_total = np.zeros(n_pad, dtype=np.int64)
    gamma = np.zeros((n_pad, m))
    contact_acc = np.zeros(n_pad, dtype=bool)
    jump_acc = np.zeros(n_pad, dtype=np.int64)
    jlog = {"path": [], "step": [], "time": [], "amplitude": []}
    plog = {"path": [], "step": [], "pre": [], "foot": [], "delta": [], "piece": []}
    full = record == "full"

    for ob in observers:
        ob.start(n=n, d=d, m=m, dt=dt, T=T, n_steps=n_steps, X0=X[:n].copy())

    step = 0
    slab = max(1, int(slab_bytes // (8 * n_pad * r * coarsen)))
    while step < n_steps:
        S = min(slab, n_steps - step)
        Z = streams.normals_blocked(S * coarsen, r)
        if coarsen > 1:
            Z = Z.reshape(n_blocks, S, coarsen, BLOCK, r).sum(axis=2) / math.sqrt(coarsen)
        prescaled = sig_diag is not None and sig_diag.shape[0] == r
        if prescaled:
            Z *= sig_diag
        if jspec is not None:
            counts = streams.poisson(S, rate * dt)
            js, jp, jz = streams.marks(counts, lambda g, k: jspec.measure.sample(g, k, eps_cut))
            bounds = np.searchsorted(js, np.arange(S + 1))
        for i in range(S):
            step += 1
            t = step * dt
            if prescaled:
                noise = None
            elif sig_diag is not None:
                noise = (Z[:, i] * sig_diag).reshape(n_pad, d)
            else:
                xi = Z[:, i].reshape(n_pad, r)
                if sig_const is not None:
                    noise = xi @ sig_scaled_T
                else:
                    noise = sq * np.einsum("nij,nj->ni", spec.sigma(X), xi)
            if noise is None:
                # add in block layout: avoids copying the strided slice first
                Y = np.add(X.reshape(n_blocks, BLOCK, d), Z[:, i]).reshape(n_pad, d)
                if drift_const is not None:
                    if np.any(drift_const):
                        Y += dt * drift_const
                else:
                    Y += dt * spec.drift(X)
            elif drift_const is not None:
                Y = X + noise
                if np.any(drift_const):
                    Y += dt * drift_const
            else:
                Y = X + dt * spec.drift(X) + noise
            if jspec is not None:
                Y -= dt * (comp_const if comp_const is not None
                           else _jumps.compensator(jspec, X, eps_cut))
                lo, hi = bounds[i], bounds[i + 1]
                if hi > lo:
                    pj, zj = jp[lo:hi], jz[lo:hi]
                    # rank of each jump among the jumps of its path in this step
                    first = np.r_[True, pj[1:] != pj[:-1]]
                    start = np.maximum.accumulate(np.where(first, np.arange(len(pj)), 0))
                    rank = np.arange(len(pj)) - start
                    for rk in range(int(rank.max()) + 1):
                        sel = rank == rk
                        pp = pj[sel]
                        zsel = zj[sel]
                        if jspec.state_free:
                            amp = jspec.eta(Y[:1], zsel)[0]
                        else:
                            ar = np.arange(len(pp))
                            amp = jspec.eta(Y[pp], zsel)[ar, ar]
                        Y[pp] += amp
                        if full:
                            jlog["path"].append(pp)
                            jlog["step"].append(np.full(len(pp), step))
                            jlog["time"].append(np.full(len(pp), t))
                            jlog["amplitude"].append(amp)
                    c = counts[i]
                    jump_acc += c
                    jump_total += c
            dgam = None
            if bspec is not None:
                ps = bspec.psi(Y)
                near = np.flatnonzero(ps <= bspec.tol)
                out = near[ps[near] < 0]
                contact_acc[near] = True
                if out.size:
                    Yo = Y[out]
                    newp, delta, foot = reflect(bspec, Yo, max_push, push_step, step=step)
                    if np.any(bspec.psi(newp) < -bspec.tol):
                        raise SimulationError("reflected state left the closed domain", step=step)
                    piece = bspec.piece_index(foot)
                    if np.any(piece == 0):
                        bad = out[piece == 0][0]
                        raise ReflectionError("boundary point outside every boundary piece",
                                              point=Y[bad].copy(), step=step)
                    Y[out] = newp
                    gamma.ravel()[out * m + piece - 1] += delta
                    real = out < n
                    if not np.all(real):
                        out, Yo, foot, delta, piece = (out[real], Yo[real], foot[real],
                                                       delta[real], piece[real])
                    dgam = (out, piece - 1, delta)
                    if full:
                        plog["path"].append(out)
                        plog["step"].append(np.full(out.size, step))
                        plog["pre"].append(Yo)
                        plog["foot"].append(foot)
                        plog["delta"].append(delta)
                        plog["piece"].append(piece)
            X = Y
            if (step % 16 == 0 or step == n_steps) and not np.isfinite(np.sum(X)):
                raise SimulationError("non-finite state (coefficient blow-up)", step=step)
            for ob in observers:
                ob.step(step, t, X[:n], dgam)
            if full and step % s_rec == 0:
                j = step // s_rec
                states[:, j] = X[:n]
                gam_rec[:, j] = gamma[:n]
                contact[:, j] = contact_acc[:n]
                jcount[:, j] = jump_acc[:n]
                contact_acc[:] = False
                jump_acc[:] = 0
    if not full:
        states[:, 1] = X[:n]
        gam_rec[:, 1] = gamma[:n]
        contact[:, 1] = contact_acc[:n]
        jcount[:, 1] = jump_acc[:n]

    def _cat(log, key, width=None):
        if log[key]:
            return np.concatenate(log[key])
        return np.empty((0, width)) if width else np.empty(0)

    jump_log = {k: _cat(jlog, k, d if k == "amplitude" else None) for k in jlog}
    push_log = {k: _cat(plog, k, d if k in ("pre", "foot") else None) for k in plog}
    for k in ("path", "step", "piece"):
        if k in push_log:
            push_log[k] = push_log[k].astype(int)
    for k in ("path", "step"):
        jump_log[k] = jump_log[k].astype(int)

    meta = {
        "scenario": scenario,
        "seed": int(seed),
        "dt": float(dt),
        "T": float(T),
        "n_steps": n_steps,
        "record": record,
        "record_every": s_rec,
        "reflected": bspec is not None,
        "smooth": bool(getattr(spec, "smooth", True)) and bspec is None,
        "pieces": [p[0] for p in bspec.pieces] if bspec is not None else [],
        "eps_cut": eps_cut,
        "jump_rate": rate,
        "compensator_drift": None if comp_const is None else (-comp_const).tolist(),
        "variance_loss_bound": variance_loss,
        "coarsen": coarsen,
        "bitgen": bitgen,
        "noise_key": (int(seed), n, bitgen, round(dt / coarsen, 15)),
    }
    ens = Ensemble(times, states, gam_rec, contact, jcount, jump_total[:n], jump_log, push_log, meta)
    for ob in observers:
        ens.observers[ob.name] = ob.finish(X[:n])
    return ens


def simulate_diffusion(spec, x0, T, dt, seed=0, n_paths=1, **kw):
    """Euler-Maruyama ensemble of a diffusion without jumps or boundary."""
    if spec.jump is not None:
        raise PreconditionError("generator has a jump part; use simulate_jump_diffusion")
    return simulate(spec, x0, T, dt, n_paths=n_paths, seed=seed, **kw)


def simulate_jump_diffusion(spec, x0, T, dt, eps_cut=0.01, seed=0, n_paths=1, **kw):
    """Euler step plus a truncated marked Poisson jump part.

    Marks with ``|z| >= eps_cut`` arrive at rate ``m(|z| >= eps_cut)``;
    smaller marks are dropped and the compensator over
    ``eps_cut <= |z| < 1`` is added as drift.  The variance lost by the
    truncation is bounded by ``int_{|z|<eps_cut} rho^2 dm``, reported in
    ``meta["variance_loss_bound"]``.
    """
    if spec.jump is not None:
        rep = _jumps.validate_jump_conditions(spec.jump, dim=spec.dim)
        if not rep.integrable:
            raise IntegrabilityError("; ".join(rep.diagnostics))
        if not rep.passed:
            raise PreconditionError("jump conditions fail: " + "; ".join(rep.diagnostics))
    return simulate(spec, x0, T, dt, n_paths=n_paths, seed=seed, eps_cut=eps_cut, **kw)


def simulate_reflected(spec, bspec, x0, T, dt, seed=0, n_paths=1, validate=True, **kw):
    """Euler step followed by a push along the reflection field when outside."""
    if validate:
        validate_reflection_geometry(bspec, n_samples=512)
    return simulate(spec, x0, T, dt, n_paths=n_paths, seed=seed, bspec=bspec, **kw)


def exit_times(states, times, x0, eps):
    """Vectorized discrete exit time ``eps ^ min{t_i > 0 : |X(t_i) - x0| >= eps}``.

    ``states`` is ``(n, R+1, d)``.  Returns ``(tau, index, exited)``; when
    the cap applies, ``index`` is the first grid index with ``t >= eps``.
    """
    x0 = np.asarray(x0, dtype=float)
    dist = np.linalg.norm(states - x0.reshape(1, 1, -1) if x0.ndim == 1 else
                          states - x0[:, None, :], axis=2)
    cand = (dist >= eps) & (times[None, :] > 0) & (times[None, :] <= eps + 1e-12)
    exited = cand.any(axis=1)
    cap_idx = int(np.searchsorted(times, eps - 1e-12))
    if cap_idx >= len(times):
        raise PreconditionError("recorded horizon shorter than the exit cap")
    idx = np.where(exited, np.argmax(cand, axis=1), cap_idx)
    tau = np.where(exited, times[idx], eps)
    return tau, idx, exited


def first_exit_time(path, x0, eps):
    """``(tau, index, branch)`` for a single :class:`PathRecord`."""
    tau, idx, ex = exit_times(path.states[None], path.times, x0, eps)
    return float(tau[0]), int(idx[0]), "exit" if ex[0] else "cap"
