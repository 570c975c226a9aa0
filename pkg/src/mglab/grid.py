"""Monotone finite differences for ``lam u - A u = h`` with oblique boundary rows.

Node classes: interior (``psi > tol``), boundary piece ``k >= 1`` (``psi <=
tol`` with an interior axis neighbour), truncated (box edge inside the
domain) and exterior (masked).  Generator rows use central second
differences, Kushner-type cross differences and upwind drift; jump rows use
nonnegative multilinear stencils.  A boundary row reads
``(u(x_b) - u(y)) / delta = 0`` where ``y`` is reached from ``x_b`` by
following the reflection field for parameter length ``delta``; it is the
one-sided difference of ``-B_k u``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import jumps as _jumps
from .errors import (AssemblyError, ExtrapolationError, PreconditionError, ResolutionError,
                     SolverError)
from .operators import TestFunction, eval_field

INTERIOR = 0
EXTERIOR = -1
TRUNCATED = -2


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    @property
    def dim(self):
        return len(self.lo)


@dataclass
class Grid:
    lo: np.ndarray
    dx: np.ndarray
    shape: tuple
    kind: np.ndarray  # flat node classes
    coords: np.ndarray  # (N, d)
    bspec: object = None

    @property
    def dim(self):
        return len(self.shape)

    @property
    def hi(self):
        return self.lo + self.dx * (np.array(self.shape) - 1)

    @property
    def n_nodes(self):
        return self.coords.shape[0]

    @property
    def active(self):
        return self.kind != EXTERIOR

    @property
    def h(self):
        return float(np.max(self.dx))

    def counts(self):
        k = self.kind
        out = {"interior": int(np.sum(k == INTERIOR)), "boundary": int(np.sum(k >= 1)),
               "truncated": int(np.sum(k == TRUNCATED)), "exterior": int(np.sum(k == EXTERIOR))}
        if self.bspec is not None:
            for j, (name, _) in enumerate(self.bspec.pieces, start=1):
                out[f"boundary_{name}"] = int(np.sum(k == j))
        return out

    def flat(self, multi):
        return np.ravel_multi_index(tuple(np.asarray(multi).T), self.shape)

    def multi(self, flat):
        return np.stack(np.unravel_index(flat, self.shape), axis=1)

    def stencil(self, y, clamp=True):
        """Multilinear corners and weights for points ``y``.

        Returns ``(corners (n, 2^d), weights (n, 2^d), clamped (n,))``.
        Points outside the box are moved to the nearest box point when
        ``clamp`` is set.
        """
        y = np.atleast_2d(y)
        hi = self.hi
        clamped = np.any((y < self.lo - 1e-12 * self.dx) | (y > hi + 1e-12 * self.dx), axis=1)
        if clamp:
            y = np.clip(y, self.lo, hi)
        s = (y - self.lo) / self.dx
        i0 = np.clip(np.floor(s).astype(int), 0, np.array(self.shape) - 2)
        t = s - i0
        d = self.dim
        corners = np.empty((y.shape[0], 2**d), dtype=int)
        weights = np.empty((y.shape[0], 2**d))
        for c, bits in enumerate(itertools.product((0, 1), repeat=d)):
            bits = np.array(bits)
            corners[:, c] = self.flat(i0 + bits)
            weights[:, c] = np.prod(np.where(bits == 1, t, 1.0 - t), axis=1)
        return corners, weights, clamped


def build_grid(domain, dx):
    """Classify the nodes of a uniform grid over ``domain``.

    ``domain`` is a :class:`BoundarySpec` (its ``bbox`` is the grid box) or
    a :class:`Box`.
    """
    bspec = None if isinstance(domain, Box) else domain
    if bspec is not None:
        if bspec.bbox is None:
            raise PreconditionError("boundary spec has no bounding box")
        lo, hi = (np.asarray(v, dtype=float) for v in bspec.bbox)
    else:
        lo, hi = np.asarray(domain.lo, dtype=float), np.asarray(domain.hi, dtype=float)
    d = lo.shape[0]
    dxv = np.broadcast_to(np.asarray(dx, dtype=float), (d,)).copy()
    if np.any(dxv <= 0):
        raise ResolutionError("grid spacing must be positive")
    n_cells = np.round((hi - lo) / dxv).astype(int)
    if np.any(np.abs(n_cells * dxv - (hi - lo)) > 1e-9 * np.maximum(1.0, hi - lo)):
        raise ResolutionError("box extent is not a whole number of cells")
    shape = tuple(int(n) + 1 for n in n_cells)
    if min(shape) < 4:
        raise ResolutionError("resolution must give at least 4 nodes per axis")
    axes = [lo[i] + dxv[i] * np.arange(shape[i]) for i in range(d)]
    coords = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    idx = np.stack(np.unravel_index(np.arange(coords.shape[0]), shape), axis=1)
    on_edge = np.any((idx == 0) | (idx == np.array(shape) - 1), axis=1)
    if bspec is None:
        kind = np.where(on_edge, TRUNCATED, INTERIOR)
        return Grid(lo, dxv, shape, kind, coords, None)
    psi = bspec.psi(coords)
    inside = psi > bspec.tol
    kind = np.full(coords.shape[0], EXTERIOR)
    kind[inside & ~on_edge] = INTERIOR
    kind[inside & on_edge] = TRUNCATED
    if not np.any(kind == INTERIOR):
        raise ResolutionError("no interior nodes: domain misses the box or is thinner than one cell")
    ins = inside.reshape(shape)
    nb = np.zeros(shape, dtype=bool)
    for ax in range(d):
        sl_a = [slice(None)] * d
        sl_b = [slice(None)] * d
        sl_a[ax], sl_b[ax] = slice(1, None), slice(None, -1)
        nb[tuple(sl_a)] |= ins[tuple(sl_b)]
        nb[tuple(sl_b)] |= ins[tuple(sl_a)]
    bnd = np.flatnonzero(~inside & nb.ravel())
    if bnd.size:
        foot = bspec.normal_projection(coords[bnd])
        piece = bspec.piece_index(foot)
        if np.any(piece == 0):
            raise ResolutionError("boundary node whose projection lies on no boundary piece")
        kind[bnd] = piece
    return Grid(lo, dxv, shape, kind, coords, bspec)


@dataclass
class GridFunction:
    """Node values with multilinear interpolation.

    Interpolation renormalizes over active corners; points up to one cell
    outside the grid box take the value at the nearest box point, farther
    points raise :class:`ExtrapolationError`.
    """

    grid: Grid
    values: np.ndarray
    descriptor: str = "u"
    certified: bool = True
    residual: float = 0.0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values[self.grid.active])):
            raise PreconditionError("grid function has non-finite values at active nodes")

    def value(self, x):
        g = self.grid
        y = np.atleast_2d(np.asarray(x, dtype=float))
        if g.dim == 1 and y.shape[1] != 1:
            y = y.reshape(-1, 1)
        far = np.any((y < g.lo - g.dx * (1 + 1e-9)) | (y > g.hi + g.dx * (1 + 1e-9)), axis=1)
        if np.any(far):
            raise ExtrapolationError(f"point {y[far][0].tolist()} lies outside the grid hull")
        corners, w, _ = g.stencil(y)
        act = g.active[corners]
        w = np.where(act, w, 0.0)
        tot = w.sum(axis=1)
        if np.any(tot <= 1e-12):
            bad = y[tot <= 1e-12][0]
            raise ExtrapolationError(f"point {bad.tolist()} lies in a cell with no active node")
        vals = np.where(act, self.values[corners], 0.0)
        return np.sum(w * vals, axis=1) / tot

    __call__ = value

    def max_abs(self):
        return float(np.max(np.abs(self.values[self.grid.active])))

    def to_csv(self, target=None):
        import csv
        import io
        buf = io.StringIO() if target is None else target
        w = csv.writer(buf, lineterminator="\n")
        d = self.grid.dim
        w.writerow([f"i{k + 1}" for k in range(d)] + [f"x{k + 1}" for k in range(d)] + ["u"])
        act = np.flatnonzero(self.grid.active)
        multi = self.grid.multi(act)
        for j, node in enumerate(act):
            w.writerow([str(int(v)) for v in multi[j]]
                       + [repr(float(v)) for v in self.grid.coords[node]]
                       + [repr(float(self.values[node]))])
        return buf.getvalue() if target is None else None


def grid_values(grid, f):
    """Node values of a field; exterior nodes hold NaN."""
    if isinstance(f, GridFunction):
        return f.values.copy()
    if isinstance(f, np.ndarray) and f.shape == (grid.n_nodes,):
        return f.astype(float).copy()
    out = np.full(grid.n_nodes, np.nan)
    act = grid.active
    out[act] = eval_field(f, grid.coords[act])
    return out


@dataclass
class DiscreteOperator:
    """``M ~ lam I - A_h`` on generator rows and ``-B_{k,h}`` on boundary rows."""

    matrix: sp.csr_matrix
    grid: Grid
    lam: float
    row_kind: np.ndarray
    flags: dict
    trunc_data: np.ndarray | None = None
    clamped_rows: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    boundary_targets: dict = field(default_factory=dict)

    @property
    def active(self):
        return self.grid.active

    @property
    def generator_rows(self):
        return (self.row_kind == INTERIOR) | (self.row_kind == TRUNCATED)

    def apply(self, values):
        v = np.where(self.active, values, 0.0)
        return self.matrix @ v

    def to_triplets(self, target=None):
        import io
        coo = self.matrix.tocoo()
        buf = io.StringIO() if target is None else target
        buf.write(f"{coo.shape[0]},{coo.shape[1]},{coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            buf.write(f"{int(r)},{int(c)},{float(v)!r}\n")
        return buf.getvalue() if target is None else None


def _flow_target(grid, bspec, xb, piece, lam_len, max_len=None, n_sub=4):
    """Follow the reflection field from boundary nodes to an admissible point.

    Stops once ``psi >= 0``, the travelled Euclidean length is at least one
    cell, and at least half of the stencil weight sits on interior nodes.
    Returns ``(y, delta)``.
    """
    h = grid.h
    max_len = 2.0 * bspec.diam if max_len is None else max_len
    y = xb.copy()
    delta = np.zeros(len(xb))
    length = np.zeros(len(xb))
    done = np.zeros(len(xb), dtype=bool)
    ds = h / n_sub
    for _ in range(int(math.ceil(max_len / ds)) + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        ya = y[act]
        foot = bspec.normal_projection(ya)
        F = np.empty_like(ya)
        for k in np.unique(piece[act]):
            s = piece[act] == k
            F[s] = bspec.ell_k(int(k), foot[s])
        nF = np.linalg.norm(F, axis=1)
        step = ds / nF
        y[act] = ya + step[:, None] * F
        delta[act] += step
        length[act] += ds
        ok = (bspec.psi(y[act]) >= 0) & (length[act] >= h * (1 - 1e-12))
        if np.any(ok):
            cand = act[ok]
            corners, w, _ = grid.stencil(y[cand])
            kinds = grid.kind[corners]
            wint = np.sum(np.where(kinds == INTERIOR, w, 0.0), axis=1)
            wdead = np.sum(np.where(kinds == EXTERIOR, w, 0.0), axis=1)
            good = (wint >= 0.5) & (wdead <= 1e-14)
            done[cand[good]] = True
    if not np.all(done):
        bad = xb[~done][0]
        raise AssemblyError(
            f"reflection field from boundary node {bad.tolist()} does not re-enter the grid "
            "domain; refine the grid")
    return y, delta


def assemble(spec, grid, lam, truncation="reflect", trunc_data=None, jump_cut=None):
    """Sparse monotone discretization of ``lam - A`` with boundary rows.

    ``truncation`` closes truncated nodes: ``"reflect"`` mirrors the
    diffusion and drops outward drift; ``"dirichlet"`` imposes
    ``u = trunc_data`` (a field, default 0).
    """
    if lam <= 0:
        raise PreconditionError("lambda must be positive")
    d = grid.dim
    if spec.dim != d:
        raise PreconditionError("generator and grid dimensions differ")
    N = grid.n_nodes
    kind = grid.kind
    X = grid.coords
    dxv = grid.dx
    shape = np.array(grid.shape)
    multi = grid.multi(np.arange(N))
    rows, cols, vals = [], [], []
    gen = np.flatnonzero((kind == INTERIOR) | ((kind == TRUNCATED) & (truncation == "reflect")))
    Xg = X[gen]
    mg = multi[gen]
    a = spec.diffusion(Xg).copy()
    b = spec.drift(Xg).copy()
    clamped_rows = np.empty(0, int)

    jspec = spec.jump
    if jspec is not None:
        eg = min(jump_cut if jump_cut is not None else grid.h, jspec.cutoff_unit)
        # small jumps as extra diffusion, mid jumps' compensator in the drift
        for zs, ws in _jumps._shell_nodes(jspec.measure, eg, _jumps.N_SHELLS):
            if len(zs):
                amp = jspec.eta(Xg, zs)
                a += np.einsum("nki,nkj,k->nij", amp, amp, ws)
        b -= _jumps.compensator(jspec, Xg, eg)
        zq, wq = jspec.measure.quad(eg)
        if len(zq):
            amp = jspec.eta(Xg, zq)  # (n, K, d)
            dest = (Xg[:, None, :] + amp).reshape(-1, d)
            corners, w, clamped = grid.stencil(dest)
            act = grid.active[corners]
            w = np.where(act, w, 0.0)
            w = w / w.sum(axis=1, keepdims=True)
            wk = np.repeat(wq[None, :], len(gen), axis=0).ravel()
            rr = np.repeat(gen, len(zq))
            rows.append(np.repeat(rr, corners.shape[1]))
            cols.append(corners.ravel())
            vals.append(-(wk[:, None] * w).ravel())
            rows.append(rr)
            cols.append(rr)
            vals.append(wk)
            clamped_rows = np.unique(rr[clamped])

    diag = np.full(len(gen), float(lam))

    def add(targets, coef):
        nonlocal diag
        ok = coef != 0
        if np.any(coef < 0):
            raise AssemblyError("negative stencil weight; the scheme is not monotone here, "
                                "refine the grid or use a wider stencil")
        rows.append(gen[ok])
        cols.append(targets[ok])
        vals.append(-coef[ok])
        diag = diag + coef

    def neighbour(offset):
        m2 = mg + offset
        inside = np.all((m2 >= 0) & (m2 < shape), axis=1)
        flat = np.full(len(gen), -1)
        flat[inside] = grid.flat(m2[inside])
        return flat

    for i in range(d):
        cross = np.zeros(len(gen))
        for j in range(d):
            if j != i:
                cross += np.abs(a[:, i, j]) / (2 * dxv[i] * dxv[j])
        base = 0.5 * a[:, i, i] / dxv[i] ** 2 - cross
        if np.any(base < -1e-12 * np.maximum(1.0, np.abs(a[:, i, i]) / dxv[i] ** 2)):
            raise AssemblyError(
                "cross-derivative terms break monotonicity (a_ii < sum |a_ij|); "
                "refine the grid or use a wider stencil")
        base = np.maximum(base, 0.0)
        e = np.zeros(d, dtype=int)
        e[i] = 1
        plus, minus = neighbour(e), neighbour(-e)
        cp = base + np.maximum(b[:, i], 0.0) / dxv[i]
        cm = base + np.maximum(-b[:, i], 0.0) / dxv[i]
        # truncated nodes: mirror a missing neighbour and drop outward drift
        miss_p, miss_m = plus < 0, minus < 0
        if np.any(miss_p & miss_m):
            raise AssemblyError("axis with a single node")
        cm = np.where(miss_p, cm + base, cm)
        cp = np.where(miss_p, 0.0, cp)
        cp = np.where(miss_m, cp + base, cp)
        cm = np.where(miss_m, 0.0, cm)
        add(np.where(miss_p, 0, plus), cp)
        add(np.where(miss_m, 0, minus), cm)
        for j in range(i + 1, d):
            aij = a[:, i, j]
            if not np.any(aij != 0):
                continue
            w = np.abs(aij) / (2 * dxv[i] * dxv[j])
            ej = np.zeros(d, dtype=int)
            ej[j] = 1
            pos = aij > 0
            t1 = np.where(pos, neighbour(e + ej), neighbour(e - ej))
            t2 = np.where(pos, neighbour(-e - ej), neighbour(-e + ej))
            need = w > 0
            if np.any(need & ((t1 < 0) | (t2 < 0))) or np.any(need & (kind[np.maximum(t1, 0)] == EXTERIOR)) \
                    or np.any(need & (kind[np.maximum(t2, 0)] == EXTERIOR)):
                raise AssemblyError("cross-derivative stencil reaches outside the grid domain")
            add(np.maximum(t1, 0), w)
            add(np.maximum(t2, 0), w)
    rows.append(gen)
    cols.append(gen)
    vals.append(diag)

    # Dirichlet truncation rows
    tdata = None
    if truncation == "dirichlet":
        tr = np.flatnonzero(kind == TRUNCATED)
        rows.append(tr)
        cols.append(tr)
        vals.append(np.full(len(tr), float(lam)))
        tdata = np.zeros(N)
        if trunc_data is not None and len(tr):
            tdata[tr] = eval_field(trunc_data, X[tr])
    elif truncation != "reflect":
        raise PreconditionError(f"unknown truncation closure {truncation!r}")

    # oblique boundary rows
    targets = {}
    bnd = np.flatnonzero(kind >= 1)
    if bnd.size:
        bspec = grid.bspec
        y, delta = _flow_target(grid, bspec, X[bnd], kind[bnd], None)
        corners, w, _ = grid.stencil(y)
        w = np.where(grid.active[corners], w, 0.0)
        w = w / w.sum(axis=1, keepdims=True)
        self_w = np.sum(np.where(corners == bnd[:, None], w, 0.0), axis=1)
        if np.any(self_w >= 1 - 1e-12):
            raise AssemblyError("boundary row stencil collapses onto its own node")
        rows.append(np.repeat(bnd, corners.shape[1]))
        cols.append(corners.ravel())
        vals.append((-w / delta[:, None]).ravel())
        rows.append(bnd)
        cols.append(bnd)
        vals.append(1.0 / delta)
        targets = {"nodes": bnd, "y": y, "delta": delta}

    # exterior rows: identity so the system stays square and decoupled
    ext = np.flatnonzero(kind == EXTERIOR)
    rows.append(ext)
    cols.append(ext)
    vals.append(np.ones(len(ext)))

    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N)).tocsr()
    M.sum_duplicates()
    M.eliminate_zeros()
    row_kind = kind.copy()
    if truncation == "dirichlet":
        row_kind[kind == TRUNCATED] = TRUNCATED
    op = DiscreteOperator(M, grid, float(lam), row_kind, {}, tdata, clamped_rows, targets)
    op.truncation = truncation
    rep = mmatrix_check(op)
    op.flags = {"mmatrix": rep.passed, "sign_pattern": rep.sign_ok,
                "diagonal_dominance": rep.dominance_ok, "clamped_rows": int(len(clamped_rows))}
    return op


@dataclass
class MMatrixReport:
    sign_ok: bool
    dominance_ok: bool
    violating_rows: list
    n_rows: int

    @property
    def passed(self):
        return self.sign_ok and self.dominance_ok

    def to_dict(self):
        return {"pass": self.passed, "sign_ok": self.sign_ok, "dominance_ok": self.dominance_ok,
                "violating_rows": list(self.violating_rows), "n_rows": self.n_rows}


def mmatrix_check(op, rtol=1e-12):
    """Row scan: positive diagonal, nonpositive off-diagonal, weak dominance."""
    M = op.matrix if isinstance(op, DiscreteOperator) else sp.csr_matrix(op)
    M = sp.csr_matrix(M)
    n = M.shape[0]
    diag = M.diagonal()
    coo = M.tocoo()
    off = coo.row != coo.col
    r, v = coo.row[off], coo.data[off]
    scale = np.maximum(np.abs(diag), 1.0)
    pos_off = np.zeros(n, dtype=bool)
    np.logical_or.at(pos_off, r[v > rtol * scale[r]], True)
    offsum = np.zeros(n)
    np.add.at(offsum, r, np.abs(v))
    bad_diag = diag <= 0
    bad_dom = diag < offsum - rtol * scale
    sign_bad = pos_off | bad_diag
    bad = np.flatnonzero(sign_bad | bad_dom)
    return MMatrixReport(bool(not np.any(sign_bad)), bool(not np.any(bad_dom)),
                         [int(i) for i in bad], n)


def solve_resolvent(op, h, tol=1e-10, max_refine=5):
    """Solve ``M u = rhs``; ``rhs`` is ``h`` on generator rows and 0 on boundary rows.

    The contract is the residual: ``max |M u - rhs| <= tol * lam * ||h||``.
    """
    grid = op.grid
    hv = grid_values(grid, h)
    rhs = np.zeros(grid.n_nodes)
    g = op.generator_rows & grid.active
    rhs[g] = hv[g]
    if op.trunc_data is not None:
        tr = op.row_kind == TRUNCATED
        if getattr(op, "truncation", "reflect") == "dirichlet":
            rhs[tr] = op.lam * op.trunc_data[tr]
    certified = bool(op.flags.get("mmatrix", False))
    if not certified:
        warnings.warn("operator is not a certified M-matrix; solution is not certified",
                      RuntimeWarning, stacklevel=2)
    hnorm = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    target = tol * op.lam * hnorm
    M = op.matrix.tocsc()
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    u = lu.solve(rhs)
    history = []
    for _ in range(max_refine + 1):
        r = rhs - op.matrix @ u
        res = float(np.max(np.abs(r))) if r.size else 0.0
        history.append(res)
        if not np.isfinite(res):
            break
        if res <= target:
            break
        u = u + lu.solve(r)
    if not (history[-1] <= target):
        raise SolverError(f"residual {history[-1]:.3e} above target {target:.3e}", history)
    u[~grid.active] = np.nan
    return GridFunction(grid, u, "u", certified, history[-1], history)


def enforce_boundary(op, values):
    """Set boundary-node values so every boundary row vanishes."""
    v = np.array(values, dtype=float)
    bnd = np.flatnonzero(op.row_kind >= 1)
    if bnd.size == 0:
        return v
    M = op.matrix
    Mbb = M[bnd][:, bnd]
    others = np.flatnonzero(op.row_kind < 1)
    others = others[op.active[others]]
    rhs = -(M[bnd][:, others] @ v[others])
    v[bnd] = spla.spsolve(Mbb.tocsc(), rhs) if bnd.size > 1 else rhs / Mbb.toarray()[0, 0]
    return v


@dataclass
class DissipativityReport:
    passed: bool
    ratios: list  # ||M f|| / (lam ||f||) per sample
    failures: list

    def to_dict(self):
        return {"pass": self.passed, "ratios": list(self.ratios), "failures": list(self.failures)}


def discrete_dissipativity_test(op, lam, f_samples, rtol=1e-10):
    """``||lam f - A_h f|| >= lam ||f||`` on generator rows for each sample.

    Boundary values of each sample are first replaced so that the oblique
    boundary relations hold, which is the discrete domain of the operator.
    """
    grid = op.grid
    rows = op.generator_rows & grid.active
    ratios, failures = [], []
    for idx, f in enumerate(f_samples):
        v = grid_values(grid, f)
        v[~grid.active] = 0.0
        v = enforce_boundary(op, v)
        fn = float(np.max(np.abs(v[grid.active])))
        if fn == 0:
            ratios.append(math.inf)
            continue
        r = op.apply(v)[rows]
        ratio = float(np.max(np.abs(r))) / (lam * fn)
        ratios.append(ratio)
        if ratio < 1 - rtol:
            failures.append(idx)
    return DissipativityReport(not failures, ratios, failures)


def flipped_operator(op):
    """``lam I + A_h`` on generator rows: the sign-flipped negative control."""
    M = op.matrix.tolil(copy=True)
    rows = np.flatnonzero(op.generator_rows & op.active)
    D = sp.diags(np.where(np.isin(np.arange(M.shape[0]), rows), 2 * op.lam, 0.0))
    sel = sp.diags(np.isin(np.arange(M.shape[0]), rows).astype(float))
    flipped = (sel @ (D - op.matrix) + (sp.identity(M.shape[0]) - sel) @ op.matrix).tocsr()
    out = DiscreteOperator(flipped, op.grid, op.lam, op.row_kind, {}, op.trunc_data,
                           op.clamped_rows, op.boundary_targets)
    out.truncation = getattr(op, "truncation", "reflect")
    rep = mmatrix_check(out)
    out.flags = {"mmatrix": rep.passed}
    return out


def boundary_row_values(op, f):
    """Boundary rows applied to a test function: ``(nodes, values)``."""
    grid = op.grid
    v = grid_values(grid, f)
    bnd = np.flatnonzero(op.row_kind >= 1)
    return bnd, (op.matrix @ np.where(grid.active, v, 0.0))[bnd]
