"""Scenario presets and JSON ingestion.

A :class:`Scenario` bundles a generator, an optional boundary, the grid
domain, named right-hand sides and default budgets.  Presets are built on
demand from the registry; inline scenarios come from a JSON document.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import jumps as J
from . import operators as op
from .errors import ConfigurationError
from .grid import Box

# ---------------------------------------------------------------------------
# scenario container


@dataclass
class Scenario:
    name: str
    description: str
    spec: op.GeneratorSpec
    bspec: Optional[op.BoundarySpec] = None
    box: Optional[Box] = None
    dx: float = 0.05
    lambdas: tuple = (1.0,)
    h: dict = field(default_factory=dict)  # name -> field or factory(lam) -> field
    h_default: str = ""
    exact: dict = field(default_factory=dict)  # h name -> exact(lam, x)
    x0: tuple = ()
    dt: float = 1e-3
    n_paths: int = 10_000
    tail_tol: float = 0.02
    truncation: str = "reflect"
    trunc_data: dict = field(default_factory=dict)  # h name -> field(lam)
    eps_cut: Optional[float] = None
    pk: Optional[tuple] = None  # (CoordinateMap, Patch)
    grid_enabled: bool = True

    @property
    def dim(self):
        return self.spec.dim

    @property
    def constrained(self):
        return self.bspec is not None

    @property
    def domain(self):
        return self.bspec if self.bspec is not None else self.box

    def field_for(self, name, lam):
        """The right-hand side ``name`` at rate ``lam`` (factories are called)."""
        try:
            f = self.h[name]
        except KeyError:
            raise ConfigurationError(f"scenario {self.name!r} has no field {name!r}") from None
        if getattr(f, "per_lambda", False):
            return f(lam)
        return f

    def trunc_for(self, name, lam):
        g = self.trunc_data.get(name)
        return None if g is None else g(lam)


def _per_lambda(fn):
    fn.per_lambda = True
    return fn


# ---------------------------------------------------------------------------
# geometry helpers


def _poly_terms(terms, dim):
    """``[(coef, exps), ...]`` -> value and gradient callables."""
    coef = np.array([float(c) for c, _ in terms])
    exps = np.array([list(e) for _, e in terms], dtype=int).reshape(len(terms), dim)
    if np.any(exps < 0):
        raise ConfigurationError("polynomial exponents must be nonnegative")

    def value(x):
        x = np.atleast_2d(x)
        return np.prod(x[:, None, :] ** exps[None], axis=2) @ coef

    def grad(x):
        x = np.atleast_2d(x)
        out = np.zeros((x.shape[0], dim))
        for i in range(dim):
            e = exps.copy()
            c = coef * e[:, i]
            e[:, i] = np.maximum(e[:, i] - 1, 0)
            out[:, i] = np.prod(x[:, None, :] ** e[None], axis=2) @ c
        return out

    return value, grad


def _normal_field(psi_grad):
    def ell(x):
        g = psi_grad(x)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    return ell


def interval_boundary(a=0.0, b=1.0):
    """``(a, b)`` with normal reflection; pieces ``left`` and ``right``."""
    mid = 0.5 * (a + b)
    w = b - a

    def psi(x):
        # evaluated on every path at every step: keep temporaries down
        x = x[:, 0]
        out = x - a
        out *= b - x
        if w != 1.0:
            out /= w
        return out

    return op.BoundarySpec(
        1,
        psi,
        lambda x: (a + b - 2 * x[:, :1]) / w,
        lambda x: np.where(x[:, :1] < mid, 1.0, -1.0),
        pieces=(("left", lambda x: x[:, 0] < mid), ("right", lambda x: x[:, 0] >= mid)),
        bbox=((a,), (b,)), diam=w, points=np.array([[a], [b]]),
        project=lambda x: np.where(x < mid, a, b))


def halfline_boundary(top=6.0):
    """``(0, inf)`` with normal reflection at the origin; grid box ``[0, top]``."""
    return op.BoundarySpec(
        1,
        lambda x: x[:, 0],
        lambda x: np.ones_like(x[:, :1]),
        lambda x: np.ones_like(x[:, :1]),
        pieces=(("origin", lambda x: np.abs(x[:, 0]) < 0.5 * top),),
        bbox=((0.0,), (float(top),)), diam=1.0, points=np.array([[0.0]]),
        project=lambda x: np.zeros_like(x))


def smoothstep(t, lo=0.5, hi=0.9):
    """Quintic smoothstep: 0 below ``lo``, 1 above ``hi``, C^2 in between."""
    s = np.clip((np.asarray(t, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    return s * s * s * (10 - 15 * s + 6 * s * s)


def disk_ell(x):
    """Reflection field on the unit disk, tangential only at (1, 0).

    Near (1, 0) it is ``(x2 - x2^2, -1)``; on the left half it is the inward
    normal ``-x``; a smoothstep in ``x1`` blends the two.
    """
    x = np.atleast_2d(x)
    w = smoothstep(x[:, 0])[:, None]
    near = np.stack([x[:, 1] - x[:, 1] ** 2, -np.ones(len(x))], axis=1)
    return w * near + (1 - w) * (-x)


def _circle_param(s):
    t = 2 * np.pi * np.asarray(s, dtype=float).reshape(-1)
    return np.stack([np.cos(t), np.sin(t)], axis=1)


def disk_boundary():
    def proj(x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        safe = np.where(r > 0, r, 1.0)
        out = x / safe
        out[r[:, 0] == 0] = [1.0, 0.0]
        return out

    return op.BoundarySpec(
        2,
        lambda x: 1.0 - np.sum(x * x, axis=1),
        lambda x: -2.0 * x,
        disk_ell,
        pieces=(("circle", lambda x: np.ones(len(x), dtype=bool)),),
        bbox=((-1.0, -1.0), (1.0, 1.0)), diam=2.0,
        param=_circle_param,
        project=proj)


def disk_pk_map():
    """Straightening map at (1, 0): ``phi = (z1 + 1 - z2^2/2 + z2^3/3, z2)``."""
    def phi(z):
        z = np.atleast_2d(z)
        return np.stack([z[:, 0] + 1 - z[:, 1] ** 2 / 2 + z[:, 1] ** 3 / 3, z[:, 1]], axis=1)

    def jac(z):
        z = np.atleast_2d(z)
        out = np.zeros((len(z), 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 0, 1] = -z[:, 1] + z[:, 1] ** 2
        out[:, 1, 1] = 1.0
        return out

    def phi_inv(x):
        x = np.atleast_2d(x)
        return np.stack([x[:, 0] - 1 + x[:, 1] ** 2 / 2 - x[:, 1] ** 3 / 3, x[:, 1]], axis=1)

    return op.CoordinateMap(phi, jac, phi_inv, "disk-straightening")


# ---------------------------------------------------------------------------
# presets


def _fields_1d():
    return {
        "one": op.constant(1.0, 1),
        "cos_pi": op.cosine([math.pi]),
        "tanh": op.tanh_of(op.coordinate(0, 1)),
    }


def interval_rbm():
    spec = op.GeneratorSpec(1, op.const_sigma([[1.0]]), op.const_drift([0.0]), lipschitz=0.0)
    ex = {
        "cos_pi": lambda lam, x: np.cos(math.pi * np.asarray(x)[..., 0]) / (lam + math.pi**2 / 2),
        "one": lambda lam, x: np.full(np.shape(x)[:-1], 1.0 / lam),
    }
    return Scenario("interval_rbm", "reflected Brownian motion on [0,1]; closed-form resolvent",
                    spec, interval_boundary(), dx=1 / 200, lambdas=(0.5, 1.0, 2.0),
                    h=_fields_1d(), h_default="cos_pi", exact=ex, x0=((0.1,), (0.5,), (0.9,)),
                    dt=1e-3, n_paths=20_000)


def halfline_rbm():
    spec = op.GeneratorSpec(1, op.const_sigma([[1.0]]), op.const_drift([0.0]), lipschitz=0.0)
    h = {"one": op.constant(1.0, 1), "decay": op.bump([0.0], 1.0),
         "tanh": op.tanh_of(op.coordinate(0, 1))}
    ex = {"one": lambda lam, x: np.full(np.shape(x)[:-1], 1.0 / lam)}
    return Scenario("halfline_rbm", "reflected Brownian motion on [0,inf); local-time oracle",
                    spec, halfline_boundary(6.0), dx=0.02, lambdas=(0.5, 1.0, 2.0), h=h,
                    h_default="decay", exact=ex, x0=((0.0,), (0.5,), (1.5,)),
                    dt=1e-3, n_paths=20_000)


def bm_1d():
    spec = op.GeneratorSpec(1, op.const_sigma([[1.0]]), op.const_drift([0.0]), lipschitz=0.0)
    h = {"one": op.constant(1.0, 1), "cos": op.cosine([1.0]),
         "tanh": op.tanh_of(op.coordinate(0, 1))}
    ex = {"cos": lambda lam, x: np.cos(np.asarray(x)[..., 0]) / (lam + 0.5),
          "one": lambda lam, x: np.full(np.shape(x)[:-1], 1.0 / lam)}
    return Scenario("bm_1d", "standard Brownian motion on the line (grid box [-8,8])",
                    spec, None, Box((-8.0,), (8.0,)), dx=0.02, lambdas=(0.5, 1.0, 2.0, 4.0),
                    h=h, h_default="cos", exact=ex, x0=((-0.5,), (0.0,), (0.5,)),
                    dt=1e-3, n_paths=20_000)


def ou_spec():
    return op.GeneratorSpec(1, op.const_sigma([[1.0]]), op.linear_drift([[-1.0]]), lipschitz=1.0)


def ou_1d():
    spec = ou_spec()
    ustar = op.quadratic([0.0], [[2.0]])  # x^2

    @_per_lambda
    def manufactured(lam):
        return op.manufacture_rhs(spec, lam, ustar)

    @_per_lambda
    def ustar_field(lam):
        return ustar

    h = {"manufactured": manufactured, "one": op.constant(1.0, 1),
         "cos": op.cosine([1.0]), "tanh": op.tanh_of(op.coordinate(0, 1))}
    ex = {"manufactured": lambda lam, x: np.asarray(x)[..., 0] ** 2,
          "one": lambda lam, x: np.full(np.shape(x)[:-1], 1.0 / lam)}
    return Scenario("ou_1d", "Ornstein-Uhlenbeck dX=-X dt+dW; manufactured u=x^2",
                    spec, None, Box((-3.0,), (3.0,)), dx=0.02, lambdas=(1.0,), h=h,
                    h_default="manufactured", exact=ex, x0=((-1.0,), (0.0,), (1.0,)),
                    dt=1e-3, n_paths=20_000, truncation="dirichlet",
                    trunc_data={"manufactured": ustar_field}, tail_tol=0.05)


def disk_tangential():
    def drift(x):
        return 0.5 * disk_ell(x)

    spec = op.GeneratorSpec(2, op.const_sigma([[1.0, 0.0], [0.0, 0.0]]), drift, lipschitz=4.0)
    h = {"x1": op.coordinate(0, 2), "one": op.constant(1.0, 2),
         "bump": op.bump([0.0, 0.0], 0.7)}
    ex = {"one": lambda lam, x: np.full(np.shape(x)[:-1], 1.0 / lam)}
    return Scenario("disk_tangential",
                    "unit disk, degenerate diffusion, reflection tangential at (1,0)",
                    spec, disk_boundary(), dx=0.05, lambdas=(1.0,), h=h, h_default="x1",
                    exact=ex, x0=((0.0, 0.0), (0.5, 0.0), (-0.3, 0.4)), dt=1e-3,
                    n_paths=20_000, pk=(disk_pk_map(), op.Patch(np.array([1.0, 0.0]), 0.1)))


def jump_alpha_spec(alpha=1.5, sigma=0.5):
    jspec = J.JumpSpec(J.eta_scaled([1.0]), J.PowerLawMeasure(alpha, 1.0, 1.0, True))
    return op.GeneratorSpec(1, op.const_sigma([[sigma]]), op.const_drift([0.0]), jump=jspec,
                            lipschitz=0.0)


def stable_symbol(k, alpha=1.5, sigma=0.5):
    """``psi(k)`` with ``A cos(kx) = psi(k) cos(kx)`` for :func:`jump_alpha_spec`."""
    from scipy.integrate import quad

    val, _ = quad(lambda z: (math.cos(k * z) - 1.0) * z ** (-1 - alpha), 0.0, 1.0, limit=200)
    return -0.5 * sigma**2 * k**2 + 2.0 * val


def jump_alpha():
    spec = jump_alpha_spec()
    sym = stable_symbol(1.0)
    h = {"cos": op.cosine([1.0]), "one": op.constant(1.0, 1),
         "tanh": op.tanh_of(op.coordinate(0, 1))}
    ex = {"cos": lambda lam, x: np.cos(np.asarray(x)[..., 0]) / (lam - sym),
          "one": lambda lam, x: np.full(np.shape(x)[:-1], 1.0 / lam)}
    return Scenario("jump_alpha",
                    "symmetric power-law jumps (alpha=1.5, |z|<=1) plus small diffusion",
                    spec, None, Box((-8.0,), (8.0,)), dx=0.05, lambdas=(1.0,), h=h,
                    h_default="cos", exact=ex, x0=((-0.5,), (0.0,), (0.5,)), dt=1e-3,
                    n_paths=20_000, eps_cut=0.01)


def jump_poisson_spec(rate=2.0):
    jspec = J.JumpSpec(J.eta_constant([1.0]), J.AtomicMeasure([(1.0, rate)]))
    return op.GeneratorSpec(1, op.const_sigma([[0.0]]), op.const_drift([0.0]), jump=jspec,
                            lipschitz=0.0)


def jump_poisson():
    spec = jump_poisson_spec()
    c = 2.0 * (1.0 - math.exp(-1.0))
    decay = op.TestFunction(1, lambda x: np.exp(-x[:, 0]), lambda x: -np.exp(-x[:, :1]),
                            lambda x: np.exp(-x[:, 0])[:, None, None], "exp(-x)")
    h = {"decay": decay, "one": op.constant(1.0, 1)}
    ex = {"decay": lambda lam, x: np.exp(-np.asarray(x)[..., 0]) / (lam + c),
          "one": lambda lam, x: np.full(np.shape(x)[:-1], 1.0 / lam)}
    return Scenario("jump_poisson", "compound Poisson: unit jumps at rate 2, no diffusion",
                    spec, None, Box((0.0,), (12.0,)), dx=0.25, lambdas=(1.0,), h=h,
                    h_default="decay", exact=ex, x0=((0.0,), (1.0,), (2.0,)), dt=1e-2,
                    n_paths=20_000)


REGISTRY: dict = {
    "interval_rbm": interval_rbm,
    "halfline_rbm": halfline_rbm,
    "bm_1d": bm_1d,
    "ou_1d": ou_1d,
    "disk_tangential": disk_tangential,
    "jump_alpha": jump_alpha,
    "jump_poisson": jump_poisson,
}

_DESCRIPTIONS = {
    "interval_rbm": "oracle: reflected BM on [0,1], closed-form resolvent for cos(pi x)",
    "halfline_rbm": "oracle: reflected BM on [0,inf), E gamma(1) = sqrt(2/pi)",
    "bm_1d": "oracle: Brownian motion on the line, cos resolvent",
    "ou_1d": "oracle: Ornstein-Uhlenbeck with manufactured solution x^2",
    "disk_tangential": "degenerate oblique reflection on the unit disk, tangential at (1,0)",
    "jump_alpha": "jump diffusion with symmetric alpha=1.5 power-law marks",
    "jump_poisson": "compound Poisson jumps of size 1 at rate 2",
}


def list_scenarios(registry=None):
    """``[(name, one-line description)]`` sorted by name."""
    reg = REGISTRY if registry is None else registry
    return [(k, _DESCRIPTIONS.get(k, "")) for k in sorted(reg)]


def get_scenario(name):
    try:
        return REGISTRY[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown scenario {name!r}; available: {', '.join(sorted(REGISTRY))}") from None


# ---------------------------------------------------------------------------
# JSON ingestion


def field_from_descriptor(desc, dim, spec=None):
    """Build a scalar field from a JSON descriptor.

    Strings: ``"one"``, ``"cos_pi"``, ``"tanh"``.  Dicts with ``type`` one of
    ``constant``, ``coordinate``, ``cosine``, ``quadratic``, ``bump``,
    ``tanh`` or ``manufactured`` (needs ``u`` and yields a per-rate factory).
    """
    if isinstance(desc, str):
        named = {"one": {"type": "constant", "c": 1.0},
                 "cos_pi": {"type": "cosine", "k": [math.pi] + [0.0] * (dim - 1)},
                 "tanh": {"type": "tanh"}}
        if desc not in named:
            raise ConfigurationError(f"unknown field name {desc!r}")
        desc = named[desc]
    if not isinstance(desc, dict) or "type" not in desc:
        raise ConfigurationError(f"field descriptor must be a name or a dict with 'type': {desc!r}")
    t = desc["type"]
    try:
        if t == "constant":
            return op.constant(float(desc.get("c", 1.0)), dim)
        if t == "coordinate":
            return op.coordinate(int(desc.get("i", 0)), dim)
        if t == "cosine":
            return op.cosine(desc["k"], float(desc.get("amp", 1.0)), float(desc.get("phase", 0.0)))
        if t == "quadratic":
            return op.quadratic(desc.get("p", [0.0] * dim), desc.get("Q", np.zeros((dim, dim))),
                                float(desc.get("c", 0.0)), desc.get("center"))
        if t == "bump":
            return op.bump(desc.get("center", [0.0] * dim), float(desc.get("s", 1.0)))
        if t == "tanh":
            return op.tanh_of(op.coordinate(int(desc.get("i", 0)), dim))
        if t == "manufactured":
            if spec is None:
                raise ConfigurationError("manufactured field needs a generator")
            u = field_from_descriptor(desc["u"], dim)

            @_per_lambda
            def h(lam):
                return op.manufacture_rhs(spec, lam, u)

            h.solution = u
            return h
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad field descriptor {desc!r}: {exc}") from None
    raise ConfigurationError(f"unknown field type {t!r}")


def _matrix(v, shape, what):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{what} must be numeric") from None
    if a.shape != shape:
        raise ConfigurationError(f"{what} must have shape {shape}, got {a.shape}")
    return a


def generator_from_json(g):
    try:
        d = int(g["dim"])
    except (KeyError, TypeError, ValueError):
        raise ConfigurationError("generator needs an integer 'dim'") from None
    if d < 1:
        raise ConfigurationError("dim must be positive")
    sig = np.asarray(g.get("sigma", np.eye(d)), dtype=float)
    if sig.ndim != 2 or sig.shape[0] != d:
        raise ConfigurationError(f"sigma must be a {d}x r matrix")
    sigma = op.const_sigma(sig)
    dr = g.get("drift", {"constant": [0.0] * d})
    lip = float(np.linalg.norm(sig, 2))
    if isinstance(dr, list):
        dr = {"constant": dr}
    if "constant" in dr:
        drift = op.const_drift(_matrix(dr["constant"], (d,), "drift"))
    elif "linear" in dr:
        lin = dr["linear"]
        M = _matrix(lin["matrix"], (d, d), "drift matrix")
        off = _matrix(lin.get("offset", [0.0] * d), (d,), "drift offset")
        drift = op.linear_drift(M, off)
        lip = max(lip, float(np.linalg.norm(M, 2)))
    else:
        raise ConfigurationError("drift must be {'constant': [...]} or {'linear': {...}}")
    jump = None
    if g.get("jump"):
        jump = jump_from_json(g["jump"], d)
    return op.GeneratorSpec(d, sigma, drift, jump=jump, lipschitz=lip)


def jump_from_json(j, d):
    m = j.get("measure", {})
    t = m.get("type")
    if t == "power":
        meas = J.PowerLawMeasure(float(m["alpha"]), float(m.get("scale", 1.0)),
                                 float(m.get("zmax", 1.0)), bool(m.get("symmetric", True)))
    elif t == "atoms":
        meas = J.AtomicMeasure([tuple(a) for a in m["atoms"]])
    else:
        raise ConfigurationError("jump measure type must be 'power' or 'atoms'")
    eta = j.get("eta", {"scaled": [1.0] * d})
    if "scaled" in eta:
        fn = J.eta_scaled(_matrix(eta["scaled"], (d,), "eta direction"))
    elif "constant" in eta:
        fn = J.eta_constant(_matrix(eta["constant"], (d,), "eta value"))
    else:
        raise ConfigurationError("eta must be {'scaled': [...]} or {'constant': [...]}")
    if j.get("rho", "abs") != "abs":
        raise ConfigurationError("only rho='abs' is supported")
    return J.JumpSpec(fn, meas, J.rho_abs, float(j.get("cutoff_unit", 1.0)))


def boundary_from_json(dom, d):
    psi = dom.get("psi")
    if isinstance(psi, str):
        presets = {"disk": disk_boundary, "interval": interval_boundary,
                   "halfline": halfline_boundary}
        if psi not in presets:
            raise ConfigurationError(f"unknown domain preset {psi!r}")
        b = presets[psi]()
        if b.dim != d:
            raise ConfigurationError(f"domain preset {psi!r} has dimension {b.dim}, not {d}")
        ell = dom.get("ell")
        if ell is None:
            return b
        b = op.BoundarySpec(b.dim, b.psi, b.psi_grad, _ell_from_json(ell, b.psi_grad, d),
                            pieces=b.pieces, bbox=b.bbox, diam=b.diam, param=b.param,
                            points=b.points, project=b.project)
        return b
    if not isinstance(psi, dict) or "poly" not in psi:
        raise ConfigurationError("domain.psi must be a preset name or {'poly': [[coef, exps], ...]}")
    value, grad = _poly_terms(psi["poly"], d)
    if "bbox" not in dom:
        raise ConfigurationError("polynomial domains need a 'bbox'")
    lo, hi = (tuple(float(v) for v in row) for row in dom["bbox"])
    diam = float(dom.get("diam", np.linalg.norm(np.subtract(hi, lo))))
    return op.BoundarySpec(d, value, grad, _ell_from_json(dom.get("ell", "normal"), grad, d),
                           pieces=(("boundary", lambda x: np.ones(len(x), dtype=bool)),),
                           bbox=(lo, hi), diam=diam)


def _ell_from_json(ell, psi_grad, d):
    if ell == "normal":
        return _normal_field(psi_grad)
    if isinstance(ell, list):
        v = _matrix(ell, (d,), "ell")
        return lambda x: np.broadcast_to(v, (np.atleast_2d(x).shape[0], d)).copy()
    if isinstance(ell, dict) and "poly" in ell:
        comps = [_poly_terms(t, d)[0] for t in ell["poly"]]
        if len(comps) != d:
            raise ConfigurationError("ell.poly needs one polynomial per coordinate")
        return lambda x: np.stack([c(x) for c in comps], axis=1)
    raise ConfigurationError("ell must be 'normal', a constant vector or {'poly': [...]}")


def scenario_from_json(cfg):
    """Build a :class:`Scenario` from a config dict (preset name or inline parts)."""
    if "scenario" in cfg and cfg["scenario"] is not None:
        if not isinstance(cfg["scenario"], str):
            raise ConfigurationError("'scenario' must be a preset name")
        sc = get_scenario(cfg["scenario"])
    else:
        if "generator" not in cfg:
            raise ConfigurationError("config needs 'scenario' or an inline 'generator'")
        spec = generator_from_json(cfg["generator"])
        d = spec.dim
        dom = cfg.get("domain")
        bspec = box = None
        if dom is None:
            raise ConfigurationError("inline scenarios need a 'domain' (boundary or 'box')")
        if "box" in dom:
            lo, hi = (tuple(float(v) for v in row) for row in dom["box"])
            if len(lo) != d or len(hi) != d or any(a >= b for a, b in zip(lo, hi)):
                raise ConfigurationError("domain.box must be [[lo...], [hi...]] with lo < hi")
            box = Box(lo, hi)
        else:
            bspec = boundary_from_json(dom, d)
        sc = Scenario("inline", "inline scenario", spec, bspec, box)
    d = sc.dim
    if "h" in cfg:
        hs = cfg["h"]
        if not isinstance(hs, dict) or "type" in hs:
            hs = {"h": hs}
        sc.h = {k: field_from_descriptor(v, d, sc.spec) for k, v in hs.items()}
        sc.h_default = next(iter(sc.h))
        sc.exact = {k: v for k, v in sc.exact.items() if k in sc.h}
        for k, v in sc.h.items():
            sol = getattr(v, "solution", None)
            if sol is not None:
                sc.exact[k] = (lambda s: lambda lam, x: s.value_fn(
                    np.asarray(x, dtype=float).reshape(-1, d)).reshape(np.shape(x)[:-1]))(sol)
    if not sc.h:
        raise ConfigurationError("scenario has no right-hand side 'h'")
    return sc
