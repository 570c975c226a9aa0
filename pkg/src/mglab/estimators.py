"""Monte Carlo estimators and statistical tests over simulated ensembles.

Discounted integrals use exact exponential weights for the piecewise-linear
interpolant of ``h`` between evaluation times, plus the frozen tail
``exp(-lam T) h(X_T) / lam``.  The tail error is at most
``2 ||h|| exp(-lam T) / lam``.

Every test passes iff ``|statistic| <= 3 * stderr + bias_budget``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DataError, PreconditionError
from .operators import eval_field, generator_apply

BIAS_CONSTANT = 2.0
Z_SCORE = 3.0


@dataclass
class McEstimate:
    value: float
    stderr: float
    n_paths: int
    bias_budget: float
    metadata: dict = field(default_factory=dict)

    @property
    def tolerance(self):
        return Z_SCORE * self.stderr + self.bias_budget

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr, "n_paths": self.n_paths,
                "bias_budget": self.bias_budget, "metadata": dict(self.metadata)}


@dataclass
class TestReport:
    __test__ = False

    test: str
    statistic: float
    stderr: float
    bias_budget: float
    passed: bool
    scenario: str = "custom"
    inputs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"test": self.test, "scenario": self.scenario, "statistic": self.statistic,
               "stderr": self.stderr, "bias_budget": self.bias_budget, "pass": bool(self.passed),
               "inputs": dict(self.inputs)}
        out.update(self.extra)
        return out


def _verdict(stat, se, bias):
    return bool(abs(stat) <= Z_SCORE * se + bias)


def mean_and_stderr(samples):
    v = np.asarray(samples, dtype=float)
    n = v.shape[0]
    if n == 0:
        raise PreconditionError("empty ensemble")
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def scheme_rate(meta):
    """``sqrt(dt)`` for reflected or non-smooth scenarios, ``dt`` otherwise."""
    dt = meta["dt"]
    return math.sqrt(dt) if meta.get("reflected") or not meta.get("smooth", True) else dt


def scheme_bias(meta, scale, C=BIAS_CONSTANT):
    bias = C * scheme_rate(meta) * scale
    vl = meta.get("variance_loss_bound")
    if vl:
        bias += C * vl * scale
    return bias


def tail_bound(lam, T, h_norm):
    return 2.0 * h_norm * math.exp(-lam * T) / lam


def required_horizon(lam, h_norm, tol):
    """Smallest ``T`` with ``2 ||h|| exp(-lam T) / lam <= tol``."""
    if h_norm <= 0:
        return 0.0
    return max(0.0, math.log(2.0 * h_norm / (lam * tol)) / lam)


def interval_weights(lam, width):
    """``(w0, w1)`` with ``int_0^w e^{-lam u} (h0 (1-u/w) + h1 u/w) du = w0 h0 + w1 h1``."""
    a = lam * width
    i0 = -math.expm1(-a) / lam
    if a < 1e-8:
        i1 = width * (0.5 - a / 3.0)
    else:
        i1 = (1.0 - math.exp(-a) * (1.0 + a)) / (lam * a)
    return i0 - i1, i1


# ---------------------------------------------------------------------------
# streaming observer


class DiscountObserver:
    """Accumulates discounted integrals of several fields for several rates.

    Fields are evaluated every ``every`` steps.  With ``local_time`` the
    discounted local times ``int e^{-lam t} d gamma_k`` are accumulated too.
    """

    def __init__(self, fields, lambdas, every=1, local_time=False, name="discount"):
        self.fields = dict(fields)
        self.lambdas = [float(l) for l in lambdas]
        self.every = int(every)
        self.local_time = local_time
        self.name = name

    def start(self, n, d, m, dt, T, n_steps, X0):
        if n_steps % self.every:
            raise ConfigurationError(f"observer stride {self.every} must divide {n_steps} steps")
        self.dt = dt
        self.T = T
        width = self.every * dt
        self.w = {lam: interval_weights(lam, width) for lam in self.lambdas}
        self.acc = {(k, lam): np.zeros(n) for k in self.fields for lam in self.lambdas}
        self.prev = {k: eval_field(f, X0) for k, f in self.fields.items()}
        self.hmax = {k: float(np.max(np.abs(v))) for k, v in self.prev.items()}
        self.t_prev = 0.0
        self.lt = {lam: np.zeros((n, m)) for lam in self.lambdas} if self.local_time else None

    def step(self, i, t, X, push):
        if self.lt is not None and push is not None:
            idx, col, delta = push
            for lam in self.lambdas:
                self.lt[lam][idx, col] += math.exp(-lam * t) * delta
        if i % self.every:
            return
        for k, f in self.fields.items():
            hv = eval_field(f, X)
            self.hmax[k] = max(self.hmax[k], float(np.max(np.abs(hv))))
            hp = self.prev[k]
            for lam in self.lambdas:
                w0, w1 = self.w[lam]
                self.acc[(k, lam)] += math.exp(-lam * self.t_prev) * (w0 * hp + w1 * hv)
            self.prev[k] = hv
        self.t_prev = t

    def finish(self, X):
        out = {"T": self.T, "every": self.every, "values": {}, "hmax": dict(self.hmax),
               "fields": dict(self.fields), "local_time": None}
        for (k, lam), a in self.acc.items():
            out["values"][(k, lam)] = a + math.exp(-lam * self.T) * self.prev[k] / lam
        if self.lt is not None:
            out["local_time"] = {lam: v for lam, v in self.lt.items()}
        return out


# ---------------------------------------------------------------------------
# discounted payoffs


def _field_on_states(h, states):
    n, R1, d = states.shape
    return eval_field(h, states.reshape(-1, d)).reshape(n, R1)


def _interval_contributions(hv, times, lam):
    """Per-interval discounted contributions ``(n, R)`` and the tail ``(n,)``."""
    widths = np.diff(times)
    if not np.allclose(widths, widths[0]):
        raise PreconditionError("recording grid is not uniform")
    w0, w1 = interval_weights(lam, widths[0])
    disc = np.exp(-lam * times[:-1])
    contrib = disc * (w0 * hv[:, :-1] + w1 * hv[:, 1:])
    tail = math.exp(-lam * times[-1]) * hv[:, -1] / lam
    return contrib, tail


def discount_samples(ens, h, lam, key=None):
    """Per-path discounted integrals and the observed ``max |h|``."""
    for ob in ens.observers.values():
        if not isinstance(ob, dict) or "values" not in ob:
            continue
        k = key
        if k is None:
            k = next((name for (name, l) in ob["values"] if l == lam and
                      ob.get("fields", {}).get(name) is h), None)
        if k is not None and (k, lam) in ob["values"]:
            return ob["values"][(k, lam)], ob["hmax"][k]
    if ens.meta["record"] != "full":
        raise PreconditionError("ensemble has neither recorded paths nor a matching observer")
    hv = _field_on_states(h, ens.states)
    contrib, tail = _interval_contributions(hv, ens.times, lam)
    return contrib.sum(axis=1) + tail, float(np.max(np.abs(hv)))


def discounted_payoff(ens, h, lam, tol=None, h_norm=None, key=None, C=BIAS_CONSTANT,
                      scenario=None, subset=None):
    """Estimate ``E int_0^inf e^{-lam t} h(X_t) dt`` from an ensemble.

    ``subset`` (index array or slice) restricts the estimate to some paths,
    e.g. one starting point of a batched ensemble.
    """
    if lam <= 0:
        raise ConfigurationError("lambda must be positive")
    samples, hmax = discount_samples(ens, h, lam, key)
    if subset is not None:
        samples = samples[subset]
    hn = hmax if h_norm is None else float(h_norm)
    T = ens.meta["T"]
    if tol is not None:
        need = required_horizon(lam, hn, tol)
        if T < need - 1e-12:
            raise ConfigurationError(
                f"horizon T={T:g} too short for tail tolerance {tol:g}: need T >= {need:.4g}")
    value, se = mean_and_stderr(samples)
    bias = tail_bound(lam, T, hn) + scheme_bias(ens.meta, hn / lam, C)
    return McEstimate(value, se, len(samples), bias, {
        "lambda": lam, "h": getattr(h, "descriptor", key or "field"),
        "scenario": scenario or ens.meta.get("scenario"), "T": T, "dt": ens.meta["dt"],
        "h_norm": hn, "tail_bound": tail_bound(lam, T, hn)})


def discounted_local_time(ens, lam, key="discount"):
    """``E int_0^inf e^{-lam t} d gamma_k`` per piece; needs a local-time observer."""
    ob = ens.observers.get(key)
    if not ob or not ob.get("local_time") or lam not in ob["local_time"]:
        raise PreconditionError("ensemble lacks a discounted local-time observer for this rate")
    v = ob["local_time"][lam]
    out = []
    for k in range(v.shape[1]):
        mean, se = mean_and_stderr(v[:, k])
        out.append(McEstimate(mean, se, v.shape[0], 0.0, {"lambda": lam, "piece": k + 1}))
    return out


# ---------------------------------------------------------------------------
# martingale tests


def _grid_index(times, t):
    j = int(np.searchsorted(times, t - 1e-9 * max(1.0, abs(t))))
    if j >= len(times) or abs(times[j] - t) > 1e-9 * max(1.0, abs(t)):
        raise PreconditionError(f"time {t:g} is not on the recording grid")
    return j


def _trapezoid(vals, times):
    if vals.shape[1] < 2:
        return np.zeros(vals.shape[0])
    return np.sum(0.5 * (vals[:, 1:] + vals[:, :-1]) * np.diff(times), axis=1)


def martingale_increment_test(ens, f, g, t, r, weights=(), C=BIAS_CONSTANT, scenario=None):
    """``E[(f(X_{t+r}) - f(X_t) - int_t^{t+r} g(X_s) ds) prod h_i(X_{t_i})] = 0``.

    ``weights`` is a list of ``(t_i, h_i)`` with ``t_i <= t``.  Integrals
    use the trapezoid rule on the recording grid.
    """
    if ens.n_paths == 0:
        raise PreconditionError("empty ensemble")
    if ens.meta["record"] != "full":
        raise PreconditionError("martingale test needs recorded paths")
    if t + r > ens.meta["T"] + 1e-12:
        raise PreconditionError("t + r exceeds the horizon")
    j0, j1 = _grid_index(ens.times, t), _grid_index(ens.times, t + r)
    X = ens.states
    d = X.shape[2]
    fv0 = eval_field(f, X[:, j0])
    fv1 = eval_field(f, X[:, j1])
    seg = X[:, j0:j1 + 1]
    gv = eval_field(g, seg.reshape(-1, d)).reshape(seg.shape[0], -1)
    stat = fv1 - fv0 - _trapezoid(gv, ens.times[j0:j1 + 1])
    wprod = np.ones(ens.n_paths)
    wsup = 1.0
    for ti, hi in weights:
        if ti > t + 1e-12:
            raise PreconditionError("weight times must not exceed t")
        hv = eval_field(hi, X[:, _grid_index(ens.times, ti)])
        wprod *= hv
        wsup *= max(1e-300, float(np.max(np.abs(hv))))
    value, se = mean_and_stderr(stat * wprod)
    scale = r * (1.0 + float(np.max(np.abs(gv)))) * wsup
    bias = scheme_bias(ens.meta, scale, C)
    return TestReport("martingale_increment", value, se, bias, _verdict(value, se, bias),
                      scenario or ens.meta.get("scenario"),
                      {"f": getattr(f, "descriptor", "field"), "g": getattr(g, "descriptor", "field"),
                       "t": t, "r": r, "n_weights": len(weights), "n_paths": ens.n_paths})


def constrained_martingale_test(ens, f, spec, bspec, t=None, lam=None, C=BIAS_CONSTANT,
                                scenario=None):
    """Zero mean of ``f(X_t) - f(X_0) - int Af - sum_k int B_k f dgamma_k``.

    With ``lam`` the discounted form is used:
    ``e^{-lam t} f(X_t) - f(X_0) - int e^{-lam s}(Af - lam f) ds
    - sum_k int e^{-lam s} B_k f dgamma_k``.  Local-time integrals are sums
    over recorded pushes of ``B_k f`` at the boundary foot point times the
    push length.
    """
    if ens.n_pieces == 0 or "foot" not in ens.push_log:
        raise PreconditionError("paths carry no local times")
    if ens.meta["record"] != "full":
        raise PreconditionError("constrained martingale test needs recorded paths")
    t = ens.meta["T"] if t is None else t
    j1 = _grid_index(ens.times, t)
    X = ens.states[:, : j1 + 1]
    n, R1, d = X.shape
    times = ens.times[: j1 + 1]
    Af = generator_apply(spec, f, X.reshape(-1, d)).reshape(n, R1)
    fv = f.value_fn(X.reshape(-1, d)).reshape(n, R1)
    if lam is None:
        integrand = Af
        end = fv[:, -1]
    else:
        integrand = np.exp(-lam * times) * (Af - lam * fv)
        end = math.exp(-lam * t) * fv[:, -1]
    stat = end - fv[:, 0] - _trapezoid(integrand, times)
    pl = ens.push_log
    sel = pl["step"] * ens.meta["dt"] <= t + 1e-12
    bsum = np.zeros(n)
    bmax = 0.0
    if np.any(sel):
        foot = pl["foot"][sel]
        piece = pl["piece"][sel]
        bf = np.zeros(len(foot))
        for k in np.unique(piece):
            s = piece == k
            bf[s] = np.einsum("ni,ni->n", f.gradient_fn(foot[s]), bspec.ell_k(int(k), foot[s]))
        w = pl["delta"][sel] * bf
        if lam is not None:
            w = w * np.exp(-lam * pl["step"][sel] * ens.meta["dt"])
        np.add.at(bsum, pl["path"][sel], w)
        bmax = float(np.max(np.abs(bf)))
    stat = stat - bsum
    value, se = mean_and_stderr(stat)
    gam = float(np.mean(ens.local_times[:, j1].sum(axis=1)))
    scale = 1.0 + t * float(np.max(np.abs(Af))) + bmax * gam
    bias = scheme_bias(ens.meta, scale, C)
    return TestReport("constrained_martingale", value, se, bias, _verdict(value, se, bias),
                      scenario or ens.meta.get("scenario"),
                      {"f": f.descriptor, "t": t, "lambda": lam, "n_paths": n},
                      {"mean_local_time": gam})


def extended_pair_test(ens, u, h, lam, t=None, r=None, C=BIAS_CONSTANT, scenario=None):
    """Martingale increment test for the pair ``(u, lam u - h)``.

    ``u`` is anything exposing ``value(points)`` (a grid function raises
    on points outside its hull).
    """
    T = ens.meta["T"]
    if t is None:
        t = 0.0
    if r is None:
        r = T - t

    def uf(x):
        return np.asarray(u.value(x), dtype=float).reshape(x.shape[0])

    def g(x):
        return lam * uf(x) - eval_field(h, x)

    uf.descriptor = getattr(u, "descriptor", "u")
    g.descriptor = f"{lam:g}*u - h"
    rep = martingale_increment_test(ens, uf, g, t, r, C=C, scenario=scenario)
    rep.test = "extended_pair"
    rep.inputs["lambda"] = lam
    return rep


def resolvent_identity_test(ens_or_sim, f, spec, lam, C=BIAS_CONSTANT, scenario=None, key=None):
    """``f(x0) = E int_0^inf e^{-lam s} (lam f - Af)(X_s) ds`` from a common start.

    ``ens_or_sim`` is an ensemble started at a single point.  The field
    ``lam f - Af`` is integrated from the recording (or from an observer
    entry named ``key``).
    """
    ens = ens_or_sim
    x0 = ens.x0
    if not np.all(x0 == x0[0]):
        raise PreconditionError("resolvent identity needs a point-mass initial law")

    def q(x):
        return lam * f.value_fn(x) - generator_apply(spec, f, x)

    q.descriptor = f"{lam:g}*f - Af"
    est = discounted_payoff(ens, q, lam, key=key, C=C)
    lhs = float(f.value_fn(x0[:1])[0])
    disc = lhs - est.value
    if est.stderr == 0 and abs(disc) < 1e-12 * max(1.0, abs(lhs)):
        disc = 0.0
    return TestReport("resolvent_identity", disc, est.stderr, est.bias_budget,
                      _verdict(disc, est.stderr, est.bias_budget),
                      scenario or ens.meta.get("scenario"),
                      {"f": f.descriptor, "lambda": lam, "x0": x0[0].tolist(),
                       "n_paths": ens.n_paths}, {"mu_f": lhs, "estimate": est.value})


# ---------------------------------------------------------------------------
# restart and Laplace matching


@dataclass
class RestartResult:
    estimate: McEstimate
    pre: np.ndarray  # int_0^tau e^{-lam t} h dt per path
    post: np.ndarray  # int_tau^inf e^{-lam t} h dt per path
    H: np.ndarray  # e^{-lam tau}
    tau: np.ndarray

    @property
    def full_mean(self):
        return float(np.mean(self.pre + self.post))

    def tower_gap(self):
        """``E[full] - (E[pre] + E[H] * restart)``; zero up to rounding."""
        return self.full_mean - (float(np.mean(self.pre)) + float(np.mean(self.H)) * self.estimate.value)


def restart_estimate(ens, tau_rule, lam, h, C=BIAS_CONSTANT):
    """Discounted payoff under the restarted law with weight ``H = e^{-lam tau}``.

    ``tau_rule(ens)`` returns the per-path index of the stopping time on the
    recording grid and must only look at the path up to that index.
    Estimates ``E[H int_0^inf e^{-lam t} h(X_{tau+t}) dt] / E[H]``.
    """
    if ens.meta["record"] != "full":
        raise PreconditionError("restart estimate needs recorded paths")
    idx = np.asarray(tau_rule(ens), dtype=int)
    tau = ens.times[idx]
    hv = _field_on_states(h, ens.states)
    contrib, tail = _interval_contributions(hv, ens.times, lam)
    R = contrib.shape[1]
    before = np.arange(R)[None, :] < idx[:, None]
    pre = np.where(before, contrib, 0.0).sum(axis=1)
    post = np.where(before, 0.0, contrib).sum(axis=1) + tail
    H = np.exp(-lam * tau)
    EH = float(np.mean(H))
    if EH < 1e-12:
        raise DataError("degenerate restart weight: E[H] below 1e-12")
    value = float(np.mean(post)) / EH
    n = len(H)
    resid = post - value * H
    se = float(np.std(resid, ddof=1) / (math.sqrt(n) * EH)) if n > 1 and np.any(resid != resid[0]) else 0.0
    hn = float(np.max(np.abs(hv)))
    T = ens.meta["T"]
    bias = (tail_bound(lam, T, hn) + scheme_bias(ens.meta, hn / lam, C)) / EH
    est = McEstimate(value, se, n, bias, {"lambda": lam, "E[H]": EH,
                                          "h": getattr(h, "descriptor", "field")})
    return RestartResult(est, pre, post, H, tau)


def ks_distance(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return max(stats.ks_2samp(a[:, i], b[:, i]).statistic for i in range(a.shape[1]))


def laplace_match_test(ensA, ensB, hs, lambdas, C=BIAS_CONSTANT, ks_alpha_c=1.95,
                       scenario=None):
    """Compare discounted payoffs of two ensembles over rates and fields.

    Ensembles driven by the same noise (equal ``noise_key`` and initial
    states) are compared path by path; otherwise the standard errors are
    combined as independent.  The tolerance is ``3 * stderr`` plus the sum
    of both bias budgets.
    """
    n, m = ensA.n_paths, ensB.n_paths
    ks = ks_distance(ensA.x0, ensB.x0)
    crit = ks_alpha_c * math.sqrt((n + m) / (n * m))
    if ks > crit:
        raise PreconditionError(f"initial laws differ: KS distance {ks:.4g} > {crit:.4g}")
    if not isinstance(hs, dict):
        hs = {getattr(h, "descriptor", f"h{i}"): h for i, h in enumerate(hs)}
    paired = (ensA.meta.get("noise_key") == ensB.meta.get("noise_key")
              and np.array_equal(ensA.x0, ensB.x0))
    rows = []
    worst = None
    for name, h in hs.items():
        for lam in lambdas:
            a = discounted_payoff(ensA, h, lam, C=C)
            b = discounted_payoff(ensB, h, lam, C=C)
            if paired:
                sa, _ = discount_samples(ensA, h, lam)
                sb, _ = discount_samples(ensB, h, lam)
                _, se = mean_and_stderr(sa - sb)
            else:
                se = math.hypot(a.stderr, b.stderr)
            diff = a.value - b.value
            bias = a.bias_budget + b.bias_budget
            ok = _verdict(diff, se, bias)
            rows.append({"h": name, "lambda": lam, "valueA": a.value, "valueB": b.value,
                         "stderrA": a.stderr, "stderrB": b.stderr, "stderr_diff": se,
                         "bias_budget": bias, "pass": ok})
            margin = abs(diff) - (Z_SCORE * se + bias)
            if worst is None or margin > worst[0]:
                worst = (margin, rows[-1])
    passed = all(r["pass"] for r in rows)
    w = worst[1]
    return TestReport("laplace_match", w["valueA"] - w["valueB"], w["stderr_diff"], w["bias_budget"],
                      passed, scenario or ensA.meta.get("scenario"),
                      {"lambdas": list(lambdas), "h": list(hs), "paired": paired, "ks": ks},
                      {"rows": rows})


def lambda_sweep_csv(rows):
    lines = ["lambda,valueA,valueB,stderrA,stderrB,pass"]
    for r in rows:
        lines.append(f"{r['lambda']!r},{r['valueA']!r},{r['valueB']!r},{r['stderrA']!r},"
                     f"{r['stderrB']!r},{str(bool(r['pass'])).lower()}")
    return "\n".join(lines) + "\n"
