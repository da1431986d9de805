"""Projected BFGS, error-aware trust-region sub-problems and outer drivers.

Models passed to these routines expose ``value(mu)`` and ``gradient(mu)``;
reduced models additionally provide ``delta_J(mu)``.  Parameters live in a
box ``[lower, upper]``.
"""
from dataclasses import dataclass, field, asdict
import logging
import time

import numpy as np

from . import tsrblod
from .stability import SurrogateConstants

log = logging.getLogger(__name__)


class RadiusUnderflow(RuntimeError):
    """The trust-region radius fell below the admissible minimum."""


def project_box(mu, lower, upper):
    return np.minimum(np.maximum(mu, lower), upper)


def foc_norm(mu, g, lower, upper):
    """First-order criticality ``||mu - P(mu - g)||_2``."""
    return float(np.linalg.norm(mu - project_box(mu - g, lower, upper)))


def armijo_projected_step(fun, mu, f0, d, lower, upper, kappa=0.5, cap=50, c=1e-4, feasible=None):
    """Backtracking along the projected path ``P(mu + kappa^m d)``.

    Accepts the smallest ``m`` with
    ``fun(mu_m) <= f0 - c / kappa^m * ||mu_m - mu||^2`` and, if given,
    ``feasible(mu_m)``.

    Returns
    -------
    mu_new, f_new, m, ok
    """
    mu_m, f_m = mu, f0
    for m in range(cap + 1):
        lam = kappa ** m
        mu_m = project_box(mu + lam * d, lower, upper)
        step = mu_m - mu
        if not np.any(step):
            return mu, f0, m, False
        if feasible is not None and not feasible(mu_m):
            continue
        f_m = fun(mu_m)
        if f_m <= f0 - c / lam * (step @ step):
            return mu_m, f_m, m, True
    return mu_m, f_m, cap, False


def _active_set(mu, g, lower, upper, eps):
    return ((mu - lower <= eps) & (g > 0)) | ((upper - mu <= eps) & (g < 0))


def bfgs_direction(H, g, active):
    """Kelley's reduced quasi-Newton direction."""
    inactive = ~active
    d = -g.copy()
    d[inactive] = -(H[np.ix_(inactive, inactive)] @ g[inactive])
    return d


def bfgs_update(H, s, y):
    """Inverse BFGS update; skipped when the curvature condition fails."""
    sy = s @ y
    if sy <= 1e-14 * np.linalg.norm(s) * np.linalg.norm(y):
        return H, False
    r = 1.0 / sy
    V = np.eye(s.size) - r * np.outer(s, y)
    return V @ H @ V.T + r * np.outer(s, s), True


@dataclass
class BfgsResult:
    mu: np.ndarray
    value: float
    gradient: np.ndarray
    iterations: int
    reason: str
    foc: float
    H: np.ndarray = field(default=None, repr=False)
    history: list = field(default_factory=list, repr=False)


def projected_bfgs(model, mu0, lower, upper, tol=1e-6, max_iter=400, kappa=0.5, cap=50,
                   feasible=None, stop=None, H0=None, eps_active=1e-3, callback=None):
    """Projected BFGS with Armijo backtracking on a box.

    Parameters
    ----------
    feasible : callable, optional
        Extra admissibility test of trial points (trust-region constraint).
    stop : callable, optional
        ``stop(mu) -> bool`` checked after every accepted step (boundary cut-off).
    H0 : ndarray, optional
        Initial inverse-Hessian approximation.

    Returns
    -------
    BfgsResult
        ``reason`` is one of ``"FOC"``, ``"boundary"``, ``"max_iter"``, ``"stalled"``.
    """
    mu = project_box(np.array(mu0, dtype=float), lower, upper)
    f = model.value(mu)
    g = model.gradient(mu)
    H = np.eye(mu.size) if H0 is None else H0.copy()
    hist = [mu.copy()]
    reason = "max_iter"
    it = 0
    foc = foc_norm(mu, g, lower, upper)
    while it < max_iter:
        if foc <= tol:
            reason = "FOC"
            break
        act = _active_set(mu, g, lower, upper, min(eps_active, foc))
        d = bfgs_direction(H, g, act)
        if g @ d >= 0:
            H = np.eye(mu.size)
            d = -g
        mu_new, f_new, _, ok = armijo_projected_step(model.value, mu, f, d, lower, upper,
                                                     kappa, cap, feasible=feasible)
        if not ok and np.any(d != -g):
            # retry along the steepest descent direction with fresh curvature
            H = np.eye(mu.size)
            mu_new, f_new, _, ok = armijo_projected_step(model.value, mu, f, -g, lower, upper,
                                                         kappa, cap, feasible=feasible)
        if not ok:
            reason = "stalled"
            break
        g_new = model.gradient(mu_new)
        # curvature pair restricted to the free variables (reduced BFGS)
        step, dg = mu_new - mu, g_new - g
        step[act], dg[act] = 0.0, 0.0
        H, _ = bfgs_update(H, step, dg)
        mu, f, g = mu_new, f_new, g_new
        it += 1
        hist.append(mu.copy())
        foc = foc_norm(mu, g, lower, upper)
        if callback is not None:
            callback(it, mu, f, foc)
        if stop is not None and stop(mu):
            reason = "boundary"
            break
    return BfgsResult(mu, f, g, it, reason, foc, H, hist)


def fom_bfgs(model, mu0, tol=1e-6, max_iter=400, kappa=0.5, cap=50):
    """Projected BFGS directly on a full-order model.

    Returns
    -------
    OptimizationResult
    """
    t0 = time.perf_counter()
    foc_hist = []
    res = projected_bfgs(model, mu0, model.lower, model.upper, tol, max_iter, kappa, cap,
                         callback=lambda it, mu, f, foc: foc_hist.append(foc))
    out = OptimizationResult(mu=res.mu, value=res.value, converged=res.reason == "FOC",
                             reason=res.reason, iterations=res.iterations,
                             history=[m.tolist() for m in res.history], foc_history=foc_hist,
                             counters=model.counter.as_dict())
    out.timings["total"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------
# Trust region
# ---------------------------------------------------------------------------
@dataclass
class TRParams:
    """Hyperparameters of the trust-region drivers."""
    delta0: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.95
    eta_rho: float = 0.75
    kappa: float = 0.5
    tau_sub: float = 1e-8
    tau_foc: float = 1e-6
    tau_loc: float = 1e-3
    max_outer: int = 40
    max_inner: int = 400
    armijo_cap: int = 50
    enlarge: float = 2.0
    skip_threshold: float = 1.0
    min_radius: float = 1e-14
    snapshot_tol: float = 1e-8
    exact_tol: float = 1e-12
    tau_refine: float = 10.0
    keep_hessian: bool = False
    eps0: float = 1e10
    eps_rate: float = 10.0
    rom_gradient: str = "exact"
    supremizers: bool = True

    def relaxation(self, k, relaxed):
        """``(eps_TR, eps_cond)`` at outer iteration ``k``."""
        if not relaxed:
            return 0.0, 0.0
        e = self.eps0 / self.eps_rate ** k if self.eps0 else 0.0
        return e, e


@dataclass
class TRState:
    k: int
    delta: float
    eps_tr: float = 0.0
    eps_cond: float = 0.0
    mus: list = field(default_factory=list)
    log: list = field(default_factory=list)


@dataclass
class OptimizationResult:
    mu: np.ndarray
    value: float
    converged: bool
    reason: str
    iterations: int
    history: list = field(default_factory=list)
    foc_history: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    timings: dict = field(default_factory=lambda: {"total": 0.0, "outer": 0.0, "inner": 0.0,
                                                   "stage1": 0.0, "stage2": 0.0})
    rejections: int = 0
    outer_iterations: int = 0
    stage1_sizes: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["mu"] = np.asarray(self.mu).tolist()
        return d


class _RomView:
    """Adapter giving the BFGS code a value/gradient surface with a cache of estimates."""

    def __init__(self, rom, estimate, gradient="exact"):
        self.rom = rom
        self.estimate = estimate
        self.mode = gradient

    def value(self, mu):
        return self.rom.evaluate(mu, gradient=False, estimate=False)["value"]

    def gradient(self, mu):
        if self.mode == "lagrangian":
            return self.rom.lagrangian_gradient(mu)
        return self.rom.evaluate(mu, estimate=False)["gradient"]

    def ratio(self, mu):
        h = self.rom.evaluate(mu, gradient=False, estimate=True)
        return h["delta_J"] / h["value"]


def agc_point(model, mu, lower, upper, kappa=0.5, cap=50, feasible=None):
    """First Armijo point along the projected steepest-descent path of ``model``.

    Returns
    -------
    mu_agc, value
    """
    f0 = model.value(mu)
    g = model.gradient(mu)
    mu_a, f_a, _, ok = armijo_projected_step(model.value, mu, f0, -g, lower, upper, kappa, cap,
                                             feasible=feasible)
    return (mu_a, f_a) if ok else (np.array(mu, dtype=float), f0)


def tr_subproblem(rom, mu_k, delta, eps_tr, params, lower, upper, estimate=True, H0=None):
    """Minimize the reduced functional inside the error-aware trust region.

    Returns
    -------
    BfgsResult
    """
    view = _RomView(rom, estimate, params.rom_gradient)
    bound = delta + eps_tr
    feasible = stop = None
    if estimate:
        feasible = lambda mu: view.ratio(mu) <= bound
        stop = lambda mu: params.beta2 * bound <= view.ratio(mu)
    return projected_bfgs(view, mu_k, lower, upper, params.tau_sub, params.max_inner, params.kappa,
                          params.armijo_cap, feasible=feasible, stop=stop, H0=H0)


def sufficient_decrease_check(fom_eval, rom, mu_new, J_agc, eps_cond, estimate=True):
    """Accept or reject ``mu_new``.

    Returns
    -------
    accept : bool
    fom_value : float or None
        FOM value if it had to be computed.
    branch : str
        ``"cheap-sufficient"``, ``"cheap-necessary"`` or ``"fom"``.
    """
    if estimate:
        h = rom.evaluate(mu_new, gradient=False, estimate=True)
        if h["value"] + h["delta_J"] <= J_agc + eps_cond:
            return True, None, "cheap-sufficient"
        if h["value"] - h["delta_J"] > J_agc + eps_cond:
            return False, None, "cheap-necessary"
    J = fom_eval(mu_new).value
    return J <= J_agc + eps_cond, J, "fom"


class TRDriver:
    """Certified and relaxed trust-region optimization with the two-stage reduced model.

    Parameters
    ----------
    disc : LodDiscretization
        Full-order model.
    objective : Objective
    params : TRParams
    relaxed : bool
    constants : estimator constants provider, optional
    """

    def __init__(self, disc, objective, params=None, relaxed=False, constants=None):
        self.disc = disc
        self.objective = objective
        self.params = params or TRParams()
        self.relaxed = relaxed
        self.problem = disc.problem
        self.counter = disc.counter
        self._constants = constants
        self._fom = {}
        self._extra = {}

    def fom(self, mu):
        key = np.asarray(mu, float).tobytes()
        if key not in self._fom:
            self._fom[key] = self.disc.evaluate(self.objective, mu, gradient=True, keep_z=True)
        return self._fom[key]

    def _prune(self, keep):
        """Drop cached full-order states except ``keep``; corrector data is released."""
        key = np.asarray(keep, float).tobytes()
        state = self._fom[key]
        state.correctors = None
        self._fom = {key: state}

    def _enrich(self, models, mu, state, gram, tau):
        t = time.perf_counter()
        for m in models:
            if gram and not m.gram_ready:
                m.assemble_gram()
        tsrblod.stage1_enrich(models, mu, tau if gram else None, state)
        if self.params.supremizers and state.correctors is not None:
            phi = self.disc.supremizer(state.p_H, state.correctors)
            self._extra[np.asarray(mu, float).tobytes()] = (
                phi.u_H, [m.coordinates(v) for m, v in zip(models, phi.parts)])
        return time.perf_counter() - t

    def _build(self, rom, mus):
        t = time.perf_counter()
        rom.build(mus, extra=list(self._extra.values()))
        return time.perf_counter() - t

    def run(self, mu0):
        P = self.params
        lo, up = self.problem.lower, self.problem.upper
        t_start = time.perf_counter()
        res = OptimizationResult(mu=None, value=None, converged=False, reason="max_iter", iterations=0)
        T = res.timings
        if self._constants is None:
            t = time.perf_counter()
            self._constants = SurrogateConstants(self.disc, self.objective)
            T["stage2"] += time.perf_counter() - t
        mu = project_box(np.array(mu0, dtype=float), lo, up)
        st = TRState(k=0, delta=P.delta0, mus=[mu])
        fom = self.fom(mu)
        foc = foc_norm(mu, fom.gradient, lo, up)
        res.foc_history.append(foc)
        res.history.append(mu.tolist())
        if foc <= P.tau_foc:
            res.converged, res.reason = True, "FOC"
            res.mu, res.value = mu, fom.value
            res.counters = self.counter.as_dict()
            T["total"] = time.perf_counter() - t_start
            return res
        eps_tr, eps_cond = P.relaxation(0, self.relaxed)
        skip = eps_tr >= P.skip_threshold
        models = tsrblod.build_stage1(self.disc, gram=not skip)
        T["stage1"] += self._enrich(models, mu, fom, not skip, None)
        rom = tsrblod.TwoScaleROM(self.disc, self.objective, models, self._constants)
        T["stage2"] += self._build(rom, st.mus)
        H = None
        k = 0
        tau_loc = P.tau_loc
        while k < P.max_outer:
            eps_tr, eps_cond = P.relaxation(k, self.relaxed)
            estimate = not (eps_tr >= P.skip_threshold)
            st.k, st.eps_tr, st.eps_cond = k, eps_tr, eps_cond
            t_in = time.perf_counter()
            view = _RomView(rom, estimate, P.rom_gradient)
            bound = st.delta + eps_tr
            feas = (lambda m: view.ratio(m) <= bound) if estimate else None
            mu_agc, J_agc = agc_point(view, mu, lo, up, P.kappa, P.armijo_cap, feasible=feas)
            sub = tr_subproblem(rom, mu, st.delta, eps_tr, P, lo, up, estimate=estimate,
                                H0=H if P.keep_hessian else None)
            T["inner"] += time.perf_counter() - t_in
            t_out = time.perf_counter()
            accept, J_new, branch = sufficient_decrease_check(self.fom, rom, sub.mu, J_agc, eps_cond, estimate)
            entry = {"k": k, "delta": st.delta, "eps_tr": eps_tr, "eps_cond": eps_cond,
                     "inner_iterations": sub.iterations, "inner_reason": sub.reason,
                     "J_r": sub.value, "J_agc": J_agc, "branch": branch, "accepted": bool(accept),
                     "estimator": bool(estimate), "rom_size": list(rom.size)}
            k += 1
            if not accept:
                res.rejections += 1
                st.delta *= P.beta1
                H = None
                entry["radius_after"] = st.delta
                st.log.append(entry)
                T["outer"] += time.perf_counter() - t_out
                log.info("k=%d rejected (%s); radius -> %.3e", k - 1, branch, st.delta)
                here = self.fom(mu)
                gap = abs(rom.value(mu) - here.value) / abs(here.value)
                if branch == "fom" and gap > P.exact_tol:
                    # a gated reduced model can be off at the iterate by more than the
                    # attainable decrease; make it exact there before shrinking further
                    log.info("reduced model off by %.2e at the iterate; full local enrichment", gap)
                    if here.correctors is None:
                        here = self.disc.evaluate(self.objective, mu, gradient=True, keep_z=True)
                        self._fom[np.asarray(mu, float).tobytes()] = here
                    T["stage1"] += self._enrich(models, mu, here, estimate, None)
                    T["stage2"] += self._build(rom, st.mus)
                    entry["repaired_gap"] = gap
                self._prune(mu)
                if st.delta < P.min_radius:
                    res.reason = "radius_underflow"
                    break
                continue
            J_old_r = rom.value(mu)
            fom_new = self.fom(sub.mu)
            J_old = self.fom(mu).value
            pred = J_old_r - sub.value
            ratio = (J_old - fom_new.value) / pred if pred > 0 else -np.inf
            if ratio >= P.eta_rho:
                st.delta *= P.enlarge
            entry.update(J_h=fom_new.value, rho=float(ratio), radius_after=st.delta)
            H = sub.H
            mu = sub.mu
            st.mus.append(mu)
            res.history.append(mu.tolist())
            foc = foc_norm(mu, fom_new.gradient, lo, up)
            res.foc_history.append(foc)
            entry["foc"] = foc
            st.log.append(entry)
            log.info("k=%d accepted J=%.10f foc=%.3e delta=%.3e", k - 1, fom_new.value, foc, st.delta)
            T["outer"] += time.perf_counter() - t_out
            next_eps, _ = P.relaxation(k, self.relaxed)
            gram = not (next_eps >= P.skip_threshold)
            tau = tau_loc if (not self.relaxed or gram) else None
            if not self.relaxed and foc <= P.tau_foc:
                res.converged, res.reason = True, "FOC"
                break
            T["stage1"] += self._enrich(models, mu, fom_new, gram, tau)
            if self.relaxed and foc <= P.tau_foc:
                self._prune(mu)
                res.converged, res.reason = True, "FOC"
                break
            T["stage2"] += self._build(rom, st.mus)
            gap = abs(rom.value(mu) - fom_new.value) / abs(fom_new.value)
            if tau is not None and P.snapshot_tol is not None and gap > P.snapshot_tol:
                # gated Stage-1 models too coarse to reproduce the new snapshot
                tau_loc /= P.tau_refine
                log.info("snapshot gap %.2e; local tolerance refined to %.1e", gap, tau_loc)
                T["stage1"] += self._enrich(models, mu, fom_new, gram, None)
                T["stage2"] += self._build(rom, st.mus)
                gap = abs(rom.value(mu) - fom_new.value) / abs(fom_new.value)
            entry.update(snapshot_gap=gap, tau_loc=tau_loc)
            self._prune(mu)
        res.mu = mu
        res.value = self.fom(mu).value
        res.iterations = len(st.mus) - 1
        res.outer_iterations = k
        res.log = st.log
        res.counters = self.counter.as_dict()
        res.stage1_sizes = [m.size for m in models]
        self.models, self.rom = models, rom
        T["total"] = time.perf_counter() - t_start
        return res


def tr_driver(disc, objective, mu0, mode="certified", params=None, constants=None):
    """Run the certified or relaxed trust-region method from ``mu0``."""
    if mode not in ("certified", "relaxed"):
        raise ValueError(f"unknown mode {mode!r}")
    return TRDriver(disc, objective, params, relaxed=mode == "relaxed", constants=constants).run(mu0)
