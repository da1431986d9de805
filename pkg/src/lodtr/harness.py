"""Experiment runner: configuration, method execution, reports and LOD/FEM studies."""
import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem, optim, problem as pb
from .counters import CATEGORIES, EvaluationCounter
from .lod import LodDiscretization
from .models import FemModel, LodModel, fem_state
from .stability import ExactConstants, SurrogateConstants

log = logging.getLogger(__name__)

METHODS = ("fem-bfgs", "lod-bfgs", "tr-tsrblod", "rtr-tsrblod")
REPORT_SCHEMA = 1
WORKERS_ENV = "LODTR_WORKERS"
TIMING_KEYS = ("total", "outer", "inner", "stage1", "stage2")


class ConfigError(pb.ConfigError):
    """Invalid experiment configuration."""


def _tr_fields():
    return {f.name: f for f in dataclasses.fields(optim.TRParams)}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``tr`` holds overrides of :class:`~lodtr.optim.TRParams` by field name.
    ``tau_foc`` and ``tau_loc`` are shared by all methods.
    """
    n_H: int = 8
    n_h: int = 160
    ell: int = 2
    N1: int = 20
    N2: int = 40
    seed: int = 0
    distribution: str = "uniform"
    sigma_d: float = 100.0
    sigma: float = 1e-3
    methods: tuple = METHODS
    output: str = "results"
    workers: int = 1
    rho: float = 1.0
    tau_foc: float = 1e-6
    tau_loc: float = 1e-3
    fom_max_iter: int = 400
    constants: str = "surrogate"
    fem_max_dofs: int = 4_000_000
    tr: dict = field(default_factory=dict)

    # -- construction ---------------------------------------------------
    @classmethod
    def from_preset(cls, name, **kw):
        if name not in pb.PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(pb.PRESETS)}")
        n_H, n_h, ell, N1, N2 = pb.PRESETS[name]
        return cls(n_H=n_H, n_h=n_h, ell=ell, N1=N1, N2=N2, **kw)

    @classmethod
    def from_sources(cls, path=None, overrides=None, env=None):
        """Merge defaults, an INI file, the environment and explicit overrides (in that order).

        The file has an ``[experiment]`` section (with an optional ``preset``
        key applied first) and an optional ``[optimizer]`` section of
        trust-region settings.
        """
        values, tr = {}, {}
        if path is not None:
            cp = configparser.ConfigParser()
            if not cp.read(path):
                raise ConfigError(f"cannot read config file {path}")
            if cp.has_section("experiment"):
                values.update(cp["experiment"])
            if cp.has_section("optimizer"):
                tr.update(cp["optimizer"])
        env = os.environ if env is None else env
        if env.get(WORKERS_ENV):
            values["workers"] = env[WORKERS_ENV]
        for k, v in (overrides or {}).items():
            if v is None:
                continue
            if k == "tr":
                tr.update(v)
            else:
                values[k] = v
        preset = values.pop("preset", None)
        cfg = cls.from_preset(preset) if preset else cls()
        names = {f.name: f for f in dataclasses.fields(cls)}
        for k, v in values.items():
            if k not in names or k == "tr":
                raise ConfigError(f"unknown experiment option {k!r}")
            setattr(cfg, k, _coerce(names[k], v))
        trf = _tr_fields()
        for k, v in tr.items():
            if k not in trf:
                raise ConfigError(f"unknown optimizer option {k!r}")
            cfg.tr[k] = _coerce(trf[k], v)
        cfg.validate()
        return cfg

    def validate(self):
        if self.n_H == self.n_h:
            raise ConfigError("coarse and fine meshes coincide (n_H == n_h)")
        try:
            pb.validate_sizes(self.n_H, self.n_h, self.ell, self.N1, self.N2)
        except pb.ConfigError as e:
            raise ConfigError(str(e)) from e
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.rho < 1:
            raise ConfigError("rho must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.constants not in ("surrogate", "exact"):
            raise ConfigError("constants must be 'surrogate' or 'exact'")
        if not (self.tau_foc > 0 and self.tau_loc > 0):
            raise ConfigError("tolerances must be positive")
        return self

    def tr_params(self):
        kw = dict(tau_foc=self.tau_foc, tau_loc=self.tau_loc)
        kw.update(self.tr)
        return optim.TRParams(**kw)

    def benchmark(self):
        return pb.build_benchmark(self.n_H, self.n_h, self.ell, self.N1, self.N2, seed=self.seed,
                                  distribution=self.distribution, sigma_d=self.sigma_d, sigma=self.sigma)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        return d


def _coerce(f, v):
    """Convert a string (from a file or the command line) to the type of dataclass field ``f``."""
    if not isinstance(v, str):
        return tuple(v) if f.name == "methods" else v
    if f.name == "methods":
        return tuple(m.strip() for m in v.split(",") if m.strip())
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if typ == "bool":
            return v.strip().lower() in ("1", "true", "yes", "on")
        if typ == "int":
            return int(v)
        if typ == "float":
            return float(v)
    except ValueError as e:
        raise ConfigError(f"bad value for {f.name}: {v!r}") from e
    return v


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class MethodReport:
    method: str
    converged: bool
    reason: str
    outer_iterations: int = 0
    counters: dict = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    timings: dict = field(default_factory=lambda: dict.fromkeys(TIMING_KEYS, 0.0))
    mu: list = field(default_factory=list)
    value: float = float("nan")
    value_desired: float = float("nan")
    rel_error: float = float("nan")
    foc: float = float("nan")
    rejections: int = 0
    history: list = field(default_factory=list)
    error: str = ""


@dataclass
class RunReport:
    config: dict
    methods: list = field(default_factory=list)
    schema: int = REPORT_SCHEMA

    @property
    def converged(self):
        return all(m.converged for m in self.methods)

    def method(self, name):
        return next(m for m in self.methods if m.method == name)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')}")
        return cls(config=d["config"], methods=[MethodReport(**m) for m in d["methods"]], schema=d["schema"])


TABLE_COLUMNS = ("method",) + CATEGORIES + ("outer it.",) + tuple(f"t_{k}" for k in TIMING_KEYS) + (
    "FOC", "rel. error", "converged")


def _rows(report):
    for m in report.methods:
        yield ([m.method] + [str(m.counters.get(c, 0)) for c in CATEGORIES] + [str(m.outer_iterations)]
               + [f"{m.timings.get(k, 0.0):.3f}" for k in TIMING_KEYS]
               + [f"{m.foc:.3e}", f"{m.rel_error:.3e}", "yes" if m.converged else "no"])


def format_table(report):
    rows = [list(TABLE_COLUMNS)] + list(_rows(report))
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    w.writerows(_rows(report))
    return buf.getvalue()


def emit_report(report, outdir, formats=("table", "csv", "json")):
    """Write ``report.txt``, ``report.csv`` and/or ``report.json`` into ``outdir``; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    writers = {
        "table": ("report.txt", format_table),
        "csv": ("report.csv", format_csv),
        "json": ("report.json", lambda r: json.dumps(r.to_dict(), indent=1, sort_keys=True) + "\n"),
    }
    paths = []
    for fmt in formats:
        if fmt not in writers:
            raise ValueError(f"unknown report format {fmt!r}")
        name, fn = writers[fmt]
        path = outdir / name
        path.write_text(fn(report))
        paths.append(path)
    return paths


def load_report(path):
    return RunReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# running methods
# ---------------------------------------------------------------------------
def make_constants(kind, disc, objective):
    return (ExactConstants if kind == "exact" else SurrogateConstants)(disc, objective)


def run_method(name, config, bench):
    """Execute one method on a prebuilt benchmark ``(problem, objective, mu0, ell)``."""
    problem, objective, mu0, ell = bench
    counter = EvaluationCounter()
    lo, up = problem.lower, problem.upper
    if name == "fem-bfgs":
        model = FemModel(problem, objective, counter=counter)
        res = optim.fom_bfgs(model, mu0, tol=config.tau_foc, max_iter=config.fom_max_iter)
        value_d = model.value(objective.mu_d)
        grad = model.gradient(res.mu)
    else:
        disc = LodDiscretization(problem, ell, rho=config.rho, workers=config.workers, counter=counter)
        if name == "lod-bfgs":
            model = LodModel(disc, objective)
            res = optim.fom_bfgs(model, mu0, tol=config.tau_foc, max_iter=config.fom_max_iter)
            grad = model.gradient(res.mu)
        else:
            mode = "relaxed" if name == "rtr-tsrblod" else "certified"
            consts = make_constants(config.constants, disc, objective)
            res = optim.tr_driver(disc, objective, mu0, mode, params=config.tr_params(), constants=consts)
            grad = disc.evaluate(objective, res.mu, gradient=True).gradient
        value_d = disc.evaluate(objective, objective.mu_d, gradient=False).value
    counters = dict(res.counters)
    return MethodReport(
        method=name, converged=bool(res.converged), reason=res.reason,
        outer_iterations=int(res.outer_iterations or res.iterations), counters=counters,
        timings={k: float(res.timings.get(k, 0.0)) for k in TIMING_KEYS},
        mu=np.asarray(res.mu).tolist(), value=float(res.value), value_desired=float(value_d),
        rel_error=float(abs(value_d - res.value) / abs(value_d)),
        foc=float(optim.foc_norm(res.mu, grad, lo, up)), rejections=int(res.rejections),
        history=[list(map(float, m)) for m in res.history])


def run(config):
    """Run all configured methods on the same seeded benchmark.

    A failing method is recorded with ``converged=False`` and its error
    message; the remaining methods still run.
    """
    config.validate()
    bench = config.benchmark()
    report = RunReport(config=config.to_dict())
    for name in config.methods:
        log.info("running %s", name)
        t = time.perf_counter()
        try:
            rep = run_method(name, config, bench)
        except Exception as e:  # noqa: BLE001 - captured per method
            log.exception("method %s failed", name)
            rep = MethodReport(method=name, converged=False, reason="error", error=f"{type(e).__name__}: {e}")
            rep.timings["total"] = time.perf_counter() - t
        report.methods.append(rep)
    return report


# ---------------------------------------------------------------------------
# LOD versus FEM
# ---------------------------------------------------------------------------
def lod_fine_solution(disc, mu):
    """Fine-node representation ``(1 - Q) u_H`` of the PG-LOD solution."""
    corr = disc.compute_correctors(mu, gradient=False)
    u_H = disc.solve_primal(mu, correctors=corr)
    return disc.ms_basis(corr) @ u_H


def energy_norm(problem, mu, v):
    return float(np.sqrt(v @ (problem.fine_stiffness(mu) @ v)))


def _fem_feasible(config):
    return (config.n_h + 1) ** 2 <= config.fem_max_dofs


def lod_fem_gap(config, mu=None, bench=None):
    """``|J_loc(mu) - J_h(mu)|`` at the configured patch size (default ``mu = mu_d``).

    Returns NaN (and logs a warning) when the fine FEM exceeds ``fem_max_dofs``.
    """
    problem, objective, _, ell = bench or config.benchmark()
    mu = objective.mu_d if mu is None else np.asarray(mu, float)
    disc = LodDiscretization(problem, ell, rho=config.rho, workers=config.workers)
    J_loc = disc.evaluate(objective, mu, gradient=False).value
    if not _fem_feasible(config):
        log.warning("fine FEM infeasible at n_h=%d; reporting the LOD functional only", config.n_h)
        return float("nan")
    J_h = FemModel(problem, objective).value(mu)
    gap = abs(J_loc - J_h)
    log.info("ell=%d  |J_loc - J_h| = %.3e", ell, gap)
    return float(gap)


def gap_study(config, ells, mu=None):
    """Functional gap and relative fine energy error of the PG-LOD for each patch size.

    Returns
    -------
    list of dict
        One row per ``ell`` with keys ``ell``, ``gap``, ``energy_error``,
        ``J_loc``, ``J_h`` and ``fem`` (False if the FEM reference was skipped).
    """
    problem, objective, _, _ = config.benchmark()
    mu = objective.mu_d if mu is None else np.asarray(mu, float)
    feasible = _fem_feasible(config)
    if feasible:
        u_h = fem_state(problem, mu)
        J_h = FemModel(problem, objective).value(mu)
        norm_h = energy_norm(problem, mu, u_h)
    rows = []
    for ell in ells:
        disc = LodDiscretization(problem, ell, rho=config.rho, workers=config.workers)
        J_loc = disc.evaluate(objective, mu, gradient=False).value
        row = {"ell": int(ell), "J_loc": float(J_loc), "fem": feasible,
               "J_h": float("nan"), "gap": float("nan"), "energy_error": float("nan")}
        if feasible:
            err = energy_norm(problem, mu, lod_fine_solution(disc, mu) - u_h) / norm_h
            row.update(J_h=float(J_h), gap=float(abs(J_loc - J_h)), energy_error=err)
        log.info("ell=%d gap=%.3e energy error=%.3e", ell, row["gap"], row["energy_error"])
        rows.append(row)
    return rows


def saturated_ell(config):
    """Smallest patch size whose patches cover the whole domain."""
    return config.n_H
