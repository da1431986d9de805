"""Command line interface: ``lodtr run | gap-study | rom-dump | rom-check``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, optim, tsrblod
from .lod import LodDiscretization

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_CONFIG = 0, 1, 2


def _key_values(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise harness.ConfigError(f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _add_config_args(p):
    p.add_argument("--config", help="INI file with [experiment] and [optimizer] sections")
    p.add_argument("--preset", choices=sorted(harness.pb.PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help=f"thread pool size (env {harness.WORKERS_ENV})")
    p.add_argument("--output", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", dest="options",
                   help="override an experiment option")
    p.add_argument("--tr", action="append", metavar="KEY=VALUE",
                   help="override a trust-region option")


def _config(args, **extra):
    overrides = _key_values(args.options)
    for k in ("preset", "seed", "workers", "output"):
        if getattr(args, k, None) is not None:
            overrides[k] = getattr(args, k)
    overrides.update({k: v for k, v in extra.items() if v is not None})
    overrides["tr"] = _key_values(args.tr)
    return harness.ExperimentConfig.from_sources(args.config, overrides)


def cmd_run(args):
    cfg = _config(args, methods=args.methods)
    report = harness.run(cfg)
    paths = harness.emit_report(report, cfg.output, args.format)
    sys.stdout.write(harness.format_table(report))
    for p in paths:
        logging.info("wrote %s", p)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_gap_study(args):
    cfg = _config(args)
    ells = [int(x) for x in args.ells.split(",")]
    rows = harness.gap_study(cfg, ells)
    print(f"{'ell':>4} {'J_loc':>18} {'|J_loc - J_h|':>14} {'energy error':>13}")
    for r in rows:
        print(f"{r['ell']:>4} {r['J_loc']:>18.12f} {r['gap']:>14.3e} {r['energy_error']:>13.3e}")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gap_study.json").write_text(json.dumps({"schema": harness.REPORT_SCHEMA, "rows": rows}, indent=1))
    return EXIT_OK


def cmd_rom_dump(args):
    cfg = _config(args)
    problem, objective, mu0, ell = cfg.benchmark()
    disc = LodDiscretization(problem, ell, rho=cfg.rho, workers=cfg.workers)
    consts = harness.make_constants(cfg.constants, disc, objective)
    driver = optim.TRDriver(disc, objective, cfg.tr_params(), relaxed=args.mode == "relaxed", constants=consts)
    res = driver.run(mu0)
    path = Path(args.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    driver.rom.save(path)
    path.with_suffix(".json").write_text(json.dumps(cfg.to_dict(), indent=1))
    print(f"{args.mode} TR: {res.reason} after {res.outer_iterations} outer iterations; "
          f"reduced sizes {driver.rom.size}; saved to {path}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_rom_check(args):
    path = Path(args.path)
    cfg = harness.ExperimentConfig(**{k: (tuple(v) if k == "methods" else v)
                                      for k, v in json.loads(path.with_suffix(".json").read_text()).items()})
    problem, objective, _, ell = cfg.benchmark()
    disc = LodDiscretization(problem, ell, rho=cfg.rho, workers=cfg.workers)
    consts = harness.make_constants(cfg.constants, disc, objective)
    rom = tsrblod.TwoScaleROM.load(path, disc, objective, consts)
    rng = np.random.default_rng(args.seed)
    mus = list(rom.snapshot_mus) + [rng.uniform(problem.lower, problem.upper) for _ in range(args.samples)]
    print(f"{'kind':>8} {'J_h':>16} {'|J_h - J_r|':>12} {'Delta_J':>12} {'effectivity':>12}")
    ok = True
    for i, mu in enumerate(mus):
        J_h = disc.evaluate(objective, mu, gradient=False).value
        h = rom.evaluate(mu, gradient=False, estimate=True)
        err = abs(J_h - h["value"])
        eff = h["delta_J"] / err if err > 0 else float("inf")
        kind = "snapshot" if i < len(rom.snapshot_mus) else "random"
        bad = h["delta_J"] < err or (kind == "snapshot" and err > args.snapshot_tol * abs(J_h))
        ok &= not bad
        print(f"{kind:>8} {J_h:>16.10f} {err:>12.3e} {h['delta_J']:>12.3e} {eff:>12.3e}{'  FAIL' if bad else ''}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def build_parser():
    ap = argparse.ArgumentParser(prog="lodtr", description=__doc__)
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the selected optimization methods")
    _add_config_args(p)
    p.add_argument("--methods", help="comma separated subset of " + ",".join(harness.METHODS))
    p.add_argument("--format", nargs="+", default=["table", "csv", "json"], choices=["table", "csv", "json"])
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("gap-study", help="LOD versus FEM functional gap over patch sizes")
    _add_config_args(p)
    p.add_argument("--ells", default="1,2,3")
    p.set_defaults(fn=cmd_gap_study)

    p = sub.add_parser("rom-dump", help="run a trust-region method and store its reduced model")
    _add_config_args(p)
    p.add_argument("--mode", choices=["certified", "relaxed"], default="certified")
    p.add_argument("path", help="output .npz file")
    p.set_defaults(fn=cmd_rom_dump)

    p = sub.add_parser("rom-check", help="validate a stored reduced model against the PG-LOD")
    p.add_argument("path", help=".npz file written by rom-dump")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snapshot-tol", type=float, default=1e-8)
    p.set_defaults(fn=cmd_rom_check)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except harness.ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
