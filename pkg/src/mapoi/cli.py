"""Command-line entry point.

    mapoi oi            --config run.ini [--seed N] [--workers N] [--paper-scale] [--out DIR]
    mapoi conventional  --config run.ini [...] [--q Q]
    mapoi map-validate  --config run.ini [...] [--n-test N]

``oi`` and ``conventional`` write ``manifest.json``, ``h_uncertainty.csv``,
``mu_uncertainty.csv``, ``spectrum.csv``, ``family.json`` and ``trace.csv``
into the output directory. Wall-clock timings go to ``timing.json`` so the
other files are byte-identical across reruns with the same seed.
Exit codes: 0 success, 1 run failure, 2 unusable configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .control import power_spectrum, write_spectrum_csv
from .data import DirectSolver
from .exceptions import ConfigurationError
from .inversion import write_grid_csv
from .oi import OIContext, OIResult, run_conventional, run_oi
from .rng import substream

logger = logging.getLogger("mapoi")

SPECTRUM_POINTS = 1500


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="run configuration file")
    common.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="master seed (overrides [run] seed)")
    common.add_argument("--workers", type=int, default=None, metavar="N",
                        help="parallel trial evaluations (default: available cores)")
    common.add_argument("--paper-scale", action="store_true",
                        help="full-size GA budgets, family size and map resolution")
    common.add_argument("--out", default=None, metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mapoi", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("oi", parents=[common], help="optimal identification run")
    conv = sub.add_parser("conventional", parents=[common],
                          help="inversion from one random field")
    conv.add_argument("--q", type=int, default=None, metavar="Q",
                      help="observation times (default: [run] conventional_Q)")
    val = sub.add_parser("map-validate", parents=[common],
                         help="build one map and report its accuracy and speed")
    val.add_argument("--n-test", type=int, default=200, metavar="N")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    try:
        if workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        cfg = load_config(args.config, seed=args.seed, workers=workers,
                          paper_scale=args.paper_scale, out=args.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    commands = {"oi": cmd_oi, "conventional": cmd_conventional, "map-validate": cmd_map_validate}
    try:
        if args.command == "conventional":
            return cmd_conventional(cfg, Q=args.q)
        if args.command == "map-validate":
            return cmd_map_validate(cfg, n_test=args.n_test)
        return commands[args.command](cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report, do not trace back
        logger.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _resolve(cfg) -> RunConfig:
    return cfg if isinstance(cfg, RunConfig) else load_config(cfg)


def cmd_oi(cfg) -> int:
    """Run optimal identification and write all artifacts."""
    cfg = _resolve(cfg)
    t0 = time.perf_counter()
    result = run_oi(cfg.truth, cfg.oi, cfg.seed)
    write_artifacts(cfg, result, time.perf_counter() - t0)
    _print_summary(result, cfg.out)
    return 0


def cmd_conventional(cfg, Q: int | None = None) -> int:
    """Run the single-random-field inversion and write all artifacts."""
    cfg = _resolve(cfg)
    if Q is not None and Q < 1:
        raise ConfigurationError("--q must be >= 1")
    t0 = time.perf_counter()
    result = run_conventional(cfg.truth, Q or cfg.oi.conventional_Q, cfg.oi, cfg.seed)
    write_artifacts(cfg, result, time.perf_counter() - t0)
    _print_summary(result, cfg.out)
    return 0


def cmd_map_validate(cfg, n_test: int = 200) -> int:
    """Build one map for a seeded random field; print and save its diagnostics."""
    cfg = _resolve(cfg)
    if n_test < 1:
        raise ConfigurationError("--n-test must be >= 1")
    context = OIContext(cfg.truth, cfg.oi, cfg.seed)
    lo, hi = context.knob_bounds[:, 0], context.knob_bounds[:, 1]
    knobs = substream(cfg.seed, 5).uniform(lo, hi)
    pulse = context.pulse(knobs)
    from .hdmr import CutHdmrMap  # local: only this command builds a bare map

    solver = DirectSolver(pulse, context.plan, cfg.oi.propagation, cfg.oi.initial)
    t0 = time.perf_counter()
    hdmr_map = CutHdmrMap(n_samples=cfg.oi.map_samples,
                          rms_threshold=cfg.oi.rms_threshold).fit(solver, context.domain, pulse)
    build_seconds = time.perf_counter() - t0
    diag = hdmr_map.validate(solver, n_test, substream(cfg.seed, 6))
    report = {
        "pulse": pulse.to_dict(),
        "Q": context.plan.Q,
        "S": cfg.oi.map_samples,
        "n_params": cfg.truth.values.size,
        "build_solves": diag.build_solves,
        "n_test": diag.n_test,
        "worst_rms": diag.worst_rms,
        "max_err": float(np.max(diag.max_err)),
        "flagged": bool(hdmr_map.flagged_),
    }
    timing = {"eval_seconds": diag.eval_seconds, "solve_seconds": diag.solve_seconds,
              "speedup": diag.speedup, "build_seconds": build_seconds,
              "workers": cfg.oi.workers}
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "map_report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    with open(cfg.out / "timing.json", "w") as fh:
        json.dump(timing, fh, indent=1)
    print(f"build_solves  {diag.build_solves}  (1 + {report['n_params']} x {report['S']})")
    print(f"rms error     {diag.worst_rms:.4g} (worst output){'  FLAGGED' if hdmr_map.flagged_ else ''}")
    print(f"max error     {report['max_err']:.4g}")
    print(f"eval          {diag.eval_seconds * 1e6:.2f} us/point")
    print(f"direct solve  {diag.solve_seconds * 1e6:.2f} us/point")
    print(f"speedup       {diag.speedup:.1f}x")
    print(f"report written to {cfg.out / 'map_report.json'}")
    return 0


# --------------------------------------------------------------------------- artifacts

def truth_reference(cfg: RunConfig) -> dict:
    return {
        "system_file": str(cfg.system_file) if cfg.system_file else "bundled",
        "dimension": cfg.truth.dimension,
        "sha1": hashlib.sha1(np.ascontiguousarray(cfg.truth.values).tobytes()).hexdigest(),
    }


def _accounting_counts(result: OIResult) -> dict:
    acc = result.accounting.to_dict()
    return {k: v for k, v in acc.items() if not k.startswith("seconds")}


def build_manifest(cfg: RunConfig, result: OIResult) -> dict:
    return {
        "command": result.mode,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "truth": truth_reference(cfg),
        "Q": result.Q,
        "M": result.M,
        "trace": [{"generation": g, "best_cost": b, "mean_cost": m, "evals": e}
                  for g, b, m, e in result.trace],
        "result": {
            "pulse": result.pulse.to_dict(),
            "dataset": result.dataset.to_dict(),
            "delta": result.delta.tolist(),
            "rel_width": result.rel_width.tolist(),
            "average_rel_uncertainty": result.average,
            "uncertainty": result.uncertainty,
            "cost": result.cost,
            "trial_fields": result.trial_fields,
            "family_size": result.family.size,
            "converged": result.family.converged,
            "flags": list(result.family.flags),
            "accounting": _accounting_counts(result),
        },
    }


def write_artifacts(cfg: RunConfig, result: OIResult, seconds: float) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(build_manifest(cfg, result), fh, indent=1)
    write_grid_csv(out / "h_uncertainty.csv", result.h_grid)
    write_grid_csv(out / "mu_uncertainty.csv", result.mu_grid)
    grid = np.linspace(0.0, 1.5 * result.pulse.omega_max, SPECTRUM_POINTS)
    write_spectrum_csv(out / "spectrum.csv", power_spectrum(result.pulse, grid))
    family = result.family.to_dict()
    family["config"] = cfg.to_dict()
    family["dataset"] = {"pulse_id": result.dataset.pulse_id, "seed": result.dataset.seed,
                         "Q": result.Q, "M": result.M, "manifest": "manifest.json"}
    with open(out / "family.json", "w") as fh:
        json.dump(family, fh, indent=1)
    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["generation", "best_cost", "mean_cost", "evals"])
        for g, b, m, e in result.trace:
            writer.writerow([g, repr(b), repr(m), e])
    timing = {k: v for k, v in result.accounting.to_dict().items() if k.startswith("seconds")}
    timing["total_seconds"] = seconds
    timing["workers"] = cfg.oi.workers
    with open(out / "timing.json", "w") as fh:
        json.dump(timing, fh, indent=1)


def _print_summary(result: OIResult, out) -> None:
    avg = result.average
    print(f"{result.mode}: Q={result.Q} M={result.M} trial fields={result.trial_fields} "
          f"family={result.family.size}{'' if result.converged else ' (unconverged)'}")
    print(f"average relative uncertainty  H {avg['H']:.4%}  mu {avg['mu']:.4%}  all {avg['all']:.4%}")
    print(f"artifacts written to {out}")


if __name__ == "__main__":
    sys.exit(main())
