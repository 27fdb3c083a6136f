"""Command-line entry point ``gridloop``.

Exit codes: 0 success, 1 validation error (bad arguments, scenario file,
inadmissible step size), 2 runtime failure.  Errors are reported on stderr
as one line ``ErrorClass: message``.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .certificates import CertificateError, verify_bounds
from .scenario_io import (ResultsBundle, ScenarioError, default_output_dir, export_results,
                          load_scenario, run_metadata)
from .simulation import (SimulationError, StepSizeError, certify_scenario, ensemble_settling,
                         instantaneous_optimum, run_closed_loop, run_ensemble)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parser():
    p = _Parser(prog="gridloop", description="Closed-loop grid optimization with state "
                                              "estimation.")
    p.add_argument("--version", action="version", version=f"gridloop {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one closed loop and write results")
    r.add_argument("scenario")
    r.add_argument("--out", help="output directory (default $GRIDLOOP_OUTPUT_DIR or ./results)")
    r.add_argument("--seed", type=int)
    r.add_argument("--plant", choices=["linear", "nonlinear"])

    c = sub.add_parser("certify", help="print the certificate report as JSON")
    c.add_argument("scenario")

    e = sub.add_parser("ensemble", help="Monte Carlo check of the certified bounds")
    e.add_argument("scenario")
    e.add_argument("--runs", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--plant", choices=["linear", "nonlinear"])

    o = sub.add_parser("oracle", help="print the optimal set-points for the initial loads")
    o.add_argument("scenario")
    return p


def _cmd_run(args):
    sc = load_scenario(args.scenario)
    seed = sc.seed if args.seed is None else args.seed
    plant = args.plant or sc.plant
    report = certify_scenario(sc)
    t0 = time.perf_counter()
    traj = run_closed_loop(sc, seed=seed, plant=plant)
    wall = time.perf_counter() - t0
    out = Path(args.out) if args.out else default_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    bundle = ResultsBundle(traj, report.to_dict(),
                           run_metadata(seed, wall, scenario=sc.name, plant=plant))
    export_results(bundle, out / "trajectory.csv", "table-csv")
    export_results(bundle, out / "results.json", "structured-json")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'results.json'}")
    return 0


def _cmd_certify(args):
    sc = load_scenario(args.scenario)
    print(json.dumps(certify_scenario(sc).to_dict(), indent=1, sort_keys=True))
    return 0


def _cmd_ensemble(args):
    sc = load_scenario(args.scenario)
    runs = args.runs or sc.ensemble_size
    if runs < 1:
        raise ValueError("--runs must be positive")
    report = certify_scenario(sc)
    ens = run_ensemble(sc, runs=runs, seed=args.seed, plant=args.plant)
    for chk in verify_bounds(ens, report):
        verdict = "PASS" if chk.passed else "FAIL"
        print(f"{verdict} {chk.name}: empirical={chk.empirical:.6g} bound={chk.bound:.6g} "
              f"ratio={chk.ratio:.6g}")
    est, opt = ensemble_settling(ens)
    print(f"settling (ensemble mean): estimation={est} optimization={opt}")
    return 0


def _cmd_oracle(args):
    sc = load_scenario(args.scenario)
    lin = sc.system().lin
    star = instantaneous_optimum(sc.loads.base, lin, sc.params, sc.feasible)
    print(" ".join(format(v, ".17g") for v in np.asarray(star)))
    return 0


_COMMANDS = {"run": _cmd_run, "certify": _cmd_certify, "ensemble": _cmd_ensemble,
             "oracle": _cmd_oracle}


def _fail(exc, code):
    msg = " ".join(str(exc).split())
    print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 1)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ScenarioError, StepSizeError, CertificateError, ValueError) as exc:
        return _fail(exc, 1)
    except (SimulationError, OSError, np.linalg.LinAlgError, RuntimeError) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
