"""Monte Carlo check of the stochastic error bounds.

Runs 100 independently seeded closed loops with random-walk loads and noisy
measurements, compares the tail-window error statistics with C_V and C_S and
reports the settling times of the ensemble-mean error curves.

    python demos/ensemble_bounds.py [runs]
"""
import sys
import time

import numpy as np

from gridloop.certificates import verify_bounds
from gridloop.scenario_io import reference_scenario
from gridloop.simulation import certify_scenario, ensemble_settling, run_ensemble


def main(runs=100):
    sc = reference_scenario()
    rep = certify_scenario(sc)
    t0 = time.perf_counter()
    ens = run_ensemble(sc, runs=runs)
    print(f"{runs} runs x {sc.horizon} steps in {time.perf_counter() - t0:.1f} s")

    T = ens.opt_err_norm.shape[1]
    tail = slice(int(0.8 * T), T)
    ms_est = np.mean(np.sum(ens.est_err ** 2, axis=-1), axis=0)
    mean_opt = np.mean(ens.opt_err_norm, axis=0)
    print(f"tail E|V_hat - V|^2 = {ms_est[tail].mean():.3e}   C_V = {rep.C_V:.3e}")
    print(f"tail E|S_c - S*|    = {mean_opt[tail].mean():.3e}   C_S = {rep.C_S:.3e}")

    for check in verify_bounds(ens, rep):
        verdict = "PASS" if check.passed else "FAIL"
        print(f"{verdict} {check.name}: empirical={check.empirical:.3e} "
              f"bound={check.bound:.3e} ratio={check.ratio:.3e}")

    est, opt = ensemble_settling(ens)
    print(f"settling of the ensemble mean: estimation {est}, optimization {opt} steps")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 100)
