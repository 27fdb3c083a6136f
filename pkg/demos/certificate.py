"""How the convergence certificate is assembled for the reference feeder.

Each constant is printed next to the quantity it is computed from, then the
step size is swept to show the admissible interval and the contraction
factor r(eps).

    python demos/certificate.py
"""
import numpy as np

from gridloop.certificates import contraction_factor
from gridloop.scenario_io import reference_scenario
from gridloop.simulation import certify_scenario


def main():
    sc = reference_scenario()
    rep = certify_scenario(sc)

    print("objective and grid")
    print(f"  eta = {rep.eta}, L_f = {rep.L_f}, L_g = {rep.L_g}")
    print(f"  |B_c| = {rep.opnorm_Bc:.6f}  (power iteration on B_c^T B_c)")
    print(f"  L = L_f + |B_c|^2 L_g = {rep.L:.6f}")

    print("\nstep size")
    print(f"  eps_max = 2 eta / ((L_f + |B_c|^2 L_g)^2 + |B_c|^2 L_g^2) = {rep.eps_max:.6g}")
    print(f"  scenario eps = {rep.eps}, admitted = {rep.admitted}, r(eps) = {rep.r_eps:.6f}")
    for frac in (0.1, 0.5, 0.9, 0.999):
        eps = frac * rep.eps_max
        print(f"    eps = {eps:.3e}  r = {contraction_factor(eps, rep.eta, rep.L):.6f}")

    print("\nfilter constants (Riccati recursion over the horizon)")
    print(f"  covariance eigenvalues in [{rep.sigma_lo:.3e}, {rep.sigma_hi:.3e}]")
    print(f"  psi = {rep.psi:.4f}, tau = {rep.tau:.3e}, psi * sigma_lo = "
          f"{rep.psi * rep.sigma_lo:.3e} < 1")

    print("\nasymptotic bounds")
    print(f"  tr Sigma_l = {rep.trace_sigma_l:.3e}, tr Sigma_y = {rep.trace_sigma_y:.3e}")
    print(f"  C_V = {rep.C_V:.3e}   (mean-square estimation error)")
    print(f"  C_S = {rep.C_S:.3e}   (mean optimization error)")
    print(f"  L_S_opt = {rep.L_S_opt:.4f}  (limit 1/eta as eps -> 0)")
    # the bounds are loose because sigma_lo is set by the most precise sensors
    print(f"\n  condition of the covariance band: {rep.sigma_hi / rep.sigma_lo:.2e}")
    assert np.isfinite(rep.C_V) and np.isfinite(rep.C_S)


if __name__ == "__main__":
    main()
