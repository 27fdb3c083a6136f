"""
Stability certificates
======================

Constants of the closed-loop convergence guarantee and the asymptotic
bounds on the estimation error (mean square) and the optimality error
(mean norm), plus a Monte Carlo check of those bounds.

Notation used in the code
-------------------------
``L``         composite gradient Lipschitz constant ``L_f + |Bc|^2 L_g``
``r_eps``     contraction factor ``sqrt(1 - 2 eta eps + eps^2 L^2)``
``sigma_lo``  smallest eigenvalue of the filter covariance over the run
``sigma_hi``  largest eigenvalue of the filter covariance over the run
``psi, tau``  Lyapunov decrease and noise-gain constants of the filter
``C_V, C_S``  limits of E|V_hat - V|^2 and E|S_c - S_c*|
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .estimator import covariance_bounds

PSI_MARGIN = 0.99
TAIL_FRACTION = 0.2


class CertificateError(ValueError):
    pass


@dataclass(frozen=True)
class CertificateReport:
    eta: float
    L_f: float
    L_g: float
    opnorm_Bc: float
    L: float
    eps: float
    eps_max: float
    r_eps: float
    psi: float
    tau: float
    sigma_lo: float
    sigma_hi: float
    trace_sigma_l: float
    trace_sigma_y: float
    L_S_opt: float
    C_V: float
    C_S: float
    # transient envelope parameters
    filter_decay: float = 0.0  # 1 - psi * sigma_lo
    mixed_decay: float = 0.0  # max(r_eps, sqrt(1 - psi * sigma_lo))
    admitted: bool = field(default=False)

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                for k, v in asdict(self).items()}


def spectral_norm(A, rtol=1e-10, max_iter=100000, seed=0) -> float:
    """Largest singular value by power iteration on ``A^T A``.

    Stops once the eigen-residual ``|G x - lam x|`` is below ``rtol * lam``;
    for symmetric ``G`` this bounds the eigenvalue error by the same amount.
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0 or not np.any(A):
        return 0.0
    G = A.T @ A
    x = np.random.default_rng(seed).standard_normal(G.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = G @ x
        lam = float(x @ y)
        if np.linalg.norm(y - lam * x) <= rtol * abs(lam):
            break
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
    return float(np.sqrt(max(lam, 0.0)))


def composite_lipschitz(L_f, L_g, opnorm_Bc) -> float:
    return L_f + opnorm_Bc ** 2 * L_g


def max_step_size(eta, L_f, L_g, opnorm_Bc) -> float:
    """Largest admissible descent rate ``2 eta / (L^2 + |Bc|^2 L_g^2)``."""
    L = composite_lipschitz(L_f, L_g, opnorm_Bc)
    return 2.0 * eta / (L ** 2 + opnorm_Bc ** 2 * L_g ** 2)


def contraction_factor(eps, eta, L) -> float:
    rad = 1.0 - 2.0 * eta * eps + (eps * L) ** 2
    if rad < 0:
        if rad > -1e-14:
            return 0.0
        raise CertificateError(
            f"negative radicand {rad:.3e}: eta={eta} exceeds L={L}, constants inconsistent")
    return float(np.sqrt(rad))


def optimal_map_lipschitz(eta, L, eps_grid=None, n=2000) -> float:
    """Minimum of ``eps / (1 - r(eps))`` over the admissible part of a grid.

    The default grid is geometric on ``(0, 2 eta / L^2)`` so that the small
    step sizes, where the minimum sits, are resolved.
    """
    hi = 2.0 * eta / L ** 2
    if eps_grid is None:
        eps_grid = np.geomspace(hi * 1e-9, hi * (1 - 1e-9), n)
    best = np.inf
    for eps in np.asarray(eps_grid, dtype=float):
        if eps <= 0:
            continue
        r = contraction_factor(eps, eta, L)
        if r < 1:
            best = min(best, eps / (1.0 - r))
    if not np.isfinite(best):
        raise CertificateError("no admissible step size in the grid")
    return float(best)


def psi_tau(H, sigma_l, sigma_y, P_history, K_history, sigma_lo):
    """Filter constants from a covariance/gain history.

    ``P_history[i]`` is paired with ``K_history[i]`` (the gain computed from
    it).  ``psi`` is 99% of the smallest information eigenvalue seen, capped
    so that ``psi * sigma_lo < 1``; ``tau`` is the worst gain norm divided
    by ``sigma_lo``.
    """
    if not sigma_lo > 0:
        raise CertificateError("covariance lower bound must be positive; "
                               "raise the process-noise floor")
    lam = np.inf
    for P in P_history[: len(K_history)] if K_history else P_history:
        S = H @ (P + sigma_l) @ H.T + sigma_y
        info = H.T @ sla.cho_solve(sla.cho_factor(0.5 * (S + S.T)), H)
        lam = min(lam, float(np.linalg.eigvalsh(0.5 * (info + info.T))[0]))
    psi = PSI_MARGIN * lam
    if not psi > 0:
        raise CertificateError("information matrix is singular: state not observable")
    psi = min(psi, PSI_MARGIN / sigma_lo)
    worst = 0.0
    eye = np.eye(H.shape[1])
    for K in K_history:
        worst = max(worst, np.linalg.norm(K, 2) ** 2, np.linalg.norm(eye - K @ H, 2) ** 2)
    return float(psi), float(worst / sigma_lo)


def asymptotic_bounds(psi, tau, trace_sigma_l, trace_sigma_y, eps, r_eps, L_g,
                      opnorm_Bc, L_S_opt):
    """Limits ``(C_V, C_S)`` of the mean-square estimation error and the mean
    optimality error."""
    if r_eps >= 1:
        raise CertificateError(f"contraction factor {r_eps} is not below 1")
    if not psi > 0:
        raise CertificateError("psi must be positive")
    C_V = tau / psi * (trace_sigma_y + trace_sigma_l)
    C_S = (L_S_opt * np.sqrt(trace_sigma_l) + eps * opnorm_Bc * L_g * np.sqrt(C_V)) / (1 - r_eps)
    return float(C_V), float(C_S)


def certify(params, Bc, H, sigma_l, sigma_y, P_history, K_history, eps) -> CertificateReport:
    """Evaluate every constant for one configuration."""
    nb = spectral_norm(Bc)
    L = composite_lipschitz(params.L_f, params.L_g, nb)
    eps_max = max_step_size(params.eta, params.L_f, params.L_g, nb)
    r = contraction_factor(eps, params.eta, L)
    lo, hi = covariance_bounds(P_history)
    psi, tau = psi_tau(H, sigma_l, sigma_y, P_history, K_history, lo)
    ls_opt = optimal_map_lipschitz(params.eta, L)
    tr_l, tr_y = float(np.trace(sigma_l)), float(np.trace(sigma_y))
    if r < 1:
        C_V, C_S = asymptotic_bounds(psi, tau, tr_l, tr_y, eps, r, params.L_g, nb, ls_opt)
    else:
        C_V, C_S = tau / psi * (tr_y + tr_l), np.inf
    decay = 1.0 - psi * lo
    return CertificateReport(
        eta=params.eta, L_f=params.L_f, L_g=params.L_g, opnorm_Bc=nb, L=L, eps=eps,
        eps_max=eps_max, r_eps=r, psi=psi, tau=tau, sigma_lo=lo, sigma_hi=hi,
        trace_sigma_l=tr_l, trace_sigma_y=tr_y, L_S_opt=ls_opt, C_V=C_V, C_S=C_S,
        filter_decay=decay, mixed_decay=max(r, np.sqrt(decay)), admitted=eps < eps_max,
    )


@dataclass
class BoundCheck:
    name: str
    passed: bool
    empirical: float
    bound: float

    @property
    def ratio(self) -> float:
        """``bound / empirical``; above 1 means slack."""
        return self.bound / self.empirical if self.empirical > 0 else np.inf


def verify_bounds(ensemble, report: CertificateReport, tail_fraction=TAIL_FRACTION,
                  noise_free_tol=1e-6):
    """Compare ensemble statistics with the certified envelopes.

    ``ensemble`` needs arrays ``est_err`` (runs x T x 2N estimation errors),
    ``opt_err_norm`` (runs x T) and a ``noise_free`` flag.  The checks use
    the tail window (last ``tail_fraction`` of the horizon):

    * mean-square estimation error below ``C_V`` plus the filter transient,
    * mean optimality error below ``C_S`` plus the optimizer transient,
    * bias: ``|E[e_t]|^2`` below its exponential envelope plus 4 standard
      errors of the sample mean (for noise-free ensembles both error norms
      must instead be below ``noise_free_tol`` at the horizon).
    """
    e = np.asarray(ensemble.est_err)
    s = np.asarray(ensemble.opt_err_norm)
    runs, T = s.shape
    t = np.arange(T)
    tail = slice(int(np.floor(T * (1 - tail_fraction))), T)
    ms = np.mean(np.sum(e ** 2, axis=-1), axis=0)
    e0_ms = ms[0]
    s0 = float(np.mean(s[:, 0]))
    ratio = report.sigma_hi / report.sigma_lo
    env_v = report.C_V + ratio * report.filter_decay ** t * e0_ms
    env_s = (report.C_S + report.r_eps ** t * s0
             + report.eps * report.opnorm_Bc * report.L_g * np.sqrt(ratio * e0_ms)
             * t * report.mixed_decay ** t)
    mean_s = np.mean(s, axis=0)
    checks = [
        BoundCheck("C_V", bool(np.all(ms[tail] <= env_v[tail])),
                   float(np.max(ms[tail])), float(np.min(env_v[tail]))),
        BoundCheck("C_S", bool(np.all(mean_s[tail] <= env_s[tail])),
                   float(np.max(mean_s[tail])), float(np.min(env_s[tail]))),
    ]
    if ensemble.noise_free:
        worst = float(max(np.max(np.linalg.norm(e[:, -1], axis=-1)), np.max(s[:, -1])))
        checks.append(BoundCheck("noise_free", worst < noise_free_tol, worst, noise_free_tol))
    else:
        mean_e = np.mean(e, axis=0)
        bias = np.sum(mean_e ** 2, axis=-1)
        var = np.sum(np.var(e, axis=0, ddof=1), axis=-1) / runs
        env_b = ratio * report.filter_decay ** t * float(np.sum(mean_e[0] ** 2)) + 16.0 * var
        checks.append(BoundCheck("bias", bool(np.all(bias[tail] <= env_b[tail])),
                                 float(np.max(bias[tail])), float(np.min(env_b[tail]))))
    return checks
