"""Kalman-filter dynamic state estimation for the random-walk grid model.

The prediction model is ``V_t = V_{t-1} + Bc (S_c,t - S_c,t-1) + w_l`` with
``w_l ~ N(0, sigma_l)``; measurements follow ``y = H V + w_y``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla


@dataclass(frozen=True, eq=False)
class EstimatorState:
    """Filter state.  ``V_hat`` may carry a leading batch axis: the gain and
    covariance do not depend on the data, so independent runs share them."""

    V_hat: np.ndarray
    P: np.ndarray
    K: np.ndarray | None = None
    t: int = 0


@dataclass(frozen=True, eq=False)
class ProcessNoiseModel:
    sigma_l: np.ndarray
    full_rank: bool = False

    @classmethod
    def from_load_increments(cls, Bl, sigma_delta, floor=0.0):
        """``Bl sigma_delta Bl^T`` plus an optional fictitious diagonal floor."""
        sig = Bl @ np.asarray(sigma_delta) @ Bl.T
        sig = 0.5 * (sig + sig.T) + floor * np.eye(Bl.shape[0])
        eig = np.linalg.eigvalsh(sig)
        if eig[0] < -1e-12 * max(1.0, eig[-1]):
            raise ValueError("process noise covariance is not positive semidefinite")
        return cls(sigma_l=sig, full_rank=bool(eig[0] > 1e-14 * max(eig[-1], 1e-300)))


def initial_state(V0, p0=1.0) -> EstimatorState:
    V0 = np.asarray(V0, dtype=float)
    return EstimatorState(V_hat=V0.copy(), P=p0 * np.eye(V0.shape[-1]))


def kalman_gain(P_prev, sigma_l, H, sigma_y) -> np.ndarray:
    """``(P + Sl) H^T (H (P + Sl) H^T + Sy)^{-1}`` via a Cholesky solve."""
    M = P_prev + sigma_l
    HM = H @ M
    S = HM @ H.T + sigma_y
    S = 0.5 * (S + S.T)
    try:
        cf = sla.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "innovation covariance is not positive definite; check sigma_y") from exc
    return sla.cho_solve(cf, HM).T


def covariance_update(P_prev, sigma_l, H, K) -> np.ndarray:
    M = P_prev + sigma_l
    P = (np.eye(M.shape[0]) - K @ H) @ M
    return 0.5 * (P + P.T)


def kalman_step(est: EstimatorState, y, dS_c, Bc, H, sigma_l, sigma_y) -> EstimatorState:
    K = kalman_gain(est.P, sigma_l, H, sigma_y)
    A = np.eye(est.P.shape[0]) - K @ H
    pred = est.V_hat + np.asarray(dS_c) @ Bc.T
    V_hat = pred @ A.T + np.asarray(y) @ K.T
    P = A @ (est.P + sigma_l)
    return replace(est, V_hat=V_hat, P=0.5 * (P + P.T), K=K, t=est.t + 1)


def riccati_history(P0, sigma_l, H, sigma_y, steps):
    """Covariances ``[P_prior, P_0, ..., P_{steps-1}]`` and gains ``[K_0, ...]``.

    ``K_i`` is computed from ``P_hist[i]``; the recursion is data independent.
    """
    Ps = [np.asarray(P0, dtype=float)]
    Ks = []
    P = Ps[0]
    for _ in range(steps):
        K = kalman_gain(P, sigma_l, H, sigma_y)
        P = covariance_update(P, sigma_l, H, K)
        Ks.append(K)
        Ps.append(P)
    return Ps, Ks


def covariance_bounds(history):
    """Smallest and largest eigenvalue of ``P`` over a run."""
    lo, hi = np.inf, -np.inf
    for P in history:
        eig = np.linalg.eigvalsh(P)
        lo = min(lo, eig[0])
        hi = max(hi, eig[-1])
    if not np.isfinite(lo):
        raise ValueError("empty covariance history")
    return float(lo), float(hi)
