"""Objective, box projection and the estimate-driven projected-gradient step.

Control vectors are ``S_c = [P_c; Q_c]``.  All functions accept a leading
batch axis on ``S_c`` and ``V`` so that ensembles can be stepped together.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        up = np.asarray(self.upper, dtype=float)
        if lo.shape != up.shape:
            raise ValueError("feasible-set bounds have different shapes")
        if np.any(lo > up):
            bad = int(np.argmax(lo > up))
            raise ValueError(f"feasible set: lower > upper at entry {bad}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @classmethod
    def from_limits(cls, p_min, p_max, q_min, q_max):
        return cls(np.concatenate([p_min, q_min]), np.concatenate([p_max, q_max]))

    def contains(self, x, atol=0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))


@dataclass(frozen=True, eq=False)
class ObjectiveParams:
    p_target: np.ndarray
    rho: float = 100.0
    v_min: float = 0.94
    v_max: float = 1.06
    eta: float = 1.0
    L_f: float = 1.0
    L_g: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "p_target", np.asarray(self.p_target, dtype=float))
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.v_min < self.v_max:
            raise ValueError(f"v_min ({self.v_min}) must be below v_max ({self.v_max})")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.L_f < self.eta:
            raise ValueError("L_f must be at least eta")
        if self.L_g is None:
            object.__setattr__(self, "L_g", float(self.rho))


def objective_f(S_c, params: ObjectiveParams):
    S_c = np.asarray(S_c, dtype=float)
    k = params.p_target.shape[0]
    return 0.5 * (np.sum((S_c[..., :k] - params.p_target) ** 2, axis=-1)
                  + np.sum(S_c[..., k:] ** 2, axis=-1))


def grad_f(S_c, params: ObjectiveParams):
    """``[P_c - P_target; Q_c]``."""
    S_c = np.asarray(S_c, dtype=float)
    k = params.p_target.shape[0]
    return np.concatenate([S_c[..., :k] - params.p_target, S_c[..., k:]], axis=-1)


def _violations(V, params):
    V = np.asarray(V, dtype=float)
    mag = V[..., : V.shape[-1] // 2]
    return np.maximum(0.0, mag - params.v_max), np.maximum(0.0, params.v_min - mag)


def penalty_g(V, params: ObjectiveParams):
    """Quadratic penalty on voltage-magnitude limit violations."""
    over, under = _violations(V, params)
    return 0.5 * params.rho * np.sum(over ** 2 + under ** 2, axis=-1)


def grad_g(V, params: ObjectiveParams):
    """Gradient of :func:`penalty_g`; the angle half is identically zero."""
    over, under = _violations(V, params)
    gm = params.rho * (over - under)
    return np.concatenate([gm, np.zeros_like(gm)], axis=-1)


def project_box(x, F: FeasibleSet):
    return np.clip(x, F.lower, F.upper)


def control_step(S_c, V_hat, eps, params: ObjectiveParams, F: FeasibleSet, Bc):
    """One projected-gradient step driven by the state estimate."""
    if not eps > 0:
        raise ValueError("step size must be positive")
    grad = grad_f(S_c, params) + grad_g(V_hat, params) @ Bc
    return project_box(np.asarray(S_c) - eps * grad, F)


def gradient_mapping(V_hat, S_c, eps, params: ObjectiveParams, F: FeasibleSet, Bc):
    """Scaled fixed-point residual ``(S_c - step(S_c)) / eps``; zero at optima."""
    return (np.asarray(S_c) - control_step(S_c, V_hat, eps, params, F, Bc)) / eps
