"""
Closed-loop simulation
======================

Plant -> measurements -> Kalman filter -> projected-gradient controller,
with a random-walk load process and the instantaneous optimum recomputed
at every step from the true loads.

One step ``t`` of the loop:

1. loads move ``S_l,t = S_l,t-1 + d_t``; the plant responds to the
   applied set-points ``S_c,t`` (linear random-walk model or full AC
   power flow);
2. a measurement ``y_t = H V_t + w_t`` is drawn;
3. the filter produces ``V_hat_t`` from ``y_t`` and ``S_c,t - S_c,t-1``;
4. the controller computes ``S_c,t+1`` from ``S_c,t`` and ``V_hat_t``.

Independent runs are stepped together along a leading batch axis: filter
gains do not depend on data, so the covariance recursion is shared.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import certificates as cert
from . import controller as ctl
from .estimator import (EstimatorState, ProcessNoiseModel, initial_state, kalman_step,
                        riccati_history)
from .grid import (GridModel, InjectionMap, LinearPowerFlowModel, PowerFlowError,
                   linearize, nonlinear_pf_solve, polar_state)
from .measurement import MeasurementModel, build_measurement_model

log = logging.getLogger(__name__)

PLANT_MODES = ("linear", "nonlinear")
ORACLE_MAX_ITER = 10 ** 6


class SimulationError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class StepSizeError(ValueError):
    """The descent rate is not admitted by the certificate."""


@dataclass(frozen=True, eq=False)
class LoadProcess:
    base: np.ndarray  # S_l,0 = [P_l; Q_l], generation positive
    sigma_delta: np.ndarray  # covariance of the per-step increments

    def factor(self) -> np.ndarray:
        """A square root ``F`` with ``F F^T = sigma_delta`` (PSD safe)."""
        w, U = np.linalg.eigh(0.5 * (self.sigma_delta + self.sigma_delta.T))
        if w[0] < -1e-12 * max(1.0, abs(w[-1])):
            raise ValueError("load increment covariance is not positive semidefinite")
        return U * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class Availability:
    """Piecewise-constant multipliers on the active-power upper bounds."""

    steps: np.ndarray
    factors: np.ndarray

    def at(self, t):
        i = np.searchsorted(self.steps, t, side="right") - 1
        return self.factors[max(i, 0)]


@dataclass(eq=False)
class Scenario:
    name: str
    grid: GridModel
    sensors: tuple
    params: ctl.ObjectiveParams
    feasible: ctl.FeasibleSet
    loads: LoadProcess
    initial_control: np.ndarray
    eps: float
    horizon: int
    seed: int
    plant: str = "nonlinear"
    ensemble_size: int = 100
    p0: float = 1.0
    sigma_l_floor: float = 0.0
    measurement_noise: bool = True
    availability: Availability | None = None
    projection: str = "instantaneous"
    document: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not self.eps > 0:
            raise ValueError("step size must be positive")
        if self.plant not in PLANT_MODES:
            raise ValueError(f"plant mode must be one of {PLANT_MODES}")
        if self.projection not in ("static", "instantaneous"):
            raise ValueError("projection must be 'static' or 'instantaneous'")

    def system(self) -> "System":
        cached = getattr(self, "_system", None)
        if cached is None:
            cached = build_system(self)
            self._system = cached
        return cached


@dataclass(frozen=True, eq=False)
class System:
    grid: GridModel
    lin: LinearPowerFlowModel
    meas: MeasurementModel
    noise: ProcessNoiseModel
    injections: InjectionMap


def build_system(scenario: Scenario) -> System:
    lin = linearize(scenario.grid)
    meas = build_measurement_model(scenario.sensors, lin, base_load=scenario.loads.base)
    noise = ProcessNoiseModel.from_load_increments(lin.Bl, scenario.loads.sigma_delta,
                                                   floor=scenario.sigma_l_floor)
    return System(scenario.grid, lin, meas, noise, lin.injections)


@dataclass(eq=False)
class Trajectory:
    """Per-step records; arrays have the step as their leading axis."""

    V_true: np.ndarray
    V_hat: np.ndarray
    y: np.ndarray
    S_c: np.ndarray
    S_l: np.ndarray
    S_c_star: np.ndarray
    upper: np.ndarray  # upper bounds of the feasible box at each step
    v_min: float
    v_max: float
    rho: float
    labels: list
    seed: int | None = None
    plant: str = "linear"

    @property
    def T(self) -> int:
        return self.S_c.shape[0]

    @property
    def est_err(self):
        return self.V_hat - self.V_true

    @property
    def est_err_norm(self):
        return np.linalg.norm(self.est_err, axis=-1)

    @property
    def opt_err_norm(self):
        return np.linalg.norm(self.S_c - self.S_c_star, axis=-1)

    @property
    def v_mag(self):
        return self.V_true[:, : self.V_true.shape[1] // 2]


@dataclass(eq=False)
class Ensemble:
    est_err: np.ndarray  # runs x T x 2N
    opt_err_norm: np.ndarray  # runs x T
    noise_free: bool
    trajectories: list


def certify_scenario(scenario: Scenario, eps=None, horizon=None) -> cert.CertificateReport:
    """Certificate for a scenario, with covariance history from the Riccati
    recursion over the horizon (the recursion is data independent)."""
    system = scenario.system()
    H, sigma_y = system.meas.H, system.meas.sigma_y
    sigma_l = system.noise.sigma_l
    n2 = H.shape[1]
    Ps, Ks = riccati_history(scenario.p0 * np.eye(n2), sigma_l, H, sigma_y,
                             horizon or scenario.horizon)
    return cert.certify(scenario.params, system.lin.Bc, H, sigma_l, sigma_y, Ps, Ks,
                        scenario.eps if eps is None else eps)


def admissible_step(scenario: Scenario) -> float:
    """``eps_max`` of the scenario's objective and sensitivity matrix."""
    p = scenario.params
    return cert.max_step_size(p.eta, p.L_f, p.L_g, cert.spectral_norm(scenario.system().lin.Bc))


def generate_loads(spec: LoadProcess, steps, rng) -> np.ndarray:
    """Random-walk loads for ``t = 0 .. steps-1`` starting from the base loads."""
    F = spec.factor()
    d = rng.standard_normal((steps, F.shape[1])) @ F.T
    d[0] = 0.0
    return spec.base + np.cumsum(d, axis=0)


def oracle_step_size(lin: LinearPowerFlowModel, params: ctl.ObjectiveParams) -> float:
    # 2 / (eta + L) contracts for any eta-strongly convex, L-smooth objective.
    L = params.L_f + np.linalg.norm(lin.Bc, 2) ** 2 * params.L_g
    return 2.0 / (params.eta + L)


def instantaneous_optimum(S_l, lin: LinearPowerFlowModel, params: ctl.ObjectiveParams,
                          F: ctl.FeasibleSet, tol=1e-10, S_init=None,
                          max_iter=ORACLE_MAX_ITER) -> np.ndarray:
    """Optimal set-points for the given loads with exact (model) voltages.

    Projected gradient with step ``2 / (eta + L)`` until the gradient
    mapping is below ``tol``; ``S_l`` may be batched.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    S_l = np.asarray(S_l, dtype=float)
    gamma = oracle_step_size(lin, params)
    base = lin.V0 + S_l @ lin.Bl.T
    if S_init is None:
        k = params.p_target.shape[0]
        S = np.concatenate([params.p_target, np.zeros(lin.Bc.shape[1] - k)])
        S = np.broadcast_to(ctl.project_box(S, F), S_l.shape[:-1] + S.shape).copy()
    else:
        S = np.array(S_init, dtype=float)
    for _ in range(max_iter):
        V = base + S @ lin.Bc.T
        S_next = ctl.control_step(S, V, gamma, params, F, lin.Bc)
        if np.max(np.linalg.norm(S - S_next, axis=-1)) < tol * gamma:
            return S_next
        S = S_next
    raise SimulationError(f"oracle did not converge in {max_iter} iterations")


def _feasible_at(scenario: Scenario, t):
    F = scenario.feasible
    if scenario.availability is None:
        return F, F
    k = scenario.params.p_target.shape[0]
    upper = F.upper.copy()
    upper[:k] = np.maximum(F.lower[:k], upper[:k] * scenario.availability.at(t))
    inst = ctl.FeasibleSet(F.lower, upper)
    return (inst if scenario.projection == "instantaneous" else F), inst


def _streams(seed, runs, single):
    root = np.random.SeedSequence(seed)
    if single:
        return [root.spawn(2)]
    return [child.spawn(2) for child in root.spawn(runs)]


def simulate(scenario: Scenario, runs=1, seed=None, plant=None, noise=True,
             freeze_controller=False, horizon=None, eps=None, single=True,
             allow_unadmitted=False, warm_start=False):
    """Run ``runs`` independent closed loops together; returns one
    :class:`Trajectory` per run.

    ``warm_start`` initializes the estimate at the true first plant state
    instead of the no-load voltage, so that with exact measurements the
    controller acts on exact feedback from the first step.

    Raises :class:`StepSizeError` when ``eps >= eps_max`` unless
    ``allow_unadmitted`` is set.
    """
    system = scenario.system()
    lin, meas = system.lin, system.meas
    params = scenario.params
    seed = scenario.seed if seed is None else seed
    plant = plant or scenario.plant
    T = horizon or scenario.horizon
    eps = scenario.eps if eps is None else eps
    if plant not in PLANT_MODES:
        raise ValueError(f"plant mode must be one of {PLANT_MODES}")
    if not allow_unadmitted:
        eps_max = admissible_step(scenario)
        if not eps < eps_max:
            raise StepSizeError(f"step size {eps} is not below eps_max = {eps_max:.6g}")
    streams = _streams(seed, runs, single and runs == 1)

    if noise:
        S_l = np.stack([generate_loads(scenario.loads, T, np.random.default_rng(s[0]))
                        for s in streams], axis=1)
    else:
        S_l = np.broadcast_to(scenario.loads.base, (T, runs, scenario.loads.base.size)).copy()
    if noise and scenario.measurement_noise:
        chol = meas.cholesky()
        w_y = np.stack([np.random.default_rng(s[1]).standard_normal((T, meas.m))
                        for s in streams], axis=1) @ chol.T
    else:
        w_y = np.zeros((T, runs, meas.m))

    n2 = lin.B.shape[0]
    V_true = np.empty((T, runs, n2))
    V_hat = np.empty((T, runs, n2))
    ys = np.empty((T, runs, meas.m))
    S_c = np.empty((T, runs, lin.Bc.shape[1]))
    S_star = np.empty_like(S_c)
    uppers = np.empty((T, lin.Bc.shape[1]))

    est = initial_state(np.broadcast_to(lin.V0, (runs, n2)), scenario.p0)
    sc = np.broadcast_to(ctl.project_box(scenario.initial_control, scenario.feasible),
                         (runs, lin.Bc.shape[1])).copy()
    applied_prev = None
    star = None
    U_prev = None
    k = params.p_target.shape[0]
    for t in range(T):
        F_proj, F_inst = _feasible_at(scenario, t)
        uppers[t] = F_inst.upper
        applied = sc.copy()
        applied[:, :k] = np.minimum(applied[:, :k], F_inst.upper[:k])
        # plant
        if plant == "linear":
            if t == 0:
                V = lin.voltage(applied, S_l[0])
            else:
                V = (V_true[t - 1] + (applied - applied_prev) @ lin.Bc.T
                     + (S_l[t] - S_l[t - 1]) @ lin.Bl.T)
        else:
            pq = system.injections.combine(applied, S_l[t])
            n = n2 // 2
            try:
                U = nonlinear_pf_solve(system.grid, pq[:, :n], pq[:, n:], U_init=U_prev)
            except PowerFlowError as exc:
                raise SimulationError(f"plant power flow failed: {exc}", step=t) from exc
            U_prev = U
            V = polar_state(U)
        V_true[t] = V
        if warm_start and t == 0:
            est = EstimatorState(V.copy(), est.P)
        # measurement and estimate
        y = V @ meas.H.T + w_y[t]
        ys[t] = y
        dS = np.zeros_like(applied) if applied_prev is None else applied - applied_prev
        est = kalman_step(est, y, dS, lin.Bc, meas.H, system.noise.sigma_l, meas.sigma_y)
        V_hat[t] = est.V_hat
        # oracle from the true loads
        star = instantaneous_optimum(S_l[t], lin, params, F_proj, S_init=star)
        S_star[t] = star
        S_c[t] = sc
        # controller
        if not freeze_controller:
            sc = ctl.control_step(sc, est.V_hat, eps, params, F_proj, lin.Bc)
        applied_prev = applied

    labels = system.grid.node_labels()
    trajs = []
    for r in range(runs):
        trajs.append(Trajectory(
            V_true=V_true[:, r], V_hat=V_hat[:, r], y=ys[:, r], S_c=S_c[:, r],
            S_l=S_l[:, r], S_c_star=S_star[:, r], upper=uppers,
            v_min=params.v_min, v_max=params.v_max, rho=params.rho, labels=labels,
            seed=seed if runs == 1 else None, plant=plant))
    return trajs


def run_closed_loop(scenario: Scenario, seed=None, plant=None, noise=True,
                    freeze_controller=False, horizon=None, eps=None,
                    allow_unadmitted=False, warm_start=False) -> Trajectory:
    return simulate(scenario, 1, seed=seed, plant=plant, noise=noise,
                    freeze_controller=freeze_controller, horizon=horizon, eps=eps,
                    allow_unadmitted=allow_unadmitted, warm_start=warm_start)[0]


def run_ensemble(scenario: Scenario, runs=None, seed=None, plant=None, noise=True,
                 horizon=None, eps=None) -> Ensemble:
    """Independent runs with seeds spawned from ``seed``."""
    runs = runs or scenario.ensemble_size
    trajs = simulate(scenario, runs, seed=seed, plant=plant, noise=noise,
                     horizon=horizon, eps=eps, single=False)
    return Ensemble(
        est_err=np.stack([tr.est_err for tr in trajs]),
        opt_err_norm=np.stack([tr.opt_err_norm for tr in trajs]),
        noise_free=not noise,
        trajectories=trajs,
    )


def settling_time(series, tail_fraction=0.2) -> int:
    """First step after which ``series`` stays below twice its tail mean."""
    series = np.asarray(series, dtype=float)
    T = series.size
    if T == 0:
        return 0
    tail = series[int(np.floor(T * (1 - tail_fraction))):]
    level = 2.0 * float(np.mean(tail))
    above = np.nonzero(series > level)[0]
    return int(above[-1] + 1) if above.size else 0


def ensemble_settling(ensemble: Ensemble, tail_fraction=0.2):
    """Settling times ``(estimation, optimization)`` of the ensemble-mean
    error curves."""
    est = np.mean(np.linalg.norm(ensemble.est_err, axis=-1), axis=0)
    opt = np.mean(ensemble.opt_err_norm, axis=0)
    return settling_time(est, tail_fraction), settling_time(opt, tail_fraction)


def compute_metrics(traj: Trajectory, tail_fraction=0.2):
    """Per-step error norms and voltage statistics plus a summary dict."""
    series = {
        "est_err_norm": traj.est_err_norm,
        "opt_err_norm": traj.opt_err_norm,
        "norm_Sc_star": np.linalg.norm(traj.S_c_star, axis=-1),
        "norm_Sc_max": np.linalg.norm(traj.upper, axis=-1),
        "penalty_g": ctl.penalty_g(traj.V_true, ctl.ObjectiveParams(
            p_target=np.zeros(1), rho=traj.rho, v_min=traj.v_min, v_max=traj.v_max)),
    }
    mag = traj.v_mag
    over = np.maximum(0.0, mag - traj.v_max)
    under = np.maximum(0.0, traj.v_min - mag)
    depth = over + under
    violated = depth > 0
    T = traj.T
    tail = slice(int(np.floor(T * (1 - tail_fraction))), T)
    summary = {
        "tail_est_err": float(np.mean(series["est_err_norm"][tail])) if T else 0.0,
        "tail_opt_err": float(np.mean(series["opt_err_norm"][tail])) if T else 0.0,
        "settling_est": settling_time(series["est_err_norm"], tail_fraction),
        "settling_opt": settling_time(series["opt_err_norm"], tail_fraction),
        "violation_count": int(np.sum(violated)),
        "violation_max_depth": float(np.max(depth)) if depth.size else 0.0,
        "violations_per_node": dict(zip(traj.labels, np.sum(violated, axis=0).tolist())),
    }
    series["violation_count"] = np.sum(violated, axis=1)
    series["violation_depth"] = np.max(depth, axis=1) if depth.size else np.zeros(T)
    return series, summary
