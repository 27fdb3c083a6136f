"""Linear measurement model ``y = H V + w``, observability and noise sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import LinearPowerFlowModel

SENSOR_KINDS = ("voltage-phasor", "voltage-magnitude", "state-subset", "pseudo-load")

# Noise levels used for the reference sensor classes (fraction of nominal).
REAL_SENSOR_STD = 0.01
PSEUDO_MEASUREMENT_STD = 0.5


class ObservabilityError(ValueError):
    def __init__(self, message, deficiency):
        super().__init__(message)
        self.deficiency = deficiency


@dataclass(frozen=True)
class SensorSpec:
    """One sensor (or sensor group).

    ``targets`` are complex node indices for the voltage kinds, polar state
    indices for ``state-subset`` and load-vector indices (``[P_l; Q_l]``)
    for ``pseudo-load``.  The noise standard deviation is ``std * nominal``;
    ``nominal`` defaults to 1 p.u. for voltages and to ``|base load|`` for
    pseudo-measurements.
    """

    kind: str
    targets: tuple
    std: float
    nominal: tuple | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in SENSOR_KINDS:
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if not self.std > 0:
            raise ValueError(f"sensor {self.name or self.kind}: std must be positive")
        if len(self.targets) == 0:
            raise ValueError(f"sensor {self.name or self.kind}: no targets")


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    H: np.ndarray
    sigma_y: np.ndarray
    offset: np.ndarray  # physical reading = H V + offset + noise
    provenance: tuple  # (sensor position, kind, target) per row

    @property
    def m(self) -> int:
        return self.H.shape[0]

    def cholesky(self):
        cached = self.__dict__.get("_chol")
        if cached is None:
            try:
                cached = np.linalg.cholesky(self.sigma_y)
            except np.linalg.LinAlgError as exc:
                raise ValueError("measurement covariance is not positive definite") from exc
            object.__setattr__(self, "_chol", cached)
        return cached


def observability_check(H, tol=1e-8):
    """Return ``(observable, numerical rank)`` with rank taken relative to ``sigma_max``."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    s = np.linalg.svd(H, compute_uv=False)
    rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return rank == H.shape[1], rank


def _pseudo_rows(lin: LinearPowerFlowModel):
    # Linearized loads as a function of the state: S_l = Il^T B^{-1} (V - V0).
    Binv = np.linalg.inv(lin.B)
    rows = lin.injections.Il.T @ Binv
    return rows, -rows @ lin.V0


def build_measurement_model(sensors, lin: LinearPowerFlowModel, base_load=None,
                            tol=1e-8) -> MeasurementModel:
    """Stack one block of rows per sensor and a diagonal noise covariance.

    Raises
    ------
    ObservabilityError
        If the stacked ``H`` does not have full column rank.
    """
    sensors = list(sensors)
    if not sensors:
        raise ValueError("sensor list is empty")
    n2 = lin.B.shape[0]
    n = n2 // 2
    n_load = lin.Bl.shape[1]
    rows, offsets, stds, prov = [], [], [], []
    pseudo = None
    for pos, sensor in enumerate(sensors):
        nominal = sensor.nominal
        for k, target in enumerate(sensor.targets):
            target = int(target)
            if sensor.kind in ("voltage-phasor", "voltage-magnitude"):
                if not 0 <= target < n:
                    raise ValueError(f"sensor {pos}: node index {target} out of range")
                picks = [target] if sensor.kind == "voltage-magnitude" else [target, n + target]
                for i in picks:
                    row = np.zeros(n2)
                    row[i] = 1.0
                    rows.append(row)
                    offsets.append(0.0)
                    stds.append(sensor.std * (1.0 if nominal is None else nominal[k]))
                    prov.append((pos, sensor.kind, i))
            elif sensor.kind == "state-subset":
                if not 0 <= target < n2:
                    raise ValueError(f"sensor {pos}: state index {target} out of range")
                row = np.zeros(n2)
                row[target] = 1.0
                rows.append(row)
                offsets.append(0.0)
                stds.append(sensor.std * (1.0 if nominal is None else nominal[k]))
                prov.append((pos, sensor.kind, target))
            else:
                if not 0 <= target < n_load:
                    raise ValueError(f"sensor {pos}: load index {target} out of range")
                if pseudo is None:
                    pseudo = _pseudo_rows(lin)
                if nominal is not None:
                    scale = nominal[k]
                elif base_load is not None:
                    scale = abs(base_load[target])
                else:
                    scale = 1.0
                if not scale > 0:
                    raise ValueError(
                        f"sensor {pos}: pseudo-measurement of load {target} has zero "
                        "nominal value; give an explicit nominal")
                rows.append(pseudo[0][target])
                offsets.append(pseudo[1][target])
                stds.append(sensor.std * scale)
                prov.append((pos, sensor.kind, target))
    H = np.array(rows)
    ok, rank = observability_check(H, tol)
    if not ok:
        deficiency = n2 - rank
        raise ObservabilityError(
            f"measurement matrix is rank deficient: rank {rank} of {n2}, "
            f"unobservable subspace dimension {deficiency}", deficiency)
    return MeasurementModel(H=H, sigma_y=np.diag(np.square(stds)),
                            offset=np.array(offsets), provenance=tuple(prov))


def sample_measurement(V_true, model: MeasurementModel, rng) -> np.ndarray:
    """Draw ``y = H V + w`` with ``w ~ N(0, sigma_y)``; ``V_true`` may be batched."""
    V_true = np.asarray(V_true, dtype=float)
    L = model.cholesky()
    z = rng.standard_normal(V_true.shape[:-1] + (model.m,))
    return V_true @ model.H.T + z @ L.T
