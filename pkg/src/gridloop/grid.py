"""
Grid model
==========

Admittance assembly, the no-load operating point, the linear power-flow
sensitivity model and a fixed-point (Z-bus) power-flow solver for radial
multi-phase distribution feeders.

State layout
------------
Non-slack buses are stacked in declaration order, each contributing
``phases`` consecutive complex entries to ``U`` (length ``N``).  The
real polar state is ``V = [|U|; angle(U)]`` (length ``2N``) and the
injection vector is ``[P; Q]`` (length ``2N``), generation positive.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

ROLES = ("slack", "load", "controllable", "passive")


class GridError(ValueError):
    """Raised for inconsistent network data or singular operating points."""


class PowerFlowError(RuntimeError):
    """Raised when the plant solver fails to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Bus:
    id: str
    phases: int = 1
    role: str = "load"
    shunt: np.ndarray | None = None  # complex (phases x phases) admittance to ground


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    admittance: np.ndarray  # complex (phases x phases) series admittance


@dataclass(frozen=True, eq=False)
class GridModel:
    buses: tuple
    branches: tuple
    u_pcc: np.ndarray
    Y00: np.ndarray
    Y01: np.ndarray
    Y11: np.ndarray
    index: dict = field(default_factory=dict)  # bus id -> slice into U

    @property
    def n(self) -> int:
        """Number of complex non-slack state entries (``N``)."""
        return self.Y11.shape[0]

    @property
    def Y10(self) -> np.ndarray:
        return self.Y01.T

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.role == "slack")

    @property
    def nonslack(self) -> list:
        return [b for b in self.buses if b.role != "slack"]

    def full_admittance(self) -> np.ndarray:
        return np.block([[self.Y00, self.Y01], [self.Y10, self.Y11]])

    def node_labels(self) -> list:
        """One label per complex state entry, e.g. ``"b3"`` or ``"b3.2"``."""
        labels = []
        for bus in self.nonslack:
            if bus.phases == 1:
                labels.append(str(bus.id))
            else:
                labels.extend(f"{bus.id}.{k + 1}" for k in range(bus.phases))
        return labels

    def lu(self):
        """LU factors of ``Y11``, computed once per grid."""
        cached = self.__dict__.get("_lu")
        if cached is None:
            cached = sla.lu_factor(self.Y11)
            object.__setattr__(self, "_lu", cached)
        return cached


@dataclass(frozen=True, eq=False)
class InjectionMap:
    """0/1 selectors placing ``S_c`` and ``S_l`` into the ``[P; Q]`` vector."""

    Ic: np.ndarray  # (2N, 2Nc)
    Il: np.ndarray  # (2N, 2Nl)
    controllable: tuple  # state indices of controllable phases
    loads: tuple  # state indices of load phases

    @property
    def n_c(self) -> int:
        return len(self.controllable)

    @property
    def n_l(self) -> int:
        return len(self.loads)

    def combine(self, s_c, s_l):
        """``Ic @ S_c + Il @ S_l``; accepts leading batch dimensions."""
        return np.asarray(s_c) @ self.Ic.T + np.asarray(s_l) @ self.Il.T


@dataclass(frozen=True, eq=False)
class LinearPowerFlowModel:
    V0: np.ndarray
    B: np.ndarray
    Bc: np.ndarray
    Bl: np.ndarray
    Z_V: np.ndarray
    injections: InjectionMap

    def voltage(self, s_c, s_l):
        """Polar state ``V0 + Bc S_c + Bl S_l``; batch-friendly."""
        return self.V0 + np.asarray(s_c) @ self.Bc.T + np.asarray(s_l) @ self.Bl.T


def _as_block(value, phases, what):
    arr = np.atleast_2d(np.asarray(value, dtype=complex))
    if arr.shape != (phases, phases):
        raise GridError(f"{what}: expected a {phases}x{phases} block, got shape {arr.shape}")
    return arr


def build_admittance(buses, branches, u_pcc, cond_limit=1e12) -> GridModel:
    """Assemble the partitioned admittance matrix by Laplacian stamping.

    Each branch adds its series admittance to both diagonal blocks and
    subtracts it from the two off-diagonal blocks; bus shunts add to the
    diagonal only.  The slack bus is moved to the front regardless of its
    position in ``buses``.
    """
    buses = list(buses)
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise GridError("duplicate bus id")
    slacks = [b for b in buses if b.role == "slack"]
    if len(slacks) != 1:
        raise GridError(f"exactly one slack bus required, found {len(slacks)}")
    for b in buses:
        if b.role not in ROLES:
            raise GridError(f"bus {b.id}: unknown role {b.role!r}")
        if not 1 <= b.phases <= 3:
            raise GridError(f"bus {b.id}: phase count must be 1..3, got {b.phases}")

    ordered = slacks + [b for b in buses if b.role != "slack"]
    offsets = {}
    pos = 0
    for b in ordered:
        offsets[b.id] = slice(pos, pos + b.phases)
        pos += b.phases
    by_id = {b.id: b for b in ordered}

    Y = np.zeros((pos, pos), dtype=complex)
    seen = set()
    for br in branches:
        for end in (br.from_bus, br.to_bus):
            if end not in by_id:
                raise GridError(f"branch {br.from_bus}-{br.to_bus}: unknown bus {end!r}")
        if br.from_bus == br.to_bus:
            raise GridError(f"branch {br.from_bus}-{br.to_bus}: self loop")
        key = (br.from_bus, br.to_bus)
        if key in seen:
            raise GridError(f"duplicate branch {br.from_bus}->{br.to_bus}")
        seen.add(key)
        n_i = by_id[br.from_bus].phases
        n_j = by_id[br.to_bus].phases
        if n_i != n_j:
            raise GridError(
                f"branch {br.from_bus}-{br.to_bus}: phase mismatch ({n_i} vs {n_j})")
        w = _as_block(br.admittance, n_i, f"branch {br.from_bus}-{br.to_bus}")
        i, j = offsets[br.from_bus], offsets[br.to_bus]
        Y[i, i] += w
        Y[j, j] += w
        Y[i, j] -= w
        Y[j, i] -= w
    for b in ordered:
        if b.shunt is not None:
            s = offsets[b.id]
            Y[s, s] += _as_block(b.shunt, b.phases, f"bus {b.id} shunt")

    n0 = slacks[0].phases
    u_pcc = np.atleast_1d(np.asarray(u_pcc, dtype=complex))
    if u_pcc.shape != (n0,):
        raise GridError(f"slack voltage must have {n0} entries, got {u_pcc.shape[0]}")
    Y11 = Y[n0:, n0:]
    if Y11.shape[0] == 0:
        raise GridError("network has no non-slack buses")
    cond = np.linalg.cond(Y11)
    if not np.isfinite(cond) or cond > cond_limit:
        raise GridError(f"Y11 is singular (condition number {cond:.3e}); "
                        "check that every bus is connected to the slack")
    index = {bid: slice(s.start - n0, s.stop - n0) for bid, s in offsets.items()
             if by_id[bid].role != "slack"}
    return GridModel(
        buses=tuple(ordered),
        branches=tuple(branches),
        u_pcc=u_pcc,
        Y00=Y[:n0, :n0].copy(),
        Y01=Y[:n0, n0:].copy(),
        Y11=Y11.copy(),
        index=index,
    )


def injection_map(grid: GridModel) -> InjectionMap:
    """Selector matrices for controllable and load phases (P block then Q block)."""
    n = grid.n
    ctrl, load = [], []
    for b in grid.nonslack:
        idx = range(grid.index[b.id].start, grid.index[b.id].stop)
        if b.role == "controllable":
            ctrl.extend(idx)
        elif b.role == "load":
            load.extend(idx)

    def selector(cols):
        k = len(cols)
        sel = np.zeros((2 * n, 2 * k))
        for c, i in enumerate(cols):
            sel[i, c] = 1.0
            sel[n + i, k + c] = 1.0
        return sel

    return InjectionMap(Ic=selector(ctrl), Il=selector(load),
                        controllable=tuple(ctrl), loads=tuple(load))


def no_load_voltage(grid: GridModel) -> np.ndarray:
    """Zero-injection solution ``U0 = -Y11^{-1} Y10 U_pcc``."""
    return -sla.lu_solve(grid.lu(), grid.Y10 @ grid.u_pcc)


def polar_state(U) -> np.ndarray:
    """``[|U|; angle(U)]`` with angles in (-pi, pi]; batch over leading axes."""
    U = np.asarray(U, dtype=complex)
    ang = np.angle(U)
    ang = np.where(ang <= -np.pi, ang + 2 * np.pi, ang)
    return np.concatenate([np.abs(U), ang], axis=-1)


def complex_state(V) -> np.ndarray:
    """Inverse of :func:`polar_state`."""
    V = np.asarray(V, dtype=float)
    n = V.shape[-1] // 2
    return V[..., :n] * np.exp(1j * V[..., n:])


def injection_residual(grid: GridModel, U, P, Q) -> float:
    """Infinity-norm mismatch of the power-flow equations at ``U``."""
    I = grid.Y10 @ grid.u_pcc + grid.Y11 @ U
    return float(np.max(np.abs(U * np.conj(I) - (np.asarray(P) + 1j * np.asarray(Q)))))


def linearize(grid: GridModel, U0=None, injections: InjectionMap | None = None
              ) -> LinearPowerFlowModel:
    """Sensitivity model ``V = V0 + B [P; Q]`` around the operating point ``U0``."""
    if U0 is None:
        U0 = no_load_voltage(grid)
    U0 = np.asarray(U0, dtype=complex)
    mag = np.abs(U0)
    if np.any(mag == 0):
        raise GridError("operating point has a zero voltage magnitude")
    if injections is None:
        injections = injection_map(grid)
    # Y11^{-1} diag(conj(U0))^{-1}: scale the columns of Y11^{-1}
    Z = sla.lu_solve(grid.lu(), np.eye(grid.n, dtype=complex)) / np.conj(U0)[None, :]
    ang = np.angle(U0)
    c, s = np.cos(ang), np.sin(ang)
    rot = np.block([[np.diag(c), np.diag(s)],
                    [np.diag(-s / mag), np.diag(c / mag)]])
    lin = np.block([[Z.real, Z.imag],
                    [Z.imag, -Z.real]])
    B = rot @ lin
    return LinearPowerFlowModel(
        V0=polar_state(U0),
        B=B,
        Bc=B @ injections.Ic,
        Bl=B @ injections.Il,
        Z_V=Z,
        injections=injections,
    )


def nonlinear_pf_solve(grid: GridModel, P, Q, tol=1e-10, max_iter=200, U_init=None):
    """Solve the power-flow equations by Z-bus fixed-point iteration.

    ``U <- Y11^{-1} (conj(S / U) - Y10 U_pcc)``, seeded at the no-load point
    unless ``U_init`` is given.  ``P`` and ``Q`` may carry a leading batch
    axis, in which case all cases are iterated together.

    Raises
    ------
    PowerFlowError
        If the mismatch is still above ``tol`` after ``max_iter`` sweeps or a
        voltage collapses to zero.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    S = np.asarray(P, dtype=float) + 1j * np.asarray(Q, dtype=float)
    batched = S.ndim == 2
    S2 = np.atleast_2d(S).T  # (N, R)
    base = (grid.Y10 @ grid.u_pcc)[:, None]
    if U_init is None:
        U = np.repeat(no_load_voltage(grid)[:, None], S2.shape[1], axis=1)
    else:
        U = np.atleast_2d(np.asarray(U_init, dtype=complex)).T.copy()
    lu = grid.lu()
    res = np.inf
    for _ in range(max_iter + 1):
        I = base + grid.Y11 @ U
        res = float(np.max(np.abs(U * np.conj(I) - S2)))
        if res < tol:
            break
        if np.any(U == 0):
            raise PowerFlowError("zero intermediate voltage", residual=res)
        U = sla.lu_solve(lu, np.conj(S2 / U) - base)
    else:
        raise PowerFlowError(
            f"fixed-point iteration did not converge in {max_iter} iterations "
            f"(residual {res:.3e})", residual=res)
    return U.T if batched else U[:, 0]
