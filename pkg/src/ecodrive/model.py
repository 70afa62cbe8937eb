"""Vehicle dynamics, resistance and fuel models, and the trip problem definition.

All quantities are per unit mass in SI units: resistances and tractions are
accelerations (m/s^2), fuel is measured as positive traction work per mass
(m^2/s^2), i.e. the time integral of ``[u]_+ * v * A``  with A = 1 by default.

Everything here is a pure function of immutable inputs; the hot solvers
operate on raw numpy arrays and only wrap results in these types at the API
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import AdmissibilityError

__all__ = [
    "DavisCoefficients",
    "GradeProfile",
    "VehicleParams",
    "ControlSet",
    "TripSpec",
    "State",
    "Trajectory",
    "ProblemSpec",
    "davis_resistance",
    "net_deceleration",
    "traction",
    "dynamics",
    "step",
    "fuel_rate",
    "trip_fuel",
    "discrete_trip_fuel",
    "default_problem",
]

DEFAULT_TIME_STEP = 0.1  # s, fixed-step RK4 keeps runs bit-reproducible


@dataclass(frozen=True)
class DavisCoefficients:
    """Quadratic rolling/air resistance r0(v) = a + b*v + c*v**2.

    a: m/s^2, b: 1/s, c: 1/m. All nonnegative so r0 is nondecreasing for v >= 0.
    """

    a: float = 0.05
    b: float = 0.005
    c: float = 0.0005

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.c < 0:
            raise ValueError("Davis coefficients must be nonnegative")

    def resistance(self, v):
        return self.a + self.b * v + self.c * v * v


@dataclass(frozen=True)
class GradeProfile:
    """Piecewise-constant gravitational component g(x) in m/s^2, positive downhill.

    ``breakpoints`` is an ordered list of (position_m, g) pairs starting at 0;
    positions outside the range clamp to the nearest segment.
    """

    breakpoints: tuple[tuple[float, float], ...] = ((0.0, 0.0),)

    def __post_init__(self):
        pos = [p for p, _ in self.breakpoints]
        if not pos or pos[0] != 0.0:
            raise ValueError("grade profile must start at position 0")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("grade breakpoint positions must be strictly increasing")
        object.__setattr__(self, "_pos", np.array([p for p, _ in self.breakpoints]))
        object.__setattr__(self, "_val", np.array([g for _, g in self.breakpoints]))

    def positions(self) -> np.ndarray:
        return self._pos

    def values(self) -> np.ndarray:
        return self._val

    def at(self, x):
        if len(self.breakpoints) == 1:
            return self._val[0] if np.ndim(x) == 0 else np.full(np.shape(x), self._val[0])
        idx = np.searchsorted(self._pos, x, side="right") - 1
        idx = np.clip(idx, 0, len(self.breakpoints) - 1)
        return self._val[idx]

    @property
    def is_flat(self) -> bool:
        return bool(np.all(self._val == 0.0))


@dataclass(frozen=True)
class VehicleParams:
    davis: DavisCoefficients = field(default_factory=DavisCoefficients)
    grade: GradeProfile = field(default_factory=GradeProfile)
    max_traction: float = 1.0  # m/s^2; control scale A so that s = u * A
    traction_model: str = "affine"

    def __post_init__(self):
        if self.max_traction <= 0:
            raise ValueError("max_traction must be positive")
        if self.traction_model != "affine":
            raise ValueError(f"unsupported traction model {self.traction_model!r}")


@dataclass(frozen=True)
class ControlSet:
    """Finite set of throttle/brake settings u1 < ... < un in [-1, 1].

    Must contain -1, 0 and +1; ordering is ascending.
    """

    settings: tuple[float, ...] = (-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        u = self.settings
        if len(u) < 2:
            raise ValueError("control set needs at least 2 settings")
        if any(b <= a for a, b in zip(u, u[1:])):
            raise ValueError("control settings must be strictly increasing")
        if u[0] != -1.0 or u[-1] != 1.0:
            raise ValueError("control set must span exactly [-1, 1]")
        if 0.0 not in u:
            raise ValueError("control set must contain 0 (coast)")

    def as_array(self) -> np.ndarray:
        return np.array(self.settings)

    def priority_order(self) -> list[int]:
        """Indices sorted for deterministic tie-breaking: smallest |u|, then smaller u."""
        return sorted(range(len(self.settings)), key=lambda i: (abs(self.settings[i]), self.settings[i]))

    def __len__(self) -> int:
        return len(self.settings)


@dataclass(frozen=True)
class TripSpec:
    """Trip of ``length`` metres in ``horizon`` seconds with boundary speeds.

    ``speed_limits`` is piecewise-constant over position, starting at 0.
    A zero-length or zero-horizon trip is allowed as the degenerate
    "already there" case used by some of the solver tests.
    """

    length: float = 1000.0
    horizon: float = 120.0
    start_speed: float = 0.0
    end_speed: float = 0.0
    speed_limits: tuple[tuple[float, float], ...] = ((0.0, 15.0),)

    def __post_init__(self):
        if self.length < 0 or self.horizon < 0:
            raise ValueError("trip length and horizon must be nonnegative")
        if self.start_speed < 0 or self.end_speed < 0:
            raise ValueError("boundary speeds must be nonnegative")
        pos = [p for p, _ in self.speed_limits]
        if not pos or pos[0] != 0.0:
            raise ValueError("speed limit profile must start at position 0")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("speed limit positions must be strictly increasing")
        if any(m <= 0 for _, m in self.speed_limits):
            raise ValueError("speed limits must be positive")
        object.__setattr__(self, "_lpos", np.array([p for p, _ in self.speed_limits]))
        object.__setattr__(self, "_lval", np.array([m for _, m in self.speed_limits]))

    def limit_positions(self) -> np.ndarray:
        return self._lpos

    def limit_values(self) -> np.ndarray:
        return self._lval

    def limit_at(self, x):
        if len(self.speed_limits) == 1:
            return self._lval[0] if np.ndim(x) == 0 else np.full(np.shape(x), self._lval[0])
        idx = np.searchsorted(self._lpos, x, side="right") - 1
        idx = np.clip(idx, 0, len(self.speed_limits) - 1)
        return self._lval[idx]

    @property
    def max_limit(self) -> float:
        return float(max(m for _, m in self.speed_limits))

    @property
    def min_limit(self) -> float:
        return float(min(m for _, m in self.speed_limits))


@dataclass(frozen=True)
class State:
    position: float
    velocity: float
    time: float = 0.0

    def __post_init__(self):
        if self.velocity < 0:
            raise ValueError("velocity must be nonnegative")


@dataclass(frozen=True)
class Trajectory:
    """Time-sampled (t, x, v, u) path at a fixed step.

    ``controls[k]`` is the setting applied over [times[k], times[k+1]); the last
    entry repeats the final applied setting so all arrays share one length.
    Arrays are not validated so that deliberately corrupted trajectories can be
    fed to the verification modules.
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.positions) == len(self.velocities) == len(self.controls) == n):
            raise ValueError("trajectory arrays must have equal length")
        if n == 0:
            raise ValueError("trajectory must be nonempty")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def switching_times(self) -> np.ndarray:
        """Sample times at which the applied setting changes value."""
        u = self.controls
        if len(u) < 2:
            return np.array([])
        changed = u[1:] != u[:-1]
        # control k applies from times[k]; a change at slot k starts at times[k]
        return self.times[1:][changed[: len(self.times) - 1]]

    def end_state(self) -> State:
        return State(float(self.positions[-1]), max(0.0, float(self.velocities[-1])), float(self.times[-1]))


@dataclass(frozen=True)
class ProblemSpec:
    """Complete instance: vehicle, trip, control set, objective and penalty weights.

    ``terminal_penalty_weight`` (kappa) prices the terminal miss
    kappa * (|x - L|/max(L,1) + |v - v2|/V_max); None means "not yet resolved"
    and is filled by :func:`ecodrive.strategies.resolve_terminal_weight` from the
    tuned four-phase baseline fuel.  ``limit_penalty_weight`` prices running
    speed-limit violations as rho * max(0, v - M(x))^2.
    """

    vehicle: VehicleParams = field(default_factory=VehicleParams)
    trip: TripSpec = field(default_factory=TripSpec)
    controls: ControlSet = field(default_factory=ControlSet)
    objective: str = "fuel"
    terminal_penalty_weight: float | None = None
    limit_penalty_weight: float = 1.0
    time_step: float = DEFAULT_TIME_STEP

    def __post_init__(self):
        if self.objective != "fuel":
            raise ValueError(f"unsupported objective {self.objective!r}")
        if self.terminal_penalty_weight is not None and self.terminal_penalty_weight < 0:
            raise ValueError("terminal penalty weight must be nonnegative")
        if self.limit_penalty_weight < 0:
            raise ValueError("limit penalty weight must be nonnegative")
        if self.time_step <= 0:
            raise ValueError("time step must be positive")

    @property
    def v_max(self) -> float:
        """Velocity-grid ceiling: 20% headroom above the largest speed limit."""
        return 1.2 * self.trip.max_limit

    def with_terminal_weight(self, kappa: float) -> "ProblemSpec":
        return replace(self, terminal_penalty_weight=float(kappa))

    def terminal_penalty(self, x, v):
        """Soft terminal cost for missing (L, v2); vectorized over x, v."""
        if self.terminal_penalty_weight is None:
            raise ValueError("terminal penalty weight unresolved; call resolve_terminal_weight first")
        xnorm = max(self.trip.length, 1.0)
        return self.terminal_penalty_weight * (
            np.abs(x - self.trip.length) / xnorm + np.abs(v - self.trip.end_speed) / self.v_max
        )

    def limit_penalty_rate(self, x, v):
        """Running penalty rate for exceeding the local speed limit."""
        over = np.maximum(0.0, v - self.trip.limit_at(x))
        return self.limit_penalty_weight * over * over


def davis_resistance(v, coeffs: DavisCoefficients):
    """Frictional resistance a + b*v + c*v^2 (m/s^2). Requires v >= 0."""
    if np.any(np.asarray(v) < 0):
        raise ValueError("davis_resistance requires v >= 0")
    return coeffs.resistance(v)


def net_deceleration(x, v, params: VehicleParams):
    """Uncontrolled deceleration r(x, v) = r0(v) - g(x); x clamps to the grade extent."""
    return davis_resistance(v, params.davis) - params.grade.at(x)


def traction(x, v, u, params: VehicleParams):
    """Controlled acceleration s = u * max_traction under the affine model."""
    if np.any(np.abs(np.asarray(u)) > 1.0 + 1e-12):
        raise AdmissibilityError("control setting outside [-1, 1]")
    return np.asarray(u) * params.max_traction if np.ndim(u) else u * params.max_traction


def _accel(x, v, u, params: VehicleParams):
    """Net acceleration with the rest clamp: a parked vehicle cannot move backwards."""
    a = u * params.max_traction - (params.davis.resistance(v) - params.grade.at(x))
    return np.where((v <= 0.0) & (a < 0.0), 0.0, a) if np.ndim(a) else (0.0 if (v <= 0.0 and a < 0.0) else a)


def dynamics(state: State, u: float, params: VehicleParams) -> tuple[float, float]:
    """Right-hand side (dx/dt, dv/dt) of the motion equations at a state."""
    if abs(u) > 1.0 + 1e-12:
        raise AdmissibilityError("control setting outside [-1, 1]")
    return state.velocity, float(_accel(state.position, state.velocity, u, params))


def _rk4_arrays(x, v, u, dt, params: VehicleParams):
    """One classical RK4 step on (x, v) arrays with the rest clamp per stage.

    Stage velocities are floored at 0 so the clamp is honored inside the step,
    and the final velocity is floored as well.
    """
    k1x = v
    k1v = _accel(x, v, u, params)
    v2 = np.maximum(0.0, v + 0.5 * dt * k1v)
    k2x = v2
    k2v = _accel(x + 0.5 * dt * k1x, v2, u, params)
    v3 = np.maximum(0.0, v + 0.5 * dt * k2v)
    k3x = v3
    k3v = _accel(x + 0.5 * dt * k2x, v3, u, params)
    v4 = np.maximum(0.0, v + dt * k3v)
    k4x = v4
    k4v = _accel(x + dt * k3x, v4, u, params)
    xn = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    vn = np.maximum(0.0, v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v))
    return xn, vn


def step(state: State, u: float, dt: float, params: VehicleParams) -> State:
    """Advance one state by RK4 over dt under a constant setting u."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(u) > 1.0 + 1e-12:
        raise AdmissibilityError("control setting outside [-1, 1]")
    x, v = _rk4_arrays(np.float64(state.position), np.float64(state.velocity), u, dt, params)
    return State(float(x), float(v), state.time + dt)


def fuel_rate(u, v):
    """Instantaneous fuel rate [u]_+ * v; only positive settings consume fuel."""
    if np.any(np.asarray(v) < 0):
        raise ValueError("fuel_rate requires v >= 0")
    up = 0.5 * (np.asarray(u, dtype=float) + np.abs(u))
    return up * v


def trip_fuel(traj: Trajectory) -> float:
    """Total fuel of a trajectory by trapezoidal quadrature of the fuel rate."""
    rates = fuel_rate(traj.controls, np.maximum(0.0, traj.velocities))
    return float(np.trapz(rates, traj.times))


def discrete_trip_fuel(rates: Sequence[float], durations: Sequence[float]) -> float:
    """Sum of per-segment constant consumption rates times segment durations."""
    rates = np.asarray(rates, dtype=float)
    durations = np.asarray(durations, dtype=float)
    if rates.shape != durations.shape:
        raise ValueError("rates and durations must have equal length")
    if np.any(durations <= 0):
        raise ValueError("durations must be positive")
    if np.any(rates < 0):
        raise ValueError("rates must be nonnegative")
    return float(np.sum(rates * durations))


def simulate(start: State, controls: np.ndarray, dt: float, params: VehicleParams) -> Trajectory:
    """Integrate a piecewise-constant control sequence from a start state."""
    n = len(controls)
    times = start.time + dt * np.arange(n + 1)
    xs = np.empty(n + 1)
    vs = np.empty(n + 1)
    xs[0], vs[0] = start.position, start.velocity
    x, v = np.float64(start.position), np.float64(start.velocity)
    for k in range(n):
        x, v = _rk4_arrays(x, v, controls[k], dt, params)
        xs[k + 1], vs[k + 1] = x, v
    us = np.concatenate([controls, controls[-1:]]) if n else np.array([0.0])
    return Trajectory(times, xs, vs, us)


def default_problem() -> ProblemSpec:
    """The default scenario: 1000 m in 120 s from rest to rest, flat road."""
    return ProblemSpec()
