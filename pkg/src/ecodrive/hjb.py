"""Semi-Lagrangian solver for the minimum-cost function on a (x, v, t) grid.

The backward sweep evaluates, at every node and time level, the one-step cost
of each control setting: running cost times the grid time step plus the value
at the foot point x + f(x, u) dt, interpolated bilinearly from the next time
level.  The problem data is time-invariant within a solve, so foot points,
interpolation stencils and running costs are precomputed once per control and
reused across all levels.

Terminal arrival is priced by the problem's soft terminal penalty; foot points
leaving the grid are clamped to the boundary and charged the penalty gradient
times the overshoot, which keeps the sweep total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExtrapolationError, GridConfigError
from .model import ProblemSpec, State, Trajectory, _rk4_arrays, fuel_rate, step

__all__ = [
    "Grid",
    "ValueField",
    "build_grid",
    "hamiltonian",
    "optimal_control",
    "solve",
    "value_at",
    "value_gradient",
    "rollout",
    "dp_consistency",
    "bellman_residuals",
]

POSITION_MARGIN = 1.05  # x axis spans [0, 1.05 L]
VMAX_FACTOR = 1.2  # v axis spans [0, 1.2 * max speed limit]


@dataclass(frozen=True)
class Grid:
    xs: np.ndarray
    vs: np.ndarray
    ts: np.ndarray

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0])

    @property
    def dv(self) -> float:
        return float(self.vs[1] - self.vs[0])

    @property
    def dt(self) -> float:
        return float(self.ts[1] - self.ts[0]) if len(self.ts) > 1 else 0.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.xs), len(self.vs), len(self.ts)

    def contains(self, x: float, v: float) -> bool:
        return self.xs[0] <= x <= self.xs[-1] and self.vs[0] <= v <= self.vs[-1]

    def time_index(self, t: float) -> int:
        if self.dt == 0.0:
            return 0
        k = int(round((t - self.ts[0]) / self.dt))
        return min(max(k, 0), len(self.ts) - 1)


@dataclass(frozen=True)
class ValueField:
    """Minimum cost-to-go on the grid plus the argmin control index per node."""

    values: np.ndarray  # (N_t, N_x, N_v)
    policy: np.ndarray  # (N_t, N_x, N_v) indices into the problem's ControlSet
    grid: Grid


def build_grid(problem: ProblemSpec, resolution: tuple[int, int, int],
               t_start: float = 0.0) -> Grid:
    """Uniform axes over [0, 1.05 L] x [0, V_max] x [t_start, T]."""
    nx, nv, nt = resolution
    if nx < 3 or nv < 3 or nt < 3:
        raise ValueError("grid resolution must be at least 3 points per axis")
    trip = problem.trip
    if trip.horizon - t_start < 0:
        raise ValueError("grid start time beyond the trip horizon")
    x_hi = max(POSITION_MARGIN * trip.length, 1.0)
    xs = np.linspace(0.0, x_hi, nx)
    vs = np.linspace(0.0, problem.v_max, nv)
    ts = np.linspace(t_start, trip.horizon, nt)
    return Grid(xs, vs, ts)


def hamiltonian(state: State, u: float, grad_j: tuple[float, float], problem: ProblemSpec) -> float:
    """Running cost plus gradJ . f, minimization convention, unclamped dynamics."""
    x, v = state.position, state.velocity
    f2 = u * problem.vehicle.max_traction - (
        problem.vehicle.davis.resistance(v) - problem.vehicle.grade.at(x)
    )
    return float(fuel_rate(u, v) + grad_j[0] * v + grad_j[1] * f2)


def _foot_point(x, v, u, dt, problem: ProblemSpec):
    """Foot of the characteristic through (x, v) under setting u, with running cost.

    Integrates with the same clamped RK4 as the plant, substepped at the model
    time step, and accumulates the running cost by the same trapezoidal rule
    used on trajectories.  The backward recursion thus prices exactly the
    discrete-time system the rollout simulates; interpolation is the only
    remaining approximation.
    """
    n_sub = max(1, int(round(dt / problem.time_step)))
    h = dt / n_sub
    u_arr = u if np.ndim(x) == 0 else np.full_like(x, u)
    run = 0.0
    rate = fuel_rate(u, v) + problem.limit_penalty_rate(x, v)
    for _ in range(n_sub):
        x, v = _rk4_arrays(x, v, u_arr, h, problem.vehicle)
        rate_next = fuel_rate(u, v) + problem.limit_penalty_rate(x, v)
        run = run + 0.5 * (rate + rate_next) * h
        rate = rate_next
    return x, v, run


class _SweepTables:
    """Per-control foot points, stencils and one-step costs shared by all levels."""

    def __init__(self, problem: ProblemSpec, grid: Grid):
        xs, vs, dt = grid.xs, grid.vs, grid.dt
        nx, nv = len(xs), len(vs)
        X = np.repeat(xs, nv)
        V = np.tile(vs, nx)
        controls = problem.controls.as_array()
        self.controls = controls
        self.priority = problem.controls.priority_order()
        kappa = problem.terminal_penalty_weight
        xnorm = max(problem.trip.length, 1.0)
        vmax = problem.v_max
        self.idx00 = []
        self.weights = []
        self.cost = []
        for u in controls:
            xf, vf, run = _foot_point(X, V, u, dt, problem)
            pen = kappa * (
                np.maximum(0.0, xf - xs[-1]) / xnorm + np.maximum(0.0, vf - vs[-1]) / vmax
            )
            xf = np.clip(xf, xs[0], xs[-1])
            vf = np.clip(vf, vs[0], vs[-1])
            ix = np.minimum((np.floor((xf - xs[0]) / grid.dx)).astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(xf, dtype=np.int64)
            iv = np.minimum((np.floor((vf - vs[0]) / grid.dv)).astype(np.int64), nv - 2) if nv > 1 else np.zeros_like(vf, dtype=np.int64)
            wx = (xf - xs[ix]) / grid.dx
            wv = (vf - vs[iv]) / grid.dv
            self.idx00.append(ix * nv + iv)
            self.weights.append(((1 - wx) * (1 - wv), (1 - wx) * wv, wx * (1 - wv), wx * wv))
            self.cost.append(run + pen)
        self.nx, self.nv = nx, nv

    def one_step_values(self, j_next_flat: np.ndarray, iu: int) -> np.ndarray:
        i00 = self.idx00[iu]
        w00, w01, w10, w11 = self.weights[iu]
        nv = self.nv
        interp = (
            j_next_flat[i00] * w00
            + j_next_flat[i00 + 1] * w01
            + j_next_flat[i00 + nv] * w10
            + j_next_flat[i00 + nv + 1] * w11
        )
        return self.cost[iu] + interp


FOOT_SPAN_FRACTION = 0.25  # largest per-step foot displacement, as a fraction of each axis


def _check_foot_bound(problem: ProblemSpec, grid: Grid):
    """Reject time steps whose foot points jump across a large fraction of the grid.

    The scheme is unconditionally stable, and accuracy actually favors foot
    displacements of at least a cell per step (sub-cell moves re-interpolate
    the same cells over and over, which diffuses the value function), so the
    bound only rejects steps long enough to skip over resolved structure.
    """
    dt = grid.dt
    if dt == 0.0:
        return
    vmax = grid.vs[-1]
    r_hi = problem.vehicle.davis.resistance(vmax)
    g_hi = float(np.max(np.abs(problem.vehicle.grade.values())))
    a_hi = problem.vehicle.max_traction + r_hi + g_hi
    x_span = grid.xs[-1] - grid.xs[0]
    v_span = grid.vs[-1] - grid.vs[0]
    if vmax * dt > FOOT_SPAN_FRACTION * x_span or a_hi * dt > FOOT_SPAN_FRACTION * v_span:
        raise GridConfigError(
            f"grid time step {dt:.4g} s violates the foot-point bound: needs dt <= "
            f"min({FOOT_SPAN_FRACTION * x_span / vmax:.4g}, {FOOT_SPAN_FRACTION * v_span / a_hi:.4g}) s "
            f"so foot points stay within {FOOT_SPAN_FRACTION:.0%} of the grid span per step"
        )


def solve(problem: ProblemSpec, grid: Grid) -> ValueField:
    """Backward sweep from the terminal penalty; stores value and policy per node."""
    if problem.terminal_penalty_weight is None:
        raise ValueError("terminal penalty weight unresolved; call resolve_terminal_weight first")
    _check_foot_bound(problem, grid)
    nx, nv, nt = grid.shape
    tables = _SweepTables(problem, grid)
    X = np.repeat(grid.xs, nv)
    V = np.tile(grid.vs, nx)
    values = np.empty((nt, nx, nv))
    policy = np.zeros((nt, nx, nv), dtype=np.int8)
    terminal = problem.terminal_penalty(X, V)
    values[nt - 1] = terminal.reshape(nx, nv)
    policy[nt - 1] = tables.priority[0]
    for k in range(nt - 2, -1, -1):
        j_next = values[k + 1].ravel()
        best = None
        best_iu = None
        for iu in tables.priority:
            cand = tables.one_step_values(j_next, iu)
            if best is None:
                best = cand
                best_iu = np.full(cand.shape, iu, dtype=np.int8)
            else:
                better = cand < best
                np.copyto(best, cand, where=better)
                np.copyto(best_iu, np.int8(iu), where=better)
        values[k] = best.reshape(nx, nv)
        policy[k] = best_iu.reshape(nx, nv)
    return ValueField(values, policy, grid)


def _bilinear(plane: np.ndarray, grid: Grid, x: float, v: float) -> float:
    nx, nv = plane.shape
    ix = min(int((x - grid.xs[0]) / grid.dx), nx - 2)
    iv = min(int((v - grid.vs[0]) / grid.dv), nv - 2)
    ix = max(ix, 0)
    iv = max(iv, 0)
    wx = (x - grid.xs[ix]) / grid.dx
    wv = (v - grid.vs[iv]) / grid.dv
    return float(
        plane[ix, iv] * (1 - wx) * (1 - wv)
        + plane[ix, iv + 1] * (1 - wx) * wv
        + plane[ix + 1, iv] * wx * (1 - wv)
        + plane[ix + 1, iv + 1] * wx * wv
    )


def value_at(field: ValueField, state: State) -> float:
    """Bilinear interpolation in (x, v) at the nearest time level."""
    grid = field.grid
    if not grid.contains(state.position, state.velocity):
        raise ExtrapolationError(
            f"state (x={state.position:.3g}, v={state.velocity:.3g}) outside the grid extent"
        )
    k = grid.time_index(state.time)
    return _bilinear(field.values[k], grid, state.position, state.velocity)


def value_gradient(field: ValueField, state: State) -> tuple[float, float]:
    """Central-difference (dJ*/dx, dJ*/dv) at the nearest nodes; one-sided at edges."""
    grid = field.grid
    if not grid.contains(state.position, state.velocity):
        raise ExtrapolationError("state outside the grid extent")
    k = grid.time_index(state.time)
    plane = field.values[k]
    nx, nv = plane.shape
    ix = min(max(int(round((state.position - grid.xs[0]) / grid.dx)), 0), nx - 1)
    iv = min(max(int(round((state.velocity - grid.vs[0]) / grid.dv)), 0), nv - 1)
    ix0, ix1 = max(ix - 1, 0), min(ix + 1, nx - 1)
    iv0, iv1 = max(iv - 1, 0), min(iv + 1, nv - 1)
    gx = (plane[ix1, iv] - plane[ix0, iv]) / ((ix1 - ix0) * grid.dx)
    gv = (plane[ix, iv1] - plane[ix, iv0]) / ((iv1 - iv0) * grid.dv)
    return float(gx), float(gv)


def _one_step_cost(state: State, u: float, j_next: np.ndarray, span: float, grid: Grid,
                   problem: ProblemSpec) -> float:
    """Scalar version of the sweep's one-step cost over an arbitrary time span."""
    x, v = state.position, state.velocity
    if span > 0:
        xf, vf, run = _foot_point(x, v, u, span, problem)
        xf, vf, run = float(xf), float(vf), float(run)
    else:
        xf, vf, run = x, v, 0.0
    kappa = problem.terminal_penalty_weight
    pen = kappa * (
        max(0.0, xf - grid.xs[-1]) / max(problem.trip.length, 1.0)
        + max(0.0, vf - grid.vs[-1]) / problem.v_max
    )
    xf = min(max(xf, grid.xs[0]), grid.xs[-1])
    vf = min(max(vf, grid.vs[0]), grid.vs[-1])
    return run + pen + _bilinear(j_next, grid, xf, vf)


def optimal_control(state: State, field: ValueField, problem: ProblemSpec) -> tuple[float, float]:
    """Minimizing setting at a state, ties broken toward smallest |u| then smaller u.

    The lookahead integrates to the next grid time level over the actual
    remaining span, so queries between levels (and right at the horizon) stay
    time-consistent.  Returns (u*, H*) with H* the grid-gradient Hamiltonian
    at u*.
    """
    grid = field.grid
    if not grid.contains(state.position, state.velocity):
        raise ExtrapolationError(
            f"state (x={state.position:.3g}, v={state.velocity:.3g}) outside the grid extent"
        )
    ts = grid.ts
    if state.time >= ts[-1] - 1e-12:
        k_next, span = len(ts) - 1, 0.0
    else:
        k_next = int(np.searchsorted(ts, state.time + 1e-12, side="right"))
        k_next = min(k_next, len(ts) - 1)
        span = float(ts[k_next] - state.time)
    j_next = field.values[k_next]
    controls = problem.controls.as_array()
    best_u, best_cost = None, np.inf
    for iu in problem.controls.priority_order():
        c = _one_step_cost(state, controls[iu], j_next, span, grid, problem)
        if c < best_cost:
            best_cost = c
            best_u = controls[iu]
    grad = value_gradient(field, state)
    h_star = hamiltonian(state, best_u, grad, problem) + float(problem.limit_penalty_rate(state.position, state.velocity))
    return float(best_u), h_star


def rollout(field: ValueField, start: State, problem: ProblemSpec) -> Trajectory:
    """Apply the field's policy from a start state until the horizon.

    The plant advances at the model time step (or the grid step if that is
    finer), so the recorded trajectory and its fuel quadrature are resolved
    independently of the value grid's coarser time axis.
    """
    grid = field.grid
    dt = min(problem.time_step, grid.dt) if grid.dt > 0 else problem.time_step
    horizon = float(grid.ts[-1]) - start.time
    n = max(0, int(round(horizon / dt)))
    times = np.empty(n + 1)
    xs = np.empty(n + 1)
    vs = np.empty(n + 1)
    us = np.empty(n + 1)
    state = start
    for i in range(n):
        u, _ = optimal_control(state, field, problem)
        times[i], xs[i], vs[i], us[i] = state.time, state.position, state.velocity, u
        state = step(state, u, dt, problem.vehicle)
        state = State(
            min(max(state.position, grid.xs[0]), grid.xs[-1]),
            min(state.velocity, grid.vs[-1]),
            state.time,
        )
    times[n], xs[n], vs[n] = state.time, state.position, state.velocity
    us[n] = us[n - 1] if n else 0.0
    return Trajectory(times, xs, vs, us)


def running_cost(traj: Trajectory, problem: ProblemSpec) -> np.ndarray:
    """Per-sample running cost rate (fuel plus speed-limit penalty)."""
    return fuel_rate(traj.controls, np.maximum(0.0, traj.velocities)) + problem.limit_penalty_rate(
        traj.positions, np.maximum(0.0, traj.velocities)
    )


def dp_consistency(field: ValueField, traj: Trajectory, problem: ProblemSpec) -> np.ndarray:
    """Relative drift of J*(x(t), t) + accumulated running cost along a rollout.

    Zero everywhere for an exact dynamic-programming solution; grid and
    integration error show up as drift relative to J*(x0, t0).  Evaluated at
    the rollout samples aligned with grid time levels, where value_at's
    nearest-level rounding is exact.
    """
    rates = running_cost(traj, problem)
    accumulated = np.concatenate([[0.0], np.cumsum(0.5 * (rates[1:] + rates[:-1]) * np.diff(traj.times))])
    grid = field.grid
    level_times = grid.ts[(grid.ts >= traj.times[0] - 1e-9) & (grid.ts <= traj.times[-1] + 1e-9)]
    idx = np.searchsorted(traj.times, level_times - 1e-9)
    idx = np.clip(idx, 0, len(traj) - 1)
    j_along = np.array([
        value_at(field, State(traj.positions[i], min(max(traj.velocities[i], 0.0), grid.vs[-1]), traj.times[i]))
        for i in idx
    ])
    j0 = j_along[0]
    return (j_along + accumulated[idx] - j0) / max(abs(j0), 1e-12)


def bellman_residuals(field: ValueField, problem: ProblemSpec, level_stride: int = 10) -> np.ndarray:
    """|dJ*/dt + min_u H| over interior nodes, normalized by a running-cost scale.

    Forward difference in time, central differences in space, evaluated on a
    strided subset of levels.  The solution is a generalized one, so these are
    diagnostics rather than exactness claims.
    """
    grid = field.grid
    nx, nv, nt = grid.shape
    xs, vs = grid.xs, grid.vs
    controls = problem.controls.as_array()
    X = xs[1:-1, None]
    V = vs[None, 1:-1]
    res_all = []
    r = problem.vehicle.davis.resistance(V) - problem.vehicle.grade.at(X)
    run_pen = problem.limit_penalty_rate(np.broadcast_to(X, (nx - 2, nv - 2)),
                                         np.broadcast_to(V, (nx - 2, nv - 2)))
    scale = np.maximum(V * problem.vehicle.max_traction, 0.1)
    for k in range(0, nt - 1, level_stride):
        plane = field.values[k]
        nxt = field.values[k + 1]
        jt = (nxt[1:-1, 1:-1] - plane[1:-1, 1:-1]) / grid.dt
        jx = (nxt[2:, 1:-1] - nxt[:-2, 1:-1]) / (2 * grid.dx)
        jv = (nxt[1:-1, 2:] - nxt[1:-1, :-2]) / (2 * grid.dv)
        h_min = None
        for u in controls:
            a = u * problem.vehicle.max_traction - r
            h = fuel_rate(u, V) + run_pen + jx * V + jv * a
            h_min = h if h_min is None else np.minimum(h_min, h)
        res = np.abs(jt + h_min) / scale
        res_all.append(res.ravel())
    return np.concatenate(res_all)
