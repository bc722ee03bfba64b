"""Quintic piecewise trajectories, the weighted penalty objective and its optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from ..errors import InfeasibleTrajectoryError
from .grid import DistanceField, OccupancyGrid


@dataclass(frozen=True)
class PlannerParams:
    """Weights and limits of the local planner.

    The cost is ``lambda_s*J_s + lambda_t*J_t + lambda_d*J_d + lambda_o*J_o +
    lambda_u*J_u``. The obstacle term aims for ``clearance + clearance_margin``
    so that the post-check at ``clearance`` has slack.
    """

    lambda_s: float = 1.0
    lambda_t: float = 10.0
    lambda_d: float = 1000.0
    lambda_o: float = 1.0e5
    lambda_u: float = 100.0
    v_max: float = 1.0
    a_max: float = 2.0
    j_max: float = 10.0
    clearance: float = 0.3
    clearance_margin: float = 0.1
    local_horizon: float = 7.5
    collision_time_threshold: float = 1.0
    samples_per_piece: int = 10
    piece_length: float = 1.0
    unknown_penalty: float = 0.5
    search_margin: float = 3.0
    max_iter: int = 200
    grad_tol: float = 1e-6
    dyn_tolerance: float = 0.15  # relative slack on v/a/j limits in the post-check

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if self.samples_per_piece < 1 or self.max_iter < 1:
            raise ValueError("samples_per_piece and max_iter must be >= 1")
        if not self.piece_length > 0:
            raise ValueError("piece_length must be positive")


# ---------------------------------------------------------------- trajectory


@dataclass(frozen=True, eq=False)
class PiecewiseTrajectory:
    """Piecewise quintic in local time: piece ``j`` is ``sum_i coeffs[j, i] tau**i``.

    ``t0`` is the absolute start time; piece ``j`` covers ``tau in [0, durations[j]]``.
    """

    coeffs: np.ndarray  # (M, 6, 3)
    durations: np.ndarray  # (M,)
    t0: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        T = np.asarray(self.durations, dtype=float).reshape(-1)
        if c.ndim != 3 or c.shape[1:] != (6, 3) or len(c) != len(T) or len(T) == 0:
            raise ValueError("coeffs must be (M, 6, 3) with M matching durations")
        if not np.all(T > 0):
            raise ValueError("piece durations must be positive")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "durations", T)
        object.__setattr__(self, "_knots", np.concatenate([[0.0], np.cumsum(T)]))

    @property
    def n_pieces(self) -> int:
        return len(self.durations)

    @property
    def total_time(self) -> float:
        return float(self._knots[-1])

    @property
    def t_end(self) -> float:
        return self.t0 + self.total_time

    def evaluate(self, t, order: int = 0) -> np.ndarray:
        """Position (order 0) or its ``order``-th derivative at absolute times ``t``.

        Times are clamped to the trajectory span, except that past the end
        derivatives are zero (the vehicle holds the final position).
        """
        ts = np.atleast_1d(np.asarray(t, dtype=float)) - self.t0
        tc = np.clip(ts, 0.0, self.total_time)
        j = np.clip(np.searchsorted(self._knots, tc, side="right") - 1, 0, self.n_pieces - 1)
        tau = tc - self._knots[j]
        out = np.einsum("ni,nik->nk", _basis(tau, order), self.coeffs[j])
        if order > 0:
            out[ts > self.total_time] = 0.0
        return out if np.ndim(t) else out[0]

    def state(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.evaluate(t, 0), self.evaluate(t, 1), self.evaluate(t, 2)

    def knot_states(self) -> np.ndarray:
        """(M+1, 3, 3) array of ``[p, v, a]`` at the knots."""
        c, T = self.coeffs, self.durations
        out = np.empty((self.n_pieces + 1, 3, 3))
        for order in range(3):
            out[:-1, order] = np.einsum("i,mik->mk", _basis(np.zeros(1), order)[0], c)
            out[-1, order] = _basis(np.array([T[-1]]), order)[0] @ c[-1]
        return out

    def continuity_error(self) -> float:
        """Largest jump in position, velocity or acceleration across interior knots."""
        if self.n_pieces == 1:
            return 0.0
        err = 0.0
        for order in range(3):
            end = np.einsum("mi,mik->mk", _basis(self.durations[:-1], order), self.coeffs[:-1])
            start = np.einsum("i,mik->mk", _basis(np.zeros(1), order)[0], self.coeffs[1:])
            err = max(err, float(np.abs(end - start).max()))
        return err

    def shifted(self, t0: float) -> "PiecewiseTrajectory":
        return PiecewiseTrajectory(self.coeffs, self.durations, t0)

    @classmethod
    def from_knots(cls, states, durations, t0: float = 0.0) -> "PiecewiseTrajectory":
        """Quintic Hermite pieces through knot states ``[p, v, a]`` (C2 by construction)."""
        states = np.asarray(states, dtype=float)
        T = np.asarray(durations, dtype=float).reshape(-1)
        return cls(hermite_coeffs(states, T), T, t0)


_FACT = np.array([[1, 1, 1, 1, 1, 1], [0, 1, 2, 3, 4, 5], [0, 0, 2, 6, 12, 20],
                  [0, 0, 0, 6, 24, 60], [0, 0, 0, 0, 24, 120]], dtype=float)


def _basis(tau: np.ndarray, order: int) -> np.ndarray:
    """Rows ``d^order/dtau^order [tau**i]`` for i = 0..5, shape (n, 6)."""
    tau = np.asarray(tau, dtype=float).reshape(-1)
    p = np.arange(6) - order
    with np.errstate(divide="ignore", invalid="ignore"):
        powers = np.where(p >= 0, tau[:, None] ** np.maximum(p, 0), 0.0)
    return powers * _FACT[order]


# Quintic Hermite map: coeffs = (A * T**P) @ [p0, v0, a0, p1, v1, a1].
_HA = np.array([
    [1, 0, 0, 0, 0, 0],
    [0, 1, 0, 0, 0, 0],
    [0, 0, 0.5, 0, 0, 0],
    [-10, -6, -1.5, 10, -4, 0.5],
    [15, 8, 1.5, -15, 7, -1],
    [-6, -3, -0.5, 6, -3, 0.5],
])
_HP = np.array([0, 1, 2, 0, 1, 2])[None, :] - np.arange(6)[:, None]


def hermite_matrix(T: np.ndarray):
    """``(H, dH/dT)`` of shape (M, 6, 6) for piece durations ``T``."""
    T = np.asarray(T, dtype=float).reshape(-1, 1, 1)
    H = np.where(_HA != 0, _HA * T**_HP, 0.0)
    dH = np.where(_HA != 0, _HA * _HP * T ** (_HP - 1), 0.0)
    return H, dH


def hermite_coeffs(states: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Coefficients (M, 6, 3) from knot states (M+1, 3, 3)."""
    H, _ = hermite_matrix(T)
    inputs = np.concatenate([states[:-1], states[1:]], axis=1)  # (M, 6, 3)
    return np.einsum("mij,mjk->mik", H, inputs)


# ---------------------------------------------------------------- cost


@dataclass(frozen=True, eq=False)
class CostResult:
    total: float
    parts: dict
    grad_coeffs: np.ndarray  # (M, 6, 3)
    grad_durations: np.ndarray  # (M,)


def sample_layout(durations: np.ndarray, K: int):
    """Piece index and fraction ``tau / T`` of every cost sample.

    Each piece contributes ``K`` equally spaced samples ``k/K``, k = 0..K-1,
    and the end of the last piece is appended.
    """
    M = len(durations)
    piece = np.repeat(np.arange(M), K)
    frac = np.tile(np.arange(K) / K, M)
    return np.append(piece, M - 1), np.append(frac, 1.0)


def _hinge3(x):
    h = np.maximum(x, 0.0)
    return h**3, 3.0 * h**2


def trajectory_cost(traj: PiecewiseTrajectory, field: DistanceField | OccupancyGrid | Callable | None,
                    params: PlannerParams, target_clearance: float | None = None) -> CostResult:
    """Weighted penalty objective and its exact gradient.

    Args:
        traj: trajectory whose coefficients and durations are differentiated.
        field: obstacle distance source returning ``(dist, grad)`` for points;
            an OccupancyGrid is converted to a distance field around the
            trajectory; None means free space.
        params: weights and limits.
        target_clearance: distance below which the obstacle hinge acts
            (defaults to ``params.clearance``).

    Terms: ``J_s`` jerk energy (closed form), ``J_t`` total time, ``J_d``
    cubic hinges on squared speed, acceleration and jerk excess, ``J_o``
    cubic hinge on clearance deficit, ``J_u`` variance of consecutive
    sample-to-sample chord lengths.
    """
    c = traj.coeffs
    T = traj.durations
    M = len(T)
    K = params.samples_per_piece
    clear = params.clearance if target_clearance is None else target_clearance
    if isinstance(field, OccupancyGrid):
        field = _field_around(field, traj, clear)

    # --- smoothness: jerk = b0 + b1 tau + b2 tau^2, b = (6 c3, 24 c4, 60 c5)
    b = c[:, 3:6, :] * np.array([6.0, 24.0, 60.0])[None, :, None]
    mn = np.arange(3)[:, None] + np.arange(3)[None, :] + 1
    W = T[:, None, None] ** mn / mn  # (M, 3, 3)
    bb = np.einsum("mak,mbk->mab", b, b)
    Js = float((W * bb).sum())
    gb = 2.0 * np.einsum("mab,mbk->mak", W, b)
    g_c = np.zeros_like(c)
    g_c[:, 3:6, :] += params.lambda_s * gb * np.array([6.0, 24.0, 60.0])[None, :, None]
    jerk_end = np.einsum("mi,mik->mk", _basis(T, 3), c)
    g_T = params.lambda_s * (jerk_end**2).sum(axis=1)

    # --- time
    Jt = float(T.sum())
    g_T = g_T + params.lambda_t

    # --- samples
    piece, frac = sample_layout(T, K)
    tau = frac * T[piece]
    cs = c[piece]
    B = [_basis(tau, k) for k in range(5)]
    p, v, a, j, s = (np.einsum("ni,nik->nk", Bk, cs) for Bk in B)

    gp = np.zeros_like(p)
    gv = np.zeros_like(p)
    ga = np.zeros_like(p)
    gj = np.zeros_like(p)

    Jd = 0.0
    for vec, lim, gout in ((v, params.v_max, gv), (a, params.a_max, ga), (j, params.j_max, gj)):
        val, dval = _hinge3((vec**2).sum(axis=1) - lim**2)
        Jd += float(val.sum())
        gout += params.lambda_d * (2.0 * dval)[:, None] * vec

    Jo = 0.0
    if field is not None and params.lambda_o > 0:
        dist, dgrad = field(p)
        val, dval = _hinge3(clear - dist)
        Jo = float(val.sum())
        gp += params.lambda_o * (-dval)[:, None] * dgrad

    Ju = 0.0
    if len(p) > 2:
        diff = p[1:] - p[:-1]
        L = np.sqrt((diff**2).sum(axis=1))
        Ju = float(np.var(L))
        dL = 2.0 * (L - L.mean()) / len(L)
        unit = np.where(L[:, None] > 0, diff / np.where(L > 0, L, 1.0)[:, None], 0.0)
        gchord = params.lambda_u * dL[:, None] * unit
        gp[1:] += gchord
        gp[:-1] -= gchord

    # --- chain rule from samples to coefficients and durations
    contrib = (np.einsum("ni,nk->nik", B[0], gp) + np.einsum("ni,nk->nik", B[1], gv)
               + np.einsum("ni,nk->nik", B[2], ga) + np.einsum("ni,nk->nik", B[3], gj))
    np.add.at(g_c, piece, contrib)
    dT = frac * ((gp * v).sum(1) + (gv * a).sum(1) + (ga * j).sum(1) + (gj * s).sum(1))
    g_T = g_T + np.bincount(piece, weights=dT, minlength=M)

    total = (params.lambda_s * Js + params.lambda_t * Jt + params.lambda_d * Jd
             + params.lambda_o * Jo + params.lambda_u * Ju)
    parts = {"smoothness": Js, "time": Jt, "feasibility": Jd, "obstacle": Jo, "uniformity": Ju}
    return CostResult(float(total), parts, g_c, g_T)


def _field_around(grid: OccupancyGrid, traj: PiecewiseTrajectory, clear: float) -> DistanceField:
    pts = traj.evaluate(np.linspace(traj.t0, traj.t_end, 200))
    pad = 2.0 * clear + 1.0
    lo = grid.world_to_index(pts.min(axis=0) - pad)
    hi = grid.world_to_index(pts.max(axis=0) + pad) + 1
    return grid.distance_field(lo, hi, truncate=max(2.0 * clear, grid.resolution))


# ---------------------------------------------------------------- initialization


def trapezoid_times(s: np.ndarray, length: float, v0: float, v_max: float, a: float) -> np.ndarray:
    """Arrival times at arc lengths ``s`` under a trapezoidal speed profile.

    Starts at speed ``v0`` (clipped to ``v_max``), accelerates at ``a`` to
    the cruise speed and decelerates at ``a`` to rest at ``length``. When the
    distance is too short to shed ``v0`` the deceleration is stretched.
    """
    s = np.asarray(s, dtype=float)
    v0 = min(max(v0, 0.0), v_max)
    if length <= 0:
        return np.zeros_like(s)
    peak = math.sqrt((2 * a * length + v0**2) / 2.0)
    if peak >= v_max:
        vp, ad = v_max, a
    elif peak >= v0:
        vp, ad = peak, a
    else:
        vp, ad = v0, v0**2 / (2 * length)
    s_acc = (vp**2 - v0**2) / (2 * a)
    s_dec = vp**2 / (2 * ad)
    t_acc = (vp - v0) / a
    t_cruise = max(length - s_acc - s_dec, 0.0) / vp
    total = t_acc + t_cruise + vp / ad
    out = np.empty_like(s)
    for i, si in enumerate(s):
        if si <= s_acc:
            out[i] = (math.sqrt(v0**2 + 2 * a * si) - v0) / a
        elif si <= length - s_dec:
            out[i] = t_acc + (si - s_acc) / vp
        else:
            rem = max(length - si, 0.0)
            out[i] = total - math.sqrt(2 * ad * rem) / ad
    return out


def initial_trajectory(waypoints, params: PlannerParams, start_vel=None, start_acc=None,
                       t0: float = 0.0) -> PiecewiseTrajectory:
    """Quintic pieces through points resampled along the waypoint polyline.

    Knots are spaced about ``piece_length`` apart in arc length; durations
    follow a trapezoidal profile (cruise ``v_max``, half ``a_max``); knot
    velocities follow the profile along the local path direction and knot
    accelerations start at zero. The end state is at rest.
    """
    W = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    if len(W) < 2:
        raise ValueError("need at least two waypoints")
    keep = np.concatenate([[True], np.linalg.norm(np.diff(W, axis=0), axis=1) > 1e-12])
    W = W[keep]
    v0 = np.zeros(3) if start_vel is None else np.asarray(start_vel, dtype=float)
    a0 = np.zeros(3) if start_acc is None else np.asarray(start_acc, dtype=float)
    if len(W) < 2:
        W = np.vstack([W[0], W[0] + 1e-3 * np.array([1.0, 0.0, 0.0])])
    seg = np.linalg.norm(np.diff(W, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    length = float(cum[-1])
    M = max(1, int(math.ceil(length / params.piece_length - 1e-9)))
    s_knots = np.linspace(0.0, length, M + 1)
    P = np.column_stack([np.interp(s_knots, cum, W[:, k]) for k in range(3)])
    acc = 0.5 * params.a_max
    times = trapezoid_times(s_knots, length, float(np.linalg.norm(v0)), params.v_max, acc)
    T = np.maximum(np.diff(times), 0.05)
    v_start = min(float(np.linalg.norm(v0)), params.v_max)
    speed = np.minimum.reduce([np.full(M + 1, params.v_max), np.sqrt(v_start**2 + 2 * acc * s_knots),
                               np.sqrt(2 * acc * np.maximum(length - s_knots, 0.0))])
    tangent = np.zeros_like(P)
    tangent[1:-1] = P[2:] - P[:-2]
    nrm = np.linalg.norm(tangent, axis=1)
    tangent[nrm > 0] /= nrm[nrm > 0, None]
    states = np.zeros((M + 1, 3, 3))
    states[:, 0] = P
    states[:, 1] = np.clip(speed, 0.0, params.v_max)[:, None] * tangent
    states[0, 1] = v0
    states[0, 2] = a0
    states[-1, 1:] = 0.0
    return PiecewiseTrajectory.from_knots(states, T, t0)


# ---------------------------------------------------------------- optimization


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    trajectory: PiecewiseTrajectory
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


class KnotObjective:
    """Objective over free knot states and log-durations, start and end states fixed.

    The decision vector is ``[interior knot states (M-1)*9, log T (M)]``.
    Coefficients follow from the Hermite map, so every iterate is C2.
    """

    def __init__(self, start_state, end_state, M: int, field, params: PlannerParams,
                 target_clearance: float, t0: float = 0.0):
        self.start = np.asarray(start_state, dtype=float).reshape(3, 3)
        self.end = np.asarray(end_state, dtype=float).reshape(3, 3)
        self.M = M
        self.field = field
        self.params = params
        self.clear = target_clearance
        self.t0 = t0

    def pack(self, traj: PiecewiseTrajectory) -> np.ndarray:
        ks = traj.knot_states()
        return np.concatenate([ks[1:-1].ravel(), np.log(traj.durations)])

    def unpack(self, x: np.ndarray):
        n = (self.M - 1) * 9
        interior = x[:n].reshape(self.M - 1, 3, 3)
        states = np.concatenate([self.start[None], interior, self.end[None]])
        T = np.exp(x[n:])
        return states, T

    def trajectory(self, x) -> PiecewiseTrajectory:
        states, T = self.unpack(x)
        return PiecewiseTrajectory.from_knots(states, T, self.t0)

    def __call__(self, x):
        states, T = self.unpack(x)
        H, dH = hermite_matrix(T)
        inputs = np.concatenate([states[:-1], states[1:]], axis=1)
        traj = PiecewiseTrajectory(np.einsum("mij,mjk->mik", H, inputs), T, self.t0)
        res = trajectory_cost(traj, self.field, self.params, self.clear)
        g_in = np.einsum("mij,mik->mjk", H, res.grad_coeffs)  # (M, 6, 3)
        g_states = np.zeros_like(states)
        g_states[:-1] += g_in[:, 0:3]
        g_states[1:] += g_in[:, 3:6]
        g_T = res.grad_durations + np.einsum("mij,mjk,mik->m", dH, inputs, res.grad_coeffs)
        grad = np.concatenate([g_states[1:-1].ravel(), g_T * T])
        return res.total, grad


def optimize_trajectory(waypoints, field, params: PlannerParams = PlannerParams(), *,
                        start_vel=None, start_acc=None, initial: PiecewiseTrajectory | None = None,
                        t0: float = 0.0, grid: OccupancyGrid | None = None,
                        check: bool = True) -> OptimizationResult:
    """Optimize a trajectory from an A* path and post-check it.

    Quasi-Newton (L-BFGS-B) descent over interior knot states and
    log-durations, stopping at gradient norm ``grad_tol`` or ``max_iter``
    iterations. If the optimizer ends above the initial cost the initial
    trajectory is returned, so the result never costs more than the start.

    Args:
        waypoints: A* path; ignored when ``initial`` is given.
        field: distance field (or None for free space).
        grid: occupancy grid for the post-check; defaults to checking the
            distance field only.
        check: run the post-check.

    Raises:
        InfeasibleTrajectoryError: the post-check finds a clearance, floor,
            ceiling or dynamic-limit violation.
    """
    init = initial if initial is not None else initial_trajectory(waypoints, params, start_vel, start_acc, t0)
    ks = init.knot_states()
    target = params.clearance + params.clearance_margin
    obj = KnotObjective(ks[0], ks[-1], init.n_pieces, field, params, target, init.t0)
    x0 = obj.pack(init)
    f0, _ = obj(x0)
    # Durations stay within [0.02 s, 20 s] so line searches cannot overflow.
    n_free = len(x0) - init.n_pieces
    bounds = [(None, None)] * n_free + [(math.log(0.02), math.log(20.0))] * init.n_pieces
    with np.errstate(over="ignore", invalid="ignore"):
        out = minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": params.max_iter, "gtol": params.grad_tol})
    if np.all(np.isfinite(out.x)) and out.fun <= f0:
        traj, f = obj.trajectory(out.x), float(out.fun)
    else:
        traj, f = init, float(f0)
    if check:
        post_check(traj, params, grid=grid, field=field)
    return OptimizationResult(traj, float(f0), f, int(out.nit), bool(out.success))


def post_check(traj: PiecewiseTrajectory, params: PlannerParams, grid: OccupancyGrid | None = None,
               field=None, dt: float = 0.05) -> None:
    """Verify sampled clearance and dynamic limits.

    Raises:
        InfeasibleTrajectoryError: with the first violation found.
    """
    ts = traj.t0 + np.arange(0.0, traj.total_time + 1e-12, dt)
    ts = np.append(ts, traj.t_end)
    slack = 1.0 + params.dyn_tolerance
    for order, lim, name in ((1, params.v_max, "speed"), (2, params.a_max, "acceleration"),
                             (3, params.j_max, "jerk")):
        mag = np.linalg.norm(traj.evaluate(ts, order), axis=1)
        bad = np.flatnonzero(mag > lim * slack)
        if len(bad):
            i = bad[0]
            raise InfeasibleTrajectoryError(f"{name} {mag[i]:.3f} exceeds limit {lim:.3f} at t={ts[i]:.2f}")
    if grid is not None:
        hit = collision_check(traj, grid, horizon=None, clearance=params.clearance)
        if hit is not None:
            raise InfeasibleTrajectoryError(f"clearance violated at t={hit:.2f}")
    elif field is not None:
        d, _ = field(traj.evaluate(ts))
        bad = np.flatnonzero(d < params.clearance)
        if len(bad):
            raise InfeasibleTrajectoryError(f"clearance violated at t={ts[bad[0]]:.2f}")


# ---------------------------------------------------------------- collision check


def collision_check(traj: PiecewiseTrajectory, grid: OccupancyGrid, horizon: float | None = None,
                    clearance: float = 0.0, t_from: float | None = None, dt: float = 0.05) -> float | None:
    """Earliest sampled time at which ``traj`` meets an obstacle, or None.

    Samples every ``dt`` seconds from ``t_from`` (default: trajectory start)
    over ``horizon`` seconds (default: to the end). A sample fails when its
    cell is occupied, it leaves the ``[floor_z, ceiling_z]`` band, or an
    occupied cell center lies closer than ``clearance``.
    """
    start = traj.t0 if t_from is None else max(float(t_from), traj.t0)
    stop = traj.t_end if horizon is None else min(traj.t_end, start + horizon)
    if stop < start:
        return None
    ts = start + np.arange(0.0, stop - start + 1e-12, dt)
    pts = traj.evaluate(ts)
    bad = (pts[:, 2] < grid.floor_z) | (pts[:, 2] > grid.ceiling_z)
    bad |= grid.occupied_at(pts)
    if clearance > 0:
        bad |= near_occupied(grid, pts, clearance)
    i = np.flatnonzero(bad)
    return float(ts[i[0]]) if len(i) else None


_BALLS: dict[tuple[float, float], np.ndarray] = {}


def _ball_offsets(resolution: float, radius: float) -> np.ndarray:
    key = (resolution, radius)
    if key not in _BALLS:
        r = int(math.ceil(radius / resolution)) + 1
        rng = np.arange(-r, r + 1)
        off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
        # Keep offsets whose cell center can come within radius of a point in the home cell.
        gap = np.maximum(np.abs(off) - 1, 0) * resolution
        _BALLS[key] = off[(gap**2).sum(axis=1) < radius**2]
    return _BALLS[key]


def near_occupied(grid: OccupancyGrid, points, radius: float) -> np.ndarray:
    """True where a mapped occupied cell center lies within ``radius`` of the point."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    base = grid.world_to_index(pts)
    off = _ball_offsets(grid.resolution, radius)
    cells = base[:, None, :] + off[None, :, :]
    occ = grid.logodds(cells) > grid.occ_threshold
    if not occ.any():
        return np.zeros(len(pts), dtype=bool)
    centers = grid.index_to_world(cells)
    d2 = ((centers - pts[:, None, :]) ** 2).sum(axis=2)
    return np.any(occ & (d2 < radius**2), axis=1)
