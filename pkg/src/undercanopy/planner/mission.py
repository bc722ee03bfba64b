"""Closed-loop mapping and planning missions in synthetic forests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import InfeasibleTrajectoryError, NoPathError
from ..forest import ForestScene, RayCaster, SensorModel, inside_any_frustum
from ..io import Trajectory
from .grid import OccupancyGrid, integrate_depth, mapping_sensor, yaw_rotation
from .search import astar
from .trajectory import (PiecewiseTrajectory, PlannerParams, collision_check, optimize_trajectory)

NORMAL = "Normal"
EMERGENCY_STOP = "EmergencyStop"
REPLANNING = "Replanning"
REACHED = "Reached"
FAILED = "Failed"
MODES = (NORMAL, EMERGENCY_STOP, REPLANNING, REACHED, FAILED)
TERMINAL = (REACHED, FAILED)


@dataclass(frozen=True)
class MissionParams:
    """Simulation and state-machine settings around the planner."""

    tick: float = 0.1  # s
    map_rate: float = 5.0  # depth frames per second
    resolution: float = 0.1
    map_size: float = 20.0  # m, horizontal window edge
    floor_z: float = 0.5
    ceiling_z: float = 2.25
    goal_tolerance: float = 0.5
    goal_snap: float = 1.0
    max_replan_failures: int = 10
    replan_period: float = 3.0  # s between routine replans while flying
    replan_lead: float = 3.0  # s: replan when the plan ends this soon short of the goal
    retry_interval: float = 0.5  # s between attempts while hovering
    check_horizon: float = 3.0  # s of trajectory checked each tick
    brake_decel: float = 2.0  # m/s^2 during an emergency stop
    body_radius: float = 0.1  # m, for the geometry audit
    max_time_factor: float = 4.0  # timeout = factor * distance / v_max + 30 s

    def __post_init__(self):
        if not (self.tick > 0 and self.map_rate > 0 and self.resolution > 0):
            raise ValueError("tick, map_rate and resolution must be positive")
        if not self.floor_z < self.ceiling_z:
            raise ValueError("floor_z must lie below ceiling_z")
        if self.max_replan_failures < 1:
            raise ValueError("max_replan_failures must be >= 1")


@dataclass(frozen=True)
class MissionState:
    mode: str
    emergency_stop_count: int
    distance_flown: float
    t: float
    position: tuple
    velocity: tuple = (0.0, 0.0, 0.0)
    acceleration: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    goal: tuple = (0.0, 0.0, 0.0)
    reached_point: tuple | None = None  # substitute goal when the goal itself is blocked
    replan_failures: int = 0
    last_plan_t: float = -math.inf
    replans: int = 0
    event: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mission mode {self.mode!r}")

    @property
    def terminal(self) -> bool:
        return self.mode in TERMINAL

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)

    @property
    def v(self) -> np.ndarray:
        return np.asarray(self.velocity, dtype=float)


def _tup(a) -> tuple:
    return tuple(float(x) for x in np.asarray(a, dtype=float).reshape(-1))


def initial_state(start, goal, yaw: float | None = None) -> MissionState:
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if yaw is None:
        d = goal - start
        yaw = math.atan2(d[1], d[0])
    return MissionState(NORMAL, 0, 0.0, 0.0, _tup(start), goal=_tup(goal), yaw=float(yaw))


# ---------------------------------------------------------------- planning


@dataclass(frozen=True, eq=False)
class PlanResult:
    trajectory: PiecewiseTrajectory
    target: np.ndarray
    final: bool  # the target is the mission goal (or its substitute)


def local_target(position, goal, horizon: float) -> tuple[np.ndarray, bool]:
    p = np.asarray(position, dtype=float)
    g = np.asarray(goal, dtype=float)
    d = g[:2] - p[:2]
    dist = float(np.hypot(*d))
    if dist <= horizon:
        return g.copy(), True
    xy = p[:2] + d / dist * horizon
    return np.array([xy[0], xy[1], g[2]]), False


def plan_local(grid: OccupancyGrid, state: MissionState, planner: PlannerParams,
               mission: MissionParams) -> PlanResult:
    """A* toward the local target, then trajectory optimization from the current state.

    When the vehicle already sits closer than the clearance to a mapped
    obstacle, the post-check tolerates that distance (minus 2 cm) so an
    escape path can be accepted.

    Raises:
        NoPathError, InfeasibleTrajectoryError: planning failed.
    """
    p = state.p
    target, final = local_target(p, state.goal, planner.local_horizon)
    path, dfield = astar(grid, p, target, clearance=planner.clearance, unknown_penalty=planner.unknown_penalty,
                         margin=planner.search_margin, goal_snap=mission.goal_snap)
    here = obstacle_distance(grid, p, planner.clearance)
    params = planner
    if here < planner.clearance:
        params = replace(planner, clearance=max(here - 0.02, 0.0))
    res = optimize_trajectory(path, dfield, params, start_vel=state.v, start_acc=np.asarray(state.acceleration),
                              t0=state.t, grid=grid)
    return PlanResult(res.trajectory, path[-1], final)


def obstacle_distance(grid: OccupancyGrid, point, radius: float) -> float:
    """Distance from ``point`` to the nearest occupied cell center, capped at ``radius``."""
    from .trajectory import _ball_offsets  # shared offset cache

    p = np.asarray(point, dtype=float).reshape(1, 3)
    cells = grid.world_to_index(p) + _ball_offsets(grid.resolution, radius)
    occ = grid.logodds(cells) > grid.occ_threshold
    if not occ.any():
        return float(radius)
    d = np.linalg.norm(grid.index_to_world(cells[occ]) - p, axis=1)
    return float(min(d.min(), radius))


# ---------------------------------------------------------------- state machine


def step_mission(state: MissionState, grid: OccupancyGrid, traj: PiecewiseTrajectory | None,
                 planner: PlannerParams = PlannerParams(), mission: MissionParams = MissionParams(),
                 dt: float | None = None):
    """Advance the mission by one tick.

    Normal: check the current plan against the map, replan when a collision
    is predicted, the plan is about to run out short of the goal, or the
    routine period has elapsed; a failed replan with time to collision under
    the threshold triggers an emergency stop. EmergencyStop brakes to rest,
    then hands over to Replanning, which hovers and retries. Consecutive
    failed attempts beyond the bound end the mission as Failed; coming within
    the goal tolerance ends it as Reached.

    Returns:
        ``(new_state, trajectory)``.
    """
    if state.terminal:
        raise ValueError("mission already finished")
    dt = mission.tick if dt is None else dt
    traj_out = traj
    failures = state.replan_failures
    mode = state.mode
    estops = state.emergency_stop_count
    last_plan = state.last_plan_t
    replans = state.replans
    reached_point = state.reached_point
    events = []
    t1 = state.t + dt
    p0 = state.p

    def attempt():
        nonlocal failures, last_plan, replans, reached_point
        last_plan = state.t
        replans += 1
        try:
            plan = plan_local(grid, state, planner, mission)
        except (NoPathError, InfeasibleTrajectoryError) as exc:
            failures += 1
            events.append(f"replan failed: {exc}")
            return None
        failures = 0
        if plan.final and np.linalg.norm(plan.target - np.asarray(state.goal)) > 1e-9:
            reached_point = _tup(plan.target)
        events.append("replanned")
        return plan.trajectory

    if mode == NORMAL:
        clear = min(planner.clearance, max(obstacle_distance(grid, p0, planner.clearance) - 0.02, 0.0))
        hit = None
        if traj is not None:
            hit = collision_check(traj, grid, horizon=mission.check_horizon, clearance=clear, t_from=state.t)
        ends_short = traj is None or (traj.t_end - state.t < mission.replan_lead
                                      and not _ends_at_goal(traj, state, mission))
        routine = state.t - last_plan >= mission.replan_period
        if traj is None or hit is not None or ends_short or routine:
            new = attempt()
            if new is not None:
                traj_out = new
            elif hit is not None:
                if hit - state.t < planner.collision_time_threshold:
                    mode = EMERGENCY_STOP
                    estops += 1
                    traj_out = None
                    events.append(f"emergency stop (collision predicted in {hit - state.t:.2f} s)")
            elif traj is None or traj.t_end <= state.t:
                mode = REPLANNING
                traj_out = None
        if mode == NORMAL and traj_out is not None:
            p, v, a = traj_out.state(t1)
        else:
            p, v, a = p0, np.zeros(3), np.zeros(3)
        if mode == EMERGENCY_STOP:
            p, v, a = _brake(state, dt, mission.brake_decel)
            if np.linalg.norm(v) == 0.0:
                mode = REPLANNING
    elif mode == EMERGENCY_STOP:
        p, v, a = _brake(state, dt, mission.brake_decel)
        if np.linalg.norm(v) == 0.0:
            mode = REPLANNING
            events.append("stopped")
    else:  # REPLANNING: hover and retry
        p, v, a = p0, np.zeros(3), np.zeros(3)
        if state.t - last_plan >= mission.retry_interval - 1e-9:
            new = attempt()
            if new is not None:
                traj_out = new
                mode = NORMAL
                p, v, a = new.state(t1)

    if failures >= mission.max_replan_failures:
        mode = FAILED
        events.append("too many failed replans")

    yaw = state.yaw
    if np.hypot(v[0], v[1]) > 0.2:
        yaw = math.atan2(v[1], v[0])
    elif mode == REPLANNING:
        g = np.asarray(state.goal) - p
        yaw = math.atan2(g[1], g[0])
    dist = state.distance_flown + float(np.linalg.norm(np.asarray(p) - p0))
    goals = [np.asarray(state.goal)] + ([np.asarray(reached_point)] if reached_point is not None else [])
    if mode != FAILED and min(np.linalg.norm(np.asarray(p) - g) for g in goals) <= mission.goal_tolerance:
        mode = REACHED
        events.append("goal reached")
    new_state = replace(state, mode=mode, emergency_stop_count=estops, distance_flown=dist, t=t1,
                        position=_tup(p), velocity=_tup(v), acceleration=_tup(a), yaw=float(yaw),
                        reached_point=reached_point, replan_failures=failures, last_plan_t=last_plan,
                        replans=replans, event="; ".join(events))
    return new_state, traj_out


def _ends_at_goal(traj: PiecewiseTrajectory, state: MissionState, mission: MissionParams) -> bool:
    end = traj.evaluate(traj.t_end)
    goals = [np.asarray(state.goal)] + ([np.asarray(state.reached_point)] if state.reached_point else [])
    return min(np.linalg.norm(end - g) for g in goals) <= mission.goal_tolerance


def _brake(state: MissionState, dt: float, decel: float):
    v = state.v
    speed = float(np.linalg.norm(v))
    if speed == 0.0:
        return state.p, np.zeros(3), np.zeros(3)
    u = v / speed
    new_speed = max(0.0, speed - decel * dt)
    tb = (speed - new_speed) / decel  # time spent braking within this tick
    p = state.p + u * (speed * tb - 0.5 * decel * tb * tb)
    return p, u * new_speed, -u * decel if new_speed > 0 else np.zeros(3)


# ---------------------------------------------------------------- runner


@dataclass(eq=False)
class MissionLog:
    records: list
    summary: dict
    flown: Trajectory
    snapshots: list = field(default_factory=list)

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": self.summary}, sort_keys=True) + "\n")
        return path


def run_mission(scene: ForestScene, start, goal, params: PlannerParams = PlannerParams(),
                sensor: SensorModel | None = None, seed: int = 0,
                mission: MissionParams = MissionParams(), snapshot_every: int = 0) -> MissionLog:
    """Fly from ``start`` to ``goal`` with mapping, planning and the safety state machine.

    Each tick first fuses a depth frame when one is due, then steps the state
    machine. Success means Reached with no flown pose (sampled at half-tick
    spacing) within ``body_radius`` of any true stem or branch. Smooth means
    no emergency stop. Mapping is noise-free and the loop has no other
    randomness; ``seed`` only labels the log (scenes carry their own seed).
    """
    sensor = sensor or mapping_sensor()
    caster = RayCaster(scene, include_branches=True)
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    grid = OccupancyGrid.around(start, mission.map_size, (0.0, mission.ceiling_z + 1.0), mission.resolution,
                                mission.floor_z, mission.ceiling_z)
    state = initial_state(start, goal)
    traj = None
    frame_every = max(1, int(round(1.0 / (mission.map_rate * mission.tick))))
    d = float(np.linalg.norm(goal - start))
    max_ticks = int(math.ceil((mission.max_time_factor * d / params.v_max + 30.0) / mission.tick))
    records = [_record(state)]
    snaps = []
    timeout = False
    for k in range(max_ticks):
        if k % frame_every == 0:
            integrate_depth(grid, (state.p, yaw_rotation(state.yaw)), scene, sensor, caster=caster)
        state, traj = step_mission(state, grid, traj, params, mission)
        records.append(_record(state))
        if snapshot_every and k % snapshot_every == 0:
            snaps.append(grid.occupied_cells())
        if state.terminal:
            break
    else:
        timeout = True
        state = replace(state, mode=FAILED, event="timeout")
        records[-1] = _record(state)

    pos = np.array([r["position"] for r in records])
    mids = 0.5 * (pos[1:] + pos[:-1])
    audit = np.vstack([pos, mids]) if len(mids) else pos
    collided = bool(np.any(inside_any_frustum(scene, audit, inflate=mission.body_radius)))
    reached = state.mode == REACHED
    summary = {
        "success": reached and not collided,
        "smooth": state.emergency_stop_count == 0,
        "reached": reached,
        "collided": collided,
        "final_mode": state.mode,
        "timeout": timeout,
        "emergency_stop_count": state.emergency_stop_count,
        "distance_flown": round(state.distance_flown, 6),
        "flight_time": round(state.t, 6),
        "replans": state.replans,
        "seed": int(seed),
        "start": _tup(start),
        "goal": _tup(goal),
    }
    return MissionLog(records, summary, _flown_trajectory(records), snaps)


def _record(state: MissionState) -> dict:
    return {
        "t": round(state.t, 9),
        "mode": state.mode,
        "position": [round(x, 9) for x in state.position],
        "velocity": [round(x, 9) for x in state.velocity],
        "yaw": round(state.yaw, 9),
        "emergency_stop_count": state.emergency_stop_count,
        "distance_flown": round(state.distance_flown, 9),
        "event": state.event,
    }


def _flown_trajectory(records: list) -> Trajectory:
    t = np.array([r["t"] for r in records])
    pos = np.array([r["position"] for r in records])
    yaw = np.array([r["yaw"] for r in records])
    q = Rotation.from_euler("z", yaw).as_quat()
    return Trajectory(t, pos, q)
