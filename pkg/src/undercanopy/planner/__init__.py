"""Occupancy mapping, search, trajectory optimization and the mission loop."""

from .grid import DistanceField, OccupancyGrid, integrate_depth, mapping_sensor, yaw_rotation
from .mission import (
    EMERGENCY_STOP,
    FAILED,
    NORMAL,
    REACHED,
    REPLANNING,
    MissionLog,
    MissionParams,
    MissionState,
    initial_state,
    run_mission,
    step_mission,
)
from .scenario import PRESETS, MissionScenario, preset
from .search import astar, astar_cells, path_cost
from .trajectory import (
    CostResult,
    PiecewiseTrajectory,
    PlannerParams,
    collision_check,
    initial_trajectory,
    optimize_trajectory,
    post_check,
    trajectory_cost,
)

__all__ = [name for name in dir() if not name.startswith("_")]
