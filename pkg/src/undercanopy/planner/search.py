"""A* search on a 26-connected voxel lattice."""

from __future__ import annotations

import heapq
import math

import numpy as np
from numba import njit

from ..errors import NoPathError
from .grid import OccupancyGrid

# Neighbor offsets in a fixed order (the search is deterministic).
OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                    if (dx, dy, dz) != (0, 0, 0)], dtype=np.int64)
STEP_LENGTHS = np.sqrt((OFFSETS**2).sum(axis=1)).astype(np.float64)


def edge_cost(step_length: float, target_unknown: bool, unknown_penalty: float) -> float:
    """Cost of one move: its length, inflated by ``1 + unknown_penalty`` into unknown cells."""
    return step_length * (1.0 + unknown_penalty) if target_unknown else step_length


@njit(cache=True)
def _astar_kernel(blocked, unknown, start, goal, unknown_penalty, offsets, lengths):
    nx, ny, nz = blocked.shape
    n = nx * ny * nz
    g = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    closed = np.zeros(n, dtype=np.bool_)
    s = (start[0] * ny + start[1]) * nz + start[2]
    t = (goal[0] * ny + goal[1]) * nz + goal[2]
    g[s] = 0.0
    h0 = math.sqrt(float((start[0] - goal[0]) ** 2 + (start[1] - goal[1]) ** 2 + (start[2] - goal[2]) ** 2))
    heap = [(h0, 0.0, s)]
    while len(heap) > 0:
        f, negg, u = heapq.heappop(heap)
        if closed[u]:
            continue
        closed[u] = True
        if u == t:
            break
        ux = u // (ny * nz)
        uy = (u // nz) % ny
        uz = u % nz
        gu = g[u]
        for k in range(offsets.shape[0]):
            vx = ux + offsets[k, 0]
            vy = uy + offsets[k, 1]
            vz = uz + offsets[k, 2]
            if vx < 0 or vy < 0 or vz < 0 or vx >= nx or vy >= ny or vz >= nz:
                continue
            if blocked[vx, vy, vz]:
                continue
            v = (vx * ny + vy) * nz + vz
            if closed[v]:
                continue
            c = lengths[k]
            if unknown[vx, vy, vz]:
                c = c * (1.0 + unknown_penalty)
            gv = gu + c
            if gv < g[v]:
                g[v] = gv
                parent[v] = u
                hv = math.sqrt(float((vx - goal[0]) ** 2 + (vy - goal[1]) ** 2 + (vz - goal[2]) ** 2))
                heapq.heappush(heap, (gv + hv, -gv, v))
    return g[t], parent


def astar_cells(blocked, unknown, start, goal, unknown_penalty: float = 0.5):
    """Shortest 26-connected path between two cells of a box, in cell units.

    Moves cost their Euclidean length (1, sqrt 2 or sqrt 3), multiplied by
    ``1 + unknown_penalty`` when entering an unknown cell. The Euclidean
    distance to the goal is the heuristic; it is admissible and consistent
    because every move costs at least its length.

    Returns:
        ``(cells, cost)`` with ``cells`` an (n, 3) int array from start to goal.

    Raises:
        NoPathError: the goal is unreachable, or start/goal is blocked or
            outside the box.
    """
    blocked = np.ascontiguousarray(blocked, dtype=np.bool_)
    unknown = np.ascontiguousarray(unknown, dtype=np.bool_)
    if blocked.shape != unknown.shape or blocked.ndim != 3:
        raise ValueError("blocked and unknown must be 3D arrays of one shape")
    if unknown_penalty < 0:
        raise ValueError("unknown_penalty must be >= 0")
    start = np.asarray(start, dtype=np.int64).reshape(3)
    goal = np.asarray(goal, dtype=np.int64).reshape(3)
    shape = np.array(blocked.shape)
    for name, c in (("start", start), ("goal", goal)):
        if np.any(c < 0) or np.any(c >= shape):
            raise NoPathError(f"{name} cell {tuple(c)} lies outside the search box")
        if blocked[tuple(c)]:
            raise NoPathError(f"{name} cell {tuple(c)} is blocked")
    cost, parent = _astar_kernel(blocked, unknown, start, goal, float(unknown_penalty), OFFSETS, STEP_LENGTHS)
    if not np.isfinite(cost):
        raise NoPathError("goal is unreachable")
    ny, nz = blocked.shape[1], blocked.shape[2]
    u = (goal[0] * ny + goal[1]) * nz + goal[2]
    chain = [u]
    while parent[u] >= 0:
        u = parent[u]
        chain.append(u)
    chain = np.array(chain[::-1], dtype=np.int64)
    cells = np.column_stack([chain // (ny * nz), (chain // nz) % ny, chain % nz])
    return cells, float(cost)


def path_cost(cells, unknown, unknown_penalty: float = 0.5) -> float:
    """Cost of a cell path under the A* edge model (for checks)."""
    cells = np.asarray(cells)
    total = 0.0
    for a, b in zip(cells[:-1], cells[1:]):
        d = b - a
        if np.max(np.abs(d)) != 1:
            raise ValueError("path cells are not 26-neighbors")
        total += edge_cost(math.sqrt(float(d @ d)), bool(unknown[tuple(b)]), unknown_penalty)
    return total


# ---------------------------------------------------------------- grid wrapper


def nearest_free(blocked, cell, max_cells: float) -> np.ndarray | None:
    """Closest unblocked cell within ``max_cells`` (ties by index order), or None."""
    cell = np.asarray(cell, dtype=np.int64)
    r = int(math.floor(max_cells))
    rng = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    d2 = (off**2).sum(axis=1)
    off = off[d2 <= max_cells**2]
    d2 = d2[d2 <= max_cells**2]
    off = off[np.lexsort((off[:, 2], off[:, 1], off[:, 0], d2))]
    cand = cell + off
    shape = np.array(blocked.shape)
    ok = np.all((cand >= 0) & (cand < shape), axis=1)
    cand = cand[ok]
    free = ~blocked[cand[:, 0], cand[:, 1], cand[:, 2]]
    if not np.any(free):
        return None
    return cand[int(np.argmax(free))]


def search_box(grid: OccupancyGrid, start, goal, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """World index box ``[lo, hi)`` covering start and goal plus ``margin`` in x/y, full band in z."""
    a = grid.world_to_index(start)
    b = grid.world_to_index(goal)
    m = int(math.ceil(margin / grid.resolution))
    lo = np.minimum(a, b) - m
    hi = np.maximum(a, b) + m + 1
    # Vertical extent: one virtual layer beyond floor and ceiling is enough.
    lo[2] = int(math.floor(grid.floor_z / grid.resolution)) - 1
    hi[2] = int(math.floor(grid.ceiling_z / grid.resolution)) + 2
    return lo, hi


def line_of_sight(blocked, a, b) -> bool:
    """True when the segment between cell centers ``a`` and ``b`` crosses no blocked cell."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = int(math.ceil(np.abs(b - a).max() * 4)) + 1
    pts = a + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)
    cells = np.floor(pts + 0.5).astype(np.int64)
    return not bool(blocked[cells[:, 0], cells[:, 1], cells[:, 2]].any())


def shortcut_path(cells, blocked) -> np.ndarray:
    """Greedy line-of-sight pruning of a cell path (keeps the first and last cell)."""
    cells = np.asarray(cells)
    if len(cells) <= 2:
        return cells
    keep = [0]
    i = 0
    while i < len(cells) - 1:
        j = len(cells) - 1
        while j > i + 1 and not line_of_sight(blocked, cells[i], cells[j]):
            j -= 1
        keep.append(j)
        i = j
    return cells[keep]


def astar(grid: OccupancyGrid, start, goal, clearance: float = 0.3, unknown_penalty: float = 0.5,
          margin: float = 3.0, goal_snap: float = 1.0, shortcut: bool = True):
    """Waypoint path (cell centers, meters) from ``start`` to ``goal`` through free and unknown space.

    Cells closer than ``clearance`` to a mapped obstacle are blocked, as are
    the virtual floor and ceiling. A goal above the ceiling or below the floor
    is clamped into the flight band; a blocked goal is replaced by the nearest
    free cell within ``goal_snap`` meters. A blocked start is escaped the same
    way (the first waypoint is still the exact start). With ``shortcut`` the
    lattice path is pruned to waypoints joined by blocked-free segments.

    Returns:
        ``(waypoints, field)`` where ``field`` is the truncated distance field
        over the search box (reused by the trajectory optimizer).

    Raises:
        NoPathError: no free goal cell or no connecting path.
    """
    start = np.asarray(start, dtype=float).reshape(3)
    goal = np.asarray(goal, dtype=float).reshape(3).copy()
    res = grid.resolution
    # Centers of the lowest and highest cells inside the flight band.
    lo_z = (math.ceil(grid.floor_z / res - 0.5) + 0.5) * res
    hi_z = (math.floor(grid.ceiling_z / res - 0.5) + 0.5) * res
    goal[2] = min(max(goal[2], lo_z), hi_z)
    lo, hi = search_box(grid, start, goal, margin)
    occ, unknown = grid.box(lo, hi)
    field = grid.distance_field(lo, hi, truncate=max(2 * clearance, res))
    blocked = occ | (field.values < clearance)
    s = grid.world_to_index(start) - lo
    g = grid.world_to_index(goal) - lo
    snap = goal_snap / res
    snapped = bool(blocked[tuple(g)])
    if snapped:
        alt = nearest_free(blocked, g, snap)
        if alt is None:
            raise NoPathError("goal is occupied and no free cell lies within reach")
        g = alt
    s_cell = s
    if blocked[tuple(s)]:
        alt = nearest_free(blocked, s, snap)
        if alt is None:
            raise NoPathError("start is enclosed by obstacles")
        s_cell = alt
    cells, _ = astar_cells(blocked, unknown, s_cell, g, unknown_penalty)
    if shortcut:
        cells = shortcut_path(cells, blocked)
    pts = grid.index_to_world(cells + lo)
    pts = np.vstack([start, pts[1:]]) if np.array_equal(s_cell, s) else np.vstack([start, pts])
    if not snapped and len(pts) > 1:
        pts[-1] = goal
    return pts, field
