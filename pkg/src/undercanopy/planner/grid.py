"""Log-odds occupancy grid on circular buffers, with a virtual floor and ceiling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.ndimage import distance_transform_edt
from scipy.spatial.transform import Rotation

from ..forest import ForestScene, RayCaster, SensorModel

L_HIT = 0.85
L_MISS = 0.4
L_MIN = -4.0
L_MAX = 4.0
OCC_THRESHOLD = 1.5


@dataclass(eq=False)
class OccupancyGrid:
    """Fixed-size voxel window over an unbounded world lattice.

    A world cell ``i`` (integer 3-vector, ``floor(p / resolution)``) is stored
    at ``i mod dimensions``; the window holds cells ``origin_index <= i <
    origin_index + dimensions``. Cells outside the window read as unknown
    (log-odds 0). Cells whose center lies below ``floor_z`` or above
    ``ceiling_z`` always read as occupied.
    """

    resolution: float
    dimensions: tuple[int, int, int]
    origin_index: np.ndarray
    floor_z: float
    ceiling_z: float
    cells: np.ndarray = None
    l_hit: float = L_HIT
    l_miss: float = L_MISS
    l_min: float = L_MIN
    l_max: float = L_MAX
    occ_threshold: float = OCC_THRESHOLD
    wrap_z: bool = False
    frames: int = field(default=0)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("grid resolution must be positive")
        self.dimensions = tuple(int(n) for n in self.dimensions)
        if len(self.dimensions) != 3 or min(self.dimensions) < 3:
            raise ValueError("grid needs >= 3 cells per axis")
        if not self.floor_z < self.ceiling_z:
            raise ValueError("floor_z must lie below ceiling_z")
        if not self.l_min < 0 < self.l_max:
            raise ValueError("need l_min < 0 < l_max")
        self.origin_index = np.asarray(self.origin_index, dtype=np.int64).reshape(3).copy()
        if self.cells is None:
            self.cells = np.zeros(self.dimensions, dtype=np.float64)
        elif self.cells.shape != self.dimensions:
            raise ValueError("cells array does not match dimensions")
        self.cells = np.ascontiguousarray(self.cells, dtype=np.float64)
        self._dims = np.array(self.dimensions, dtype=np.int64)
        self._hit_stamp = None
        self._free_stamp = None

    @classmethod
    def around(cls, center, size_xy: float = 20.0, z_range=(0.0, 3.2), resolution: float = 0.1,
               floor_z: float = 0.5, ceiling_z: float = 2.25, **kw) -> "OccupancyGrid":
        """Window of ``size_xy`` meters square centered on ``center``, spanning ``z_range``."""
        c = np.asarray(center, dtype=float)
        nxy = int(math.ceil(size_xy / resolution))
        z0 = int(math.floor(z_range[0] / resolution))
        nz = int(math.ceil(z_range[1] / resolution)) - z0
        ic = np.floor(c / resolution).astype(np.int64)
        origin = np.array([ic[0] - nxy // 2, ic[1] - nxy // 2, z0])
        return cls(resolution, (nxy, nxy, nz), origin, floor_z, ceiling_z, **kw)

    # ------------------------------------------------------------ addressing

    def world_to_index(self, points) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=float) / self.resolution).astype(np.int64)

    def index_to_world(self, idx) -> np.ndarray:
        """Cell centers."""
        return (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def in_window(self, idx) -> np.ndarray:
        rel = np.asarray(idx) - self.origin_index
        return np.all((rel >= 0) & (rel < self._dims), axis=-1)

    def _slots(self, idx) -> tuple[np.ndarray, ...]:
        s = np.mod(np.asarray(idx, dtype=np.int64), self._dims)
        return s[..., 0], s[..., 1], s[..., 2]

    def virtual(self, idx) -> np.ndarray:
        """True for cells outside the flight band."""
        zc = (np.asarray(idx)[..., 2] + 0.5) * self.resolution
        return (zc < self.floor_z) | (zc > self.ceiling_z)

    def logodds(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        out = np.zeros(idx.shape[:-1])
        ok = self.in_window(idx)
        if np.any(ok):
            out[ok] = self.cells[self._slots(idx[ok])]
        return out

    def occupied(self, idx) -> np.ndarray:
        return (self.logodds(idx) > self.occ_threshold) | self.virtual(idx)

    def occupied_at(self, points) -> np.ndarray:
        return self.occupied(self.world_to_index(points))

    def set_logodds(self, idx, value) -> None:
        """Write log-odds into cells inside the window (others are ignored)."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
        val = np.broadcast_to(np.asarray(value, dtype=float), (len(idx),))
        ok = self.in_window(idx)
        self.cells[self._slots(idx[ok])] = np.clip(val[ok], self.l_min, self.l_max)

    def mark_occupied(self, points) -> None:
        self.set_logodds(self.world_to_index(np.asarray(points).reshape(-1, 3)), self.l_max)

    def occupied_cells(self) -> np.ndarray:
        """World indices of occupied cells in the window (virtual band excluded), sorted."""
        slots = np.argwhere(self.cells > self.occ_threshold)
        if len(slots) == 0:
            return np.zeros((0, 3), dtype=np.int64)
        # Map slots back to world indices: the unique i = origin + ((slot - origin) mod n).
        idx = self.origin_index + np.mod(slots - self.origin_index, self._dims)
        return idx[np.lexsort(idx.T[::-1])]

    # ------------------------------------------------------------ buffer motion

    def recenter(self, position) -> bool:
        """Shift the window so ``position`` lies in its central third.

        Cells that enter the window are reset to unknown; all other cells keep
        their values. Returns True if the window moved.
        """
        ip = self.world_to_index(position)
        axes = (0, 1, 2) if self.wrap_z else (0, 1)
        new = self.origin_index.copy()
        for k in axes:
            n = self._dims[k]
            rel = ip[k] - self.origin_index[k]
            if not (n // 3 <= rel < n - n // 3):
                new[k] = ip[k] - n // 2
        if np.array_equal(new, self.origin_index):
            return False
        self.shift_to(new)
        return True

    def shift_to(self, new_origin) -> None:
        """Move the window anchor to ``new_origin``, resetting wrapped-in cells."""
        new = np.asarray(new_origin, dtype=np.int64).reshape(3)
        for k in range(3):
            n = int(self._dims[k])
            d = int(new[k] - self.origin_index[k])
            if d == 0:
                continue
            if abs(d) >= n:
                self.cells[...] = 0.0
                break
            # World indices entering the window along axis k.
            if d > 0:
                entering = np.arange(self.origin_index[k] + n, new[k] + n)
            else:
                entering = np.arange(new[k], self.origin_index[k])
            sl = [slice(None)] * 3
            sl[k] = np.mod(entering, n)
            self.cells[tuple(sl)] = 0.0
        self.origin_index = new

    # ------------------------------------------------------------ updates

    def update(self, hit_idx, free_idx) -> None:
        """One measurement update: free cells ``-l_miss``, hit cells ``+l_hit``.

        Each distinct cell is updated at most once per call; a cell listed as
        both hit and free counts as hit.
        """
        hit = self._mark(hit_idx)
        free = self._mark(free_idx)
        free &= ~hit
        flat_cells = self.cells.reshape(-1)
        flat_cells[free] = np.maximum(flat_cells[free] - self.l_miss, self.l_min)
        flat_cells[hit] = np.minimum(flat_cells[hit] + self.l_hit, self.l_max)
        self.frames += 1

    def _mark(self, idx) -> np.ndarray:
        """Boolean mask over flattened storage of the in-window cells in ``idx``."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
        mark = np.zeros(self.cells.size, dtype=bool)
        rel = idx - self.origin_index
        ok = np.all((rel >= 0) & (rel < self._dims), axis=1)
        s = np.mod(idx[ok], self._dims)
        mark[(s[:, 0] * self._dims[1] + s[:, 1]) * self._dims[2] + s[:, 2]] = True
        return mark

    def integrate_rays(self, origin, dirs, lengths, hit, hit_points) -> None:
        """Fast per-frame update equivalent to :meth:`update` on marched rays.

        Rays are marched from ``origin`` at one-cell steps up to half a step
        short of ``lengths``; those samples are free, ``hit_points`` of rays
        flagged in ``hit`` are occupied.
        """
        if self._hit_stamp is None:
            self._hit_stamp = np.zeros(self.cells.size, dtype=np.int64)
            self._free_stamp = np.zeros(self.cells.size, dtype=np.int64)
        self.frames += 1
        _integrate_kernel(self.cells.reshape(-1), self._dims, self.origin_index,
                          float(self.resolution), np.asarray(origin, dtype=float),
                          np.ascontiguousarray(dirs, dtype=float), np.asarray(lengths, dtype=float),
                          np.asarray(hit, dtype=np.bool_), np.ascontiguousarray(hit_points, dtype=float),
                          self.l_hit, self.l_miss, self.l_min, self.l_max,
                          self._hit_stamp, self._free_stamp, self.frames)

    # ------------------------------------------------------------ box queries

    def box(self, lo, hi, include_virtual: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """``(occupied, unknown)`` boolean arrays over world indices ``lo <= i < hi``.

        Cells outside the window are unknown; virtual floor/ceiling cells are
        occupied unless ``include_virtual`` is False.
        """
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        shape = tuple(int(v) for v in hi - lo)
        axes = [np.arange(lo[k], hi[k]) for k in range(3)]
        inside = [(a >= self.origin_index[k]) & (a < self.origin_index[k] + self._dims[k])
                  for k, a in enumerate(axes)]
        slots = [np.mod(a, self._dims[k]) for k, a in enumerate(axes)]
        vals = self.cells[np.ix_(*slots)]
        win = inside[0][:, None, None] & inside[1][None, :, None] & inside[2][None, None, :]
        vals = np.where(win, vals, 0.0)
        zc = (axes[2] + 0.5) * self.resolution
        virt = np.broadcast_to(((zc < self.floor_z) | (zc > self.ceiling_z))[None, None, :], shape)
        occ = vals > self.occ_threshold
        if include_virtual:
            occ = occ | virt
        unknown = (vals == 0.0) & ~occ & ~virt
        return occ, unknown

    def distance_field(self, lo, hi, truncate: float) -> "DistanceField":
        """Euclidean distance to the nearest occupied cell center over a box, truncated.

        Only mapped obstacles count; the virtual floor and ceiling are hard
        limits handled separately.
        """
        occ, _ = self.box(lo, hi, include_virtual=False)
        if occ.any():
            d = distance_transform_edt(~occ) * self.resolution
        else:
            d = np.full(occ.shape, np.inf)
        return DistanceField(np.asarray(lo, dtype=np.int64), self.resolution, np.minimum(d, truncate),
                             float(truncate))

    def copy(self) -> "OccupancyGrid":
        g = OccupancyGrid(self.resolution, self.dimensions, self.origin_index.copy(), self.floor_z,
                          self.ceiling_z, self.cells.copy(), self.l_hit, self.l_miss, self.l_min,
                          self.l_max, self.occ_threshold, self.wrap_z, self.frames)
        return g


@njit(cache=True)
def _flat_slot(ix, iy, iz, dims, origin):
    if ix < origin[0] or iy < origin[1] or iz < origin[2]:
        return -1
    if ix >= origin[0] + dims[0] or iy >= origin[1] + dims[1] or iz >= origin[2] + dims[2]:
        return -1
    return ((ix % dims[0]) * dims[1] + (iy % dims[1])) * dims[2] + (iz % dims[2])


@njit(cache=True)
def _integrate_kernel(cells, dims, origin, res, o, dirs, lengths, hit, hit_points,
                      l_hit, l_miss, l_min, l_max, hit_stamp, free_stamp, frame):
    for r in range(dirs.shape[0]):
        if hit[r]:
            f = _flat_slot(int(math.floor(hit_points[r, 0] / res)), int(math.floor(hit_points[r, 1] / res)),
                           int(math.floor(hit_points[r, 2] / res)), dims, origin)
            if f >= 0 and hit_stamp[f] != frame:
                hit_stamp[f] = frame
                cells[f] = min(cells[f] + l_hit, l_max)
    for r in range(dirs.shape[0]):
        limit = lengths[r] - 0.5 * res
        k = 0
        while k * res < limit:
            s = k * res
            f = _flat_slot(int(math.floor((o[0] + s * dirs[r, 0]) / res)),
                           int(math.floor((o[1] + s * dirs[r, 1]) / res)),
                           int(math.floor((o[2] + s * dirs[r, 2]) / res)), dims, origin)
            if f >= 0 and hit_stamp[f] != frame and free_stamp[f] != frame:
                free_stamp[f] = frame
                cells[f] = max(cells[f] - l_miss, l_min)
            k += 1


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Truncated obstacle distance sampled at cell centers of an index box."""

    lo: np.ndarray
    resolution: float
    values: np.ndarray
    truncate: float

    def __call__(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear distance and its gradient at ``points`` (N, 3).

        Outside the box the distance is ``truncate`` with zero gradient.
        """
        p = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        return _trilinear(self.values, self.lo.astype(np.float64), float(self.resolution), p,
                          float(self.truncate))


@njit(cache=True)
def _trilinear(V, lo, res, pts, truncate):
    n = pts.shape[0]
    nx, ny, nz = V.shape
    dist = np.full(n, truncate)
    grad = np.zeros((n, 3))
    for m in range(n):
        ux = pts[m, 0] / res - 0.5 - lo[0]
        uy = pts[m, 1] / res - 0.5 - lo[1]
        uz = pts[m, 2] / res - 0.5 - lo[2]
        if ux < 0 or uy < 0 or uz < 0 or ux > nx - 1 or uy > ny - 1 or uz > nz - 1:
            continue
        i = min(int(math.floor(ux)), nx - 2)
        j = min(int(math.floor(uy)), ny - 2)
        k = min(int(math.floor(uz)), nz - 2)
        fx = ux - i
        fy = uy - j
        fz = uz - k
        c000 = V[i, j, k]
        c001 = V[i, j, k + 1]
        c010 = V[i, j + 1, k]
        c011 = V[i, j + 1, k + 1]
        c100 = V[i + 1, j, k]
        c101 = V[i + 1, j, k + 1]
        c110 = V[i + 1, j + 1, k]
        c111 = V[i + 1, j + 1, k + 1]
        # Interpolate along x, then y, then z.
        c00 = c000 + (c100 - c000) * fx
        c01 = c001 + (c101 - c001) * fx
        c10 = c010 + (c110 - c010) * fx
        c11 = c011 + (c111 - c011) * fx
        c0 = c00 + (c10 - c00) * fy
        c1 = c01 + (c11 - c01) * fy
        dist[m] = c0 + (c1 - c0) * fz
        dx0 = (c100 - c000) + ((c110 - c010) - (c100 - c000)) * fy
        dx1 = (c101 - c001) + ((c111 - c011) - (c101 - c001)) * fy
        grad[m, 0] = (dx0 + (dx1 - dx0) * fz) / res
        grad[m, 1] = ((c10 - c00) + ((c11 - c01) - (c10 - c00)) * fz) / res
        grad[m, 2] = (c1 - c0) / res
    return dist, grad


# ---------------------------------------------------------------- mapping


def mapping_sensor() -> SensorModel:
    """Coarse depth camera used for mapping (the scan sensor's FOV, 2 degree rays, 6 m range)."""
    return SensorModel(angular_step=2.0, range_max=6.0, noise_sigma_at_1m=0.0, rate=5.0, max_incidence=90.0)


def integrate_depth(grid: OccupancyGrid, pose, scene, sensor: SensorModel | None = None,
                    caster: RayCaster | None = None, ground: bool = True) -> OccupancyGrid:
    """Fuse one noise-free depth frame taken at ``pose`` into ``grid`` (in place).

    ``pose`` is ``(position, rotation)`` with rotation a 3x3 matrix or a
    quaternion ``(qx, qy, qz, qw)``, or an object with ``position`` and
    ``orientation``. The grid is recentered on the pose first. Rays are
    marched at one-cell steps; cells before the hit are free, the hit cell is
    occupied. Rays without a return within range clear their full length.
    """
    sensor = sensor or mapping_sensor()
    if caster is None:
        caster = RayCaster(scene if isinstance(scene, ForestScene) else scene.scene)
    position, R = _pose_parts(pose)
    grid.recenter(position)
    dirs = sensor.ray_directions() @ R.T
    dist, _ = caster.cast(position, dirs, sensor.range_max, ground=ground)
    hit = np.isfinite(dist) & (dist >= sensor.range_min)
    blind = np.isfinite(dist) & ~hit  # returns closer than range_min carry no free space either
    length = np.where(hit, dist, sensor.range_max)
    length[blind] = 0.0

    hit_pts = position + np.where(hit, dist, 0.0)[:, None] * dirs
    grid.integrate_rays(position, dirs, length, hit, hit_pts)
    return grid


def _pose_parts(pose) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(pose, "position"):
        p, q = pose.position, pose.orientation
    else:
        p, q = pose
    p = np.asarray(p, dtype=float).reshape(3)
    q = np.asarray(q, dtype=float)
    R = q if q.shape == (3, 3) else Rotation.from_quat(q).as_matrix()
    return p, R


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
