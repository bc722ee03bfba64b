"""Synthetic forest scenes, depth-camera scan simulation and odometry drift.

Stems are linearly tapered circular frusta growing along a (slightly leaned)
unit axis from a flat ground plane. The radius of a tree is a function of the
height of the axis point above ground::

    r(h) = dbh / 200 + taper * (1.3 - h)      (clamped at 5 mm)

so ``r(1.3) == dbh / 200`` exactly. Cross-sections are perpendicular to the
growth axis; a horizontal slice through a leaned stem is therefore an ellipse.

Ray casting intersects rays with each frustum's bounding cone analytically
(one quadratic per ray/stem pair), which makes noise-free scan points lie on
the surface to rounding precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation, Slerp

from .errors import PlacementError
from .io import PointCloud, ReferenceTree, Trajectory

BREAST_HEIGHT = 1.3
MIN_RADIUS = 0.005
DBH_FLOOR_CM = 5.0


@dataclass(frozen=True)
class Extent:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate extent {self}")

    @classmethod
    def coerce(cls, value) -> "Extent":
        if isinstance(value, Extent):
            return value
        vals = tuple(float(v) for v in value)
        if len(vals) == 2:
            return cls(0.0, 0.0, vals[0], vals[1])
        if len(vals) == 4:
            return cls(*vals)
        raise ValueError(f"extent needs (width, height) or (xmin, ymin, xmax, ymax), got {value!r}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, x, y) -> np.ndarray:
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)


@dataclass(frozen=True)
class TreeModel:
    id: int
    base: tuple[float, float]
    ground_z: float
    dbh: float  # cm
    height: float  # m, height of the top above ground
    taper: float  # radius decrease per meter of height
    lean: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.dbh > 0:
            raise ValueError(f"tree {self.id}: dbh must be positive")
        if not self.height > BREAST_HEIGHT:
            raise ValueError(f"tree {self.id}: height must exceed {BREAST_HEIGHT} m")
        if self.taper < 0:
            raise ValueError(f"tree {self.id}: taper must be non-negative")
        u = np.asarray(self.lean, dtype=float)
        if abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError(f"tree {self.id}: lean must be a unit vector")
        if u[2] < math.cos(math.radians(10.0)) - 1e-12:
            raise ValueError(f"tree {self.id}: lean exceeds 10 degrees from vertical")

    @property
    def axis(self) -> np.ndarray:
        return np.asarray(self.lean, dtype=float)

    @property
    def base_point(self) -> np.ndarray:
        return np.array([self.base[0], self.base[1], self.ground_z])

    def center_at_height(self, h: float) -> np.ndarray:
        """Axis point ``h`` meters above ground."""
        u = self.axis
        return self.base_point + (h / u[2]) * u

    def frustum(self) -> "Frustum":
        u = self.axis
        c0 = self.dbh / 200.0 + self.taper * BREAST_HEIGHT
        c1 = self.taper * u[2]
        length = self.height / u[2]
        if c1 > 0:
            # Above this the linear profile would undercut the clamp radius.
            length = min(length, (c0 - MIN_RADIUS) / c1)
        return Frustum(self.base_point, u, c0, c1, length, owner=self.id)


def surface_radius(tree: TreeModel, h: float) -> float:
    """Stem radius in meters at ``h`` meters above ground."""
    if not 0.0 <= h <= tree.height:
        raise ValueError(f"height {h} outside [0, {tree.height}] for tree {tree.id}")
    r = tree.dbh / 200.0 + tree.taper * (BREAST_HEIGHT - h)
    return max(r, MIN_RADIUS)


@dataclass(frozen=True)
class Frustum:
    """Cone piece ``{a + s*u + rho*n : 0 <= s <= length, rho = c0 - c1*s}``.

    ``detect_range`` limits the range at which a depth sensor registers it
    (thin branches); ``inf`` for stems.
    """

    origin: np.ndarray
    axis: np.ndarray
    c0: float
    c1: float
    length: float
    owner: int = -1
    detect_range: float = math.inf

    def radius_at(self, s):
        return self.c0 - self.c1 * np.asarray(s)


@dataclass(frozen=True)
class Branch:
    """Thin horizontal-ish cylinder sticking out of a stem (late-detection hazard)."""

    tree_id: int
    start: tuple[float, float, float]
    direction: tuple[float, float, float]
    length: float
    radius: float
    detect_range: float = 1.5

    def frustum(self) -> Frustum:
        u = np.asarray(self.direction, dtype=float)
        u = u / np.linalg.norm(u)
        return Frustum(np.asarray(self.start, float), u, self.radius, 0.0, self.length,
                       owner=self.tree_id, detect_range=self.detect_range)


@dataclass(frozen=True, eq=False)
class ForestScene:
    trees: tuple[TreeModel, ...]
    extent: Extent
    terrain: float = 0.0
    branches: tuple[Branch, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "extent", Extent.coerce(self.extent))
        if self.trees:
            xy = np.array([t.base for t in self.trees])
            if not np.all(self.extent.contains(xy[:, 0], xy[:, 1])):
                raise ValueError("tree bases must lie inside the scene extent")

    def frusta(self, include_branches: bool = True) -> list[Frustum]:
        out = [t.frustum() for t in self.trees]
        if include_branches:
            out += [b.frustum() for b in self.branches]
        return out

    def without_trees_near(self, polyline, distance: float) -> "ForestScene":
        """Drop trees whose base lies within ``distance`` of a polyline (and their branches)."""
        pts = np.asarray(polyline, dtype=float)[:, :2]
        keep = []
        for tr in self.trees:
            if _point_polyline_distance(np.asarray(tr.base), pts) >= distance:
                keep.append(tr)
        ids = {t.id for t in keep}
        return replace(self, trees=tuple(keep), branches=tuple(b for b in self.branches if b.tree_id in ids))

    def reference_trees(self) -> list[ReferenceTree]:
        out = []
        for tr in self.trees:
            c = tr.center_at_height(BREAST_HEIGHT)
            out.append(ReferenceTree(tr.id, float(c[0]), float(c[1]), float(tr.dbh)))
        return out


def _point_polyline_distance(p: np.ndarray, pts: np.ndarray) -> float:
    if len(pts) == 1:
        return float(np.linalg.norm(p - pts[0]))
    a = pts[:-1]
    ab = pts[1:] - a
    denom = np.einsum("ij,ij->i", ab, ab)
    s = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    d = np.linalg.norm(a + s[:, None] * ab - p, axis=1)
    return float(d.min())


@dataclass(frozen=True)
class SensorModel:
    hfov: float = 87.0  # degrees
    vfov: float = 58.0
    range_min: float = 0.3
    range_max: float = 8.0
    angular_step: float = 0.35  # degrees between rays; coarser grids starve stems beyond ~4 m
    noise_sigma_at_1m: float = 0.003
    rate: float = 5.0  # Hz
    max_incidence: float = 65.0  # degrees; 2 x 65 + hfov/2 < 180 keeps one-side arcs under a half circle

    def __post_init__(self):
        if not 0 < self.range_min < self.range_max:
            raise ValueError("need 0 < range_min < range_max")
        if not (self.hfov > 0 and self.vfov > 0 and self.angular_step > 0 and self.rate > 0):
            raise ValueError("fov, angular_step and rate must be positive")
        if self.noise_sigma_at_1m < 0:
            raise ValueError("noise_sigma_at_1m must be >= 0")
        if not 0 < self.max_incidence <= 90:
            raise ValueError("max_incidence must lie in (0, 90] degrees")

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the body frame (x forward, y left, z up)."""
        az = _centered_grid(self.hfov, self.angular_step)
        el = _centered_grid(self.vfov, self.angular_step)
        A, E = np.meshgrid(np.radians(az), np.radians(el), indexing="xy")
        A = A.ravel()
        E = E.ravel()
        return np.column_stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)])


def _centered_grid(fov: float, step: float) -> np.ndarray:
    n = int(math.floor(fov / step + 1e-9))
    return (np.arange(n + 1) - n / 2.0) * step


@dataclass(frozen=True)
class DriftModel:
    scale: float = 1.0
    noise_sigma: float = 0.0  # m, white noise per pose
    drift_rate: float = 0.0  # random-walk std per sqrt(meter traveled)
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("drift scale must be positive")
        if self.noise_sigma < 0 or self.drift_rate < 0:
            raise ValueError("noise_sigma and drift_rate must be >= 0")


# ---------------------------------------------------------------- generation


def _tree_height(dbh: float) -> float:
    return BREAST_HEIGHT + 25.0 * (1.0 - math.exp(-0.045 * dbh))


def generate_forest(
    density: float,
    extent=(100.0, 100.0),
    dbh_mean: float = 28.0,
    dbh_sd: float = 8.0,
    seed: int = 0,
    *,
    terrain: float = 0.0,
    min_spacing: float = 0.3,
    max_lean_deg: float = 5.0,
    clearings: Sequence[tuple[float, float, float]] = (),
    max_attempts: int = 2000,
) -> ForestScene:
    """Place trees by dart throwing at ``density`` trees/ha.

    The tree count is Poisson with mean ``density * area / 1e4``. DBH is normal
    truncated below at 5 cm. Bases keep at least ``min_spacing`` apart and never
    let two stems overlap at ground level. ``clearings`` are ``(x, y, radius)``
    discs left empty (takeoff and goal sites); trees falling there are dropped,
    not relocated.

    Raises:
        PlacementError: a tree could not be placed in ``max_attempts`` tries.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    ext = Extent.coerce(extent)
    if ext.area < 100.0:
        raise ValueError("extent area must be at least 100 m^2")
    if dbh_sd < 0 or dbh_mean <= 0:
        raise ValueError("dbh_mean must be positive and dbh_sd non-negative")
    rng = np.random.default_rng(seed)
    n = int(rng.poisson(density * ext.area / 1e4))

    cell = 1.0
    buckets: dict[tuple[int, int], list[int]] = {}
    xs: list[float] = []
    ys: list[float] = []
    radii0: list[float] = []
    trees: list[TreeModel] = []
    for i in range(n):
        dbh = _truncated_normal(rng, dbh_mean, dbh_sd, DBH_FLOOR_CM)
        height = _tree_height(dbh) * rng.uniform(0.9, 1.1)
        taper = 0.7 * (dbh / 200.0) / (height - BREAST_HEIGHT) * rng.uniform(0.8, 1.2)
        r0 = dbh / 200.0 + taper * BREAST_HEIGHT
        tilt = math.radians(rng.uniform(0.0, max_lean_deg))
        azim = rng.uniform(0.0, 2 * math.pi)
        lean = (math.sin(tilt) * math.cos(azim), math.sin(tilt) * math.sin(azim), math.cos(tilt))
        for _ in range(max_attempts):
            x = rng.uniform(ext.xmin, ext.xmax)
            y = rng.uniform(ext.ymin, ext.ymax)
            cx, cy = int(math.floor(x / cell)), int(math.floor(y / cell))
            ok = True
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for j in buckets.get((cx + dx, cy + dy), ()):
                        need = max(min_spacing, r0 + radii0[j] + 0.05)
                        if (xs[j] - x) ** 2 + (ys[j] - y) ** 2 < need * need:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                break
        else:
            raise PlacementError(
                f"could not place tree {i + 1} of {n} after {max_attempts} attempts; "
                f"density {density}/ha is infeasible under the spacing floor"
            )
        buckets.setdefault((cx, cy), []).append(len(xs))
        xs.append(x)
        ys.append(y)
        radii0.append(r0)
        trees.append(TreeModel(i + 1, (x, y), terrain, dbh, height, taper, lean))

    if clearings:
        trees = [
            t for t in trees
            if all((t.base[0] - cx) ** 2 + (t.base[1] - cy) ** 2 >= r * r for cx, cy, r in clearings)
        ]
    return ForestScene(tuple(trees), ext, terrain)


def _truncated_normal(rng: np.random.Generator, mean: float, sd: float, floor: float) -> float:
    if sd == 0:
        return max(mean, floor)
    for _ in range(10000):
        v = rng.normal(mean, sd)
        if v >= floor:
            return float(v)
    return float(floor)


def add_thin_branches(scene: ForestScene, per_tree: float = 1.0, seed: int = 0,
                      zmin: float = 0.8, zmax: float = 2.4) -> ForestScene:
    """Attach thin (radius < 2 cm) dry branches that depth sensing sees late."""
    rng = np.random.default_rng(seed)
    out = []
    for tr in scene.trees:
        for _ in range(int(rng.poisson(per_tree))):
            h = rng.uniform(zmin, zmax)
            az = rng.uniform(0, 2 * math.pi)
            d = np.array([math.cos(az), math.sin(az), rng.uniform(-0.2, 0.1)])
            d /= np.linalg.norm(d)
            start = tr.center_at_height(h)
            out.append(Branch(tr.id, tuple(start.tolist()), tuple(d.tolist()),
                              float(rng.uniform(0.6, 1.5)), float(rng.uniform(0.005, 0.015))))
    return replace(scene, branches=scene.branches + tuple(out))


# ---------------------------------------------------------------- ray casting


class RayCaster:
    """Nearest-hit queries of rays against a scene's frusta (and optionally the ground)."""

    def __init__(self, scene: ForestScene, include_branches: bool = True):
        self.scene = scene
        self.frusta = scene.frusta(include_branches)
        if self.frusta:
            self._a = np.array([f.origin for f in self.frusta])
            self._u = np.array([f.axis for f in self.frusta])
            self._c0 = np.array([f.c0 for f in self.frusta])
            self._c1 = np.array([f.c1 for f in self.frusta])
            self._len = np.array([f.length for f in self.frusta])
            self._det = np.array([f.detect_range for f in self.frusta])
            self._owner = np.array([f.owner for f in self.frusta])
            # Horizontal reach of each frustum from its origin, for candidate culling.
            end = self._a + self._len[:, None] * self._u
            self._mid = 0.5 * (self._a[:, :2] + end[:, :2])
            self._reach = 0.5 * np.linalg.norm(end[:, :2] - self._a[:, :2], axis=1) + self._c0
            self._kd = cKDTree(self._mid)
            self._max_reach = float(self._reach.max())

    def candidates(self, origin: np.ndarray, radius: float) -> np.ndarray:
        if not self.frusta:
            return np.zeros(0, dtype=int)
        idx = np.array(sorted(self._kd.query_ball_point(origin[:2], radius + self._max_reach)), dtype=int)
        if len(idx) == 0:
            return idx
        d = np.linalg.norm(self._mid[idx] - origin[:2], axis=1)
        return idx[d <= radius + self._reach[idx]]

    def cast(self, origin, dirs, max_range: float, ground: bool = False):
        """Return ``(distance, frustum_index)`` of the nearest hit per ray.

        Misses have ``distance = inf`` and index ``-1``; ground hits index ``-2``.
        Frusta containing the ray origin are ignored for that ray.
        """
        origin = np.asarray(origin, dtype=float)
        dirs = np.asarray(dirs, dtype=float)
        nr = len(dirs)
        best = np.full(nr, np.inf)
        which = np.full(nr, -1, dtype=int)
        cand = self.candidates(origin, max_range)
        if len(cand):
            lam = _cone_hits(origin, dirs, self._a[cand], self._u[cand], self._c0[cand],
                             self._c1[cand], self._len[cand])
            lam = np.where(lam <= self._det[cand][None, :], lam, np.inf)
            j = np.argmin(lam, axis=1)
            best = lam[np.arange(nr), j]
            which = np.where(np.isfinite(best), cand[j], -1)
        if ground:
            dz = dirs[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                lg = np.where(dz < 0, (self.scene.terrain - origin[2]) / dz, np.inf)
            lg = np.where(lg > 0, lg, np.inf)
            g = lg < best
            best = np.where(g, lg, best)
            which = np.where(g, -2, which)
        miss = best > max_range
        best[miss] = np.inf
        which[miss] = -1
        return best, which

    def normals(self, points: np.ndarray, index: np.ndarray) -> np.ndarray:
        """Outward unit surface normals at hit ``points`` (index -2 is the ground)."""
        points = np.asarray(points, dtype=float)
        index = np.asarray(index)
        out = np.tile([0.0, 0.0, 1.0], (len(points), 1))
        m = index >= 0
        if np.any(m):
            k = index[m]
            u = self._u[k]
            w = points[m] - self._a[k]
            s = np.einsum("ij,ij->i", w, u)
            radial = w - s[:, None] * u
            radial /= np.linalg.norm(radial, axis=1, keepdims=True)
            n = radial + self._c1[k][:, None] * u
            out[m] = n / np.linalg.norm(n, axis=1, keepdims=True)
        return out

    def owner(self, index: np.ndarray) -> np.ndarray:
        index = np.asarray(index)
        out = np.full(index.shape, -1, dtype=int)
        ok = index >= 0
        out[ok] = self._owner[index[ok]]
        return out


def _cone_hits(o, d, a, u, c0, c1, length):
    """Smallest positive ray parameter per (ray, frustum); ``inf`` without a valid hit."""
    w = o[None, :] - a  # (T, 3)
    s0 = np.einsum("tk,tk->t", w, u)  # (T,)
    s1 = d @ u.T  # (R, T)
    q0 = w - s0[:, None] * u  # (T, 3)
    # q1 = d - s1 u  per (R, T, 3), expanded algebraically to keep memory small.
    dq0 = d @ q0.T  # d . q0  (R, T)
    uq0 = np.einsum("tk,tk->t", u, q0)  # ~0 but kept for exactness
    q1q1 = 1.0 - s1 * s1  # |d - s1 u|^2 for unit d, u
    q0q1 = dq0 - s1 * uq0[None, :]
    e = c0 - c1 * s0  # radius at the origin's axial coordinate
    f = c1[None, :] * s1
    A = q1q1 - f * f
    B = 2.0 * (q0q1 + e[None, :] * f)
    C = np.einsum("tk,tk->t", q0, q0) - e * e
    C = np.broadcast_to(C[None, :], A.shape)
    disc = B * B - 4.0 * A * C
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        qq = -0.5 * (B + np.copysign(sq, B))
        r1 = qq / A
        r2 = C / qq
        lin = np.abs(A) < 1e-14
        r_lin = -C / B
        r1 = np.where(lin, r_lin, r1)
        r2 = np.where(lin, np.nan, r2)
    out = np.full(A.shape, np.inf)
    inside = (C < 0) & (s0 >= 0)[None, :] & (s0 <= length)[None, :] & (e > 0)[None, :]
    for r in (r1, r2):
        s = s0[None, :] + r * s1
        rad = c0[None, :] - c1[None, :] * s
        ok = np.isfinite(r) & (r > 1e-12) & (s >= 0) & (s <= length[None, :]) & (rad > 0) & ~inside
        out = np.where(ok & (r < out), r, out)
    return out


# ---------------------------------------------------------------- scanning


def _rotation_matrices(quats: np.ndarray) -> np.ndarray:
    return Rotation.from_quat(quats).as_matrix()


def sample_poses(traj: Trajectory, rate: float):
    """Positions and rotation matrices interpolated at ``rate`` Hz from the first pose."""
    t0, t1 = float(traj.t[0]), float(traj.t[-1])
    n = int(math.floor((t1 - t0) * rate + 1e-9)) + 1
    ts = t0 + np.arange(n) / rate
    ts = ts[ts <= t1 + 1e-12]
    pos = np.column_stack([np.interp(ts, traj.t, traj.positions[:, k]) for k in range(3)])
    if len(traj) == 1:
        rots = np.repeat(_rotation_matrices(traj.orientations[:1]), len(ts), axis=0)
    else:
        slerp = Slerp(traj.t, Rotation.from_quat(traj.orientations))
        rots = slerp(np.clip(ts, t0, t1)).as_matrix()
    return ts, pos, rots


def simulate_scan(
    scene: ForestScene,
    trajectory: Trajectory,
    sensor: SensorModel = SensorModel(),
    seed: int = 0,
    *,
    ground_returns: bool = False,
    clutter_fraction: float = 0.0,
    include_branches: bool = False,
) -> PointCloud:
    """Simulate stereo-depth returns along ``trajectory``.

    One frame per ``1/sensor.rate`` seconds; each ray's nearest surface hit
    within ``[range_min, range_max]`` yields a point stamped with the frame
    time, perturbed by isotropic Gaussian noise of ``noise_sigma_at_1m * range``.
    Hits whose incidence angle exceeds ``sensor.max_incidence`` return nothing.
    ``clutter_fraction`` adds that fraction (relative to hits) of uniformly
    scattered points in the view frustum per frame.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    rng = np.random.default_rng(seed)
    caster = RayCaster(scene, include_branches=include_branches)
    body_dirs = sensor.ray_directions()
    ts, pos, rots = sample_poses(trajectory, sensor.rate)
    cos_max = math.cos(math.radians(sensor.max_incidence))
    chunks_xyz = []
    chunks_t = []
    for t, p, R in zip(ts, pos, rots):
        dirs = body_dirs @ R.T
        dist, which = caster.cast(p, dirs, sensor.range_max, ground=ground_returns)
        hit = np.isfinite(dist) & (dist >= sensor.range_min)
        if sensor.max_incidence < 90.0 and np.any(hit):
            idx = np.flatnonzero(hit)
            n = caster.normals(p + dirs[idx] * dist[idx, None], which[idx])
            cos_inc = -np.einsum("ij,ij->i", dirs[idx], n)
            hit[idx[cos_inc < cos_max]] = False
        rng_hit = dist[hit]
        pts = p + dirs[hit] * rng_hit[:, None]
        if sensor.noise_sigma_at_1m > 0 and len(pts):
            pts = pts + rng.normal(size=pts.shape) * (sensor.noise_sigma_at_1m * rng_hit)[:, None]
        if clutter_fraction > 0 and len(pts):
            nc = int(round(clutter_fraction * len(pts)))
            if nc:
                k = rng.integers(0, len(body_dirs), nc)
                r = rng.uniform(sensor.range_min, sensor.range_max, nc)
                clutter = p + (body_dirs[k] @ R.T) * r[:, None]
                clutter = clutter[clutter[:, 2] > scene.terrain]
                pts = np.vstack([pts, clutter])
        chunks_xyz.append(pts)
        chunks_t.append(np.full(len(pts), t))
    if not chunks_xyz:
        return PointCloud.empty()
    return PointCloud(np.vstack(chunks_xyz), np.concatenate(chunks_t), temporal=True)


def straight_pass(start, end, speed: float = 1.0, rate: float = 10.0, t0: float = 0.0) -> Trajectory:
    """Constant-speed straight trajectory with the body x axis along the motion."""
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    length = float(np.linalg.norm(end - start))
    duration = length / speed
    n = max(2, int(math.ceil(duration * rate)) + 1)
    s = np.linspace(0.0, 1.0, n)
    pos = start + s[:, None] * (end - start)
    d = end - start
    yaw = math.atan2(d[1], d[0])
    q = Rotation.from_euler("z", yaw).as_quat()
    return Trajectory(t0 + s * duration, pos, np.tile(q, (n, 1)))


def perturb_trajectory(traj: Trajectory, drift: DriftModel) -> Trajectory:
    """Emulate visual-inertial odometry error on a reference trajectory.

    Positions are scaled about the first pose (``scale < 1`` shortens the flown
    distance), then a Gaussian random walk with variance ``drift_rate**2`` per
    meter traveled and white noise ``noise_sigma`` are added. Timestamps and
    orientations are unchanged.
    """
    if len(traj) < 2:
        raise ValueError("perturb_trajectory needs at least two poses")
    rng = np.random.default_rng(drift.seed)
    p = traj.positions
    p0 = p[0]
    out = p0 + drift.scale * (p - p0)
    if drift.drift_rate > 0:
        steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
        inc = rng.normal(size=(len(steps), 3)) * (drift.drift_rate * np.sqrt(steps))[:, None]
        out = out + np.vstack([np.zeros(3), np.cumsum(inc, axis=0)])
    if drift.noise_sigma > 0:
        out = out + rng.normal(scale=drift.noise_sigma, size=out.shape)
    return Trajectory(traj.t.copy(), out, traj.orientations.copy())


# ---------------------------------------------------------------- serialization

SCENE_COLUMNS = ("id", "x", "y", "ground_z", "dbh_cm", "height", "taper", "lean_x", "lean_y", "lean_z")


def save_scene(scene: ForestScene, csv_path) -> Path:
    """Write tree rows to ``csv_path`` and extent/terrain/branches to a ``.json`` sidecar."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(SCENE_COLUMNS) + "\n")
        for t in scene.trees:
            vals = [t.base[0], t.base[1], t.ground_z, t.dbh, t.height, t.taper, *t.lean]
            fh.write(str(t.id) + "," + ",".join(repr(float(v)) for v in vals) + "\n")
    side = csv_path.with_suffix(".json")
    meta = {
        "extent": asdict(scene.extent),
        "terrain": scene.terrain,
        "n_trees": len(scene.trees),
        "branches": [asdict(b) for b in scene.branches],
    }
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="ascii")
    return side


def load_scene(csv_path) -> ForestScene:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text(encoding="ascii"))
    trees = []
    with open(csv_path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != SCENE_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected scene header {header}")
        for line in fh:
            if not line.strip():
                continue
            f = line.strip().split(",")
            v = [float(x) for x in f[1:]]
            trees.append(TreeModel(int(f[0]), (v[0], v[1]), v[2], v[3], v[4], v[5], (v[6], v[7], v[8])))
    branches = tuple(
        Branch(b["tree_id"], tuple(b["start"]), tuple(b["direction"]), b["length"], b["radius"], b["detect_range"])
        for b in meta.get("branches", [])
    )
    return ForestScene(tuple(trees), Extent(**meta["extent"]), float(meta["terrain"]), branches)


def point_to_surface_distance(scene: ForestScene, pts: np.ndarray) -> np.ndarray:
    """Unsigned distance-like residual of each point to the nearest stem surface.

    For each point and tree the point is expressed in axial coordinates; the
    residual is ``|rho - r(s)|`` (exact on the surface, used to audit scans).
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    best = np.full(len(pts), np.inf)
    for f in scene.frusta(include_branches=False):
        w = pts - f.origin
        s = w @ f.axis
        rho = np.linalg.norm(w - s[:, None] * f.axis, axis=1)
        res = np.abs(rho - f.radius_at(s))
        res = np.where((s >= -1e-9) & (s <= f.length + 1e-9), res, np.inf)
        best = np.minimum(best, res)
    return best


def inside_any_frustum(scene: ForestScene, pts: np.ndarray, inflate: float = 0.0) -> np.ndarray:
    """True where a point lies within ``inflate`` of a stem or branch (geometry audit)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    hit = np.zeros(len(pts), dtype=bool)
    for f in scene.frusta(include_branches=True):
        w = pts - f.origin
        s = w @ f.axis
        rho = np.linalg.norm(w - s[:, None] * f.axis, axis=1)
        sc = np.clip(s, 0.0, f.length)
        # Distance to the (near-cylindrical) solid, approximated radially plus axially.
        radial = np.maximum(rho - f.radius_at(sc), 0.0)
        axial = np.abs(s - sc)
        hit |= np.hypot(radial, axial) <= inflate
    return hit
