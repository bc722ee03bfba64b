"""Stem detection and DBH estimation from timed point clouds.

Processing chain:

1. split the cloud into vertical height bins and temporal bins,
2. cluster each segment in the horizontal plane with DBSCAN,
3. fit a circle to each cluster and keep plausible stem arcs,
4. group arc centers into stems with a second DBSCAN and estimate the growth
   axis by PCA,
5. refit every arc in the plane perpendicular to the growth axis,
6. clean the diameters, fit a smoothing spline stem curve and read the DBH at
   breast height.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN

from ..errors import DegenerateFitError, EmptyCloudError
from ..io import PointCloud
from .circle import Circle, arc_coverage, fit_circle, orthogonal_residuals, radius_standard_error
from .curve import StemCurve, StemRejected, build_stem_curve, estimate_dbh

log = logging.getLogger(__name__)

SegmentKey = tuple[int, int]


@dataclass(frozen=True)
class PipelineParams:
    vertical_bin: float = 0.40
    temporal_bin: float = 5.0
    use_temporal: bool = True
    min_cluster_points: int = 35
    inlier_band: float = 0.030
    inlier_fraction: float = 0.80
    radius_min: float = 0.04
    radius_max: float = 0.40
    min_arc: float = 60.0
    arc_gap: float = 10.0
    cluster_eps: float = 0.05
    cluster_min_pts: int = 10
    cluster_cell: float = 0.005  # m; pooling cell for clustering, 0 = raw points
    stem_group_eps: float = 0.20
    dbh_height: float = 1.3
    # stem-curve cleaning and smoothing
    outlier_window: int = 5
    outlier_k: float = 3.0
    mad_floor: float = 1e-3
    se_floor: float = 1e-3  # m; lower bound on a diameter standard error when weighting
    spline_lambda: float | None = None
    curve_step: float = 0.1
    extrapolation_limit: float = 0.5
    # ground height
    ground_radius: float = 2.0
    ground_percentile: float = 5.0
    ground_fallback_percentile: float = 1.0
    max_axis_tilt: float = 45.0

    def __post_init__(self):
        positive = ("vertical_bin", "temporal_bin", "inlier_band", "radius_min", "radius_max",
                    "cluster_eps", "stem_group_eps", "dbh_height", "curve_step", "se_floor")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.inlier_fraction <= 1:
            raise ValueError("inlier_fraction must lie in (0, 1]")
        if not self.radius_min < self.radius_max:
            raise ValueError("radius_min must be below radius_max")
        if self.min_cluster_points < 0 or self.cluster_min_pts < 1 or self.min_arc < 0:
            raise ValueError("count and arc thresholds must be non-negative")
        if not 0 <= self.cluster_cell < self.cluster_eps / 2:
            raise ValueError("cluster_cell must lie in [0, cluster_eps / 2)")

    @classmethod
    def tls(cls, **overrides) -> "PipelineParams":
        """Static-scanner settings: 20 cm height bins, no temporal split."""
        return cls(**{"vertical_bin": 0.20, "use_temporal": False, **overrides})


@dataclass(frozen=True, eq=False)
class ClusterArc:
    key: SegmentKey
    indices: np.ndarray  # into the full cloud
    circle: Circle
    n_points: int
    inlier_fraction_observed: float
    arc_coverage: float
    mean_height: float  # mean z of the member points (absolute)
    rms: float = 0.0
    rejected_by: tuple[str, ...] = ()

    @property
    def accepted(self) -> bool:
        return not self.rejected_by


@dataclass(frozen=True, eq=False)
class StemHypothesis:
    arcs: tuple[ClusterArc, ...]
    growth_axis: np.ndarray
    axis_point: np.ndarray


@dataclass(frozen=True, eq=False)
class StemRecord:
    stem_id: int
    x: float  # stem center at breast height
    y: float
    ground_z: float
    stem_curve: tuple[tuple[float, float], ...]  # (height above ground m, diameter m)
    dbh: float | None  # cm; None when breast height is outside the observed span
    n_arcs: int = 0
    growth_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)


@dataclass
class PipelineResult:
    stems: list[StemRecord]
    arcs: list[ClusterArc] = field(default_factory=list)
    hypotheses: list[StemHypothesis] = field(default_factory=list)
    dropped_refits: int = 0
    rejected_stems: int = 0


# ---------------------------------------------------------------- segmentation


def segment_cloud(cloud: PointCloud, params: PipelineParams = PipelineParams()) -> dict[SegmentKey, np.ndarray]:
    """Partition point indices by ``(vertical bin, temporal bin)``.

    Atemporal clouds, or ``use_temporal=False``, put every point in temporal bin 0.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot segment an empty cloud")
    z = cloud.xyz[:, 2]
    vi = np.floor((z - z.min()) / params.vertical_bin).astype(np.int64)
    if cloud.temporal and params.use_temporal:
        ti = np.floor((cloud.t - cloud.t.min()) / params.temporal_bin).astype(np.int64)
    else:
        ti = np.zeros(len(cloud), dtype=np.int64)
    keys = np.column_stack([vi, ti])
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    return {
        (int(uniq[k, 0]), int(uniq[k, 1])): order[bounds[k]:bounds[k + 1]]
        for k in range(len(uniq))
    }


def cluster_segment(xy, params: PipelineParams = PipelineParams()) -> list[np.ndarray]:
    """DBSCAN in the horizontal plane; returns index arrays into ``xy``.

    Points are first pooled into square cells of ``cluster_cell`` meters (a
    small fraction of ``cluster_eps``). DBSCAN runs on the cell means weighted
    by point counts, and every point takes its cell's label. This caps the
    neighborhood size for the dense, frame-on-frame repeated hits of close
    stems; ``cluster_cell = 0`` clusters raw points.

    Border cells go to the cluster of their nearest core cell, which makes the
    partition independent of the input order. Noise is dropped. Clusters are
    returned sorted by their smallest member index.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(xy) < params.cluster_min_pts:
        return []
    if params.cluster_cell > 0:
        keys = np.floor(xy / params.cluster_cell).astype(np.int64)
        _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        pts = np.column_stack([np.bincount(inv, weights=xy[:, k]) for k in range(2)]) / counts[:, None]
    else:
        inv = np.arange(len(xy))
        pts, counts = xy, np.ones(len(xy))
    db = DBSCAN(eps=params.cluster_eps, min_samples=params.cluster_min_pts).fit(pts, sample_weight=counts)
    labels = db.labels_.copy()
    core = np.asarray(db.core_sample_indices_, dtype=int)
    if len(core) == 0:
        return []
    border = np.flatnonzero((labels >= 0) & ~np.isin(np.arange(len(pts)), core))
    if len(border):
        _, nn = cKDTree(pts[core]).query(pts[border], k=1)
        labels[border] = labels[core[nn]]
    point_labels = labels[inv]
    clusters = [np.flatnonzero(point_labels == lab) for lab in np.unique(labels[labels >= 0])]
    clusters.sort(key=lambda idx: int(idx[0]))
    return clusters


# ---------------------------------------------------------------- acceptance


def accept_cluster(xyz, circle: Circle, params: PipelineParams = PipelineParams(), *,
                   key: SegmentKey = (0, 0), indices=None, rms: float = 0.0) -> tuple[bool, ClusterArc]:
    """Apply the stem-arc rules to one fitted cluster.

    A cluster passes when it has more than ``min_cluster_points`` points, at
    least ``inlier_fraction`` of them lie within ``inlier_band`` of the circle,
    the radius is inside ``[radius_min, radius_max]`` and the inlier bearings
    cover at least ``min_arc`` degrees.
    """
    xyz = np.asarray(xyz, dtype=float)
    xy = xyz[:, :2]
    n = len(xyz)
    resid = np.abs(orthogonal_residuals(xy, circle))
    inliers = resid <= params.inlier_band
    frac = float(inliers.mean()) if n else 0.0
    coverage = arc_coverage(xy[inliers], circle.center, params.arc_gap)
    failed = []
    if not n > params.min_cluster_points:
        failed.append("count")
    if not frac >= params.inlier_fraction:
        failed.append("inliers")
    if not params.radius_min <= circle.radius <= params.radius_max:
        failed.append("radius")
    if not coverage >= params.min_arc:
        failed.append("arc")
    arc = ClusterArc(
        key=key,
        indices=np.arange(n) if indices is None else np.asarray(indices),
        circle=circle,
        n_points=n,
        inlier_fraction_observed=frac,
        arc_coverage=coverage,
        mean_height=float(xyz[:, 2].mean()) if n else math.nan,
        rms=rms,
        rejected_by=tuple(failed),
    )
    return not failed, arc


def _process_segment(cloud_xyz: np.ndarray, key: SegmentKey, idx: np.ndarray,
                     params: PipelineParams) -> list[ClusterArc]:
    pts = cloud_xyz[idx]
    arcs = []
    for members in cluster_segment(pts[:, :2], params):
        sub = pts[members]
        try:
            circle, rms = fit_circle(sub[:, :2])
        except DegenerateFitError:
            continue
        _, arc = accept_cluster(sub, circle, params, key=key, indices=idx[members], rms=rms)
        arcs.append(arc)
    return arcs


def find_arcs(cloud: PointCloud, params: PipelineParams = PipelineParams(), n_jobs: int = 1) -> list[ClusterArc]:
    """Every fitted cluster (accepted or not), in segment-key order."""
    segments = segment_cloud(cloud, params)
    keys = sorted(segments)
    xyz = cloud.xyz
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            per = list(ex.map(lambda k: _process_segment(xyz, k, segments[k], params), keys))
    else:
        per = [_process_segment(xyz, k, segments[k], params) for k in keys]
    return [a for arcs in per for a in arcs]


# ---------------------------------------------------------------- stems


def _growth_axis(points: np.ndarray, max_tilt_deg: float) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axis = vecs[:, -1]
    if axis[2] < 0:
        axis = -axis
    if axis[2] < math.cos(math.radians(max_tilt_deg)):
        return np.array([0.0, 0.0, 1.0])
    return axis / np.linalg.norm(axis)


def group_clusters_to_stems(arcs: Sequence[ClusterArc], cloud_xyz: np.ndarray,
                            params: PipelineParams = PipelineParams()) -> list[StemHypothesis]:
    """Group accepted arcs whose centers chain within ``stem_group_eps``.

    Groups with fewer than two arcs are discarded. The growth axis is the
    principal direction of the member points, pointing up; a direction more
    than ``max_axis_tilt`` from vertical falls back to vertical.
    """
    arcs = [a for a in arcs if a.accepted]
    if len(arcs) < 2:
        return []
    centers = np.array([a.circle.center for a in arcs])
    labels = DBSCAN(eps=params.stem_group_eps, min_samples=1).fit(centers).labels_
    out = []
    for lab in np.unique(labels):
        members = [a for a, l in zip(arcs, labels) if l == lab]
        if len(members) < 2:
            continue
        idx = np.concatenate([a.indices for a in members])
        pts = cloud_xyz[idx]
        axis = _growth_axis(pts, params.max_axis_tilt)
        heights = np.array([a.mean_height for a in members])
        cpts = np.column_stack([centers[labels == lab], heights])
        out.append(StemHypothesis(tuple(members), axis, cpts.mean(axis=0)))
    out.sort(key=lambda s: (float(s.axis_point[0]), float(s.axis_point[1])))
    return out


def _plane_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


@dataclass(frozen=True)
class Refit:
    height: float  # above ground
    diameter: float
    center: np.ndarray  # 3D axis point of this cross-section
    diameter_se: float = 0.0  # linearized standard error of ``diameter``


def refit_in_growth_plane(stem: StemHypothesis, cloud_xyz: np.ndarray, ground_z: float,
                          params: PipelineParams = PipelineParams()) -> tuple[list[Refit], int]:
    """Refit each arc in the plane perpendicular to the growth axis.

    Returns the refits (sorted by height) and the count of arcs dropped for a
    degenerate projected fit.
    """
    u = stem.growth_axis
    e1, e2 = _plane_basis(u)
    vertical = abs(u[0]) < 1e-15 and abs(u[1]) < 1e-15
    out = []
    dropped = 0
    for arc in stem.arcs:
        pts = cloud_xyz[arc.indices]
        if vertical:
            uv = pts[:, :2]
        else:
            uv = np.column_stack([pts @ e1, pts @ e2])
        try:
            circle, _ = fit_circle(uv)
        except DegenerateFitError:
            dropped += 1
            continue
        if vertical:
            center = np.array([circle.center[0], circle.center[1], pts[:, 2].mean()])
        else:
            center = circle.center[0] * e1 + circle.center[1] * e2 + float((pts @ u).mean()) * u
        out.append(Refit(float(pts[:, 2].mean() - ground_z), 2.0 * circle.radius, center,
                         2.0 * radius_standard_error(uv, circle)))
    if dropped:
        log.warning("dropped %d degenerate growth-plane refits", dropped)
    out.sort(key=lambda r: r.height)
    return out, dropped


def estimate_ground_z(cloud_xyz: np.ndarray, base_xy, params: PipelineParams = PipelineParams()) -> float:
    """Low percentile of z among points within ``ground_radius`` of ``base_xy``.

    Falls back to a lower percentile of the whole cloud when nothing is near.
    """
    xyz = np.asarray(cloud_xyz, dtype=float)
    if len(xyz) == 0:
        raise EmptyCloudError("no points to estimate ground height from")
    d2 = ((xyz[:, :2] - np.asarray(base_xy, dtype=float)) ** 2).sum(axis=1)
    near = xyz[d2 <= params.ground_radius**2, 2]
    if len(near) == 0:
        return float(np.percentile(xyz[:, 2], params.ground_fallback_percentile))
    return float(np.percentile(near, params.ground_percentile))


def _stem_from_hypothesis(stem: StemHypothesis, cloud_xyz: np.ndarray, params: PipelineParams):
    ground = estimate_ground_z(cloud_xyz, stem.axis_point[:2], params)
    refits, dropped = refit_in_growth_plane(stem, cloud_xyz, ground, params)
    if len(refits) < 2:
        return None, dropped
    curve = build_stem_curve(
        [(r.height, r.diameter) for r in refits],
        window=params.outlier_window,
        k=params.outlier_k,
        mad_floor=params.mad_floor,
        smoothing=params.spline_lambda,
        step=params.curve_step,
        # inverse-variance weights: short, sparse or noisy arcs count less
        weights=[1.0 / min(max(r.diameter_se, params.se_floor), 1.0) ** 2 for r in refits],
    )
    dbh = estimate_dbh(curve, params.dbh_height, params.extrapolation_limit)
    u = stem.growth_axis
    centers = np.array([r.center for r in refits])
    c = centers.mean(axis=0)
    zb = ground + params.dbh_height
    at_bh = c + ((zb - c[2]) / u[2]) * u
    rec = StemRecord(0, float(at_bh[0]), float(at_bh[1]), ground, tuple(curve.as_pairs()), dbh,
                     len(stem.arcs), tuple(float(v) for v in u))
    return rec, dropped


def detect_stems_verbose(cloud: PointCloud, params: PipelineParams = PipelineParams(),
                         n_jobs: int = 1) -> PipelineResult:
    if len(cloud) == 0:
        raise EmptyCloudError("cannot detect stems in an empty cloud")
    arcs = find_arcs(cloud, params, n_jobs)
    hyps = group_clusters_to_stems(arcs, cloud.xyz, params)
    stems = []
    dropped = rejected = 0
    for h in hyps:
        try:
            rec, d = _stem_from_hypothesis(h, cloud.xyz, params)
        except StemRejected:
            rejected += 1
            continue
        dropped += d
        if rec is None:
            rejected += 1
            continue
        stems.append(rec)
    stems.sort(key=lambda s: (s.x, s.y))
    stems = [replace(s, stem_id=i + 1) for i, s in enumerate(stems)]
    return PipelineResult(stems, arcs, hyps, dropped, rejected)


def detect_stems(cloud: PointCloud, params: PipelineParams = PipelineParams(), n_jobs: int = 1) -> list[StemRecord]:
    """Detect stems and estimate their stem curves and DBH.

    Output is sorted by stem x then y and is a pure function of the inputs;
    ``n_jobs > 1`` processes segments in threads with identical results.
    Degenerate stems are dropped rather than raising.
    """
    return detect_stems_verbose(cloud, params, n_jobs).stems
