"""Accuracy assessment: trajectory ATE, DBH error statistics and completeness."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import LineString, Point, Polygon
from shapely.prepared import prep

from .errors import DegenerateFitError
from .io import ReferenceTree, Trajectory


class DegenerateAlignmentError(DegenerateFitError):
    pass


@dataclass(frozen=True, eq=False)
class Alignment:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("alignment rotation must have determinant +1")
        if not self.scale > 0:
            raise ValueError("alignment scale must be positive")

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * p @ np.asarray(self.rotation).T + self.translation

    @classmethod
    def identity(cls) -> "Alignment":
        return cls(np.eye(3), np.zeros(3), 1.0)


@dataclass(frozen=True, eq=False)
class AteResult:
    ate_pos: float
    per_state_errors: np.ndarray
    alignment: Alignment
    n_states: int
    with_scale: bool = False


# ---------------------------------------------------------------- trajectories


def associate_states(estimate: Trajectory, reference: Trajectory, max_dt: float = 0.5):
    """Pair estimate positions with reference positions interpolated at the same times.

    An estimate state is kept when it lies inside the reference time span and
    the nearer of its two bracketing reference samples is within ``max_dt``.

    Returns:
        ``(est_positions, ref_positions, times)``.

    Raises:
        ValueError: fewer than two poses, or no estimate state can be paired.
    """
    if len(estimate) < 2 or len(reference) < 2:
        raise ValueError("association needs at least two poses in each trajectory")
    t = estimate.t
    rt = reference.t
    inside = (t >= rt[0]) & (t <= rt[-1])
    j = np.clip(np.searchsorted(rt, t), 1, len(rt) - 1)
    gap = np.minimum(np.abs(t - rt[j - 1]), np.abs(rt[j] - t))
    keep = inside & (gap <= max_dt)
    if not np.any(keep):
        raise ValueError("estimate and reference trajectories share no time span")
    tk = t[keep]
    ref = np.column_stack([np.interp(tk, rt, reference.positions[:, k]) for k in range(3)])
    return estimate.positions[keep], ref, tk


def umeyama_align(est_positions, ref_positions, with_scale: bool = False,
                  allow_collinear: bool = False) -> Alignment:
    """Closed-form least-squares transform mapping estimates onto the reference.

    Minimizes ``sum |ref_i - (s R est_i + t)|^2`` over rotations ``R``,
    translations ``t`` and, when ``with_scale``, scales ``s``.

    Collinear inputs leave the rotation about the line undetermined; they
    raise unless ``allow_collinear`` is set, in which case a minimizing
    rotation is still returned (the residuals do not depend on the choice).

    Raises:
        DegenerateAlignmentError: coincident sets, or collinear ones without
            ``allow_collinear``.
    """
    X = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    Y = np.asarray(ref_positions, dtype=float).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError("paired position arrays differ in shape")
    n = len(X)
    if n < 2:
        raise DegenerateAlignmentError("need at least two paired positions")
    mx = X.mean(axis=0)
    my = Y.mean(axis=0)
    Xc = X - mx
    Yc = Y - my
    var_x = float((Xc**2).sum() / n)
    if var_x <= 0:
        raise DegenerateAlignmentError("estimate positions are coincident")
    sv_x = np.linalg.svd(Xc, compute_uv=False)
    collinear = n < 3 or sv_x[1] <= 1e-9 * sv_x[0]
    if collinear and not allow_collinear:
        raise DegenerateAlignmentError("positions are collinear; rotation is not unique")

    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    if not s > 0:
        raise DegenerateAlignmentError("non-positive similarity scale")
    t = my - s * R @ mx
    return Alignment(R, t, s)


def ate_pos(estimate: Trajectory, reference: Trajectory, with_scale: bool = False,
            max_dt: float = 0.5) -> AteResult:
    """Position ATE: RMS of aligned-estimate minus reference positions.

    Orientation error is not evaluated. Alignment is rigid by default;
    ``with_scale=True`` uses a similarity transform.
    """
    est, ref, _ = associate_states(estimate, reference, max_dt)
    al = umeyama_align(est, ref, with_scale=with_scale, allow_collinear=True)
    err = np.linalg.norm(al.apply(est) - ref, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), err, al, len(err), with_scale)


# ---------------------------------------------------------------- tree matching


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_detected: tuple[int, ...]
    unmatched_reference: tuple[int, ...]
    completeness_pct: float
    n_reference_in_bounds: int = 0
    excluded_reference: tuple[int, ...] = ()


def completeness(found: int, total: int) -> float:
    """Percentage of reference trees found."""
    if total <= 0:
        return math.nan
    return found / total * 100.0


def corridor_polygon(path_xy, half_width: float) -> Polygon:
    """Region within ``half_width`` of a polyline (the scanned area boundary)."""
    pts = np.asarray(path_xy, dtype=float)[:, :2]
    if len(pts) == 1:
        return Point(pts[0]).buffer(half_width)
    return LineString(pts).buffer(half_width)


def match_trees(stems: Sequence, refs: Sequence[ReferenceTree], boundary: Polygon | None = None,
                max_dist: float = 0.5) -> MatchResult:
    """Greedy one-to-one nearest matching of detected stems to reference trees.

    Candidate pairs within ``max_dist`` (horizontal) are taken in order of
    increasing distance, ties broken by ids. Reference trees outside
    ``boundary`` take no part and do not count toward completeness.
    ``stems`` may be StemRecords or anything with ``stem_id``, ``x``, ``y``.
    """
    if boundary is not None:
        pb = prep(boundary)
        inside = [r for r in refs if pb.covers(Point(r.x, r.y))]
    else:
        inside = list(refs)
    inside_ids = {r.id for r in inside}
    excluded = tuple(sorted(r.id for r in refs if r.id not in inside_ids))
    cand = []
    for s in stems:
        for r in inside:
            d = math.hypot(s.x - r.x, s.y - r.y)
            if d <= max_dist:
                cand.append((d, s.stem_id, r.id))
    cand.sort()
    used_s: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for d, sid, rid in cand:
        if sid in used_s or rid in used_r:
            continue
        used_s.add(sid)
        used_r.add(rid)
        pairs.append((sid, rid, d))
    pairs.sort(key=lambda p: (p[1], p[0]))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_detected=tuple(sorted(s.stem_id for s in stems if s.stem_id not in used_s)),
        unmatched_reference=tuple(sorted(r.id for r in inside if r.id not in used_r)),
        completeness_pct=completeness(len(pairs), len(inside)),
        n_reference_in_bounds=len(inside),
        excluded_reference=excluded,
    )


# ---------------------------------------------------------------- DBH metrics


@dataclass(frozen=True)
class DbhMetrics:
    n: int
    rmse_cm: float
    rmse_pct: float
    bias_cm: float
    bias_pct: float
    sd_cm: float  # as printed in the reporting protocol: spread of estimates about the reference mean
    sd_error_cm: float = math.nan  # conventional population SD of the signed errors

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "rmse_cm": self.rmse_cm,
            "rmse_pct": self.rmse_pct,
            "bias_cm": self.bias_cm,
            "bias_pct": self.bias_pct,
            "sd_cm": self.sd_cm,
            "sd_error_cm": self.sd_error_cm,
        }


def dbh_metrics(pairs: Iterable[tuple[float, float]]) -> DbhMetrics:
    """Error statistics of ``(estimated, reference)`` DBH pairs in centimeters.

    ``sd_cm`` follows the reporting formula literally,
    ``sqrt(mean((est - mean(ref))**2))``; ``sd_error_cm`` is the usual SD of
    the signed errors about the bias.
    """
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("dbh_metrics needs at least one pair")
    est, ref = arr[:, 0], arr[:, 1]
    err = est - ref
    ref_mean = float(ref.mean())
    rmse = float(np.sqrt(np.mean(err**2)))
    bias = float(np.mean(err))
    return DbhMetrics(
        n=len(arr),
        rmse_cm=rmse,
        rmse_pct=rmse / ref_mean * 100.0,
        bias_cm=bias,
        bias_pct=bias / ref_mean * 100.0,
        sd_cm=float(np.sqrt(np.mean((est - ref_mean) ** 2))),
        sd_error_cm=float(np.sqrt(np.mean((err - bias) ** 2))),
    )


STRATA = ("all", "lt30", "ge30")
STRATUM_LABELS = {"all": "All", "lt30": "DBH < 30 cm", "ge30": "DBH > 30 cm"}


def stratified_metrics(pairs: Iterable[tuple[float, float]], threshold: float = 30.0) -> dict[str, DbhMetrics]:
    """Metrics for all pairs and split on reference DBH at ``threshold`` cm.

    Keys are ``all``, ``lt30`` (reference below threshold) and ``ge30``; empty
    strata are absent. A reference exactly at the threshold goes to ``ge30``.
    """
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    out: dict[str, DbhMetrics] = {}
    if len(arr) == 0:
        return out
    out["all"] = dbh_metrics(arr)
    lo = arr[arr[:, 1] < threshold]
    hi = arr[arr[:, 1] >= threshold]
    if len(lo):
        out["lt30"] = dbh_metrics(lo)
    if len(hi):
        out["ge30"] = dbh_metrics(hi)
    return out


def matched_dbh_pairs(stems: Sequence, refs: Sequence[ReferenceTree], match: MatchResult) -> list[tuple[float, float]]:
    """``(estimated, reference)`` DBH pairs for matched stems that carry a DBH."""
    by_s = {s.stem_id: s for s in stems}
    by_r = {r.id: r for r in refs}
    out = []
    for sid, rid, _ in match.pairs:
        dbh = by_s[sid].dbh
        if dbh is not None:
            out.append((float(dbh), float(by_r[rid].dbh)))
    return out
