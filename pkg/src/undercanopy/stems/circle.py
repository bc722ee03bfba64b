"""Circle fitting and angular coverage of stem arcs."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from ..errors import DegenerateFitError

MAX_ITER = 50
STEP_TOL = 1e-10  # m
COND_LIMIT = 1e10


class Circle(NamedTuple):
    center: np.ndarray  # (2,)
    radius: float


def fit_circle(points) -> tuple[Circle, float]:
    """Least-squares circle through 2D points.

    An algebraic (Kasa) fit seeds a Gauss-Newton refinement of the orthogonal
    distances ``|p - c| - r``. Iteration stops when the parameter step falls
    below 1e-10 m or after 50 iterations.

    Returns:
        ``(circle, rms)`` with ``rms`` the root-mean-square orthogonal residual.

    Raises:
        DegenerateFitError: fewer than 3 points, or the points are (nearly)
            collinear or coincident.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 3:
        raise DegenerateFitError(f"need at least 3 points for a circle fit, got {n}")
    # Work in centered, scaled coordinates so the conditioning guard is unit-free.
    mu = pts.mean(axis=0)
    q = pts - mu
    scale = math.sqrt(float(np.mean(np.einsum("ij,ij->i", q, q))))
    if not scale > 0:
        raise DegenerateFitError("coincident points")
    q = q / scale

    A = np.column_stack([q, np.ones(n)])
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= sv[0] / COND_LIMIT:
        raise DegenerateFitError("collinear points: circle fit is ill-conditioned")
    b = -(q[:, 0] ** 2 + q[:, 1] ** 2)
    D, E, F = np.linalg.lstsq(A, b, rcond=None)[0]
    c = np.array([-D / 2.0, -E / 2.0])
    r2 = c @ c - F
    if not r2 > 0:
        raise DegenerateFitError("algebraic fit produced no real circle")
    r = math.sqrt(r2)

    step_tol = STEP_TOL / scale
    for _ in range(MAX_ITER):
        diff = q - c
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if np.any(d == 0):
            break
        res = d - r
        J = np.column_stack([-diff / d[:, None], -np.ones(n)])
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        c = c + step[:2]
        r = r + step[2]
        if not np.all(np.isfinite(step)):
            raise DegenerateFitError("circle refinement diverged")
        if np.linalg.norm(step) < step_tol:
            break
    r = abs(r)
    center = mu + scale * c
    radius = scale * r
    resid = np.sqrt(np.einsum("ij,ij->i", pts - center, pts - center)) - radius
    return Circle(center, float(radius)), float(np.sqrt(np.mean(resid**2)))


def orthogonal_residuals(points, circle: Circle) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return np.linalg.norm(pts - circle.center, axis=1) - circle.radius


def radius_standard_error(points, circle: Circle) -> float:
    """Linearized standard error (m) of the fitted radius.

    From the Gauss-Newton normal matrix at the solution scaled by the residual
    variance. Short or sparse arcs give large values; exact data gives 0.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n <= 3:
        return math.inf
    diff = pts - circle.center
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if np.any(d == 0):
        return math.inf
    J = np.column_stack([-diff / d[:, None], -np.ones(n)])
    res = d - circle.radius
    s2 = float(res @ res) / (n - 3)
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        return math.inf
    return math.sqrt(max(s2 * float(cov[2, 2]), 0.0))


def arc_coverage(points, center, max_gap_deg: float = 10.0) -> float:
    """Central angle (degrees) covered by points around ``center``.

    Sorted point bearings are walked around the circle; gaps wider than
    ``max_gap_deg`` count as uncovered, smaller ones as covered. A contiguous
    arc therefore scores its exact span no matter how sparsely it is sampled.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return 0.0
    ang = np.sort(np.degrees(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])) % 360.0)
    gaps = np.diff(np.concatenate([ang, [ang[0] + 360.0]]))
    return float(360.0 - gaps[gaps > max_gap_deg].sum())


def histogram_coverage(points, center, bin_deg: float = 1.0) -> float:
    """Degrees of occupied ``bin_deg`` bearing bins (plain occupancy count)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return 0.0
    ang = np.degrees(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])) % 360.0
    nbins = int(round(360.0 / bin_deg))
    occupied = np.unique(np.floor(ang / bin_deg).astype(int) % nbins)
    return float(len(occupied) * bin_deg)
