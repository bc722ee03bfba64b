"""Stem curves: robust cleaning, smoothing spline, and DBH read-out."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import make_smoothing_spline


class StemRejected(ValueError):
    """All diameter samples of a stem were discarded."""


@dataclass(frozen=True, eq=False)
class StemCurve:
    """Diameter (m) as a function of height above ground (m).

    ``heights``/``diameters`` are the curve sampled on a regular grid over the
    observed span; ``model`` evaluates the fitted curve anywhere in that span.
    """

    heights: np.ndarray
    diameters: np.ndarray
    model: Callable[[np.ndarray], np.ndarray]
    kept: int
    removed: int

    @property
    def span(self) -> tuple[float, float]:
        return float(self.heights[0]), float(self.heights[-1])

    def as_pairs(self) -> list[tuple[float, float]]:
        return [(float(h), float(d)) for h, d in zip(self.heights, self.diameters)]


def remove_outliers(heights, diameters, window: int = 5, k: float = 3.0, mad_floor: float = 1e-3):
    """Keep-mask of samples within ``k`` MADs of the running median.

    Samples are ordered by height; the running median uses a centered window of
    ``window`` samples (shrinking at the ends). The MAD is the median absolute
    deviation from the running median, floored at ``mad_floor`` meters so exact
    data does not reject rounding-level scatter.
    """
    h = np.asarray(heights, dtype=float)
    d = np.asarray(diameters, dtype=float)
    order = np.argsort(h, kind="stable")
    ds = d[order]
    run = _running_median(ds, window)
    dev = np.abs(ds - run)
    mad = max(float(np.median(dev)), mad_floor)
    keep_sorted = dev <= k * mad
    keep = np.empty_like(keep_sorted)
    keep[order] = keep_sorted
    return keep


def _running_median(values: np.ndarray, window: int) -> np.ndarray:
    n = len(values)
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        out[i] = np.median(values[lo:hi])
    return out


def build_stem_curve(
    samples: Sequence[tuple[float, float]],
    *,
    window: int = 5,
    k: float = 3.0,
    mad_floor: float = 1e-3,
    smoothing: float | None = None,
    step: float = 0.1,
    weights: Sequence[float] | None = None,
) -> StemCurve:
    """Clean ``(height, diameter)`` samples and smooth them into a stem curve.

    Cubic smoothing spline of diameter against height; ``smoothing=None``
    selects the weight by generalized cross-validation. Samples sharing a
    height are averaged first. ``weights`` (default 1 each, typically inverse
    variances) weight the samples in both the averaging and the fit. With fewer
    than five distinct heights the spline degenerates to its infinite-smoothing
    limit, a weighted straight line.

    Raises:
        StemRejected: fewer than 2 samples or every sample flagged as an outlier.
    """
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(arr) < 2:
        raise StemRejected(f"need >= 2 diameter samples, got {len(arr)}")
    w = np.ones(len(arr)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != len(arr) or not np.all(np.isfinite(w) & (w > 0)):
        raise ValueError("weights must be finite, positive and one per sample")
    keep = remove_outliers(arr[:, 0], arr[:, 1], window, k, mad_floor)
    kept, wk = arr[keep], w[keep]
    if len(kept) == 0:
        raise StemRejected("all diameter samples removed as outliers")

    hs, inv = np.unique(kept[:, 0], return_inverse=True)
    wsum = np.bincount(inv, weights=wk)
    ds = np.bincount(inv, weights=wk * kept[:, 1]) / wsum
    wsum = wsum / wsum.mean()  # GCV is scale-free in w; keep it near 1 for conditioning
    if len(hs) >= 5:
        model = make_smoothing_spline(hs, ds, w=wsum, lam=smoothing)
    elif len(hs) >= 2:
        coef = np.polyfit(hs, ds, 1, w=np.sqrt(wsum))
        model = np.poly1d(coef)
    else:
        value = float(ds[0])

        def model(x, _v=value):
            return np.full(np.shape(x), _v)

    lo, hi = float(hs[0]), float(hs[-1])
    grid = np.arange(lo, hi, step)
    if len(grid) == 0 or hi - grid[-1] > 1e-9:
        grid = np.append(grid, hi)
    if len(grid) > 1 and grid[-1] - grid[-2] < 1e-9:
        grid = grid[:-1]
    return StemCurve(grid, np.asarray(model(grid), dtype=float), model, int(len(kept)), int((~keep).sum()))


def estimate_dbh(curve: StemCurve, dbh_height: float = 1.3, extrapolation_limit: float = 0.5,
                 slope_window: float = 1.0) -> float | None:
    """DBH in centimeters from the curve at ``dbh_height`` above ground.

    Inside the observed span the fitted curve is evaluated directly. Up to
    ``extrapolation_limit`` outside it, the curve is extended linearly using
    the secant over the last ``slope_window`` meters at the nearest end.
    Farther away, or if the result is not positive, returns None.
    """
    lo, hi = curve.span
    h = curve.heights
    d = curve.diameters
    if lo - 1e-12 <= dbh_height <= hi + 1e-12:
        value = float(curve.model(np.array([dbh_height]))[0])
    elif dbh_height < lo and lo - dbh_height <= extrapolation_limit:
        value = _extrapolate(h, d, dbh_height, from_low=True, window=slope_window)
    elif dbh_height > hi and dbh_height - hi <= extrapolation_limit:
        value = _extrapolate(h, d, dbh_height, from_low=False, window=slope_window)
    else:
        return None
    if not value > 0:
        return None
    return 100.0 * value


def _extrapolate(h, d, x, from_low: bool, window: float) -> float:
    if len(h) == 1:
        return float(d[0])
    if from_low:
        j = int(np.searchsorted(h, h[0] + window, side="right")) - 1
        j = max(j, 1)
        slope = (d[j] - d[0]) / (h[j] - h[0])
        return float(d[0] + slope * (x - h[0]))
    j = int(np.searchsorted(h, h[-1] - window, side="left"))
    j = min(j, len(h) - 2)
    slope = (d[-1] - d[j]) / (h[-1] - h[j])
    return float(d[-1] + slope * (x - h[-1]))
