"""Stem detection and DBH estimation."""

from .circle import (
    Circle,
    arc_coverage,
    fit_circle,
    histogram_coverage,
    orthogonal_residuals,
    radius_standard_error,
)
from .curve import StemCurve, StemRejected, build_stem_curve, estimate_dbh, remove_outliers
from .pipeline import (
    ClusterArc,
    PipelineParams,
    PipelineResult,
    StemHypothesis,
    StemRecord,
    accept_cluster,
    cluster_segment,
    detect_stems,
    detect_stems_verbose,
    estimate_ground_z,
    find_arcs,
    group_clusters_to_stems,
    refit_in_growth_plane,
    segment_cloud,
)
from .io import load_stems, save_stems

__all__ = [name for name in dir() if not name.startswith("_")]
