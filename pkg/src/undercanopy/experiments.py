"""Library-level experiment runs that the command-line tool wraps.

Each function takes parsed objects and an ExperimentConfig and returns plain
results; file handling stays in the CLI.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, replace
from typing import Sequence

from .config import ExperimentConfig
from .evaluation import (
    STRATA,
    MatchResult,
    ate_pos,
    corridor_polygon,
    match_trees,
    matched_dbh_pairs,
    stratified_metrics,
)
from .forest import Extent, ForestScene, generate_forest, perturb_trajectory, simulate_scan
from .io import PointCloud, ReferenceTree, Trajectory
from .planner.mission import MissionLog, run_mission
from .stems.pipeline import StemRecord, detect_stems


def forest_extent(cfg: ExperimentConfig) -> Extent:
    w, d = cfg.forest.extent
    return Extent(0.0, 0.0, float(w), float(d))


def generate(cfg: ExperimentConfig) -> ForestScene:
    if cfg.forest.density is None:
        raise ValueError("forest density is required")
    return generate_forest(cfg.forest.density, forest_extent(cfg), cfg.forest.dbh_mean, cfg.forest.dbh_sd,
                           cfg.run.seed)


def scan(scene: ForestScene, trajectory: Trajectory, cfg: ExperimentConfig) -> PointCloud:
    return simulate_scan(scene, trajectory, cfg.sensor, cfg.run.seed,
                         ground_returns=cfg.scan.ground_returns,
                         clutter_fraction=cfg.scan.clutter_fraction,
                         include_branches=cfg.scan.include_branches)


def detect(cloud: PointCloud, cfg: ExperimentConfig) -> list[StemRecord]:
    return detect_stems(cloud, cfg.effective_pipeline())


# ---------------------------------------------------------------- reports


def rounded_completeness(value: float) -> float | None:
    """Completeness as reported: percent with two decimals (None when undefined)."""
    return None if not math.isfinite(value) else round(value, 2)


def dbh_report(pairs: Sequence[tuple[float, float]]) -> dict:
    strata = stratified_metrics(pairs)
    return {k: strata[k].as_dict() for k in STRATA if k in strata}


def match_report(match: MatchResult) -> dict:
    return {
        "completeness_pct": rounded_completeness(match.completeness_pct),
        "n_matched": len(match.pairs),
        "n_reference_in_bounds": match.n_reference_in_bounds,
        "n_reference_excluded": len(match.excluded_reference),
        "unmatched_detected": list(match.unmatched_detected),
        "unmatched_reference": list(match.unmatched_reference),
    }


def ate_report(estimate: Trajectory, reference: Trajectory, max_dt: float = 0.5) -> dict:
    rigid = ate_pos(estimate, reference, with_scale=False, max_dt=max_dt)
    sim = ate_pos(estimate, reference, with_scale=True, max_dt=max_dt)
    return {
        "ate_pos": rigid.ate_pos,
        "ate_pos_similarity": sim.ate_pos,
        "similarity_scale": sim.alignment.scale,
        "n_states": rigid.n_states,
        "alignment": "rigid",
    }


@dataclass
class Evaluation:
    report: dict
    pairs: list[tuple[float, float]]
    match: MatchResult | None = None


def evaluate(*, stems: Sequence[StemRecord] | None = None, refs: Sequence[ReferenceTree] | None = None,
             boundary=None, pairs: Sequence[tuple[float, float]] | None = None,
             estimate: Trajectory | None = None, reference: Trajectory | None = None,
             cfg: ExperimentConfig = ExperimentConfig()) -> Evaluation:
    """Any combination of tree matching, DBH metrics and ATE, as one report."""
    report: dict = {}
    match = None
    if stems is not None and refs is not None:
        match = match_trees(stems, refs, boundary, cfg.evaluation.match_distance)
        report["matching"] = match_report(match)
        report["n_detected"] = len(stems)
        report["n_detected_with_dbh"] = sum(s.dbh is not None for s in stems)
        matched = matched_dbh_pairs(stems, refs, match)
        pairs = list(pairs or []) + matched
    pairs = [tuple(map(float, p)) for p in (pairs or [])]
    if pairs:
        report["dbh"] = dbh_report(pairs)
    if estimate is not None and reference is not None:
        report["ate"] = ate_report(estimate, reference, cfg.evaluation.max_dt)
    return Evaluation(report, pairs, match)


# ---------------------------------------------------------------- missions


def mission(scene: ForestScene, cfg: ExperimentConfig, seed: int) -> MissionLog:
    sc = cfg.scenario
    return run_mission(scene, sc.start, sc.goal, cfg.planner, seed=seed, mission=cfg.effective_mission())


def mission_batch(cfg: ExperimentConfig, seeds: Sequence[int]) -> tuple[list[MissionLog], dict]:
    """Run one mission per seed on the scenario and tabulate success and smoothness."""
    logs = [mission(cfg.scenario.scene(s), cfg, s) for s in seeds]
    return logs, batch_summary(cfg.scenario.name, cfg.scenario.density, logs)


def batch_summary(name: str, density: float, logs: Sequence[MissionLog]) -> dict:
    n = len(logs)
    succ = sum(bool(g.summary["success"]) for g in logs)
    smooth = sum(bool(g.summary["smooth"]) for g in logs)
    stops = [int(g.summary["emergency_stop_count"]) for g in logs]
    return {
        "scenario": name,
        "density": density,
        "runs": n,
        "success": succ,
        "smooth": smooth,
        "success_fraction": succ / n if n else None,
        "smooth_fraction": smooth / n if n else None,
        "median_emergency_stops": statistics.median(stops) if stops else None,
        "seeds": [g.summary["seed"] for g in logs],
    }


# ---------------------------------------------------------------- end to end


@dataclass
class PipelineRun:
    report: dict
    scene: ForestScene
    log: MissionLog
    cloud: PointCloud
    estimate: Trajectory
    stems: list[StemRecord]
    evaluation: Evaluation
    boundary: object


def pipeline(cfg: ExperimentConfig) -> PipelineRun:
    """Generate, fly, scan the flown path, perturb it, detect stems and evaluate.

    The scan uses the true flown poses (a georeferenced cloud); the perturbed
    trajectory stands in for the odometry estimate and only enters the ATE.
    """
    seed = cfg.run.seed
    scene = cfg.scenario.scene(seed)
    log = mission(scene, cfg, seed)
    flown = log.flown
    cloud = scan(scene, flown, cfg)
    estimate = perturb_trajectory(flown, replace(cfg.drift, seed=seed))
    pp = cfg.effective_pipeline()
    stems = detect_stems(cloud, pp) if len(cloud) else []
    boundary = corridor_polygon(flown.positions, cfg.evaluation.corridor)
    ev = evaluate(stems=stems, refs=scene.reference_trees(), boundary=boundary,
                  estimate=estimate, reference=flown, cfg=cfg)
    report = {
        "seed": seed,
        "scenario": cfg.scenario.name,
        "n_trees_scene": len(scene.trees),
        "n_points": len(cloud),
        "mission": {k: log.summary[k] for k in sorted(log.summary)},
        "segmentation": {
            "tls_mode": cfg.run.tls_mode,
            "vertical_bin_m": pp.vertical_bin,
            "temporal_segmentation": pp.use_temporal,
            "temporal_bin_s": pp.temporal_bin if pp.use_temporal else None,
        },
        **ev.report,
        "config": cfg.to_dict(),
    }
    return PipelineRun(report, scene, log, cloud, estimate, stems, ev, boundary)

