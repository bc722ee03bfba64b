"""Command-line entry point: ``undercanopy <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand accepts ``--config FILE`` (INI) and repeated
``--set section.key=value`` overrides; dedicated flags override both.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, load_config, merge_overrides, parse_assignments, parse_seeds
from .errors import EmptyCloudError, FormatError, UndercanopyError
from .evaluation import corridor_polygon
from .forest import load_scene, save_scene, straight_pass
from .io import (
    load_point_cloud,
    load_reference_trees,
    load_trajectory,
    save_point_cloud,
    save_reference_trees,
    save_trajectory,
)
from .stems.io import load_stems, save_stems

log = logging.getLogger("undercanopy")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad inputs named on the command line (missing files, malformed tables)."""


def dump_json(obj, path) -> Path:
    """Sorted-key JSON with a trailing newline, so reruns are byte-identical."""
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _nan_to_none(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def _read(loader, path, what: str):
    try:
        return loader(path)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except EmptyCloudError:
        raise  # valid file without data: a runtime failure, not a usage error
    except (FormatError, ValueError, KeyError, OSError) as err:
        raise UsageError(f"cannot read {what} file {path}: {err}") from None


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [section] key = value entries")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (run.seed)")
    p.add_argument("-v", "--verbose", action="store_true")


def _extent(text: str) -> str:
    parts = text.lower().split("x")
    try:
        vals = [float(v) for v in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"extent must look like 100x100, got {text!r}") from None
    if len(vals) != 2 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"extent must be two positive sizes WxD, got {text!r}")
    return f"{vals[0]!r},{vals[1]!r}"


def _line(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.replace(":", ",").split(",")]
    except ValueError:
        vals = []
    if len(vals) != 6:
        raise argparse.ArgumentTypeError("line must be x0,y0,z0:x1,y1,z1")
    return np.array(vals).reshape(2, 3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="undercanopy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("generate", help="generate a synthetic forest scene")
    _common(p)
    p.add_argument("--density", type=float, help="trees per hectare (required unless set in the config)")
    p.add_argument("--extent", type=_extent, help="stand size WxD in meters, e.g. 100x100")
    p.add_argument("--dbh-mean", type=float)
    p.add_argument("--dbh-sd", type=float)
    p.add_argument("--out", type=Path, default=Path("scene.csv"),
                   help="scene CSV; a .json sidecar and a _reference.csv tree table go alongside")

    p = sub.add_parser("scan", help="simulate a depth-camera scan along a trajectory")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--trajectory", type=Path, help="trajectory CSV t,x,y,z,qx,qy,qz,qw")
    src.add_argument("--line", type=_line, help="straight 1 m/s pass x0,y0,z0:x1,y1,z1")
    p.add_argument("--out", type=Path, default=Path("cloud.xyzt"))
    p.add_argument("--format", choices=("xyzt-text",), default="xyzt-text",
                   help="output format (PLY is supported for reading only)")

    p = sub.add_parser("detect", help="detect stems and estimate DBH")
    _common(p)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--format", choices=("xyzt-text", "ply-ascii"))
    p.add_argument("--tls-mode", action="store_true", help="20 cm height bins, no temporal segmentation")
    p.add_argument("--out", type=Path, default=Path("stems.csv"))

    p = sub.add_parser("evaluate", help="ATE, DBH metrics and completeness")
    _common(p)
    p.add_argument("--stems", type=Path, help="detected stems CSV")
    p.add_argument("--reference", type=Path, help="reference trees CSV id,x,y,dbh_cm[,species]")
    p.add_argument("--boundary-trajectory", type=Path,
                   help="trajectory whose corridor (evaluation.corridor) bounds the completeness count")
    p.add_argument("--pairs", type=Path, help="CSV of estimated_cm,reference_cm DBH pairs")
    p.add_argument("--estimate", type=Path, help="estimated trajectory CSV")
    p.add_argument("--ground-truth", type=Path, help="reference trajectory CSV")
    p.add_argument("--with-scale", action="store_true", help="report similarity-aligned ATE as ate_pos")
    p.add_argument("--out", type=Path, default=Path("metrics.json"))
    p.add_argument("--plots", type=Path, help="directory for SVG plots")

    p = sub.add_parser("mission", help="closed-loop flight missions over seeded scenes")
    _common(p)
    p.add_argument("--scenario", help="preset: evo-medium, evo-difficult or empty")
    p.add_argument("--seeds", help='seed list, e.g. "1-20" or "1,3,5"')
    p.add_argument("--out", type=Path, default=Path("missions"))

    p = sub.add_parser("pipeline", help="generate, fly, scan, detect and evaluate in one run")
    _common(p)
    p.add_argument("--scenario", help="preset: evo-medium, evo-difficult or empty")
    p.add_argument("--tls-mode", action="store_true", help="20 cm height bins, no temporal segmentation")
    p.add_argument("--out", type=Path, default=Path("pipeline_out"))
    p.add_argument("--save-cloud", action="store_true", help="also write the simulated point cloud")
    for name, sp in sub.choices.items():
        sp.set_defaults(usage=sp.format_usage())
    return parser


def resolve_config(args):
    flags: dict[str, dict[str, str]] = {}

    def put(section, key, value):
        if value is not None:
            flags.setdefault(section, {})[key] = str(value)

    put("run", "seed", args.seed)
    if getattr(args, "tls_mode", False):
        put("run", "tls_mode", "true")
    put("run", "scenario", getattr(args, "scenario", None))
    put("run", "seeds", getattr(args, "seeds", None))
    put("forest", "density", getattr(args, "density", None))
    put("forest", "extent", getattr(args, "extent", None))
    put("forest", "dbh_mean", getattr(args, "dbh_mean", None))
    put("forest", "dbh_sd", getattr(args, "dbh_sd", None))
    overrides = merge_overrides(parse_assignments(args.overrides), flags)
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- subcommands


def cmd_generate(args, cfg) -> int:
    if cfg.forest.density is None:
        raise ConfigError("--density is required (or [forest] density in the config)")
    scene = ex.generate(cfg)
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out)
    save_reference_trees(scene.reference_trees(), out.with_name(out.stem + "_reference.csv"))
    print(f"trees: {len(scene.trees)}")
    return EXIT_OK


def cmd_scan(args, cfg) -> int:
    scene = _read(load_scene, args.scene, "scene")
    if args.trajectory is not None:
        traj = _read(load_trajectory, args.trajectory, "trajectory")
    else:
        traj = straight_pass(args.line[0], args.line[1], speed=cfg.planner.v_max)
    cloud = ex.scan(scene, traj, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_point_cloud(cloud, args.out, args.format)
    print(f"points: {len(cloud)}")
    return EXIT_OK


def cmd_detect(args, cfg) -> int:
    cloud = _read(lambda p: load_point_cloud(p, args.format), args.cloud, "point cloud")
    stems = ex.detect(cloud, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_stems(stems, args.out)
    print(f"stems: {len(stems)} (with DBH: {sum(s.dbh is not None for s in stems)})")
    return EXIT_OK


def load_pairs(path) -> list[tuple[float, float]]:
    """DBH pairs CSV with header ``estimated_cm,reference_cm``."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["estimated_cm", "reference_cm"]:
            raise FormatError(f"expected header estimated_cm,reference_cm, got {header}", path, 1)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            f = line.strip().split(",")
            try:
                rows.append((float(f[0]), float(f[1])))
            except (ValueError, IndexError):
                raise FormatError("expected two numbers", path, lineno) from None
    return rows


def save_pairs(pairs, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("estimated_cm,reference_cm\n")
        for e, r in pairs:
            fh.write(f"{e!r},{r!r}\n")
    return path


def _write_plots(directory: Path, pairs, *, flown=None, estimate=None, stems=(), refs=(), boundary=None):
    from . import plots

    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if pairs:
        written.append(plots.dbh_scatter(pairs, directory / "dbh_scatter.svg"))
    if flown is not None or stems or refs:
        written.append(plots.top_view(directory / "top_view.svg", flown=flown, estimate=estimate,
                                      stems=stems, refs=refs, boundary=boundary))
    return written


def cmd_evaluate(args, cfg) -> int:
    if args.stems is None and args.pairs is None and args.estimate is None:
        raise ConfigError("nothing to evaluate: give --stems/--reference, --pairs or --estimate/--ground-truth")
    if (args.stems is None) != (args.reference is None):
        raise ConfigError("--stems and --reference go together")
    if (args.estimate is None) != (args.ground_truth is None):
        raise ConfigError("--estimate and --ground-truth go together")
    stems = _read(load_stems, args.stems, "stems") if args.stems else None
    refs = _read(load_reference_trees, args.reference, "reference trees") if args.reference else None
    pairs = _read(load_pairs, args.pairs, "DBH pairs") if args.pairs else None
    est = _read(load_trajectory, args.estimate, "trajectory") if args.estimate else None
    ref = _read(load_trajectory, args.ground_truth, "trajectory") if args.ground_truth else None
    boundary = None
    bt = None
    if args.boundary_trajectory is not None:
        bt = _read(load_trajectory, args.boundary_trajectory, "trajectory")
        boundary = corridor_polygon(bt.positions, cfg.evaluation.corridor)
    ev = ex.evaluate(stems=stems, refs=refs, boundary=boundary, pairs=pairs, estimate=est, reference=ref,
                     cfg=cfg)
    report = dict(ev.report)
    if args.with_scale and "ate" in report:
        report["ate"] = {**report["ate"], "ate_pos": report["ate"]["ate_pos_similarity"],
                         "alignment": "similarity"}
    report["config"] = cfg.to_dict()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dump_json(_nan_to_none(report), args.out)
    if ev.pairs:
        save_pairs(ev.pairs, args.out.with_name(args.out.stem + "_pairs.csv"))
    if args.plots is not None and cfg.evaluation.plots:
        _write_plots(args.plots, ev.pairs, flown=bt or ref, estimate=est, stems=stems or (), refs=refs or (),
                     boundary=boundary)
    _print_evaluation(report)
    return EXIT_OK


def _print_evaluation(report: dict) -> None:
    if "matching" in report:
        m = report["matching"]
        c = m["completeness_pct"]
        print(f"completeness: {'n/a' if c is None else f'{c:.2f}'}% "
              f"({m['n_matched']}/{m['n_reference_in_bounds']})")
    if "dbh" in report and "all" in report["dbh"]:
        d = report["dbh"]["all"]
        print(f"DBH RMSE: {d['rmse_cm']:.2f} cm ({d['rmse_pct']:.2f}%), bias {d['bias_cm']:.2f} cm, n={d['n']}")
    if "ate" in report:
        print(f"ATE_pos: {report['ate']['ate_pos']:.4f} m ({report['ate']['alignment']})")


def format_summary_table(rows) -> str:
    head = f"{'scenario':<14} {'density':>8} {'runs':>5} {'success':>8} {'smooth':>8} {'med. e-stops':>13}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['scenario']:<14} {r['density']:>8.0f} {r['runs']:>5} "
                     f"{str(r['success']) + '/' + str(r['runs']):>8} "
                     f"{str(r['smooth']) + '/' + str(r['runs']):>8} {r['median_emergency_stops']:>13}")
    return "\n".join(lines)


def cmd_mission(args, cfg) -> int:
    seeds = parse_seeds(cfg.run.seeds if args.seeds is not None or args.seed is None else str(cfg.run.seed))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    logs = []
    for s in seeds:
        g = ex.mission(cfg.scenario.scene(s), cfg, s)
        g.to_jsonl(out / f"mission_seed{s}.jsonl")
        save_trajectory(g.flown, out / f"flown_seed{s}.csv")
        log.info("seed %d: %s", s, g.summary["final_mode"])
        logs.append(g)
    row = ex.batch_summary(cfg.scenario.name, cfg.scenario.density, logs)
    dump_json({"summary": row, "runs": [g.summary for g in logs], "config": cfg.to_dict()}, out / "summary.json")
    print(format_summary_table([row]))
    return EXIT_OK


def cmd_pipeline(args, cfg) -> int:
    run = ex.pipeline(cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    dump_json(_nan_to_none(run.report), out / "report.json")
    save_scene(run.scene, out / "scene.csv")
    save_reference_trees(run.scene.reference_trees(), out / "scene_reference.csv")
    save_trajectory(run.log.flown, out / "flown.csv")
    save_trajectory(run.estimate, out / "estimate.csv")
    save_stems(run.stems, out / "stems.csv")
    run.log.to_jsonl(out / "mission.jsonl")
    if run.evaluation.pairs:
        save_pairs(run.evaluation.pairs, out / "dbh_pairs.csv")
    if args.save_cloud:
        save_point_cloud(run.cloud, out / "cloud.xyzt")
    if cfg.evaluation.plots:
        _write_plots(out, run.evaluation.pairs, flown=run.log.flown, estimate=run.estimate, stems=run.stems,
                     refs=run.scene.reference_trees(), boundary=run.boundary)
    m = run.report["mission"]
    print(f"mission: {m['final_mode']} success={m['success']} smooth={m['smooth']} "
          f"e-stops={m['emergency_stop_count']}")
    _print_evaluation(run.report)
    if run.report["segmentation"]["tls_mode"]:
        print("segmentation: 0.20 m height bins, temporal segmentation disabled")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "scan": cmd_scan,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "mission": cmd_mission,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage and exits 2 on bad flags
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as err:
        sys.stderr.write(args.usage)
        print(f"{parser.prog} {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (UndercanopyError, ValueError, RuntimeError, OSError) as err:
        print(f"{parser.prog} {args.command}: failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
