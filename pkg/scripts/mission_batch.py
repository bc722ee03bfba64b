"""Paired-seed mission batches at two stand densities.

Runs the same seeds through the medium (650 trees/ha) and difficult
(2000 trees/ha) presets and prints success, smoothness and emergency stops.

    python scripts/mission_batch.py --seeds 1-20 --out missions.json
"""

from __future__ import annotations

import argparse
import json
import time

from undercanopy.config import load_config, parse_seeds
from undercanopy.experiments import mission_batch


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="1-20")
    ap.add_argument("--scenarios", nargs="+", default=["evo-medium", "evo-difficult"])
    ap.add_argument("--out", help="optional JSON file for the summaries")
    args = ap.parse_args(argv)
    seeds = parse_seeds(args.seeds)

    rows = []
    print(f"{'scenario':<15}{'trees/ha':>9}{'success':>10}{'smooth':>9}{'median stops':>14}{'time s':>9}")
    for name in args.scenarios:
        cfg = load_config(overrides={"run": {"scenario": name}})
        t0 = time.perf_counter()
        logs, summary = mission_batch(cfg, seeds)
        elapsed = time.perf_counter() - t0
        stops = [int(g.summary["emergency_stop_count"]) for g in logs]
        summary["emergency_stops"] = stops
        rows.append(summary)
        n = summary["runs"]
        print(f"{name:<15}{summary['density']:>9.0f}{summary['success']:>6}/{n:<3}"
              f"{summary['smooth']:>5}/{n:<3}{summary['median_emergency_stops']:>14}{elapsed:>9.1f}")
    if len(rows) == 2:
        a, b = (r["emergency_stops"] for r in rows)
        worse = sum(y > x for x, y in zip(a, b))
        print(f"seeds with more stops in {rows[1]['scenario']}: {worse}/{len(a)}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
