"""Stem table (CSV) and stem-curve (JSON sidecar) serialization."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from ..errors import FormatError
from .pipeline import StemRecord

STEM_COLUMNS = ("stem_id", "x", "y", "ground_z", "dbh_cm")


def _curve_path(csv_path: Path, stem_id: int) -> Path:
    return csv_path.with_name(f"{csv_path.stem}_curves") / f"stem_{stem_id:04d}.json"


def save_stems(stems: Sequence[StemRecord], csv_path) -> None:
    """Write ``stem_id,x,y,ground_z,dbh_cm`` rows plus one curve JSON per stem.

    Curves go to ``<csv stem>_curves/stem_NNNN.json``. Missing DBH is an empty field.
    """
    csv_path = Path(csv_path)
    curve_dir = csv_path.with_name(f"{csv_path.stem}_curves")
    curve_dir.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(STEM_COLUMNS) + "\n")
        for s in stems:
            dbh = "" if s.dbh is None else repr(float(s.dbh))
            fh.write(f"{s.stem_id},{s.x!r},{s.y!r},{s.ground_z!r},{dbh}\n")
            doc = {
                "stem_id": s.stem_id,
                "n_arcs": s.n_arcs,
                "growth_axis": list(s.growth_axis),
                "stem_curve": [{"height_m": h, "diameter_m": d} for h, d in s.stem_curve],
            }
            _curve_path(csv_path, s.stem_id).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_stems(csv_path) -> list[StemRecord]:
    csv_path = Path(csv_path)
    out = []
    with open(csv_path, "r", encoding="ascii") as fh:
        header = tuple(fh.readline().strip().split(","))
        if header != STEM_COLUMNS:
            raise FormatError(f"unexpected header {header}", csv_path, 1)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            f = line.rstrip("\n").split(",")
            if len(f) != 5:
                raise FormatError("expected 5 fields", csv_path, lineno)
            sid = int(f[0])
            curve = ()
            axis = (0.0, 0.0, 1.0)
            n_arcs = 0
            cp = _curve_path(csv_path, sid)
            if cp.exists():
                doc = json.loads(cp.read_text())
                curve = tuple((c["height_m"], c["diameter_m"]) for c in doc["stem_curve"])
                axis = tuple(doc["growth_axis"])
                n_arcs = doc["n_arcs"]
            dbh = float(f[4]) if f[4] else None
            out.append(StemRecord(sid, float(f[1]), float(f[2]), float(f[3]), curve, dbh, n_arcs, axis))
    return out
