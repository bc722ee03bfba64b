"""Self-contained SVG figures with byte-stable output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed id salt and no date stamp, so identical data gives identical files.
_SVG_RC = {"svg.hashsalt": "undercanopy", "svg.fonttype": "path", "path.simplify": False}


def _save(fig, path) -> Path:
    path = Path(path)
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def dbh_scatter(pairs: Sequence[tuple[float, float]], path, title: str = "") -> Path:
    """Estimated versus reference DBH (cm) with the 1:1 line."""
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    with matplotlib.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        hi = float(arr.max()) * 1.1 if len(arr) else 50.0
        ax.plot([0, hi], [0, hi], color="0.4", lw=1, label="1:1")
        ax.scatter(arr[:, 1], arr[:, 0], s=14, color="tab:green", label="matched stems")
        ax.set_xlim(0, hi)
        ax.set_ylim(0, hi)
        ax.set_xlabel("reference DBH (cm)")
        ax.set_ylabel("estimated DBH (cm)")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
    return _save(fig, path)


def top_view(path, *, flown=None, estimate=None, stems: Sequence = (), refs: Sequence = (),
             boundary=None, title: str = "") -> Path:
    """Plan view of trajectories, detected stems and reference trees."""
    with matplotlib.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        if boundary is not None and not boundary.is_empty:
            x, y = boundary.exterior.xy
            ax.plot(x, y, color="0.75", lw=0.8, label="evaluation boundary")
        if refs:
            r = np.array([(t.x, t.y, t.dbh) for t in refs])
            ax.scatter(r[:, 0], r[:, 1], s=r[:, 2] * 0.6, facecolors="none", edgecolors="0.3",
                       lw=0.7, label="reference trees")
        if stems:
            s = np.array([(t.x, t.y) for t in stems])
            ax.scatter(s[:, 0], s[:, 1], s=8, color="tab:green", label="detected stems")
        if flown is not None:
            ax.plot(flown.positions[:, 0], flown.positions[:, 1], color="tab:blue", lw=1.2, label="flown")
        if estimate is not None:
            ax.plot(estimate.positions[:, 0], estimate.positions[:, 1], color="tab:orange", lw=1.0,
                    ls="--", label="estimated")
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right", fontsize=7, frameon=False)
        fig.tight_layout()
    return _save(fig, path)
