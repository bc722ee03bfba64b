"""Timed point clouds, trajectories and reference-tree tables: types and file I/O.

Text point clouds are whitespace separated ``x y z t`` records under a single
``#`` header line. The header may carry ``dt=<seconds>``; files with only
``x y z`` columns then get ``t = index * dt``. Without ``dt`` such files load as
*atemporal* clouds (all ``t = 0``), which the stem pipeline treats like static
scanner data. ASCII PLY is read-only and takes timestamps from a ``time``
(or ``t``/``timestamp``) vertex property.

All parsing is locale independent; only ``.`` is accepted as decimal point.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import EmptyCloudError, FormatError

XYZT_TEXT = "xyzt-text"
PLY_ASCII = "ply-ascii"
POINT_FORMATS = (XYZT_TEXT, PLY_ASCII)

QUAT_LOAD_TOL = 1e-3
QUAT_INVARIANT_TOL = 1e-9

# Python's float() accepts "nan", "inf", "1_000"; records must be plain decimals.
_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _parse_float(token: str, path, line: int) -> float:
    if not _NUMBER.match(token):
        raise FormatError(f"not a decimal number: {token!r}", path, line)
    return float(token)


class TimedPoint(NamedTuple):
    x: float
    y: float
    z: float
    t: float


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points with acquisition times, always stored sorted by ``t`` (stable).

    ``xyz`` is ``(N, 3)`` in meters and ``t`` is ``(N,)`` in seconds.
    ``temporal`` is False for clouds whose source carried no timestamps.
    """

    xyz: np.ndarray
    t: np.ndarray
    temporal: bool = True

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        t = np.asarray(self.t, dtype=float).reshape(-1)
        if len(t) != len(xyz):
            raise ValueError(f"{len(xyz)} points but {len(t)} timestamps")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ValueError("timestamps must be finite and >= 0")
        order = np.argsort(t, kind="stable")
        xyz = np.ascontiguousarray(xyz[order])
        t = np.ascontiguousarray(t[order])
        xyz.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "t", t)

    @classmethod
    def empty(cls, temporal: bool = True) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), temporal)

    @classmethod
    def from_points(cls, points: Iterable[TimedPoint], temporal: bool = True) -> "PointCloud":
        arr = np.array([tuple(p) for p in points], dtype=float).reshape(-1, 4)
        return cls(arr[:, :3], arr[:, 3], temporal)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[TimedPoint]:
        for (x, y, z), t in zip(self.xyz.tolist(), self.t.tolist()):
            yield TimedPoint(x, y, z, t)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned ``(lower, upper)`` corners."""
        if len(self) == 0:
            raise EmptyCloudError("empty cloud has no bounds")
        return self.xyz.min(axis=0), self.xyz.max(axis=0)

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.xyz[mask_or_index], self.t[mask_or_index], self.temporal)

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud.empty()
        return PointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.t for c in clouds]),
            all(c.temporal for c in clouds),
        )


class Pose(NamedTuple):
    t: float
    position: np.ndarray
    orientation: np.ndarray  # (qx, qy, qz, qw)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timed poses; ``t`` strictly increasing, quaternions ``(qx, qy, qz, qw)``."""

    t: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.orientations is None:
            q = np.tile([0.0, 0.0, 0.0, 1.0], (len(t), 1))
        else:
            q = np.asarray(self.orientations, dtype=float).reshape(-1, 4)
        if not (len(t) == len(pos) == len(q)):
            raise ValueError("trajectory arrays have mismatched lengths")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            i = int(np.argmax(np.diff(t) <= 0)) + 1
            raise ValueError(f"timestamps must be strictly increasing (pose {i}, t={t[i]!r})")
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_INVARIANT_TOL):
            raise ValueError("orientation quaternions must have unit norm")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(pos))):
            raise ValueError("trajectory values must be finite")
        for name, arr in (("t", t), ("positions", pos), ("orientations", q)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Pose:
        return Pose(float(self.t[i]), self.positions[i].copy(), self.orientations[i].copy())

    @classmethod
    def from_poses(cls, poses: Iterable[Pose]) -> "Trajectory":
        poses = list(poses)
        return cls(
            [p.t for p in poses],
            np.array([p.position for p in poses], dtype=float).reshape(-1, 3),
            np.array([p.orientation for p in poses], dtype=float).reshape(-1, 4),
        )

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())


@dataclass(frozen=True)
class ReferenceTree:
    id: int
    x: float
    y: float
    dbh: float  # cm
    species: str | None = None


# ---------------------------------------------------------------- point clouds


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        return PLY_ASCII if path.suffix.lower() == ".ply" else XYZT_TEXT
    if fmt not in POINT_FORMATS:
        raise ValueError(f"unknown point cloud format {fmt!r}; expected one of {POINT_FORMATS}")
    return fmt


def load_point_cloud(path, format: str | None = None) -> PointCloud:
    """Load a timed point cloud; the result is sorted by acquisition time.

    Raises:
        FormatError: malformed record (message carries the line number).
        EmptyCloudError: the file holds no records.
        OSError: the file cannot be read.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    with open(path, "r", encoding="ascii", errors="strict", newline=None) as fh:
        lines = fh.read().splitlines()
    if fmt == PLY_ASCII:
        cloud = _parse_ply(lines, path)
    else:
        cloud = _parse_xyzt(lines, path)
    if len(cloud) == 0:
        raise EmptyCloudError(f"{path}: point cloud file contains no records")
    return cloud


def _parse_xyzt(lines: list[str], path: Path) -> PointCloud:
    dt = None
    rows: list[list[float]] = []
    width = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.search(r"\bdt\s*=\s*(\S+)", line)
            if m:
                dt = _parse_float(m.group(1), path, lineno)
            continue
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise FormatError(f"expected 3 or 4 columns, got {len(tokens)}", path, lineno)
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise FormatError(f"column count changed from {width} to {len(tokens)}", path, lineno)
        row = [_parse_float(tok, path, lineno) for tok in tokens]
        if len(row) == 4 and row[3] < 0:
            raise FormatError("negative timestamp", path, lineno)
        rows.append(row)
    if not rows:
        return PointCloud.empty()
    arr = np.array(rows, dtype=float)
    if width == 4:
        return PointCloud(arr[:, :3], arr[:, 3], temporal=True)
    if dt is not None:
        return PointCloud(arr, np.arange(len(arr)) * dt, temporal=True)
    return PointCloud(arr, np.zeros(len(arr)), temporal=False)


_PLY_TIME_NAMES = ("time", "t", "timestamp", "gps_time")


def _parse_ply(lines: list[str], path: Path) -> PointCloud:
    if not lines or lines[0].strip() != "ply":
        raise FormatError("missing 'ply' magic", path, 1)
    elements: list[tuple[str, int, list[str]]] = []
    end_header = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise FormatError("only ASCII PLY is supported", path, lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise FormatError("bad element line", path, lineno)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise FormatError("property before element", path, lineno)
            if tokens[1] == "list":
                elements[-1][2].append("__list__")
            else:
                elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            end_header = lineno
            break
        else:
            raise FormatError(f"unexpected header line {raw!r}", path, lineno)
    if end_header is None:
        raise FormatError("missing end_header", path)

    lineno = end_header
    body = iter(enumerate(lines[end_header:], start=end_header + 1))
    for name, count, props in elements:
        if name != "vertex":
            for _ in range(count):
                next(body, None)
            continue
        for axis in "xyz":
            if axis not in props:
                raise FormatError(f"vertex element lacks property {axis!r}", path, end_header)
        ix, iy, iz = (props.index(a) for a in "xyz")
        it = next((props.index(n) for n in _PLY_TIME_NAMES if n in props), None)
        rows = []
        for _ in range(count):
            item = next(body, None)
            if item is None:
                raise FormatError(f"expected {count} vertices, file ended early", path, lineno)
            lineno, raw = item
            tokens = raw.split()
            if len(tokens) < len(props):
                raise FormatError(f"expected {len(props)} values, got {len(tokens)}", path, lineno)
            vals = [_parse_float(tokens[k], path, lineno) for k in range(len(props))]
            rows.append((vals[ix], vals[iy], vals[iz], vals[it] if it is not None else 0.0))
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        return PointCloud(arr[:, :3], arr[:, 3], temporal=it is not None)
    raise FormatError("no vertex element", path)


def save_point_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    """Write ``cloud`` as xyzt text (atemporal clouds get three columns).

    PLY is read-only; requesting it raises ``ValueError``.
    """
    path = Path(path)
    fmt = _infer_format(path, format) if format is not None else XYZT_TEXT
    if fmt != XYZT_TEXT:
        raise ValueError("point clouds can only be written as xyzt-text")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        if cloud.temporal:
            fh.write("# x y z t\n")
            data = np.column_stack([cloud.xyz, cloud.t])
            fmt_row = "%.9f %.9f %.9f %.9f"
        else:
            fh.write("# x y z\n")
            data = cloud.xyz
            fmt_row = "%.9f %.9f %.9f"
        if len(data):
            np.savetxt(fh, data, fmt=fmt_row)


# ---------------------------------------------------------------- trajectories

TRAJECTORY_COLUMNS = ("t", "x", "y", "z", "qx", "qy", "qz", "qw")


def load_trajectory(path) -> Trajectory:
    """Read ``t,x,y,z,qx,qy,qz,qw`` CSV rows (an optional header is skipped).

    Quaternions within 1e-3 of unit norm are normalized; anything further off
    raises ``FormatError``, as do duplicate or decreasing timestamps.
    """
    path = Path(path)
    rows = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and rec[0].strip() == "t":
                continue
            if len(rec) != 8:
                raise FormatError(f"expected 8 fields, got {len(rec)}", path, lineno)
            vals = [_parse_float(v.strip(), path, lineno) for v in rec]
            q = np.array(vals[4:])
            norm = float(np.linalg.norm(q))
            if abs(norm - 1.0) >= QUAT_LOAD_TOL:
                raise FormatError(f"quaternion norm {norm:.6g} is not within 1e-3 of 1", path, lineno)
            if rows and vals[0] <= rows[-1][0]:
                kind = "duplicate" if vals[0] == rows[-1][0] else "non-monotonic"
                raise FormatError(f"{kind} timestamp {vals[0]!r}", path, lineno)
            rows.append(vals[:4] + list(q / norm))
    if not rows:
        raise FormatError("trajectory file contains no poses", path)
    arr = np.array(rows)
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:8])


def save_trajectory(traj: Trajectory, path) -> None:
    data = np.column_stack([traj.t, traj.positions, traj.orientations])
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------- reference trees


def load_reference_trees(path) -> list[ReferenceTree]:
    """Read ``id,x,y,dbh_cm[,species]`` rows; ids must be unique, dbh positive."""
    path = Path(path)
    trees: list[ReferenceTree] = []
    seen: dict[int, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and rec[0].strip() == "id":
                continue
            if len(rec) not in (4, 5):
                raise FormatError(f"expected 4 or 5 fields, got {len(rec)}", path, lineno)
            try:
                tid = int(rec[0].strip())
            except ValueError:
                raise FormatError(f"tree id is not an integer: {rec[0]!r}", path, lineno) from None
            x, y, dbh = (_parse_float(v.strip(), path, lineno) for v in rec[1:4])
            if tid in seen:
                raise FormatError(f"duplicate tree id {tid} (first on line {seen[tid]})", path, lineno)
            if not dbh > 0:
                raise FormatError(f"tree {tid}: dbh must be positive, got {dbh!r}", path, lineno)
            species = (rec[4].strip() or None) if len(rec) == 5 else None
            seen[tid] = lineno
            trees.append(ReferenceTree(tid, x, y, dbh, species))
    return trees


def save_reference_trees(trees: Iterable[ReferenceTree], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,x,y,dbh_cm,species\n")
        for tr in trees:
            fh.write(f"{tr.id},{tr.x!r},{tr.y!r},{tr.dbh!r},{tr.species or ''}\n")

