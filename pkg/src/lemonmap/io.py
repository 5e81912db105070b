"""Readers and writers: TUM trajectories, ASCII PLY, g2o graphs, JSON."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .geom import PointCloud, Pose


class FormatError(ValueError):
    """Malformed input file; the message names ``file:line``."""


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------- #
# TUM
# --------------------------------------------------------------------------- #
def write_tum(path, poses: Sequence[Pose]) -> None:
    lines = []
    for p in poses:
        q = p.quat()
        vals = [p.timestamp, *p.translation, *q]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path, robot_id: int = 0) -> list[Pose]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines; seq_index is the line order."""
    poses = []
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        q = np.array(vals[4:8])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise FormatError(f"{path}:{lineno}: quaternion is not unit length")
        poses.append(Pose.from_quat(vals[1:4], q, robot_id=robot_id,
                                    seq_index=len(poses), timestamp=vals[0]))
    return poses


# --------------------------------------------------------------------------- #
# PLY (ASCII, x y z [label])
# --------------------------------------------------------------------------- #
def write_ply(path, cloud: PointCloud | np.ndarray) -> None:
    if isinstance(cloud, PointCloud):
        pts, labels = cloud.points, cloud.labels
    else:
        pts, labels = np.asarray(cloud, dtype=float).reshape(-1, 3), None
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z"]
    if labels is not None:
        header.append("property int label")
    header.append("end_header")
    rows = []
    if labels is None:
        rows = [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in pts]
    else:
        rows = [f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {int(l)}" for (x, y, z), l in zip(pts, labels)]
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_ply(path, frame: str = "sensor") -> PointCloud:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    n = None
    props: list[str] = []
    body = None
    for i, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if s.startswith("format") and "ascii" not in s:
            raise FormatError(f"{path}:{i}: only ASCII PLY is supported")
        if s.startswith("element vertex"):
            n = int(s.split()[2])
        elif s.startswith("property"):
            props.append(s.split()[-1])
        elif s == "end_header":
            body = i
            break
    if n is None or body is None:
        raise FormatError(f"{path}:{len(lines)}: incomplete PLY header")
    if props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}:{body}: expected x, y, z properties")
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64) if "label" in props else None
    li = props.index("label") if labels is not None else -1
    for k in range(n):
        lineno = body + 1 + k
        if lineno > len(lines):
            raise FormatError(f"{path}:{lineno}: file truncated, expected {n} vertices")
        parts = lines[lineno - 1].split()
        if len(parts) != len(props):
            raise FormatError(f"{path}:{lineno}: expected {len(props)} fields, got {len(parts)}")
        try:
            pts[k] = [float(v) for v in parts[:3]]
            if labels is not None:
                labels[k] = int(parts[li])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return PointCloud(pts, frame, labels=labels)


# --------------------------------------------------------------------------- #
# g2o (VERTEX_SE3:QUAT / EDGE_SE3:QUAT)
# --------------------------------------------------------------------------- #
def _node_id(key, ids: dict) -> int:
    return ids[key]


def write_g2o(path, graph) -> None:
    """Write a :class:`~lemonmap.pgo.PoseGraph`; vertex ids follow sorted node keys."""
    keys = sorted(graph.nodes)
    ids = {k: i for i, k in enumerate(keys)}
    lines = []
    for k in keys:
        p = graph.nodes[k]
        vals = [*p.translation, *p.quat()]
        lines.append(f"VERTEX_SE3:QUAT {ids[k]} " + " ".join(_fmt(v) for v in vals))
    lines.append(f"FIX {ids[graph.anchor]}")
    iu = np.triu_indices(6)
    for e in graph.edges:
        m = e.measurement
        # g2o stores information in [t, q] order; ours is [omega, rho].
        perm = [3, 4, 5, 0, 1, 2]
        info = e.information[np.ix_(perm, perm)]
        vals = [*m.translation, *m.quat(), *info[iu]]
        lines.append(f"EDGE_SE3:QUAT {ids[e.node_a]} {ids[e.node_b]} "
                     + " ".join(_fmt(v) for v in vals) + f" # {e.kind}")
    comment = ["# keys " + " ".join(f"{r}:{s}" for r, s in keys)]
    Path(path).write_text("\n".join(comment + lines) + "\n")


def read_g2o(path):
    from .pgo import GraphEdge, PoseGraph

    path = Path(path)
    keys = None
    verts: dict[int, Pose] = {}
    raw_edges = []
    fixed = None
    perm = [3, 4, 5, 0, 1, 2]
    iu = np.triu_indices(6)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        try:
            if s.startswith("# keys"):
                keys = [tuple(int(x) for x in tok.split(":")) for tok in s.split()[2:]]
                continue
            kind = "loop"
            if "#" in s:
                s, kind = s.split("#", 1)
                kind = kind.strip()
            parts = s.split()
            tag = parts[0]
            if tag == "VERTEX_SE3:QUAT":
                if len(parts) != 9:
                    raise FormatError(f"{path}:{lineno}: VERTEX_SE3:QUAT needs 8 values")
                vid = int(parts[1])
                v = [float(x) for x in parts[2:]]
                verts[vid] = Pose.from_quat(v[:3], v[3:7])
            elif tag == "EDGE_SE3:QUAT":
                if len(parts) != 31:
                    raise FormatError(f"{path}:{lineno}: EDGE_SE3:QUAT needs 2 ids and 28 values")
                a, b = int(parts[1]), int(parts[2])
                v = [float(x) for x in parts[3:]]
                info_g2o = np.zeros((6, 6))
                info_g2o[iu] = v[7:]
                info_g2o = info_g2o + np.triu(info_g2o, 1).T
                info = np.zeros((6, 6))
                info[np.ix_(perm, perm)] = info_g2o
                raw_edges.append((kind, a, b, Pose.from_quat(v[:3], v[3:7]), info))
            elif tag == "FIX":
                fixed = int(parts[1])
            else:
                raise FormatError(f"{path}:{lineno}: unknown tag {tag}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    vids = sorted(verts)
    if keys is None:
        keys = [(0, i) for i in vids]
    key_of = {vid: keys[i] for i, vid in enumerate(vids)}
    nodes = {key_of[v]: verts[v].with_meta(*key_of[v]) for v in vids}
    edges = [GraphEdge(kind, key_of[a], key_of[b], m, info) for kind, a, b, m, info in raw_edges]
    anchor = key_of[fixed] if fixed is not None else key_of[vids[0]]
    return PoseGraph(nodes, edges, anchor)


# --------------------------------------------------------------------------- #
# JSON helpers
# --------------------------------------------------------------------------- #
def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from None


def pose_to_list(p: Pose) -> list[float]:
    """7-tuple ``tx ty tz qx qy qz qw``."""
    return [float(v) for v in (*p.translation, *p.quat())]


def pose_from_list(v, **meta) -> Pose:
    v = [float(x) for x in v]
    if len(v) != 7:
        raise ValueError("pose 7-tuple expected")
    return Pose.from_quat(v[:3], v[3:], **meta)
