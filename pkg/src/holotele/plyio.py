"""ASCII PLY reading and writing for colored point clouds.

Vertices carry ``x y z`` as float32, optional ``red green blue`` as uchar
and any number of extra float properties (used for per-point pixel
coordinates in calibration clouds).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IoFailure
from .geometry import PointCloud

_PLY_TYPES = {
    "char": np.int8, "int8": np.int8, "uchar": np.uint8, "uint8": np.uint8,
    "short": np.int16, "int16": np.int16, "ushort": np.uint16, "uint16": np.uint16,
    "int": np.int32, "int32": np.int32, "uint": np.uint32, "uint32": np.uint32,
    "float": np.float32, "float32": np.float32, "double": np.float64, "float64": np.float64,
}


def write_ply(path, cloud, extras=None, precision="float"):
    """Write ``cloud`` as ASCII PLY.

    ``precision`` is ``"float"`` (float32 as documented for exchange) or
    ``"double"`` when the coordinates must round-trip exactly.
    """
    extras = extras or {}
    n = len(cloud)
    for name, values in extras.items():
        if len(values) != n:
            raise ValueError(f"extra property {name!r} has {len(values)} values for {n} points")
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment frame_id {cloud.frame_id}",
        f"element vertex {n}",
        f"property {precision} x",
        f"property {precision} y",
        f"property {precision} z",
    ]
    if cloud.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    for name in extras:
        lines.append(f"property double {name}")
    lines.append("end_header")

    ftype = np.float32 if precision == "float" else np.float64
    cols = [cloud.points.astype(ftype).astype(np.float64)]
    fmt = ["%.9g"] * 3 if precision == "float" else ["%.17g"] * 3
    if cloud.colors is not None:
        cols.append(cloud.colors.astype(np.float64))
        fmt += ["%d"] * 3
    for values in extras.values():
        cols.append(np.asarray(values, dtype=np.float64).reshape(n, 1))
        fmt.append("%.17g")
    table = np.hstack(cols) if n else np.zeros((0, len(fmt)))
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
            if n:
                np.savetxt(fh, table, fmt=fmt)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_ply(path, with_extras=False):
    """Read an ASCII PLY written by :func:`write_ply` (or any ASCII vertex-only PLY)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path} is not a PLY file")
    props = []
    n = 0
    frame_id = "camera"
    in_vertex = False
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError("only ASCII PLY is supported")
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] == "frame_id":
            frame_id = parts[2]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError("list properties are not supported on vertices")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise ValueError(f"{path}: missing end_header")
    names = [p[0] for p in props]
    if n:
        data = np.loadtxt(lines[body_start:body_start + n], dtype=np.float64, ndmin=2)
    else:
        data = np.zeros((0, len(props)))
    col = {name: data[:, k] for k, name in enumerate(names)}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.uint8)
    cloud = PointCloud(pts, colors, frame_id)
    if not with_extras:
        return cloud
    skip = {"x", "y", "z", "red", "green", "blue"}
    return cloud, {k: v for k, v in col.items() if k not in skip}
