"""Four-view rendering of a fused model and the pyramid-display composite.

Views are perspective point-splat renders from four virtual cameras on a
horizontal orbit. The composite places them in a cross around a black
center so each lands under one face of a reflective pyramid.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .camera_model import CameraParams, Intrinsics, project_points
from .errors import IoFailure, LayoutOverflow
from .geometry import Pose
from .imageio import write_image

QUADRANTS = ("bottom", "right", "top", "left")
DEFAULT_ROTATIONS = {"bottom": 0, "right": 90, "top": 180, "left": 270}
NEAR = 1e-6


def splat_offsets(radius):
    """Integer pixel offsets of a filled disk, in raster order."""
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= radius * radius
    return dx[keep].astype(np.int64), dy[keep].astype(np.int64)


@numba.njit(cache=True, nogil=True)
def _zbuffer(iu, iv, z, index, ox, oy, zbuf, ibuf):
    h, w = zbuf.shape
    for n in range(iu.shape[0]):
        zn = z[n]
        i = index[n]
        for k in range(ox.shape[0]):
            x = iu[n] + ox[k]
            y = iv[n] + oy[k]
            if x < 0 or y < 0 or x >= w or y >= h:
                continue
            zb = zbuf[y, x]
            if zn < zb or (zn == zb and i < ibuf[y, x]):
                zbuf[y, x] = zn
                ibuf[y, x] = i


def rasterize(uv, z, size, radius=2):
    """Z-buffered splat of projected points.

    Returns ``(index, depth)`` buffers of shape ``(H, W)``: the winning point
    per pixel (-1 where empty) and its depth (inf where empty). Ties in depth
    go to the lower point index.
    """
    w, h = size
    zbuf = np.full((h, w), np.inf)
    ibuf = np.full((h, w), -1, dtype=np.int64)
    ok = np.isfinite(z) & (z > NEAR) & np.all(np.isfinite(uv), axis=1)
    # drop points whose splat cannot touch the image before rounding to ints
    r = int(radius)
    ok &= (uv[:, 0] > -r - 1) & (uv[:, 0] < w + r) & (uv[:, 1] > -r - 1) & (uv[:, 1] < h + r)
    idx = np.nonzero(ok)[0]
    iu = np.rint(uv[idx, 0]).astype(np.int64)
    iv = np.rint(uv[idx, 1]).astype(np.int64)
    ox, oy = splat_offsets(radius)
    _zbuffer(iu, iv, z[idx].astype(np.float64), idx.astype(np.int64), ox, oy, zbuf, ibuf)
    return ibuf, zbuf


def render_view(model, cam, size=None, radius=2):
    """Render ``model`` (a FusedModel or PointCloud) through ``cam``.

    Returns ``(rgb uint8 (H, W, 3), depth (H, W))`` with a black background
    and ``inf`` depth where nothing was drawn.
    """
    cloud = getattr(model, "cloud", model)
    if size is None:
        size = cam.intrinsics.image_size
    w, h = size
    img = np.zeros((h, w, 3), dtype=np.uint8)
    if len(cloud) == 0:
        return img, np.full((h, w), np.inf)
    uv, z = project_points(cam, cloud.points)
    ibuf, zbuf = rasterize(uv, z, size, radius)
    lit = ibuf >= 0
    colors = cloud.colors if cloud.colors is not None else np.full((len(cloud), 3), 255, np.uint8)
    img[lit] = colors[ibuf[lit]]
    return img, zbuf


def look_at_pose(center, target, up):
    """Camera-from-reference pose for a camera at ``center`` aimed at ``target``; image y points down."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("viewing direction is parallel to the up axis")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center, "virtual")


def _orthonormal_horizontal(up, front=None):
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if front is None:
        front = np.eye(3)[np.argmin(np.abs(up))]
    e1 = np.asarray(front, dtype=np.float64) - np.dot(front, up) * up
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    return up, e1, e2


@dataclass(frozen=True)
class ViewConfig:
    """Virtual orbit cameras around ``look_at``.

    ``front`` picks the horizontal direction of the 0 degree camera (it is
    projected onto the horizontal plane). ``elevation`` lifts the orbit
    along ``up_axis``. Views are square, ``size`` pixels on a side.
    """

    look_at: tuple = (0.0, 0.0, 0.0)
    up_axis: tuple = (0.0, 0.0, 1.0)
    orbit_radius: float = 3.0
    size: int = 512
    fov_deg: float = 50.0
    elevation: float = 0.0
    front: tuple | None = None
    radius: int = 2

    def __post_init__(self):
        if not self.orbit_radius > 0:
            raise ValueError("orbit_radius must be positive")
        if self.size < 1:
            raise ValueError("size must be positive")

    @property
    def intrinsics(self):
        f = 0.5 * self.size / np.tan(np.deg2rad(self.fov_deg) / 2)
        c = (self.size - 1) / 2
        return Intrinsics(f, 0.0, c, c, width=self.size, height=self.size)

    def cameras(self):
        """The four virtual cameras at 0, 90, 180 and 270 degrees."""
        up, e1, e2 = _orthonormal_horizontal(self.up_axis, self.front)
        target = np.asarray(self.look_at, dtype=np.float64)
        cams = []
        for k in range(4):
            a = k * np.pi / 2
            c, s = (1.0, 0.0, -1.0, 0.0)[k], (0.0, 1.0, 0.0, -1.0)[k]
            direction = c * e1 + s * e2
            center = target + self.orbit_radius * direction + self.elevation * up
            pose = look_at_pose(center, target + self.elevation * up, up)
            cams.append(CameraParams(self.intrinsics, pose.with_frame(f"view{int(np.rad2deg(a))}"),
                                     k + 1, "color"))
        return cams

    @classmethod
    def from_rig(cls, rig, **kw):
        """Orbit matched to a calibrated rig.

        Up is the normal of the plane through the depth-camera centers,
        oriented so the sensors look downward; the target is the point
        closest to all optical axes.
        """
        cams = [rig.camera(c, "depth") for c in rig.camera_ids]
        centers = np.array([c.center for c in cams])
        axes = np.array([c.pose.rotation[2] for c in cams])
        P = np.zeros((3, 3))
        q = np.zeros(3)
        for c, a in zip(centers, axes):
            M = np.eye(3) - np.outer(a, a)
            P += M
            q += M @ c
        target = np.linalg.lstsq(P, q, rcond=None)[0]
        _, _, vt = np.linalg.svd(centers - centers.mean(axis=0))
        up = vt[2]
        if np.dot(up, axes.mean(axis=0)) > 0:
            up = -up
        kw.setdefault("front", tuple(centers[0] - target))
        return cls(look_at=tuple(target), up_axis=tuple(up), **kw)


def four_views(model, config):
    """Render the model from the four orbit cameras, in 0/90/180/270 degree order."""
    return [render_view(model, cam, (config.size, config.size), config.radius)[0]
            for cam in config.cameras()]


@dataclass(frozen=True)
class CompositeLayout:
    """Cross arrangement of four square views on a black canvas.

    ``view_size`` defaults to a third of the shorter canvas side.
    ``center_gap`` is the side of the empty central square (defaults to the
    view size, the smallest gap that keeps rectangles disjoint). View k goes
    to ``order[k]``; each quadrant applies its own mirror and rotation so
    the image top faces the canvas center.
    """

    canvas: tuple = (1920, 1080)
    view_size: int | None = None
    center_gap: int | None = None
    order: tuple = QUADRANTS
    rotations: dict = field(default_factory=lambda: dict(DEFAULT_ROTATIONS))
    mirror: bool = True

    @property
    def size(self):
        return self.view_size if self.view_size is not None else min(self.canvas) // 3

    @property
    def gap(self):
        return self.center_gap if self.center_gap is not None else self.size

    def rectangles(self):
        """``{quadrant: (x0, y0, x1, y1)}`` half-open pixel rectangles."""
        W, H = self.canvas
        s, g = self.size, self.gap
        if g < s:
            raise LayoutOverflow(f"center gap {g} is smaller than the view size {s}")
        cx, cy = W // 2, H // 2
        h0 = g // 2
        rects = {
            "bottom": (cx - s // 2, cy + h0, cx - s // 2 + s, cy + h0 + s),
            "top": (cx - s // 2, cy - h0 - s, cx - s // 2 + s, cy - h0),
            "right": (cx + h0, cy - s // 2, cx + h0 + s, cy - s // 2 + s),
            "left": (cx - h0 - s, cy - s // 2, cx - h0, cy - s // 2 + s),
        }
        for name, (x0, y0, x1, y1) in rects.items():
            if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
                raise LayoutOverflow(f"{name} view {s}px does not fit a {W}x{H} canvas")
        return rects


def orient_view(view, quadrant, layout):
    """Mirror then rotate a view counter-clockwise by its quadrant angle."""
    out = view[:, ::-1] if layout.mirror else view
    k = (layout.rotations[quadrant] // 90) % 4
    return np.rot90(out, k)


def composite(views, layout=CompositeLayout()):
    """Blit four views onto a black canvas in a cross."""
    if len(views) != 4:
        raise ValueError("composite needs exactly four views")
    s = layout.size
    rects = layout.rectangles()
    W, H = layout.canvas
    canvas = np.zeros((H, W, 3), dtype=np.uint8)
    for view, quadrant in zip(views, layout.order):
        view = np.asarray(view)
        if view.shape[:2] != (s, s):
            raise LayoutOverflow(f"view {view.shape[1]}x{view.shape[0]} does not match layout size {s}")
        x0, y0, x1, y1 = rects[quadrant]
        canvas[y0:y1, x0:x1] = orient_view(view, quadrant, layout)
    return canvas


def render_composite(model, config, layout):
    return composite(four_views(model, config), layout)


def write_ppm(path, rgb):
    h, w = rgb.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_frame(out_dir, index, rgb, fmt="png"):
    path = Path(out_dir) / f"frame_{index:06d}.{fmt}"
    if fmt == "ppm":
        write_ppm(path, rgb)
    else:
        write_image(path, rgb)
    return path


@dataclass
class StreamReport:
    frames: int
    render_ms: list
    total_s: float

    @property
    def fps(self):
        return self.frames / self.total_s if self.total_s > 0 else float("inf")

    def to_dict(self):
        return {"frames": self.frames, "fps": self.fps, "total_s": self.total_s,
                "render_ms": self.render_ms}


def emit_stream(models, config, layout, out_dir, fmt="png"):
    """Render each model to ``frame_NNNNNN.<fmt>`` and write ``timing.json``.

    Numbering starts at 0 and has no gaps. The report times rendering,
    compositing and writing together.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    times = []
    start = time.perf_counter()
    n = 0
    for n, model in enumerate(models, start=1):
        t0 = time.perf_counter()
        write_frame(out, n - 1, render_composite(model, config, layout), fmt)
        times.append(1000.0 * (time.perf_counter() - t0))
    report = StreamReport(n, times, time.perf_counter() - start)
    try:
        (out / "timing.json").write_text(json.dumps(report.to_dict(), indent=2))
    except OSError as exc:
        raise IoFailure(f"cannot write timing report: {exc}") from exc
    return report
