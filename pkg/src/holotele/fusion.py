"""Depth frames to colored point clouds, and per-camera clouds to one model.

Depth cameras and color cameras are related only through their calibrated
poses; the mapping between the two images is computed explicitly instead of
relying on a sensor SDK.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .camera_model import pixels_to_normalized, project_points
from .errors import DimensionMismatch, NoConvergence
from .geometry import PointCloud

FALLBACK_COLOR = (0, 0, 0)
OCCLUSION_TOL = 0.03  # meters


@lru_cache(maxsize=16)
def _ray_table(intr):
    """Undistorted normalized coordinates for every pixel, or None when some fail."""
    vv, uu = np.mgrid[0:intr.height, 0:intr.width]
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
    try:
        xy = pixels_to_normalized(intr, uv)
    except NoConvergence:
        return None
    xy = xy.reshape(intr.height, intr.width, 2)
    xy.setflags(write=False)
    return xy


def _normalized_at(intr, rows, cols):
    table = _ray_table(intr)
    if table is not None:
        return table[rows, cols]
    uv = np.stack([cols, rows], axis=1).astype(np.float64)
    return pixels_to_normalized(intr, uv)


def backproject(depth, mask, cam):
    """Points in the depth camera frame for masked pixels with valid depth.

    ``depth`` is in meters with 0 marking holes; ``mask=None`` keeps every
    pixel. Points come out in row-major pixel order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    intr = cam.intrinsics
    if depth.shape != (intr.height, intr.width):
        raise DimensionMismatch(f"depth {depth.shape} does not match camera {intr.height}x{intr.width}")
    keep = depth > 0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise DimensionMismatch(f"mask {mask.shape} does not match depth {depth.shape}")
        keep &= mask
    rows, cols = np.nonzero(keep)
    z = depth[rows, cols]
    xy = _normalized_at(intr, rows, cols)
    pts = np.column_stack([xy * z[:, None], z])
    return PointCloud(pts, None, f"depth{cam.camera_id}")


def _color_from_depth(color_cam, depth_cam):
    if depth_cam is None:
        return color_cam.pose
    return color_cam.pose.compose(depth_cam.pose.inverse("reference"))


def color_pixels(points, color_cam, depth_cam=None, occlusion_tol=OCCLUSION_TOL):
    """Nearest color-pixel indices ``(row, col)`` and a visibility flag for each point.

    A point is visible when it projects inside the image and, if
    ``occlusion_tol`` is set, lies within that distance of the nearest point
    landing in the same cell of the color image. Cells are as wide as one
    depth pixel seen from the color camera, so sparse depth samples still
    shadow what is behind them. The color and depth cameras of one sensor
    are offset, so without this test background points along a silhouette
    would pick up foreground colors.
    """
    cam = color_cam.with_pose(_color_from_depth(color_cam, depth_cam))
    uv, z = project_points(cam, points)
    intr = color_cam.intrinsics
    finite = np.all(np.isfinite(uv), axis=1)
    col = np.where(finite, np.rint(np.where(finite, uv[:, 0], -1.0)), -1).astype(np.int64)
    row = np.where(finite, np.rint(np.where(finite, uv[:, 1], -1.0)), -1).astype(np.int64)
    inside = finite & (col >= 0) & (col < intr.width) & (row >= 0) & (row < intr.height)
    if occlusion_tol is not None and np.any(inside):
        k = 1
        if depth_cam is not None:
            k = max(1, int(np.ceil(intr.focal / depth_cam.intrinsics.focal)))
        cw = (intr.width + k - 1) // k
        cell = (row[inside] // k) * cw + col[inside] // k
        zmin = np.full(cw * ((intr.height + k - 1) // k), np.inf)
        np.minimum.at(zmin, cell, z[inside])
        vis = z[inside] <= zmin[cell] + occlusion_tol
        inside[np.nonzero(inside)[0][~vis]] = False
    return row, col, inside


def colorize(cloud, color_frame, color_cam, depth_cam=None, fallback=FALLBACK_COLOR,
             occlusion_tol=OCCLUSION_TOL):
    """Color each point by the nearest pixel it projects to in ``color_frame``.

    Points are taken in ``depth_cam``'s frame when it is given, otherwise in
    the reference frame. Returns ``(colored_cloud, in_view)``; points that
    fall outside the image, behind the camera or behind nearer points get
    ``fallback``. ``occlusion_tol=None`` disables the occlusion test.
    """
    color_frame = np.asarray(color_frame)
    intr = color_cam.intrinsics
    if color_frame.shape[:2] != (intr.height, intr.width):
        raise DimensionMismatch(f"color frame {color_frame.shape[:2]} does not match camera")
    row, col, inside = color_pixels(cloud.points, color_cam, depth_cam, occlusion_tol)
    colors = np.tile(np.asarray(fallback, dtype=np.uint8), (len(cloud), 1))
    img = color_frame if color_frame.ndim == 3 else np.repeat(color_frame[..., None], 3, axis=2)
    colors[inside] = img[row[inside], col[inside], :3]
    return PointCloud(cloud.points, colors, cloud.frame_id), inside


def map_mask_to_depth(color_mask, depth, depth_cam, color_cam, occlusion_tol=OCCLUSION_TOL):
    """Depth-resolution mask: valid depth pixels whose 3D point lands, unoccluded, on the color mask."""
    depth = np.asarray(depth, dtype=np.float64)
    color_mask = np.asarray(color_mask, dtype=bool)
    ci = color_cam.intrinsics
    if color_mask.shape != (ci.height, ci.width):
        raise DimensionMismatch("color mask does not match the color camera")
    cloud = backproject(depth, None, depth_cam)
    row, col, inside = color_pixels(cloud.points, color_cam, depth_cam, occlusion_tol)
    hit = np.zeros(len(cloud), dtype=bool)
    hit[inside] = color_mask[row[inside], col[inside]]
    rows, cols = np.nonzero(depth > 0)
    out = np.zeros(depth.shape, dtype=bool)
    out[rows[hit], cols[hit]] = True
    return out


class CoordinateMapper:
    """Per-pixel depth-to-camera-space and depth-to-color mapping for one sensor.

    Stands in for the vendor mapping API; everything is derived from the two
    calibrated cameras.
    """

    def __init__(self, depth_cam, color_cam):
        self.depth_cam = depth_cam
        self.color_cam = color_cam

    def depth_to_camera(self, depth):
        """``(H, W, 3)`` points in the depth frame, NaN where depth is 0."""
        depth = np.asarray(depth, dtype=np.float64)
        out = np.full(depth.shape + (3,), np.nan)
        cloud = backproject(depth, None, self.depth_cam)
        rows, cols = np.nonzero(depth > 0)
        out[rows, cols] = cloud.points
        return out

    def depth_to_color(self, depth):
        """``(H, W, 2)`` color-image coordinates of every depth pixel, NaN where unknown."""
        pts = self.depth_to_camera(depth).reshape(-1, 3)
        out = np.full((len(pts), 2), np.nan)
        ok = np.all(np.isfinite(pts), axis=1)
        cam = self.color_cam.with_pose(_color_from_depth(self.color_cam, self.depth_cam))
        out[ok], _ = project_points(cam, pts[ok])
        return out.reshape(np.asarray(depth).shape + (2,))


def sensor_cloud(depth, color, mask, depth_cam, color_cam, quantize=True):
    """One sensor's colored foreground cloud in its depth frame.

    ``mask`` may be at depth or at color resolution; a color mask is mapped
    through the calibration first. With ``quantize`` the coordinates are
    rounded to float32, which is what travels on the wire, so offline and
    networked runs see identical points.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            mask = map_mask_to_depth(mask, depth, depth_cam, color_cam)
    cloud = backproject(depth, mask, depth_cam)
    cloud, _ = colorize(cloud, color, color_cam, depth_cam)
    if quantize:
        cloud = PointCloud(cloud.points.astype(np.float32).astype(np.float64), cloud.colors, cloud.frame_id)
    return cloud


@dataclass(frozen=True, eq=False)
class FusedModel:
    cloud: PointCloud
    source_count: int
    timestamp: int = 0

    def __post_init__(self):
        if self.cloud.frame_id != "reference":
            raise ValueError("a fused model must be in the reference frame")

    def __len__(self):
        return len(self.cloud)


def fuse(clouds, rig, timestamp=0):
    """Bring each depth-frame cloud into the reference frame and concatenate.

    ``clouds`` maps camera id to a cloud in that sensor's depth frame.
    Output order is by camera id, then by point order within each cloud.
    """
    parts = []
    for cid in sorted(clouds):
        cam = rig.camera(cid, "depth")
        ref_from_cam = cam.pose.inverse("reference")
        c = clouds[cid]
        parts.append(PointCloud(ref_from_cam.apply(c.points), c.colors, "reference"))
    if parts:
        if any(p.colors is None for p in parts):
            parts = [PointCloud(p.points, p.colors if p.colors is not None
                                else np.zeros((len(p), 3), np.uint8), "reference") for p in parts]
        merged = PointCloud.concatenate(parts, "reference")
    else:
        merged = PointCloud.empty("reference")
    return FusedModel(merged, len(parts), timestamp)


def robust_extent(values, q=0.005, band=0.01):
    """Two face positions along one axis, robust to noise and stray points.

    Each end is the median of the points lying within ``band`` of the
    ``q`` / ``1 - q`` quantile, so a dense face is located at its center
    rather than at its noisy outer edge.
    """
    v = np.asarray(values, dtype=np.float64)
    lo_q, hi_q = np.quantile(v, [q, 1 - q])
    lo = np.median(v[v <= lo_q + band])
    hi = np.median(v[v >= hi_q - band])
    return lo, hi


def robust_box_dimensions(points, frame=None, q=0.005, band=0.01):
    """Box side lengths along the axes of ``frame`` (a Pose mapping points into the box frame)."""
    pts = np.asarray(points, dtype=np.float64)
    if frame is not None:
        pts = frame.apply(pts)
    dims = []
    for k in range(3):
        lo, hi = robust_extent(pts[:, k], q, band)
        dims.append(hi - lo)
    return np.array(dims)
