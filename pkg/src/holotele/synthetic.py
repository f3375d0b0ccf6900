"""Synthetic four-sensor rig, scenes and sequences for tests and demos.

World frame: z up, floor at z = 0. Sensors stand on a circle at 90 degree
spacing, 2 m above the floor, aimed at the scene center. The reference
frame of every calibration product is the depth camera of sensor 1.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numba
import numpy as np
from scipy.spatial.transform import Rotation

from .calibration import CalibrationSession, RigCalibration, save_calibration_clouds
from .camera_model import CameraParams, Intrinsics, normalized_to_pixels, project_points
from .errors import IoFailure
from .geometry import PointCloud, Pose, WandObservation
from .imageio import write_depth_mm, write_image, write_mask

# Kinect-class calibration values: (focal, skew, u0, v0, k1, k2, k3, p1, p2)
COLOR_INTRINSICS = [
    (1064.9131, 0.0979, 962.6340, 537.3419, 0.0145, -0.0035, 1.50e-04, -2.21e-06, -2.04e-04),
    (1064.4064, 0.3025, 969.4298, 556.0011, 0.0198, -0.0444, 4.81e-02, -3.52e-04, 1.25e-04),
    (1060.5403, 0.7103, 966.5805, 555.8031, 0.0218, -0.0419, 4.11e-02, 1.75e-03, 1.82e-03),
    (1064.1054, 1.1388, 962.1830, 555.7498, 0.0157, -0.2277, 8.23e-03, -7.47e-04, -7.84e-04),
]
DEPTH_INTRINSICS = [
    (365.0738, 0.0856, 255.2444, 215.5756, 0.0854, -0.2492, 0.0783, 1.41e-04, -2.81e-04),
    (364.0859, 0.0496, 256.8059, 215.3510, 0.1158, -0.3668, 0.2433, 6.30e-04, -1.85e-04),
    (363.2690, 0.2245, 258.4067, 216.8210, 0.1092, -0.3238, 0.1494, 1.11e-04, 1.29e-04),
    (365.5980, 0.0189, 254.9488, 215.8214, 0.0809, -0.2277, 0.0511, -2.48e-04, -1.81e-04),
]
COLOR_SIZE = (1920, 1080)
DEPTH_SIZE = (512, 424)

SENSOR_HEIGHT = 2.0
SENSOR_RADIUS = 2.5
# deviation from exact 90 degree spacing, degrees
SENSOR_YAW_JITTER = (0.0, 2.0, -1.5, 3.0)
AIM_POINT = np.array([0.0, 0.0, 0.9])
COLOR_BASELINE = 0.052
MAX_RANGE = 8.0
BACKGROUND_RGB = np.array([30.0, 30.0, 30.0])
WORLD_UP = np.array([0.0, 0.0, 1.0])


# ------------------------------------------------------------ meshes


@dataclass(frozen=True, eq=False)
class Mesh:
    triangles: np.ndarray  # (T, 3, 3)
    colors: np.ndarray  # (T, 3) RGB

    def transformed(self, R, t):
        return Mesh(self.triangles @ np.asarray(R).T + t, self.colors)

    @property
    def normals(self):
        n = np.cross(self.triangles[:, 1] - self.triangles[:, 0],
                     self.triangles[:, 2] - self.triangles[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def bounds(self):
        pts = self.triangles.reshape(-1, 3)
        return pts.min(axis=0), pts.max(axis=0)


FACE_COLORS = np.array([
    [200, 40, 40], [40, 180, 60], [40, 70, 200],
    [210, 190, 40], [190, 50, 190], [40, 190, 200],
], dtype=np.float64)


def box_mesh(size=(0.40, 0.30, 0.30)):
    """Axis-aligned box centered at the origin, one color per face."""
    hx, hy, hz = np.asarray(size, dtype=np.float64) / 2
    c = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    # corner index = 4*(sx>0) + 2*(sy>0) + (sz>0); faces wound outward
    quads = [
        (4, 6, 7, 5), (0, 1, 3, 2),  # +x, -x
        (2, 3, 7, 6), (0, 4, 5, 1),  # +y, -y
        (1, 5, 7, 3), (0, 2, 6, 4),  # +z, -z
    ]
    tris, cols = [], []
    for k, (a, b, cc, d) in enumerate(quads):
        tris += [c[[a, b, cc]], c[[a, cc, d]]]
        cols += [FACE_COLORS[k]] * 2
    return Mesh(np.array(tris), np.array(cols))


def cylinder_mesh(radius=0.25, height=1.6, segments=48, color=(200, 120, 40)):
    """Vertical cylinder standing on z = 0."""
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    return extrude_polygon(ring, height, color, axis="z")


def _ear_clip(poly):
    """Triangulate a simple counter-clockwise polygon; returns index triples."""
    idx = list(range(len(poly)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    guard = 0
    while len(idx) > 3 and guard < 10000:
        guard += 1
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = poly[i0], poly[i1], poly[i2]
            if cross(a, b, c) <= 1e-12:
                continue
            inside = False
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = poly[j]
                if cross(a, b, p) >= 0 and cross(b, c, p) >= 0 and cross(c, a, p) >= 0:
                    inside = True
                    break
            if not inside:
                tris.append((i0, i1, i2))
                idx.pop(k)
                break
        else:
            raise ValueError("polygon is not simple or not counter-clockwise")
    tris.append(tuple(idx))
    return tris


def extrude_polygon(poly, thickness, color, axis="y"):
    """Prism from a counter-clockwise 2D polygon.

    ``axis="y"``: polygon lies in the x-z plane and is extruded over
    ``y in [-thickness/2, thickness/2]`` (a silhouette). ``axis="z"``: polygon
    in the x-y plane extruded over ``z in [0, thickness]``.
    """
    poly = np.asarray(poly, dtype=np.float64)
    n = len(poly)
    if axis == "y":
        lo = np.column_stack([poly[:, 0], np.full(n, -thickness / 2), poly[:, 1]])
        hi = np.column_stack([poly[:, 0], np.full(n, thickness / 2), poly[:, 1]])
    else:
        lo = np.column_stack([poly[:, 0], poly[:, 1], np.zeros(n)])
        hi = np.column_stack([poly[:, 0], poly[:, 1], np.full(n, thickness)])
    tris = []
    for i0, i1, i2 in _ear_clip(poly):
        tris.append(hi[[i0, i1, i2]])
        tris.append(lo[[i0, i2, i1]])
    for i in range(n):
        j = (i + 1) % n
        tris.append(np.array([lo[i], lo[j], hi[j]]))
        tris.append(np.array([lo[i], hi[j], hi[i]]))
    tris = np.array(tris)
    cols = np.tile(np.asarray(color, dtype=np.float64), (len(tris), 1))
    return Mesh(tris, cols)


# counter-clockwise outline in (x, z): legs, torso, left arm raised, head
PERSON_OUTLINE = [
    (-0.20, 0.00), (-0.05, 0.00), (-0.03, 0.80), (0.03, 0.80), (0.05, 0.00),
    (0.20, 0.00), (0.18, 0.85), (0.22, 1.05), (0.45, 1.05), (0.45, 1.12),
    (0.22, 1.45), (0.08, 1.50), (0.10, 1.62), (0.06, 1.72), (-0.06, 1.72),
    (-0.10, 1.62), (-0.08, 1.50), (-0.22, 1.45), (-0.30, 1.80), (-0.38, 1.78),
    (-0.26, 1.30), (-0.22, 0.85),
]


def person_mesh(thickness=0.25):
    """Asymmetric humanoid silhouette extruded along y, colored by height band."""
    mesh = extrude_polygon(PERSON_OUTLINE, thickness, (0, 0, 0), axis="y")
    zc = mesh.triangles[:, :, 2].mean(axis=1)
    cols = np.where(zc[:, None] < 0.82, [[40, 60, 160]],
                    np.where(zc[:, None] < 1.5, [[200, 60, 50]], [[220, 180, 140]]))
    return Mesh(mesh.triangles, cols.astype(np.float64))


def make_object(kind):
    if kind == "box":
        return box_mesh().transformed(np.eye(3), [0, 0, 0.15])
    if kind == "cylinder":
        return cylinder_mesh()
    if kind == "person":
        return person_mesh()
    raise ValueError(f"unknown object kind {kind!r}")


# ------------------------------------------------------------ ray casting


@numba.njit(cache=True)
def _mt_kernel(origin, dirs, v0, e1, e2, best, tri):
    for r in range(dirs.shape[0]):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for t in range(v0.shape[0]):
            px = dy * e2[t, 2] - dz * e2[t, 1]
            py = dz * e2[t, 0] - dx * e2[t, 2]
            pz = dx * e2[t, 1] - dy * e2[t, 0]
            det = px * e1[t, 0] + py * e1[t, 1] + pz * e1[t, 2]
            if abs(det) <= 1e-12:
                continue
            inv = 1.0 / det
            tx = origin[0] - v0[t, 0]
            ty = origin[1] - v0[t, 1]
            tz = origin[2] - v0[t, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1[t, 2] - tz * e1[t, 1]
            qy = tz * e1[t, 0] - tx * e1[t, 2]
            qz = tx * e1[t, 1] - ty * e1[t, 0]
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            w = (e2[t, 0] * qx + e2[t, 1] * qy + e2[t, 2] * qz) * inv
            if w > 1e-9 and w < best[r]:
                best[r] = w
                tri[r] = t


def ray_mesh(origin, dirs, mesh):
    """Nearest hit parameter and triangle index per ray (Moller-Trumbore).

    Rays are ``origin + s * dirs``; misses get ``s = inf`` and index -1.
    Rays that miss the mesh's bounding sphere are skipped.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(dirs)
    best = np.full(n, np.inf)
    tri = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return best, tri
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2
    radius = np.linalg.norm(hi - lo) / 2 + 1e-9
    oc = origin - center
    dd = np.einsum("ij,ij->i", dirs, dirs)
    b = dirs @ oc
    disc = b * b - dd * (oc @ oc - radius * radius)
    cand = np.nonzero(disc >= 0)[0]
    if len(cand) == 0:
        return best, tri
    v0 = np.ascontiguousarray(mesh.triangles[:, 0])
    e1 = np.ascontiguousarray(mesh.triangles[:, 1] - v0)
    e2 = np.ascontiguousarray(mesh.triangles[:, 2] - v0)
    cb = np.full(len(cand), np.inf)
    ct = np.full(len(cand), -1, dtype=np.int64)
    _mt_kernel(np.asarray(origin, dtype=np.float64), dirs[cand], v0, e1, e2, cb, ct)
    best[cand] = cb
    tri[cand] = ct
    return best, tri


def ray_floor(origin, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -origin[2] / dirs[:, 2]
    return np.where((s > 1e-9) & np.isfinite(s), s, np.inf)


def max_valid_radius(intr, margin=0.2):
    """Largest undistorted radius where the radial model is still monotone (slope > margin)."""
    s = np.linspace(0.0, 4.0, 40001)
    slope = 1 + 3 * intr.k1 * s + 5 * intr.k2 * s ** 2 + 7 * intr.k3 * s ** 3
    bad = np.nonzero(slope <= margin)[0]
    return float(np.sqrt(s[bad[0] - 1])) if len(bad) else 2.0


@lru_cache(maxsize=32)
def _pixel_rays_cached(intr):
    from .camera_model import undistort_normalized

    w, h = intr.width, intr.height
    vv, uu = np.mgrid[0:h, 0:w]
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    yd = (uv[:, 1] - intr.v0) / intr.focal
    xd = (uv[:, 0] - intr.u0 - intr.skew * yd) / intr.focal
    xyd = np.stack([xd, yd], axis=1)
    rmax = max_valid_radius(intr)
    edge = normalized_to_pixels(intr, np.array([[rmax, 0.0]]))[0]
    rd_max = (edge[0] - intr.u0) / intr.focal
    valid = np.hypot(xd, yd) < 0.999 * rd_max
    xy = np.full_like(xyd, np.nan)
    if intr.has_distortion:
        xy[valid] = undistort_normalized(intr, xyd[valid])
    else:
        xy[valid] = xyd[valid]
    xy.setflags(write=False)
    valid.setflags(write=False)
    return xy, valid


def pixel_rays(intr):
    """Undistorted normalized coordinates of every pixel center (row-major) and a validity mask."""
    return _pixel_rays_cached(intr)


# ------------------------------------------------------------ rig


def _look_at(center, target, up=WORLD_UP):
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center, "camera")


def world_rig(color_scale=1.0):
    """Ground-truth cameras with camera-from-world poses, keyed by ``(id, kind)``."""
    cams = {}
    for k in range(4):
        yaw = np.deg2rad(90.0 * k + SENSOR_YAW_JITTER[k])
        center = np.array([SENSOR_RADIUS * np.cos(yaw), SENSOR_RADIUS * np.sin(yaw), SENSOR_HEIGHT])
        dpose = _look_at(center, AIM_POINT).with_frame(f"depth{k + 1}")
        di = Intrinsics(*DEPTH_INTRINSICS[k], width=DEPTH_SIZE[0], height=DEPTH_SIZE[1])
        cams[(k + 1, "depth")] = CameraParams(di, dpose, k + 1, "depth")
        # color camera: offset along the depth camera's x axis, slightly rotated
        small = Rotation.from_rotvec(np.deg2rad([0.3, -0.4, 0.2]) * (1 + 0.25 * k)).as_matrix()
        Rc = small @ dpose.rotation
        cc = center + dpose.rotation.T @ np.array([COLOR_BASELINE, 0.0, 0.0])
        cpose = Pose(Rc, -Rc @ cc, f"color{k + 1}")
        f, s, u0, v0, *dist = COLOR_INTRINSICS[k]
        w = int(round(COLOR_SIZE[0] * color_scale))
        h = int(round(COLOR_SIZE[1] * color_scale))
        ci = Intrinsics(f * color_scale, s * color_scale, u0 * color_scale, v0 * color_scale,
                        *dist, width=w, height=h)
        cams[(k + 1, "color")] = CameraParams(ci, cpose, k + 1, "color")
    return cams


def reference_from_world(world_cams, reference_camera_id=1):
    return world_cams[(reference_camera_id, "depth")].pose.with_frame("reference")


def truth_rig(world_cams, reference_camera_id=1):
    """Ground-truth :class:`RigCalibration` expressed against the reference depth camera."""
    ref_w = reference_from_world(world_cams, reference_camera_id)
    world_from_ref = ref_w.inverse("world")
    cams = []
    for (cid, kind), cam in sorted(world_cams.items()):
        if cid == reference_camera_id and kind == "depth":
            pose = Pose.identity(cam.pose.target_frame)
        else:
            pose = cam.pose.compose(world_from_ref).with_frame(cam.pose.target_frame)
        cams.append(CameraParams(cam.intrinsics, pose, cid, kind))
    return RigCalibration(cams, {}, reference_camera_id, created_at=0.0)


# ------------------------------------------------------------ scene


@dataclass
class SyntheticScene:
    """Parameters of a generated dataset. A fixed seed gives byte-identical output."""

    object: str = "box"
    marker_sigma: float = 0.0
    depth_sigma: float = 0.0
    pixel_sigma: float = 0.0
    intensity_sigma: float = 2.0
    seed: int = 0
    wand_frames: int = 100
    wand_length: float = 0.60
    wand_b_fraction: float = 0.5
    calib_points: int = 1500
    frames: int = 10
    color_scale: float = 1.0
    # object placement: rotation vector (rad) and translation (m) applied to the base mesh
    object_rotvec: tuple = (0.0, 0.0, 0.35)
    object_offset: tuple = (0.0, 0.0, 0.0)
    # per-frame motion: circle radius (m) traversed once over the sequence
    motion_radius: float = 0.0

    def __post_init__(self):
        for name in ("marker_sigma", "depth_sigma", "pixel_sigma", "intensity_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def object_mesh(scene, frame=0):
    base = make_object(scene.object)
    R = Rotation.from_rotvec(scene.object_rotvec).as_matrix()
    offset = np.asarray(scene.object_offset, dtype=np.float64)
    if scene.motion_radius > 0 and scene.frames > 1:
        phase = 2 * np.pi * frame / scene.frames
        offset = offset + scene.motion_radius * np.array([np.cos(phase), np.sin(phase), 0.0])
    return base.transformed(R, offset)


def _camera_rays_world(cam):
    """Origin and world-frame ray directions (z_cam = 1 scaling) for every pixel."""
    xy, valid = pixel_rays(cam.intrinsics)
    d_cam = np.column_stack([xy, np.ones(len(xy))])
    R = cam.pose.rotation
    origin = -R.T @ cam.pose.translation
    return origin, d_cam @ R, valid


def cast_camera(cam, mesh, floor=True):
    """Per-pixel camera-frame depth, hit class (0 miss, 1 floor, 2 object) and triangle index."""
    origin, dirs, valid = _camera_rays_world(cam)
    n = len(dirs)
    s = np.full(n, np.inf)
    cls = np.zeros(n, dtype=np.uint8)
    tri = np.full(n, -1, dtype=np.int64)
    idx = np.nonzero(valid)[0]
    if floor:
        sf = ray_floor(origin, dirs[idx])
        s[idx] = sf
        cls[idx[np.isfinite(sf)]] = 1
    if mesh is not None:
        so, to = ray_mesh(origin, dirs[idx], mesh)
        closer = so < s[idx]
        s[idx[closer]] = so[closer]
        cls[idx[closer]] = 2
        tri[idx[closer]] = to[closer]
    far = s > MAX_RANGE
    s[far] = np.inf
    cls[far] = 0
    h, w = cam.intrinsics.height, cam.intrinsics.width
    depth = np.where(np.isfinite(s), s, 0.0).reshape(h, w)
    return depth, cls.reshape(h, w), tri.reshape(h, w), origin, dirs


def render_depth(cam, mesh, rng=None, sigma=0.0, floor=True):
    """Float depth image (meters, 0 = invalid) and object mask for one depth camera."""
    depth, cls, _, _, _ = cast_camera(cam, mesh, floor)
    if sigma > 0 and rng is not None:
        noise = rng.normal(0.0, sigma, depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-4), 0.0)
    return depth, cls == 2


def render_color(cam, mesh, rng=None, sigma=0.0, floor=True):
    """Shaded RGB image and object mask for one color camera."""
    depth, cls, tri, origin, dirs = cast_camera(cam, mesh, floor)
    h, w = depth.shape
    rgb = np.tile(BACKGROUND_RGB, (h * w, 1))
    flat = cls.ravel()
    fl = np.nonzero(flat == 1)[0]
    if len(fl):
        p = origin + dirs[fl] * depth.ravel()[fl, None]
        checker = (np.floor(p[:, 0] / 0.25) + np.floor(p[:, 1] / 0.25)).astype(np.int64) % 2
        rgb[fl] = np.where(checker[:, None] == 1, [[120, 120, 110]], [[80, 85, 90]])
    ob = np.nonzero(flat == 2)[0]
    if len(ob):
        t = tri.ravel()[ob]
        light = np.array([0.3, -0.5, 0.8])
        light /= np.linalg.norm(light)
        shade = 0.65 + 0.35 * np.abs(mesh.normals[t] @ light)
        rgb[ob] = mesh.colors[t] * shade[:, None]
    if sigma > 0 and rng is not None:
        rgb = rgb + rng.normal(0.0, sigma, rgb.shape)
    img = np.clip(np.rint(rgb), 0, 255).astype(np.uint8).reshape(h, w, 3)
    return img, cls == 2


# ------------------------------------------------------------ calibration data


def wand_session(scene, world_cams, rng, reference_camera_id=1):
    """Noisy wand sightings by every depth camera, in each camera's frame."""
    obs = {cid: [] for (cid, kind) in world_cams if kind == "depth"}
    L = scene.wand_length
    for f in range(scene.wand_frames):
        center = rng.uniform([-0.5, -0.5, 0.6], [0.5, 0.5, 1.6])
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        a = center - 0.5 * L * d
        c = center + 0.5 * L * d
        b = a + scene.wand_b_fraction * (c - a)
        markers = np.stack([a, b, c])
        for cid in sorted(obs):
            cam = world_cams[(cid, "depth")]
            uv, z = project_points(cam, markers)
            w, h = cam.intrinsics.image_size
            if np.any(z <= 0) or np.any((uv < 0) | (uv > [w - 1, h - 1])):
                continue
            local = cam.pose.apply(markers)
            if scene.marker_sigma > 0:
                local = local + rng.normal(0.0, scene.marker_sigma, local.shape)
            obs[cid].append(WandObservation(local[0], local[1], local[2], cid, f))
    return CalibrationSession(obs, reference_camera_id, scene.wand_length)


def calibration_clouds(scene, world_cams, rng):
    """Feature points seen by each sensor, with the pixels that observed them.

    Returns ``(clouds, pixels)`` in the format :func:`calibrate_rig` expects:
    clouds in each depth camera's frame (depth noise along the ray) and
    ``pixels[(id, kind)]`` aligned with them (NaN where unseen).
    """
    pts = rng.uniform([-1.2, -1.2, 0.05], [1.2, 1.2, 2.0], size=(scene.calib_points, 3))
    clouds, pixels = {}, {}
    for cid in sorted({c for c, _ in world_cams}):
        dcam = world_cams[(cid, "depth")]
        ccam = world_cams[(cid, "color")]
        seen = _visible(dcam, pts)
        P = pts[seen]
        local = dcam.pose.apply(P)
        if scene.depth_sigma > 0:
            local = local * (1.0 + rng.normal(0.0, scene.depth_sigma, len(local)) / local[:, 2])[:, None]
        duv, _ = project_points(dcam, P)
        cuv, _ = project_points(ccam, P)
        cuv[~_visible(ccam, P)] = np.nan
        if scene.pixel_sigma > 0:
            duv = duv + rng.normal(0.0, scene.pixel_sigma, duv.shape)
            cuv = cuv + rng.normal(0.0, scene.pixel_sigma, cuv.shape)
        clouds[cid] = PointCloud(local, None, f"depth{cid}")
        pixels[(cid, "depth")] = duv
        pixels[(cid, "color")] = cuv
    return clouds, pixels


def _visible(cam, pts, min_depth=0.3):
    intr = cam.intrinsics
    Xc = cam.pose.apply(pts)
    z = Xc[:, 2]
    ok = z > min_depth
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.hypot(Xc[:, 0] / z, Xc[:, 1] / z)
    ok &= r < max_valid_radius(intr)
    uv, _ = project_points(cam, pts)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height - 1)
    return ok


@dataclass
class SyntheticData:
    scene: SyntheticScene
    world_cams: dict
    truth: RigCalibration
    session: CalibrationSession
    clouds: dict
    pixels: dict
    world_from_reference: Pose = field(default=None)

    @property
    def up_axis(self):
        """World up direction expressed in the reference frame."""
        return self.world_from_reference.rotation.T @ WORLD_UP

    @property
    def look_at(self):
        return self.world_from_reference.inverse("reference").apply(AIM_POINT)[0]

    def to_reference(self, world_points):
        return self.world_from_reference.inverse("reference").apply(world_points)


def make_dataset(scene):
    """Ground truth plus calibration inputs; all randomness comes from ``scene.seed``."""
    rng = np.random.default_rng(scene.seed)
    cams = world_rig(scene.color_scale)
    session = wand_session(scene, cams, rng)
    clouds, pixels = calibration_clouds(scene, cams, rng)
    truth = truth_rig(cams)
    wfr = reference_from_world(cams).inverse("world")
    return SyntheticData(scene, cams, truth, session, clouds, pixels, wfr)


def sequence_frames(data, rng, frame):
    """Depth (meters), color and object masks for every sensor at one frame index."""
    mesh = object_mesh(data.scene, frame)
    out = {}
    for cid in data.truth.camera_ids:
        depth, dmask = render_depth(data.world_cams[(cid, "depth")], mesh, rng, data.scene.depth_sigma)
        color, cmask = render_color(data.world_cams[(cid, "color")], mesh, rng, data.scene.intensity_sigma)
        out[cid] = {"depth": depth, "mask": dmask, "color": color, "color_mask": cmask}
    return out


def gen_synthetic(scene, out_dir):
    """Write a complete dataset tree to ``out_dir``.

    Layout::

        wand.csv                     frame,camera_id,marker,x,y,z
        calib_clouds/cloud_<id>.ply  calibration clouds with pixel extras
        truth.calib.json             ground-truth rig (reference = depth camera 1)
        scene.json                   parameters, reference-frame up axis and look-at
        seq/rig.calib.json           copy of the ground truth for the nodes
        seq/cam<id>/depth/NNNNNN.png 16-bit millimeters
        seq/cam<id>/color/NNNNNN.png
        seq/cam<id>/mask/NNNNNN.png  ground-truth object mask at depth resolution
        seq/cam<id>/color_mask/NNNNNN.png
        seq/cam<id>/background.png   empty-scene color plate
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    data = make_dataset(scene)
    data.session.to_csv(out / "wand.csv")
    sizes = {kind: data.world_cams[(1, kind)].intrinsics.image_size for kind in ("depth", "color")}
    save_calibration_clouds(out / "calib_clouds", data.clouds, data.pixels, sizes)
    data.truth.save(out / "truth.calib.json")
    meta = {
        "scene": asdict(scene),
        "world_from_reference": {
            "rotation": data.world_from_reference.rotation.ravel().tolist(),
            "translation": data.world_from_reference.translation.tolist(),
        },
        "up_axis": data.up_axis.tolist(),
        "look_at": data.look_at.tolist(),
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2))

    seq = out / "seq"
    seq.mkdir(exist_ok=True)
    data.truth.save(seq / "rig.calib.json")
    rng = np.random.default_rng([scene.seed, 1])
    for cid in data.truth.camera_ids:
        ccam = data.world_cams[(cid, "color")]
        plate, _ = render_color(ccam, None, rng, scene.intensity_sigma)
        cdir = seq / f"cam{cid}"
        for sub in ("depth", "color", "mask", "color_mask"):
            (cdir / sub).mkdir(parents=True, exist_ok=True)
        write_image(cdir / "background.png", plate)
    for f in range(scene.frames):
        frames = sequence_frames(data, rng, f)
        for cid, fr in frames.items():
            cdir = seq / f"cam{cid}"
            write_depth_mm(cdir / "depth" / f"{f:06d}.png", fr["depth"])
            write_image(cdir / "color" / f"{f:06d}.png", fr["color"])
            write_mask(cdir / "mask" / f"{f:06d}.png", fr["mask"])
            write_mask(cdir / "color_mask" / f"{f:06d}.png", fr["color_mask"])
    return data
