"""Rig calibration: wand alignment, ICP refinement, correspondence gathering, LM.

Pose conventions
----------------
``align_extrinsics`` and ``refine_alignment_icp`` return, per depth camera,
the pose mapping that camera's points into the reference frame (the depth
camera of the reference sensor). :class:`~holotele.camera_model.CameraParams`
stores the opposite direction (camera-from-reference), which is what
projection needs.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .camera_model import (
    CameraParams,
    Intrinsics,
    LmOptions,
    estimate_intrinsics_dlt,
    levenberg_marquardt,
)
from .errors import (
    CalibrationError,
    HoloteleError,
    InsufficientSharedFrames,
    InvalidCalibrationFile,
    IoFailure,
)
from .geometry import IcpParams, Pose, WandObservation, icp, nearest_neighbors
from .plyio import read_ply, write_ply

log = logging.getLogger(__name__)

CALIB_VERSION = 1
KINDS = ("depth", "color")
DEFAULT_IMAGE_SIZES = {"depth": (512, 424), "color": (1920, 1080)}
MARKERS = ("A", "B", "C")


@dataclass
class CalibrationSession:
    """Wand observations per depth camera, keyed by frame index."""

    observations: dict = field(default_factory=dict)
    reference_camera_id: int = 1
    wand_length: float = 0.60
    # max point-to-line / length deviation accepted for a wand sighting; None disables
    wand_tol: float | None = 0.005

    def __post_init__(self):
        if self.reference_camera_id not in self.observations:
            raise ValueError(f"reference camera {self.reference_camera_id} has no observations")
        obs = {}
        for cam, items in self.observations.items():
            if isinstance(items, dict):
                items = items.values()
            obs[int(cam)] = {o.frame_index: o for o in items}
        self.observations = obs

    @property
    def camera_ids(self):
        return sorted(self.observations)

    def usable(self, camera_id):
        """Frame index -> observation, with sightings that break the wand invariants removed."""
        frames = self.observations.get(camera_id, {})
        if self.wand_tol is None:
            return dict(frames)
        return {f: o for f, o in frames.items() if o.is_valid(self.wand_length, self.wand_tol)}

    def shared_frames(self, camera_id):
        ref = self.usable(self.reference_camera_id)
        other = self.usable(camera_id)
        return sorted(set(ref) & set(other))

    def first_frames(self, n):
        """Session restricted to the ``n`` lowest frame indices."""
        all_frames = sorted({f for frames in self.observations.values() for f in frames})
        keep = set(all_frames[:n])
        obs = {c: [o for f, o in frames.items() if f in keep] for c, frames in self.observations.items()}
        return CalibrationSession(obs, self.reference_camera_id, self.wand_length, self.wand_tol)

    @classmethod
    def from_csv(cls, path, reference_camera_id=1, wand_length=0.60, wand_tol=0.005):
        rows = {}
        try:
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    key = (int(row["frame"]), int(row["camera_id"]))
                    marker = row["marker"].strip().upper()
                    if marker not in MARKERS:
                        raise ValueError(f"unknown marker label {row['marker']!r}")
                    rows.setdefault(key, {})[marker] = [float(row[c]) for c in ("x", "y", "z")]
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        obs = {}
        for (frame, cam), markers in sorted(rows.items()):
            if set(markers) != set(MARKERS):
                log.warning("frame %d camera %d lacks markers %s; skipped", frame, cam,
                            sorted(set(MARKERS) - set(markers)))
                continue
            obs.setdefault(cam, []).append(
                WandObservation(markers["A"], markers["B"], markers["C"], cam, frame)
            )
        return cls(obs, reference_camera_id, wand_length, wand_tol)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "camera_id", "marker", "x", "y", "z"])
            for cam in self.camera_ids:
                for frame in sorted(self.observations[cam]):
                    o = self.observations[cam][frame]
                    for label, p in zip(MARKERS, (o.a, o.b, o.c)):
                        w.writerow([frame, cam, label] + [repr(float(v)) for v in p])


@dataclass
class RigCalibration:
    """Calibrated color and depth cameras of every sensor."""

    cameras: list
    rmse: dict = field(default_factory=dict)
    reference_camera_id: int = 1
    created_at: float = field(default_factory=time.time)

    def __post_init__(self):
        ref = self._lookup(self.reference_camera_id, "depth")
        if ref is not None:
            if not (np.array_equal(ref.pose.rotation, np.eye(3))
                    and np.array_equal(ref.pose.translation, np.zeros(3))):
                raise ValueError("reference depth camera pose must be the identity")

    def _lookup(self, camera_id, kind):
        for cam in self.cameras:
            if cam.camera_id == camera_id and cam.kind == kind:
                return cam
        return None

    def camera(self, camera_id, kind="depth"):
        from .errors import UnknownCamera

        cam = self._lookup(camera_id, kind)
        if cam is None:
            raise UnknownCamera(f"no {kind} camera with id {camera_id} in the rig")
        return cam

    @property
    def camera_ids(self):
        return sorted({c.camera_id for c in self.cameras})

    def to_dict(self):
        cams = []
        for cam in sorted(self.cameras, key=lambda c: (c.camera_id, c.kind)):
            i = cam.intrinsics
            cams.append({
                "id": cam.camera_id,
                "kind": cam.kind,
                "focal": i.focal, "skew": i.skew, "u0": i.u0, "v0": i.v0,
                "k1": i.k1, "k2": i.k2, "k3": i.k3, "p1": i.p1, "p2": i.p2,
                "width": i.width, "height": i.height,
                "rotation": [float(v) for v in cam.pose.rotation.ravel()],
                "translation": [float(v) for v in cam.pose.translation],
                "rmse": self.rmse.get(cam.key),
            })
        return {
            "version": CALIB_VERSION,
            "reference_camera": self.reference_camera_id,
            "created_at": self.created_at,
            "cameras": cams,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            if data.get("version") != CALIB_VERSION:
                raise InvalidCalibrationFile(f"unsupported calibration version {data.get('version')!r}")
            cams, rmse = [], {}
            for c in data["cameras"]:
                intr = Intrinsics(**{k: c[k] for k in (
                    "focal", "skew", "u0", "v0", "k1", "k2", "k3", "p1", "p2", "width", "height")})
                if len(c["rotation"]) != 9 or len(c["translation"]) != 3:
                    raise InvalidCalibrationFile("rotation must have 9 and translation 3 entries")
                pose = Pose(np.reshape(c["rotation"], (3, 3)), c["translation"],
                            target_frame=f"{c['kind']}{c['id']}")
                cam = CameraParams(intr, pose, int(c["id"]), c["kind"])
                cams.append(cam)
                if c.get("rmse") is not None:
                    rmse[cam.key] = c["rmse"]
            return cls(cams, rmse, int(data["reference_camera"]), data.get("created_at", 0.0))
        except InvalidCalibrationFile:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidCalibrationFile(str(exc)) from exc

    def save(self, path):
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2))
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidCalibrationFile(f"{path}: {exc}") from exc
        return cls.from_dict(data)


# ------------------------------------------------------------ stages


def align_extrinsics(session, min_shared=3):
    """Wand-based pose of every depth camera relative to the reference camera.

    Markers of co-observed frames are stacked (A, B, C per frame) and
    aligned in closed form. Returns ``{camera_id: Pose}`` mapping camera
    points into the reference frame; the reference maps to the identity.
    """
    from .geometry import estimate_rigid_transform

    ref_id = session.reference_camera_id
    ref = session.usable(ref_id)
    poses = {ref_id: Pose.identity("reference")}
    for cam in session.camera_ids:
        if cam == ref_id:
            continue
        shared = session.shared_frames(cam)
        if len(shared) < min_shared:
            raise InsufficientSharedFrames(cam, len(shared), min_shared)
        other = session.usable(cam)
        src = np.concatenate([other[f].markers for f in shared])
        dst = np.concatenate([ref[f].markers for f in shared])
        try:
            poses[cam] = estimate_rigid_transform(src, dst, "reference")
        except HoloteleError as exc:
            raise CalibrationError(cam, "align_extrinsics", exc) from exc
    return poses


def refine_alignment_icp(poses, clouds, reference_camera_id=1, params=IcpParams(max_dist=0.05)):
    """ICP-refine each non-reference pose against the reference cloud."""
    ref_cloud = clouds[reference_camera_id]
    refined = {reference_camera_id: poses[reference_camera_id]}
    for cam in sorted(poses):
        if cam == reference_camera_id:
            continue
        res = icp(clouds[cam].points, ref_cloud.points, poses[cam], params)
        log.debug("camera %d ICP rmse %.6g m after %d iterations", cam, res.rmse, res.n_iter)
        refined[cam] = res.pose.with_frame("reference")
    return refined


def gather_correspondences(poses, clouds, pixels, reference_camera_id=1, max_dist=0.01):
    """Reference-frame 3D points paired with the pixels that observed them.

    ``pixels[(camera_id, kind)]`` is an ``(N, 2)`` array aligned with
    ``clouds[camera_id]`` (NaN where the point was not seen by that camera).
    For a non-reference sensor, each of its points whose aligned nearest
    neighbour in the reference cloud lies within ``max_dist`` contributes
    ``(reference point, own pixel)``. The reference sensor's own points are
    already in the reference frame and contribute directly.

    Returns ``{(camera_id, kind): (world (M, 3), pixels (M, 2))}``.
    """
    ref_pts = clouds[reference_camera_id].points
    out = {}
    for (cam, kind), pix in sorted(pixels.items()):
        pix = np.asarray(pix, dtype=np.float64)
        if cam == reference_camera_id:
            world, uv = ref_pts, pix
        else:
            if cam not in poses:
                continue
            moved = poses[cam].apply(clouds[cam].points)
            pairs = nearest_neighbors(moved, ref_pts, max_dist)
            world, uv = ref_pts[pairs[:, 1]], pix[pairs[:, 0]]
        seen = np.all(np.isfinite(uv), axis=1)
        out[(cam, kind)] = (world[seen], uv[seen])
    return out


def calibrate_rig(session, clouds, pixels, initial=None, image_sizes=None,
                  icp_params=IcpParams(max_dist=0.05), match_dist=0.01,
                  lm_options=LmOptions()):
    """Full pipeline: wand alignment, ICP, correspondences, DLT, per-camera LM.

    ``initial`` optionally maps ``(camera_id, kind)`` to intrinsics that
    replace the DLT initial guess. The reference depth camera keeps an
    identity pose; its intrinsics are still refined.
    """
    ref_id = session.reference_camera_id
    image_sizes = {**DEFAULT_IMAGE_SIZES, **(image_sizes or {})}
    initial = initial or {}
    poses = align_extrinsics(session)
    poses = refine_alignment_icp(poses, clouds, ref_id, icp_params)
    corr = gather_correspondences(poses, clouds, pixels, ref_id, match_dist)

    cameras, rmse = [], {}
    for (cam, kind), (world, uv) in sorted(corr.items()):
        is_ref = cam == ref_id and kind == "depth"
        try:
            intr, pose = estimate_intrinsics_dlt((world, uv), image_sizes[kind], cam, kind)
            if (cam, kind) in initial:
                intr = initial[(cam, kind)]
            if kind == "depth" and cam in poses:
                pose = poses[cam].inverse(f"depth{cam}")
            if is_ref:
                pose = Pose.identity("depth%d" % cam)
            opts = lm_options
            if is_ref and not opts.freeze_pose:
                opts = LmOptions(**{**opts.__dict__, "freeze_pose": True})
            res = levenberg_marquardt(CameraParams(intr, pose, cam, kind), (world, uv), opts)
        except HoloteleError as exc:
            raise CalibrationError((cam, kind), "intrinsics", exc) from exc
        params = res.params
        if is_ref:
            params = params.with_pose(Pose.identity(f"depth{cam}"))
        cameras.append(params)
        rmse[(cam, kind)] = res.rmse
        log.info("camera %d %s: %d observations, rmse %.4g px", cam, kind, len(world), res.rmse)
    return RigCalibration(cameras, rmse, ref_id)


def extrinsic_errors(rig, truth):
    """``{(id, kind): (rotation error rad, translation error m)}`` against a ground-truth rig."""
    from .geometry import rotation_error

    out = {}
    for cam in rig.cameras:
        t = truth.camera(cam.camera_id, cam.kind)
        out[cam.key] = (
            rotation_error(cam.pose.rotation, t.pose.rotation),
            float(np.linalg.norm(cam.pose.translation - t.pose.translation)),
        )
    return out


# ------------------------------------------------------------ calibration cloud files


def save_calibration_clouds(directory, clouds, pixels, image_sizes=None):
    """One ``cloud_<id>.ply`` per sensor with per-point pixel coordinates as extra properties.

    ``image_sizes`` (``{"depth": (w, h), "color": (w, h)}``) goes to
    ``image_sizes.json`` beside the clouds.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if image_sizes:
        (directory / "image_sizes.json").write_text(
            json.dumps({k: list(v) for k, v in image_sizes.items()}, sort_keys=True))
    for cam, cloud in sorted(clouds.items()):
        extras = {}
        for kind in KINDS:
            if (cam, kind) in pixels:
                uv = np.asarray(pixels[(cam, kind)])
                extras[f"{kind}_u"] = uv[:, 0]
                extras[f"{kind}_v"] = uv[:, 1]
        write_ply(directory / f"cloud_{cam}.ply", cloud, extras, precision="double")


def load_calibration_clouds(directory):
    directory = Path(directory)
    clouds, pixels = {}, {}
    files = sorted(directory.glob("cloud_*.ply"))
    if not files:
        raise IoFailure(f"no cloud_<id>.ply files in {directory}")
    for path in files:
        cam = int(path.stem.split("_", 1)[1])
        cloud, extras = read_ply(path, with_extras=True)
        clouds[cam] = cloud
        for kind in KINDS:
            if f"{kind}_u" in extras:
                pixels[(cam, kind)] = np.stack([extras[f"{kind}_u"], extras[f"{kind}_v"]], axis=1)
    return clouds, pixels


def load_image_sizes(directory):
    """Image sizes stored by :func:`save_calibration_clouds`, or ``None``."""
    path = Path(directory) / "image_sizes.json"
    if not path.exists():
        return None
    return {k: tuple(int(x) for x in v) for k, v in json.loads(path.read_text()).items()}


class RigCalibrator(BaseEstimator):
    """Estimator wrapper around :func:`calibrate_rig`.

    ``fit(session, clouds=..., pixels=...)`` stores the result in
    ``calibration_``.
    """

    def __init__(self, icp_max_dist=0.05, icp_max_iters=50, match_dist=0.01,
                 lm_max_iters=200, image_sizes=None):
        self.icp_max_dist = icp_max_dist
        self.icp_max_iters = icp_max_iters
        self.match_dist = match_dist
        self.lm_max_iters = lm_max_iters
        self.image_sizes = image_sizes

    def fit(self, session, clouds, pixels, initial=None):
        self.calibration_ = calibrate_rig(
            session, clouds, pixels, initial=initial, image_sizes=self.image_sizes,
            icp_params=IcpParams(max_dist=self.icp_max_dist, max_iters=self.icp_max_iters),
            match_dist=self.match_dist,
            lm_options=LmOptions(max_iters=self.lm_max_iters),
        )
        return self

    @property
    def rmse_(self):
        check_is_fitted(self, "calibration_")
        return dict(self.calibration_.rmse)
