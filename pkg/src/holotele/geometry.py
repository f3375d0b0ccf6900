"""Rigid 3D geometry: poses, colored point clouds and point-set registration.

Points are carried as ``(N, 3)`` float64 arrays in meters. A :class:`Pose`
maps coordinates from a source frame into ``target_frame``::

    p_target = rotation @ p_source + translation
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DegenerateInput, NoCorrespondences

ORTHO_TOL = 1e-9
# brute-force search below this many target points, k-d tree above
KDTREE_MIN_POINTS = 5000


def as_points(x, name="points"):
    """Coerce ``x`` (PointCloud, sequence of triples or array) to ``(N, 3)`` float64."""
    if isinstance(x, PointCloud):
        return x.points
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr[None, :]
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t`` into ``target_frame``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target_frame: str = "reference"

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, target_frame="reference"):
        return cls(np.eye(3), np.zeros(3), target_frame)

    @classmethod
    def from_matrix(cls, T, target_frame="reference"):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3], target_frame)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self, target_frame="camera"):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, target_frame)

    def compose(self, other):
        """Return ``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.target_frame,
        )

    __matmul__ = compose

    def apply(self, points):
        pts = as_points(points)
        return pts @ self.rotation.T + self.translation

    def with_frame(self, target_frame):
        return Pose(self.rotation, self.translation, target_frame)

    def __repr__(self):
        return (
            f"Pose(rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()}, target_frame={self.target_frame!r})"
        )


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Colored points expressed in ``frame_id``."""

    points: np.ndarray
    colors: np.ndarray | None = None
    frame_id: str = "camera"

    def __post_init__(self):
        pts = as_points(self.points)
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors)
            if cols.size == 0:
                cols = cols.reshape(0, 3)
            if cols.shape != pts.shape:
                raise ValueError(
                    f"colors shape {cols.shape} does not match points shape {pts.shape}"
                )
            if np.any(cols < 0) or np.any(cols > 255):
                raise ValueError("colors must lie in [0, 255]")
            object.__setattr__(self, "colors", cols.astype(np.uint8))

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, frame_id="camera", colored=True):
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if colored else None, frame_id
        )

    def subset(self, index):
        cols = None if self.colors is None else self.colors[index]
        return PointCloud(self.points[index], cols, self.frame_id)

    @staticmethod
    def concatenate(clouds, frame_id):
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty(frame_id)
        pts = np.concatenate([c.points for c in clouds])
        if all(c.colors is not None for c in clouds):
            cols = np.concatenate([c.colors for c in clouds])
        else:
            cols = None
        return PointCloud(pts, cols, frame_id)


@dataclass(frozen=True, eq=False)
class WandObservation:
    """The three collinear wand markers A', B', C' seen by one depth camera in one frame."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    camera_id: int
    frame_index: int

    def __post_init__(self):
        for name in ("a", "b", "c"):
            p = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(p)):
                raise ValueError(f"marker {name.upper()} is not finite")
            object.__setattr__(self, name, p)

    @property
    def markers(self):
        return np.stack([self.a, self.b, self.c])

    def collinearity_error(self):
        """Largest distance of a marker from the best-fit line through all three."""
        m = self.markers
        centered = m - m.mean(axis=0)
        _, _, vt = np.linalg.svd(centered)
        d = vt[0]
        resid = centered - np.outer(centered @ d, d)
        return float(np.max(np.linalg.norm(resid, axis=1)))

    def length_error(self, wand_length=0.60):
        return float(abs(np.linalg.norm(self.a - self.c) - wand_length))

    def is_valid(self, wand_length=0.60, tol=0.005):
        return self.collinearity_error() <= tol and self.length_error(wand_length) <= tol


def rotation_angle(R):
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_error(R_est, R_true):
    return rotation_angle(np.asarray(R_est).T @ np.asarray(R_true))


def estimate_rigid_transform(src, dst, target_frame="reference"):
    """Least-squares rotation and translation taking ``src`` onto ``dst``.

    Closed-form SVD solution of the centered cross-covariance with a
    reflection correction so that ``det(R) = +1``. Correspondences are
    index-aligned.
    """
    src = as_points(src, "src")
    dst = as_points(dst, "dst")
    if src.shape != dst.shape:
        raise ValueError(f"src {src.shape} and dst {dst.shape} differ in shape")
    if len(src) < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    A = src - mu_s
    B = dst - mu_d
    for name, X in (("src", A), ("dst", B)):
        s = np.linalg.svd(X, compute_uv=False)
        if s[0] == 0.0 or s[1] <= 1e-9 * s[0]:
            raise DegenerateInput(f"{name} points are collinear or coincident")
    H = A.T @ B
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    # re-orthonormalise against accumulated rounding
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = mu_d - R @ mu_s
    return Pose(R, t, target_frame)


def apply_pose(pose, cloud):
    """Transform every point of ``cloud`` by ``pose``; colors and order are kept."""
    return PointCloud(pose.apply(cloud.points), cloud.colors, pose.target_frame)


def _nearest_bruteforce(query, target, chunk=256):
    n = len(query)
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for start in range(0, n, chunk):
        q = query[start:start + chunk]
        d2 = np.sum((q[:, None, :] - target[None, :, :]) ** 2, axis=2)
        j = np.argmin(d2, axis=1)  # first occurrence -> lowest index on ties
        idx[start:start + chunk] = j
        dist[start:start + chunk] = np.sqrt(d2[np.arange(len(q)), j])
    return idx, dist


def _nearest_kdtree(query, target, tree=None):
    tree = cKDTree(target) if tree is None else tree
    k = min(2, len(target))
    _, jj = tree.query(query, k=k)
    jj = jj.reshape(len(query), k)
    # recompute distances exactly like the brute-force path
    d2 = np.sum((query[:, None, :] - target[jj]) ** 2, axis=2)
    best = np.argmin(d2, axis=1)
    idx = jj[np.arange(len(query)), best]
    dmin = d2[np.arange(len(query)), best]
    if k == 2:
        tied = np.nonzero(d2[:, 0] == d2[:, 1])[0]
        for i in tied:
            cand = np.asarray(tree.query_ball_point(query[i], np.sqrt(dmin[i]) * (1 + 1e-12)))
            cd2 = np.sum((target[cand] - query[i]) ** 2, axis=1)
            cand = cand[cd2 == cd2.min()]
            idx[i] = cand.min()
            dmin[i] = cd2.min()
    return idx, np.sqrt(dmin)


def nearest(query, target):
    """Nearest target index and distance for every query point (ties -> lowest index)."""
    query = as_points(query, "query")
    target = as_points(target, "target")
    if len(target) == 0:
        raise ValueError("target cloud is empty")
    if len(query) == 0:
        return np.zeros(0, np.int64), np.zeros(0)
    if len(target) > KDTREE_MIN_POINTS:
        return _nearest_kdtree(query, target)
    return _nearest_bruteforce(query, target)


def nearest_neighbors(query, target, max_dist):
    """``(query_idx, target_idx)`` pairs whose nearest-neighbor distance is ``<= max_dist``."""
    idx, dist = nearest(query, target)
    keep = np.nonzero(dist <= max_dist)[0]
    return np.stack([keep, idx[keep]], axis=1).astype(np.int64)


@dataclass(frozen=True)
class IcpParams:
    max_dist: float = 0.05
    tol: float = 1e-6
    max_iters: int = 50


class IcpResult(NamedTuple):
    pose: Pose
    rmse: float
    history: list
    n_iter: int


def _gated_rmse(moved, target, max_dist):
    idx, dist = nearest(moved, target)
    keep = dist <= max_dist
    if not np.any(keep):
        return None, None, None
    return float(np.sqrt(np.mean(dist[keep] ** 2))), np.nonzero(keep)[0], idx[keep]


def icp(src, dst, init=None, params=IcpParams()):
    """Point-to-point ICP with hard, distance-gated correspondences.

    Iterates are accepted only while the gated RMSE does not increase, so the
    returned ``history`` is non-increasing and its last entry is the result.
    """
    src = as_points(src, "src")
    dst = as_points(dst, "dst")
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("ICP needs two nonempty clouds")
    pose = Pose.identity() if init is None else init
    rmse, qi, ti = _gated_rmse(pose.apply(src), dst, params.max_dist)
    if rmse is None:
        raise NoCorrespondences(f"no pairs within {params.max_dist} m under the initial pose")
    history = [rmse]
    n_iter = 0
    for n_iter in range(1, params.max_iters + 1):
        moved = pose.apply(src)
        try:
            delta = estimate_rigid_transform(moved[qi], dst[ti])
        except DegenerateInput:
            break
        candidate = delta.compose(pose).with_frame(pose.target_frame)
        new_rmse, new_qi, new_ti = _gated_rmse(candidate.apply(src), dst, params.max_dist)
        if new_rmse is None or new_rmse > rmse:
            break
        improvement = rmse - new_rmse
        pose, rmse, qi, ti = candidate, new_rmse, new_qi, new_ti
        history.append(rmse)
        if improvement < params.tol:
            break
    return IcpResult(pose, rmse, history, n_iter)


def icp_refine(src, dst, init, params=IcpParams()):
    """Refine ``init`` (src -> dst frame) by ICP; returns ``(pose, rmse)``."""
    res = icp(src, dst, init, params)
    return res.pose, res.rmse


class RigidRegistration(TransformerMixin, BaseEstimator):
    """Closed-form rigid fit of index-aligned point pairs.

    ``fit(X, y)`` estimates the pose taking rows of ``X`` onto rows of ``y``;
    ``transform`` applies it to new points.
    """

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        self.pose_ = estimate_rigid_transform(X, y)
        self.rmse_ = float(np.sqrt(np.mean(np.sum((self.pose_.apply(X) - y) ** 2, axis=1))))
        return self

    def transform(self, X):
        check_is_fitted(self, "pose_")
        return self.pose_.apply(check_array(X, dtype=np.float64))


class ICPRegistration(TransformerMixin, BaseEstimator):
    """Point-to-point ICP as an estimator: ``fit(source_cloud, target_cloud)``."""

    def __init__(self, max_dist=0.05, tol=1e-6, max_iters=50, init=None):
        self.max_dist = max_dist
        self.tol = tol
        self.max_iters = max_iters
        self.init = init

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        params = IcpParams(self.max_dist, self.tol, self.max_iters)
        res = icp(X, y, self.init, params)
        self.pose_ = res.pose
        self.rmse_ = res.rmse
        self.history_ = res.history
        self.n_iter_ = res.n_iter
        return self

    def transform(self, X):
        check_is_fitted(self, "pose_")
        return self.pose_.apply(check_array(X, dtype=np.float64))
