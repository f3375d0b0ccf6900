"""Pinhole cameras with Brown radial/tangential distortion.

A reference-frame point ``X`` maps to pixels as follows::

    Xc = R X + t                      (pose: camera-from-reference)
    x, y = Xc / Zc, Yc / Zc
    r2 = x^2 + y^2
    xd = x (1 + k1 r2 + k2 r2^2 + k3 r2^3) + 2 p1 x y + p2 (r2 + 2 x^2)
    yd = y (1 + k1 r2 + k2 r2^2 + k3 r2^3) + p1 (r2 + 2 y^2) + 2 p2 x y
    u = focal xd + skew yd + u0
    v = focal yd + v0
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import rq
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    DivergedOrStalled,
    EmptyObservations,
    NoConvergence,
)
from .geometry import Pose, as_points

INTRINSIC_NAMES = ("focal", "skew", "u0", "v0", "k1", "k2", "k3", "p1", "p2")
POSE_NAMES = ("rx", "ry", "rz", "tx", "ty", "tz")
PARAM_NAMES = INTRINSIC_NAMES + POSE_NAMES
DISTORTION_NAMES = ("k1", "k2", "k3", "p1", "p2")


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    skew: float = 0.0
    u0: float = 0.0
    v0: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 1
    height: int = 1

    def __post_init__(self):
        vals = self.vector()
        if not np.all(np.isfinite(vals)):
            raise ValueError("intrinsics must be finite")
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise ValueError(
                f"principal point ({self.u0}, {self.v0}) outside a "
                f"{self.width}x{self.height} image"
            )

    @property
    def principal_point(self):
        return (self.u0, self.v0)

    @property
    def radial(self):
        return (self.k1, self.k2, self.k3)

    @property
    def tangential(self):
        return (self.p1, self.p2)

    @property
    def image_size(self):
        return (self.width, self.height)

    @property
    def has_distortion(self):
        return any(c != 0.0 for c in (self.k1, self.k2, self.k3, self.p1, self.p2))

    def vector(self):
        return np.array([getattr(self, n) for n in INTRINSIC_NAMES], dtype=np.float64)

    def with_vector(self, vec):
        return replace(self, **{n: float(v) for n, v in zip(INTRINSIC_NAMES, vec)})

    def matrix(self):
        return np.array([[self.focal, self.skew, self.u0], [0.0, self.focal, self.v0], [0.0, 0.0, 1.0]])

    def undistorted(self):
        return replace(self, k1=0.0, k2=0.0, k3=0.0, p1=0.0, p2=0.0)


@dataclass(frozen=True)
class CameraParams:
    intrinsics: Intrinsics
    pose: Pose = field(default_factory=Pose.identity)
    camera_id: int = 1
    kind: str = "depth"

    def __post_init__(self):
        if self.kind not in ("color", "depth"):
            raise ValueError(f"kind must be 'color' or 'depth', got {self.kind!r}")

    @property
    def key(self):
        return (self.camera_id, self.kind)

    @property
    def center(self):
        """Camera center in reference coordinates."""
        return -self.pose.rotation.T @ self.pose.translation

    def with_intrinsics(self, intrinsics):
        return replace(self, intrinsics=intrinsics)

    def with_pose(self, pose):
        return replace(self, pose=pose)


class Observation2D3D(NamedTuple):
    world: np.ndarray
    pixel: np.ndarray


def observation_arrays(obs):
    """Split observations into ``(world (N,3), pixels (N,2))`` arrays.

    Accepts a sequence of :class:`Observation2D3D` or an already split
    ``(world, pixels)`` tuple of arrays.
    """
    if isinstance(obs, tuple) and len(obs) == 2 and not isinstance(obs, Observation2D3D):
        world, pix = obs
        world = as_points(world, "world")
        pix = np.asarray(pix, dtype=np.float64).reshape(-1, 2)
    else:
        obs = list(obs)
        if not obs:
            return np.zeros((0, 3)), np.zeros((0, 2))
        world = np.array([np.asarray(o.world, dtype=np.float64) for o in obs])
        pix = np.array([np.asarray(o.pixel, dtype=np.float64) for o in obs])
    if len(world) != len(pix):
        raise ValueError("world and pixel arrays differ in length")
    if not np.all(np.isfinite(pix)):
        raise ValueError("pixels must be finite")
    return world, pix


def distort(intr, xy):
    """Apply the Brown model to normalized coordinates ``(..., 2)``."""
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3))
    xd = x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _distortion_jacobian(intr, x, y):
    """d(xd, yd) / d(x, y) as four arrays."""
    r2 = x * x + y * y
    radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3))
    dr = intr.k1 + 2.0 * intr.k2 * r2 + 3.0 * intr.k3 * r2 * r2
    dxx = radial + 2.0 * x * x * dr + 2.0 * intr.p1 * y + 6.0 * intr.p2 * x
    dxy = 2.0 * x * y * dr + 2.0 * intr.p1 * x + 2.0 * intr.p2 * y
    dyx = dxy
    dyy = radial + 2.0 * y * y * dr + 6.0 * intr.p1 * y + 2.0 * intr.p2 * x
    return dxx, dxy, dyx, dyy


def undistort_normalized(intr, distorted, max_iter=100, tol=1e-14):
    """Invert :func:`distort` by damped Newton iteration.

    ``distorted`` is a pair or an ``(N, 2)`` array of distorted normalized
    coordinates; the output has the same shape.
    """
    d = np.asarray(distorted, dtype=np.float64)
    single = d.ndim == 1
    d = d.reshape(-1, 2)
    if not intr.has_distortion:
        return d[0].copy() if single else d.copy()
    xy = d.copy()
    res = distort(intr, xy) - d
    err = np.hypot(res[:, 0], res[:, 1])
    active = err > tol
    for _ in range(max_iter):
        if not np.any(active):
            break
        a = np.nonzero(active)[0]
        x, y = xy[a, 0], xy[a, 1]
        j11, j12, j21, j22 = _distortion_jacobian(intr, x, y)
        det = j11 * j22 - j12 * j21
        det = np.where(det == 0.0, 1e-300, det)
        rx, ry = res[a, 0], res[a, 1]
        step = np.stack([(j22 * rx - j12 * ry) / det, (-j21 * rx + j11 * ry) / det], axis=1)
        scale = np.ones(len(a))
        # backtrack per point until the residual shrinks
        for _ in range(30):
            cand = xy[a] - step * scale[:, None]
            cres = distort(intr, cand) - d[a]
            cerr = np.hypot(cres[:, 0], cres[:, 1])
            worse = cerr > err[a]
            if not np.any(worse):
                break
            scale = np.where(worse, scale * 0.5, scale)
        xy[a] = cand
        res[a] = cres
        err[a] = cerr
        active[a] = (cerr > tol) & (np.abs(step * scale[:, None]).max(axis=1) > 1e-17)
    if np.any(err >= 1e-8):
        raise NoConvergence(
            f"undistortion residual {err.max():.3g} after {max_iter} iterations"
        )
    return xy[0] if single else xy


def project_points(params, points):
    """Vectorised projection without cheirality checks.

    Returns ``(uv (N, 2), depth (N,))``; points with ``depth <= 0`` get NaN pixels.
    """
    pts = as_points(points)
    Xc = params.pose.apply(pts)
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = Xc[:, :2] / z[:, None]
    xy[z <= 0] = np.nan
    return normalized_to_pixels(params.intrinsics, xy), z


def normalized_to_pixels(intr, xy):
    xd = distort(intr, xy) if intr.has_distortion else np.asarray(xy, dtype=np.float64)
    u = intr.focal * xd[..., 0] + intr.skew * xd[..., 1] + intr.u0
    v = intr.focal * xd[..., 1] + intr.v0
    return np.stack([u, v], axis=-1)


def pixels_to_normalized(intr, uv):
    """Undistorted normalized coordinates of pixels ``(N, 2)``."""
    uv = np.asarray(uv, dtype=np.float64)
    yd = (uv[..., 1] - intr.v0) / intr.focal
    xd = (uv[..., 0] - intr.u0 - intr.skew * yd) / intr.focal
    xyd = np.stack([xd, yd], axis=-1)
    if intr.has_distortion:
        return undistort_normalized(intr, xyd)
    return xyd


def project(params, p):
    """Pixel coordinates of reference-frame point(s) ``p``.

    A single point gives a ``(2,)`` array, an ``(N, 3)`` array gives ``(N, 2)``.
    """
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    uv, z = project_points(params, arr)
    if np.any(z <= 0):
        raise BehindCamera(f"{int(np.sum(z <= 0))} point(s) at non-positive depth")
    return uv[0] if single else uv


def reprojection_residuals(params, obs):
    world, pix = observation_arrays(obs)
    return project(params, world) - pix


def reprojection_rmse(params, obs):
    """Root of the mean squared pixel residual norm."""
    world, pix = observation_arrays(obs)
    if len(world) == 0:
        raise EmptyObservations("no observations to evaluate")
    r = project(params, world) - pix
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


# ---------------------------------------------------------------- DLT


def _normalizing_transform(pts):
    mu = pts.mean(axis=0)
    dist = np.sqrt(np.sum((pts - mu) ** 2, axis=1)).mean()
    s = np.sqrt(pts.shape[1]) / dist if dist > 0 else 1.0
    T = np.eye(pts.shape[1] + 1)
    T[:-1, :-1] *= s
    T[:-1, -1] = -s * mu
    return T


def estimate_intrinsics_dlt(obs, image_size=None, camera_id=1, kind="depth"):
    """Linear projection-matrix estimate decomposed into intrinsics and pose.

    Distortion is initialised to zero. Returns ``(Intrinsics, Pose)``; the
    pose is camera-from-reference.
    """
    world, pix = observation_arrays(obs)
    n = len(world)
    if n < 6:
        raise DegenerateConfiguration(f"need at least 6 correspondences, got {n}")
    sv = np.linalg.svd(world - world.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[2] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("world points are coplanar")

    Tw = _normalizing_transform(world)
    Tp = _normalizing_transform(pix)
    Xh = np.hstack([world, np.ones((n, 1))]) @ Tw.T
    xh = np.hstack([pix, np.ones((n, 1))]) @ Tp.T
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, [1]] * Xh
    _, s, vt = np.linalg.svd(A)
    if s[-2] <= 1e-12 * s[0]:
        raise DegenerateConfiguration("projection matrix is not uniquely determined")
    P = np.linalg.inv(Tp) @ vt[-1].reshape(3, 4) @ Tw
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    K, R = rq(P[:, :3])
    D = np.diag(np.sign(np.diag(K)))
    K = K @ D
    R = D @ R
    lam = K[2, 2]
    t = np.linalg.solve(K, P[:, 3])
    K = K / lam
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        raise DegenerateConfiguration("decomposition produced a reflection")
    depth = world @ R.T + t
    if np.median(depth[:, 2]) <= 0:
        raise DegenerateConfiguration("points lie behind the estimated camera")

    focal = 0.5 * (K[0, 0] + K[1, 1])
    u0, v0 = K[0, 2], K[1, 2]
    if image_size is None:
        image_size = (
            int(np.ceil(max(pix[:, 0].max(), u0))) + 1,
            int(np.ceil(max(pix[:, 1].max(), v0))) + 1,
        )
    intr = Intrinsics(
        focal=float(focal), skew=float(K[0, 1]), u0=float(u0), v0=float(v0),
        width=int(image_size[0]), height=int(image_size[1]),
    )
    return intr, Pose(R, t, target_frame=f"{kind}{camera_id}")


# ---------------------------------------------------------------- LM


@dataclass(frozen=True)
class LmOptions:
    max_iters: int = 200
    lambda_init: float = 1e-3
    lambda_factor: float = 10.0
    lambda_max: float = 1e12
    ftol: float = 1e-12
    xtol: float = 1e-14
    gtol: float = 1e-10
    freeze_pose: bool = False
    fixed: frozenset = frozenset()

    def free_mask(self):
        fixed = set(self.fixed)
        if "distortion" in fixed:
            fixed |= set(DISTORTION_NAMES)
        if self.freeze_pose:
            fixed |= set(POSE_NAMES)
        unknown = fixed - set(PARAM_NAMES) - {"distortion"}
        if unknown:
            raise ValueError(f"unknown parameter names {sorted(unknown)}")
        return np.array([n not in fixed for n in PARAM_NAMES])


class LmResult(NamedTuple):
    params: CameraParams
    rmse: float
    history: list
    n_iter: int


def residuals_and_jacobian(params, world, pixels):
    """Stacked residuals ``(2N,)`` and analytic Jacobian ``(2N, 15)``.

    Columns follow :data:`PARAM_NAMES`. The rotation columns are taken with
    respect to a left-multiplied increment ``R <- exp([w]x) R`` at ``w = 0``;
    translation columns are plain partials.
    """
    intr = params.intrinsics
    R, t = params.pose.rotation, params.pose.translation
    RX = world @ R.T
    Xc = RX + t
    Z = Xc[:, 2]
    if np.any(Z <= 0):
        raise BehindCamera("observation behind camera during refinement")
    x = Xc[:, 0] / Z
    y = Xc[:, 1] / Z
    r2 = x * x + y * y
    radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3))
    xd = x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y
    a, g = intr.focal, intr.skew
    u = a * xd + g * yd + intr.u0
    v = a * yd + intr.v0

    n = len(world)
    J = np.zeros((2 * n, 15))
    Ju, Jv = J[0::2], J[1::2]
    Ju[:, 0] = xd
    Jv[:, 0] = yd
    Ju[:, 1] = yd
    Ju[:, 2] = 1.0
    Jv[:, 3] = 1.0
    # distortion coefficients
    dxd = np.stack([x * r2, x * r2 * r2, x * r2 ** 3, 2 * x * y, r2 + 2 * x * x], axis=1)
    dyd = np.stack([y * r2, y * r2 * r2, y * r2 ** 3, r2 + 2 * y * y, 2 * x * y], axis=1)
    Ju[:, 4:9] = a * dxd + g * dyd
    Jv[:, 4:9] = a * dyd
    # chain through normalized coordinates to the camera-frame point
    dxx, dxy, dyx, dyy = _distortion_jacobian(intr, x, y)
    du_dx = a * dxx + g * dyx
    du_dy = a * dxy + g * dyy
    dv_dx = a * dyx
    dv_dy = a * dyy
    iz = 1.0 / Z
    dx_dXc = np.stack([iz, np.zeros(n), -x * iz], axis=1)
    dy_dXc = np.stack([np.zeros(n), iz, -y * iz], axis=1)
    du_dXc = du_dx[:, None] * dx_dXc + du_dy[:, None] * dy_dXc
    dv_dXc = dv_dx[:, None] * dx_dXc + dv_dy[:, None] * dy_dXc
    # dXc/dw = -[RX]x
    Ju[:, 9:12] = np.cross(RX, du_dXc)
    Jv[:, 9:12] = np.cross(RX, dv_dXc)
    Ju[:, 12:15] = du_dXc
    Jv[:, 12:15] = dv_dXc

    res = np.empty(2 * n)
    res[0::2] = u - pixels[:, 0]
    res[1::2] = v - pixels[:, 1]
    return res, J


def apply_update(params, delta):
    """Apply a 15-vector increment in :data:`PARAM_NAMES` order."""
    intr = params.intrinsics.with_vector(params.intrinsics.vector() + delta[:9])
    R = params.pose.rotation
    if np.any(delta[9:12]):
        u, _, vt = np.linalg.svd(Rotation.from_rotvec(delta[9:12]).as_matrix() @ R)
        R = u @ vt
    pose = Pose(R, params.pose.translation + delta[12:15], params.pose.target_frame)
    return replace(params, intrinsics=intr, pose=pose)


def _try_update(params, delta):
    try:
        return apply_update(params, delta)
    except ValueError:
        return None


def _cost(params, world, pixels):
    uv, z = project_points(params, world)
    if np.any(z <= 0):
        return np.inf
    r = uv - pixels
    return float(np.sum(r * r))


def levenberg_marquardt(initial, obs, opts=LmOptions()):
    """Damped Gauss-Newton over intrinsics, distortion and pose.

    Only strictly cost-decreasing steps are accepted, so ``history`` (RMSE
    after each accepted step, starting with the initial value) is
    non-increasing.
    """
    world, pixels = observation_arrays(obs)
    n = len(world)
    if n == 0:
        raise EmptyObservations("no observations to refine against")
    free = opts.free_mask()
    params = initial
    cost = _cost(params, world, pixels)
    if not np.isfinite(cost):
        raise BehindCamera("initial parameters place observations behind the camera")
    history = [np.sqrt(cost / n)]
    lam = opts.lambda_init
    accepted = 0
    it = 0
    for it in range(1, opts.max_iters + 1):
        r, J = residuals_and_jacobian(params, world, pixels)
        J = J[:, free]
        scale = np.sqrt(np.sum(J * J, axis=0))
        scale[scale == 0] = 1.0
        Js = J / scale
        A = Js.T @ Js
        g = Js.T @ r
        rnorm = np.sqrt(cost)
        if rnorm == 0.0 or np.max(np.abs(g)) <= opts.gtol * rnorm:
            break
        step_taken = False
        while lam <= opts.lambda_max:
            M = A + lam * np.diag(np.diag(A))
            try:
                ds = np.linalg.solve(M, -g)
            except np.linalg.LinAlgError:
                lam *= opts.lambda_factor
                continue
            delta = np.zeros(15)
            delta[free] = ds / scale
            cand = _try_update(params, delta)
            new_cost = np.inf if cand is None else _cost(cand, world, pixels)
            if new_cost < cost:
                rel = (cost - new_cost) / cost
                params, cost = cand, new_cost
                history.append(np.sqrt(cost / n))
                lam = max(lam / opts.lambda_factor, 1e-15)
                accepted += 1
                step_taken = True
                break
            lam *= opts.lambda_factor
        if not step_taken:
            if accepted == 0:
                raise DivergedOrStalled(
                    f"damping exceeded {opts.lambda_max:g} without improving cost {cost:.6g}"
                )
            break
        if rel < opts.ftol or np.linalg.norm(ds) < opts.xtol:
            break
    return LmResult(params, float(np.sqrt(cost / n)), history, it)


def refine_lm(initial, obs, opts=LmOptions()):
    """Refine ``initial`` against observations; returns ``(CameraParams, rmse)``."""
    res = levenberg_marquardt(initial, obs, opts)
    return res.params, res.rmse


class CameraCalibrator(BaseEstimator):
    """Single-camera calibration from 3D-2D correspondences.

    ``fit(X, y)`` takes reference-frame points ``X (N, 3)`` and pixels
    ``y (N, 2)``. Without ``initial`` the camera is initialised by DLT.
    ``score`` returns the negative reprojection RMSE so that larger is better.
    """

    def __init__(self, initial=None, image_size=None, camera_id=1, kind="depth",
                 freeze_pose=False, fixed=(), max_iters=200):
        self.initial = initial
        self.image_size = image_size
        self.camera_id = camera_id
        self.kind = kind
        self.freeze_pose = freeze_pose
        self.fixed = fixed
        self.max_iters = max_iters

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if X.shape[1] != 3 or y.shape[1] != 2:
            raise ValueError("X must be (N, 3) world points and y (N, 2) pixels")
        init = self.initial
        if init is None:
            intr, pose = estimate_intrinsics_dlt((X, y), self.image_size, self.camera_id, self.kind)
            init = CameraParams(intr, pose, self.camera_id, self.kind)
        opts = LmOptions(max_iters=self.max_iters, freeze_pose=self.freeze_pose,
                         fixed=frozenset(self.fixed))
        res = levenberg_marquardt(init, (X, y), opts)
        self.params_ = res.params
        self.rmse_ = res.rmse
        self.history_ = res.history
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return project(self.params_, check_array(X, dtype=np.float64))

    def score(self, X, y):
        check_is_fitted(self, "params_")
        return -reprojection_rmse(self.params_, (check_array(X), check_array(y)))
