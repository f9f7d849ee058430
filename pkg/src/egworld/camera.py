"""Pinhole camera geometry: poses, projection, per-pixel ray embeddings, PnP.

Conventions: world-to-camera extrinsics x_cam = R @ x_world + t; camera frame
has +x right, +y down, +z forward. Pixel (u, v) indexes a cell whose center is
(u + 0.5, v + 0.5); projections are continuous pixel coordinates in that
frame. Points with camera depth z <= Z_NEAR are treated as invisible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

Z_NEAR = 0.05
_ORTHO_TOL = 1e-9


class CameraError(ValueError):
    """Invalid camera pose or intrinsics."""


class PoseEstimationError(RuntimeError):
    """Pose recovery failed: degenerate or insufficient correspondences."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise CameraError("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def as_vector(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    R: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if R.shape != (3, 3) or t.shape != (3,):
            raise CameraError("pose needs a 3x3 rotation and a 3-vector")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise CameraError("R must be a proper rotation")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def as_vector(self) -> np.ndarray:
        """Flat 12-vector: row-major R then t."""
        return np.concatenate([self.R.reshape(9), self.t])

    @staticmethod
    def from_vector(v: np.ndarray) -> "CameraPose":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (12,):
            raise CameraError("pose vector must have 12 entries")
        return CameraPose(v[:9].reshape(3, 3), v[9:])

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray | None = None) -> CameraPose:
    """Pose with +z toward target; up maps near the image -y direction."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise CameraError("eye and target coincide")
    z = fwd / n
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise CameraError("up direction parallel to view direction")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraPose(R, -R @ eye)


def project(points: np.ndarray, pose: CameraPose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixel coordinates.

    Returns (uv, visible): uv has shape (n, 2); visible is false for points at
    or behind the near plane or whose projection falls outside the image.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts @ pose.R.T + pose.t
    z = cam[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = intr.fx * cam[:, 0] / safe_z + intr.cx
    v = intr.fy * cam[:, 1] / safe_z + intr.cy
    uv = np.stack([u, v], axis=1)
    visible = (
        (z > Z_NEAR)
        & (u >= 0.0) & (u < intr.width)
        & (v >= 0.0) & (v < intr.height)
    )
    return uv, visible


def pluecker_embedding(pose: CameraPose, intr: Intrinsics, height: int | None = None,
                       width: int | None = None) -> np.ndarray:
    """Per-pixel ray map, shape (6, h, w): unit direction then moment o x d.

    Rays pass through pixel centers; directions and moments are expressed in
    world coordinates with the camera center as the ray origin.
    """
    h = intr.height if height is None else height
    w = intr.width if width is None else width
    u = np.arange(w, dtype=np.float64) + 0.5
    v = np.arange(h, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    )
    dirs_world = dirs_cam @ pose.R  # (R^T d) batched
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origin = pose.center
    moments = np.cross(np.broadcast_to(origin, dirs_world.shape), dirs_world)
    out = np.concatenate([dirs_world, moments], axis=-1)  # (h, w, 6)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def rotation_error_deg(a: CameraPose | np.ndarray, b: CameraPose | np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees."""
    Ra = a.R if isinstance(a, CameraPose) else np.asarray(a, dtype=np.float64)
    Rb = b.R if isinstance(b, CameraPose) else np.asarray(b, dtype=np.float64)
    c = (np.trace(Ra @ Rb.T) - 1.0) * 0.5
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(a: CameraPose, b: CameraPose) -> float:
    """Distance between camera centers, metres."""
    return float(np.linalg.norm(a.center - b.center))


def estimate_pose_dlt(points3d: np.ndarray, points2d: np.ndarray,
                      intr: Intrinsics) -> tuple[CameraPose, float]:
    """Recover a camera pose from 2D-3D correspondences by direct linear transform.

    Needs at least 6 points in general position (not coplanar). Returns the
    pose and the reprojection RMS in pixels.
    """
    X = np.asarray(points3d, dtype=np.float64)
    x = np.asarray(points2d, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or x.shape != (X.shape[0], 2):
        raise PoseEstimationError("need matching (n,3) points and (n,2) pixels")
    n = X.shape[0]
    if n < 6:
        raise PoseEstimationError(f"need at least 6 correspondences, got {n}")
    centered = X - X.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-9 * max(sv[0], 1e-12):
        raise PoseEstimationError("points are coplanar; pose is ambiguous")

    # normalized image coordinates remove the intrinsics
    xn = np.empty_like(x)
    xn[:, 0] = (x[:, 0] - intr.cx) / intr.fx
    xn[:, 1] = (x[:, 1] - intr.cy) / intr.fy

    Xh = np.concatenate([X, np.ones((n, 1))], axis=1)
    A = np.zeros((2 * n, 12), dtype=np.float64)
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh

    _, s, Vt = np.linalg.svd(A)
    if s[-2] <= 1e-7 * max(s[0], 1e-12):
        raise PoseEstimationError("degenerate configuration: null space not unique")
    M = Vt[-1].reshape(3, 4)
    scale = np.linalg.norm(M[2, :3])
    if scale < 1e-12:
        raise PoseEstimationError("degenerate projection matrix")
    M = M / scale
    # choose the sign placing points in front of the camera
    depths = Xh @ M[2]
    if np.sum(depths > 0) < np.sum(depths < 0):
        M = -M
        depths = -depths
    if np.any(depths <= 0):
        raise PoseEstimationError("recovered pose puts points behind the camera")

    U, sig, Vt3 = np.linalg.svd(M[:, :3])
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt3)]) @ Vt3
    t = M[:, 3] / sig.mean()
    pose = CameraPose(R, t)

    uv, _ = project(X, pose, intr)
    rms = float(np.sqrt(np.mean(np.sum((uv - x) ** 2, axis=1))))
    return pose, rms


def refine_pose(pose: CameraPose, points3d: np.ndarray, points2d: np.ndarray,
                intr: Intrinsics, iters: int = 10) -> tuple[CameraPose, float]:
    """Gauss-Newton refinement of a pose against reprojection residuals.

    The DLT minimizes an algebraic error, so with noisy detections its answer
    is biased; a few Newton steps on the geometric error fix that. The update
    is a left-multiplied rigid perturbation: X' = Rot(dw) @ (R X + t) + dt.
    Returns the refined pose and the final reprojection RMS in pixels.
    """
    X = np.asarray(points3d, dtype=np.float64)
    x = np.asarray(points2d, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or x.shape != (X.shape[0], 2):
        raise PoseEstimationError("need matching (n,3) points and (n,2) pixels")
    R = pose.R.copy()
    t = pose.t.copy()
    for _ in range(iters):
        Xc = X @ R.T + t
        z = Xc[:, 2]
        if np.any(z <= Z_NEAR):
            raise PoseEstimationError("refinement pushed points behind the camera")
        u = intr.fx * Xc[:, 0] / z + intr.cx
        v = intr.fy * Xc[:, 1] / z + intr.cy
        res = np.stack([u - x[:, 0], v - x[:, 1]], axis=1).reshape(-1)
        n = X.shape[0]
        J = np.zeros((2 * n, 6), dtype=np.float64)
        # d(u,v)/dXc rows, then dXc/d(dw) = -[Xc]x and dXc/d(dt) = I
        du = np.stack([intr.fx / z, np.zeros(n), -intr.fx * Xc[:, 0] / z**2], axis=1)
        dv = np.stack([np.zeros(n), intr.fy / z, -intr.fy * Xc[:, 1] / z**2], axis=1)
        for i in range(n):
            skew = np.array([
                [0.0, -Xc[i, 2], Xc[i, 1]],
                [Xc[i, 2], 0.0, -Xc[i, 0]],
                [-Xc[i, 1], Xc[i, 0], 0.0],
            ])
            J[2 * i, :3] = -du[i] @ skew
            J[2 * i, 3:] = du[i]
            J[2 * i + 1, :3] = -dv[i] @ skew
            J[2 * i + 1, 3:] = dv[i]
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        dw, dt = step[:3], step[3:]
        angle = float(np.linalg.norm(dw))
        dR = _axis_angle_matrix(dw / angle, angle) if angle > 1e-300 else np.eye(3)
        R = dR @ R
        t = dR @ t + dt
        U, _, Vt = np.linalg.svd(R)  # keep R orthogonal against drift
        R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
        if angle < 1e-12 and np.linalg.norm(dt) < 1e-12:
            break
    refined = CameraPose(R, t)
    uv, _ = project(X, refined, intr)
    rms = float(np.sqrt(np.mean(np.sum((uv - x) ** 2, axis=1))))
    return refined, rms


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def pose_to_json(pose: CameraPose) -> dict:
    return {"R": pose.R.tolist(), "t": pose.t.tolist()}


def pose_from_json(doc: dict) -> CameraPose:
    return CameraPose(np.array(doc["R"], dtype=np.float64), np.array(doc["t"], dtype=np.float64))


def save_trajectory(path: str, poses: list[CameraPose], intr: Intrinsics) -> None:
    doc = {
        "intrinsics": {
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
        },
        "poses": [pose_to_json(p) for p in poses],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_trajectory(path: str) -> tuple[list[CameraPose], Intrinsics]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    ci = doc["intrinsics"]
    intr = Intrinsics(ci["fx"], ci["fy"], ci["cx"], ci["cy"], ci["width"], ci["height"])
    return [pose_from_json(p) for p in doc["poses"]], intr
