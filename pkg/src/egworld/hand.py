"""Articulated hand model: low-dimensional pose parameters and forward kinematics.

A hand pose is a wrist transform (axis-angle rotation plus translation) and one
flexion angle per non-root joint. The skeleton is a 21-joint tree whose
geometry (parent links, rest bone offsets, rotation axes, joint limits,
display colors) is loaded from a JSON spec; a default spec ships with the
package. Left hands reuse the right-hand skeleton with rest offsets mirrored
across the x axis.

Conventions: offsets are metres in the parent joint frame; each articulated
joint rotates about a fixed unit axis by its angle; world position of joint i
is the translation part of M_parent(i) @ Rot(axis_i, angle_i) @ Trans(offset_i)
with the wrist transform at the root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

NUM_JOINTS = 21
NUM_ANGLES = NUM_JOINTS - 1
HPP_DIM = 6 + NUM_ANGLES          # one hand: wrist axis-angle, wrist translation, angles
HPP_PAIR_DIM = 2 * HPP_DIM        # both hands, left first

_UNIT_AXIS_TOL = 1e-9


class HandError(ValueError):
    """Invalid skeleton spec or hand pose."""


@dataclass(frozen=True)
class HandSkeletonSpec:
    """Static hand skeleton: tree topology, rest geometry, limits, colors.

    Arrays are indexed by joint id 0..20 (0 is the wrist). Root rows of
    ``axes``/``limits`` are placeholders and never used by kinematics.
    """

    joint_names: tuple[str, ...]
    parents: np.ndarray       # (21,) int64, parents[0] == -1
    rest_offsets: np.ndarray  # (21, 3) float64, metres, right-hand frame
    axes: np.ndarray          # (21, 3) float64 unit vectors
    limits: np.ndarray        # (21, 2) float64 [lo, hi] radians
    colors: np.ndarray        # (21, 3) float64 RGB in [0, 1]
    bones: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if len(self.joint_names) != NUM_JOINTS or self.parents.shape != (NUM_JOINTS,):
            raise HandError("skeleton must have exactly 21 joints")
        if self.parents[0] != -1:
            raise HandError("joint 0 must be the root")
        for j in range(1, NUM_JOINTS):
            # parents must precede children so one forward pass suffices
            if not 0 <= self.parents[j] < j:
                raise HandError(f"joint {j} parent {self.parents[j]} out of order")
        norms = np.linalg.norm(self.axes[1:], axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_AXIS_TOL):
            raise HandError("rotation axes must be unit length")
        if np.any(self.limits[1:, 0] > self.limits[1:, 1]):
            raise HandError("joint limit lo > hi")
        if np.any(self.colors < 0.0) or np.any(self.colors > 1.0):
            raise HandError("colors must lie in [0, 1]")
        diff = np.abs(self.colors[:, None, :] - self.colors[None, :, :]).max(axis=2)
        off_diag = diff[~np.eye(NUM_JOINTS, dtype=bool)]
        if off_diag.min() < 64.0 / 255.0:
            raise HandError("joint colors too close: need pairwise L-inf >= 64/255")
        bone_set = set()
        for a, b in self.bones:
            if self.parents[b] != a:
                raise HandError(f"bone ({a},{b}) does not match parent table")
            bone_set.add((a, b))
        if len(bone_set) != NUM_ANGLES:
            raise HandError("bones must cover each non-root joint once")

    @staticmethod
    def from_json(text: str) -> "HandSkeletonSpec":
        doc = json.loads(text)
        joints = doc["joints"]
        if len(joints) != NUM_JOINTS:
            raise HandError(f"expected {NUM_JOINTS} joints, got {len(joints)}")
        names = tuple(j["name"] for j in joints)
        parents = np.array([j["parent"] for j in joints], dtype=np.int64)
        offsets = np.array([j["offset"] for j in joints], dtype=np.float64)
        axes = np.zeros((NUM_JOINTS, 3), dtype=np.float64)
        limits = np.zeros((NUM_JOINTS, 2), dtype=np.float64)
        axes[0] = (1.0, 0.0, 0.0)  # placeholder, root has no hinge
        for i, j in enumerate(joints):
            if i == 0:
                continue
            if j.get("axis") is None or j.get("limits") is None:
                raise HandError(f"joint {i} missing axis or limits")
            axes[i] = j["axis"]
            limits[i] = j["limits"]
        colors = np.array([j["color"] for j in joints], dtype=np.float64)
        bones = tuple((int(a), int(b)) for a, b in doc["bones"])
        return HandSkeletonSpec(names, parents, offsets, axes, limits, colors, bones)

    @staticmethod
    def load(path: str) -> "HandSkeletonSpec":
        with open(path, "r", encoding="utf-8") as f:
            return HandSkeletonSpec.from_json(f.read())

    @staticmethod
    def default() -> "HandSkeletonSpec":
        text = resources.files("egworld.data").joinpath("hand_spec.json").read_text()
        return HandSkeletonSpec.from_json(text)


@dataclass(frozen=True)
class HandPose:
    """One hand: wrist axis-angle, wrist translation (metres), 20 joint angles."""

    wrist_rot: np.ndarray     # (3,) axis-angle
    wrist_trans: np.ndarray   # (3,)
    angles: np.ndarray        # (20,) radians
    left: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "wrist_rot", np.asarray(self.wrist_rot, dtype=np.float64))
        object.__setattr__(self, "wrist_trans", np.asarray(self.wrist_trans, dtype=np.float64))
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64))
        if self.wrist_rot.shape != (3,) or self.wrist_trans.shape != (3,):
            raise HandError("wrist pose must be two 3-vectors")
        if self.angles.shape != (NUM_ANGLES,):
            raise HandError(f"expected {NUM_ANGLES} joint angles")

    @staticmethod
    def rest(left: bool = False) -> "HandPose":
        return HandPose(np.zeros(3), np.zeros(3), np.zeros(NUM_ANGLES), left=left)


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for an axis-angle 3-vector (angle = norm)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return np.eye(3)
    k = v / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]], dtype=np.float64)
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def _hinge_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    kx = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]],
        dtype=np.float64,
    )
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def check_limits(pose: HandPose, spec: HandSkeletonSpec, tol: float = 1e-9) -> None:
    lo = spec.limits[1:, 0] - tol
    hi = spec.limits[1:, 1] + tol
    bad = np.where((pose.angles < lo) | (pose.angles > hi))[0]
    if bad.size:
        j = int(bad[0]) + 1
        raise HandError(
            f"angle for joint '{spec.joint_names[j]}' = {pose.angles[bad[0]]:.4f} rad "
            f"outside limits [{spec.limits[j, 0]}, {spec.limits[j, 1]}]"
        )


def forward_kinematics(
    pose: HandPose, spec: HandSkeletonSpec, *, validate: bool = True
) -> np.ndarray:
    """World positions of all 21 joints, shape (21, 3).

    Left hands mirror the rest offsets across x before composing transforms.
    """
    if validate:
        check_limits(pose, spec)
    offsets = spec.rest_offsets.copy()
    if pose.left:
        offsets[:, 0] *= -1.0
    rots = np.empty((NUM_JOINTS, 3, 3), dtype=np.float64)
    pos = np.empty((NUM_JOINTS, 3), dtype=np.float64)
    rots[0] = axis_angle_to_matrix(pose.wrist_rot)
    pos[0] = pose.wrist_trans
    for j in range(1, NUM_JOINTS):
        p = spec.parents[j]
        local = _hinge_matrix(spec.axes[j], float(pose.angles[j - 1]))
        rots[j] = rots[p] @ local
        pos[j] = pos[p] + rots[j] @ offsets[j]
    return pos


def vectorize(left: HandPose, right: HandPose) -> np.ndarray:
    """Pack a hand pair into the flat 52-vector (left block then right block)."""
    if not left.left or right.left:
        raise HandError("vectorize expects (left, right) in that order")
    return np.concatenate(
        [left.wrist_rot, left.wrist_trans, left.angles,
         right.wrist_rot, right.wrist_trans, right.angles]
    )


def devectorize(vec: np.ndarray) -> tuple[HandPose, HandPose]:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (HPP_PAIR_DIM,):
        raise HandError(f"expected shape ({HPP_PAIR_DIM},), got {vec.shape}")
    halves = []
    for i, is_left in ((0, True), (HPP_DIM, False)):
        h = vec[i : i + HPP_DIM]
        halves.append(HandPose(h[0:3], h[3:6], h[6:], left=is_left))
    return halves[0], halves[1]


@dataclass(frozen=True)
class TrajectoryConfig:
    """Smooth random hand motion generator settings."""

    frames: int = 24
    dt: float = 1.0 / 16.0
    omega_max: float = 4.0        # rad/s bound on per-joint angular velocity
    wrist_lin_max: float = 0.5    # m/s bound on wrist translation speed
    angle_margin: float = 0.95    # stay inside this fraction of the limit span
    left_base: tuple[float, float, float] = (-0.055, -0.01, 0.0)
    right_base: tuple[float, float, float] = (0.055, -0.01, 0.0)
    trans_amp: float = 0.03       # metres around the base position


def sample_trajectory(
    seed: int,
    spec: HandSkeletonSpec,
    config: TrajectoryConfig | None = None,
) -> np.ndarray:
    """Deterministic smooth two-hand motion, shape (frames, 52).

    Channels follow the vectorize layout. All joint angles stay inside the
    spec limits and per-frame angle deltas stay below omega_max * dt.
    """
    cfg = config or TrajectoryConfig()
    if cfg.frames < 1:
        raise HandError("need at least one frame")
    rng = np.random.default_rng(seed)
    t = np.arange(cfg.frames, dtype=np.float64) * cfg.dt
    out = np.zeros((cfg.frames, HPP_PAIR_DIM), dtype=np.float64)

    def sinusoid(freq_hz, amp, phase):
        return amp * np.sin(2.0 * np.pi * freq_hz * t + phase)

    for side, base in ((0, cfg.left_base), (1, cfg.right_base)):
        o = side * HPP_DIM
        # wrist orientation: small axis-angle wobble, rate-bounded
        for k in range(3):
            f = rng.uniform(0.15, 0.5)
            amp_cap = cfg.omega_max * cfg.angle_margin / (2.0 * np.pi * f)
            amp = rng.uniform(0.05, min(0.35, amp_cap))
            out[:, o + k] = sinusoid(f, amp, rng.uniform(0, 2 * np.pi))
        # wrist translation: gentle drift around the base point, rate-bounded
        for k in range(3):
            f = rng.uniform(0.1, 0.4)
            amp_cap = cfg.wrist_lin_max * cfg.angle_margin / (2.0 * np.pi * f)
            amp = rng.uniform(0.2, 1.0) * min(cfg.trans_amp, amp_cap)
            out[:, o + 3 + k] = base[k] + sinusoid(f, amp, rng.uniform(0, 2 * np.pi))
        # articulation: per-joint sinusoids inside limits and the rate bound
        for j in range(NUM_ANGLES):
            lo, hi = spec.limits[j + 1]
            mid = 0.5 * (lo + hi)
            half_span = 0.5 * (hi - lo) * cfg.angle_margin
            f = rng.uniform(0.2, 0.8)
            amp_cap = cfg.omega_max * cfg.angle_margin / (2.0 * np.pi * f)
            amp = rng.uniform(0.25, 1.0) * min(half_span, amp_cap)
            center = mid + rng.uniform(-0.3, 0.3) * (half_span - amp)
            out[:, o + 6 + j] = center + sinusoid(f, amp, rng.uniform(0, 2 * np.pi))
    return out


def trajectory_max_delta(traj: np.ndarray) -> float:
    """Largest per-frame change over the 40 articulation channels."""
    idx = np.r_[6:26, HPP_DIM + 6 : HPP_DIM + 26]
    if traj.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(traj[:, idx], axis=0)).max())
