"""Synthetic egocentric tabletop scenes and the clip corpus they produce.

Every distinct element is flat-shaded in a color drawn from the 4x4x4 grid
{0, 1/3, 2/3, 1}^3, which makes any two distinct colors at least 85/255 apart
channel-wise. Joint and fiducial beacons are small discs painted last so a
color-matching detector can localize them; when beacon discs overlap, pixels
are shared between the overlapping discs in a deterministic checker pattern so
each one keeps enough mass to stay detectable.

World frame: z up, hands near the origin, camera orbiting at roughly half a
metre. Rendered frames are float32, channel-first, values in [-1, 1].
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .camera import CameraPose, Intrinsics, Z_NEAR, look_at, project
from .hand import HandSkeletonSpec, devectorize, forward_kinematics, sample_trajectory, TrajectoryConfig

GRID = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)
MIN_COLOR_SEP = 64.0 / 255.0


def grid_color(index: int) -> tuple[float, float, float]:
    """Color number index in the 4x4x4 palette grid (0..63)."""
    if not 0 <= index < 64:
        raise ValueError("grid color index out of range")
    return (GRID[index // 16], GRID[(index // 4) % 4], GRID[index % 4])


# Right-hand joints take grid slots 16..36 (these live in the skeleton spec);
# left-hand joints take 37..57 so both hands stay separable in one frame.
LEFT_JOINT_COLORS = np.array([grid_color(37 + j) for j in range(21)], dtype=np.float64)

BACKGROUND_COLOR = grid_color(0)
BONE_COLOR_RIGHT = grid_color(6)
BONE_COLOR_LEFT = grid_color(9)
DEFAULT_OBJECT_COLORS = (grid_color(5), grid_color(10))
DEFAULT_FIDUCIAL_COLORS = [
    grid_color(i)
    for i in (3, 12, 15, 7, 13, 11, 14, 1, 2, 4, 8, 58, 59, 60, 61, 62)
]

BONE_RADIUS_M = 0.008          # world-space half width of rendered finger bones
BONE_RADIUS_PX_MIN = 0.7
BONE_RADIUS_PX_MAX = 3.0
CONTROL_STROKE_PX = 0.9        # skeleton control video stroke radius
CONTROL_JOINT_PX = 1.2         # skeleton control video joint disc radius
MASK_DILATION_PX = 1.5

SCENE_DESCRIPTOR_DIM = 16


class SceneError(ValueError):
    """Invalid scene specification."""


@dataclass(frozen=True)
class SceneObject:
    kind: str                       # "sphere" | "box"
    center: tuple[float, float, float]
    size: float                     # sphere radius or box edge, metres
    color: tuple[float, float, float]

    def __post_init__(self) -> None:
        if self.kind not in ("sphere", "box"):
            raise SceneError(f"unknown object kind {self.kind!r}")
        if self.size <= 0:
            raise SceneError("object size must be positive")


@dataclass(frozen=True)
class Fiducial:
    position: tuple[float, float, float]
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    background: tuple[float, float, float] = BACKGROUND_COLOR
    objects: tuple[SceneObject, ...] = ()
    fiducials: tuple[Fiducial, ...] = ()
    render_joint_beacons: bool = True
    # a beacon centroid can never sit farther from the disc center than the
    # disc radius, so radius < 1 px bounds joint detection error below 1 px
    beacon_radius: float = 0.95    # joint beacon discs, pixels
    fiducial_radius: float = 3.0   # fiducial discs; larger = steadier centroids

    def validate(self, skel: HandSkeletonSpec) -> None:
        if len(self.fiducials) < 6:
            raise SceneError("need at least 6 fiducials for pose recovery")
        pts = np.array([f.position for f in self.fiducials], dtype=np.float64)
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[2] <= 1e-9 * max(sv[0], 1e-12):
            raise SceneError("fiducials are coplanar; pose recovery would be ambiguous")
        if self.beacon_radius <= 0.5 or self.fiducial_radius <= 0.5:
            raise SceneError("beacon radius too small to detect")
        named = [("background", self.background),
                 ("bone_right", BONE_COLOR_RIGHT), ("bone_left", BONE_COLOR_LEFT)]
        named += [(f"object{i}", o.color) for i, o in enumerate(self.objects)]
        named += [(f"fiducial{i}", f.color) for i, f in enumerate(self.fiducials)]
        named += [(f"joint_r{j}", tuple(skel.colors[j])) for j in range(21)]
        named += [(f"joint_l{j}", tuple(LEFT_JOINT_COLORS[j])) for j in range(21)]
        arr = np.array([c for _, c in named], dtype=np.float64)
        if arr.min() < 0 or arr.max() > 1:
            raise SceneError("colors must lie in [0, 1]")
        d = np.abs(arr[:, None] - arr[None, :]).max(axis=2)
        d[np.eye(len(named), dtype=bool)] = 1.0
        i, j = np.unravel_index(np.argmin(d), d.shape)
        if d[i, j] < MIN_COLOR_SEP:
            raise SceneError(
                f"colors {named[i][0]} and {named[j][0]} are {d[i, j]:.4f} apart; "
                f"need >= {MIN_COLOR_SEP:.4f}"
            )

    def to_json(self) -> dict:
        return {
            "background": list(self.background),
            "objects": [
                {"kind": o.kind, "center": list(o.center), "size": o.size, "color": list(o.color)}
                for o in self.objects
            ],
            "fiducials": [{"position": list(f.position), "color": list(f.color)} for f in self.fiducials],
            "render_joint_beacons": self.render_joint_beacons,
            "beacon_radius": self.beacon_radius,
            "fiducial_radius": self.fiducial_radius,
        }

    @staticmethod
    def from_json(doc: dict) -> "SceneSpec":
        return SceneSpec(
            background=tuple(doc["background"]),
            objects=tuple(
                SceneObject(o["kind"], tuple(o["center"]), o["size"], tuple(o["color"]))
                for o in doc["objects"]
            ),
            fiducials=tuple(Fiducial(tuple(f["position"]), tuple(f["color"])) for f in doc["fiducials"]),
            render_joint_beacons=bool(doc["render_joint_beacons"]),
            beacon_radius=float(doc["beacon_radius"]),
            fiducial_radius=float(doc["fiducial_radius"]),
        )

    @staticmethod
    def default() -> "SceneSpec":
        # two staggered rings plus a bottom pole below the hand workspace,
        # and four raised masts outside it. The rings give every azimuth a
        # wide spread of points the hands rarely cover; the masts project
        # above the hand cluster (1-2 are in frame at any azimuth) and span a
        # large depth range, which pins down the pitch/depth directions the
        # low-lying rings constrain only weakly.
        positions = []
        for k in range(6):
            a = 2.0 * np.pi * k / 6.0
            positions.append((0.175 * np.cos(a), 0.175 * np.sin(a), -0.12))
        for k in range(5):
            a = 2.0 * np.pi * (k + 0.5) / 5.0
            positions.append((0.145 * np.cos(a), 0.145 * np.sin(a), -0.19))
        positions.append((0.0, 0.0, -0.25))
        for k in range(4):
            a = 2.0 * np.pi * (k + 0.5) / 4.0
            positions.append((0.20 * np.cos(a), 0.20 * np.sin(a), 0.10))
        positions = [tuple(round(v, 6) for v in p) for p in positions]
        return SceneSpec(
            objects=(
                SceneObject("sphere", (-0.09, 0.05, 0.04), 0.035, DEFAULT_OBJECT_COLORS[0]),
                SceneObject("box", (0.09, -0.05, 0.03), 0.05, DEFAULT_OBJECT_COLORS[1]),
            ),
            fiducials=tuple(
                Fiducial(p, c) for p, c in zip(positions, DEFAULT_FIDUCIAL_COLORS)
            ),
        )


def scene_sha256(scene: SceneSpec) -> str:
    return hashlib.sha256(json.dumps(scene.to_json(), sort_keys=True).encode()).hexdigest()


def skeleton_sha256(skel: HandSkeletonSpec) -> str:
    doc = {
        "names": list(skel.joint_names),
        "parents": skel.parents.tolist(),
        "offsets": skel.rest_offsets.tolist(),
        "axes": skel.axes.tolist(),
        "limits": skel.limits.tolist(),
        "colors": skel.colors.tolist(),
        "bones": [list(b) for b in skel.bones],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def scene_descriptor(scene: SceneSpec) -> np.ndarray:
    """Fixed 16-float summary of the scene layout (a global conditioning vector)."""
    out = np.zeros(SCENE_DESCRIPTOR_DIM, dtype=np.float32)
    out[0:3] = scene.background
    out[3] = len(scene.objects) / 8.0
    for i, obj in enumerate(scene.objects[:2]):
        base = 4 + 5 * i
        out[base : base + 3] = obj.center
        out[base + 3] = obj.size
        out[base + 4] = 0.0 if obj.kind == "sphere" else 1.0
    out[14] = len(scene.fiducials) / 8.0
    out[15] = 1.0 if scene.render_joint_beacons else 0.0
    return out


# ---------------------------------------------------------------------------
# rasterization helpers

def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    return xx + 0.5, yy + 0.5


def _disc_mask(h: int, w: int, center: np.ndarray, radius: float) -> np.ndarray:
    cx, cy = _pixel_grid(h, w)
    return (cx - center[0]) ** 2 + (cy - center[1]) ** 2 <= radius * radius


def _capsule_mask(h: int, w: int, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    cx, cy = _pixel_grid(h, w)
    ab = b - a
    denom = float(ab @ ab)
    px = cx - a[0]
    py = cy - a[1]
    if denom < 1e-12:
        d2 = px * px + py * py
    else:
        s = np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
        d2 = (px - s * ab[0]) ** 2 + (py - s * ab[1]) ** 2
    return d2 <= radius * radius


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices (y axis pointing down)."""
    pts = np.unique(np.round(points, 9), axis=0)
    if pts.shape[0] < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _hull_mask(h: int, w: int, hull: np.ndarray) -> np.ndarray:
    if hull.shape[0] < 3:
        return np.zeros((h, w), dtype=bool)
    cx, cy = _pixel_grid(h, w)
    mask = np.ones((h, w), dtype=bool)
    n = hull.shape[0]
    for i in range(n):
        a = hull[i]
        b = hull[(i + 1) % n]
        # hull is counter-clockwise in the sorted-coordinate sense; interior
        # pixels sit on a consistent side of every edge
        side = (b[0] - a[0]) * (cy - a[1]) - (b[1] - a[1]) * (cx - a[0])
        mask &= side >= 0
    return mask


@dataclass(frozen=True)
class Segment:
    a: np.ndarray          # (2,) pixel endpoint
    b: np.ndarray
    depth: float           # mean camera depth of the two joints
    color: tuple[float, float, float]
    joint: int             # child joint id
    left: bool


def skeleton_segments(
    hpp_vec: np.ndarray,
    pose: CameraPose,
    intr: Intrinsics,
    skel: HandSkeletonSpec,
    *,
    validate: bool = False,
) -> tuple[list[Segment], dict]:
    """Project both hands and collect drawable bone segments.

    Returns the segments plus a dict with per-hand projected joints, camera
    depths and visibility for reuse by callers.
    """
    left, right = devectorize(np.asarray(hpp_vec, dtype=np.float64))
    info: dict = {}
    segments: list[Segment] = []
    for hand_pose, bone_color in ((left, BONE_COLOR_LEFT), (right, BONE_COLOR_RIGHT)):
        joints3d = forward_kinematics(hand_pose, skel, validate=validate)
        uv, vis = project(joints3d, pose, intr)
        depths = joints3d @ pose.R[2] + pose.t[2]
        key = "left" if hand_pose.left else "right"
        info[key] = {"joints3d": joints3d, "uv": uv, "vis": vis, "depth": depths}
        for a, b in skel.bones:
            if depths[a] <= Z_NEAR or depths[b] <= Z_NEAR:
                continue
            segments.append(
                Segment(uv[a], uv[b], float(0.5 * (depths[a] + depths[b])), bone_color, b,
                        hand_pose.left)
            )
    return segments, info


def render_frame(
    scene: SceneSpec,
    pose: CameraPose,
    intr: Intrinsics,
    hpp_vec: np.ndarray,
    skel: HandSkeletonSpec,
) -> np.ndarray:
    """Rasterize one frame, shape (3, h, w), float32 in [-1, 1].

    Depth-tested flat shapes for objects and hand bones, then beacon discs
    painted on top of everything in a deterministic shared-pixel pattern.
    """
    h, w = intr.height, intr.width
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = scene.background
    depth = np.full((h, w), np.inf)

    for obj in scene.objects:
        center = np.asarray(obj.center, dtype=np.float64)
        z = float(center @ pose.R[2] + pose.t[2])
        if z <= Z_NEAR:
            continue
        if obj.kind == "sphere":
            uv, _ = project(center[None], pose, intr)
            mask = _disc_mask(h, w, uv[0], intr.fx * obj.size / z)
        else:
            half = obj.size * 0.5
            corners = center + half * np.array(
                [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
            )
            depths = corners @ pose.R[2] + pose.t[2]
            if np.any(depths <= Z_NEAR):
                continue
            uv, _ = project(corners, pose, intr)
            mask = _hull_mask(h, w, _convex_hull(uv))
        sel = mask & (z < depth)
        img[sel] = obj.color
        depth[sel] = z

    segments, info = skeleton_segments(hpp_vec, pose, intr, skel)
    for seg in segments:
        r = np.clip(intr.fx * BONE_RADIUS_M / seg.depth, BONE_RADIUS_PX_MIN, BONE_RADIUS_PX_MAX)
        mask = _capsule_mask(h, w, seg.a, seg.b, float(r))
        sel = mask & (seg.depth < depth)
        img[sel] = seg.color
        depth[sel] = seg.depth

    # beacons paint over the scene in two passes. Joint discs share pixels
    # among themselves in a checker pattern so overlapping joints both stay
    # detectable. Fiducial discs paint after (over) joint discs in painter's
    # order, nearest last: the camera solve needs unbiased centroids, and one
    # pristine disc per overlap beats two half-eaten ones; the covered disc
    # simply drops below the detector's confidence gate.
    joint_req: list[tuple[np.ndarray, tuple[float, float, float], float]] = []
    if scene.render_joint_beacons:
        for key, colors in (("left", LEFT_JOINT_COLORS), ("right", skel.colors)):
            d = info[key]
            for j in range(21):
                if d["depth"][j] > Z_NEAR:
                    joint_req.append((d["uv"][j], tuple(colors[j]), scene.beacon_radius))

    if joint_req:
        masks = [_disc_mask(h, w, uv, radius) for uv, _, radius in joint_req]
        counts = np.zeros((h, w), dtype=np.int64)
        for m in masks:
            counts += m
        xi, yi = np.mgrid[0:h, 0:w]
        parity = yi + xi  # (row + col), deterministic pixel interleave
        rank = np.zeros((h, w), dtype=np.int64)
        for m, (uv, color, _) in zip(masks, joint_req):
            take = m & (rank == parity % np.maximum(counts, 1))
            img[take] = color
            rank += m

    fid_pts = np.array([f.position for f in scene.fiducials], dtype=np.float64)
    if fid_pts.size:
        uv_f, _ = project(fid_pts, pose, intr)
        depths_f = fid_pts @ pose.R[2] + pose.t[2]
        order = np.argsort(-depths_f)  # farthest first, nearest paints last
        for i in order:
            if depths_f[i] > Z_NEAR:
                m = _disc_mask(h, w, uv_f[i], scene.fiducial_radius)
                img[m] = scene.fiducials[i].color

    out = (img * 2.0 - 1.0).astype(np.float32)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def render_skeleton_control(
    hpp: np.ndarray,
    poses: list[CameraPose],
    intr: Intrinsics,
    skel: HandSkeletonSpec,
) -> np.ndarray:
    """Skeleton-only control video, shape (f, 3, h, w) in [-1, 1].

    Bones drawn as depth-tested strokes in the child joint's color, joint
    discs on top; black background, no scene content.
    """
    hpp = np.asarray(hpp, dtype=np.float64)
    f = hpp.shape[0]
    h, w = intr.height, intr.width
    out = np.empty((f, 3, h, w), dtype=np.float32)
    for i in range(f):
        img = np.zeros((h, w, 3), dtype=np.float64)
        depth = np.full((h, w), np.inf)
        segments, info = skeleton_segments(hpp[i], poses[i], intr, skel)
        for seg in segments:
            colors = LEFT_JOINT_COLORS if seg.left else skel.colors
            mask = _capsule_mask(h, w, seg.a, seg.b, CONTROL_STROKE_PX)
            sel = mask & (seg.depth < depth)
            img[sel] = colors[seg.joint]
            depth[sel] = seg.depth
        for key, colors in (("left", LEFT_JOINT_COLORS), ("right", skel.colors)):
            d = info[key]
            for j in range(21):
                if d["depth"][j] > Z_NEAR:
                    img[_disc_mask(h, w, d["uv"][j], CONTROL_JOINT_PX)] = colors[j]
        out[i] = (img * 2.0 - 1.0).transpose(2, 0, 1)
    return out


def render_mask_control(
    hpp: np.ndarray,
    poses: list[CameraPose],
    intr: Intrinsics,
    skel: HandSkeletonSpec,
) -> np.ndarray:
    """Binary hand-region mask video, shape (f, 1, h, w), values in {0, 1}.

    Dilated superset of the skeleton control strokes.
    """
    hpp = np.asarray(hpp, dtype=np.float64)
    f = hpp.shape[0]
    h, w = intr.height, intr.width
    out = np.zeros((f, 1, h, w), dtype=np.float32)
    for i in range(f):
        mask = np.zeros((h, w), dtype=bool)
        segments, info = skeleton_segments(hpp[i], poses[i], intr, skel)
        for seg in segments:
            mask |= _capsule_mask(h, w, seg.a, seg.b, CONTROL_STROKE_PX + MASK_DILATION_PX)
        for key in ("left", "right"):
            d = info[key]
            for j in range(21):
                if d["depth"][j] > Z_NEAR:
                    mask |= _disc_mask(h, w, d["uv"][j], CONTROL_JOINT_PX + MASK_DILATION_PX)
        out[i, 0] = mask
    return out


# ---------------------------------------------------------------------------
# camera paths

@dataclass(frozen=True)
class OrbitConfig:
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.52
    radius_amp: float = 0.04
    elevation: float = 0.45        # radians above the horizontal plane
    elevation_amp: float = 0.08
    azimuth_rate_max: float = 0.25  # rad/s drift around the target
    base_azimuth: float = -np.pi / 2.0
    azimuth_jitter: float = 0.5    # per-clip spread around base_azimuth


def camera_orbit(
    seed: int,
    frames: int,
    dt: float,
    cfg: OrbitConfig | None = None,
) -> list[CameraPose]:
    """Smooth deterministic orbit looking at the target.

    Viewpoints cluster in a wedge around base_azimuth rather than covering
    the full circle: a small generator can then learn the scene from one
    familiar family of views, while per-clip jitter, drift, and wobble keep
    every trajectory distinct.
    """
    cfg = cfg or OrbitConfig()
    rng = np.random.default_rng(seed)
    t = np.arange(frames, dtype=np.float64) * dt
    theta = (cfg.base_azimuth + cfg.azimuth_jitter * rng.uniform(-1, 1)
             + rng.uniform(-1, 1) * cfg.azimuth_rate_max * t)
    theta = theta + 0.05 * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))
    radius = cfg.radius + cfg.radius_amp * np.sin(
        2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi)
    )
    elev = cfg.elevation + cfg.elevation_amp * np.sin(
        2 * np.pi * rng.uniform(0.1, 0.25) * t + rng.uniform(0, 2 * np.pi)
    )
    target = np.asarray(cfg.target, dtype=np.float64)
    poses = []
    for i in range(frames):
        eye = target + radius[i] * np.array(
            [np.cos(elev[i]) * np.cos(theta[i]), np.cos(elev[i]) * np.sin(theta[i]), np.sin(elev[i])]
        )
        poses.append(look_at(eye, target))
    return poses


# ---------------------------------------------------------------------------
# clip records and the binary clip format

CLIP_MAGIC = b"EGWL"
CLIP_VERSION = 1
HPP_CHANNELS = 52
CAMERA_CHANNELS = 12


@dataclass
class ClipRecord:
    """One synthetic clip: frames plus aligned conditioning streams."""

    frames: np.ndarray    # (f, 3, h, w) float32, [-1, 1]
    hpp: np.ndarray       # (f, 52) float32
    camera: np.ndarray    # (f, 12) float32, row-major R then t
    joints2d: np.ndarray  # (f, 2, 21, 2) float32 pixels, hands ordered (left, right)

    def __post_init__(self) -> None:
        f = self.frames.shape[0]
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise SceneError("frames must be (f, 3, h, w)")
        if self.hpp.shape != (f, HPP_CHANNELS):
            raise SceneError("hpp must be (f, 52)")
        if self.camera.shape != (f, CAMERA_CHANNELS):
            raise SceneError("camera must be (f, 12)")
        if self.joints2d.shape != (f, 2, 21, 2):
            raise SceneError("joints2d must be (f, 2, 21, 2)")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def poses(self) -> list[CameraPose]:
        return [CameraPose.from_vector(v.astype(np.float64)) for v in self.camera]

    def validate_consistency(self, intr: Intrinsics, skel: HandSkeletonSpec,
                             tol: float = 1e-4) -> None:
        """joints2d must agree with reprojected forward kinematics."""
        for i in range(self.num_frames):
            left, right = devectorize(self.hpp[i].astype(np.float64))
            pose = CameraPose.from_vector(self.camera[i].astype(np.float64))
            for k, hand in enumerate((left, right)):
                uv, _ = project(forward_kinematics(hand, skel, validate=False), pose, intr)
                err = np.abs(uv - self.joints2d[i, k]).max()
                if err > tol:
                    raise SceneError(f"joints2d inconsistent at frame {i}: {err:.2e} px")


def write_clip(path: str, rec: ClipRecord) -> None:
    f, c, h, w = rec.frames.shape
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<II", CLIP_VERSION, 4))
        fh.write(struct.pack("<4I", f, c, h, w))
        for arr in (rec.frames, rec.hpp, rec.camera, rec.joints2d):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_clip(path: str) -> ClipRecord:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CLIP_MAGIC:
            raise SceneError(f"bad clip magic {magic!r}")
        version, ndims = struct.unpack("<II", fh.read(8))
        if version != CLIP_VERSION:
            raise SceneError(f"unsupported clip version {version}")
        if ndims != 4:
            raise SceneError(f"expected 4 dims, got {ndims}")
        f, c, h, w = struct.unpack("<4I", fh.read(16))
        sizes = [f * c * h * w, f * HPP_CHANNELS, f * CAMERA_CHANNELS, f * 2 * 21 * 2]
        payload = fh.read()
    need = 4 * sum(sizes)
    if len(payload) != need:
        raise SceneError(f"clip payload has {len(payload)} bytes, expected {need}")
    arrays = []
    off = 0
    for n in sizes:
        arrays.append(np.frombuffer(payload, dtype="<f4", count=n, offset=off).copy())
        off += 4 * n
    return ClipRecord(
        frames=arrays[0].reshape(f, c, h, w),
        hpp=arrays[1].reshape(f, HPP_CHANNELS),
        camera=arrays[2].reshape(f, CAMERA_CHANNELS),
        joints2d=arrays[3].reshape(f, 2, 21, 2),
    )


# ---------------------------------------------------------------------------
# dataset generation

@dataclass(frozen=True)
class DatasetConfig:
    train_clips: int = 256
    eval_clips: int = 32
    frames: int = 24
    height: int = 48
    width: int = 48
    fps: float = 16.0
    focal: float = 48.0
    seed: int = 0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0,
                          self.width, self.height)


def generate_clip(
    seed: int,
    cfg: DatasetConfig,
    scene: SceneSpec,
    skel: HandSkeletonSpec,
) -> ClipRecord:
    """Render one clip deterministically from its seed."""
    intr = cfg.intrinsics()
    dt = 1.0 / cfg.fps
    hpp = sample_trajectory(seed, skel, TrajectoryConfig(frames=cfg.frames, dt=dt))
    poses = camera_orbit(seed ^ 0x5EED, cfg.frames, dt)
    frames = np.empty((cfg.frames, 3, cfg.height, cfg.width), dtype=np.float32)
    joints2d = np.empty((cfg.frames, 2, 21, 2), dtype=np.float32)
    camera = np.empty((cfg.frames, CAMERA_CHANNELS), dtype=np.float32)
    for i in range(cfg.frames):
        frames[i] = render_frame(scene, poses[i], intr, hpp[i], skel)
        left, right = devectorize(hpp[i])
        for k, hand in enumerate((left, right)):
            uv, _ = project(forward_kinematics(hand, skel, validate=False), poses[i], intr)
            joints2d[i, k] = uv
        camera[i] = poses[i].as_vector()
    return ClipRecord(frames=frames, hpp=hpp.astype(np.float32), camera=camera, joints2d=joints2d)


MANIFEST_NAME = "manifest.json"


def generate_dataset(
    out_dir: str,
    cfg: DatasetConfig | None = None,
    scene: SceneSpec | None = None,
    skel: HandSkeletonSpec | None = None,
) -> dict:
    """Write train/eval clips plus a manifest; returns the manifest dict."""
    cfg = cfg or DatasetConfig()
    scene = scene or SceneSpec.default()
    skel = skel or HandSkeletonSpec.default()
    scene.validate(skel)
    os.makedirs(out_dir, exist_ok=True)
    splits: dict[str, list[dict]] = {}
    for split, count in (("train", cfg.train_clips), ("eval", cfg.eval_clips)):
        entries = []
        for i in range(count):
            seed = int(np.random.SeedSequence([cfg.seed, 0 if split == "train" else 1, i])
                       .generate_state(1)[0])
            rec = generate_clip(seed, cfg, scene, skel)
            name = f"{split}_{i:04d}.egwl"
            write_clip(os.path.join(out_dir, name), rec)
            entries.append({"file": name, "seed": seed, "frames": cfg.frames})
        splits[split] = entries
    manifest = {
        "version": 1,
        "frames": cfg.frames,
        "height": cfg.height,
        "width": cfg.width,
        "fps": cfg.fps,
        "intrinsics": {
            "fx": cfg.focal, "fy": cfg.focal,
            "cx": cfg.width / 2.0, "cy": cfg.height / 2.0,
            "width": cfg.width, "height": cfg.height,
        },
        "scene": scene.to_json(),
        "scene_sha256": scene_sha256(scene),
        "skeleton_sha256": skeleton_sha256(skel),
        "seed": cfg.seed,
        "splits": splits,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_manifest(data_dir: str) -> dict:
    with open(os.path.join(data_dir, MANIFEST_NAME), "r", encoding="utf-8") as f:
        return json.load(f)


def validate_manifest(data_dir: str, skel: HandSkeletonSpec | None = None) -> dict:
    """Check manifest integrity: files exist, hashes match. Returns the manifest."""
    manifest = load_manifest(data_dir)
    scene = SceneSpec.from_json(manifest["scene"])
    if scene_sha256(scene) != manifest["scene_sha256"]:
        raise SceneError("scene hash mismatch")
    if skel is not None and skeleton_sha256(skel) != manifest["skeleton_sha256"]:
        raise SceneError("skeleton hash mismatch")
    for split, entries in manifest["splits"].items():
        for e in entries:
            p = os.path.join(data_dir, e["file"])
            if not os.path.exists(p):
                raise SceneError(f"missing clip file {e['file']} in split {split}")
    return manifest


def manifest_intrinsics(manifest: dict) -> Intrinsics:
    ci = manifest["intrinsics"]
    return Intrinsics(ci["fx"], ci["fy"], ci["cx"], ci["cy"], int(ci["width"]), int(ci["height"]))
