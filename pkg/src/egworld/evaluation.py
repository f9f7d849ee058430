"""Metrics for generated clips: pixel fidelity, landmark accuracy, camera recovery.

Landmark evaluation exploits the renderer's color discipline: every joint and
fiducial beacon owns a palette color, so a detector that matches pixels within
a channel-wise tolerance and takes their weighted centroid recovers beacon
positions with sub-pixel accuracy on clean frames. Hand accuracy is the pixel
distance between detected and ground-truth joint positions; camera accuracy
comes from running PnP on detected fiducials.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .camera import CameraPose, Intrinsics, PoseEstimationError, estimate_pose_dlt
from .camera import project, refine_pose, rotation_error_deg, translation_error
from .codec import decode_video
from .conditioning import parse_strategy
from .flow import BatchBuilder, ClipDataset, SamplerConfig, TrainConfig, Trainer, sample_euler
from .hand import HandSkeletonSpec
from .scene import LEFT_JOINT_COLORS, SceneSpec

DETECT_TAU = 48.0 / 255.0
VISIBLE_CONFIDENCE = 0.25


class EvaluationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# pixel metrics

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for frames in [-1, 1], peak = 1.

    Values are compared on the [0, 1] scale; identical inputs cap at 100 dB.
    """
    x = (np.asarray(a, dtype=np.float64) + 1.0) * 0.5
    y = (np.asarray(b, dtype=np.float64) + 1.0) * 0.5
    if x.shape != y.shape:
        raise EvaluationError("shape mismatch")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a uniform window, data range 1.

    Inputs are (c, h, w) or (f, c, h, w) in [-1, 1]; channels are scored
    independently and averaged. Borders use reflected padding.
    """
    x = (np.asarray(a, dtype=np.float64) + 1.0) * 0.5
    y = (np.asarray(b, dtype=np.float64) + 1.0) * 0.5
    if x.shape != y.shape:
        raise EvaluationError("shape mismatch")
    if x.ndim == 3:
        x = x[None]
        y = y[None]
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    vals = []
    for f in range(x.shape[0]):
        for c in range(x.shape[1]):
            p, q = x[f, c], y[f, c]
            mu1 = uniform_filter(p, window, mode="reflect")
            mu2 = uniform_filter(q, window, mode="reflect")
            s1 = uniform_filter(p * p, window, mode="reflect") - mu1 * mu1
            s2 = uniform_filter(q * q, window, mode="reflect") - mu2 * mu2
            s12 = uniform_filter(p * q, window, mode="reflect") - mu1 * mu2
            num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
            den = (mu1 * mu1 + mu2 * mu2 + c1) * (s1 + s2 + c2)
            vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# rigid/similarity alignment

def procrustes_align(source: np.ndarray, target: np.ndarray):
    """Least-squares similarity transform (scale, rotation, translation).

    Returns (s, R, t, aligned) with aligned = s * source @ R.T + t minimizing
    the squared distance to target. Works for any point dimension >= 2.
    """
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise EvaluationError("need matching (n, d) point sets")
    n, d = X.shape
    if n < d:
        raise EvaluationError("not enough points for alignment")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    cov = Yc.T @ Xc / n
    U, S, Vt = np.linalg.svd(cov)
    sign = np.ones(d)
    if np.linalg.det(U @ Vt) < 0:
        sign[-1] = -1.0
    R = U @ np.diag(sign) @ Vt
    var_x = float(np.sum(Xc * Xc)) / n
    if var_x < 1e-18:
        raise EvaluationError("degenerate source points")
    s = float(np.sum(S * sign)) / var_x
    t = my - s * R @ mx
    aligned = s * X @ R.T + t
    return s, R, t, aligned


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray,
             visible: np.ndarray | None = None) -> float | None:
    """Procrustes-aligned mean joint position error.

    Joints are filtered by the visibility mask first; returns None when fewer
    than 3 joints remain (alignment would be meaningless).
    """
    P = np.asarray(pred, dtype=np.float64)
    G = np.asarray(gt, dtype=np.float64)
    if visible is not None:
        P = P[visible]
        G = G[visible]
    if P.shape[0] < 3:
        return None
    try:
        _, _, _, aligned = procrustes_align(P, G)
    except EvaluationError:
        return None
    return float(np.mean(np.linalg.norm(aligned - G, axis=1)))


# ---------------------------------------------------------------------------
# landmark detection

def detect_landmarks(frame: np.ndarray, palette: np.ndarray,
                     radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Find one beacon per palette color in a (3, h, w) frame in [-1, 1].

    A pixel matches a color when every channel is within 48/255 of it. The
    position is the distance-weighted centroid of matching pixels inside a
    window centered on the best-matching pixel. The window (half-width one
    disc diameter) always contains every match of an exact render, and on
    soft generated imagery it keeps stray far-field matches from dragging
    the centroid toward the frame mean. Confidence is the windowed match
    count over the nominal disc area.
    Returns (positions (n,2), confidence (n,), visible (n,)).
    """
    img = (np.asarray(frame, dtype=np.float64) + 1.0) * 0.5
    if img.ndim != 3 or img.shape[0] != 3:
        raise EvaluationError("frame must be (3, h, w)")
    pal = np.asarray(palette, dtype=np.float64)
    h, w = img.shape[1], img.shape[2]
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = xx + 0.5, yy + 0.5
    dist = np.abs(img[None, :, :, :] - pal[:, :, None, None]).max(axis=1)  # (n, h, w)
    match = dist <= DETECT_TAU
    weights = np.where(match, 1.0 - dist / DETECT_TAU, 0.0)
    area = np.pi * radius * radius
    win = 2.0 * radius + 0.5
    n = pal.shape[0]
    pos = np.zeros((n, 2), dtype=np.float64)
    conf = np.zeros(n, dtype=np.float64)
    for i in range(n):
        if not match[i].any():
            pos[i] = np.nan
            continue
        by, bx = np.unravel_index(int(np.argmin(dist[i])), (h, w))
        local = (np.abs(cy - (by + 0.5)) <= win) & (np.abs(cx - (bx + 0.5)) <= win)
        wloc = np.where(local, weights[i], 0.0)
        wsum = wloc.sum()
        if wsum <= 0.0:
            pos[i] = np.nan
            continue
        conf[i] = min(1.0, float((match[i] & local).sum()) / area)
        pos[i, 0] = float((wloc * cx).sum() / wsum)
        pos[i, 1] = float((wloc * cy).sum() / wsum)
    return pos, conf, conf >= VISIBLE_CONFIDENCE


def hand_palette(skel: HandSkeletonSpec) -> np.ndarray:
    """Detection palette in joints2d order: left hand block then right."""
    return np.concatenate([LEFT_JOINT_COLORS, skel.colors], axis=0)


def landmark_l2_error(
    pred_pos: np.ndarray, pred_vis: np.ndarray,
    gt_pos: np.ndarray, gt_vis: np.ndarray,
    image_size: tuple[int, int],
) -> tuple[float | None, int, int]:
    """Mean pixel error over ground-truth-visible landmarks.

    A GT-visible landmark the detector missed costs half the image diagonal.
    Returns (mean_error, scored, missed); mean is None with no visible GT.
    """
    h, w = image_size
    penalty = 0.5 * float(np.hypot(h, w))
    idx = np.where(gt_vis)[0]
    if idx.size == 0:
        return None, 0, 0
    errs = []
    missed = 0
    for i in idx:
        if pred_vis[i] and np.isfinite(pred_pos[i]).all():
            errs.append(float(np.linalg.norm(pred_pos[i] - gt_pos[i])))
        else:
            errs.append(penalty)
            missed += 1
    return float(np.mean(errs)), int(idx.size), missed


# ---------------------------------------------------------------------------
# camera recovery from fiducials

FIDUCIAL_CONFIDENCE = 0.95
FIDUCIAL_BORDER_PX = 1.0


def estimate_trajectory(
    frames: np.ndarray,
    scene: SceneSpec,
    intr: Intrinsics,
    min_confidence: float = FIDUCIAL_CONFIDENCE,
) -> tuple[list[CameraPose | None], list[float]]:
    """Recover per-frame camera poses from detected fiducial beacons.

    Only near-complete fiducial discs are used: a beacon mostly covered by
    another disc or cut off by the image border has a biased centroid that
    would poison the fit. Frames with fewer than 6 trusted fiducials yield
    None. DLT gives the starting pose, Gauss-Newton refinement on the
    reprojection error sharpens it, and one trimming pass drops points whose
    residual stands far above the rest (a disc that kept just enough mass to
    pass the confidence gate can still carry a shifted centroid).

    The default confidence gate assumes pixel-exact renders. Model output has
    soft beacon edges that shave matched area off every disc, so callers
    scoring generated frames should lower min_confidence rather than lose
    every frame; the trimmed refit still protects the pose from the worst
    centroids. Returns (poses, per-frame rms px).
    """
    pal = np.array([f.color for f in scene.fiducials], dtype=np.float64)
    pts3d = np.array([f.position for f in scene.fiducials], dtype=np.float64)
    margin = FIDUCIAL_BORDER_PX
    poses: list[CameraPose | None] = []
    rms_list: list[float] = []
    for i in range(frames.shape[0]):
        pos, conf, _ = detect_landmarks(frames[i], pal, scene.fiducial_radius)
        keep = (conf >= min_confidence) & np.isfinite(pos).all(axis=1)
        keep &= (pos[:, 0] >= margin) & (pos[:, 0] <= intr.width - margin)
        keep &= (pos[:, 1] >= margin) & (pos[:, 1] <= intr.height - margin)
        if keep.sum() < 6:
            poses.append(None)
            continue
        try:
            pose, rms = _fit_frame_pose(pts3d[keep], pos[keep], intr)
        except PoseEstimationError:
            poses.append(None)
            continue
        poses.append(pose)
        rms_list.append(rms)
    return poses, rms_list


def _fit_frame_pose(
    pts3d: np.ndarray, pts2d: np.ndarray, intr: Intrinsics
) -> tuple[CameraPose, float]:
    """DLT + Gauss-Newton, then refit once without clear residual outliers."""
    pose, _ = estimate_pose_dlt(pts3d, pts2d, intr)
    pose, rms = refine_pose(pose, pts3d, pts2d, intr)
    proj, _ = project(pts3d, pose, intr)
    resid = np.linalg.norm(proj - pts2d, axis=1)
    cutoff = max(3.0 * float(np.median(resid)), 0.3)
    good = resid <= cutoff
    if good.sum() >= 6 and 0 < int((~good).sum()):
        try:
            pose2, _ = estimate_pose_dlt(pts3d[good], pts2d[good], intr)
            pose2, rms2 = refine_pose(pose2, pts3d[good], pts2d[good], intr)
        except PoseEstimationError:
            return pose, rms
        if rms2 < rms:
            pose, rms = pose2, rms2
    return pose, rms


def trajectory_errors(
    estimated: list[CameraPose | None], reference: list[CameraPose]
) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-frame rotation (deg) and camera-center (m) errors; skips misses."""
    rot, trans = [], []
    missing = 0
    for est, ref in zip(estimated, reference):
        if est is None:
            missing += 1
            continue
        rot.append(rotation_error_deg(est, ref))
        trans.append(translation_error(est, ref))
    return np.array(rot), np.array(trans), missing


# ---------------------------------------------------------------------------
# clip-level evaluation and the ablation harness

@dataclass
class ClipScores:
    psnr: float
    ssim: float
    l2_err_px: float | None
    pa_mpjpe_px: float | None
    rot_err_deg: float | None
    trans_err_m: float | None
    missed_landmarks: int
    scored_landmarks: int


def _gt_joint_visibility(joints2d: np.ndarray, intr: Intrinsics) -> np.ndarray:
    u, v = joints2d[..., 0], joints2d[..., 1]
    return (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)


def evaluate_window(
    model, builder: BatchBuilder, clip_idx: int, *,
    frames: int = 12, sampler: SamplerConfig = SamplerConfig(steps=16),
    seed: int = 0,
) -> tuple[ClipScores, np.ndarray]:
    """Sample a window conditioned on its first frame and score it against
    ground truth. Returns the scores and the generated frames."""
    ds = builder.ds
    rec = ds.clips[clip_idx]
    z0, inputs = builder.window(clip_idx, 0, frames)
    cache = model.encode_conditioning(inputs)
    ctx = z0[:, :1]
    zhat = sample_euler(model, cache, tuple(z0.shape), seed, sampler, z_context=ctx)
    gen = decode_video(zhat, 2).clamp(-1.0, 1.0)[0].detach().cpu().numpy()
    gt = rec.frames[:frames]

    # score generated frames only (frame 0 is the clamped context)
    gen_s, gt_s = gen[1:], gt[1:]
    scores_psnr = psnr(gen_s, gt_s)
    scores_ssim = ssim(gen_s, gt_s)

    skel = ds.skel
    intr = ds.intrinsics
    pal = hand_palette(skel)
    gt_joints = rec.joints2d[:frames].reshape(frames, 42, 2)
    gt_vis = _gt_joint_visibility(gt_joints, intr)
    l2_vals, mpjpe_vals = [], []
    missed = scored = 0
    for i in range(1, frames):
        pos, conf, vis = detect_landmarks(gen[i], pal, ds.scene.beacon_radius)
        l2, ns, nm = landmark_l2_error(pos, vis, gt_joints[i], gt_vis[i],
                                       (intr.height, intr.width))
        if l2 is not None:
            l2_vals.append(l2)
            scored += ns
            missed += nm
        for hand in range(2):
            sl = slice(hand * 21, hand * 21 + 21)
            both = vis[sl] & gt_vis[i, sl]
            both[0] = False  # wrist excluded from articulated alignment
            m = pa_mpjpe(pos[sl], gt_joints[i, sl], both)
            if m is not None:
                mpjpe_vals.append(m)

    # generated beacons have soft edges; a relaxed gate keeps frames scoreable
    est_poses, _ = estimate_trajectory(gen[1:], ds.scene, intr,
                                       min_confidence=0.5)
    ref_poses = rec.poses()[1:frames]
    rot, trans, _ = trajectory_errors(est_poses, ref_poses)

    scores = ClipScores(
        psnr=scores_psnr,
        ssim=scores_ssim,
        l2_err_px=float(np.mean(l2_vals)) if l2_vals else None,
        pa_mpjpe_px=float(np.mean(mpjpe_vals)) if mpjpe_vals else None,
        rot_err_deg=float(np.mean(rot)) if rot.size else None,
        trans_err_m=float(np.mean(trans)) if trans.size else None,
        missed_landmarks=missed,
        scored_landmarks=scored,
    )
    return scores, gen


def evaluate_model(
    model, dataset: ClipDataset, *, frames: int = 12,
    sampler: SamplerConfig = SamplerConfig(steps=16), seed: int = 0,
    max_clips: int | None = None,
) -> dict:
    """Average evaluate_window over the dataset's clips."""
    builder = BatchBuilder(dataset, model.strategy,
                           next(model.parameters()).dtype)
    n = len(dataset) if max_clips is None else min(max_clips, len(dataset))
    fields = ["psnr", "ssim", "l2_err_px", "pa_mpjpe_px", "rot_err_deg", "trans_err_m"]
    sums = {k: [] for k in fields}
    for i in range(n):
        scores, _ = evaluate_window(model, builder, i, frames=frames,
                                    sampler=sampler, seed=seed + i)
        for k in fields:
            v = getattr(scores, k)
            if v is not None:
                sums[k].append(v)
    out = {k: (float(np.mean(v)) if v else None) for k, v in sums.items()}
    out["clips"] = n
    return out


def format_metric(v: float | None, digits: int = 3) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def ablation_run(
    data_dir: str,
    strategies: list[str],
    model_cfg_base,
    train_cfg: TrainConfig,
    out_dir: str,
    *,
    eval_frames: int = 12,
    sampler: SamplerConfig = SamplerConfig(steps=16),
    eval_seed: int = 0,
    max_eval_clips: int | None = None,
) -> list[dict]:
    """Train one model per strategy on the same data and seed, then score
    them on the eval split. Writes ablation.csv and ablation.md."""
    from dataclasses import replace as dc_replace

    from .backbone import build_velocity_model

    os.makedirs(out_dir, exist_ok=True)
    train_ds = ClipDataset(data_dir, "train")
    eval_ds = ClipDataset(data_dir, "eval")
    rows = []
    for strat in strategies:
        strat = parse_strategy(strat).value
        cfg = dc_replace(model_cfg_base, strategy=strat)
        model = build_velocity_model(cfg, seed=train_cfg.seed)
        builder = BatchBuilder(train_ds, model.strategy)
        t0 = time.perf_counter()
        trainer = Trainer(model, builder, train_cfg,
                          metrics_path=os.path.join(out_dir, f"train_{strat}.jsonl"))
        last = trainer.run(checkpoint_path=os.path.join(out_dir, f"model_{strat}.egwt"))
        train_s = time.perf_counter() - t0
        t1 = time.perf_counter()
        metrics = evaluate_model(model, eval_ds, frames=eval_frames, sampler=sampler,
                                 seed=eval_seed, max_clips=max_eval_clips)
        eval_s = time.perf_counter() - t1
        row = {
            "strategy": strat,
            "steps": train_cfg.steps,
            "final_loss": round(last.get("loss", float("nan")), 6),
            **{k: metrics[k] for k in
               ("psnr", "ssim", "l2_err_px", "pa_mpjpe_px", "rot_err_deg", "trans_err_m")},
            "eval_clips": metrics["clips"],
            "train_s": round(train_s, 1),
            "eval_s": round(eval_s, 1),
        }
        rows.append(row)
    _write_ablation_tables(out_dir, rows)
    return rows


def _write_ablation_tables(out_dir: str, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0].keys())
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
    with open(os.path.join(out_dir, "ablation.md"), "w") as f:
        f.write("| " + " | ".join(cols) + " |\n")
        f.write("|" + "---|" * len(cols) + "\n")
        for r in rows:
            cells = []
            for k in cols:
                v = r[k]
                if isinstance(v, float):
                    cells.append(format_metric(v))
                else:
                    cells.append("n/a" if v is None else str(v))
            f.write("| " + " | ".join(cells) + " |\n")
    with open(os.path.join(out_dir, "ablation.json"), "w") as f:
        json.dump(rows, f, indent=1)
