import csv
import json
import os

import numpy as np
import pytest

from egworld.backbone import ModelConfig
from egworld.evaluation import (
    EvaluationError,
    PSNR_CAP,
    VISIBLE_CONFIDENCE,
    ablation_run,
    detect_landmarks,
    estimate_trajectory,
    format_metric,
    hand_palette,
    landmark_l2_error,
    pa_mpjpe,
    procrustes_align,
    psnr,
    ssim,
    trajectory_errors,
)
from egworld.flow import SamplerConfig, TrainConfig
from egworld.hand import HandSkeletonSpec
from egworld.scene import (
    DatasetConfig,
    SceneSpec,
    generate_clip,
    generate_dataset,
    grid_color,
)

SMALL_MODEL = dict(depth=2, width=32, heads=2, mlp_ratio=2.0, patch=4,
                   stride=2, channels=3, image_size=(48, 48), max_frames=12)


@pytest.fixture(scope="module")
def skel():
    return HandSkeletonSpec.default()


@pytest.fixture(scope="module")
def scene(skel):
    s = SceneSpec.default()
    s.validate(skel)
    return s


# ---------------------------------------------------------------------------
# pixel metrics

def test_psnr_matches_closed_form():
    # constant offset of 0.2 on the [0, 1] scale -> mse 0.04 exactly
    a = np.full((3, 8, 8), -1.0)
    b = np.full((3, 8, 8), -0.6)
    expected = 10.0 * np.log10(1.0 / 0.04)
    assert abs(psnr(a, b) - expected) < 1e-9
    assert abs(psnr(b, a) - expected) < 1e-9


def test_psnr_identical_hits_cap():
    a = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
    assert psnr(a, a.copy()) == PSNR_CAP


def test_psnr_shape_mismatch_raises():
    with pytest.raises(EvaluationError):
        psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


def test_ssim_identical_is_one():
    a = np.random.default_rng(1).uniform(-1, 1, (3, 16, 16))
    assert abs(ssim(a, a.copy()) - 1.0) < 1e-9


def test_ssim_constant_images_closed_form():
    # zero variance collapses ssim to the luminance term
    a = np.full((3, 16, 16), 0.2)   # 0.6 on the [0, 1] scale
    b = np.full((3, 16, 16), -0.4)  # 0.3
    c1 = 0.01 ** 2
    expected = (2 * 0.6 * 0.3 + c1) / (0.6 ** 2 + 0.3 ** 2 + c1)
    assert abs(ssim(a, b) - expected) < 1e-9


def test_ssim_symmetric_and_noise_lowers():
    rng = np.random.default_rng(2)
    a = rng.uniform(-1, 1, (3, 24, 24))
    b = np.clip(a + rng.normal(0, 0.5, a.shape), -1, 1)
    s_ab, s_ba = ssim(a, b), ssim(b, a)
    assert abs(s_ab - s_ba) < 1e-9
    assert s_ab < 0.8
    assert -1.0 <= s_ab <= 1.0


def test_ssim_accepts_frame_stacks():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, (2, 3, 16, 16))
    assert abs(ssim(a, a.copy()) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# alignment

def _random_rotation(rng, d=3):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    if np.linalg.det(q) < 0:
        q[:, -1] *= -1
    return q


def test_procrustes_recovers_similarity_exactly():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(12, 3))
    r_true = _random_rotation(rng)
    y = 2.3 * x @ r_true.T + np.array([0.5, -1.0, 2.0])
    s, r, t, aligned = procrustes_align(x, y)
    assert np.abs(aligned - y).max() < 1e-9
    assert abs(s - 2.3) < 1e-9
    assert np.abs(r - r_true).max() < 1e-9
    assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_procrustes_rejects_degenerate_input():
    with pytest.raises(EvaluationError):
        procrustes_align(np.zeros((5, 3)), np.random.default_rng(5).normal(size=(5, 3)))
    with pytest.raises(EvaluationError):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))  # fewer points than dims


def test_pa_mpjpe_invariant_under_similarity():
    rng = np.random.default_rng(6)
    gt = rng.normal(size=(21, 3))
    pred = 1.7 * gt @ _random_rotation(rng).T + np.array([3.0, -2.0, 0.5])
    err = pa_mpjpe(pred, gt)
    assert err is not None and err < 1e-9


def test_pa_mpjpe_needs_three_visible():
    pts = np.random.default_rng(7).normal(size=(21, 2))
    vis = np.zeros(21, dtype=bool)
    vis[:2] = True
    assert pa_mpjpe(pts, pts, vis) is None
    vis[2] = True
    assert pa_mpjpe(pts, pts, vis) is not None


def test_pa_mpjpe_matches_linear_oracle_in_2d():
    # in 2d, rotation+scale+translation is one complex linear model
    # w = a*z + b, so least squares on it is an independent optimum
    rng = np.random.default_rng(8)
    gt = rng.normal(size=(10, 2))
    pred = gt + rng.normal(0, 0.1, gt.shape)
    z = pred[:, 0] + 1j * pred[:, 1]
    w = gt[:, 0] + 1j * gt[:, 1]
    A = np.stack([z, np.ones_like(z)], axis=1)
    coef, *_ = np.linalg.lstsq(A, w, rcond=None)
    resid = A @ coef - w
    oracle = float(np.mean(np.abs(resid)))
    value = pa_mpjpe(pred, gt)
    assert value is not None
    assert abs(value - oracle) < 1e-9


# ---------------------------------------------------------------------------
# landmark detection

def _paint_disc(img, center, radius, color):
    h, w = img.shape[1], img.shape[2]
    yy, xx = np.mgrid[0:h, 0:w]
    m = np.hypot(xx + 0.5 - center[0], yy + 0.5 - center[1]) <= radius
    img[:, m] = np.asarray(color, dtype=np.float64).reshape(3, 1) * 2.0 - 1.0
    return m


def test_detect_landmarks_centroid_and_confidence():
    img = np.full((3, 48, 48), -1.0)
    center = (20.3, 31.7)
    _paint_disc(img, center, 3.0, grid_color(5))
    pal = np.array([grid_color(5), grid_color(9)], dtype=np.float64)
    pos, conf, vis = detect_landmarks(img, pal, 3.0)
    assert vis[0] and not vis[1]
    assert np.hypot(pos[0, 0] - center[0], pos[0, 1] - center[1]) < 0.5
    assert conf[0] >= 0.9
    assert conf[1] == 0.0 and np.isnan(pos[1]).all()


def test_detect_landmarks_empty_frame_all_invisible():
    img = np.full((3, 48, 48), -1.0)
    pal = np.array([grid_color(i) for i in range(1, 6)], dtype=np.float64)
    pos, conf, vis = detect_landmarks(img, pal, 1.0)
    assert not vis.any()
    assert np.isnan(pos).all()


def test_detect_landmarks_shared_pixels_keep_both():
    # two colors interleaved inside one disc: both beacons must survive
    img = np.full((3, 48, 48), -1.0)
    center = (24.0, 24.0)
    m = _paint_disc(img, center, 3.0, grid_color(5))
    yy, xx = np.mgrid[0:48, 0:48]
    odd = ((yy + xx) % 2 == 1) & m
    img[:, odd] = np.asarray(grid_color(9), dtype=np.float64).reshape(3, 1) * 2.0 - 1.0
    pal = np.array([grid_color(5), grid_color(9)], dtype=np.float64)
    pos, conf, vis = detect_landmarks(img, pal, 3.0)
    assert vis.all()
    for i in range(2):
        assert np.hypot(pos[i, 0] - center[0], pos[i, 1] - center[1]) < 1.0
        assert conf[i] >= VISIBLE_CONFIDENCE


def test_rendered_joints_detected_within_one_pixel(scene, skel):
    cfg = DatasetConfig(train_clips=1, eval_clips=1, frames=6, seed=0)
    intr = cfg.intrinsics()
    pal = hand_palette(skel)
    checked = hits = 0
    for seed in (11, 12):
        rec = generate_clip(seed, cfg, scene, skel)
        joints = rec.joints2d.reshape(rec.num_frames, 42, 2)
        u, v = joints[..., 0], joints[..., 1]
        gt_vis = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        for f in range(rec.num_frames):
            pos, conf, vis = detect_landmarks(rec.frames[f], pal, scene.beacon_radius)
            for j in range(42):
                if not gt_vis[f, j]:
                    continue
                checked += 1
                if vis[j]:
                    hits += 1
                    err = np.linalg.norm(pos[j] - joints[f, j])
                    assert err <= 1.0, f"seed {seed} frame {f} joint {j}: {err:.3f}px"
    assert checked > 200
    assert hits / checked > 0.7  # occlusion misses happen, wholesale failure must not


def test_landmark_l2_error_penalizes_misses():
    gt_pos = np.array([[10.0, 10.0], [20.0, 20.0], [30.0, 30.0], [40.0, 40.0]])
    gt_vis = np.array([True, True, True, False])
    pred = gt_pos + np.array([[0.5, 0.0], [0.0, 0.5], [0.0, 0.0], [9.0, 9.0]])
    pred_vis = np.array([True, True, False, True])
    mean, scored, missed = landmark_l2_error(pred, pred_vis, gt_pos, gt_vis, (48, 48))
    penalty = 0.5 * np.hypot(48, 48)
    assert scored == 3 and missed == 1
    assert abs(mean - (0.5 + 0.5 + penalty) / 3.0) < 1e-12


def test_landmark_l2_error_no_visible_gt():
    pos = np.zeros((4, 2))
    none_vis = np.zeros(4, dtype=bool)
    mean, scored, missed = landmark_l2_error(pos, none_vis, pos, none_vis, (48, 48))
    assert mean is None and scored == 0 and missed == 0


# ---------------------------------------------------------------------------
# trajectory recovery

def test_estimate_trajectory_tracks_rendered_orbit(scene, skel):
    cfg = DatasetConfig(train_clips=1, eval_clips=1, frames=12, seed=0)
    intr = cfg.intrinsics()
    rots, transs = [], []
    for seed in (21, 22):
        rec = generate_clip(seed, cfg, scene, skel)
        est, rms = estimate_trajectory(rec.frames, scene, intr)
        assert len(est) == rec.num_frames and len(rms) == rec.num_frames
        rot, trans, missing = trajectory_errors(est, rec.poses())
        assert missing == 0
        rots.append(rot)
        transs.append(trans)
    rot = np.concatenate(rots)
    trans = np.concatenate(transs)
    assert rot.mean() < 0.5
    assert trans.mean() < 0.01


def test_estimate_trajectory_flags_blank_frames(scene):
    frames = np.full((3, 3, 48, 48), -1.0, dtype=np.float32)
    intr = DatasetConfig(train_clips=1, eval_clips=1, frames=3).intrinsics()
    est, rms = estimate_trajectory(frames, scene, intr)
    assert est == [None, None, None]
    rot, trans, missing = trajectory_errors(est, [None] * 3)
    assert missing == 3 and rot.size == 0 and trans.size == 0


def test_trajectory_errors_on_exact_poses(scene, skel):
    cfg = DatasetConfig(train_clips=1, eval_clips=1, frames=4, seed=0)
    rec = generate_clip(31, cfg, scene, skel)
    poses = rec.poses()
    rot, trans, missing = trajectory_errors(poses, poses)
    assert missing == 0
    # stored rotations are float32; arccos near zero angle turns that
    # orthonormality error into ~sqrt(eps) radians, so allow a few hundredths
    assert rot.max() < 0.05 and trans.max() < 1e-12


# ---------------------------------------------------------------------------
# harness

def test_format_metric():
    assert format_metric(None) == "n/a"
    assert format_metric(1.23456) == "1.235"
    assert format_metric(0.5, digits=1) == "0.5"


def test_ablation_run_writes_tables(tmp_path):
    data_dir = str(tmp_path / "data")
    out_dir = str(tmp_path / "ablate")
    generate_dataset(data_dir, DatasetConfig(train_clips=2, eval_clips=1,
                                             frames=10, seed=5))
    rows = ablation_run(
        data_dir,
        ["none", "token_add"],
        ModelConfig(**SMALL_MODEL),
        TrainConfig(steps=4, batch=2, lr=1e-3, frames=8, seed=3),
        out_dir,
        eval_frames=8,
        sampler=SamplerConfig(steps=4),
        max_eval_clips=1,
    )
    assert [r["strategy"] for r in rows] == ["none", "token_add"]
    for strat in ("none", "token_add"):
        assert os.path.exists(os.path.join(out_dir, f"model_{strat}.egwt"))
        assert os.path.exists(os.path.join(out_dir, f"train_{strat}.jsonl"))

    with open(os.path.join(out_dir, "ablation.json")) as f:
        round_trip = json.load(f)
    assert round_trip == json.loads(json.dumps(rows))

    with open(os.path.join(out_dir, "ablation.csv")) as f:
        parsed = list(csv.DictReader(f))
    assert len(parsed) == 2
    assert set(parsed[0]) == set(rows[0])
    for row in parsed:
        assert float(row["psnr"]) > 0

    with open(os.path.join(out_dir, "ablation.md")) as f:
        lines = f.read().strip().splitlines()
    assert len(lines) == 2 + len(rows)  # header, separator, one line per run
    assert lines[0].startswith("| strategy |")
