"""Rectified-flow training and sampling for the latent video model.

The forward process is linear interpolation z_t = (1 - t) z_0 + t eps between
data and unit Gaussian noise; the regression target for the velocity field is
the constant difference eps - z_0. Sampling integrates the learned field with
explicit Euler steps from t = 1 down to t = 0.

Conditioning on earlier frames works by clamping: context frames are held at
their clean latents at every step and excluded from the loss. Long videos come
from chunked autoregressive rollout where each chunk's first frames are
clamped bit-exactly to the tail of the previous chunk.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .backbone import ModelConfig, VelocityModel, build_velocity_model, save_checkpoint
from .camera import CameraPose, pluecker_embedding
from .codec import encode_video
from .conditioning import (
    CondCache,
    CondInputs,
    Strategy,
    parse_strategy,
    uses_camera,
    uses_control_video,
    uses_motion,
)
from .hand import HandSkeletonSpec
from .scene import (
    ClipRecord,
    SceneSpec,
    manifest_intrinsics,
    read_clip,
    render_mask_control,
    render_skeleton_control,
    scene_descriptor,
    validate_manifest,
)


class FlowError(RuntimeError):
    """Invalid training/sampling configuration or inputs."""


def noise_interp(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """z_t = (1 - t) z_0 + t eps with one scalar t per batch item."""
    if t.ndim != 1 or t.shape[0] != z0.shape[0]:
        raise FlowError("t must be one scalar per batch item")
    tt = t.reshape(-1, *([1] * (z0.ndim - 1)))
    return (1.0 - tt) * z0 + tt * eps


def velocity_target(z0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return eps - z0


def cfm_loss(
    model: VelocityModel,
    z0: torch.Tensor,
    cache: CondCache,
    t: torch.Tensor,
    eps: torch.Tensor,
    ctx_len: torch.Tensor,
) -> torch.Tensor:
    """Masked conditional flow-matching loss.

    ctx_len gives per-sample counts of leading context frames; those frames
    stay clean in the input and are excluded from the loss.
    """
    b, f = z0.shape[0], z0.shape[1]
    z_t = noise_interp(z0, eps, t)
    frame_idx = torch.arange(f, device=z0.device)
    ctx_mask = frame_idx[None, :] < ctx_len[:, None]          # (b, f) True = context
    clamp = ctx_mask.reshape(b, f, 1, 1, 1)
    z_t = torch.where(clamp, z0, z_t)
    v = model(z_t, t, cache)
    err = (v - velocity_target(z0, eps)) ** 2
    keep = (~clamp).to(err.dtype)
    denom = keep.sum() * z0.shape[2] * z0.shape[3] * z0.shape[4]
    if denom == 0:
        raise FlowError("every frame is context; nothing to train on")
    return (err * keep).sum() / denom


# ---------------------------------------------------------------------------
# staged training schedule

@dataclass(frozen=True)
class StagePlan:
    name: str
    suppress_motion: bool
    suppress_camera: bool


STAGE_CAMERA = StagePlan("camera", suppress_motion=True, suppress_camera=False)
STAGE_HAND = StagePlan("hand", suppress_motion=False, suppress_camera=True)
STAGE_JOINT = StagePlan("joint", suppress_motion=False, suppress_camera=False)


def iterative_schedule(fractions: tuple[float, float, float], total_steps: int):
    """Stage lookup for two-encoder training: camera-only, then hand-only,
    then everything. Boundaries at floor(fraction * total_steps)."""
    if len(fractions) != 3 or min(fractions) < 0:
        raise FlowError("need three non-negative stage fractions")
    s = sum(fractions)
    if s <= 0:
        raise FlowError("stage fractions sum to zero")
    f1, f2, _ = (x / s for x in fractions)
    b1 = math.floor(f1 * total_steps)
    b2 = math.floor((f1 + f2) * total_steps)

    def stage_at(step: int) -> StagePlan:
        if step < b1:
            return STAGE_CAMERA
        if step < b2:
            return STAGE_HAND
        return STAGE_JOINT

    return stage_at, (b1, b2)


# ---------------------------------------------------------------------------
# dataset access and batch assembly

class ClipDataset:
    """In-memory clip corpus from a generated data directory."""

    def __init__(self, data_dir: str, split: str = "train",
                 skel: HandSkeletonSpec | None = None) -> None:
        self.skel = skel or HandSkeletonSpec.default()
        self.manifest = validate_manifest(data_dir, self.skel)
        self.intrinsics = manifest_intrinsics(self.manifest)
        self.scene = SceneSpec.from_json(self.manifest["scene"])
        entries = self.manifest["splits"].get(split)
        if not entries:
            raise FlowError(f"split {split!r} is empty or missing")
        self.clips = [read_clip(os.path.join(data_dir, e["file"])) for e in entries]
        self.frames = int(self.manifest["frames"])
        self.fps = float(self.manifest["fps"])

    def __len__(self) -> int:
        return len(self.clips)


class BatchBuilder:
    """Turns clip windows into model-ready latents and conditioning inputs.

    Control videos are rendered from ground-truth pose/camera streams once per
    clip and cached; ray maps are computed per batch.
    """

    def __init__(self, dataset: ClipDataset, strategy: Strategy,
                 dtype: torch.dtype = torch.float32) -> None:
        self.ds = dataset
        self.strategy = strategy
        self.dtype = dtype
        self.scene_vec = torch.from_numpy(scene_descriptor(dataset.scene)).to(dtype)
        self._control_cache: dict[int, torch.Tensor] = {}

    def control_latent_full(self, clip_idx: int) -> torch.Tensor:
        """Latent-space control video for the whole clip, cached."""
        if clip_idx not in self._control_cache:
            rec = self.ds.clips[clip_idx]
            poses = rec.poses()
            if self.strategy is Strategy.MASK:
                video = render_mask_control(rec.hpp, poses, self.ds.intrinsics, self.ds.skel)
            else:
                video = render_skeleton_control(rec.hpp, poses, self.ds.intrinsics, self.ds.skel)
            lat = encode_video(torch.from_numpy(video), 2).to(self.dtype)
            self._control_cache[clip_idx] = lat
        return self._control_cache[clip_idx]

    def pluecker_window(self, rec: ClipRecord, start: int, frames: int) -> torch.Tensor:
        maps = [
            pluecker_embedding(CameraPose.from_vector(rec.camera[i].astype(np.float64)),
                               self.ds.intrinsics)
            for i in range(start, start + frames)
        ]
        return torch.from_numpy(np.stack(maps)).to(self.dtype)

    def window(self, clip_idx: int, start: int, frames: int) -> tuple[torch.Tensor, CondInputs]:
        """Latents plus conditioning for one clip window (batch axis of 1)."""
        rec = self.ds.clips[clip_idx]
        if start < 0 or start + frames > rec.num_frames:
            raise FlowError("window out of clip bounds")
        z0 = encode_video(
            torch.from_numpy(rec.frames[start : start + frames]).to(self.dtype), 2
        )[None]
        hpp = None
        if uses_motion(self.strategy):
            hpp = torch.from_numpy(rec.hpp[start : start + frames]).to(self.dtype)[None]
        control = None
        if uses_control_video(self.strategy):
            control = self.control_latent_full(clip_idx)[start : start + frames][None]
        rays = None
        if uses_camera(self.strategy):
            rays = self.pluecker_window(rec, start, frames)[None]
        inputs = CondInputs(scene=self.scene_vec[None], hpp=hpp,
                            control_latent=control, pluecker=rays)
        return z0, inputs

    def batch(self, rng: np.random.Generator, batch_size: int, frames: int,
              ctx_min: int, ctx_max: int) -> tuple[torch.Tensor, CondInputs, torch.Tensor]:
        zs, hpps, controls, rays, ctxs = [], [], [], [], []
        for _ in range(batch_size):
            ci = int(rng.integers(0, len(self.ds)))
            max_start = self.ds.clips[ci].num_frames - frames
            start = int(rng.integers(0, max_start + 1))
            z0, inp = self.window(ci, start, frames)
            zs.append(z0)
            if inp.hpp is not None:
                hpps.append(inp.hpp)
            if inp.control_latent is not None:
                controls.append(inp.control_latent)
            if inp.pluecker is not None:
                rays.append(inp.pluecker)
            ctxs.append(int(rng.integers(ctx_min, ctx_max + 1)))
        inputs = CondInputs(
            scene=self.scene_vec[None].repeat(batch_size, 1),
            hpp=torch.cat(hpps) if hpps else None,
            control_latent=torch.cat(controls) if controls else None,
            pluecker=torch.cat(rays) if rays else None,
        )
        return torch.cat(zs), inputs, torch.tensor(ctxs, dtype=torch.long)


# ---------------------------------------------------------------------------
# trainer

@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    frames: int = 12
    context_min: int = 1
    context_max: int = 4
    stage_fractions: tuple[float, float, float] = (0.3, 0.3, 0.4)
    log_every: int = 100


class Trainer:
    """Single-process trainer with JSONL metrics and staged conditioning."""

    def __init__(self, model: VelocityModel, builder: BatchBuilder, cfg: TrainConfig,
                 metrics_path: str | None = None) -> None:
        self.model = model
        self.builder = builder
        self.cfg = cfg
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                     weight_decay=cfg.weight_decay)
        self.np_rng = np.random.default_rng(cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        if model.strategy is Strategy.JOINT:
            self.stage_at, self.boundaries = iterative_schedule(cfg.stage_fractions, cfg.steps)
        else:
            self.stage_at, self.boundaries = (lambda step: STAGE_JOINT), (0, 0)
        self.metrics_path = metrics_path
        self.step = 0
        if metrics_path:
            os.makedirs(os.path.dirname(os.path.abspath(metrics_path)), exist_ok=True)
            # truncate any stale file
            open(metrics_path, "w").close()

    def _log(self, record: dict) -> None:
        if self.metrics_path:
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    def train_step(self) -> dict:
        cfg = self.cfg
        t0 = time.perf_counter()
        plan = self.stage_at(self.step)
        z0, inputs, ctx = self.builder.batch(
            self.np_rng, cfg.batch, cfg.frames, cfg.context_min, cfg.context_max
        )
        dtype = z0.dtype
        cache = self.model.encode_conditioning(
            inputs, suppress_motion=plan.suppress_motion,
            suppress_camera=plan.suppress_camera,
        )
        t = torch.rand(z0.shape[0], generator=self.torch_gen).to(dtype)
        eps = torch.randn(z0.shape, generator=self.torch_gen, dtype=torch.float32).to(dtype)
        loss = cfm_loss(self.model, z0, cache, t, eps, ctx)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt.step()
        self.step += 1
        return {
            "step": self.step,
            "loss": float(loss.detach()),
            "grad_norm": float(gnorm),
            "stage": plan.name,
            "ms": (time.perf_counter() - t0) * 1e3,
        }

    def run(self, checkpoint_path: str | None = None) -> dict:
        last = {}
        window: list[float] = []
        for _ in range(self.cfg.steps):
            rec = self.train_step()
            last = rec
            window.append(rec["loss"])
            if self.step % self.cfg.log_every == 0 or self.step == self.cfg.steps:
                rec = dict(rec, loss_avg=float(np.mean(window)))
                window.clear()
                self._log(rec)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self.model,
                            {"train_config": asdict(self.cfg), "step": self.step})
        return last


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 16
    context: int = 1


def euler_integrate(v_fn, z_init: torch.Tensor, steps: int,
                    z_context: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate dz = v dt from t=1 to t=0 on a uniform grid.

    z_context, when given, holds the leading frames clean: they are re-imposed
    before every velocity evaluation and after the final step.
    """
    if steps < 1:
        raise FlowError("need at least one integration step")
    z = z_init.clone()
    nc = 0 if z_context is None else z_context.shape[1]

    def clamp(x):
        if nc:
            x[:, :nc] = z_context
        return x

    z = clamp(z)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        tt = torch.full((z.shape[0],), t, dtype=z.dtype, device=z.device)
        v = v_fn(z, tt)
        z = clamp(z - dt * v)
    return z


def sample_euler(
    model: VelocityModel,
    cache: CondCache,
    shape: tuple[int, ...],
    seed: int,
    cfg: SamplerConfig = SamplerConfig(),
    z_context: torch.Tensor | None = None,
) -> torch.Tensor:
    """Draw the initial noise deterministically from seed and integrate."""
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    eps = torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype)
    return euler_integrate(lambda z, t: model(z, t, cache), eps, cfg.steps, z_context)


# ---------------------------------------------------------------------------
# chunked rollout

@dataclass(frozen=True)
class RolloutConfig:
    chunk: int = 12
    context: int = 4
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(steps=16))

    def emitted_frames(self, chunks: int) -> int:
        if chunks < 1:
            return 0
        return chunks * (self.chunk - self.context) + self.context


def rollout_chunks(
    model: VelocityModel,
    cond_provider,
    first_frame_latent: torch.Tensor,
    num_chunks: int,
    cfg: RolloutConfig = RolloutConfig(),
    seed: int = 0,
):
    """Generate num_chunks chunks autoregressively; yields (index, latents).

    cond_provider(chunk_index) -> CondInputs for that chunk's frames. The
    first chunk is conditioned on the given first-frame latent; later chunks
    clamp their first `context` frames to the previous chunk's tail,
    copied bit-exactly.
    """
    if first_frame_latent.ndim != 5 or first_frame_latent.shape[1] != 1:
        raise FlowError("first frame latent must be (b, 1, c, h, w)")
    if cfg.context >= cfg.chunk:
        raise FlowError("context must be shorter than the chunk")
    b = first_frame_latent.shape[0]
    _, _, c, h, w = first_frame_latent.shape
    ctx = first_frame_latent
    for k in range(num_chunks):
        inputs = cond_provider(k)
        cache = model.encode_conditioning(inputs)
        z = sample_euler(
            model, cache, (b, cfg.chunk, c, h, w), seed + k,
            cfg.sampler, z_context=ctx,
        )
        yield k, z
        ctx = z[:, cfg.chunk - cfg.context :].clone()


def assemble_rollout(chunks: list[torch.Tensor], cfg: RolloutConfig) -> torch.Tensor:
    """Concatenate chunk latents into the emitted stream (overlap dropped)."""
    if not chunks:
        raise FlowError("no chunks to assemble")
    parts = [chunks[0]]
    for z in chunks[1:]:
        parts.append(z[:, cfg.context :])
    out = torch.cat(parts, dim=1)
    if out.shape[1] != cfg.emitted_frames(len(chunks)):
        raise FlowError("chunk list does not match the rollout configuration")
    return out
