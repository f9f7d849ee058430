"""Transformer velocity field over latent video tokens.

Pre-norm DiT blocks with timestep scale/shift/gate modulation; the modulation
projections, the velocity head, and every conditioning branch are
zero-initialized, so at init the blocks are identity maps and conditioned
variants compute exactly the same function as the unconditioned baseline with
identical shared weights.

Parameter initialization is keyed by (seed, parameter name), so two models
that share parameter names get bit-identical shared weights regardless of
which conditioning extras exist alongside them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import torch
from torch import nn

from .codec import PatchConfig, patchify_exact, unpatchify_exact
from .conditioning import (
    CameraEncoder,
    CondCache,
    CondInputs,
    ConditioningError,
    CrossAttnBridge,
    HandAdaLN,
    MotionEncoder,
    Strategy,
    control_pixel_channels,
    parse_strategy,
    require_inputs,
    uses_camera,
    uses_control_video,
    uses_motion,
)
from .hand import HPP_PAIR_DIM

TIME_FEATURES = 64


class CheckpointError(RuntimeError):
    """Malformed checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 4
    stride: int = 2
    channels: int = 3
    image_size: tuple[int, int] = (48, 48)
    max_frames: int = 16
    strategy: str = "none"
    motion_hidden: int = 64
    camera_hidden: int = 64
    xattn_every: int = 2
    scene_dim: int = 16
    lora_rank: int = 0
    lora_alpha: float = 16.0

    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.patch, self.width, self.stride, self.channels)

    @property
    def latent_channels(self) -> int:
        return self.channels * self.stride * self.stride

    def grid(self) -> tuple[int, int]:
        return self.patch_config().grid(*self.image_size)

    @property
    def tokens_per_frame(self) -> int:
        gh, gw = self.grid()
        return gh * gw

    def to_json(self) -> dict:
        d = self.__dict__.copy()
        d["image_size"] = list(self.image_size)
        return d

    @staticmethod
    def from_json(doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["image_size"] = tuple(doc["image_size"])
        return ModelConfig(**doc)


def timestep_features(t: torch.Tensor, dim: int = TIME_FEATURES) -> torch.Tensor:
    """Sinusoidal features of a scalar time in [0, 1], shape (b, dim)."""
    if t.ndim != 1:
        raise ValueError("t must be a 1-D batch of times")
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, 6.9077552789821368, half, dtype=t.dtype, device=t.device)
    )  # 1 .. ~1000
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float, hand_adaln: bool) -> None:
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        hidden = int(width * mlp_ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        self.act = nn.SiLU()
        # zero-initialized: gates start closed, block starts as identity
        self.adaln_t = nn.Linear(width, 6 * width)
        self.hand_adaln = HandAdaLN(width) if hand_adaln else None

    def _attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.reshape(b, n, self.heads, hd).transpose(1, 2)
        k = k.reshape(b, n, self.heads, hd).transpose(1, 2)
        v = v.reshape(b, n, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / (hd ** 0.5), dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(b, n, d))

    def forward(
        self,
        x: torch.Tensor,
        temb: torch.Tensor,
        motion: torch.Tensor | None,
        tokens_per_frame: int,
    ) -> torch.Tensor:
        mods = self.adaln_t(torch.nn.functional.silu(temb))[:, None, :]
        sh1, sc1, g1, sh2, sc2, g2 = mods.chunk(6, dim=-1)
        h = self.norm1(x) * (1.0 + sc1) + sh1
        if self.hand_adaln is not None and motion is not None:
            h = self.hand_adaln(h, motion, tokens_per_frame)
        x = x + g1 * self._attention(h)
        h = self.norm2(x) * (1.0 + sc2) + sh2
        if self.hand_adaln is not None and motion is not None:
            h = self.hand_adaln(h, motion, tokens_per_frame)
        x = x + g2 * self.fc2(self.act(self.fc1(h)))
        return x


class VelocityModel(nn.Module):
    """Latent video velocity field v(z, t | conditioning)."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.strategy = parse_strategy(cfg.strategy)
        pc = cfg.patch_config()
        self.grid = cfg.grid()
        self.tokens_per_frame = cfg.tokens_per_frame
        cl = cfg.latent_channels
        extra = 0
        if self.strategy is Strategy.TOKEN_CONCAT:
            extra += cfg.width
        if uses_control_video(self.strategy):
            extra += control_pixel_channels(self.strategy) * cfg.stride * cfg.stride
        self.base_token_dim = cl * cfg.patch * cfg.patch
        self.extra_channels = extra
        in_dim = (cl + extra) * cfg.patch * cfg.patch

        self.input_proj = nn.Linear(in_dim, cfg.width, bias=False)
        self.pos_emb = nn.Parameter(torch.zeros(1, self.tokens_per_frame, cfg.width))
        self.frame_emb = nn.Parameter(torch.zeros(1, cfg.max_frames, cfg.width))
        self.t_fc1 = nn.Linear(TIME_FEATURES, cfg.width)
        self.t_fc2 = nn.Linear(cfg.width, cfg.width)
        self.scene_proj = nn.Linear(cfg.scene_dim, cfg.width)
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.width, cfg.heads, cfg.mlp_ratio,
                     hand_adaln=self.strategy is Strategy.ADALN)
            for _ in range(cfg.depth)
        )
        self.bridge_at = {}
        bridges = []
        if self.strategy is Strategy.CROSS_ATTN:
            for i in range(cfg.depth):
                if i % cfg.xattn_every == cfg.xattn_every - 1:
                    self.bridge_at[i] = len(bridges)
                    bridges.append(CrossAttnBridge(cfg.width, cfg.heads))
        self.bridges = nn.ModuleList(bridges)
        self.head_norm = nn.LayerNorm(cfg.width, elementwise_affine=False)
        self.head = nn.Linear(cfg.width, self.base_token_dim)

        self.motion_enc = (
            MotionEncoder(HPP_PAIR_DIM, cfg.motion_hidden, cfg.width)
            if uses_motion(self.strategy) else None
        )
        self.camera_enc = (
            CameraEncoder(cfg.camera_hidden, cfg.width, cfg.stride * cfg.patch)
            if uses_camera(self.strategy) else None
        )

    # -- conditioning ------------------------------------------------------

    def encode_conditioning(
        self,
        inputs: CondInputs,
        *,
        suppress_motion: bool = False,
        suppress_camera: bool = False,
    ) -> CondCache:
        """Run the conditioning encoders once; the result is reusable across
        sampler steps. Suppression flags implement staged training: a
        suppressed branch contributes exactly nothing to the forward pass."""
        require_inputs(self.strategy, inputs)
        motion = None
        control = inputs.control_latent
        if self.motion_enc is not None and not suppress_motion:
            motion = self.motion_enc(inputs.hpp)
        if suppress_motion and control is not None:
            control = torch.zeros_like(control)
        camera_tokens = None
        if self.camera_enc is not None and not suppress_camera:
            camera_tokens = self.camera_enc(inputs.pluecker)
        return CondCache(
            scene=inputs.scene, motion=motion,
            camera_tokens=camera_tokens, control_latent=control,
        )

    # -- forward -----------------------------------------------------------

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: CondCache) -> torch.Tensor:
        cfg = self.cfg
        if z.ndim != 5:
            raise ConditioningError("z must be (b, f, c, h, w)")
        b, f, cl, h, w = z.shape
        if cl != cfg.latent_channels:
            raise ConditioningError(f"latent has {cl} channels, config wants {cfg.latent_channels}")
        if (h * cfg.stride, w * cfg.stride) != cfg.image_size:
            raise ConditioningError("latent spatial size does not match the configured image size")
        if f > cfg.max_frames:
            raise ConditioningError(f"{f} frames exceed the frame embedding table ({cfg.max_frames})")
        if t.shape != (b,):
            raise ConditioningError("t must be one scalar per batch item")

        parts = [z]
        if self.strategy is Strategy.TOKEN_CONCAT:
            if cond.motion is not None:
                m = cond.motion[..., None, None].expand(b, f, cfg.width, h, w)
            else:
                m = z.new_zeros(b, f, cfg.width, h, w)
            parts.append(m)
        if uses_control_video(self.strategy):
            if cond.control_latent is not None:
                parts.append(cond.control_latent)
            else:
                cc = control_pixel_channels(self.strategy) * cfg.stride * cfg.stride
                parts.append(z.new_zeros(b, f, cc, h, w))
        x_in = torch.cat(parts, dim=2) if len(parts) > 1 else z
        x = self.input_proj(patchify_exact(x_in, cfg.patch))

        if self.strategy in (Strategy.TOKEN_ADD, Strategy.HYBRID, Strategy.JOINT):
            if cond.motion is not None:
                x = x + cond.motion.repeat_interleave(self.tokens_per_frame, dim=1)
        if self.strategy is Strategy.JOINT and cond.camera_tokens is not None:
            x = x + cond.camera_tokens

        x = x + self.pos_emb.repeat(1, f, 1) + self.frame_emb[:, :f].repeat_interleave(
            self.tokens_per_frame, dim=1
        )
        temb = self.t_fc2(torch.nn.functional.silu(self.t_fc1(timestep_features(t))))
        temb = temb + self.scene_proj(cond.scene)

        for i, blk in enumerate(self.blocks):
            x = blk(x, temb, cond.motion, self.tokens_per_frame)
            if i in self.bridge_at and cond.motion is not None:
                x = self.bridges[self.bridge_at[i]](x, cond.motion)

        out = self.head(self.head_norm(x))
        return unpatchify_exact(out, f, self.grid, cfg.patch)

    # -- parameter classification ------------------------------------------

    def conditioning_parameter_names(self) -> list[str]:
        """Parameters that exist only because of the conditioning strategy."""
        names = []
        for name, _ in self.named_parameters():
            if name.startswith(("motion_enc.", "camera_enc.", "bridges.")):
                names.append(name)
            elif ".hand_adaln." in name:
                names.append(name)
        return names

    @torch.no_grad()
    def zero_conditioning_branches(self) -> None:
        """Reset every conditioning pathway to its exact no-op state."""
        cond = set(self.conditioning_parameter_names())
        for name, p in self.named_parameters():
            if name in cond:
                p.zero_()
        if self.extra_channels:
            self.input_proj.weight[:, self.base_token_dim :].zero_()


# ---------------------------------------------------------------------------
# LoRA adapters

class LoRALinear(nn.Module):
    """Low-rank residual on a frozen-shape linear layer: W x + s * B(A x)."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float) -> None:
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be positive")
        self.base = base
        self.rank = rank
        self.scale = alpha / rank
        kw = dict(dtype=base.weight.dtype, device=base.weight.device)
        self.lora_a = nn.Parameter(torch.zeros(rank, base.in_features, **kw))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, **kw))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        return y + torch.nn.functional.linear(
            torch.nn.functional.linear(x, self.lora_a), self.lora_b
        ) * self.scale

    @torch.no_grad()
    def merged(self) -> nn.Linear:
        self.base.weight += self.scale * (self.lora_b @ self.lora_a)
        return self.base


LORA_TARGET_SUFFIXES = ("qkv", "proj", "fc1", "fc2")


def apply_lora(model: nn.Module, rank: int, alpha: float,
               targets: tuple[str, ...] = LORA_TARGET_SUFFIXES) -> list[str]:
    """Wrap matching linear layers in-place; returns the wrapped module paths."""
    wrapped = []
    for parent_name, parent in list(model.named_modules()):
        for child_name, child in list(parent.named_children()):
            if isinstance(child, nn.Linear) and child_name in targets:
                setattr(parent, child_name, LoRALinear(child, rank, alpha))
                path = f"{parent_name}.{child_name}" if parent_name else child_name
                wrapped.append(path)
    return wrapped


def merge_lora(model: nn.Module) -> int:
    """Fold adapters back into their base weights; returns how many merged."""
    count = 0
    for parent_name, parent in list(model.named_modules()):
        for child_name, child in list(parent.named_children()):
            if isinstance(child, LoRALinear):
                setattr(parent, child_name, child.merged())
                count += 1
    return count


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in model.named_parameters() if n.endswith((".lora_a", ".lora_b"))]


# ---------------------------------------------------------------------------
# deterministic initialization

def _name_generator(seed: int, name: str) -> torch.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF)
    return g


def _randn_like(p: torch.Tensor, seed: int, key: str, scale: float) -> torch.Tensor:
    g = _name_generator(seed, key)
    return torch.randn(p.shape, generator=g, dtype=p.dtype) * scale


def _is_zero_init(name: str) -> bool:
    if name.endswith((".adaln_t.weight", ".adaln_t.bias")):
        return True
    if ".hand_adaln." in name:
        return True
    if name.startswith(("motion_enc.out.", "camera_enc.out.")):
        return True
    if name.startswith("bridges.") and ".out." in name:
        return True
    if name in ("head.weight", "head.bias"):
        return True
    if name.endswith(".lora_b"):
        return True
    return False


@torch.no_grad()
def init_parameters(model: VelocityModel, seed: int) -> None:
    """Deterministic per-name init; shared names match across strategies."""
    base_dim = model.base_token_dim
    for name, p in model.named_parameters():
        if name.endswith("input_proj.weight"):
            p.zero_()
            block = _randn_like(p[:, :base_dim], seed, "input_proj.weight#base", 0.02)
            p[:, :base_dim] = block
        elif _is_zero_init(name):
            p.zero_()
        elif name.endswith(".lora_a"):
            p.copy_(_randn_like(p, seed, name, 1.0 / max(1, p.shape[0])))
        elif name.endswith(".bias"):
            p.zero_()
        else:
            p.copy_(_randn_like(p, seed, name, 0.02))


@torch.no_grad()
def dither_parameters(model: nn.Module, seed: int, scale: float = 0.05) -> None:
    """Add deterministic per-name noise to every parameter (test utility to
    make block outputs non-trivial while keeping shared names in sync).

    The input projection's base column block is perturbed with its own key so
    the same noise lands there no matter how many extra columns a strategy
    appends."""
    base_dim = getattr(model, "base_token_dim", None)
    for name, p in model.named_parameters():
        if base_dim is not None and name.endswith("input_proj.weight"):
            p[:, :base_dim] += _randn_like(
                p[:, :base_dim], seed, "dither:input_proj.weight#base", scale
            )
            if p.shape[1] > base_dim:
                p[:, base_dim:] += _randn_like(
                    p[:, base_dim:], seed, "dither:input_proj.weight#extra", scale
                )
        else:
            p.add_(_randn_like(p, seed, "dither:" + name, scale))


def build_velocity_model(
    cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> VelocityModel:
    model = VelocityModel(cfg)
    if cfg.lora_rank > 0:
        apply_lora(model, cfg.lora_rank, cfg.lora_alpha)
    model.to(dtype)
    init_parameters(model, seed)
    return model


@torch.no_grad()
def copy_shared_parameters(src: VelocityModel, dst: VelocityModel) -> None:
    """Copy baseline-shaped weights from src into dst by name.

    The destination's input projection keeps its extra columns; only the base
    block is overwritten. Parameters that exist only in dst are untouched.
    """
    src_params = dict(src.named_parameters())
    for name, p in dst.named_parameters():
        if name not in src_params:
            continue
        s = src_params[name]
        if name.endswith("input_proj.weight") and s.shape != p.shape:
            p[:, : src.base_token_dim] = s
        elif s.shape == p.shape:
            p.copy_(s)


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"EGWT"
CKPT_VERSION = 1


def save_checkpoint(path: str, model: VelocityModel, extra: dict | None = None) -> None:
    doc = {"model": model.cfg.to_json(), "extra": extra or {}}
    blob = json.dumps(doc).encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            dims = tuple(tensor.shape)
            f.write(struct.pack("<I", len(dims)))
            if dims:
                f.write(struct.pack(f"<{len(dims)}I", *dims))
            f.write(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(
    path: str, dtype: torch.dtype = torch.float32
) -> tuple[VelocityModel, dict]:
    import numpy as np

    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        doc = json.loads(f.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        state: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = 1
            for d in dims:
                n *= d
            data = np.frombuffer(f.read(4 * n), dtype="<f4").copy()
            state[name] = torch.from_numpy(data.reshape(dims))
    cfg = ModelConfig.from_json(doc["model"])
    model = VelocityModel(cfg)
    if cfg.lora_rank > 0:
        apply_lora(model, cfg.lora_rank, cfg.lora_alpha)
    model.load_state_dict(state, strict=True)
    model.to(dtype)
    return model, doc.get("extra", {})
