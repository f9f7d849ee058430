"""Conditioning pathways that feed pose and camera signals into the backbone.

Every conditioning branch ends in a zero-initialized layer, so a freshly
conditioned model computes exactly the same function as its unconditioned
twin until training moves those weights. Supported injection strategies:

- ``token_concat``: motion embedding broadcast spatially and channel-concatenated
  to the latent before the input projection
- ``token_add``: per-frame motion embedding added to every token of its frame
- ``adaln``: per-block scale/shift modulation predicted from the motion embedding
- ``cross_attn``: tokens attend to per-frame motion embeddings after every
  other block
- ``skeleton_video`` / ``binary_mask``: rendered control video encoded by the
  latent codec and channel-concatenated to the input
- ``hybrid``: skeleton video concat plus token_add motion injection
- ``joint``: hybrid plus per-token camera-ray embeddings
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn


class ConditioningError(ValueError):
    """Strategy/input mismatch or malformed conditioning tensors."""


class Strategy(str, Enum):
    NONE = "none"
    TOKEN_CONCAT = "token_concat"
    TOKEN_ADD = "token_add"
    ADALN = "adaln"
    CROSS_ATTN = "cross_attn"
    SKELETON = "skeleton_video"
    MASK = "binary_mask"
    HYBRID = "hybrid"
    JOINT = "joint"


_CLI_ALIASES = {
    "none": Strategy.NONE,
    "concat": Strategy.TOKEN_CONCAT,
    "add": Strategy.TOKEN_ADD,
    "adaln": Strategy.ADALN,
    "xattn": Strategy.CROSS_ATTN,
    "skeleton": Strategy.SKELETON,
    "mask": Strategy.MASK,
    "hybrid": Strategy.HYBRID,
    "joint": Strategy.JOINT,
}


def parse_strategy(name: str) -> Strategy:
    """Accepts either the canonical value or the short command-line alias."""
    key = name.strip().lower()
    if key in _CLI_ALIASES:
        return _CLI_ALIASES[key]
    try:
        return Strategy(key)
    except ValueError:
        valid = sorted(set(_CLI_ALIASES) | {s.value for s in Strategy})
        raise ConditioningError(f"unknown strategy {name!r}; expected one of {valid}") from None


def strategy_alias(strategy: Strategy) -> str:
    for alias, s in _CLI_ALIASES.items():
        if s is strategy:
            return alias
    return strategy.value


def uses_motion(strategy: Strategy) -> bool:
    return strategy in (
        Strategy.TOKEN_CONCAT, Strategy.TOKEN_ADD, Strategy.ADALN,
        Strategy.CROSS_ATTN, Strategy.HYBRID, Strategy.JOINT,
    )


def uses_control_video(strategy: Strategy) -> bool:
    return strategy in (Strategy.SKELETON, Strategy.MASK, Strategy.HYBRID, Strategy.JOINT)


def uses_camera(strategy: Strategy) -> bool:
    return strategy is Strategy.JOINT


def control_pixel_channels(strategy: Strategy) -> int:
    """Pixel channels of the control video before the latent codec."""
    if strategy is Strategy.MASK:
        return 1
    if strategy in (Strategy.SKELETON, Strategy.HYBRID, Strategy.JOINT):
        return 3
    return 0


@dataclass
class CondInputs:
    """Raw per-batch conditioning streams (already on the model device/dtype)."""

    scene: torch.Tensor                        # (b, 16)
    hpp: torch.Tensor | None = None            # (b, f, 52)
    control_latent: torch.Tensor | None = None # (b, f, cc*s*s, h', w')
    pluecker: torch.Tensor | None = None       # (b, f, 6, H, W) pixel-space rays


@dataclass
class CondCache:
    """Encoded conditioning, reusable across sampler steps within a chunk."""

    scene: torch.Tensor
    motion: torch.Tensor | None = None          # (b, f, D)
    camera_tokens: torch.Tensor | None = None   # (b, f*tokens_per_frame, D)
    control_latent: torch.Tensor | None = None


def require_inputs(strategy: Strategy, inputs: CondInputs) -> None:
    missing = []
    if uses_motion(strategy) and inputs.hpp is None:
        missing.append("hpp")
    if uses_control_video(strategy) and inputs.control_latent is None:
        missing.append("control_latent")
    if uses_camera(strategy) and inputs.pluecker is None:
        missing.append("pluecker")
    if missing:
        raise ConditioningError(
            f"strategy {strategy.value!r} requires conditioning inputs: {', '.join(missing)}"
        )


class MotionEncoder(nn.Module):
    """Temporal 1D conv stack mapping pose sequences to per-frame embeddings.

    The output convolution is zero-initialized.
    """

    def __init__(self, in_channels: int, hidden: int, width: int) -> None:
        super().__init__()
        self.conv = nn.Conv1d(in_channels, hidden, kernel_size=3, padding=1)
        self.act = nn.SiLU()
        self.out = nn.Conv1d(hidden, width, kernel_size=3, padding=1)

    def forward(self, hpp: torch.Tensor) -> torch.Tensor:
        if hpp.ndim != 3:
            raise ConditioningError("hpp must be (b, f, channels)")
        x = hpp.transpose(1, 2)
        x = self.out(self.act(self.conv(x)))
        return x.transpose(1, 2)


class CameraEncoder(nn.Module):
    """Strided conv over per-pixel ray maps, one embedding per backbone token.

    The stride equals codec_stride * patch so the output grid matches the
    token grid exactly. The output projection is zero-initialized.
    """

    def __init__(self, hidden: int, width: int, token_stride: int) -> None:
        super().__init__()
        self.token_stride = token_stride
        self.conv = nn.Conv2d(6, hidden, kernel_size=token_stride, stride=token_stride)
        self.act = nn.SiLU()
        self.out = nn.Linear(hidden, width)

    def forward(self, pluecker: torch.Tensor) -> torch.Tensor:
        if pluecker.ndim != 5 or pluecker.shape[2] != 6:
            raise ConditioningError("pluecker must be (b, f, 6, H, W)")
        b, f, c, hh, ww = pluecker.shape
        if hh % self.token_stride or ww % self.token_stride:
            raise ConditioningError("ray map size not divisible by the token stride")
        x = self.conv(pluecker.reshape(b * f, c, hh, ww))
        x = self.act(x)
        x = x.permute(0, 2, 3, 1)  # bf, gh, gw, hidden
        x = self.out(x)
        gh, gw = x.shape[1], x.shape[2]
        return x.reshape(b, f * gh * gw, -1)


class HandAdaLN(nn.Module):
    """Per-frame scale/shift modulation from the motion embedding.

    Initialized to the identity: scale term starts at zero so modulated
    activations pass through unchanged.
    """

    def __init__(self, width: int) -> None:
        super().__init__()
        self.mod = nn.Linear(width, 2 * width)

    def forward(self, x: torch.Tensor, motion: torch.Tensor, tokens_per_frame: int) -> torch.Tensor:
        scale, shift = self.mod(motion).chunk(2, dim=-1)  # (b, f, D) each
        scale = scale.repeat_interleave(tokens_per_frame, dim=1)
        shift = shift.repeat_interleave(tokens_per_frame, dim=1)
        return x * (1.0 + scale) + shift


class CrossAttnBridge(nn.Module):
    """Residual cross-attention from tokens to per-frame motion embeddings.

    The output projection is zero-initialized so the bridge starts as a no-op.
    """

    def __init__(self, width: int, heads: int) -> None:
        super().__init__()
        if width % heads:
            raise ConditioningError("width must be divisible by heads")
        self.heads = heads
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        m = motion.shape[1]
        hd = d // self.heads
        q = self.q(self.norm(x)).reshape(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(motion).reshape(b, m, self.heads, hd).transpose(1, 2)
        v = self.v(motion).reshape(b, m, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return x + self.out(y)
