"""Deterministic latent codec and patch token layout.

The codec is a lossless space-to-channel transform: each non-overlapping s x s
pixel block becomes s*s extra channels, so a (c, h, w) frame maps to
(c*s*s, h/s, w/s) and back bit-exactly. There is no temporal compression.

Patch tokens flatten p x p latent patches channel-major, ordered frame-major
then row-major over the patch grid. ``patchify_exact``/``unpatchify_exact``
are the identity-weight reference pair; the learned input projection in the
backbone consumes the same flattening.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class CodecError(ValueError):
    """Shape does not fit the codec configuration."""


def encode_video(video: torch.Tensor, stride: int = 2) -> torch.Tensor:
    """(..., c, h, w) -> (..., c*s*s, h/s, w/s), exact and invertible."""
    if video.ndim < 3:
        raise CodecError("expected at least (c, h, w)")
    h, w = video.shape[-2], video.shape[-1]
    if h % stride or w % stride:
        raise CodecError(f"spatial size ({h},{w}) not divisible by stride {stride}")
    lead = video.shape[:-3]
    flat = video.reshape(-1, *video.shape[-3:])
    out = F.pixel_unshuffle(flat, stride)
    return out.reshape(*lead, *out.shape[-3:])


def decode_video(latent: torch.Tensor, stride: int = 2) -> torch.Tensor:
    """Inverse of encode_video."""
    if latent.ndim < 3:
        raise CodecError("expected at least (c', h', w')")
    c = latent.shape[-3]
    if c % (stride * stride):
        raise CodecError(f"channel count {c} not divisible by stride^2")
    lead = latent.shape[:-3]
    flat = latent.reshape(-1, *latent.shape[-3:])
    out = F.pixel_shuffle(flat, stride)
    return out.reshape(*lead, *out.shape[-3:])


@dataclass(frozen=True)
class PatchConfig:
    """Token layout for a latent video."""

    patch: int = 4            # latent pixels per token side
    width: int = 128          # model/token dimension
    stride: int = 2           # codec space-to-channel stride
    channels: int = 3         # pixel channels before the codec

    @property
    def latent_channels(self) -> int:
        return self.channels * self.stride * self.stride

    def grid(self, height: int, width: int) -> tuple[int, int]:
        """Patch grid (gh, gw) for a pixel-space frame size."""
        lh, lw = height // self.stride, width // self.stride
        if height % self.stride or width % self.stride:
            raise CodecError("frame size not divisible by codec stride")
        if lh % self.patch or lw % self.patch:
            raise CodecError(
                f"latent size ({lh},{lw}) not divisible by patch {self.patch}"
            )
        return lh // self.patch, lw // self.patch

    def tokens_per_frame(self, height: int, width: int) -> int:
        gh, gw = self.grid(height, width)
        return gh * gw

    def token_dim(self, latent_channels: int | None = None) -> int:
        c = self.latent_channels if latent_channels is None else latent_channels
        return c * self.patch * self.patch


def patchify_exact(latent: torch.Tensor, patch: int) -> torch.Tensor:
    """(b, f, c, h, w) -> (b, f*gh*gw, c*p*p) channel-major patch flattening."""
    if latent.ndim != 5:
        raise CodecError("expected (b, f, c, h, w)")
    b, f, c, h, w = latent.shape
    if h % patch or w % patch:
        raise CodecError(f"latent size ({h},{w}) not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = latent.reshape(b, f, c, gh, patch, gw, patch)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)  # b f gh gw c p p
    return x.reshape(b, f * gh * gw, c * patch * patch)


def unpatchify_exact(
    tokens: torch.Tensor, frames: int, grid: tuple[int, int], patch: int
) -> torch.Tensor:
    """Exact inverse of patchify_exact given the original layout."""
    if tokens.ndim != 3:
        raise CodecError("expected (b, n, d)")
    b, n, d = tokens.shape
    gh, gw = grid
    if n != frames * gh * gw:
        raise CodecError(f"token count {n} does not match {frames}x{gh}x{gw}")
    if d % (patch * patch):
        raise CodecError("token dim not divisible by patch area")
    c = d // (patch * patch)
    x = tokens.reshape(b, frames, gh, gw, c, patch, patch)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)  # b f c gh p gw p
    return x.reshape(b, frames, c, gh * patch, gw * patch)


def channel_concat(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Concatenate two latent videos along the channel axis."""
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise CodecError(f"latent shapes {tuple(a.shape)} and {tuple(b.shape)} do not align")
    return torch.cat([a, b], dim=-3)
