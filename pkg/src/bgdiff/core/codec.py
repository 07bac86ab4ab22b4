"""Deterministic latent codec: space-to-depth rearrangement.

Images are ``(B, C, H, W)`` tensors in [0, 1]. The codec is lossless, so
``decode_latent(encode_latent(x))`` reproduces ``x`` bit for bit.
"""

import torch
import torch.nn.functional as F

from ..errors import ShapeError


def encode_latent(image: torch.Tensor, factor: int = 2, image_size: int | None = None) -> torch.Tensor:
    if image.dim() not in (3, 4):
        raise ShapeError(f"expected (B, C, H, W) or (C, H, W), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if image_size is not None and (h, w) != (image_size, image_size):
        raise ShapeError(f"image is {h}x{w}, model expects {image_size}x{image_size}")
    if h % factor or w % factor:
        raise ShapeError(f"image size {h}x{w} not divisible by codec factor {factor}")
    if factor == 1:
        return image.clone()
    if image.dim() == 3:
        return F.pixel_unshuffle(image.unsqueeze(0), factor)[0]
    return F.pixel_unshuffle(image, factor)


def decode_latent(z: torch.Tensor, factor: int = 2, channels: int = 3) -> torch.Tensor:
    if z.dim() not in (3, 4):
        raise ShapeError(f"expected (B, c, h, w) or (c, h, w), got {tuple(z.shape)}")
    c = z.shape[-3]
    if c != channels * factor * factor:
        raise ShapeError(f"latent has {c} channels, expected {channels * factor * factor}")
    if factor == 1:
        return z.clone()
    if z.dim() == 3:
        return F.pixel_shuffle(z.unsqueeze(0), factor)[0]
    return F.pixel_shuffle(z, factor)
