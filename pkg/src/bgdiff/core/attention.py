import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


def downsample_mask(mask: torch.Tensor, target_resolution: int) -> torch.Tensor:
    """Area-average pool a binary mask to ``target_resolution`` and re-binarize.

    Cells whose product coverage is >= 0.5 become 1, so exact ties keep the
    product. Accepts ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)``.
    """
    h, w = mask.shape[-2:]
    if h != w:
        raise ShapeError(f"mask must be square, got {h}x{w}")
    if target_resolution <= 0 or h % target_resolution:
        raise ValueError(f"target resolution {target_resolution} does not divide mask size {h}")
    if target_resolution == h:
        return mask.clone()
    k = h // target_resolution
    shape = mask.shape
    m = mask.reshape(-1, 1, h, w).to(torch.float64)
    pooled = F.avg_pool2d(m, k)
    out = (pooled >= 0.5).to(mask.dtype)
    return out.reshape(*shape[:-2], target_resolution, target_resolution)


class CrossAttention(nn.Module):
    """Softmax cross attention: queries from a feature map, keys/values from a token sequence.

    Returns only the attention update ``CA(x, ctx)``; callers add the residual.
    """

    def __init__(self, channels: int, context_dim: int, num_heads: int = 4, groups: int = 8):
        super().__init__()
        if channels % num_heads:
            raise ValueError("channels must be divisible by num_heads")
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        heads = self.num_heads
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))  # B, HW, C
        k = self.to_k(context)
        v = self.to_v(context)
        q = q.view(B, H * W, heads, C // heads).transpose(1, 2)
        k = k.view(B, -1, heads, C // heads).transpose(1, 2)
        v = v.view(B, -1, heads, C // heads).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) * (C // heads) ** -0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, H * W, C)
        return self.to_out(out).transpose(1, 2).reshape(B, C, H, W)


class StandardCrossAttention(nn.Module):
    """Residual cross attention ``x + CA(x, ctx)`` used by the backbone."""

    def __init__(self, channels, context_dim, num_heads=4):
        super().__init__()
        self.attn = CrossAttention(channels, context_dim, num_heads)

    def forward(self, x, context):
        return x + self.attn(x, context)


class MaskedCrossAttention(nn.Module):
    """Mask-guided cross attention.

    ``x + CA(x, p_fg) * M + CA(x, p_bg) * (1 - M)``: product locations read
    only the product prompt and background locations only the background
    prompt. Both terms share the same attention weights.
    """

    def __init__(self, channels, context_dim, num_heads=4):
        super().__init__()
        self.attn = CrossAttention(channels, context_dim, num_heads)

    def forward(self, x, p_fg, p_bg, mask):
        if mask.dim() == 3:
            mask = mask.unsqueeze(1)
        if mask.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"mask resolution {tuple(mask.shape[-2:])} != feature resolution {tuple(x.shape[-2:])}")
        mask = mask.to(x.dtype)
        return x + self.attn(x, p_fg) * mask + self.attn(x, p_bg) * (1 - mask)


def masked_cross_attention(layer: MaskedCrossAttention, x, p_fg, p_bg, mask):
    return layer(x, p_fg, p_bg, mask)
