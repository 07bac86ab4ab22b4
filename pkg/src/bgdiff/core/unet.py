"""Small conditional UNet and ControlNet-style conditioning branches."""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError
from .attention import MaskedCrossAttention, StandardCrossAttention


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


@dataclass
class Conditioning:
    """Everything an attention layer may read: prompts and a per-resolution mask pyramid."""

    context: torch.Tensor | None = None
    p_fg: torch.Tensor | None = None
    p_bg: torch.Tensor | None = None
    masks: dict = field(default_factory=dict)


class AttnSlot(nn.Module):
    """Attention layer whose flavour is fixed at construction.

    ``mode`` is ``"standard"`` (attend to ``cond.context``) or ``"masked"``
    (mask-guided product/background split). Both keep the weights under
    ``layer.attn`` so branches can be initialized from the backbone.
    """

    def __init__(self, mode, channels, context_dim, num_heads):
        super().__init__()
        self.mode = mode
        if mode == "standard":
            self.layer = StandardCrossAttention(channels, context_dim, num_heads)
        elif mode == "masked":
            self.layer = MaskedCrossAttention(channels, context_dim, num_heads)
        else:
            raise ValueError(f"unknown attention mode {mode!r}")

    def forward(self, h, cond: Conditioning):
        if self.mode == "standard":
            return self.layer(h, cond.context)
        res = h.shape[-1]
        if res not in cond.masks:
            raise ShapeError(f"no mask provided at resolution {res}")
        return self.layer(h, cond.p_fg, cond.p_bg, cond.masks[res])


class Encoder(nn.Module):
    """Time embedding, input conv, downsampling path and middle block.

    ``attn_mode=None`` builds an attention-free encoder (used by the
    reference-image branch, which takes no prompt).
    """

    def __init__(self, cfg, attn_mode="standard"):
        super().__init__()
        ch = [cfg.base_channels * m for m in cfg.channel_mults]
        self.channels = ch
        temb_dim = ch[0] * 4
        self.temb_dim = temb_dim
        self.time_embed = nn.Sequential(nn.Linear(ch[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)
        res = cfg.latent_size
        self.resolutions = []
        self.down = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            blk = nn.Module()
            blk.res = ResBlock(prev, c, temb_dim)
            use_attn = attn_mode is not None and res in cfg.attention_resolutions
            blk.attn = AttnSlot(attn_mode, c, cfg.prompt_dim, cfg.num_heads) if use_attn else None
            blk.downsample = nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(ch) - 1 else None
            self.down.append(blk)
            self.resolutions.append(res)
            prev = c
            if i < len(ch) - 1:
                res //= 2
        self.mid_res1 = ResBlock(prev, prev, temb_dim)
        mid_attn = attn_mode is not None and res in cfg.attention_resolutions
        self.mid_attn = AttnSlot(attn_mode, prev, cfg.prompt_dim, cfg.num_heads) if mid_attn else None
        self.mid_res2 = ResBlock(prev, prev, temb_dim)

    def embed_time(self, t):
        emb = timestep_embedding(t, self.channels[0])
        return self.time_embed(emb.to(self.time_embed[0].weight.dtype))

    def forward(self, z, temb, cond: Conditioning, extra=None):
        h = self.conv_in(z)
        if extra is not None:
            h = h + extra
        skips = []
        for blk in self.down:
            h = blk.res(h, temb)
            if blk.attn is not None:
                h = blk.attn(h, cond)
            skips.append(h)
            if blk.downsample is not None:
                h = blk.downsample(h)
        h = self.mid_res1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, cond)
        h = self.mid_res2(h, temb)
        return skips, h

    def level_shapes(self):
        """Channel count and resolution of every fusion level (skips, then middle)."""
        shapes = list(zip(self.channels, self.resolutions))
        shapes.append((self.channels[-1], self.resolutions[-1]))
        return shapes


class Decoder(nn.Module):
    def __init__(self, cfg, temb_dim):
        super().__init__()
        ch = [cfg.base_channels * m for m in cfg.channel_mults]
        res = cfg.latent_size // 2 ** (len(ch) - 1)
        self.up = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            blk = nn.Module()
            blk.res = ResBlock(prev + ch[i], ch[i], temb_dim)
            blk.attn = AttnSlot("standard", ch[i], cfg.prompt_dim, cfg.num_heads) if res in cfg.attention_resolutions else None
            blk.upsample = nn.Conv2d(ch[i], ch[i], 3, padding=1) if i > 0 else None
            self.up.append(blk)
            prev = ch[i]
            res *= 2
        self.norm_out = nn.GroupNorm(min(8, ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

    def forward(self, h, skips, temb, cond):
        for blk, skip in zip(self.up, reversed(skips)):
            h = blk.res(torch.cat([h, skip], dim=1), temb)
            if blk.attn is not None:
                h = blk.attn(h, cond)
            if blk.upsample is not None:
                h = blk.upsample(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class UNetBackbone(nn.Module):
    """Denoiser whose decoder accepts additive residuals at every skip and at the middle."""

    def __init__(self, cfg):
        super().__init__()
        self.encoder = Encoder(cfg, "standard")
        self.decoder = Decoder(cfg, self.encoder.temb_dim)

    def forward(self, z, t, context, residuals=(), return_decoder_inputs=False):
        cond = Conditioning(context=context)
        temb = self.encoder.embed_time(t)
        skips, h = self.encoder(z, temb, cond)
        n_levels = len(skips) + 1
        for res in residuals:
            if res is None:
                continue
            if len(res) != n_levels:
                raise ShapeError(f"residuals have {len(res)} levels, decoder has {n_levels}")
            for i in range(len(skips)):
                if res[i].shape != skips[i].shape:
                    raise ShapeError(f"residual level {i} shape {tuple(res[i].shape)} != {tuple(skips[i].shape)}")
                skips[i] = skips[i] + res[i]
            if res[-1].shape != h.shape:
                raise ShapeError(f"middle residual shape {tuple(res[-1].shape)} != {tuple(h.shape)}")
            h = h + res[-1]
        out = self.decoder(h, skips, temb, cond)
        if return_decoder_inputs:
            return out, [*skips, h]
        return out


class ControlBranch(nn.Module):
    """Trainable encoder copy with a hint input and zero-initialized 1x1 fusion projections.

    Emits one residual per decoder fusion level; all are exactly zero until
    the projections receive gradient updates.
    """

    def __init__(self, cfg, attn_mode, hint_channels):
        super().__init__()
        self.encoder = Encoder(cfg, attn_mode)
        c0 = self.encoder.channels[0]
        self.hint = nn.Sequential(
            nn.Conv2d(hint_channels, c0, 3, padding=1),
            nn.SiLU(),
            zero_module(nn.Conv2d(c0, c0, 3, padding=1)),
        )
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c, _ in self.encoder.level_shapes())

    def forward(self, hint, z_t, t, cond: Conditioning):
        temb = self.encoder.embed_time(t)
        skips, h = self.encoder(z_t, temb, cond, extra=self.hint(hint))
        feats = [*skips, h]
        return [proj(f) for proj, f in zip(self.zero_convs, feats)]

    def load_from_backbone(self, backbone: UNetBackbone):
        """Copy matching encoder weights from the backbone (ControlNet-style init)."""
        src = backbone.encoder.state_dict()
        dst = self.encoder.state_dict()
        copied = {k: v for k, v in src.items() if k in dst and dst[k].shape == v.shape}
        self.encoder.load_state_dict(copied, strict=False)
        return sorted(copied)
