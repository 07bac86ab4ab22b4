from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn

from ..errors import ConfigurationError, ShapeError
from .attention import downsample_mask
from .codec import decode_latent, encode_latent
from .prompts import PROMPT_MODES, PromptEncoder, PromptPair
from .schedule import NoiseSchedule
from .unet import Conditioning, ControlBranch, UNetBackbone


@dataclass
class DenoiserConfig:
    image_size: int = 32
    codec_factor: int = 2
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    attention_resolutions: tuple = (8, 4)  # latent resolutions
    prompt_dim: int = 64
    num_heads: int = 4
    image_channels: int = 3
    cg_attention: str = "masked"  # "standard" swaps in plain ControlNet-style attention
    prompt_mode: str = "category"
    schedule: dict = field(default_factory=lambda: NoiseSchedule().to_dict())

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_resolutions = tuple(self.attention_resolutions)
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ConfigurationError(f"image_size must be a power of two >= 16, got {s}")
        if self.codec_factor < 1 or s % self.codec_factor:
            raise ConfigurationError("codec_factor must divide image_size")
        if min(self.base_channels, self.prompt_dim, self.num_heads, *self.channel_mults) <= 0:
            raise ConfigurationError("all dimensions must be positive")
        if self.latent_size % 2 ** (len(self.channel_mults) - 1):
            raise ConfigurationError("latent size too small for the number of levels")
        levels = {self.latent_size // 2**i for i in range(len(self.channel_mults))}
        if not levels & set(self.attention_resolutions):
            raise ConfigurationError("attention must be present at one or more UNet resolutions")
        if self.cg_attention not in ("masked", "standard"):
            raise ConfigurationError(f"cg_attention must be 'masked' or 'standard', got {self.cg_attention!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigurationError(f"prompt_mode must be one of {PROMPT_MODES}")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.codec_factor

    @property
    def latent_channels(self) -> int:
        return self.image_channels * self.codec_factor**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


class BackgroundDiffusion(nn.Module):
    """Backbone denoiser plus the category branch (CG) and reference branch (PG).

    Images enter as ``(B, 3, H, W)`` tensors in [0, 1]; masks as ``(B, 1, H, W)``
    with 1 on the product.
    """

    def __init__(self, config: DenoiserConfig, category_names, seed: int = 0):
        super().__init__()
        self.config = config
        self.schedule = NoiseSchedule(**config.schedule)
        self.prompts = PromptEncoder(category_names, config.prompt_dim, config.prompt_mode, seed=seed)
        self.backbone = UNetBackbone(config)
        # CG hint = product-only latent + product mask at latent resolution
        self.cg = ControlBranch(config, config.cg_attention, config.latent_channels + 1)
        self.pg = ControlBranch(config, None, config.latent_channels)

    @property
    def category_names(self):
        return self.prompts.category_names

    # codec
    def encode(self, image):
        return encode_latent(image, self.config.codec_factor, self.config.image_size)

    def decode(self, z):
        return decode_latent(z, self.config.codec_factor, self.config.image_channels)

    def encode_prompts(self, category_id) -> PromptPair:
        return self.prompts(category_id)

    def mask_pyramid(self, mask):
        if mask.dim() == 3:
            mask = mask.unsqueeze(1)
        if mask.shape[-1] != self.config.image_size:
            raise ShapeError(f"mask is {mask.shape[-1]}px, model expects {self.config.image_size}px")
        sizes = {self.config.latent_size // 2**i for i in range(len(self.config.channel_mults))}
        return {r: downsample_mask(mask, r) for r in sizes}

    def branches_from_backbone(self, which=("cg", "pg")):
        for name in which:
            getattr(self, name).load_from_backbone(self.backbone)

    def cg_forward(self, product_latent, prompts: PromptPair, mask, z_t, t):
        masks = self.mask_pyramid(mask)
        hint = torch.cat([product_latent, masks[self.config.latent_size].to(product_latent.dtype)], dim=1)
        if self.config.cg_attention == "masked":
            cond = Conditioning(p_fg=prompts.p_fg, p_bg=prompts.p_bg, masks=masks)
        else:
            # same prompt the backbone sees, as in a plain control branch
            cond = Conditioning(context=prompts.concat())
        return self.cg(hint, z_t, t, cond)

    def pg_forward(self, reference_latent, z_t, t):
        return self.pg(reference_latent, z_t, t, Conditioning())

    def predict_noise(self, z_t, t, prompts: PromptPair, cg_res=None, pg_res=None, return_decoder_inputs=False):
        return self.backbone(z_t, t, prompts.concat(), residuals=(cg_res, pg_res),
                             return_decoder_inputs=return_decoder_inputs)

    def component_parameters(self, name):
        if name == "identifiers":
            return [self.prompts.identifiers]
        return list(getattr(self, name).parameters())

    def with_cg_attention(self, mode: str) -> "BackgroundDiffusion":
        """Copy of this model whose CG branch uses ``mode`` attention.

        Backbone and prompt weights are shared by value; the new CG branch is
        freshly initialized and should be loaded from the backbone before training.
        """
        clone = BackgroundDiffusion(replace(self.config, cg_attention=mode), self.category_names)
        clone.backbone.load_state_dict(self.backbone.state_dict())
        clone.prompts.load_state_dict(self.prompts.state_dict())
        clone.pg.load_state_dict(self.pg.state_dict())
        return clone

    def named_tensors(self):
        """Every parameter and buffer keyed by its state-dict name."""
        return dict(self.state_dict())
