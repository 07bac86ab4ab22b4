from .attention import CrossAttention, MaskedCrossAttention, downsample_mask, masked_cross_attention
from .codec import decode_latent, encode_latent
from .model import BackgroundDiffusion, DenoiserConfig
from .prompts import PromptEncoder, PromptPair, encode_prompts
from .schedule import NoiseSchedule

__all__ = [
    "BackgroundDiffusion",
    "CrossAttention",
    "DenoiserConfig",
    "MaskedCrossAttention",
    "NoiseSchedule",
    "PromptEncoder",
    "PromptPair",
    "decode_latent",
    "downsample_mask",
    "encode_latent",
    "encode_prompts",
    "masked_cross_attention",
]
