"""Templated prompts with a learned per-category background identifier.

The product prompt reads ``"a photo of <category>"`` and the background
prompt ``"in the background of <D_k>"``. Template words and category names
come from a frozen seeded embedding table (no tokenizer, no text model);
only the identifier rows ``D_k`` are trainable.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ConfigurationError

FG_TEMPLATE = ("a", "photo", "of")
BG_TEMPLATE = ("in", "the", "background", "of")
_WORDS = tuple(dict.fromkeys(FG_TEMPLATE + BG_TEMPLATE + ("product",)))

PROMPT_MODES = ("category", "shared")


@dataclass
class PromptPair:
    p_fg: torch.Tensor  # (B, L_f, d)
    p_bg: torch.Tensor  # (B, L_b, d)

    def concat(self) -> torch.Tensor:
        return torch.cat([self.p_fg, self.p_bg], dim=1)


class PromptEncoder(nn.Module):
    """Owns the frozen word table and the trainable ``IdentifierTable``.

    In ``"shared"`` mode every category gets the same product word and the
    same identifier row, which turns the category identifier off.
    """

    def __init__(self, category_names, dim: int, mode: str = "category", seed: int = 0):
        super().__init__()
        if mode not in PROMPT_MODES:
            raise ConfigurationError(f"prompt mode must be one of {PROMPT_MODES}, got {mode!r}")
        if len(category_names) < 1:
            raise ConfigurationError("need at least one category")
        self.category_names = list(category_names)
        self.mode = mode
        self.dim = dim
        g = torch.Generator().manual_seed(10_007 + seed)
        n_frozen = len(_WORDS) + len(self.category_names)
        self.register_buffer("word_table", torch.randn(n_frozen, dim, generator=g))
        n_ids = len(self.category_names) if mode == "category" else 1
        self.identifiers = nn.Parameter(torch.randn(n_ids, dim, generator=g))

    @property
    def num_categories(self) -> int:
        return len(self.category_names)

    def _word(self, w: str) -> torch.Tensor:
        return self.word_table[_WORDS.index(w)]

    def forward(self, category_id) -> PromptPair:
        cid = torch.as_tensor(category_id, dtype=torch.long).reshape(-1)
        if torch.any(cid < 0) or torch.any(cid >= self.num_categories):
            raise KeyError(f"unknown category id in {cid.tolist()} (have {self.num_categories})")
        B = cid.shape[0]
        fg_words = torch.stack([self._word(w) for w in FG_TEMPLATE])
        bg_words = torch.stack([self._word(w) for w in BG_TEMPLATE])
        if self.mode == "category":
            subject = self.word_table[len(_WORDS) + cid]
            ident = self.identifiers[cid]
        else:
            subject = self._word("product").expand(B, -1)
            ident = self.identifiers[torch.zeros_like(cid)]
        p_fg = torch.cat([fg_words.expand(B, -1, -1), subject[:, None]], dim=1)
        p_bg = torch.cat([bg_words.expand(B, -1, -1), ident[:, None]], dim=1)
        return PromptPair(p_fg, p_bg)


def encode_prompts(category_id, encoder: PromptEncoder) -> PromptPair:
    return encoder(category_id)
