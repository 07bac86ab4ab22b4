import math
from dataclasses import dataclass, field

import torch

from ..errors import ConfigurationError


@dataclass
class NoiseSchedule:
    """Discrete forward-noising schedule with precomputed cumulative products.

    ``kind`` is ``"linear"`` (betas linear in beta) or ``"scaled_linear"``
    (linear in sqrt(beta), the Stable Diffusion convention). Constants are
    kept in float64 and cast on use.
    """

    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"
    betas: torch.Tensor = field(init=False, repr=False)
    alphas_cumprod: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_train_steps < 2:
            raise ConfigurationError("num_train_steps must be >= 2")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ConfigurationError("need 0 < beta_start < beta_end < 1")
        T = self.num_train_steps
        if self.kind == "linear":
            betas = torch.linspace(self.beta_start, self.beta_end, T, dtype=torch.float64)
        elif self.kind == "scaled_linear":
            betas = torch.linspace(math.sqrt(self.beta_start), math.sqrt(self.beta_end), T, dtype=torch.float64) ** 2
        else:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        self.betas = betas
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    @property
    def T(self) -> int:
        return self.num_train_steps

    def to_dict(self) -> dict:
        return {
            "num_train_steps": self.num_train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }

    def _check_t(self, t: torch.Tensor):
        if torch.any(t < 0) or torch.any(t >= self.T):
            raise ConfigurationError(f"timestep out of range [0, {self.T})")

    def abar(self, t) -> torch.Tensor:
        """Cumulative alpha product at integer timestep(s) ``t`` (float64)."""
        t = torch.as_tensor(t, dtype=torch.long)
        self._check_t(t)
        return self.alphas_cumprod[t]

    def forward_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """Closed-form q(z_t | z_0): sqrt(abar) * z0 + sqrt(1 - abar) * eps.

        ``t`` may be a scalar or a per-sample ``(B,)`` tensor.
        """
        if eps.shape != z0.shape:
            raise ConfigurationError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
        a = self.abar(t)
        if a.dim() == 1:
            a = a.view(-1, *([1] * (z0.dim() - 1)))
        return forward_noise_abar(z0, a, eps)


def forward_noise_abar(z0: torch.Tensor, abar, eps: torch.Tensor) -> torch.Tensor:
    abar = torch.as_tensor(abar, dtype=torch.float64)
    s = abar.sqrt().to(z0.dtype)
    n = (1.0 - abar).sqrt().to(z0.dtype)
    return s * z0 + n * eps
