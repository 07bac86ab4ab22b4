"""Deterministic DDIM-style sampling with product preservation."""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .core.checkpoint import Checkpoint
from .core.attention import downsample_mask
from .core.model import BackgroundDiffusion
from .core.schedule import NoiseSchedule
from .errors import ConfigurationError, ShapeError

log = logging.getLogger(__name__)

PRESERVE_MODES = ("final_composite", "per_step_blend")


@dataclass
class SampleRequest:
    product_image: np.ndarray  # H x W x 3 in [0, 1]
    product_mask: np.ndarray  # H x W, 1 = product
    category_id: int
    reference_image: np.ndarray | None = None
    reference_mask: np.ndarray | None = None
    steps: int = 50
    seed: int = 0
    preserve_mode: str = "final_composite"
    use_pg: bool | None = None  # None: use the reference branch whenever a reference is given and available
    reference_init: bool = True
    eta: float = 0.0

    def describe(self) -> dict:
        return {
            "category_id": int(self.category_id),
            "seed": int(self.seed),
            "steps": int(self.steps),
            "mode": self.preserve_mode,
            "has_reference": self.reference_image is not None,
            "use_pg": self.use_pg,
            "reference_init": self.reference_init,
            "eta": self.eta,
        }


def _image_to_tensor(img) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))


def ddim_timesteps(T: int, steps: int) -> list:
    if not 1 <= steps <= T:
        raise ConfigurationError(f"steps must be in [1, {T}], got {steps}")
    return [int(t) for t in np.linspace(T - 1, 0, steps).round().astype(int)]


def ddim_sample(eps_fn, z_T: torch.Tensor, schedule: NoiseSchedule, steps: int, *, clip=None,
                eta: float = 0.0, noise_fn=None, after_step=None) -> torch.Tensor:
    """Reverse loop ``z_T -> z_0``.

    ``eps_fn(z, t_tensor)`` predicts noise; ``clip`` optionally clamps the
    predicted clean latent to ``(lo, hi)``; ``after_step(z, t_prev)`` may
    rewrite the latent after each update (``t_prev = -1`` on the last one).
    """
    z = z_T
    ts = ddim_timesteps(schedule.T, steps)
    B = z.shape[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        a = schedule.alphas_cumprod[t]
        a_prev = schedule.alphas_cumprod[t_prev] if t_prev >= 0 else torch.tensor(1.0, dtype=torch.float64)
        eps = eps_fn(z, torch.full((B,), t, dtype=torch.long))
        x0 = (z - (1 - a).sqrt().float() * eps) / a.sqrt().float()
        if clip is not None:
            x0 = x0.clamp(*clip)
        sigma = eta * ((1 - a_prev) / (1 - a) * (1 - a / a_prev)).sqrt() if eta > 0 else torch.tensor(0.0, dtype=torch.float64)
        dir_coef = (1 - a_prev - sigma**2).clamp(min=0).sqrt().float()
        z = a_prev.sqrt().float() * x0 + dir_coef * eps
        if eta > 0 and t_prev >= 0:
            z = z + sigma.float() * (noise_fn(z.shape) if noise_fn else torch.randn(z.shape))
        if after_step is not None:
            z = after_step(z, t_prev)
    return z


def init_latent(reference, schedule: NoiseSchedule, rng: torch.Generator, model: BackgroundDiffusion, eps=None):
    """Starting latent: pure noise, or the reference image noised to the last training step."""
    cfg = model.config
    shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    noise = torch.randn(shape, generator=rng) if eps is None else eps
    if reference is None:
        return noise
    z_ref = model.encode(_image_to_tensor(reference))
    return schedule.forward_noise(z_ref, schedule.T - 1, noise)


def _resolve(checkpoint):
    if isinstance(checkpoint, Checkpoint):
        stages = checkpoint.stages
        return checkpoint.model, "cg_only" in stages or "cg_pg" in stages, "cg_pg" in stages
    if isinstance(checkpoint, BackgroundDiffusion):
        return checkpoint, True, True
    raise TypeError("expected a Checkpoint or BackgroundDiffusion")


def _check_request(req: SampleRequest, model: BackgroundDiffusion, has_pg: bool):
    s = model.config.image_size
    if np.shape(req.product_image) != (s, s, 3) or np.shape(req.product_mask) != (s, s):
        raise ShapeError(f"product image/mask must be {s}x{s}x3 / {s}x{s}")
    if req.preserve_mode not in PRESERVE_MODES:
        raise ConfigurationError(f"preserve_mode must be one of {PRESERVE_MODES}")
    if not 0 <= req.category_id < model.prompts.num_categories:
        raise ConfigurationError(f"unknown category id {req.category_id}")
    if req.use_pg and not has_pg:
        raise ConfigurationError("reference branch requested but checkpoint has no trained cg_pg stage")
    if req.use_pg and req.reference_image is None:
        raise ConfigurationError("reference branch requested without a reference image")
    if req.reference_image is not None and np.shape(req.reference_image) != (s, s, 3):
        raise ShapeError(f"reference image must be {s}x{s}x3")
    ddim_timesteps(model.schedule.T, req.steps)


@torch.no_grad()
def generate_batch(requests, checkpoint) -> list:
    """Sample several requests in one batched reverse loop.

    Requests must agree on steps, preserve mode, eta and branch usage.
    Results depend only on each request's own seed and inputs, up to
    floating-point batching effects; use :func:`generate` for bit-exact replay.
    """
    model, has_cg, has_pg = _resolve(checkpoint)
    model.eval()
    for r in requests:
        _check_request(r, model, has_pg)
    use_pg = [bool(has_pg and r.reference_image is not None) if r.use_pg is None else r.use_pg for r in requests]
    keys = {(r.steps, r.preserve_mode, r.eta, u) for r, u in zip(requests, use_pg)}
    if len(keys) != 1:
        raise ConfigurationError("batched requests must share steps, preserve_mode, eta and branch usage")
    steps, mode, eta, pg_on = keys.pop()
    sched = model.schedule
    cfg = model.config

    gens = [torch.Generator().manual_seed(int(r.seed)) for r in requests]
    z_T = torch.stack([
        init_latent(r.reference_image if r.reference_init else None, sched, g, model)
        for r, g in zip(requests, gens)
    ])
    images = torch.stack([_image_to_tensor(r.product_image) for r in requests])
    masks = torch.stack([torch.from_numpy(np.asarray(r.product_mask, dtype=np.float32))[None] for r in requests])
    cids = torch.tensor([int(r.category_id) for r in requests])
    prompts = model.encode_prompts(cids)
    product_latent = model.encode(images * masks)
    pg_latent = None
    if pg_on:
        refs = []
        for r in requests:
            ref = np.asarray(r.reference_image, dtype=np.float32)
            if r.reference_mask is not None:
                ref = ref * (1.0 - np.asarray(r.reference_mask, dtype=np.float32))[..., None]
            refs.append(_image_to_tensor(ref))
        pg_latent = model.encode(torch.stack(refs))

    def eps_fn(z, t):
        cg_res = model.cg_forward(product_latent, prompts, masks, z, t) if has_cg else None
        pg_res = model.pg_forward(pg_latent, z, t) if pg_on else None
        return model.predict_noise(z, t, prompts, cg_res, pg_res)

    after = None
    if mode == "per_step_blend":
        z_prod = model.encode(images)
        m_lat = downsample_mask(masks, cfg.latent_size)
        blend_eps = torch.stack([torch.randn(z_prod.shape[1:], generator=g) for g in gens])

        def after(z, t_prev):
            target = z_prod if t_prev < 0 else sched.forward_noise(z_prod, t_prev, blend_eps)
            return m_lat * target + (1 - m_lat) * z

    def noise_fn(shape):
        return torch.stack([torch.randn(shape[1:], generator=g) for g in gens])

    z0 = ddim_sample(eps_fn, z_T, sched, steps, clip=(0.0, 1.0), eta=eta, noise_fn=noise_fn, after_step=after)
    gen = model.decode(z0).clamp(0, 1).numpy().transpose(0, 2, 3, 1)
    out = []
    for r, g in zip(requests, gen):
        m = np.asarray(r.product_mask)[..., None] > 0.5
        out.append(np.where(m, np.asarray(r.product_image, dtype=np.float32), g.astype(np.float32)))
    return out


def generate(request: SampleRequest, checkpoint) -> np.ndarray:
    """Generate one background around the request's product (H x W x 3 in [0, 1])."""
    return generate_batch([request], checkpoint)[0]


def batch_generate(requests, checkpoint):
    """Run requests independently. Returns ``(images, provenance)``.

    Failed requests yield ``None`` in ``images`` and an ``error`` entry in
    their provenance record; the rest are unaffected.
    """
    images, prov = [], []
    for i, req in enumerate(requests):
        entry = {"index": i, **req.describe()}
        try:
            images.append(generate(req, checkpoint))
            entry["status"] = "ok"
        except Exception as exc:  # isolate per-request failures
            log.warning("request %d failed: %s", i, exc)
            images.append(None)
            entry["status"] = "error"
            entry["error"] = f"{type(exc).__name__}: {exc}"
        prov.append(entry)
    return images, prov
