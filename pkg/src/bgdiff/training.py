"""Staged training: backbone, then the category branch, then both branches."""

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .core.model import BackgroundDiffusion, DenoiserConfig
from .data import AdRecord, CorpusArrays, DatasetManifest, load_arrays
from .errors import ConfigurationError, TrainingDivergedError
from .perturb import PerturbParams, perturb_background

log = logging.getLogger(__name__)

STAGES = ("backbone", "cg_only", "cg_pg")
COMPONENTS = ("backbone", "cg", "pg", "identifiers")
_STAGE_TRAINS = {
    "backbone": {"backbone", "identifiers"},
    "cg_only": {"cg", "identifiers"},
    "cg_pg": {"cg", "pg", "identifiers"},
}


@dataclass
class TrainConfig:
    stage: str = "backbone"
    batch_size: int = 16
    steps: int = 1000
    learning_rate: float = 1e-4
    seed: int = 0
    perturb: PerturbParams = field(default_factory=PerturbParams)
    # component -> True to freeze / False to train; unset components follow the stage default
    freeze: dict = field(default_factory=dict)
    # allow branch stages without their predecessor and train the backbone alongside
    joint: bool = False
    log_every: int = 10
    save_every: int = 0

    def __post_init__(self):
        if isinstance(self.perturb, dict):
            self.perturb = PerturbParams(**self.perturb)
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps <= 0 or self.batch_size < 2:
            raise ConfigurationError("steps must be > 0 and batch_size >= 2")
        unknown = set(self.freeze) - set(COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown freeze flags {sorted(unknown)}")

    def trainable(self) -> set:
        comps = set(_STAGE_TRAINS[self.stage])
        if self.joint:
            comps.add("backbone")
        for name, frozen in self.freeze.items():
            (comps.discard if frozen else comps.add)(name)
        return comps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perturb"]["sigma_range"] = list(self.perturb.sigma_range)
        return d


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Every random draw of step ``step`` comes from this stream, so resuming needs only (seed, step)."""
    return np.random.default_rng([seed, step, 0xB6D])


def parameter_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def component_checksums(model: BackgroundDiffusion) -> dict:
    return {c: parameter_checksum(model.component_parameters(c)) for c in COMPONENTS}


# ---------------------------------------------------------------- batches

def make_batch(arrays: CorpusArrays, indices, stage: str, perturb: PerturbParams,
               rng: np.random.Generator, schedule_T: int, latent_shape) -> dict:
    """Assemble one training batch; all randomness is drawn from ``rng`` in a fixed order."""
    indices = np.asarray(indices)
    B = len(indices)
    images = arrays.images[indices]
    masks = arrays.masks[indices]
    batch = {
        "images": torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))),
        "masks": torch.from_numpy(masks[:, None].copy()),
        "category_ids": torch.from_numpy(arrays.category_ids[indices].copy()),
        "t": torch.from_numpy(rng.integers(0, schedule_T, size=B)),
        "eps": torch.from_numpy(rng.standard_normal((B, *latent_shape)).astype(np.float32)),
        "pg_inputs": None,
        "sigmas": None,
    }
    if stage == "cg_pg":
        # mixup partners come from the same batch, never the record itself
        partners = (np.arange(B) + rng.integers(1, B, size=B)) % B
        pg, sig = [], []
        for i in range(B):
            rec = AdRecord(images[i], masks[i], int(arrays.category_ids[indices[i]]), arrays.record_ids[indices[i]])
            out = perturb_background(rec, images[partners[i]], perturb, rng)
            pg.append(out["pg_input"])
            sig.append(out["sigma_used"])
        batch["pg_inputs"] = torch.from_numpy(np.stack(pg).transpose(0, 3, 1, 2).astype(np.float32))
        batch["sigmas"] = sig
    return batch


def compute_loss(model: BackgroundDiffusion, batch: dict, stage: str, use_branches=True) -> torch.Tensor:
    """Epsilon-prediction MSE for one batch under the given stage's wiring."""
    images, masks, t, eps = batch["images"], batch["masks"], batch["t"], batch["eps"]
    z0 = model.encode(images)
    z_t = model.schedule.forward_noise(z0, t, eps)
    prompts = model.encode_prompts(batch["category_ids"])
    cg_res = pg_res = None
    if use_branches and stage in ("cg_only", "cg_pg"):
        cg_res = model.cg_forward(model.encode(images * masks), prompts, masks, z_t, t)
    if use_branches and stage == "cg_pg":
        pg_res = model.pg_forward(model.encode(batch["pg_inputs"]), z_t, t)
    pred = model.predict_noise(z_t, t, prompts, cg_res, pg_res)
    return F.mse_loss(pred, eps)


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    model: BackgroundDiffusion
    config: TrainConfig
    optimizer: torch.optim.Optimizer
    param_names: list
    stages: list
    step: int = 0
    losses: list = field(default_factory=list)

    def to_checkpoint(self) -> Checkpoint:
        opt = {"hparams": {"lr": self.config.learning_rate, "betas": [0.9, 0.999], "eps": 1e-8}, "params": {}}
        for name, p in zip(self.param_names, self._params()):
            st = self.optimizer.state.get(p)
            if st:
                opt["params"][name] = {"step": float(st["step"]), "exp_avg": st["exp_avg"], "exp_avg_sq": st["exp_avg_sq"]}
        return Checkpoint(model=self.model, stages=list(self.stages), step=self.step,
                          train_config=self.config.to_dict(), optimizer=opt)

    def _params(self):
        return self.optimizer.param_groups[0]["params"]


def _trainable_named(model: BackgroundDiffusion, comps: set):
    prefixes = {"backbone": "backbone.", "cg": "cg.", "pg": "pg.", "identifiers": "prompts.identifiers"}
    named = []
    for name, p in model.named_parameters():
        on = any(name.startswith(prefixes[c]) for c in comps)
        p.requires_grad_(on)
        if on:
            named.append((name, p))
    return named


def prepare_state(config: TrainConfig, category_names=None, model_config: DenoiserConfig | None = None,
                  init: Checkpoint | None = None, resume: Checkpoint | None = None) -> TrainState:
    """Build the model/optimizer for a stage, enforcing stage order and branch initialization."""
    torch.manual_seed(config.seed)
    if resume is not None:
        ckpt = resume
        if ckpt.stage != config.stage:
            raise ConfigurationError(f"cannot resume stage {config.stage!r} from a {ckpt.stage!r} checkpoint")
        history, step = list(ckpt.stages), ckpt.step
    elif init is not None:
        ckpt = init
        history, step = list(ckpt.stages), 0
    else:
        if category_names is None:
            raise ConfigurationError("category_names required when starting from scratch")
        model = BackgroundDiffusion(model_config or DenoiserConfig(), category_names, seed=config.seed)
        ckpt = Checkpoint(model=model)
        history, step = [], 0
    model = copy.deepcopy(ckpt.model)

    if resume is None:
        if config.stage == "cg_only" and "backbone" not in history and not config.joint:
            raise ConfigurationError("cg_only stage requires a trained backbone checkpoint (or joint=True)")
        if config.stage == "cg_pg" and "cg_only" not in history and not config.joint:
            raise ConfigurationError("cg_pg stage requires a cg_only checkpoint (or joint=True)")
        if config.stage in ("cg_only", "cg_pg") and "cg_only" not in history and "cg_pg" not in history:
            model.cg.load_from_backbone(model.backbone)
        if config.stage == "cg_pg" and "cg_pg" not in history:
            model.pg.load_from_backbone(model.backbone)
        history = history + [config.stage]

    named = _trainable_named(model, config.trainable())
    if not named:
        raise ConfigurationError("every component is frozen; nothing to train")
    names = [n for n, _ in named]
    opt = torch.optim.Adam([p for _, p in named], lr=config.learning_rate)
    if resume is not None and ckpt.optimizer is not None:
        for name, p in named:
            st = ckpt.optimizer["params"].get(name)
            if st is not None:
                opt.state[p] = {"step": torch.tensor(st["step"]), "exp_avg": st["exp_avg"].clone(),
                                "exp_avg_sq": st["exp_avg_sq"].clone()}
    return TrainState(model=model, config=config, optimizer=opt, param_names=names, stages=history, step=step)


def training_step(state: TrainState, batch: dict) -> float:
    loss = compute_loss(state.model, batch, state.config.stage)
    if not torch.isfinite(loss):
        snapshot = {"step": state.step, "t": batch["t"].tolist(), "loss": loss.item()}
        raise TrainingDivergedError(f"non-finite loss at step {state.step}: {snapshot}", snapshot)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return loss.item()


def batch_for_step(state: TrainState, arrays: CorpusArrays, step: int | None = None) -> dict:
    step = state.step if step is None else step
    rng = step_rng(state.config.seed, step)
    idx = rng.choice(len(arrays), size=state.config.batch_size, replace=len(arrays) < state.config.batch_size)
    m = state.model
    latent_shape = (m.config.latent_channels, m.config.latent_size, m.config.latent_size)
    return make_batch(arrays, idx, state.config.stage, state.config.perturb, rng, m.schedule.T, latent_shape)


def train(config: TrainConfig, manifest: DatasetManifest, *, init=None, resume=None,
          model_config: DenoiserConfig | None = None, out_dir=None, arrays: CorpusArrays | None = None) -> Checkpoint:
    """Run ``config.steps`` total steps of ``config.stage`` and return the final checkpoint.

    ``init`` / ``resume`` accept a ``Checkpoint`` or a path. When resuming,
    training continues from the checkpoint's step up to ``config.steps``.
    Writes ``train_log.jsonl`` (and periodic checkpoints) under ``out_dir``.
    """
    if isinstance(init, (str, Path)):
        init = load_checkpoint(init)
    if isinstance(resume, (str, Path)):
        resume = load_checkpoint(resume)
    if arrays is None:
        arrays = load_arrays(manifest, "train")
    state = prepare_state(config, manifest.category_names, model_config, init=init, resume=resume)
    frozen = [c for c in COMPONENTS if c not in config.trainable()]
    before = {c: parameter_checksum(state.model.component_parameters(c)) for c in frozen}

    out = Path(out_dir) if out_dir else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    try:
        while state.step < config.steps:
            loss = training_step(state, batch_for_step(state, arrays))
            state.losses.append(loss)
            if log_file and (state.step % config.log_every == 0 or state.step == config.steps):
                log_file.write(json.dumps({"step": state.step, "loss": loss, "lr": config.learning_rate,
                                           "stage": config.stage}) + "\n")
            if out is not None and config.save_every and state.step % config.save_every == 0:
                save_checkpoint(out / f"{config.stage}_step{state.step:06d}.bgd", state.to_checkpoint())
    except TrainingDivergedError as exc:
        if out is not None:
            save_checkpoint(out / "diverged_snapshot.bgd", state.to_checkpoint())
            exc.snapshot["snapshot_path"] = str(out / "diverged_snapshot.bgd")
        raise
    finally:
        if log_file:
            log_file.close()

    after = {c: parameter_checksum(state.model.component_parameters(c)) for c in frozen}
    if before != after:
        raise RuntimeError(f"frozen components changed during training: {[c for c in frozen if before[c] != after[c]]}")
    ckpt = state.to_checkpoint()
    ckpt.losses = list(state.losses)
    if out is not None:
        save_checkpoint(out / f"{config.stage}.bgd", ckpt)
    return ckpt
