"""Single-file checkpoint archive.

A checkpoint is a zip file with fixed timestamps (byte-stable for equal
content) holding:

``meta.json``
    ``format`` ("bgdiff-checkpoint"), ``version`` (int, mandatory),
    ``model_config`` (DenoiserConfig fields), ``schedule`` (kind, T, beta
    range and the full ``betas`` list), ``categories`` ([{id, name}]),
    ``identifier_table`` (tensor name of the K x d identifier rows),
    ``tensors`` ({name: shape}), ``stages`` (completed training stages in
    order), ``step``, ``train_config``, ``rng`` ({seed, step}) and
    ``optimizer`` ({lr, betas, eps, step, params}) or null.
``tensors/<name>.f32``
    Raw little-endian float32 data, C order.
``optim/<name>.<exp_avg|exp_avg_sq>.f32``
    Adam moment estimates for every trainable parameter.
"""

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigurationError
from .model import BackgroundDiffusion, DenoiserConfig

FORMAT = "bgdiff-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model: BackgroundDiffusion
    stages: list = field(default_factory=list)
    step: int = 0
    train_config: dict = field(default_factory=dict)
    optimizer: dict | None = None  # {"hparams": {...}, "params": {name: {"exp_avg", "exp_avg_sq", "step"}}}
    meta: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)

    @property
    def stage(self):
        return self.stages[-1] if self.stages else None

    def has_pg(self) -> bool:
        return "cg_pg" in self.stages


def _to_le_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()


def _from_le_bytes(data: bytes, shape) -> torch.Tensor:
    arr = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    return torch.from_numpy(arr.copy())


def _write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, ckpt: Checkpoint):
    model = ckpt.model
    state = model.state_dict()
    sched = model.schedule
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "schedule": {**sched.to_dict(), "betas": [float(b) for b in sched.betas]},
        "categories": [{"id": i, "name": n} for i, n in enumerate(model.category_names)],
        "identifier_table": "prompts.identifiers",
        "tensors": {k: list(v.shape) for k, v in state.items()},
        "stages": list(ckpt.stages),
        "step": int(ckpt.step),
        "train_config": ckpt.train_config,
        "rng": {"seed": ckpt.train_config.get("seed"), "step": int(ckpt.step)},
        "optimizer": None,
    }
    blobs = {f"tensors/{k}.f32": _to_le_bytes(v) for k, v in state.items()}
    if ckpt.optimizer is not None:
        params = {}
        for name, st in ckpt.optimizer["params"].items():
            params[name] = {"step": float(st["step"])}
            for key in ("exp_avg", "exp_avg_sq"):
                blobs[f"optim/{name}.{key}.f32"] = _to_le_bytes(st[key])
        meta["optimizer"] = {"hparams": ckpt.optimizer["hparams"], "params": params}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name in sorted(blobs):
            _write(zf, name, blobs[name])
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT or "version" not in meta:
            raise ConfigurationError(f"{path}: not a checkpoint archive")
        if meta["version"] != VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {meta['version']}")
        cfg = DenoiserConfig(**meta["model_config"])
        names = [c["name"] for c in sorted(meta["categories"], key=lambda c: c["id"])]
        model = BackgroundDiffusion(cfg, names)
        state = {k: _from_le_bytes(zf.read(f"tensors/{k}.f32"), shape) for k, shape in meta["tensors"].items()}
        model.load_state_dict(state, strict=True)
        optimizer = None
        if meta.get("optimizer"):
            params = {}
            for name, st in meta["optimizer"]["params"].items():
                shape = meta["tensors"][name]
                params[name] = {
                    "step": st["step"],
                    "exp_avg": _from_le_bytes(zf.read(f"optim/{name}.exp_avg.f32"), shape),
                    "exp_avg_sq": _from_le_bytes(zf.read(f"optim/{name}.exp_avg_sq.f32"), shape),
                }
            optimizer = {"hparams": meta["optimizer"]["hparams"], "params": params}
    return Checkpoint(model=model, stages=meta["stages"], step=meta["step"],
                      train_config=meta["train_config"], optimizer=optimizer, meta=meta)
