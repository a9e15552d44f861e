"""Checkpoint archive: one ``.npz`` holding named parameter arrays, optimizer
momentum buffers, the building config and a small metadata record."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import HRDNetConfig
from .model import HRDNet


def _encode(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _decode(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


def save_checkpoint(path, model: HRDNet, optimizer: torch.optim.Optimizer | None = None,
                    meta: dict | None = None) -> Path:
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"optim/{names[id(p)]}"] = buf.detach().cpu().numpy()
    arrays["__config__"] = _encode(model.cfg.to_dict())
    arrays["__meta__"] = _encode(meta or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild the model stored at ``path``.

    Returns ``(model, meta, optimizer)``; the optimizer is only created (and
    its momentum restored) when ``optimizer_factory(model)`` is given.
    """
    with np.load(path) as archive:
        cfg = HRDNetConfig.from_dict(_decode(archive["__config__"]))
        meta = _decode(archive["__meta__"])
        model = HRDNet(cfg)
        state = {k[len("model/"):]: torch.from_numpy(archive[k].copy())
                 for k in archive.files if k.startswith("model/")}
        model.load_state_dict(state)
        optimizer = None
        if optimizer_factory is not None:
            optimizer = optimizer_factory(model)
            params = dict(model.named_parameters())
            for k in archive.files:
                if k.startswith("optim/"):
                    p = params[k[len("optim/"):]]
                    optimizer.state[p]["momentum_buffer"] = torch.from_numpy(archive[k].copy())
    return model, meta, optimizer
