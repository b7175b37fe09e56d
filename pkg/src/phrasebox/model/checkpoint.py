"""Checkpoint container: one .npz holding the config, every parameter array by
path name, and the training seed. Round-trips bit-exactly."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ..errors import TeacherLoadError
from .config import ModelConfig
from .network import GroundingModel

FORMAT = "phrasebox-checkpoint-v1"
META_KEY = "__meta__"


def save_checkpoint(
    model: GroundingModel,
    path: str | Path,
    seed: int | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "seed": model.init_seed if seed is None else seed,
        "extra": extra or {},
    }
    arrays = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    with open(path, "wb") as fh:
        np.savez(fh, **{META_KEY: np.array(json.dumps(meta)), **arrays})
    return path


def load_checkpoint(path: str | Path) -> tuple[GroundingModel, dict[str, Any]]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data[META_KEY]))
            if meta.get("format") != FORMAT:
                raise TeacherLoadError(f"{path}: unknown checkpoint format")
            config = ModelConfig.from_dict(meta["config"])
            model = GroundingModel(config, seed=meta["seed"])
            state = {
                name: torch.from_numpy(np.array(data[name]))
                for name in data.files
                if name != META_KEY
            }
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise TeacherLoadError(f"cannot load checkpoint {path}: {exc}") from exc
    model.load_state_dict(state)
    model.eval()
    return model, meta
