"""Shared training plumbing: LR schedule, seeding, digests, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
from pathlib import Path

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def warmup_cosine_lr(
    step: int,
    total_steps: int,
    warmup_steps: int,
    warmup_start: float,
    lr_min: float,
    lr_max: float,
) -> float:
    """Linear warmup from ``warmup_start`` to ``lr_max``, then cosine
    annealing down to ``lr_min`` over the remaining steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return warmup_start + (lr_max - warmup_start) * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def param_digest(module: torch.nn.Module, only: list[str] | None = None) -> str:
    """SHA-256 over parameter values in name order; detects any mutation."""
    h = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        if only is not None and name not in only:
            continue
        h.update(name.encode())
        h.update(param.detach().cpu().to(torch.float64).numpy().tobytes())
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


class TrainingLog:
    """CSV training log, streamed to disk as rows arrive."""

    def __init__(self, path: str | Path, fields: list[str], flush_every: int = 25):
        self.path = Path(path)
        self.fields = fields
        self.flush_every = flush_every
        self.rows: list[dict] = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=fields)
        self._writer.writeheader()

    def add(self, **row) -> None:
        self.rows.append(row)
        self._writer.writerow(row)
        if len(self.rows) % self.flush_every == 0:
            self._file.flush()

    def write(self) -> None:
        self._file.flush()

    def close(self) -> None:
        self._file.close()


def save_checkpoint(out_dir: str | Path, module: torch.nn.Module, config: dict) -> Path:
    """Checkpoint directory: weights.pt + config.json (with config hash)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), out_dir / "weights.pt")
    meta = dict(config)
    meta["config_hash"] = config_hash(config)
    (out_dir / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True), "utf-8")
    return out_dir


def load_checkpoint_config(ckpt_dir: str | Path) -> dict:
    return json.loads((Path(ckpt_dir) / "config.json").read_text("utf-8"))


def load_weights(ckpt_dir: str | Path, module: torch.nn.Module) -> torch.nn.Module:
    state = torch.load(Path(ckpt_dir) / "weights.pt", map_location="cpu", weights_only=True)
    module.load_state_dict(state)
    return module
