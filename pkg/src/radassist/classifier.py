"""Multi-label finding classifier: log-weighted cross-entropy training,
macro-F1 model selection, and the thresholded structured-findings output
that feeds prompt construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import ChestStudy, CorpusSplit
from .errors import ConfigError, ContractError, DivergenceError, StateError
from .trainutil import TrainingLog, save_checkpoint, seed_everything
from .vision import ConvEncoder, VisionConfig
from .vocab import FindingVector, Vocabulary


@dataclass
class ClassifierConfig:
    image_size: int = 224
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    head_hidden: int = 128
    threshold: float = 0.5
    uncertain_as_positive: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "encoder_channels": list(self.encoder_channels),
            "head_hidden": self.head_hidden,
            "threshold": self.threshold,
            "uncertain_as_positive": self.uncertain_as_positive,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(
            image_size=d["image_size"],
            encoder_channels=tuple(d["encoder_channels"]),
            head_hidden=d["head_hidden"],
            threshold=d["threshold"],
            uncertain_as_positive=d["uncertain_as_positive"],
            seed=d["seed"],
        )


@dataclass(frozen=True)
class FindingProbabilities:
    p: np.ndarray  # one probability per vocabulary label

    def __post_init__(self):
        if np.any(self.p < 0) or np.any(self.p > 1):
            raise ContractError("probabilities outside [0, 1]")


def class_weights(
    train_labels: list[FindingVector], uncertain_as_positive: bool = True
) -> np.ndarray:
    """Positive-class weights w_c = max(1, ln(N / max(1, n_c)))."""
    if not train_labels:
        raise ConfigError("class weights need at least one training study")
    n = len(train_labels)
    vocab = train_labels[0].vocab
    counts = np.zeros(len(vocab))
    for fv in train_labels:
        for name in fv.present(uncertain_as_positive):
            counts[vocab.index(name)] += 1
    return np.maximum(1.0, np.log(n / np.maximum(1.0, counts)))


def weighted_loss(
    probabilities: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Mean binary cross-entropy with per-class positive-term weights."""
    if probabilities.shape != targets.shape:
        raise ContractError(
            f"shape mismatch: probabilities {tuple(probabilities.shape)} "
            f"vs targets {tuple(targets.shape)}"
        )
    if (probabilities < 0).any() or (probabilities > 1).any():
        raise ContractError("probabilities outside [0, 1]")
    eps = torch.finfo(probabilities.dtype).tiny
    p = probabilities.clamp(eps, 1.0 - torch.finfo(probabilities.dtype).eps)
    w = weights.to(p)
    term = -w * targets * torch.log(p) - (1.0 - targets) * torch.log(1.0 - p)
    return term.mean()


def targets_from_labels(
    studies: list[ChestStudy], vocab: Vocabulary, uncertain_as_positive: bool = True
) -> np.ndarray:
    out = np.zeros((len(studies), len(vocab)), dtype=np.float32)
    for i, s in enumerate(studies):
        for name in s.gold_labels.present(uncertain_as_positive):
            out[i, vocab.index(name)] = 1.0
    return out


# --------------------------------------------------------------------------
# Macro F1 over binary label matrices (shared with clinical-efficacy scoring)
# --------------------------------------------------------------------------

def per_class_prf(pred: np.ndarray, gt: np.ndarray) -> dict[str, np.ndarray]:
    """Per-class precision/recall/F1 from boolean (N, C) matrices."""
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = (pred & gt).sum(axis=0).astype(float)
    fp = (pred & ~gt).sum(axis=0).astype(float)
    fn = (~pred & gt).sum(axis=0).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(
            precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0
        )
    return {"precision": precision, "recall": recall, "f1": f1, "support": gt.sum(axis=0)}


def macro_f1_binary(pred: np.ndarray, gt: np.ndarray, zero_support: str = "zero") -> float:
    """Unweighted mean class F1.

    ``zero_support="zero"`` counts classes with no gold and no predicted
    positives as F1 = 0; ``"skip"`` drops them from the mean.
    """
    stats = per_class_prf(pred, gt)
    f1 = stats["f1"]
    if zero_support == "skip":
        keep = (stats["support"] > 0) | (pred.astype(bool).sum(axis=0) > 0)
        if not keep.any():
            return 0.0
        f1 = f1[keep]
    return float(f1.mean())


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class FindingClassifier(nn.Module):
    def __init__(self, config: ClassifierConfig, n_labels: int):
        super().__init__()
        self.config = config
        vis_cfg = VisionConfig(
            image_size=config.image_size, encoder_channels=config.encoder_channels
        )
        self.encoder = ConvEncoder(vis_cfg)
        flat = vis_cfg.patch_count * config.encoder_channels[-1]
        self.head = nn.Sequential(
            nn.Linear(flat, config.head_hidden), nn.ReLU(), nn.Linear(config.head_hidden, n_labels)
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, S, S) -> per-label probabilities (B, C)."""
        grid = self.encoder(images)
        return torch.sigmoid(self.head(grid.flatten(1)))


class ClassifierStack:
    """Trained classifier plus vocabulary and per-class thresholds."""

    def __init__(self, config: ClassifierConfig, vocab: Vocabulary | None = None):
        self.config = config
        self.vocab = vocab or Vocabulary()
        seed_everything(config.seed)
        self.model = FindingClassifier(config, len(self.vocab))
        self.thresholds = np.full(len(self.vocab), config.threshold)

    def classify(self, image: np.ndarray) -> FindingProbabilities:
        tensor = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        if tensor.dim() != 2:
            raise ContractError(f"expected a 2-D image, got shape {tuple(tensor.shape)}")
        self.model.eval()
        with torch.no_grad():
            p = self.model(tensor.unsqueeze(0))[0].numpy()
        return FindingProbabilities(p=p.astype(np.float64))

    def classify_batch(self, images: np.ndarray) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            return self.model(torch.as_tensor(images, dtype=torch.float32)).numpy()

    def structured_findings(self, probs: FindingProbabilities) -> list[str]:
        """Label names crossing their thresholds, in vocabulary order."""
        return [
            name
            for i, name in enumerate(self.vocab.names)
            if probs.p[i] >= self.thresholds[i]
        ]

    def save(self, out_dir: str | Path, extra_meta: dict | None = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg = self.config.to_dict()
        cfg["vocab"] = list(self.vocab.names)
        if extra_meta:
            cfg.update(extra_meta)
        save_checkpoint(out_dir, self.model, cfg)
        (out_dir / "thresholds.json").write_text(
            json.dumps({n: float(t) for n, t in zip(self.vocab.names, self.thresholds)}, indent=2),
            "utf-8",
        )
        return out_dir

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> "ClassifierStack":
        ckpt_dir = Path(ckpt_dir)
        if not (ckpt_dir / "weights.pt").exists():
            raise StateError(f"no classifier weights at {ckpt_dir}")
        meta = json.loads((ckpt_dir / "config.json").read_text("utf-8"))
        stack = cls(ClassifierConfig.from_dict(meta), Vocabulary(meta["vocab"]))
        state = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
        stack.model.load_state_dict(state)
        stack.model.eval()
        thr_file = ckpt_dir / "thresholds.json"
        if thr_file.exists():
            thr = json.loads(thr_file.read_text("utf-8"))
            stack.thresholds = np.array([thr[n] for n in stack.vocab.names])
        return stack


@dataclass
class ClassifierTrainConfig:
    epochs: int = 6
    batch_size: int = 16
    lr: float = 5e-5
    weight_decay: float = 0.01
    seed: int = 0
    model: ClassifierConfig = field(default_factory=ClassifierConfig)


def train_classifier(
    corpus: list[ChestStudy],
    split: CorpusSplit,
    config: ClassifierTrainConfig,
    out_dir: str | Path,
    vocab: Vocabulary | None = None,
) -> Path:
    """Train with log-weighted BCE; keep the epoch with best validation
    macro F1; write checkpoint + log."""
    vocab = vocab or (corpus[0].gold_labels.vocab if corpus else Vocabulary())
    train = split.subset(corpus, "train")
    val = split.subset(corpus, "validation")
    if not train:
        raise ConfigError("classifier training requires a non-empty train split")

    stack = ClassifierStack(config.model, vocab)
    weights = class_weights(
        [s.gold_labels for s in train], config.model.uncertain_as_positive
    )
    w_tensor = torch.from_numpy(weights).float()

    x_train = torch.from_numpy(np.stack([s.image for s in train])).float()
    y_train = torch.from_numpy(
        targets_from_labels(train, vocab, config.model.uncertain_as_positive)
    )
    x_val = np.stack([s.image for s in val]) if val else None
    y_val = targets_from_labels(val, vocab, config.model.uncertain_as_positive) if val else None

    opt = torch.optim.AdamW(
        stack.model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    log = TrainingLog(Path(out_dir) / "log.csv", ["epoch", "train_loss", "val_macro_f1", "lr"])
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)

    best_f1 = -1.0
    best_state = {k: v.clone() for k, v in stack.model.state_dict().items()}
    val_history: list[float] = []
    for epoch in range(config.epochs):
        stack.model.train()
        order = torch.randperm(len(train), generator=gen)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            probs = stack.model(x_train[idx])
            loss = weighted_loss(probs, y_train[idx], w_tensor)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite classifier loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= len(train)

        if x_val is not None and len(x_val):
            probs_val = stack.classify_batch(x_val)
            pred = probs_val >= stack.thresholds[None, :]
            val_f1 = macro_f1_binary(pred, y_val.astype(bool))
        else:
            val_f1 = float("nan")
        val_history.append(val_f1)
        if math.isnan(val_f1) or val_f1 >= best_f1:
            best_f1 = val_f1 if not math.isnan(val_f1) else best_f1
            best_state = {k: v.clone() for k, v in stack.model.state_dict().items()}
        log.add(
            epoch=epoch, train_loss=f"{epoch_loss:.6f}",
            val_macro_f1=f"{val_f1:.4f}", lr=f"{config.lr:.3e}",
        )

    if config.epochs > 0:
        stack.model.load_state_dict(best_state)
    stack.model.eval()
    out = stack.save(
        out_dir,
        extra_meta={
            "class_weights": [float(w) for w in weights],
            "val_macro_f1": val_history,
            "epochs": config.epochs,
        },
    )
    log.write()
    return out
