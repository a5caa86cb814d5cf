"""Language-model stack: a small decoder-only transformer, low-rank adapter
math, base/adapter training loops, and deterministic text generation.

The base LM is trained from scratch on dialog-formatted text (image slots are
plain ``<img>`` embeddings). Adapter fine-tuning freezes every base weight
and updates only the low-rank deltas on attention projections plus a
low-rank input projection that mixes aligned image tokens into the ``<img>``
embeddings, so injected image features start as an exact no-op and are
learned during fine-tuning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, DivergenceError, StateError
from .prompts import PromptBundle
from .tokenizer import WordTokenizer
from .trainutil import TrainingLog, save_checkpoint, seed_everything

IGNORE_INDEX = -100


# --------------------------------------------------------------------------
# Low-rank delta algebra
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LowRankDelta:
    """Rank-r additive update (alpha/r) * B @ A for one weight matrix."""

    A: np.ndarray  # r x k
    B: np.ndarray  # d x r
    rank: int
    alpha: float

    def __post_init__(self):
        r_a, k = self.A.shape
        d, r_b = self.B.shape
        if r_a != self.rank or r_b != self.rank:
            raise ContractError(f"rank {self.rank} does not match A {self.A.shape} / B {self.B.shape}")
        if not 1 <= self.rank <= min(d, k):
            raise ContractError(f"rank {self.rank} outside [1, min({d}, {k})]")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def adapted_forward(W: np.ndarray, delta: LowRankDelta, x: np.ndarray) -> np.ndarray:
    """y = W x + (alpha/r) * B (A x) without materializing the merged matrix."""
    if W.shape[1] != x.shape[0] or delta.A.shape[1] != x.shape[0] or delta.B.shape[0] != W.shape[0]:
        raise ContractError(
            f"shape mismatch: W {W.shape}, A {delta.A.shape}, B {delta.B.shape}, x {x.shape}"
        )
    return W @ x + delta.scale * (delta.B @ (delta.A @ x))


def merge_delta(W: np.ndarray, delta: LowRankDelta) -> np.ndarray:
    """Dense W' = W + (alpha/r) * B @ A."""
    if delta.A.shape[1] != W.shape[1] or delta.B.shape[0] != W.shape[0]:
        raise ContractError(f"shape mismatch: W {W.shape}, A {delta.A.shape}, B {delta.B.shape}")
    return W + delta.scale * (delta.B @ delta.A)


class LoRALinear(nn.Module):
    """Frozen linear plus trainable rank-r delta."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if not 1 <= rank <= min(base.in_features, base.out_features):
            raise ContractError(f"rank {rank} invalid for {base.in_features}->{base.out_features}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.Parameter(torch.randn(rank, base.in_features) * 0.02)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = self.alpha / self.rank
        return self.base(x) + scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def delta(self) -> LowRankDelta:
        return LowRankDelta(
            A=self.lora_A.detach().numpy().copy(),
            B=self.lora_B.detach().numpy().copy(),
            rank=self.rank,
            alpha=self.alpha,
        )


class LowRankAdapter(nn.Module):
    """Standalone rank-r map (no base weight); starts as the zero map."""

    def __init__(self, in_features: int, out_features: int, rank: int, alpha: float):
        super().__init__()
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.Parameter(torch.randn(rank, in_features) * 0.02)
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self.alpha / self.rank) * F.linear(F.linear(x, self.lora_A), self.lora_B)


# --------------------------------------------------------------------------
# Toy decoder-only transformer
# --------------------------------------------------------------------------

@dataclass
class LMConfig:
    d_model: int = 128
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 384
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "layers": self.layers,
            "heads": self.heads,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        return cls(
            d_model=d["d_model"], layers=d["layers"], heads=d["heads"],
            max_seq_len=d["max_seq_len"], seed=d["seed"],
        )


def _rotary_tables(head_dim: int, max_len: int, dtype=torch.float32):
    inv_freq = 1.0 / (10000.0 ** (torch.arange(0, head_dim, 2, dtype=dtype) / head_dim))
    angles = torch.arange(max_len, dtype=dtype)[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, offset: int):
    # x: (B, heads, T, head_dim); rotate pairs (even, odd)
    T = x.shape[2]
    c = cos[offset : offset + T].to(x.dtype)[None, None]
    s = sin[offset : offset + T].to(x.dtype)[None, None]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


class CausalSelfAttention(nn.Module):
    """Multi-head causal attention with rotary position encoding (relative
    offsets generalize to prompt layouts unseen in training)."""

    def __init__(self, d_model: int, heads: int, max_seq_len: int):
        super().__init__()
        if d_model % heads:
            raise ConfigError("d_model must be divisible by heads")
        if (d_model // heads) % 2:
            raise ConfigError("head dimension must be even for rotary encoding")
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model, bias=False)
        self.o_proj = nn.Linear(d_model, d_model, bias=False)
        cos, sin = _rotary_tables(self.head_dim, max_seq_len)
        self.register_buffer("rot_cos", cos, persistent=False)
        self.register_buffer("rot_sin", sin, persistent=False)

    def forward(self, x, past=None):
        B, T, _ = x.shape

        def split(t):
            return t.view(B, T, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        past_len = 0 if past is None else past[0].shape[2]
        q = _apply_rotary(q, self.rot_cos, self.rot_sin, past_len)
        k = _apply_rotary(k, self.rot_cos, self.rot_sin, past_len)
        if past is not None:
            pk, pv = past
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(
            torch.ones(T, past_len + T, dtype=torch.bool, device=x.device),
            diagonal=1 + past_len,
        )
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, -1)
        return self.o_proj(out), (k, v)


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, max_seq_len: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, heads, max_seq_len)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x, past=None):
        attn_out, present = self.attn(self.ln1(x), past)
        x = x + attn_out
        return x + self.mlp(self.ln2(x)), present


class ToyLM(nn.Module):
    """Decoder-only transformer with a tied LM head."""

    def __init__(self, config: LMConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.token_embed = nn.Embedding(vocab_size, config.d_model)
        self.blocks = nn.ModuleList(
            DecoderBlock(config.d_model, config.heads, config.max_seq_len)
            for _ in range(config.layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)

    def run(self, embeds: torch.Tensor, past=None):
        offset = 0 if past is None else past[0][0].shape[2]
        T = embeds.shape[1]
        if offset + T > self.config.max_seq_len:
            raise ContractError(
                f"sequence length {offset + T} exceeds max_seq_len {self.config.max_seq_len}"
            )
        x = embeds
        presents = []
        for i, block in enumerate(self.blocks):
            x, present = block(x, None if past is None else past[i])
            presents.append(present)
        logits = F.linear(self.ln_f(x), self.token_embed.weight)
        return logits, presents


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q_proj", "v_proj")

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoRAConfig":
        return cls(rank=d["rank"], alpha=d["alpha"], targets=tuple(d["targets"]))


class AdaptedLM(nn.Module):
    """Toy LM plus (optional) adapters and the image-token input projection."""

    def __init__(self, lm: ToyLM, tokenizer: WordTokenizer, lora: LoRAConfig | None = None):
        super().__init__()
        self.lm = lm
        self.tokenizer = tokenizer
        self.lora = lora
        self.img_delta: LowRankAdapter | None = None
        if lora is not None:
            for p in self.lm.parameters():
                p.requires_grad_(False)
            for block in self.lm.blocks:
                for name in lora.targets:
                    if not hasattr(block.attn, name):
                        raise ConfigError(f"unknown adapter target {name!r}")
                    setattr(
                        block.attn, name,
                        LoRALinear(getattr(block.attn, name), lora.rank, lora.alpha),
                    )
            self.img_delta = LowRankAdapter(
                lm.config.d_model, lm.config.d_model, lora.rank, lora.alpha
            )

    def embed(self, ids: torch.Tensor, aligned: torch.Tensor | None = None) -> torch.Tensor:
        """Token embeddings with aligned image tokens mixed into <img> slots.

        ``aligned`` is (B, n_img, d_model); rows without an image must pass
        zero rows (they are never read).
        """
        e = self.lm.token_embed(ids)
        if aligned is None or self.img_delta is None:
            return e
        mask = ids.eq(self.tokenizer.img_id)
        counts = mask.sum(dim=1)
        has_img = counts > 0
        if not bool(has_img.any()):
            return e
        if not all(int(c) in (0, aligned.shape[1]) for c in counts):
            raise ContractError("every image prompt must contain a full <IMG> span")
        delta = self.img_delta(aligned.to(e.dtype))
        e = e.clone()
        e[mask] = e[mask] + delta[has_img].reshape(-1, e.shape[-1])
        return e

    def forward(self, ids: torch.Tensor, aligned: torch.Tensor | None = None, past=None):
        return self.lm.run(self.embed(ids, aligned), past)


def trainable_fraction(model: nn.Module) -> float:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return trainable / total


def base_weight_digest(model: AdaptedLM) -> str:
    """Digest over base weights only, stable across adapter attachment."""
    import hashlib

    h = hashlib.sha256()
    items = []
    for name, param in model.lm.named_parameters():
        if "lora_A" in name or "lora_B" in name:
            continue
        items.append((name.replace(".base.", "."), param))
    for name, param in sorted(items):
        h.update(name.encode())
        h.update(param.detach().cpu().to(torch.float64).numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"  # "greedy" | "sampled"
    max_new_tokens: int = 128
    stop_sequences: tuple[str, ...] = ()
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sampled"):
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "max_new_tokens": self.max_new_tokens,
            "stop_sequences": list(self.stop_sequences),
            "temperature": self.temperature,
            "seed": self.seed,
        }


def _cut_at_stops(text: str, stops: Sequence[str]) -> tuple[str, bool]:
    cut = len(text)
    for stop in stops:
        pos = text.find(stop)
        if pos != -1:
            cut = min(cut, pos)
    return text[:cut], cut < len(text)


def generate(
    model: AdaptedLM,
    prompt: PromptBundle | str,
    aligned_tokens: np.ndarray | torch.Tensor | None = None,
    decode: DecodeConfig = DecodeConfig(),
) -> str:
    """Decode a continuation of ``prompt``; greedy mode is deterministic.

    If the prompt contains an image placeholder, ``aligned_tokens`` must be
    given and is injected at the placeholder positions.
    """
    tokenizer = model.tokenizer
    text = prompt.rendered if isinstance(prompt, PromptBundle) else prompt
    ids = tokenizer.encode(text)
    has_img = tokenizer.img_id in ids
    if has_img and aligned_tokens is None:
        raise ContractError("prompt contains an image placeholder but no aligned tokens given")
    capacity = model.lm.config.max_seq_len
    input_ids = [tokenizer.bos_id] + ids
    if len(input_ids) >= capacity:
        raise ContractError(
            f"prompt of {len(input_ids)} tokens exceeds the {capacity}-token context"
        )
    budget = min(decode.max_new_tokens, capacity - len(input_ids))
    if budget == 0:
        return ""

    aligned = None
    if has_img and aligned_tokens is not None:
        aligned = torch.as_tensor(np.asarray(aligned_tokens), dtype=torch.float32).unsqueeze(0)

    model.eval()
    rng = torch.Generator().manual_seed(decode.seed) if decode.mode == "sampled" else None
    out_ids: list[int] = []
    with torch.no_grad():
        ids_tensor = torch.tensor([input_ids], dtype=torch.long)
        logits, past = model(ids_tensor, aligned=aligned)
        for _ in range(budget):
            step_logits = logits[0, -1]
            if decode.mode == "greedy":
                next_id = int(step_logits.argmax())
            else:
                probs = F.softmax(step_logits / max(decode.temperature, 1e-6), dim=-1)
                next_id = int(torch.multinomial(probs, 1, generator=rng))
            if next_id == tokenizer.eos_id:
                break
            out_ids.append(next_id)
            text_so_far = tokenizer.decode(out_ids)
            cut, stopped = _cut_at_stops(text_so_far, decode.stop_sequences)
            if stopped:
                return cut.strip()
            if len(input_ids) + len(out_ids) >= capacity:
                break
            logits, past = model(
                torch.tensor([[next_id]], dtype=torch.long), aligned=None, past=past
            )
    return tokenizer.decode(out_ids).strip()


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class EncodedExample:
    """One training sequence: prompt ids, target ids, optional image tokens."""

    prompt_ids: list[int]
    target_ids: list[int]
    aligned: np.ndarray | None = None
    sample_id: str = ""


def _collate(
    batch: list[EncodedExample], tokenizer: WordTokenizer, d_model: int, mask_prompt: bool
):
    width = max(1 + len(e.prompt_ids) + len(e.target_ids) + 1 for e in batch)
    ids = torch.full((len(batch), width), tokenizer.pad_id, dtype=torch.long)
    labels = torch.full((len(batch), width), IGNORE_INDEX, dtype=torch.long)
    aligned = torch.zeros(len(batch), 32, d_model)
    any_img = False
    for i, ex in enumerate(batch):
        seq = [tokenizer.bos_id] + ex.prompt_ids + ex.target_ids + [tokenizer.eos_id]
        ids[i, : len(seq)] = torch.tensor(seq)
        start = len(ex.prompt_ids) if mask_prompt else 0
        for j in range(start, len(seq) - 1):
            labels[i, j] = seq[j + 1]
        if ex.aligned is not None:
            aligned[i, : ex.aligned.shape[0]] = torch.as_tensor(ex.aligned, dtype=torch.float32)
            any_img = True
    return ids[:, :-1], labels[:, : ids.shape[1] - 1], (aligned if any_img else None)


def _bucketed_batches(
    examples: Sequence[EncodedExample], batch_size: int, generator: torch.Generator
) -> list[list[int]]:
    """Shuffled batches, length-sorted within pools to limit padding."""
    order = torch.randperm(len(examples), generator=generator).tolist()
    pool_size = batch_size * 8
    batches: list[list[int]] = []
    for p in range(0, len(order), pool_size):
        pool = sorted(
            order[p : p + pool_size],
            key=lambda i: len(examples[i].prompt_ids) + len(examples[i].target_ids),
        )
        for b in range(0, len(pool), batch_size):
            batches.append(pool[b : b + batch_size])
    perm = torch.randperm(len(batches), generator=generator).tolist()
    return [batches[i] for i in perm]


def lm_loss(
    model: AdaptedLM, batch: list[EncodedExample], mask_prompt: bool
) -> torch.Tensor:
    ids, labels, aligned = _collate(batch, model.tokenizer, model.lm.config.d_model, mask_prompt)
    logits, _ = model(ids, aligned=aligned)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX
    )


@dataclass
class BaseTrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float | None = None  # None: constant LR; else cosine decay to lr_min
    warmup_steps: int = 0
    weight_decay: float = 0.01
    seed: int = 0
    model: LMConfig = field(default_factory=LMConfig)


def fold_case_embeddings(lm: ToyLM, tokenizer: WordTokenizer) -> int:
    """Initialize cased tokens from their lowercase twins.

    Prompt findings carry capitalized label names while report text is
    lowercase; sharing the initial embedding makes that association a
    starting point instead of something to discover."""
    folded = 0
    with torch.no_grad():
        for token, idx in tokenizer.token_to_id.items():
            lower = token.lower()
            if lower != token and lower in tokenizer.token_to_id:
                lm.token_embed.weight[idx] = lm.token_embed.weight[tokenizer.token_to_id[lower]]
                folded += 1
    return folded


def train_base_lm(
    examples: list[EncodedExample],
    tokenizer: WordTokenizer,
    config: BaseTrainConfig,
    out_dir: str | Path,
) -> Path:
    """Train the toy LM from scratch with full-sequence LM loss."""
    if not examples:
        raise ConfigError("base LM training requires a non-empty dataset")
    seed_everything(config.seed)
    lm = ToyLM(config.model, len(tokenizer))
    fold_case_embeddings(lm, tokenizer)
    model = AdaptedLM(lm, tokenizer, lora=None)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    log = TrainingLog(Path(out_dir) / "log.csv", ["step", "loss", "lr"])
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    step = 0
    for _ in range(config.epochs):
        for idx in _bucketed_batches(examples, config.batch_size, gen):
            batch = [examples[i] for i in idx]
            lr = config.lr
            if config.lr_min is not None or config.warmup_steps:
                from .trainutil import warmup_cosine_lr

                lr = warmup_cosine_lr(
                    step, total_steps, config.warmup_steps,
                    config.lr / 10, config.lr_min if config.lr_min is not None else config.lr,
                    config.lr,
                )
            for group in opt.param_groups:
                group["lr"] = lr
            loss = lm_loss(model, batch, mask_prompt=False)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite base LM loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.add(step=step, loss=f"{loss.item():.6f}", lr=f"{lr:.3e}")
            step += 1
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer.save(out_dir / "tokenizer.json")
    cfg = config.model.to_dict()
    cfg["vocab_size"] = len(tokenizer)
    save_checkpoint(out_dir, model.lm, cfg)
    log.write()
    return out_dir


def load_base_lm(ckpt_dir: str | Path) -> AdaptedLM:
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "weights.pt").exists():
        raise StateError(f"no LM weights at {ckpt_dir}")
    meta = json.loads((ckpt_dir / "config.json").read_text("utf-8"))
    tokenizer = WordTokenizer.load(ckpt_dir / "tokenizer.json")
    lm = ToyLM(LMConfig.from_dict(meta), meta["vocab_size"])
    state = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
    lm.load_state_dict(state)
    model = AdaptedLM(lm, tokenizer, lora=None)
    model.eval()
    return model


@dataclass
class AdapterTrainConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    patience: int = 1
    max_trainable_fraction: float = 0.02
    seed: int = 0
    lora: LoRAConfig = field(default_factory=LoRAConfig)


def _adapter_state(model: AdaptedLM) -> dict[str, torch.Tensor]:
    return {
        name: p.detach().clone()
        for name, p in model.named_parameters()
        if p.requires_grad
    }


def train_adapter(
    examples: list[EncodedExample],
    base_dir: str | Path,
    config: AdapterTrainConfig,
    out_dir: str | Path,
) -> Path:
    """LoRA fine-tuning on instruct examples: loss on target tokens only,
    early stopping on validation loss, base weights untouched."""
    if not examples:
        raise ConfigError("adapter training requires a non-empty dataset")
    model = load_base_lm(base_dir)
    seed_everything(config.seed)
    model = AdaptedLM(model.lm, model.tokenizer, lora=config.lora)
    digest_before = base_weight_digest(model)
    fraction = trainable_fraction(model)
    if fraction > config.max_trainable_fraction:
        raise ConfigError(
            f"trainable fraction {fraction:.4f} exceeds bound {config.max_trainable_fraction}"
        )

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(examples))
    n_val = int(round(config.val_fraction * len(examples)))
    val = [examples[i] for i in order[:n_val]]
    train = [examples[i] for i in order[n_val:]] or list(examples)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    log = TrainingLog(Path(out_dir) / "log.csv", ["epoch", "train_loss", "val_loss", "lr"])
    gen = torch.Generator().manual_seed(config.seed)

    best_val = float("inf")
    best_state = _adapter_state(model)
    bad_epochs = 0
    for epoch in range(config.epochs):
        model.train()
        epoch_loss = 0.0
        for idx in _bucketed_batches(train, config.batch_size, gen):
            batch = [train[i] for i in idx]
            loss = lm_loss(model, batch, mask_prompt=True)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite adapter loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(batch)
        epoch_loss /= len(train)

        model.eval()
        if val:
            with torch.no_grad():
                val_loss = float(
                    np.mean(
                        [
                            lm_loss(model, val[i : i + config.batch_size], True).item()
                            for i in range(0, len(val), config.batch_size)
                        ]
                    )
                )
        else:
            val_loss = epoch_loss
        log.add(
            epoch=epoch, train_loss=f"{epoch_loss:.6f}",
            val_loss=f"{val_loss:.6f}", lr=f"{config.lr:.3e}",
        )
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            best_state = _adapter_state(model)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break

    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in best_state:
                p.copy_(best_state[name])
    if base_weight_digest(model) != digest_before:
        raise StateError("adapter training mutated base weights")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(_adapter_state(model), out_dir / "adapters.pt")
    meta = {
        "lora": config.lora.to_dict(),
        "base_dir": str(base_dir),
        "base_digest": digest_before,
        "trainable_fraction": fraction,
        "epochs": config.epochs,
        "seed": config.seed,
    }
    (out_dir / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True), "utf-8")
    log.write()
    return out_dir


def load_adapted_lm(base_dir: str | Path, adapter_dir: str | Path | None = None) -> AdaptedLM:
    """Base LM, optionally with trained adapters attached."""
    model = load_base_lm(base_dir)
    if adapter_dir is None:
        return model
    adapter_dir = Path(adapter_dir)
    if not (adapter_dir / "adapters.pt").exists():
        raise StateError(f"no adapter weights at {adapter_dir}")
    meta = json.loads((adapter_dir / "config.json").read_text("utf-8"))
    model = AdaptedLM(model.lm, model.tokenizer, lora=LoRAConfig.from_dict(meta["lora"]))
    state = torch.load(adapter_dir / "adapters.pt", map_location="cpu", weights_only=True)
    missing = [k for k in state if k not in dict(model.named_parameters())]
    if missing:
        raise StateError(f"adapter state does not fit the base model: {missing[:3]}")
    with torch.no_grad():
        named = dict(model.named_parameters())
        for key, value in state.items():
            named[key].copy_(value)
    model.eval()
    return model


# --------------------------------------------------------------------------
# Uniform text-generation client
# --------------------------------------------------------------------------

class LMClient:
    """Uniform interface over toy, stub and remote backends."""

    model_id: str = "unknown"
    supports_image_tokens: bool = False

    def generate(
        self,
        prompt: str | PromptBundle,
        decode: DecodeConfig = DecodeConfig(),
        aligned_tokens: np.ndarray | None = None,
    ) -> str:
        raise NotImplementedError


class ClientUnavailable(Exception):
    """Backend not reachable or protocol failure."""


class ToyClient(LMClient):
    supports_image_tokens = True

    def __init__(self, model: AdaptedLM, model_id: str = "toy"):
        self.model = model
        self.model_id = model_id

    def generate(self, prompt, decode=DecodeConfig(), aligned_tokens=None):
        return generate(self.model, prompt, aligned_tokens=aligned_tokens, decode=decode)


class RemoteClient(LMClient):
    supports_image_tokens = False

    def __init__(self, url: str, timeout: float = 30.0, transport=None):
        import httpx

        self.url = url
        self.model_id = f"remote:{url}"
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def generate(self, prompt, decode=DecodeConfig(), aligned_tokens=None):
        import httpx

        text = prompt.rendered if isinstance(prompt, PromptBundle) else prompt
        if "<IMG>" in text and not self.supports_image_tokens:
            raise ContractError("remote backend does not support image-token prompts")
        try:
            resp = self._client.post(self.url, json={"prompt": text, "decode": decode.to_dict()})
            resp.raise_for_status()
            return resp.json()["text"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise ClientUnavailable(f"remote LM at {self.url} failed: {exc}") from exc


def lm_client(model_ref: str, **kwargs) -> LMClient:
    """Resolve a model reference: ``toy:<base_dir>[:<adapter_dir>]``,
    ``stub:<name>``, or ``http(s)://...``."""
    if model_ref.startswith("toy:"):
        parts = model_ref.split(":")[1:]
        base = parts[0]
        adapter = parts[1] if len(parts) > 1 and parts[1] else None
        return ToyClient(load_adapted_lm(base, adapter), model_id=model_ref)
    if model_ref.startswith("stub:"):
        from . import stubs

        return stubs.make_stub(model_ref.split(":", 1)[1], **kwargs)
    if model_ref.startswith("http://") or model_ref.startswith("https://"):
        return RemoteClient(model_ref, **kwargs)
    raise ConfigError(f"unresolvable model reference {model_ref!r}")
