"""Image encoder and the query-token alignment module.

The encoder is a small convolutional stack producing a patch-feature grid;
the alignment module holds a fixed set of learned query vectors that
cross-attend to the patch grid inside a bidirectional text-style encoder and
come out as language-space tokens of the LM embedding width. Alignment
training jointly optimizes three objectives on image-text pairs:

* contrastive matching over the in-batch image-text similarity matrix,
* text generation conditioned on the query outputs (token-level LM loss),
* binary matched/mismatched classification with hardest in-batch negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ChestStudy
from .errors import ConfigError, ContractError, DivergenceError, StateError
from .tokenizer import WordTokenizer
from .trainutil import TrainingLog, save_checkpoint, seed_everything, warmup_cosine_lr

QUERY_COUNT = 32


@dataclass
class VisionConfig:
    image_size: int = 224
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    hidden: int = 128
    layers: int = 2
    heads: int = 4
    query_count: int = QUERY_COUNT
    lm_width: int = 192
    contrast_dim: int = 64
    max_text_len: int = 96
    freeze_encoder: bool = False
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return self.encoder_channels[-1]

    @property
    def patch_count(self) -> int:
        side = self.image_size // (2 ** len(self.encoder_channels))
        if side < 1:
            raise ConfigError("image_size too small for the encoder depth")
        return side * side

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "encoder_channels": list(self.encoder_channels),
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "query_count": self.query_count,
            "lm_width": self.lm_width,
            "contrast_dim": self.contrast_dim,
            "max_text_len": self.max_text_len,
            "freeze_encoder": self.freeze_encoder,
            "loss_weights": list(self.loss_weights),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VisionConfig":
        d = dict(d)
        d.pop("config_hash", None)
        d.pop("vocab_size", None)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


@dataclass(frozen=True)
class PatchFeatures:
    grid: torch.Tensor  # P x D
    source_id: str = ""


@dataclass(frozen=True)
class AlignedTokens:
    tokens: torch.Tensor  # query_count x lm_width


@dataclass(frozen=True)
class AlignmentLosses:
    itc: torch.Tensor
    itg: torch.Tensor
    itm: torch.Tensor
    total: torch.Tensor
    itm_skipped: bool = False


class ConvEncoder(nn.Module):
    """Stride-2 conv stack; a SxS image becomes (S/2^depth)^2 patch features."""

    def __init__(self, config: VisionConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        prev = 1
        for ch in config.encoder_channels:
            layers += [
                nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(min(4, ch), ch),
                nn.ReLU(),
            ]
            prev = ch
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, S, S) -> (B, P, D)."""
        if images.dim() != 3 or images.shape[-1] != self.config.image_size:
            raise ContractError(
                f"expected (B, {self.config.image_size}, {self.config.image_size}) images, "
                f"got {tuple(images.shape)}"
            )
        feats = self.net(images.unsqueeze(1))
        return feats.flatten(2).transpose(1, 2)


class AlignerBlock(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.ln_self = nn.LayerNorm(hidden)
        self.self_attn = nn.MultiheadAttention(hidden, heads, batch_first=True)
        self.ln_cross = nn.LayerNorm(hidden)
        self.cross_attn = nn.MultiheadAttention(hidden, heads, batch_first=True)
        self.ln_ffn = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(
            nn.Linear(hidden, 4 * hidden), nn.GELU(), nn.Linear(4 * hidden, hidden)
        )

    def forward(
        self,
        x: torch.Tensor,
        patches: torch.Tensor | None,
        n_query: int,
        attn_mask: torch.Tensor | None,
        key_padding_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        h = self.ln_self(x)
        attn_out, _ = self.self_attn(
            h, h, h, attn_mask=attn_mask, key_padding_mask=key_padding_mask,
            need_weights=False,
        )
        x = x + attn_out
        if patches is not None and n_query > 0:
            q = self.ln_cross(x[:, :n_query])
            cross_out, _ = self.cross_attn(q, patches, patches, need_weights=False)
            x = torch.cat([x[:, :n_query] + cross_out, x[:, n_query:]], dim=1)
        return x + self.ffn(self.ln_ffn(x))


def _itg_mask(n_query: int, n_text: int, device, dtype) -> torch.Tensor:
    """Queries attend among themselves; text attends to queries + causal text."""
    total = n_query + n_text
    mask = torch.ones(total, total, dtype=torch.bool, device=device)
    mask[:n_query, :n_query] = False
    mask[n_query:, :n_query] = False
    causal = torch.triu(torch.ones(n_text, n_text, dtype=torch.bool, device=device), diagonal=1)
    mask[n_query:, n_query:] = causal
    return mask


class QueryAligner(nn.Module):
    """Learned query tokens bridging patch features into language space."""

    def __init__(self, config: VisionConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        h = config.hidden
        self.query_tokens = nn.Parameter(torch.randn(config.query_count, h) * 0.02)
        self.patch_proj = nn.Linear(config.feature_dim, h)
        self.token_embed = nn.Embedding(vocab_size, h)
        self.pos_embed = nn.Parameter(torch.randn(config.max_text_len, h) * 0.02)
        self.blocks = nn.ModuleList(AlignerBlock(h, config.heads) for _ in range(config.layers))
        self.ln_out = nn.LayerNorm(h)
        self.vision_proj = nn.Linear(h, config.contrast_dim)
        self.text_proj = nn.Linear(h, config.contrast_dim)
        self.itm_head = nn.Linear(h, 2)
        self.lm_head = nn.Linear(h, vocab_size)
        self.lm_out = nn.Linear(h, config.lm_width)
        self.temperature = nn.Parameter(torch.tensor(0.07))

    def _embed_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        T = token_ids.shape[1]
        if T > self.config.max_text_len:
            raise ContractError(f"text length {T} exceeds max_text_len {self.config.max_text_len}")
        return self.token_embed(token_ids) + self.pos_embed[:T]

    def _run(self, x, patches, n_query, attn_mask, key_padding_mask):
        for block in self.blocks:
            x = block(x, patches, n_query, attn_mask, key_padding_mask)
        return self.ln_out(x)

    def image_forward(self, patch_grid: torch.Tensor) -> torch.Tensor:
        """(B, P, D) -> query outputs (B, Q, hidden)."""
        patches = self.patch_proj(patch_grid)
        queries = self.query_tokens.unsqueeze(0).expand(patch_grid.shape[0], -1, -1)
        return self._run(queries, patches, self.config.query_count, None, None)

    def aligned_tokens(self, patch_grid: torch.Tensor) -> torch.Tensor:
        """(B, P, D) -> (B, Q, lm_width) language-space tokens."""
        return self.lm_out(self.image_forward(patch_grid))

    def text_forward(self, token_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """(B, T) -> pooled first-token feature (B, hidden)."""
        x = self._run(self._embed_text(token_ids), None, 0, None, pad_mask)
        return x[:, 0]

    def itg_logits(
        self, patch_grid: torch.Tensor, token_ids: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """Next-token logits over text positions, conditioned on queries."""
        B, T = token_ids.shape
        patches = self.patch_proj(patch_grid)
        queries = self.query_tokens.unsqueeze(0).expand(B, -1, -1)
        x = torch.cat([queries, self._embed_text(token_ids)], dim=1)
        full_pad = torch.cat(
            [torch.zeros(B, self.config.query_count, dtype=torch.bool, device=pad_mask.device), pad_mask],
            dim=1,
        )
        mask = _itg_mask(self.config.query_count, T, token_ids.device, x.dtype)
        x = self._run(x, patches, self.config.query_count, mask, full_pad)
        return self.lm_head(x[:, self.config.query_count :])

    def itm_logits(
        self, patch_grid: torch.Tensor, token_ids: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """2-class matched/mismatched logits for image-text pairs."""
        B, T = token_ids.shape
        patches = self.patch_proj(patch_grid)
        queries = self.query_tokens.unsqueeze(0).expand(B, -1, -1)
        x = torch.cat([queries, self._embed_text(token_ids)], dim=1)
        full_pad = torch.cat(
            [torch.zeros(B, self.config.query_count, dtype=torch.bool, device=pad_mask.device), pad_mask],
            dim=1,
        )
        x = self._run(x, patches, self.config.query_count, None, full_pad)
        return self.itm_head(x[:, : self.config.query_count].mean(dim=1))


def _batch_tokens(
    tokenizer: WordTokenizer, texts: list[str], max_len: int, device
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (input_ids, target_ids, pad_mask); inputs are BOS-prefixed."""
    seqs = [tokenizer.encode(t)[: max_len - 1] for t in texts]
    width = max(len(s) for s in seqs) + 1
    inputs = torch.full((len(seqs), width), tokenizer.pad_id, dtype=torch.long, device=device)
    targets = torch.full((len(seqs), width), tokenizer.pad_id, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        inputs[i, 0] = tokenizer.bos_id
        inputs[i, 1 : len(s) + 1] = torch.tensor(s, device=device)
        targets[i, : len(s)] = torch.tensor(s, device=device)
        targets[i, len(s)] = tokenizer.eos_id
    return inputs, targets, inputs.eq(tokenizer.pad_id)


class VisionStack:
    """Encoder + aligner + tokenizer with loss computation and training."""

    def __init__(self, config: VisionConfig, tokenizer: WordTokenizer):
        self.config = config
        self.tokenizer = tokenizer
        seed_everything(config.seed)
        self.encoder = ConvEncoder(config)
        self.aligner = QueryAligner(config, vocab_size=len(tokenizer))
        self._trained = False

    # -- inference -----------------------------------------------------

    def module(self) -> nn.Module:
        holder = nn.Module()
        holder.encoder = self.encoder
        holder.aligner = self.aligner
        return holder

    def eval_mode(self) -> "VisionStack":
        self.encoder.eval()
        self.aligner.eval()
        return self

    def encode_image(self, image: np.ndarray | torch.Tensor, source_id: str = "") -> PatchFeatures:
        tensor = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        if tensor.dim() != 2:
            raise ContractError(f"expected a 2-D grayscale image, got shape {tuple(tensor.shape)}")
        self.encoder.eval()
        with torch.no_grad():
            grid = self.encoder(tensor.unsqueeze(0))[0]
        if not torch.isfinite(grid).all():
            raise StateError("encoder produced non-finite features")
        return PatchFeatures(grid=grid, source_id=source_id)

    def align(self, patch_features: PatchFeatures, query_count: int = QUERY_COUNT) -> AlignedTokens:
        if query_count != self.config.query_count:
            raise ContractError(
                f"aligner was built with {self.config.query_count} queries, not {query_count}"
            )
        grid = patch_features.grid
        if grid.dim() != 2 or grid.shape[1] != self.config.feature_dim:
            raise ContractError(f"expected (P, {self.config.feature_dim}) grid, got {tuple(grid.shape)}")
        self.aligner.eval()
        with torch.no_grad():
            tokens = self.aligner.aligned_tokens(grid.unsqueeze(0))[0]
        return AlignedTokens(tokens=tokens)

    def aligned_for_study(self, study: ChestStudy) -> AlignedTokens:
        return self.align(self.encode_image(study.image, study.id), self.config.query_count)

    # -- losses ----------------------------------------------------------

    def alignment_losses(
        self, images: torch.Tensor, texts: list[str]
    ) -> AlignmentLosses:
        """Three-objective loss over a paired batch (images[i] <-> texts[i])."""
        if images.shape[0] != len(texts) or len(texts) < 1:
            raise ContractError("images and texts must pair up, with batch size >= 1")
        B = images.shape[0]
        grid = self.encoder(images)
        inputs, targets, pad = _batch_tokens(
            self.tokenizer, texts, self.config.max_text_len, images.device
        )

        query_out = self.aligner.image_forward(grid)
        img_feat = F.normalize(self.aligner.vision_proj(query_out), dim=-1)
        txt_feat = F.normalize(
            self.aligner.text_proj(self.aligner.text_forward(inputs, pad)), dim=-1
        )
        sim = torch.einsum("iqc,jc->ijq", img_feat, txt_feat).max(dim=-1).values
        sim = sim / self.aligner.temperature
        labels = torch.arange(B, device=images.device)
        itc = 0.5 * (F.cross_entropy(sim, labels) + F.cross_entropy(sim.t(), labels))

        logits = self.aligner.itg_logits(grid, inputs, pad)
        itg = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]),
            targets.reshape(-1),
            ignore_index=self.tokenizer.pad_id,
        )

        itm_skipped = B < 2
        if itm_skipped:
            itm = torch.zeros((), dtype=itg.dtype, device=images.device)
        else:
            with torch.no_grad():
                masked = sim - torch.eye(B, device=sim.device) * 1e4
                hard_txt = masked.argmax(dim=1)  # hardest text for each image
                hard_img = masked.argmax(dim=0)  # hardest image for each text
            grid_all = torch.cat([grid, grid, grid[hard_img]], dim=0)
            ids_all = torch.cat([inputs, inputs[hard_txt], inputs], dim=0)
            pad_all = torch.cat([pad, pad[hard_txt], pad], dim=0)
            itm_logits = self.aligner.itm_logits(grid_all, ids_all, pad_all)
            itm_labels = torch.cat(
                [torch.ones(B, dtype=torch.long), torch.zeros(2 * B, dtype=torch.long)]
            ).to(images.device)
            itm = F.cross_entropy(itm_logits, itm_labels)

        w = self.config.loss_weights
        total = w[0] * itc + w[1] * itg + w[2] * itm
        return AlignmentLosses(itc=itc, itg=itg, itm=itm, total=total, itm_skipped=itm_skipped)

    # -- persistence -----------------------------------------------------

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.tokenizer.save(out_dir / "tokenizer.json")
        cfg = self.config.to_dict()
        cfg["vocab_size"] = len(self.tokenizer)
        save_checkpoint(out_dir, self.module(), cfg)
        return out_dir

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> "VisionStack":
        ckpt_dir = Path(ckpt_dir)
        if not (ckpt_dir / "weights.pt").exists():
            raise StateError(f"no alignment weights at {ckpt_dir}")
        import json

        meta = json.loads((ckpt_dir / "config.json").read_text("utf-8"))
        tokenizer = WordTokenizer.load(ckpt_dir / "tokenizer.json")
        stack = cls(VisionConfig.from_dict(meta), tokenizer)
        state = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
        holder = stack.module()
        holder.load_state_dict(state)
        stack.eval_mode()
        return stack


@dataclass
class AlignTrainConfig:
    epochs: int = 4
    batch_size: int = 16
    lr_min: float = 1e-5
    lr_max: float = 1e-4
    warmup_steps: int = 1000
    warmup_start: float = 1e-6
    weight_decay: float = 0.01
    seed: int = 0
    vision: VisionConfig = field(default_factory=VisionConfig)


def train_alignment(
    corpus: list[ChestStudy],
    config: AlignTrainConfig,
    out_dir: str | Path,
    tokenizer: WordTokenizer | None = None,
) -> Path:
    """Train encoder + aligner on image-report pairs; write a checkpoint."""
    if not corpus:
        raise ConfigError("alignment training requires a non-empty corpus")
    tokenizer = tokenizer or WordTokenizer.build(s.findings_text for s in corpus)
    stack = VisionStack(config.vision, tokenizer)
    if config.vision.freeze_encoder:
        for p in stack.encoder.parameters():
            p.requires_grad_(False)

    images = torch.from_numpy(np.stack([s.image for s in corpus])).float()
    texts = [s.findings_text for s in corpus]

    params = [p for p in stack.module().parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr_max, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(corpus) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    log = TrainingLog(Path(out_dir) / "log.csv", ["step", "itc", "itg", "itm", "lr"])

    gen = torch.Generator().manual_seed(config.seed)
    step = 0
    for _ in range(config.epochs):
        order = torch.randperm(len(corpus), generator=gen)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            lr = warmup_cosine_lr(
                step, total_steps, config.warmup_steps,
                config.warmup_start, config.lr_min, config.lr_max,
            )
            for group in opt.param_groups:
                group["lr"] = lr
            losses = stack.alignment_losses(images[idx], [texts[i] for i in idx])
            if not torch.isfinite(losses.total):
                raise DivergenceError(
                    f"non-finite alignment loss at step {step}: "
                    f"itc={losses.itc.item()} itg={losses.itg.item()} itm={losses.itm.item()}"
                )
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            log.add(
                step=step,
                itc=f"{losses.itc.item():.6f}",
                itg=f"{losses.itg.item():.6f}",
                itm=f"{losses.itm.item():.6f}",
                lr=f"{lr:.3e}",
            )
            step += 1

    stack.eval_mode()
    out = stack.save(out_dir)
    log.write()
    return out
