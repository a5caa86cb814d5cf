"""End-to-end inference pipeline and training-example assembly.

Inference runs encode -> align -> classify -> prompt -> generate. The same
prompt assembly is used to encode instruct samples into LM training
sequences, so training and inference see byte-identical prompt shapes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapt import AdaptedLM, DecodeConfig, EncodedExample, load_adapted_lm
from .classifier import ClassifierStack
from .corpus import ChestStudy
from .errors import ConfigError
from .instruct import InstructSample
from .prompts import PromptBuilder, PromptBundle, Turn, USER_MARK
from .tokenizer import WordTokenizer
from .vision import VisionStack
from .vocab import NO_FINDING

log = logging.getLogger(__name__)

DIALOG_STOPS = ("\n" + USER_MARK, "\nASSISTANT:")


@dataclass(frozen=True)
class ImageStudy:
    """Minimal image-only study (e.g. an uploaded image without gold data)."""

    id: str
    image: np.ndarray
    indication_text: str | None = None


@dataclass
class ImageContext:
    aligned: np.ndarray  # (32, lm_width)
    findings: list[str]


class InferencePipeline:
    """Loaded model stack exposing report generation and dialog turns."""

    def __init__(
        self,
        vision: VisionStack,
        classifier: ClassifierStack,
        model: AdaptedLM,
        builder: PromptBuilder | None = None,
        decode: DecodeConfig | None = None,
        token_budget: int | None = None,
    ):
        self.vision = vision
        self.classifier = classifier
        self.model = model
        self.builder = builder or PromptBuilder(classifier.vocab)
        self.decode = decode or DecodeConfig(max_new_tokens=120, stop_sequences=DIALOG_STOPS)
        lm_budget = model.lm.config.max_seq_len - self.decode.max_new_tokens - 8
        self.token_budget = token_budget if token_budget is not None else max(64, lm_budget)
        if vision.config.lm_width != model.lm.config.d_model:
            raise ConfigError(
                f"aligned token width {vision.config.lm_width} does not match "
                f"LM width {model.lm.config.d_model}"
            )
        self._cache: dict[str, ImageContext] = {}

    # -- image-derived context ---------------------------------------------

    def image_context(self, study: ChestStudy) -> ImageContext:
        cached = self._cache.get(study.id)
        if cached is not None:
            return cached
        aligned = self.vision.aligned_for_study(study).tokens.numpy()
        probs = self.classifier.classify(study.image)
        findings = self.classifier.structured_findings(probs)
        ctx = ImageContext(aligned=aligned, findings=findings)
        if study.id:
            self._cache[study.id] = ctx
        return ctx

    def report_bundle(
        self, study: ChestStudy, use_indication: bool = False
    ) -> tuple[PromptBundle, np.ndarray]:
        ctx = self.image_context(study)
        indication = study.indication_text if use_indication else None
        findings = ctx.findings or [NO_FINDING]
        bundle = self.builder.build_report_prompt(True, findings, indication)
        return bundle, ctx.aligned

    # -- DialogModel interface ----------------------------------------------

    def generate_report(self, study: ChestStudy, use_indication: bool = False) -> str:
        from .adapt import generate

        bundle, aligned = self.report_bundle(study, use_indication)
        dialog = self.builder.render_dialog([], bundle, token_budget=self.token_budget)
        return generate(self.model, dialog, aligned_tokens=aligned, decode=self.decode)

    def continue_dialog(
        self,
        study: ChestStudy,
        turns_after_first: list[Turn],
        instruction: str,
        use_indication: bool = False,
    ) -> str:
        text, _ = self.dialog_turn(study, turns_after_first, instruction, use_indication)
        return text

    def dialog_turn(
        self,
        study: ChestStudy,
        turns_after_first: list[Turn],
        instruction: str,
        use_indication: bool = False,
    ) -> tuple[str, bool]:
        """Reply plus a flag for history truncation."""
        from .adapt import generate

        bundle, aligned = self.report_bundle(study, use_indication)
        history = [Turn("user", bundle)] + list(turns_after_first)
        dialog = self.builder.render_dialog(history, instruction, token_budget=self.token_budget)
        reply = generate(self.model, dialog, aligned_tokens=aligned, decode=self.decode)
        return reply, dialog.truncated

    @classmethod
    def load(
        cls,
        vision_dir: str | Path,
        classifier_dir: str | Path,
        base_lm_dir: str | Path,
        adapter_dir: str | Path | None = None,
        decode: DecodeConfig | None = None,
    ) -> "InferencePipeline":
        vision = VisionStack.load(vision_dir)
        clf = ClassifierStack.load(classifier_dir)
        model = load_adapted_lm(base_lm_dir, adapter_dir)
        return cls(vision, clf, model, builder=PromptBuilder(clf.vocab), decode=decode)


# --------------------------------------------------------------------------
# Training-example assembly
# --------------------------------------------------------------------------

def build_pipeline_tokenizer(
    corpus: list[ChestStudy],
    samples: list[InstructSample],
    builder: PromptBuilder | None = None,
) -> WordTokenizer:
    """Vocabulary over every text the LM will see or produce."""
    builder = builder or PromptBuilder()
    texts: list[str] = ["USER: ASSISTANT:", "yes no"]
    texts.append("Image information: . Predicted Findings: , . Indication: .")
    texts.extend(builder.vocab.names)
    for templates in builder.registry.tasks.values():
        texts.extend(t.text for t in templates)
    for study in corpus:
        texts.append(study.findings_text)
        if study.indication_text:
            texts.append(study.indication_text)
    for sample in samples:
        texts.extend([sample.context, sample.instruction, sample.target])
    return WordTokenizer.build(texts)


def sample_prompt_text(
    sample: InstructSample,
    study: ChestStudy,
    builder: PromptBuilder,
    findings: list[str],
    with_image: bool,
) -> str:
    """Dialog-rendered training prompt for one instruct sample."""
    indication = sample.context if sample.task == "report" and sample.context else None
    bundle = builder.build_report_prompt(
        True if with_image else None, findings or [NO_FINDING], indication
    )
    if sample.task == "report":
        return builder.render_dialog([], bundle).rendered
    history = [Turn("user", bundle), Turn("assistant", sample.context)]
    return builder.render_dialog(history, sample.instruction).rendered


def prepare_examples(
    samples: list[InstructSample],
    corpus: list[ChestStudy],
    tokenizer: WordTokenizer,
    builder: PromptBuilder | None = None,
    vision: VisionStack | None = None,
    classifier: ClassifierStack | None = None,
    max_seq_len: int | None = None,
) -> list[EncodedExample]:
    """Encode instruct samples into LM training sequences.

    Prompt findings come from the classifier when one is given, otherwise
    from gold labels. Aligned image tokens are attached when a vision stack
    is given (adapter stage); without one the ``<img>`` slots stay plain
    embeddings (base LM stage).
    """
    builder = builder or PromptBuilder()
    by_id = {s.id: s for s in corpus}
    aligned_cache: dict[str, np.ndarray] = {}
    findings_cache: dict[str, list[str]] = {}
    out: list[EncodedExample] = []
    skipped = 0
    for sample in samples:
        study = by_id.get(sample.study_id)
        if study is None:
            raise ConfigError(f"sample {sample.id} references unknown study {sample.study_id!r}")
        if study.id not in findings_cache:
            if classifier is not None:
                probs = classifier.classify(study.image)
                findings_cache[study.id] = classifier.structured_findings(probs)
            else:
                findings_cache[study.id] = builder.vocab.sort_names(
                    study.gold_labels.present()
                )
        aligned = None
        if vision is not None:
            if study.id not in aligned_cache:
                aligned_cache[study.id] = vision.aligned_for_study(study).tokens.numpy()
            aligned = aligned_cache[study.id]
        prompt = sample_prompt_text(
            sample, study, builder, findings_cache[study.id], with_image=True
        )
        prompt_ids = tokenizer.encode(prompt)
        target_ids = tokenizer.encode(sample.target)
        if max_seq_len is not None and len(prompt_ids) + len(target_ids) + 2 > max_seq_len:
            skipped += 1
            continue
        out.append(
            EncodedExample(
                prompt_ids=prompt_ids,
                target_ids=target_ids,
                aligned=aligned,
                sample_id=sample.id,
            )
        )
    if skipped:
        log.warning("dropped %d examples over the %d-token context", skipped, max_seq_len)
    return out
