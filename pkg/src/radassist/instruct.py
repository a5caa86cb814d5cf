"""Eight-task instruct dataset construction.

Corpus-grounded tasks (report, findings QA, NLE) take their targets from
gold labels and report text; correction mines label errors from reports the
base (non-fine-tuned) LM predicts; region QA, easy language and
summarization get pseudo ground truth generated by that base LM from the
report text alone. Builds are deterministic given (seed, base LM).
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path

from .adapt import ClientUnavailable, LMClient
from .corpus import ChestStudy
from .errors import ConfigError
from .labeler import RuleLabeler, diff_labels
from .prompts import TASKS, PromptBuilder
from .vocab import NO_FINDING, Status

log = logging.getLogger(__name__)

PSEUDO_TASKS = ("region_qa", "easy_language", "summarization")


@dataclass(frozen=True)
class InstructSample:
    id: str
    task: str
    study_id: str
    context: str
    instruction: str
    target: str
    provenance: str  # "corpus" | "pseudo"
    generator: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not self.target:
            raise ValueError(f"sample {self.id!r} has an empty target")
        if self.provenance == "pseudo" and not self.generator:
            raise ValueError(f"pseudo sample {self.id!r} must record its generator")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "study_id": self.study_id,
            "context": self.context,
            "instruction": self.instruction,
            "target": self.target,
            "provenance": self.provenance,
            "generator": self.generator,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InstructSample":
        return cls(
            id=d["id"], task=d["task"], study_id=d["study_id"], context=d["context"],
            instruction=d["instruction"], target=d["target"],
            provenance=d["provenance"], generator=d.get("generator"),
        )


class SkipSample(Exception):
    """Study cannot yield a sample for this task; carries the reason."""


def pseudo_prompt(context: str, instruction: str) -> str:
    """Prompt layout the base LM sees for pseudo-GT generation."""
    return f"{context}\n\n{instruction}"


def make_report_sample(
    study: ChestStudy, builder: PromptBuilder, sample_id: str, use_indication: bool = False
) -> InstructSample:
    context = ""
    if use_indication and study.indication_text:
        context = study.indication_text
    return InstructSample(
        id=sample_id, task="report", study_id=study.id, context=context,
        instruction=builder.registry.report_instruction,
        target=study.findings_text, provenance="corpus",
    )


def make_findings_qa(
    study: ChestStudy, mode: str, builder: PromptBuilder, rng: random.Random, sample_id: str
) -> InstructSample:
    vocab = builder.vocab
    positives = [n for n in vocab.pathology_names if study.gold_labels[n] is Status.POSITIVE]
    if mode == "binary":
        non_pos = [n for n in vocab.pathology_names if n not in positives]
        if positives and non_pos:
            pool = positives if rng.random() < 0.5 else non_pos
        else:
            pool = positives or non_pos
        name = rng.choice(pool)
        instruction = builder.sample_instruction("binary_qa", {"PATHOLOGY": name}, rng)
        target = "yes" if name in positives else "no"
        task = "binary_qa"
    elif mode == "complete":
        instruction = builder.sample_instruction("complete_qa", {}, rng)
        names = vocab.sort_names(study.gold_labels.present())
        target = ", ".join(names) if names else NO_FINDING
        task = "complete_qa"
    else:
        raise ConfigError(f"unknown findings-QA mode {mode!r}")
    return InstructSample(
        id=sample_id, task=task, study_id=study.id, context=study.findings_text,
        instruction=instruction, target=target, provenance="corpus",
    )


def make_correction_sample(
    study: ChestStudy,
    predicted_report: str,
    labeler: RuleLabeler,
    builder: PromptBuilder,
    base_lm: LMClient,
    rng: random.Random,
    sample_id: str,
) -> InstructSample | None:
    """Correction sample from a base-LM report; ``None`` when the predicted
    labels already match gold."""
    hypothesis = labeler.extract(predicted_report)
    diff = diff_labels(hypothesis, study.gold_labels)
    if diff.empty:
        return None
    instruction = builder.sample_correction_instruction(diff.to_add, diff.to_remove, rng)
    target = base_lm.generate(pseudo_prompt(predicted_report, instruction))
    return InstructSample(
        id=sample_id, task="correction", study_id=study.id, context=predicted_report,
        instruction=instruction, target=target, provenance="pseudo",
        generator=base_lm.model_id,
    )


def make_pseudo_sample(
    study: ChestStudy,
    task: str,
    base_lm: LMClient,
    builder: PromptBuilder,
    rng: random.Random,
    sample_id: str,
    retries: int = 2,
) -> InstructSample:
    if task not in PSEUDO_TASKS:
        raise ConfigError(f"task {task!r} has corpus ground truth, not pseudo")
    instruction = builder.sample_instruction(task, {}, rng)
    last_error: Exception | None = None
    for _ in range(retries + 1):
        try:
            target = base_lm.generate(pseudo_prompt(study.findings_text, instruction))
            break
        except ClientUnavailable as exc:
            last_error = exc
    else:
        raise SkipSample(f"base LM unavailable after {retries + 1} attempts: {last_error}")
    return InstructSample(
        id=sample_id, task=task, study_id=study.id, context=study.findings_text,
        instruction=instruction, target=target, provenance="pseudo",
        generator=base_lm.model_id,
    )


def make_nle_sample(
    study: ChestStudy,
    pathology: str,
    builder: PromptBuilder,
    labeler: RuleLabeler,
    rng: random.Random,
    sample_id: str,
) -> InstructSample:
    """Sentence-level grounding: the target is the report sentence(s) whose
    extracted labels assert the pathology."""
    if study.gold_labels[pathology] is not Status.POSITIVE:
        raise SkipSample(f"{pathology} is not positive in gold labels")
    from .labeler import _SENTENCE_SPLIT  # same sentence convention as matching

    sentences = [s for s in _SENTENCE_SPLIT.split(study.findings_text) if s.strip()]
    grounded = [s for s in sentences if labeler.extract(s)[pathology] is Status.POSITIVE]
    if not grounded:
        raise SkipSample(f"{pathology} not grounded in any sentence")
    instruction = builder.sample_instruction("nle", {"PATHOLOGY": pathology}, rng)
    return InstructSample(
        id=sample_id, task="nle", study_id=study.id, context=study.findings_text,
        instruction=instruction, target=" ".join(grounded), provenance="corpus",
    )


# --------------------------------------------------------------------------
# Dataset assembly
# --------------------------------------------------------------------------

def task_counts(mixture: dict[str, float], total: int) -> dict[str, int]:
    """Floor-then-distribute proportional counts in registry task order."""
    bad = [t for t in mixture if t not in TASKS]
    if bad:
        raise ConfigError(f"unknown tasks in mixture: {bad}")
    if any(w < 0 for w in mixture.values()):
        raise ConfigError("mixture weights must be >= 0")
    weight_sum = sum(mixture.values())
    if weight_sum <= 0:
        raise ConfigError("at least one task must have positive weight")
    counts = {t: int(total * mixture.get(t, 0.0) / weight_sum) for t in TASKS}
    remainder = total - sum(counts.values())
    for t in TASKS:
        if remainder == 0:
            break
        if mixture.get(t, 0.0) > 0:
            counts[t] += 1
            remainder -= 1
    return {t: c for t, c in counts.items() if c > 0}


def build_instruct_dataset(
    corpus: list[ChestStudy],
    mixture: dict[str, float],
    base_lm: LMClient,
    seed: int,
    total: int | None = None,
    builder: PromptBuilder | None = None,
    labeler: RuleLabeler | None = None,
    use_indication: bool = False,
) -> tuple[list[InstructSample], dict]:
    """Build the mixed-task dataset; returns (samples, manifest).

    The manifest records per-task counts and skip reasons. Deterministic
    given (seed, base LM): per-task RNG streams are keyed by task name.
    """
    if not corpus:
        raise ConfigError("instruct dataset needs a non-empty corpus")
    builder = builder or PromptBuilder()
    labeler = labeler or RuleLabeler(builder.vocab)
    total = total if total is not None else len(corpus) * len(TASKS)
    counts = task_counts(mixture, total)

    samples: list[InstructSample] = []
    skips: dict[str, dict[str, int]] = {}
    for task in TASKS:
        want = counts.get(task, 0)
        if want == 0:
            continue
        rng = random.Random(f"{seed}:{task}")
        order = list(range(len(corpus)))
        rng.shuffle(order)
        made = 0
        attempts = 0
        max_attempts = max(want * 4, len(corpus))
        cursor = 0
        while made < want and attempts < max_attempts:
            study = corpus[order[cursor % len(order)]]
            cursor += 1
            attempts += 1
            sample_id = f"{task}-{made:05d}"
            try:
                if task == "report":
                    sample = make_report_sample(study, builder, sample_id, use_indication)
                elif task in ("binary_qa", "complete_qa"):
                    sample = make_findings_qa(
                        study, "binary" if task == "binary_qa" else "complete",
                        builder, rng, sample_id,
                    )
                elif task == "correction":
                    findings = builder.vocab.sort_names(study.gold_labels.present())
                    prompt = builder.build_report_prompt(None, findings or [NO_FINDING], None)
                    predicted = base_lm.generate(prompt.rendered)
                    maybe = make_correction_sample(
                        study, predicted, labeler, builder, base_lm, rng, sample_id
                    )
                    if maybe is None:
                        raise SkipSample("predicted labels already match gold")
                    sample = maybe
                elif task in PSEUDO_TASKS:
                    sample = make_pseudo_sample(study, task, base_lm, builder, rng, sample_id)
                elif task == "nle":
                    positives = [
                        n for n in builder.vocab.pathology_names
                        if study.gold_labels[n] is Status.POSITIVE
                    ]
                    if not positives:
                        raise SkipSample("no positive pathology to explain")
                    sample = make_nle_sample(
                        study, rng.choice(positives), builder, labeler, rng, sample_id
                    )
                else:  # pragma: no cover
                    raise ConfigError(f"unhandled task {task!r}")
            except SkipSample as skip:
                reason = str(skip)
                skips.setdefault(task, {})
                skips[task][reason] = skips[task].get(reason, 0) + 1
                continue
            samples.append(sample)
            made += 1
        if made < want:
            log.warning("task %s: built %d of %d requested samples", task, made, want)

    manifest = {
        "requested": total,
        "counts": {t: sum(1 for s in samples if s.task == t) for t in TASKS},
        "skips": skips,
        "seed": seed,
        "generator": base_lm.model_id,
        "mixture": {t: mixture.get(t, 0.0) for t in TASKS},
    }
    return samples, manifest


def save_instruct(samples: list[InstructSample], manifest: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) for s in samples]
    (out_dir / "instruct.jsonl").write_text("\n".join(lines) + "\n", "utf-8")
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False), "utf-8"
    )
    return out_dir / "instruct.jsonl"


def load_instruct(path: str | Path) -> list[InstructSample]:
    path = Path(path)
    if path.is_dir():
        path = path / "instruct.jsonl"
    return [
        InstructSample.from_dict(json.loads(line))
        for line in path.read_text("utf-8").splitlines()
        if line.strip()
    ]
