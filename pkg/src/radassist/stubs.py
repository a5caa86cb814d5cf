"""Deterministic text-generation stubs.

The desk stub stands in for a large non-fine-tuned LM wherever the pipeline
needs one (pseudo ground truth, predicted reports for correction mining).
It is grammar-aware and fully deterministic: behaviour depends only on the
prompt text, so dataset builds are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import re

from .adapt import DecodeConfig, LMClient
from .corpus import render_report
from .errors import ConfigError, ContractError
from .labeler import RuleLabeler
from .prompts import PromptBundle, TemplateRegistry
from .tokenizer import IMG_PLACEHOLDER
from .vocab import NO_FINDING, FindingVector, Status, Vocabulary

_FIRST_SENTENCE = re.compile(r"^(.*?[.!?])(\s|$)", re.DOTALL)

PLAIN_LANGUAGE = {
    "Enlarged Cardiomediastinum": "The area around the heart looks wider than normal.",
    "Cardiomegaly": "The heart looks bigger than normal.",
    "Lung Lesion": "There is a spot on the lung.",
    "Lung Opacity": "Part of the lung looks cloudy.",
    "Edema": "There is extra fluid in the lungs.",
    "Consolidation": "Part of the lung is filled with something other than air.",
    "Pneumonia": "There are signs of a lung infection.",
    "Atelectasis": "Part of the lung is not fully expanded.",
    "Pneumothorax": "There is air trapped next to the lung.",
    "Pleural Effusion": "There is fluid around the lung.",
    "Pleural Other": "The lining of the lung does not look normal.",
    "Fracture": "There is a broken bone.",
    "Support Devices": "There is a medical device visible.",
}

REGION_LABELS = {
    "heart": ("Cardiomegaly", "Enlarged Cardiomediastinum"),
    "cardiac": ("Cardiomegaly", "Enlarged Cardiomediastinum"),
    "mediastin": ("Enlarged Cardiomediastinum",),
    "lung": (
        "Lung Lesion", "Lung Opacity", "Edema", "Consolidation",
        "Pneumonia", "Atelectasis", "Pneumothorax",
    ),
    "pleur": ("Pleural Effusion", "Pleural Other", "Pneumothorax"),
    "osseous": ("Fracture",),
    "bone": ("Fracture",),
}


def first_sentence(text: str) -> str:
    m = _FIRST_SENTENCE.match(text.strip())
    return m.group(1) if m else text.strip()


class EchoStub(LMClient):
    """Returns the first sentence of the prompt; handy for tests."""

    model_id = "stub:echo"

    def generate(self, prompt, decode: DecodeConfig = DecodeConfig(), aligned_tokens=None):
        text = prompt.rendered if isinstance(prompt, PromptBundle) else prompt
        return first_sentence(text)


def _template_regex(text: str) -> re.Pattern:
    pattern = re.escape(text)
    pattern = re.sub(r"<([A-Z]+(?:_[0-9]+)?)>", r"(?P<g\1>.+?)", pattern.replace("\\<", "<").replace("\\>", ">"))
    return re.compile("^" + pattern + "$")


def split_names(joined: str) -> list[str]:
    """Inverse of the 'A, B and C' join."""
    parts = []
    for chunk in joined.split(", "):
        parts.extend(chunk.split(" and "))
    return [p.strip() for p in parts if p.strip()]


class DeskStub(LMClient):
    """Grammar-aware deterministic stand-in for a general-purpose LM.

    Recognizes the registry's instructions by template matching; report
    prompts get a deterministically perturbed grammar report (so label
    errors exist for correction mining), correction prompts get the context
    report re-rendered with the named labels fixed, and the remaining tasks
    get rule-derived plain-language/summary/region answers.
    """

    model_id = "stub:desk"

    def __init__(
        self,
        vocab: Vocabulary | None = None,
        registry: TemplateRegistry | None = None,
        labeler: RuleLabeler | None = None,
    ):
        self.vocab = vocab or Vocabulary()
        self.registry = registry or TemplateRegistry.load()
        self.labeler = labeler or RuleLabeler(self.vocab)
        self._matchers: list[tuple[str, str | None, re.Pattern]] = []
        for task in ("correction", "summarization", "easy_language", "region_qa", "complete_qa", "binary_qa", "nle"):
            for t in self.registry.templates(task):
                self._matchers.append((task, t.flavor, _template_regex(t.text)))

    # -- behaviours -----------------------------------------------------

    def _report_for(self, prompt_text: str) -> str:
        m = re.search(r"Predicted Findings: ([^.]*)\.", prompt_text)
        listed = [n.strip() for n in m.group(1).split(",")] if m else []
        positives = [n for n in listed if n in self.vocab and n != NO_FINDING]
        digest = hashlib.sha256(prompt_text.encode()).digest()
        h = int.from_bytes(digest[:8], "big")
        perturbed = list(positives)
        if perturbed and h & 1:
            perturbed.pop((h >> 2) % len(perturbed))
        absent = [n for n in self.vocab.pathology_names if n not in perturbed]
        if absent and h & 2:
            perturbed.append(absent[(h >> 16) % len(absent)])
        # corpus-style rendering: non-positive labels split between mentioned
        # negatives and omissions, keyed on the prompt digest
        by_name: dict[str, Status] = {}
        for i, name in enumerate(self.vocab.pathology_names):
            if name in perturbed:
                by_name[name] = Status.POSITIVE
            elif digest[8 + i % 16] & 1:
                by_name[name] = Status.NEGATIVE
            else:
                by_name[name] = Status.BLANK
        if all(s is not Status.POSITIVE for s in by_name.values()) and all(
            s is Status.BLANK for s in by_name.values()
        ):
            by_name[self.vocab.pathology_names[0]] = Status.NEGATIVE
        return render_report(FindingVector.from_statuses(self.vocab, by_name))

    def _corrected(self, context: str, add: list[str], remove: list[str]) -> str:
        current = self.labeler.extract(context)
        by_name = {n: current[n] for n in self.vocab.pathology_names}
        for n in add:
            if n in self.vocab and n != NO_FINDING:
                by_name[n] = Status.POSITIVE
        for n in remove:
            if n in self.vocab and n != NO_FINDING:
                by_name[n] = Status.NEGATIVE
        if all(s in (Status.BLANK,) for s in by_name.values()):
            by_name[self.vocab.pathology_names[0]] = Status.NEGATIVE
        return render_report(FindingVector.from_statuses(self.vocab, by_name))

    def _positives(self, context: str) -> list[str]:
        fv = self.labeler.extract(context)
        return [n for n in self.vocab.pathology_names if fv[n] is Status.POSITIVE]

    def generate(self, prompt, decode: DecodeConfig = DecodeConfig(), aligned_tokens=None):
        text = prompt.rendered if isinstance(prompt, PromptBundle) else prompt
        if IMG_PLACEHOLDER in text:
            raise ContractError("desk stub does not support image-token prompts")
        context, _, instruction = text.rpartition("\n\n")
        if not context:
            context, instruction = instruction, ""

        if "Predicted Findings:" in text or self.registry.report_instruction in text:
            return self._report_for(text)

        for task, flavor, matcher in self._matchers:
            m = matcher.match(instruction.strip())
            if not m:
                continue
            groups = m.groupdict()
            if task == "correction":
                if flavor == "add":
                    return self._corrected(context, split_names(groups["gPATHOLOGIES"]), [])
                if flavor == "remove":
                    return self._corrected(context, [], split_names(groups["gPATHOLOGIES"]))
                return self._corrected(
                    context,
                    split_names(groups["gPATHOLOGIES_1"]),
                    split_names(groups["gPATHOLOGIES_2"]),
                )
            if task == "summarization":
                pos = self._positives(context)
                return f"Key findings: {', '.join(pos)}." if pos else "No acute findings."
            if task == "easy_language":
                pos = self._positives(context)
                if not pos:
                    return "The picture of the chest looks healthy."
                return " ".join(PLAIN_LANGUAGE[n] for n in pos)
            if task == "region_qa":
                lowered = instruction.lower()
                related: tuple[str, ...] = ()
                for key, names in REGION_LABELS.items():
                    if key in lowered:
                        related = names
                        break
                hits = [n for n in self._positives(context) if n in related]
                if hits:
                    return f"The report mentions {', '.join(hits)} in this region."
                return "The report shows no abnormality in this region."
            if task == "complete_qa":
                pos = self._positives(context)
                return ", ".join(pos) if pos else NO_FINDING
            if task == "binary_qa":
                name = groups.get("gPATHOLOGY", "")
                return "yes" if name in self._positives(context) else "no"
            break
        return first_sentence(context or text)


def make_stub(name: str, **kwargs) -> LMClient:
    if name == "echo":
        return EchoStub()
    if name == "desk":
        return DeskStub(**kwargs)
    raise ConfigError(f"unknown stub backend {name!r}")
