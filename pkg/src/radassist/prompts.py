"""Deterministic prompt construction: report prompts, the per-task template
registry, and multi-turn dialog rendering with role markers.

Rendered prompts are byte-stable: segments concatenate in a fixed order,
findings lists are sorted to vocabulary order, and the ``<IMG>`` placeholder
marks the single span where aligned image tokens are injected.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import ContractError
from .tokenizer import IMG_PLACEHOLDER, IMG_TOKEN_COUNT, split_words
from .vocab import Vocabulary

TASKS = (
    "report",
    "complete_qa",
    "binary_qa",
    "region_qa",
    "easy_language",
    "summarization",
    "correction",
    "nle",
)
TEMPLATES_PER_TASK = 10

USER_MARK = "USER:"
ASSISTANT_MARK = "ASSISTANT:"

_PLACEHOLDER_RE = re.compile(r"<([A-Z]+(?:_[0-9]+)?)>")


class TemplateError(ContractError):
    """Missing placeholder value or malformed template registry."""


@dataclass(frozen=True)
class Segment:
    kind: str  # "image_tokens" | "text"
    payload: str


@dataclass(frozen=True)
class PromptBundle:
    segments: tuple[Segment, ...]
    rendered: str
    truncated: bool = False

    def __post_init__(self):
        n_img = sum(1 for s in self.segments if s.kind == "image_tokens")
        if n_img > 1:
            raise ContractError("a prompt may contain at most one image-token segment")

    @property
    def has_image(self) -> bool:
        return any(s.kind == "image_tokens" for s in self.segments)


def join_names(names: Sequence[str]) -> str:
    """'A', 'A and B', 'A, B and C' ..."""
    names = list(names)
    if not names:
        return ""
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def approx_token_count(rendered: str) -> int:
    """Budget estimate: words + punctuation, image span counted as 32."""
    n = 0
    for i, chunk in enumerate(rendered.split(IMG_PLACEHOLDER)):
        if i > 0:
            n += IMG_TOKEN_COUNT
        n += len(split_words(chunk))
    return n


@dataclass(frozen=True)
class Template:
    text: str
    source: str = "core"
    flavor: str | None = None

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.text))

    def fill(self, values: dict[str, str]) -> str:
        missing = self.placeholders - set(values)
        if missing:
            raise TemplateError(f"missing placeholder values: {sorted(missing)}")

        def sub(m: re.Match) -> str:
            return values[m.group(1)]

        return _PLACEHOLDER_RE.sub(sub, self.text)


class TemplateRegistry:
    """Per-task template lists; 10 templates per non-report task, 1 report."""

    def __init__(self, tasks: dict[str, list[Template]]):
        self.tasks = tasks
        self.validate()

    def validate(self) -> None:
        for task in TASKS:
            if task not in self.tasks:
                raise TemplateError(f"missing templates for task {task!r}")
            n = len(self.tasks[task])
            want = 1 if task == "report" else TEMPLATES_PER_TASK
            if n != want:
                raise TemplateError(f"task {task!r} has {n} templates, expected {want}")

    def templates(self, task: str) -> list[Template]:
        if task not in self.tasks:
            raise TemplateError(f"unknown task {task!r}")
        return self.tasks[task]

    @property
    def report_instruction(self) -> str:
        return self.tasks["report"][0].text

    @classmethod
    def load(cls, path: str | Path | None = None) -> "TemplateRegistry":
        if path is None:
            text = resources.files("radassist.data").joinpath("templates.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        raw = json.loads(text)
        tasks = {
            task: [
                Template(text=e["text"], source=e.get("source", "core"), flavor=e.get("flavor"))
                for e in entries
            ]
            for task, entries in raw.items()
        }
        return cls(tasks)


@dataclass(frozen=True)
class Turn:
    role: str  # "user" | "assistant"
    content: "str | PromptBundle"

    @property
    def rendered(self) -> str:
        return self.content.rendered if isinstance(self.content, PromptBundle) else self.content


class PromptBuilder:
    """Builds prompts over a fixed vocabulary and template registry."""

    def __init__(self, vocab: Vocabulary | None = None, registry: TemplateRegistry | None = None):
        self.vocab = vocab or Vocabulary()
        self.registry = registry or TemplateRegistry.load()

    # -- report prompt -------------------------------------------------

    def build_report_prompt(
        self,
        tokens: object | None,
        findings: Sequence[str] | None,
        indication: str | None = None,
    ) -> PromptBundle:
        """Compose the report-generation prompt.

        ``tokens`` marks the presence of aligned image tokens (value unused);
        ``findings`` is a list of label names (empty treated as absent);
        segments absent from the input are omitted together with their
        headers. At least one of tokens/findings must be present.
        """
        if findings is not None and len(findings) == 0:
            findings = None
        if tokens is None and findings is None:
            raise ContractError("report prompt needs image tokens, findings, or both")
        segments: list[Segment] = []
        if tokens is not None:
            segments.append(Segment("text", "Image information: "))
            segments.append(Segment("image_tokens", IMG_PLACEHOLDER))
            segments.append(Segment("text", ". "))
        if findings is not None:
            unknown = [n for n in findings if n not in self.vocab]
            if unknown:
                raise ContractError(f"findings not in vocabulary: {unknown}")
            names = self.vocab.sort_names(set(findings))
            segments.append(Segment("text", f"Predicted Findings: {', '.join(names)}. "))
        if indication is not None:
            segments.append(Segment("text", f"Indication: {indication}. "))
        segments.append(Segment("text", self.registry.report_instruction))
        rendered = "".join(s.payload for s in segments)
        return PromptBundle(segments=tuple(segments), rendered=rendered)

    # -- instruction sampling -------------------------------------------

    def sample_instruction(
        self, task: str, placeholders: dict[str, Sequence[str] | str], rng: random.Random
    ) -> str:
        """Uniform draw over the task's templates compatible with the given
        placeholder values; name lists join as 'A, B and C'."""
        values = {
            key: join_names(val) if not isinstance(val, str) else val
            for key, val in placeholders.items()
        }
        pool = [t for t in self.registry.templates(task) if t.placeholders <= set(values)]
        if not pool:
            raise TemplateError(
                f"no template of task {task!r} can be filled from {sorted(values)}"
            )
        return rng.choice(pool).fill(values)

    def sample_correction_instruction(
        self, to_add: Sequence[str], to_remove: Sequence[str], rng: random.Random
    ) -> str:
        """Correction instruction naming the labels to add and/or remove."""
        add = self.vocab.sort_names(set(to_add))
        remove = self.vocab.sort_names(set(to_remove))
        if add and remove:
            flavor, values = "both", {"PATHOLOGIES_1": join_names(add), "PATHOLOGIES_2": join_names(remove)}
        elif add:
            flavor, values = "add", {"PATHOLOGIES": join_names(add)}
        elif remove:
            flavor, values = "remove", {"PATHOLOGIES": join_names(remove)}
        else:
            raise ContractError("empty label diff: nothing to correct")
        pool = [t for t in self.registry.templates("correction") if t.flavor == flavor]
        if not pool:
            raise TemplateError(f"no correction template with flavor {flavor!r}")
        return rng.choice(pool).fill(values)

    # -- dialog rendering -------------------------------------------------

    def render_dialog(
        self,
        history: Sequence[Turn],
        new_instruction: "str | PromptBundle",
        token_budget: int | None = None,
    ) -> PromptBundle:
        """Serialize a dialog with USER:/ASSISTANT: markers, ending with a
        trailing assistant marker. Oldest non-first turns are dropped in
        pairs when the token budget is exceeded (``truncated`` set)."""
        turns = list(history) + [Turn("user", new_instruction)]
        if turns[0].role != "user":
            raise ContractError("dialog must start with a user turn")
        for a, b in zip(turns, turns[1:]):
            if a.role == b.role:
                raise ContractError(f"two consecutive {a.role!r} turns")
        img_turns = [
            i
            for i, t in enumerate(turns)
            if isinstance(t.content, PromptBundle) and t.content.has_image
        ]
        if any(i > 0 for i in img_turns):
            raise ContractError("image tokens are only allowed in the first user turn")

        truncated = False
        if token_budget is not None:
            # the first (image) turn and the new instruction are never dropped
            while len(turns) > 3 and approx_token_count(self._render_turns(turns)) > token_budget:
                # drop the oldest assistant/user pair right after the first turn
                del turns[1:3]
                truncated = True
            if len(turns) == 3 and approx_token_count(self._render_turns(turns)) > token_budget:
                del turns[1]
                truncated = True

        rendered = self._render_turns(turns)
        segments: list[Segment] = []
        for i, turn in enumerate(turns):
            mark = USER_MARK if turn.role == "user" else ASSISTANT_MARK
            prefix = ("" if i == 0 else "\n") + mark + " "
            if isinstance(turn.content, PromptBundle):
                segments.append(Segment("text", prefix))
                segments.extend(turn.content.segments)
            else:
                segments.append(Segment("text", prefix + turn.content))
        segments.append(Segment("text", "\n" + ASSISTANT_MARK))
        return PromptBundle(segments=tuple(segments), rendered=rendered, truncated=truncated)

    @staticmethod
    def _render_turns(turns: Sequence[Turn]) -> str:
        parts = []
        for turn in turns:
            mark = USER_MARK if turn.role == "user" else ASSISTANT_MARK
            parts.append(f"{mark} {turn.rendered}")
        return "\n".join(parts) + "\n" + ASSISTANT_MARK


def strip_reply(text: str) -> str:
    """Cut a generated continuation at the next role marker, if any."""
    for mark in (USER_MARK, ASSISTANT_MARK):
        pos = text.find(mark)
        if pos != -1:
            text = text[:pos]
    return text.strip()


def append_turns(history: list[Turn], user: "str | PromptBundle", assistant: str) -> list[Turn]:
    return list(history) + [Turn("user", user), Turn("assistant", assistant)]
