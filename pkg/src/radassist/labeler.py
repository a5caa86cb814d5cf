"""Rule-based finding extraction from report text, label diffs, and the
adapter for plugging in an external neural labeler.

The rule labeler is the reference implementation used for clinical-efficacy
scoring and correction prompts. Matching is case-insensitive; a negation cue
scopes forward to the end of its sentence; an uncertainty cue anywhere in the
sentence marks its mentions uncertain. 'No Finding' is never matched
directly: it is positive iff no pathology is positive or uncertain.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .vocab import NO_FINDING, FindingVector, Status, Vocabulary


class RuleTableError(Exception):
    """Rule table does not cover the vocabulary or is malformed."""


class VocabularyMismatch(ValueError):
    """Two finding vectors built over different vocabularies."""


class LabelerUnavailable(Exception):
    """External labeler endpoint failed; never silently maps to blanks."""


@dataclass(frozen=True)
class LabelDiff:
    """Labels to add to / remove from a hypothesis to match a reference."""

    to_add: frozenset[str]
    to_remove: frozenset[str]

    def __post_init__(self):
        if self.to_add & self.to_remove:
            raise ValueError("to_add and to_remove overlap")

    @property
    def empty(self) -> bool:
        return not self.to_add and not self.to_remove


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_WORD = re.compile(r"[a-z0-9]")


def _phrase_pattern(phrase: str) -> re.Pattern:
    words = [re.escape(w) for w in phrase.lower().split()]
    return re.compile(r"\b" + r"\s+".join(words) + r"\b")


def load_rule_table(path: str | Path | None = None) -> dict:
    """Load a rule table; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("radassist.data").joinpath("rules.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    table = json.loads(text)
    if "labels" not in table:
        raise RuleTableError("rule table missing 'labels' section")
    return table


class RuleLabeler:
    """Deterministic pattern/negation labeler over the fixed vocabulary."""

    def __init__(self, vocab: Vocabulary | None = None, rules: dict | None = None):
        self.vocab = vocab or Vocabulary()
        table = rules or load_rule_table()
        self._global_neg = [_phrase_pattern(c) for c in table.get("negation_cues", [])]
        self._global_unc = [_phrase_pattern(c) for c in table.get("uncertainty_cues", [])]
        self._patterns: dict[str, list[re.Pattern]] = {}
        self._neg: dict[str, list[re.Pattern]] = {}
        self._unc: dict[str, list[re.Pattern]] = {}
        for name in self.vocab.names:
            if name == NO_FINDING:
                continue
            entry = table["labels"].get(name)
            if not entry or not entry.get("patterns"):
                raise RuleTableError(f"no mention patterns for label {name!r}")
            self._patterns[name] = [_phrase_pattern(p) for p in entry["patterns"]]
            self._neg[name] = (
                [_phrase_pattern(c) for c in entry["negation_cues"]]
                if "negation_cues" in entry
                else self._global_neg
            )
            self._unc[name] = (
                [_phrase_pattern(c) for c in entry["uncertainty_cues"]]
                if "uncertainty_cues" in entry
                else self._global_unc
            )
            if not self._neg[name]:
                raise RuleTableError(f"no negation cues configured for label {name!r}")

    def extract(self, text: str) -> FindingVector:
        """Label one report; empty or content-free text yields all blank."""
        lowered = text.lower().strip()
        if not _WORD.search(lowered):
            return FindingVector.all_blank(self.vocab)
        sentences = [s for s in _SENTENCE_SPLIT.split(lowered) if s.strip()]

        by_name: dict[str, Status] = {}
        for name, patterns in self._patterns.items():
            statuses: list[Status] = []
            for sentence in sentences:
                unc_hit = any(c.search(sentence) for c in self._unc[name])
                for pat in patterns:
                    for m in pat.finditer(sentence):
                        if unc_hit:
                            statuses.append(Status.UNCERTAIN)
                        elif any(
                            c.search(sentence, 0, m.start()) for c in self._neg[name]
                        ):
                            statuses.append(Status.NEGATIVE)
                        else:
                            statuses.append(Status.POSITIVE)
            if Status.POSITIVE in statuses:
                by_name[name] = Status.POSITIVE
            elif Status.UNCERTAIN in statuses:
                by_name[name] = Status.UNCERTAIN
            elif Status.NEGATIVE in statuses:
                by_name[name] = Status.NEGATIVE

        if NO_FINDING in self.vocab:
            clear = all(
                by_name.get(n, Status.BLANK) in (Status.NEGATIVE, Status.BLANK)
                for n in self.vocab.pathology_names
            )
            if clear:
                by_name[NO_FINDING] = Status.POSITIVE
        return FindingVector.from_statuses(self.vocab, by_name)

    def __call__(self, text: str) -> FindingVector:
        return self.extract(text)


def diff_labels(
    hypothesis: FindingVector,
    reference: FindingVector,
    uncertain_as_positive: bool = False,
) -> LabelDiff:
    """Set difference of present labels between hypothesis and reference."""
    if hypothesis.vocab != reference.vocab:
        raise VocabularyMismatch("hypothesis and reference use different vocabularies")
    hyp = hypothesis.present(uncertain_as_positive)
    ref = reference.present(uncertain_as_positive)
    return LabelDiff(to_add=ref - hyp, to_remove=hyp - ref)


class ExternalLabeler:
    """HTTP adapter for a neural labeler service.

    Protocol: ``POST {"texts": [...]}`` returning
    ``{"labels": [{label_name: status}, ...]}`` with one entry per text.
    """

    def __init__(
        self,
        url: str,
        vocab: Vocabulary | None = None,
        timeout: float = 10.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url
        self.vocab = vocab or Vocabulary()
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def extract_batch(self, texts: Sequence[str]) -> list[FindingVector]:
        try:
            resp = self._client.post(self.url, json={"texts": list(texts)})
            resp.raise_for_status()
            payload = resp.json()
            rows = payload["labels"]
            if len(rows) != len(texts):
                raise LabelerUnavailable(
                    f"labeler returned {len(rows)} rows for {len(texts)} texts"
                )
            return [FindingVector.from_dict(self.vocab, row) for row in rows]
        except LabelerUnavailable:
            raise
        except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
            raise LabelerUnavailable(f"external labeler at {self.url} failed: {exc}") from exc

    def extract(self, text: str) -> FindingVector:
        return self.extract_batch([text])[0]

    def __call__(self, text: str) -> FindingVector:
        return self.extract(text)


LabelerFn = Callable[[str], FindingVector]


def external_labeler_adapter(
    url: str,
    vocab: Vocabulary | None = None,
    timeout: float = 10.0,
    transport: httpx.BaseTransport | None = None,
) -> LabelerFn:
    """Labeler function backed by a remote endpoint."""
    return ExternalLabeler(url, vocab=vocab, timeout=timeout, transport=transport)
