"""Finding vocabulary and per-study label vectors.

The 14-label chest X-ray vocabulary is fixed and order-significant: every
array, prompt findings list and serialized artifact in this package indexes
labels by their position in the vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping


class Status(str, Enum):
    """Assertion status of one finding in one report."""

    POSITIVE = "pos"
    NEGATIVE = "neg"
    UNCERTAIN = "unc"
    BLANK = "blank"


NO_FINDING = "No Finding"


def _default_label_names() -> tuple[str, ...]:
    text = resources.files("radassist.data").joinpath("labels.txt").read_text("utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


class Vocabulary:
    """Ordered finding-label vocabulary (default: the 14 CheXpert labels)."""

    def __init__(self, names: Iterable[str] | None = None):
        self.names: tuple[str, ...] = tuple(names) if names is not None else _default_label_names()
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate label names in vocabulary")
        if not self.names:
            raise ValueError("empty vocabulary")
        self._index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def sort_names(self, names: Iterable[str]) -> list[str]:
        """Return the given label names in vocabulary order."""
        return sorted(names, key=self._index.__getitem__)

    @property
    def pathology_names(self) -> tuple[str, ...]:
        """All labels except the derived 'No Finding'."""
        return tuple(n for n in self.names if n != NO_FINDING)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text("utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.names) + "\n", "utf-8")


@dataclass(frozen=True)
class FindingVector:
    """Status of every vocabulary label for one study or one report."""

    vocab: Vocabulary
    statuses: tuple[Status, ...]

    def __post_init__(self):
        if len(self.statuses) != len(self.vocab):
            raise ValueError(
                f"expected {len(self.vocab)} statuses, got {len(self.statuses)}"
            )

    def __getitem__(self, name: str) -> Status:
        return self.statuses[self.vocab.index(name)]

    def present(self, uncertain_as_positive: bool = False) -> frozenset[str]:
        """Label names counted as present under the positive policy."""
        allowed = {Status.POSITIVE, Status.UNCERTAIN} if uncertain_as_positive else {Status.POSITIVE}
        return frozenset(n for n, s in zip(self.vocab.names, self.statuses) if s in allowed)

    def to_dict(self) -> dict[str, str]:
        return {n: s.value for n, s in zip(self.vocab.names, self.statuses)}

    @classmethod
    def from_dict(cls, vocab: Vocabulary, mapping: Mapping[str, str]) -> "FindingVector":
        missing = [n for n in vocab.names if n not in mapping]
        if missing:
            raise ValueError(f"label statuses missing for: {missing}")
        extra = [n for n in mapping if n not in vocab]
        if extra:
            raise ValueError(f"unknown labels: {extra}")
        return cls(vocab, tuple(Status(mapping[n]) for n in vocab.names))

    @classmethod
    def from_statuses(cls, vocab: Vocabulary, by_name: Mapping[str, Status]) -> "FindingVector":
        """Build a vector defaulting every unmentioned label to blank."""
        return cls(vocab, tuple(by_name.get(n, Status.BLANK) for n in vocab.names))

    @classmethod
    def all_blank(cls, vocab: Vocabulary) -> "FindingVector":
        return cls(vocab, (Status.BLANK,) * len(vocab))
