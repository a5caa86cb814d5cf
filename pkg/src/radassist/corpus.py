"""Study data model, synthetic corpus generation, manifest IO and splits.

A corpus lives on disk as a directory with ``manifest.jsonl`` (one study per
line), ``labels.txt`` (the vocabulary) and ``images/<id>.png`` (8-bit
grayscale). Synthetic studies are generated from a closed sentence grammar:
each pathology has exactly one positive sentence and one negation sentence,
so the rule labeler recovers gold labels exactly and clinical efficacy is
measurable without external labelers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .vocab import NO_FINDING, FindingVector, Status, Vocabulary

log = logging.getLogger(__name__)


class CorpusError(Exception):
    """Malformed manifest, missing image or violated corpus invariant."""


class View(str, Enum):
    FRONTAL = "frontal"
    LATERAL = "lateral"


@dataclass(frozen=True)
class ChestStudy:
    """One exam: image, findings text, optional indication, gold labels."""

    id: str
    image: np.ndarray  # HxW float32 in [0, 1]
    findings_text: str
    indication_text: str | None
    gold_labels: FindingVector
    view: View = View.FRONTAL

    def __post_init__(self):
        if not self.findings_text.strip():
            raise CorpusError(f"study {self.id!r} has an empty findings section")


@dataclass(frozen=True)
class CorpusSplit:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]

    def subset(self, corpus: list[ChestStudy], part: str) -> list[ChestStudy]:
        """Studies of one split part, in corpus order."""
        ids = getattr(self, part)
        return [s for s in corpus if s.id in ids]

    def to_dict(self) -> dict[str, list[str]]:
        return {
            "train": sorted(self.train),
            "validation": sorted(self.validation),
            "test": sorted(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict[str, list[str]]) -> "CorpusSplit":
        return cls(frozenset(d["train"]), frozenset(d["validation"]), frozenset(d["test"]))


# --------------------------------------------------------------------------
# Closed sentence grammar
#
# One positive and one negation sentence per pathology; the phrase inside each
# sentence is the mention pattern the rule labeler matches on. "No Finding"
# has no sentence: it is derived (positive iff no pathology is positive).
# --------------------------------------------------------------------------

GRAMMAR_PHRASES: dict[str, tuple[str, str]] = {
    # label -> (noun phrase with article, bare mention phrase)
    "Enlarged Cardiomediastinum": ("an enlarged cardiomediastinum", "enlarged cardiomediastinum"),
    "Cardiomegaly": ("cardiomegaly", "cardiomegaly"),
    "Lung Lesion": ("a lung lesion", "lung lesion"),
    "Lung Opacity": ("a lung opacity", "lung opacity"),
    "Edema": ("edema", "edema"),
    "Consolidation": ("consolidation", "consolidation"),
    "Pneumonia": ("pneumonia", "pneumonia"),
    "Atelectasis": ("atelectasis", "atelectasis"),
    "Pneumothorax": ("a pneumothorax", "pneumothorax"),
    "Pleural Effusion": ("a pleural effusion", "pleural effusion"),
    "Pleural Other": ("a pleural abnormality", "pleural abnormality"),
    "Fracture": ("a fracture", "fracture"),
    "Support Devices": ("a support device", "support device"),
}


def positive_sentence(label: str) -> str:
    return f"There is {GRAMMAR_PHRASES[label][0]}."


def negation_sentence(label: str) -> str:
    return f"No {GRAMMAR_PHRASES[label][1]} is seen."


def render_report(labels: FindingVector) -> str:
    """Grammar rendering of a finding vector: one sentence per mentioned
    pathology, in vocabulary order; blank pathologies are omitted."""
    sentences = []
    for name in labels.vocab.names:
        if name == NO_FINDING or name not in GRAMMAR_PHRASES:
            continue
        status = labels[name]
        if status in (Status.POSITIVE, Status.UNCERTAIN):
            sentences.append(positive_sentence(name))
        elif status is Status.NEGATIVE:
            sentences.append(negation_sentence(name))
    return " ".join(sentences)


# --------------------------------------------------------------------------
# Synthetic image rendering: one primitive per positive pathology at a
# label-specific location and intensity, on a noisy background.
# --------------------------------------------------------------------------

def _label_anchor(idx: int, size: int) -> tuple[int, int]:
    # 4x4 cell grid; pathology index picks a cell deterministically
    cell = size // 4
    row, col = divmod(idx % 16, 4)
    return row * cell + cell // 2, col * cell + cell // 2


def _render_image(
    vocab: Vocabulary, labels: FindingVector, size: int, view: View, rng: np.random.Generator
) -> np.ndarray:
    img = rng.normal(0.10, 0.03, size=(size, size))
    if view is View.LATERAL:
        img += np.linspace(0.0, 0.08, size)[None, :]
    yy, xx = np.mgrid[0:size, 0:size]
    radius = max(3, size // 14)
    for name in vocab.pathology_names:
        if labels[name] is not Status.POSITIVE:
            continue
        idx = vocab.index(name)
        cy, cx = _label_anchor(idx - 1, size)
        jitter = rng.integers(-size // 28 - 1, size // 28 + 1, size=2)
        cy, cx = int(cy + jitter[0]), int(cx + jitter[1])
        intensity = 0.55 + 0.03 * (idx % 10)
        if idx % 2 == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        else:
            mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
        img[mask] = intensity
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8 bit so PNG round-trips reproduce the array exactly
    return (np.round(img * 255.0).astype(np.uint8) / 255.0).astype(np.float32)


def derive_no_finding(vocab: Vocabulary, by_name: dict[str, Status]) -> Status:
    """'No Finding' is positive iff every pathology is negative or blank."""
    clear = all(
        by_name.get(n, Status.BLANK) in (Status.NEGATIVE, Status.BLANK)
        for n in vocab.pathology_names
    )
    return Status.POSITIVE if clear else Status.BLANK


def synth_corpus(
    seed: int,
    n: int,
    label_prevalences: dict[str, float] | float = 0.18,
    vocab: Vocabulary | None = None,
    image_size: int = 224,
    mention_negative_prob: float = 0.5,
    indication_none_prob: float = 0.15,
) -> list[ChestStudy]:
    """Generate ``n`` deterministic synthetic studies.

    ``label_prevalences`` maps pathology name to positive probability; a
    single float applies to every pathology. Non-positive pathologies are
    mentioned (negation sentence) with ``mention_negative_prob``, otherwise
    left blank. Images render one primitive per positive pathology.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    vocab = vocab or Vocabulary()
    if isinstance(label_prevalences, (int, float)):
        prev = {name: float(label_prevalences) for name in vocab.pathology_names}
    else:
        prev = {name: float(label_prevalences.get(name, 0.0)) for name in vocab.pathology_names}
    for name, p in prev.items():
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"prevalence for {name!r} outside [0, 1]: {p}")

    rng = np.random.default_rng(seed)
    studies = []
    for i in range(n):
        by_name: dict[str, Status] = {}
        for name in vocab.pathology_names:
            u = rng.random()
            if u < prev[name]:
                by_name[name] = Status.POSITIVE
            elif rng.random() < mention_negative_prob:
                by_name[name] = Status.NEGATIVE
            else:
                by_name[name] = Status.BLANK
        if all(s is Status.BLANK for s in by_name.values()):
            # a study with no mentioned pathology would have an empty report
            by_name[vocab.pathology_names[0]] = Status.NEGATIVE
        by_name[NO_FINDING] = derive_no_finding(vocab, by_name)
        labels = FindingVector.from_statuses(vocab, by_name)

        view = View.FRONTAL if rng.random() < 0.8 else View.LATERAL
        image = _render_image(vocab, labels, image_size, view, rng)

        positives = [n_ for n_ in vocab.pathology_names if by_name[n_] is Status.POSITIVE]
        u_ind = rng.random()
        picked = rng.integers(0, len(positives)) if positives else 0
        if u_ind < indication_none_prob:
            indication = None
        elif positives and u_ind < indication_none_prob + 0.6:
            indication = f"evaluate for {GRAMMAR_PHRASES[positives[int(picked)]][1]}"
        else:
            indication = "routine exam"

        studies.append(
            ChestStudy(
                id=f"synth-{seed}-{i:05d}",
                image=image,
                findings_text=render_report(labels),
                indication_text=indication,
                gold_labels=labels,
                view=view,
            )
        )
    return studies


# --------------------------------------------------------------------------
# Manifest IO
# --------------------------------------------------------------------------

@dataclass
class LoadResult:
    studies: list[ChestStudy]
    dropped_ids: list[str]


def save_corpus(corpus: list[ChestStudy], out_dir: str | Path) -> Path:
    """Write manifest.jsonl, labels.txt and images/ under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if not corpus:
        raise CorpusError("refusing to save an empty corpus")
    vocab = corpus[0].gold_labels.vocab
    vocab.save(out_dir / "labels.txt")
    lines = []
    for study in corpus:
        rel = f"images/{study.id}.png"
        arr = np.round(study.image * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(out_dir / rel)
        lines.append(
            json.dumps(
                {
                    "id": study.id,
                    "image": rel,
                    "findings": study.findings_text,
                    "indication": study.indication_text,
                    "view": study.view.value,
                    "labels": study.gold_labels.to_dict(),
                },
                ensure_ascii=False,
            )
        )
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n", "utf-8")
    return out_dir / "manifest.jsonl"


def load_manifest(path: str | Path, image_size: int | None = None) -> LoadResult:
    """Load a corpus, dropping (and reporting) empty-findings studies.

    ``path`` is the manifest file or its directory. Raises :class:`CorpusError`
    with the offending line number or study id on malformed input.
    """
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    root = manifest.parent
    vocab_file = root / "labels.txt"
    vocab = Vocabulary.load(vocab_file) if vocab_file.exists() else Vocabulary()

    studies: list[ChestStudy] = []
    dropped: list[str] = []
    seen: set[str] = set()
    for lineno, line in enumerate(manifest.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            study_id = rec["id"]
            image_rel = rec["image"]
            findings = rec["findings"]
            indication = rec.get("indication")
            view = View(rec.get("view", "frontal"))
            labels = FindingVector.from_dict(vocab, rec["labels"])
        except (KeyError, ValueError, TypeError) as exc:
            raise CorpusError(f"{manifest}:{lineno}: malformed record: {exc}") from exc
        if study_id in seen:
            raise CorpusError(f"{manifest}:{lineno}: duplicate study id {study_id!r}")
        seen.add(study_id)
        if not str(findings).strip():
            dropped.append(study_id)
            continue
        image_path = root / image_rel
        if not image_path.exists():
            raise CorpusError(f"study {study_id!r}: image file not found: {image_path}")
        with Image.open(image_path) as im:
            im = im.convert("L")
            if image_size is not None and im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            image = (np.asarray(im, dtype=np.float32) / 255.0).astype(np.float32)
        studies.append(
            ChestStudy(
                id=study_id,
                image=image,
                findings_text=findings,
                indication_text=indication,
                gold_labels=labels,
                view=view,
            )
        )
    if dropped:
        log.info("dropped %d studies with empty findings: %s", len(dropped), dropped[:5])
    return LoadResult(studies=studies, dropped_ids=dropped)


def load_corpus(path: str | Path, image_size: int | None = None) -> list[ChestStudy]:
    return load_manifest(path, image_size=image_size).studies


def split_corpus(
    corpus: list[ChestStudy], fractions: tuple[float, float, float], seed: int
) -> CorpusSplit:
    """Disjoint, exhaustive train/validation/test split.

    Sizes use floor-then-distribute: each part gets ``floor(f * n)`` studies
    and all remainder goes to train.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    ids = [s.id for s in corpus]
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train += n - (n_train + n_val + n_test)
    return CorpusSplit(
        train=frozenset(shuffled[:n_train]),
        validation=frozenset(shuffled[n_train : n_train + n_val]),
        test=frozenset(shuffled[n_train + n_val :]),
    )


def with_image(study: ChestStudy, image: np.ndarray) -> ChestStudy:
    return replace(study, image=image)
