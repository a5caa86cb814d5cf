"""Evaluation: clinical efficacy, NLG metrics, embedding similarity, and the
report-generation / correction / findings-QA protocols.

All metrics are pure functions of their inputs. Tokenization is fixed:
lowercase, then split into word and punctuation tokens. The METEOR
implementation uses exact unigram matching only (no stemming or synonym
stage) and the embedding-similarity metric defaults to a deterministic
hashed character-n-gram embedder; both stand-ins are documented divergences
from the full reference metrics.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .classifier import macro_f1_binary, per_class_prf
from .corpus import ChestStudy
from .errors import ContractError
from .labeler import RuleLabeler, diff_labels
from .prompts import PromptBuilder, Turn
from .tokenizer import split_words
from .vocab import FindingVector, Vocabulary

log = logging.getLogger(__name__)


def tokenize(text: str) -> list[str]:
    return split_words(text.lower())


# --------------------------------------------------------------------------
# NLG metrics
# --------------------------------------------------------------------------

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(cands: Sequence[str], refs: Sequence[str], max_n: int = 4) -> float:
    """Corpus-level BLEU with uniform weights over n = 1..max_n and the
    standard brevity penalty."""
    if len(cands) != len(refs):
        raise ContractError("candidate and reference lists differ in length")
    if max_n not in (1, 4):
        raise ContractError("max_n must be 1 or 4")
    cand_tokens = [tokenize(c) for c in cands]
    ref_tokens = [tokenize(r) for r in refs]
    cand_len = sum(len(t) for t in cand_tokens)
    ref_len = sum(len(t) for t in ref_tokens)
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched = 0
        total = 0
        for c, r in zip(cand_tokens, ref_tokens):
            c_counts = _ngrams(c, n)
            r_counts = _ngrams(r, n)
            matched += sum(min(cnt, r_counts[g]) for g, cnt in c_counts.items())
            total += max(0, len(c) - n + 1)
        if matched == 0 or total == 0:
            return 0.0
        log_sum += math.log(matched / total) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum)


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


ROUGE_BETA = 1.2


def rouge_l(cands: Sequence[str], refs: Sequence[str]) -> float:
    """Mean sentence-level LCS F-measure with beta = 1.2 (recall-weighted)."""
    if len(cands) != len(refs):
        raise ContractError("candidate and reference lists differ in length")
    if not cands:
        return 0.0
    scores = []
    for c, r in zip(cands, refs):
        ct, rt = tokenize(c), tokenize(r)
        if not ct or not rt:
            scores.append(0.0)
            continue
        lcs = _lcs_len(ct, rt)
        if lcs == 0:
            scores.append(0.0)
            continue
        p = lcs / len(ct)
        rr = lcs / len(rt)
        beta2 = ROUGE_BETA**2
        scores.append((1 + beta2) * rr * p / (rr + beta2 * p))
    return float(np.mean(scores))


METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
_EXACT_CHUNK_LIMIT = 20


def _match_budget(cand: list[str], ref: list[str]) -> dict[str, int]:
    c_counts = Counter(cand)
    r_counts = Counter(ref)
    return {w: min(c_counts[w], r_counts[w]) for w in c_counts if r_counts[w] > 0}


def _min_chunks_exact(cand: list[str], ref: list[str], budget: dict[str, int]) -> int:
    """Minimal chunk count over all maximal alignments (small inputs)."""
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        ref_positions.setdefault(w, []).append(j)
    best = math.inf
    m_total = sum(budget.values())

    def dfs(i: int, remaining: dict[str, int], used: int, prev_c: int, prev_r: int, chunks: int, matched: int):
        nonlocal best
        if chunks >= best:
            return
        if matched == m_total:
            best = min(best, chunks)
            return
        if i >= len(cand):
            return
        # prune: not enough candidates left to finish the alignment
        if matched + (len(cand) - i) < m_total:
            return
        w = cand[i]
        if remaining.get(w, 0) > 0:
            for j in ref_positions[w]:
                if used >> j & 1:
                    continue
                contiguous = prev_c == i - 1 and prev_r == j - 1
                remaining[w] -= 1
                dfs(i + 1, remaining, used | (1 << j), i, j, chunks + (0 if contiguous else 1), matched + 1)
                remaining[w] += 1
        # option: leave cand[i] unmatched (only if budget allows skipping)
        skippable = cand[i:].count(w) > remaining.get(w, 0)
        if remaining.get(w, 0) == 0 or skippable:
            dfs(i + 1, remaining, used, prev_c, prev_r, chunks, matched)

    dfs(0, dict(budget), 0, -2, -2, 0, 0)
    return int(best) if best is not math.inf else 0


def _min_chunks_greedy(cand: list[str], ref: list[str], budget: dict[str, int]) -> int:
    used: set[int] = set()
    ref_positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        ref_positions.setdefault(w, []).append(j)
    remaining = dict(budget)
    chunks = 0
    prev_c = prev_r = -2
    for i, w in enumerate(cand):
        if remaining.get(w, 0) <= 0:
            continue
        slots = [j for j in ref_positions[w] if j not in used]
        if not slots:
            continue
        j = prev_r + 1 if (prev_c == i - 1 and prev_r + 1 in slots) else slots[0]
        used.add(j)
        remaining[w] -= 1
        if not (prev_c == i - 1 and prev_r == j - 1):
            chunks += 1
        prev_c, prev_r = i, j
    return chunks


def meteor(cands: Sequence[str], refs: Sequence[str]) -> float:
    """Exact-match METEOR: recall-weighted harmonic mean of unigram
    precision/recall times a fragmentation penalty."""
    if len(cands) != len(refs):
        raise ContractError("candidate and reference lists differ in length")
    if not cands:
        return 0.0
    scores = []
    for c, r in zip(cands, refs):
        ct, rt = tokenize(c), tokenize(r)
        budget = _match_budget(ct, rt) if ct and rt else {}
        m = sum(budget.values())
        if m == 0:
            scores.append(0.0)
            continue
        p = m / len(ct)
        rec = m / len(rt)
        f_mean = p * rec / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * rec)
        if len(ct) <= _EXACT_CHUNK_LIMIT and len(rt) <= _EXACT_CHUNK_LIMIT:
            chunks = _min_chunks_exact(ct, rt, budget)
        else:
            chunks = _min_chunks_greedy(ct, rt, budget)
        penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
        scores.append(f_mean * (1.0 - penalty))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Embedding similarity (greedy token-matching F1)
# --------------------------------------------------------------------------

class EmbedderUnavailable(Exception):
    pass


def hashed_ngram_embedder(dim: int = 64) -> Callable[[list[str]], np.ndarray]:
    """Deterministic signed character-trigram hashing embedder."""

    def embed(tokens: list[str]) -> np.ndarray:
        out = np.zeros((len(tokens), dim))
        for i, tok in enumerate(tokens):
            padded = f"#{tok}#"
            for k in range(len(padded) - 2):
                gram = padded[k : k + 3].encode()
                digest = hashlib.sha1(gram).digest()
                idx = int.from_bytes(digest[:4], "big") % dim
                sign = 1.0 if digest[4] & 1 else -1.0
                out[i, idx] += sign
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out

    return embed


def embed_sim(
    cands: Sequence[str],
    refs: Sequence[str],
    embedder: Callable[[list[str]], np.ndarray] | None = None,
) -> float | None:
    """Greedy cosine-matching F1 per pair, averaged. Returns ``None`` when
    the embedder is unavailable (metric absent, never zero)."""
    if len(cands) != len(refs):
        raise ContractError("candidate and reference lists differ in length")
    embedder = embedder or hashed_ngram_embedder()
    if not cands:
        return 0.0
    scores = []
    for c, r in zip(cands, refs):
        ct, rt = tokenize(c), tokenize(r)
        if not ct or not rt:
            scores.append(0.0)
            continue
        try:
            ce = embedder(ct)
            re_ = embedder(rt)
        except EmbedderUnavailable:
            return None
        sim = ce @ re_.T
        precision = float(sim.max(axis=1).mean())
        recall = float(sim.max(axis=0).mean())
        if precision + recall <= 0:
            scores.append(0.0)
        else:
            scores.append(2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Clinical efficacy
# --------------------------------------------------------------------------

def presence_matrix(
    labels: Sequence[FindingVector], vocab: Vocabulary, uncertain_as_positive: bool
) -> np.ndarray:
    out = np.zeros((len(labels), len(vocab)), dtype=bool)
    for i, fv in enumerate(labels):
        for name in fv.present(uncertain_as_positive):
            out[i, vocab.index(name)] = True
    return out


@dataclass
class CEResult:
    macro_f1: float
    per_class: dict[str, dict[str, float]]


def clinical_efficacy(
    pred_texts: Sequence[str],
    gt_texts: Sequence[str],
    labeler: RuleLabeler,
    uncertain_as_positive: bool = False,
    zero_support: str = "zero",
) -> CEResult:
    """Macro F1 between label vectors extracted from generated and reference
    reports; classes with zero predicted and zero gold positives contribute
    F1 = 0 unless ``zero_support='skip'``."""
    if len(pred_texts) != len(gt_texts):
        raise ContractError("prediction and reference lists differ in length")
    vocab = labeler.vocab
    pred = presence_matrix([labeler.extract(t) for t in pred_texts], vocab, uncertain_as_positive)
    gt = presence_matrix([labeler.extract(t) for t in gt_texts], vocab, uncertain_as_positive)
    stats = per_class_prf(pred, gt)
    per_class = {
        name: {
            "precision": float(stats["precision"][i]),
            "recall": float(stats["recall"][i]),
            "f1": float(stats["f1"][i]),
            "support": int(stats["support"][i]),
        }
        for i, name in enumerate(vocab.names)
    }
    return CEResult(macro_f1=macro_f1_binary(pred, gt, zero_support), per_class=per_class)


# --------------------------------------------------------------------------
# Answer extraction (text matching)
# --------------------------------------------------------------------------

def extract_answer(text: str, mode: str, vocab: Vocabulary | None = None):
    """Binary: word-boundary yes/no matching; both or neither -> ``None``
    (abstain). Complete: all vocabulary names occurring as lowercase
    substrings."""
    lowered = text.lower()
    if mode == "binary":
        import re

        has_yes = re.search(r"\byes\b", lowered) is not None
        has_no = re.search(r"\bno\b", lowered) is not None
        if has_yes == has_no:
            return None
        return has_yes
    if mode == "complete":
        vocab = vocab or Vocabulary()
        return {name for name in vocab.names if name.lower() in lowered}
    raise ContractError(f"unknown extraction mode {mode!r}")


# --------------------------------------------------------------------------
# Protocols over a model stack
# --------------------------------------------------------------------------

class DialogModel(Protocol):
    """What the evaluation protocols need from an inference stack."""

    def generate_report(self, study: ChestStudy, use_indication: bool = False) -> str: ...

    def continue_dialog(
        self,
        study: ChestStudy,
        turns_after_first: list[Turn],
        instruction: str,
        use_indication: bool = False,
    ) -> str: ...


@dataclass
class EvalSummary:
    ce_macro_f1: float
    bleu1: float
    bleu4: float
    rouge_l: float
    meteor: float
    embed_sim: float | None
    per_class: dict[str, dict[str, float]]
    n_studies: int
    n_failed: int = 0

    def to_dict(self) -> dict:
        return {
            "ce_macro_f1": self.ce_macro_f1,
            "bleu1": self.bleu1,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
            "embed_sim": self.embed_sim,
            "per_class": self.per_class,
            "n_studies": self.n_studies,
            "n_failed": self.n_failed,
        }

    def metrics(self) -> dict[str, float | None]:
        return {
            "ce_macro_f1": self.ce_macro_f1,
            "bleu1": self.bleu1,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
            "embed_sim": self.embed_sim,
        }


@dataclass
class EvalOptions:
    use_indication: bool = False
    uncertain_as_positive: bool = False
    zero_support: str = "zero"
    embedder: Callable[[list[str]], np.ndarray] | None = None
    seed: int = 0


def summarize_pairs(
    preds: Sequence[str],
    gts: Sequence[str],
    labeler: RuleLabeler,
    options: EvalOptions,
    n_failed: int = 0,
) -> EvalSummary:
    ce = clinical_efficacy(
        preds, gts, labeler, options.uncertain_as_positive, options.zero_support
    )
    return EvalSummary(
        ce_macro_f1=ce.macro_f1,
        bleu1=bleu(preds, gts, max_n=1),
        bleu4=bleu(preds, gts, max_n=4),
        rouge_l=rouge_l(preds, gts),
        meteor=meteor(preds, gts),
        embed_sim=embed_sim(preds, gts, options.embedder),
        per_class=ce.per_class,
        n_studies=len(preds),
        n_failed=n_failed,
    )


@dataclass
class EvalReport:
    summary: EvalSummary
    rows: list[dict] = field(default_factory=list)


def eval_report_generation(
    stack: DialogModel,
    studies: Sequence[ChestStudy],
    labeler: RuleLabeler,
    options: EvalOptions | None = None,
) -> EvalReport:
    """Generate one report per study and score it against the findings text."""
    options = options or EvalOptions()
    preds: list[str] = []
    gts: list[str] = []
    rows: list[dict] = []
    kept: list[ChestStudy] = []
    n_failed = 0
    for study in studies:
        try:
            pred = stack.generate_report(study, use_indication=options.use_indication)
        except Exception as exc:  # noqa: BLE001 - study-level isolation is the contract
            log.warning("generation failed for %s: %s", study.id, exc)
            n_failed += 1
            continue
        preds.append(pred)
        gts.append(study.findings_text)
        kept.append(study)
    summary = summarize_pairs(preds, gts, labeler, options, n_failed=n_failed)
    for study, pred in zip(kept, preds):
        pair_metrics = {
            "bleu1": bleu([pred], [study.findings_text], 1),
            "bleu4": bleu([pred], [study.findings_text], 4),
            "rouge_l": rouge_l([pred], [study.findings_text]),
            "meteor": meteor([pred], [study.findings_text]),
        }
        rows.append(
            {
                "study_id": study.id,
                "pred": pred,
                "gt": study.findings_text,
                "labels_pred": labeler.extract(pred).to_dict(),
                "labels_gt": study.gold_labels.to_dict(),
                "metrics": pair_metrics,
            }
        )
    return EvalReport(summary=summary, rows=rows)


@dataclass
class CorrectionReport:
    before: EvalSummary
    after: EvalSummary
    delta: dict[str, float | None]
    n_corrected: int
    rows: list[dict] = field(default_factory=list)


def eval_correction(
    stack: DialogModel,
    studies: Sequence[ChestStudy],
    labeler: RuleLabeler,
    builder: PromptBuilder | None = None,
    options: EvalOptions | None = None,
) -> CorrectionReport:
    """Report generation, then one correction turn per study whose predicted
    labels disagree with gold; delta = after - before for every metric."""
    options = options or EvalOptions()
    builder = builder or PromptBuilder(labeler.vocab)
    rng = random.Random(options.seed)
    before_preds: list[str] = []
    after_preds: list[str] = []
    gts: list[str] = []
    rows: list[dict] = []
    n_corrected = 0
    n_failed = 0
    for study in studies:
        try:
            report = stack.generate_report(study, use_indication=options.use_indication)
        except Exception as exc:  # noqa: BLE001
            log.warning("generation failed for %s: %s", study.id, exc)
            n_failed += 1
            continue
        diff = diff_labels(
            labeler.extract(report), study.gold_labels, options.uncertain_as_positive
        )
        corrected = report
        instruction = None
        if not diff.empty:
            instruction = builder.sample_correction_instruction(diff.to_add, diff.to_remove, rng)
            corrected = stack.continue_dialog(
                study, [Turn("assistant", report)], instruction,
                use_indication=options.use_indication,
            )
            n_corrected += 1
        before_preds.append(report)
        after_preds.append(corrected)
        gts.append(study.findings_text)
        rows.append(
            {
                "study_id": study.id,
                "pred": report,
                "corrected": corrected,
                "instruction": instruction,
                "gt": study.findings_text,
            }
        )
    before = summarize_pairs(before_preds, gts, labeler, options, n_failed=n_failed)
    after = summarize_pairs(after_preds, gts, labeler, options, n_failed=n_failed)
    delta = {}
    for key, value in before.metrics().items():
        after_value = after.metrics()[key]
        delta[key] = None if value is None or after_value is None else after_value - value
    return CorrectionReport(
        before=before, after=after, delta=delta, n_corrected=n_corrected, rows=rows
    )


@dataclass
class QAResult:
    f1: float
    precision: float
    recall: float
    n_decisions: int
    n_abstain: int


def eval_findings_qa(
    stack: DialogModel,
    studies: Sequence[ChestStudy],
    mode: str,
    builder: PromptBuilder | None = None,
    options: EvalOptions | None = None,
) -> QAResult:
    """After report generation, pose one findings question per study and
    score extracted answers micro-averaged over (study, label) decisions;
    abstentions count as incorrect."""
    if mode not in ("binary", "complete"):
        raise ContractError(f"unknown findings-QA mode {mode!r}")
    options = options or EvalOptions()
    builder = builder or PromptBuilder()
    vocab = builder.vocab
    rng = random.Random(options.seed)
    tp = fp = fn = 0
    n_decisions = 0
    n_abstain = 0
    for study in studies:
        report = stack.generate_report(study, use_indication=options.use_indication)
        gold_present = study.gold_labels.present(options.uncertain_as_positive)
        if mode == "binary":
            positives = [n for n in vocab.pathology_names if n in gold_present]
            non_pos = [n for n in vocab.pathology_names if n not in gold_present]
            pool = (positives if rng.random() < 0.5 else non_pos) if positives and non_pos else (positives or non_pos)
            name = rng.choice(pool)
            instruction = builder.sample_instruction("binary_qa", {"PATHOLOGY": name}, rng)
            answer = stack.continue_dialog(
                study, [Turn("assistant", report)], instruction,
                use_indication=options.use_indication,
            )
            pred = extract_answer(answer, "binary")
            gold = name in gold_present
            n_decisions += 1
            if pred is None:
                n_abstain += 1
                pred = not gold  # abstain scores as the wrong answer
            if pred and gold:
                tp += 1
            elif pred and not gold:
                fp += 1
            elif not pred and gold:
                fn += 1
        else:
            instruction = builder.sample_instruction("complete_qa", {}, rng)
            answer = stack.continue_dialog(
                study, [Turn("assistant", report)], instruction,
                use_indication=options.use_indication,
            )
            predicted = extract_answer(answer, "complete", vocab)
            for name in vocab.names:
                n_decisions += 1
                p = name in predicted
                g = name in gold_present
                if p and g:
                    tp += 1
                elif p and not g:
                    fp += 1
                elif g and not p:
                    fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return QAResult(f1=f1, precision=precision, recall=recall,
                    n_decisions=n_decisions, n_abstain=n_abstain)


# --------------------------------------------------------------------------
# Result files
# --------------------------------------------------------------------------

def write_eval_outputs(
    report: EvalReport, out_dir: str | Path, csv_export: bool = False
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(
        json.dumps(report.summary.to_dict(), indent=2, sort_keys=True), "utf-8"
    )
    with open(out_dir / "per_study.jsonl", "w", encoding="utf-8") as f:
        for row in report.rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    if csv_export and report.rows:
        with open(out_dir / "per_study.csv", "w", newline="", encoding="utf-8") as f:
            fields = ["study_id", "bleu1", "bleu4", "rouge_l", "meteor"]
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for row in report.rows:
                writer.writerow({"study_id": row["study_id"], **row["metrics"]})
    return out_dir / "summary.json"
