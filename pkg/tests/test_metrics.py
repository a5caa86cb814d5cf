"""Metric tests against independent brute-force oracles.

The oracle implementations below are written from the metric definitions
directly (plain loops, exhaustive search where feasible) and share no code
with the package implementations.
"""

import itertools
import math
from collections import Counter

import pytest

from radassist.corpus import synth_corpus
from radassist.evaluation import (
    EmbedderUnavailable,
    bleu,
    clinical_efficacy,
    embed_sim,
    extract_answer,
    hashed_ngram_embedder,
    meteor,
    rouge_l,
    tokenize,
)
from radassist.labeler import RuleLabeler
from radassist.vocab import Vocabulary

# --------------------------------------------------------------------------
# Brute-force oracles
# --------------------------------------------------------------------------

def oracle_bleu(cands, refs, max_n):
    cand_toks = [tokenize(c) for c in cands]
    ref_toks = [tokenize(r) for r in refs]
    c_len = sum(len(t) for t in cand_toks)
    r_len = sum(len(t) for t in ref_toks)
    if c_len == 0:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        clipped = 0
        total = 0
        for ct, rt in zip(cand_toks, ref_toks):
            c_ngrams = [tuple(ct[i : i + n]) for i in range(len(ct) - n + 1)]
            r_ngrams = [tuple(rt[i : i + n]) for i in range(len(rt) - n + 1)]
            r_counts = Counter(r_ngrams)
            for gram, count in Counter(c_ngrams).items():
                clipped += min(count, r_counts.get(gram, 0))
            total += len(c_ngrams)
        if total == 0 or clipped == 0:
            return 0.0
        precisions.append(clipped / total)
    geo = math.exp(sum(math.log(p) for p in precisions) / max_n)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * geo


def oracle_lcs(a, b):
    # memoized recursion, distinct from the iterative DP in the package
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))

    return rec(0, 0)


def oracle_rouge_l(cands, refs, beta=1.2):
    scores = []
    for c, r in zip(cands, refs):
        ct, rt = tuple(tokenize(c)), tuple(tokenize(r))
        if not ct or not rt:
            scores.append(0.0)
            continue
        lcs = oracle_lcs(ct, rt)
        if lcs == 0:
            scores.append(0.0)
            continue
        p = lcs / len(ct)
        rec = lcs / len(rt)
        scores.append((1 + beta**2) * rec * p / (rec + beta**2 * p))
    return sum(scores) / len(scores)


def oracle_min_chunks(cand, ref):
    """Exhaustive minimal chunk count over all maximal exact alignments."""
    c_counts = Counter(cand)
    r_counts = Counter(ref)
    budget = {w: min(c_counts[w], r_counts[w]) for w in c_counts if w in r_counts}
    m = sum(budget.values())
    if m == 0:
        return 0
    # choose which candidate occurrences participate, then which ref slots
    best = math.inf
    cand_positions = {w: [i for i, t in enumerate(cand) if t == w] for w in budget}
    ref_positions = {w: [j for j, t in enumerate(ref) if t == w] for w in budget}

    def alignments():
        word_choices = []
        for w, k in budget.items():
            pairs = []
            for c_sel in itertools.combinations(cand_positions[w], k):
                for r_perm in itertools.permutations(ref_positions[w], k):
                    pairs.append(list(zip(c_sel, r_perm)))
            word_choices.append(pairs)
        for combo in itertools.product(*word_choices):
            yield sorted(p for group in combo for p in group)

    for alignment in alignments():
        chunks = 0
        prev = (-2, -2)
        for ci, rj in alignment:
            if not (ci == prev[0] + 1 and rj == prev[1] + 1):
                chunks += 1
            prev = (ci, rj)
        best = min(best, chunks)
    return best


def oracle_meteor(cands, refs, alpha=0.9, beta=3.0, gamma=0.5):
    scores = []
    for c, r in zip(cands, refs):
        ct, rt = tokenize(c), tokenize(r)
        c_counts, r_counts = Counter(ct), Counter(rt)
        m = sum(min(c_counts[w], r_counts[w]) for w in c_counts if w in r_counts)
        if m == 0:
            scores.append(0.0)
            continue
        p = m / len(ct)
        rec = m / len(rt)
        f_mean = p * rec / (alpha * p + (1 - alpha) * rec)
        chunks = oracle_min_chunks(ct, rt)
        scores.append(f_mean * (1 - gamma * (chunks / m) ** beta))
    return sum(scores) / len(scores)


def oracle_ce_macro_f1(pred_texts, gt_texts, labeler):
    vocab = labeler.vocab
    f1s = []
    for name in vocab.names:
        tp = fp = fn = 0
        for p_text, g_text in zip(pred_texts, gt_texts):
            p = name in labeler.extract(p_text).present()
            g = name in labeler.extract(g_text).present()
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif g and not p:
                fn += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return sum(f1s) / len(f1s)


# --------------------------------------------------------------------------
# Fixture pairs (>= 20, mixing grammar-like and adversarial cases)
# --------------------------------------------------------------------------

FIXTURE_PAIRS = [
    ("the cat sat on the mat", "the cat sat on a mat"),
    ("There is edema. No pneumonia is seen.", "There is edema. No pneumonia is seen."),
    ("There is edema.", "No edema is seen."),
    ("a b c d", "a c d e f"),
    ("a b c d e", "a c b d e"),
    ("the heart is enlarged", "cardiomegaly is present"),
    ("no acute findings", "no acute cardiopulmonary findings"),
    ("word", "word"),
    ("one two three", "three two one"),
    ("alpha beta gamma delta", "alpha beta gamma delta epsilon"),
    ("repeat repeat repeat", "repeat"),
    ("x", "y"),
    ("There is a pleural effusion. There is consolidation.", "There is consolidation."),
    ("No fracture is seen. No pneumothorax is seen.", "No pneumothorax is seen. No fracture is seen."),
    ("the the the cat", "the cat"),
    ("completely different words here", "nothing shared at all"),
    ("a quick brown fox jumps", "the quick brown fox jumped"),
    ("There is cardiomegaly.", "There is cardiomegaly. There is edema."),
    ("punctuation, matters: here.", "punctuation matters here"),
    ("single", "single token match only"),
    ("Lungs are clear without consolidation.", "Lungs remain clear."),
    ("a b", "b a"),
    ("There is a lung opacity. No edema is seen.", "There is a lung opacity. There is edema."),
    ("support device in place", "a support device is in place"),
]


class TestBleu:
    def test_identity_is_one(self):
        assert bleu(["the cat sat"], ["the cat sat"], 1) == pytest.approx(1.0)
        assert bleu(["the cat sat on a mat"], ["the cat sat on a mat"], 4) == pytest.approx(1.0)

    def test_no_overlap_is_zero(self):
        assert bleu(["aaa bbb"], ["ccc ddd"], 1) == 0.0
        assert bleu(["aaa bbb"], ["ccc ddd"], 4) == 0.0

    def test_hand_counted_bleu4(self):
        # p1=5/6 p2=3/5 p3=2/4 p4=1/3, BP=1 -> (1/12)^(1/4)
        got = bleu(["the cat sat on the mat"], ["the cat sat on a mat"], 4)
        assert got == pytest.approx((1.0 / 12.0) ** 0.25, abs=1e-12)

    def test_empty_candidates(self):
        assert bleu([""], ["ref text"], 4) == 0.0
        assert bleu([], [], 4) == 0.0

    def test_brevity_penalty(self):
        # cand shorter than ref: BP = exp(1 - r/c) = exp(1 - 4/2)
        got = bleu(["a b"], ["a b c d"], 1)
        assert got == pytest.approx(math.exp(-1.0), abs=1e-12)

    @pytest.mark.parametrize("max_n", [1, 4])
    def test_matches_oracle_on_fixtures(self, max_n):
        cands = [c for c, _ in FIXTURE_PAIRS]
        refs = [r for _, r in FIXTURE_PAIRS]
        assert bleu(cands, refs, max_n) == pytest.approx(
            oracle_bleu(cands, refs, max_n), abs=1e-9
        )
        for c, r in FIXTURE_PAIRS:
            assert bleu([c], [r], max_n) == pytest.approx(
                oracle_bleu([c], [r], max_n), abs=1e-9
            )


class TestRougeL:
    def test_identity_and_disjoint(self):
        assert rouge_l(["a b c"], ["a b c"]) == pytest.approx(1.0)
        assert rouge_l(["a b"], ["c d"]) == 0.0

    def test_hand_built_five_token_pair(self):
        # cand "a b c d" vs ref "a c d e f": LCS=3, P=3/4, R=3/5
        p, r, b2 = 0.75, 0.6, 1.2**2
        expected = (1 + b2) * r * p / (r + b2 * p)
        assert rouge_l(["a b c d"], ["a c d e f"]) == pytest.approx(expected, abs=1e-12)

    def test_matches_oracle_on_fixtures(self):
        for c, r in FIXTURE_PAIRS:
            assert rouge_l([c], [r]) == pytest.approx(oracle_rouge_l([c], [r]), abs=1e-9)

    def test_appending_reference_never_decreases_recall_component(self):
        for c, r in FIXTURE_PAIRS[:10]:
            base_lcs = oracle_lcs(tuple(tokenize(c)), tuple(tokenize(r)))
            appended = oracle_lcs(tuple(tokenize(c + " " + r)), tuple(tokenize(r)))
            assert appended >= base_lcs


class TestMeteor:
    def test_no_match_zero(self):
        assert meteor(["aaa"], ["bbb"]) == 0.0

    def test_identity_formula(self):
        # m tokens in one chunk: score = 1 - gamma * (1/m)^beta
        text = "one two three four five six"
        m = 6
        assert meteor([text], [text]) == pytest.approx(1 - 0.5 * (1 / m) ** 3, abs=1e-12)

    def test_hand_built_partial_match(self):
        # cand "a b x" vs ref "a b y": m=2, P=2/3, R=2/3, one chunk
        p = r = 2 / 3
        f_mean = p * r / (0.9 * p + 0.1 * r)
        expected = f_mean * (1 - 0.5 * (1 / 2) ** 3)
        assert meteor(["a b x"], ["a b y"]) == pytest.approx(expected, abs=1e-12)

    def test_matches_oracle_on_fixtures(self):
        for c, r in FIXTURE_PAIRS:
            assert meteor([c], [r]) == pytest.approx(oracle_meteor([c], [r]), abs=1e-6), (c, r)


class TestEmbedSim:
    def test_identity_is_one(self):
        assert embed_sim(["alpha beta"], ["alpha beta"]) == pytest.approx(1.0)

    def test_disjoint_character_sets_low(self):
        got = embed_sim(["aaa bbb ccc"], ["xyz wvu qrs"])
        assert got is not None and got < 0.2

    def test_embedder_unavailable_reports_absent(self):
        def broken(tokens):
            raise EmbedderUnavailable("offline")

        assert embed_sim(["a"], ["a"], embedder=broken) is None

    def test_swapping_embedder_does_not_touch_other_metrics(self):
        cands = ["the cat sat"]
        refs = ["the cat sat on a mat"]
        before = (bleu(cands, refs, 1), rouge_l(cands, refs), meteor(cands, refs))
        other = hashed_ngram_embedder(dim=16)
        _ = embed_sim(cands, refs, embedder=other)
        after = (bleu(cands, refs, 1), rouge_l(cands, refs), meteor(cands, refs))
        assert before == after


class TestClinicalEfficacy:
    @pytest.fixture(scope="class")
    def labeler(self):
        return RuleLabeler()

    def test_perfect_predictions(self, labeler):
        # prevalence 0.5 covers the pathologies; all-clear studies cover the
        # derived all-clear label, so every class has support
        studies = synth_corpus(seed=13, n=20, label_prevalences=0.5, image_size=16)
        studies += synth_corpus(seed=14, n=2, label_prevalences=0.0, image_size=16)
        texts = [s.findings_text for s in studies]
        gt = [labeler.extract(t).present() for t in texts]
        covered = set().union(*gt)
        assert covered == set(labeler.vocab.names)
        result = clinical_efficacy(texts, texts, labeler)
        assert result.macro_f1 == 1.0

    def test_all_wrong_is_zero(self, labeler):
        studies = synth_corpus(seed=14, n=10, label_prevalences=0.6, image_size=16)
        gts = [s.findings_text for s in studies]
        preds = [""] * len(gts)
        result = clinical_efficacy(preds, gts, labeler)
        assert result.macro_f1 == 0.0

    def test_hand_built_confusion_case(self, labeler):
        preds = [
            "There is edema.",
            "There is edema. There is pneumonia.",
            "No edema is seen.",
            "There is cardiomegaly.",
            "There is pneumonia.",
            "There is edema.",
        ]
        gts = [
            "There is edema.",
            "There is pneumonia.",
            "There is edema.",
            "There is cardiomegaly.",
            "No pneumonia is seen.",
            "No edema is seen. There is cardiomegaly.",
        ]
        result = clinical_efficacy(preds, gts, labeler)
        assert result.macro_f1 == pytest.approx(oracle_ce_macro_f1(preds, gts, labeler), abs=1e-9)
        # spot-check one class by hand: Edema tp=1 fp=2 fn=1 -> P=1/3 R=1/2 F1=0.4
        assert result.per_class["Edema"]["f1"] == pytest.approx(0.4)

    def test_matches_oracle_on_synthetic(self, labeler):
        studies = synth_corpus(seed=15, n=12, label_prevalences=0.3, image_size=16)
        gts = [s.findings_text for s in studies]
        preds = gts[3:] + gts[:3]  # misaligned predictions
        result = clinical_efficacy(preds, gts, labeler)
        assert result.macro_f1 == pytest.approx(oracle_ce_macro_f1(preds, gts, labeler), abs=1e-9)

    def test_formatting_invariance(self, labeler):
        gts = ["There is edema. No pneumonia is seen."]
        preds_a = ["there is edema.   no pneumonia is seen."]
        preds_b = ["THERE IS EDEMA. NO PNEUMONIA IS SEEN."]
        a = clinical_efficacy(preds_a, gts, labeler).macro_f1
        b = clinical_efficacy(preds_b, gts, labeler).macro_f1
        assert a == b


class TestExtractAnswer:
    CASES_BINARY = [
        ("Yes, there is evidence of edema.", True),
        ("yes", True),
        ("The answer is yes.", True),
        ("YES.", True),
        ("Absolutely, yes, visible markers.", True),
        ("No, the lungs are clear.", False),
        ("no", False),
        ("There is no pneumothorax.", False),
        ("No.", False),
        ("I would say no here.", False),
        ("unclear", None),
        ("", None),
        ("maybe", None),
        ("yes and no", None),
        ("No... but also yes?", None),
        ("normal findings throughout", None),  # 'no' inside words must not count
        ("pneumothorax noted", None),
        ("eyes are fine", None),  # 'yes' inside a word must not count
    ]

    @pytest.mark.parametrize("text,expected", CASES_BINARY)
    def test_binary_cases(self, text, expected):
        assert extract_answer(text, "binary") is expected if expected is None else extract_answer(
            text, "binary"
        ) == expected

    CASES_COMPLETE = [
        ("the findings are pleural effusion and edema", {"Pleural Effusion", "Edema"}),
        ("Edema, Cardiomegaly.", {"Edema", "Cardiomegaly"}),
        ("no finding", {"No Finding"}),
        ("PNEUMONIA and fracture visible", {"Pneumonia", "Fracture"}),
        ("nothing remarkable", set()),
        ("support devices and pneumothorax", {"Support Devices", "Pneumothorax"}),
        ("lung opacity with lung lesion", {"Lung Opacity", "Lung Lesion"}),
        ("enlarged cardiomediastinum", {"Enlarged Cardiomediastinum"}),
        ("pleural other changes", {"Pleural Other"}),
        ("atelectasis, consolidation, edema", {"Atelectasis", "Consolidation", "Edema"}),
        ("", set()),
        ("cardiomegaly cardiomegaly", {"Cardiomegaly"}),
    ]

    @pytest.mark.parametrize("text,expected", CASES_COMPLETE)
    def test_complete_cases(self, text, expected):
        assert extract_answer(text, "complete", Vocabulary()) == expected


def test_metric_determinism():
    cands = [c for c, _ in FIXTURE_PAIRS]
    refs = [r for _, r in FIXTURE_PAIRS]
    for fn in (lambda: bleu(cands, refs, 4), lambda: rouge_l(cands, refs),
               lambda: meteor(cands, refs), lambda: embed_sim(cands, refs)):
        assert fn() == fn()
