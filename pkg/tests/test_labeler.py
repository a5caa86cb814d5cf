import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radassist.labeler import (
    LabelDiff,
    LabelerUnavailable,
    RuleLabeler,
    RuleTableError,
    VocabularyMismatch,
    diff_labels,
    external_labeler_adapter,
)
from radassist.vocab import NO_FINDING, FindingVector, Status, Vocabulary

VOCAB = Vocabulary()


def fv(**by_name) -> FindingVector:
    return FindingVector.from_statuses(
        VOCAB, {k.replace("_", " "): Status(v) for k, v in by_name.items()}
    )


class TestExtract:
    def test_empty_text_all_blank(self, rule_labeler):
        assert rule_labeler.extract("") == FindingVector.all_blank(VOCAB)
        assert rule_labeler.extract("   \n ") == FindingVector.all_blank(VOCAB)

    def test_positive_and_negative(self, rule_labeler):
        got = rule_labeler.extract("There is mild cardiomegaly. No pneumothorax.")
        assert got["Cardiomegaly"] is Status.POSITIVE
        assert got["Pneumothorax"] is Status.NEGATIVE
        for name in VOCAB.pathology_names:
            if name not in ("Cardiomegaly", "Pneumothorax"):
                assert got[name] is Status.BLANK

    def test_uncertainty_cue(self, rule_labeler):
        got = rule_labeler.extract("Pleural effusion cannot be excluded.")
        assert got["Pleural Effusion"] is Status.UNCERTAIN

    def test_may_cue(self, rule_labeler):
        got = rule_labeler.extract("There may be edema.")
        assert got["Edema"] is Status.UNCERTAIN

    def test_coordinated_negation(self, rule_labeler):
        got = rule_labeler.extract("No pneumothorax or pleural effusion.")
        assert got["Pneumothorax"] is Status.NEGATIVE
        assert got["Pleural Effusion"] is Status.NEGATIVE

    def test_case_and_whitespace_insensitive(self, rule_labeler):
        a = rule_labeler.extract("THERE IS EDEMA.")
        b = rule_labeler.extract("there is edema.   ")
        assert a == b
        assert a["Edema"] is Status.POSITIVE

    def test_no_finding_derived(self, rule_labeler):
        got = rule_labeler.extract("No pneumonia is seen.")
        assert got[NO_FINDING] is Status.POSITIVE
        got = rule_labeler.extract("There is pneumonia.")
        assert got[NO_FINDING] is Status.BLANK

    def test_deterministic(self, rule_labeler, small_corpus):
        for study in small_corpus[:5]:
            assert rule_labeler.extract(study.findings_text) == rule_labeler.extract(
                study.findings_text
            )

    def test_rule_table_must_cover_vocabulary(self):
        with pytest.raises(RuleTableError):
            RuleLabeler(VOCAB, {"labels": {"Edema": {"patterns": ["edema"]}}})


class TestDiff:
    def test_identical_empty(self):
        x = fv(Edema="pos", Pneumonia="neg")
        assert diff_labels(x, x) == LabelDiff(frozenset(), frozenset())

    def test_hypothesis_extra_label(self):
        ref = fv()
        hyp = fv(Edema="pos")
        d = diff_labels(hyp, ref)
        assert d.to_remove == {"Edema"} and not (d.to_add - {NO_FINDING})

    def test_set_algebra(self):
        ref = fv(Edema="pos", **{"Pleural_Effusion": "pos"})
        hyp = fv(Pneumonia="pos", **{"Pleural_Effusion": "pos"})
        d = diff_labels(hyp, ref)
        assert d.to_add == {"Edema"} and d.to_remove == {"Pneumonia"}

    def test_uncertain_policy(self):
        ref = fv(Edema="unc")
        hyp = fv()
        assert diff_labels(hyp, ref).to_add == set()
        assert diff_labels(hyp, ref, uncertain_as_positive=True).to_add == {"Edema"}

    def test_vocab_mismatch(self):
        other = Vocabulary(["A", "B"])
        with pytest.raises(VocabularyMismatch):
            diff_labels(fv(), FindingVector.all_blank(other))

    @given(
        st.lists(st.sampled_from(VOCAB.names), max_size=5),
        st.lists(st.sampled_from(VOCAB.names), max_size=5),
    )
    @settings(max_examples=50, deadline=None)
    def test_antisymmetry(self, a_names, b_names):
        a = FindingVector.from_statuses(VOCAB, {n: Status.POSITIVE for n in a_names})
        b = FindingVector.from_statuses(VOCAB, {n: Status.POSITIVE for n in b_names})
        assert diff_labels(a, b).to_add == diff_labels(b, a).to_remove
        assert diff_labels(a, a).empty


class TestExternalAdapter:
    def _transport_echoing(self, statuses: dict[str, str]):
        def handler(request: httpx.Request) -> httpx.Response:
            texts = request.read() and __import__("json").loads(request.read())["texts"]
            return httpx.Response(200, json={"labels": [statuses for _ in texts]})

        return httpx.MockTransport(handler)

    def test_stub_endpoint_round_trip(self):
        statuses = FindingVector.from_statuses(VOCAB, {"Edema": Status.POSITIVE}).to_dict()
        adapter = external_labeler_adapter(
            "http://labeler.test/label", transport=self._transport_echoing(statuses)
        )
        got = adapter("anything")
        assert got == FindingVector.from_dict(VOCAB, statuses)

    def test_unreachable_endpoint(self):
        def handler(request):
            raise httpx.ConnectError("refused")

        adapter = external_labeler_adapter(
            "http://down.test/label", transport=httpx.MockTransport(handler)
        )
        with pytest.raises(LabelerUnavailable):
            adapter("text")

    def test_never_silently_blank_on_bad_payload(self):
        def handler(request):
            return httpx.Response(200, json={"labels": "nope"})

        adapter = external_labeler_adapter(
            "http://bad.test/label", transport=httpx.MockTransport(handler)
        )
        with pytest.raises(LabelerUnavailable):
            adapter("text")

    def test_adapter_matches_rule_labeler_with_rule_backend(self, small_corpus, rule_labeler):
        # stub backend that itself runs the rule labeler server-side
        def handler(request: httpx.Request) -> httpx.Response:
            import json as _json

            texts = _json.loads(request.read())["texts"]
            return httpx.Response(
                200, json={"labels": [rule_labeler.extract(t).to_dict() for t in texts]}
            )

        adapter = external_labeler_adapter(
            "http://rules.test/label", transport=httpx.MockTransport(handler)
        )
        for study in small_corpus[:10]:
            assert adapter(study.findings_text) == rule_labeler.extract(study.findings_text)
