import numpy as np
import pytest
import torch
import torch.nn.functional as F

from radassist.adapt import (
    AdaptedLM,
    AdapterTrainConfig,
    BaseTrainConfig,
    DecodeConfig,
    EncodedExample,
    LMConfig,
    LoRAConfig,
    LowRankDelta,
    RemoteClient,
    ToyLM,
    adapted_forward,
    base_weight_digest,
    generate,
    lm_client,
    lm_loss,
    load_adapted_lm,
    load_base_lm,
    merge_delta,
    train_adapter,
    train_base_lm,
    trainable_fraction,
)
from radassist.errors import ConfigError, ContractError, StateError
from radassist.tokenizer import WordTokenizer

TEXTS = [
    "There is edema.",
    "No pneumonia is seen.",
    "There is a fracture.",
    "No cardiomegaly is seen.",
]
PROMPT = "USER: write the report\nASSISTANT:"


@pytest.fixture(scope="module")
def tokenizer():
    return WordTokenizer.build(
        TEXTS + [PROMPT, "Image information: <IMG>. hello", "question answer yes no"]
    )


def _examples(tokenizer, texts=TEXTS):
    return [
        EncodedExample(prompt_ids=tokenizer.encode(PROMPT), target_ids=tokenizer.encode(t))
        for t in texts
    ]


@pytest.fixture(scope="module")
def base_ckpt(tokenizer, tmp_path_factory):
    out = tmp_path_factory.mktemp("lm") / "base"
    cfg = BaseTrainConfig(
        epochs=80, batch_size=4, lr=3e-3,
        model=LMConfig(d_model=64, layers=2, heads=4, max_seq_len=96, seed=0), seed=0,
    )
    train_base_lm(_examples(tokenizer), tokenizer, cfg, out)
    return out


class TestDeltaAlgebra:
    def test_zero_delta_is_identity(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(6, 5))
        x = rng.normal(size=5)
        delta = LowRankDelta(A=rng.normal(size=(2, 5)), B=np.zeros((6, 2)), rank=2, alpha=8.0)
        assert np.allclose(adapted_forward(W, delta, x), W @ x)
        assert np.allclose(merge_delta(W, delta), W)

    def test_alpha_zero_is_identity(self):
        rng = np.random.default_rng(1)
        W = rng.normal(size=(4, 4))
        x = rng.normal(size=4)
        delta = LowRankDelta(
            A=rng.normal(size=(2, 4)), B=rng.normal(size=(4, 2)), rank=2, alpha=0.0
        )
        assert np.allclose(adapted_forward(W, delta, x), W @ x)

    def test_split_equals_dense_merge(self):
        rng = np.random.default_rng(2)
        W = rng.normal(size=(8, 8))
        delta = LowRankDelta(
            A=rng.normal(size=(2, 8)), B=rng.normal(size=(8, 2)), rank=2, alpha=4.0
        )
        for _ in range(100):
            x = rng.normal(size=8)
            assert np.abs(adapted_forward(W, delta, x) - merge_delta(W, delta) @ x).max() < 1e-6

    def test_delta_rank_bounded(self):
        rng = np.random.default_rng(3)
        W = rng.normal(size=(10, 10))
        delta = LowRankDelta(
            A=rng.normal(size=(3, 10)), B=rng.normal(size=(10, 3)), rank=3, alpha=6.0
        )
        diff = merge_delta(W, delta) - W
        assert np.linalg.matrix_rank(diff, tol=1e-9) <= 3

    def test_invalid_rank_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ContractError):
            LowRankDelta(A=rng.normal(size=(5, 4)), B=rng.normal(size=(4, 5)), rank=5, alpha=1.0)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        delta = LowRankDelta(A=rng.normal(size=(2, 4)), B=rng.normal(size=(6, 2)), rank=2, alpha=1.0)
        with pytest.raises(ContractError):
            adapted_forward(rng.normal(size=(6, 5)), delta, rng.normal(size=5))


class TestAdapterTraining:
    def test_base_digest_unchanged_and_fraction_bounded(self, tokenizer, base_ckpt, tmp_path):
        before = base_weight_digest(load_base_lm(base_ckpt))
        cfg = AdapterTrainConfig(
            epochs=2, batch_size=2, lr=1e-3, val_fraction=0.25,
            lora=LoRAConfig(rank=2), seed=0,
        )
        out = train_adapter(_examples(tokenizer), base_ckpt, cfg, tmp_path / "ad")
        model = load_adapted_lm(base_ckpt, out)
        assert base_weight_digest(model) == before
        assert trainable_fraction(model) <= 0.02

    def test_zero_epochs_adapter_is_zero_map(self, tokenizer, base_ckpt, tmp_path):
        cfg = AdapterTrainConfig(epochs=0, lora=LoRAConfig(rank=2), val_fraction=0.0, seed=0)
        out = train_adapter(_examples(tokenizer), base_ckpt, cfg, tmp_path / "ad0")
        model = load_adapted_lm(base_ckpt, out)
        base = load_base_lm(base_ckpt)
        # all LoRA B matrices start at zero, so the adapted model equals the base
        text_a = generate(model, PROMPT, decode=DecodeConfig(max_new_tokens=10))
        text_b = generate(base, PROMPT, decode=DecodeConfig(max_new_tokens=10))
        assert text_a == text_b

    @pytest.mark.slow
    def test_eight_sample_overfit_target_loss(self, tmp_path):
        texts = TEXTS + [
            "There is a pleural effusion.",
            "No atelectasis is seen.",
            "There is consolidation.",
            "No lung opacity is seen.",
        ]
        prompts = [f"USER: write the report for case {i}\nASSISTANT:" for i in range(8)]
        tok = WordTokenizer.build(texts + prompts)
        base_out = tmp_path / "base"
        # base learns the report language from generic prompts; the pairing of
        # case number to report is left entirely to the adapter
        base_examples = [
            EncodedExample(
                prompt_ids=tok.encode("USER: write a report\nASSISTANT:"),
                target_ids=tok.encode(t),
            )
            for t in texts
        ]
        train_base_lm(
            base_examples, tok,
            BaseTrainConfig(
                epochs=40, batch_size=8, lr=3e-3,
                model=LMConfig(d_model=64, layers=2, heads=4, max_seq_len=96, seed=1), seed=1,
            ),
            base_out,
        )
        examples = [
            EncodedExample(prompt_ids=tok.encode(p), target_ids=tok.encode(t))
            for p, t in zip(prompts, texts)
        ]
        cfg = AdapterTrainConfig(
            epochs=500, batch_size=8, lr=5e-3, val_fraction=0.0, patience=10_000,
            lora=LoRAConfig(rank=4), max_trainable_fraction=0.05, seed=1,
        )
        out = train_adapter(examples, base_out, cfg, tmp_path / "ad8")
        model = load_adapted_lm(base_out, out)
        with torch.no_grad():
            losses = [lm_loss(model, [ex], mask_prompt=True).item() for ex in examples]
        assert float(np.mean(losses)) < 0.1, losses

    def test_empty_dataset_rejected(self, base_ckpt, tmp_path):
        with pytest.raises(ConfigError):
            train_adapter([], base_ckpt, AdapterTrainConfig(), tmp_path / "x")

    def test_fraction_bound_enforced(self, tokenizer, base_ckpt, tmp_path):
        cfg = AdapterTrainConfig(
            epochs=1, lora=LoRAConfig(rank=32), max_trainable_fraction=0.02, seed=0,
        )
        with pytest.raises(ConfigError, match="fraction"):
            train_adapter(_examples(tokenizer), base_ckpt, cfg, tmp_path / "big")


class TestLossMasking:
    def test_prompt_positions_excluded_from_loss(self, tokenizer):
        torch.manual_seed(0)
        model = AdaptedLM(
            ToyLM(LMConfig(d_model=32, layers=1, heads=2, max_seq_len=64, seed=0), len(tokenizer)),
            tokenizer,
        )
        ex = _examples(tokenizer)[0]
        got = lm_loss(model, [ex], mask_prompt=True).item()
        # independent oracle: per-position CE over target+eos positions only
        seq = [tokenizer.bos_id] + ex.prompt_ids + ex.target_ids + [tokenizer.eos_id]
        ids = torch.tensor([seq[:-1]])
        with torch.no_grad():
            logits, _ = model(ids)
        total = 0.0
        count = 0
        for j in range(len(ex.prompt_ids), len(seq) - 1):
            total += F.cross_entropy(logits[0, j][None], torch.tensor([seq[j + 1]])).item()
            count += 1
        assert got == pytest.approx(total / count, rel=1e-5)

    def test_prompt_label_values_do_not_matter(self, tokenizer):
        # same inputs, identical target alignment, different prompt content macro:
        # masked prompt positions contribute nothing, so losses differ only
        # through the hidden states, never through prompt-position labels
        from radassist.adapt import IGNORE_INDEX, _collate

        ex = _examples(tokenizer)[0]
        ids, labels, _ = _collate([ex], tokenizer, 32, mask_prompt=True)
        n_prompt = len(ex.prompt_ids)
        assert torch.all(labels[0, :n_prompt] == IGNORE_INDEX)
        assert torch.all(labels[0, n_prompt : n_prompt + len(ex.target_ids) + 1] != IGNORE_INDEX)


class TestGeneration:
    def test_greedy_deterministic(self, base_ckpt):
        model = load_base_lm(base_ckpt)
        a = generate(model, PROMPT, decode=DecodeConfig(max_new_tokens=16))
        b = generate(model, PROMPT, decode=DecodeConfig(max_new_tokens=16))
        assert a == b

    def test_max_new_tokens_zero_empty(self, base_ckpt):
        model = load_base_lm(base_ckpt)
        assert generate(model, PROMPT, decode=DecodeConfig(max_new_tokens=0)) == ""

    def test_memorization_verbatim(self, base_ckpt):
        model = load_base_lm(base_ckpt)
        out = generate(model, PROMPT, decode=DecodeConfig(max_new_tokens=24))
        assert out in TEXTS

    def test_stop_sequences(self, base_ckpt):
        model = load_base_lm(base_ckpt)
        full = generate(model, PROMPT, decode=DecodeConfig(max_new_tokens=24))
        stopped = generate(
            model, PROMPT, decode=DecodeConfig(max_new_tokens=24, stop_sequences=("is",))
        )
        assert "is" not in stopped and full.startswith(stopped.rstrip())

    def test_image_placeholder_without_tokens_rejected(self, base_ckpt):
        model = load_base_lm(base_ckpt)
        with pytest.raises(ContractError):
            generate(model, "Image information: <IMG>. hello", aligned_tokens=None)

    def test_injection_changes_output_only_with_adapter(self, tokenizer, base_ckpt):
        model = load_base_lm(base_ckpt)
        adapted = AdaptedLM(model.lm, tokenizer, lora=LoRAConfig(rank=2))
        with torch.no_grad():
            for name, p in adapted.named_parameters():
                if "lora_B" in name:
                    p.normal_(0, 0.3)
        prompt = "Image information: <IMG>. hello"
        tokens_a = np.zeros((32, 64), dtype=np.float32)
        tokens_b = np.random.default_rng(0).normal(size=(32, 64)).astype(np.float32)
        out_a = generate(adapted, prompt, aligned_tokens=tokens_a, decode=DecodeConfig(max_new_tokens=8))
        out_b = generate(adapted, prompt, aligned_tokens=tokens_b, decode=DecodeConfig(max_new_tokens=8))
        # different aligned tokens reach the model through the input projection
        ids = tokenizer.encode(prompt)
        e_a = adapted.embed(torch.tensor([ids]), torch.tensor(tokens_a)[None])
        e_b = adapted.embed(torch.tensor([ids]), torch.tensor(tokens_b)[None])
        assert not torch.equal(e_a, e_b)
        assert isinstance(out_a, str) and isinstance(out_b, str)


class TestClients:
    def test_toy_client_round_trip(self, base_ckpt):
        client = lm_client(f"toy:{base_ckpt}")
        assert client.supports_image_tokens
        out = client.generate(PROMPT, DecodeConfig(max_new_tokens=16))
        assert out == client.generate(PROMPT, DecodeConfig(max_new_tokens=16))

    def test_remote_client(self):
        import httpx

        def handler(request: httpx.Request) -> httpx.Response:
            import json

            payload = json.loads(request.read())
            assert "prompt" in payload and "decode" in payload
            return httpx.Response(200, json={"text": "pong"})

        client = RemoteClient("http://lm.test/generate", transport=httpx.MockTransport(handler))
        assert client.generate("ping") == "pong"

    def test_remote_client_image_capability_error(self):
        client = RemoteClient("http://lm.test/generate")
        with pytest.raises(ContractError):
            client.generate("Image information: <IMG>. hi")

    def test_remote_client_unavailable(self):
        import httpx

        from radassist.adapt import ClientUnavailable

        def handler(request):
            raise httpx.ConnectError("refused")

        client = RemoteClient("http://down.test/x", transport=httpx.MockTransport(handler))
        with pytest.raises(ClientUnavailable):
            client.generate("hi")

    def test_unresolvable_ref(self):
        with pytest.raises(ConfigError):
            lm_client("carrier-pigeon:coop")

    def test_echo_stub(self):
        client = lm_client("stub:echo")
        assert client.generate("First sentence. Second sentence.") == "First sentence."

    def test_missing_checkpoint_state_error(self, tmp_path):
        with pytest.raises(StateError):
            load_base_lm(tmp_path / "missing")
