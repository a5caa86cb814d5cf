import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    from radassist.corpus import synth_corpus

    return synth_corpus(seed=42, n=30, label_prevalences=0.25, image_size=64)


@pytest.fixture(scope="session")
def rule_labeler():
    from radassist.labeler import RuleLabeler

    return RuleLabeler()


@pytest.fixture(scope="session")
def prompt_builder():
    from radassist.prompts import PromptBuilder

    return PromptBuilder()
