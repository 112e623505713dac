import pytest
import torch
from fastapi.testclient import TestClient
from tokenizers import Tokenizer
from tokenizers.models import WordLevel
from tokenizers.pre_tokenizers import Whitespace
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast
from transformers.utils import logging as hf_logging

from selfroute_sidecar import ProbeEngine, create_app

hf_logging.disable_progress_bar()

WORDS = (
    "please give a very brief primary plan about how to solve the problem "
    "just no need for details calculations or final answer analysis less than "
    "words what is compute work out number add multiply twelve seven three"
).split()

MAX_CONTEXT = 96


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    """A tiny randomly initialized causal LM saved to disk.

    Word-level tokenizer (one token per whitespace-separated word, <unk>
    for anything else), 3 blocks x 16 dims, 64-position context. The
    weights are seeded, so greedy decodes are stable across sessions.
    """
    vocab = {"<pad>": 0, "<unk>": 1, "<eos>": 2}
    for word in WORDS:
        vocab.setdefault(word, len(vocab))
    backend = Tokenizer(WordLevel(vocab, unk_token="<unk>"))
    backend.pre_tokenizer = Whitespace()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=backend,
        unk_token="<unk>",
        pad_token="<pad>",
        eos_token="<eos>",
    )

    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=len(vocab),
        n_positions=128,
        n_embd=16,
        n_layer=3,
        n_head=2,
        bos_token_id=2,
        eos_token_id=2,
        pad_token_id=0,
    )
    model = GPT2LMHeadModel(config)

    path = tmp_path_factory.mktemp("model") / "tinylm"
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def engine(model_dir):
    return ProbeEngine(model_dir, max_context=MAX_CONTEXT)


@pytest.fixture(scope="session")
def client(engine):
    return TestClient(create_app(engine))
