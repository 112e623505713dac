"""Greedy decoding with per-layer hidden-state capture.

One engine wraps one locally available causal LM. Generation is greedy
(temperature-free) so identical requests produce identical text and
identical hidden-state bytes, which is what the routing tests upstream
rely on. The probe's capability embedding is read from a single forward
pass over the full decoded sequence: the hidden state of every
transformer block (post-block residual stream, indexed 1..L) at the last
token position. The block-input embedding layer is deliberately
excluded.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer


class ContextOverflowError(Exception):
    """Prompt leaves no room to generate within the model context."""


@dataclass(frozen=True)
class ModelCard:
    model_name: str
    layers: int
    dim: int
    max_context: int
    probe_capable: bool = True

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "layers": self.layers,
            "dim": self.dim,
            "probe_capable": self.probe_capable,
            "max_context": self.max_context,
        }


@dataclass(frozen=True)
class DecodeResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    truncated: bool
    layers: tuple[np.ndarray, ...] | None


class ProbeEngine:
    """Single-model decode/probe engine; one generation in flight at a time."""

    def __init__(self, model_dir: str | Path, max_context: int | None = None):
        self.model = AutoModelForCausalLM.from_pretrained(model_dir)
        self.model.eval()
        self.tokenizer = AutoTokenizer.from_pretrained(model_dir)
        config = self.model.config
        model_limit = int(config.max_position_embeddings)
        self.card = ModelCard(
            model_name=Path(model_dir).name or str(model_dir),
            layers=int(config.num_hidden_layers),
            dim=int(config.hidden_size),
            max_context=min(max_context or model_limit, model_limit),
        )
        pad = self.tokenizer.pad_token_id
        self._pad_id = pad if pad is not None else self.tokenizer.eos_token_id
        self._lock = threading.Lock()

    def decode(self, prompt: str, max_tokens: int, capture_hidden: bool) -> DecodeResult:
        """Greedy-decode up to max_tokens; optionally capture hidden states.

        `truncated` means generation stopped at the budget (or the context
        edge) rather than on the end-of-sequence token.
        """
        input_ids = self.tokenizer(prompt, return_tensors="pt").input_ids
        prompt_tokens = int(input_ids.shape[1])
        room = self.card.max_context - prompt_tokens
        if room < 1:
            raise ContextOverflowError(
                f"prompt is {prompt_tokens} tokens; max_context "
                f"{self.card.max_context} leaves no room to generate"
            )
        budget = min(max_tokens, room)

        with self._lock, torch.no_grad():
            sequence = self.model.generate(
                input_ids,
                attention_mask=torch.ones_like(input_ids),
                max_new_tokens=budget,
                do_sample=False,
                pad_token_id=self._pad_id,
            )[0]
            completion = sequence[prompt_tokens:]
            completion_tokens = int(completion.shape[0])
            ended = (
                completion_tokens > 0
                and int(completion[-1]) == self.tokenizer.eos_token_id
            )
            layers = None
            if capture_hidden:
                states = self.model(
                    sequence.unsqueeze(0), output_hidden_states=True
                ).hidden_states
                layers = tuple(
                    s[0, -1, :].numpy().astype(np.float32) for s in states[1:]
                )

        return DecodeResult(
            text=self.tokenizer.decode(completion, skip_special_tokens=True),
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            truncated=not ended,
            layers=layers,
        )
