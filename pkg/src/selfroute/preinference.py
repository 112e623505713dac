"""Pre-inference pass: probe prompt rendering and embedding capture.

The router never sees the question directly.  It sees the hidden states
of the *general* backend while that backend sketches a brief plan under a
small token budget; this module renders the plan prompt, runs the probe,
and packages the per-layer last-token vectors as a
:class:`~selfroute.core.CapabilityEmbedding`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .backend import Backend
from .core import CapabilityEmbedding, Query, RunSeed
from .errors import CapabilityError, ConfigError

__all__ = [
    "PROBE_INSTRUCTION",
    "DEFAULT_PROBE_TEMPLATE",
    "DEFAULT_BUDGET_TOKENS",
    "PreinferenceConfig",
    "render_prompt",
    "collect_embedding",
]

logger = logging.getLogger(__name__)

PROBE_INSTRUCTION = (
    "Please give a very brief primary plan about how to solve the problem. "
    "Just give a very very brief plan, no need for details, calculations or "
    "final answer. Just a very brief analysis. Less than 200 words."
)

# Instruction first, question after, per the template contract.
DEFAULT_PROBE_TEMPLATE = PROBE_INSTRUCTION + "\n\n{question}"

# The instruction asks for under 200 words; 256 tokens bounds that with
# headroom (observed probe lengths sit well under it).
DEFAULT_BUDGET_TOKENS = 256

_SLOT = "{question}"


@dataclass(frozen=True)
class PreinferenceConfig:
    """How the probe pass runs.

    ``layer_selection`` of None keeps all advertised layers in the
    embedding; an integer keeps just that 1-based layer (the deployed
    router only ever reads one).
    """

    prompt_template: str = DEFAULT_PROBE_TEMPLATE
    budget_tokens: int = DEFAULT_BUDGET_TOKENS
    layer_selection: int | None = None

    def __post_init__(self) -> None:
        if self.prompt_template.count(_SLOT) != 1:
            raise ConfigError("prompt_template must contain exactly one {question} slot")
        if self.budget_tokens < 1:
            raise ConfigError("budget_tokens must be >= 1")
        if self.layer_selection is not None and self.layer_selection < 1:
            raise ConfigError("layer_selection must be a 1-based layer index")


def render_prompt(query: Query, config: PreinferenceConfig) -> str:
    """Substitute the question into the probe template.

    Plain string replacement, not str.format: question text may legally
    contain braces.
    """
    if not query.text.strip():
        logger.warning("query %s has empty text; probing the bare template", query.id)
    return config.prompt_template.replace(_SLOT, query.text)


def collect_embedding(
    query: Query,
    backend: Backend,
    config: PreinferenceConfig,
    seed: RunSeed | None = None,
) -> CapabilityEmbedding:
    """Run the budget-limited probe and capture the capability embedding.

    The embedding holds each captured layer's hidden vector at the final
    decoding timestep of the probe generation.  If the backend generated
    zero tokens, the vectors describe the last prompt token instead and
    the embedding is flagged ``from_prompt_only``.
    """
    card = backend.advertise()
    if not card.probe_capable:
        raise CapabilityError(f"backend {backend.spec.name} cannot serve probes")
    if config.layer_selection is not None and config.layer_selection > card.layers:
        raise ConfigError(
            f"layer_selection {config.layer_selection} exceeds advertised L={card.layers}"
        )
    prompt = render_prompt(query, config)
    result = backend.probe(prompt, config.budget_tokens, seed=seed)

    layers = result.layers
    indices = tuple(range(1, len(layers) + 1))
    if config.layer_selection is not None:
        layers = (layers[config.layer_selection - 1],)
        indices = (config.layer_selection,)

    generated = result.generation.completion_tokens
    if generated == 0:
        logger.warning("probe for query %s generated zero tokens", query.id)
    return CapabilityEmbedding(
        layers=layers,
        probe_text=result.generation.text,
        probe_tokens=generated,
        query_id=query.id,
        layer_indices=indices,
        from_prompt_only=generated == 0,
    )
