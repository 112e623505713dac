"""Shared domain types, deterministic seeding, and answer normalization.

Everything downstream (backends, datasets, the router, policies, the
gateway) builds on the small vocabulary defined here: a :class:`Query`
with an optional gold answer, a :class:`GenerationResult` with token
accounting, a :class:`CapabilityEmbedding` holding per-layer last-token
hidden vectors, and a binary :class:`Label` for "the general model
solved it".

Determinism contract
--------------------
All stochastic code in this package draws from generators produced by
:func:`derive_rng`.  Streams are keyed by a root seed plus a tuple of
string/int parts (for example ``("trial", query_id, 3)``), hashed with
BLAKE2b into a 64-bit seed for :class:`numpy.random.PCG64`.  Equal keys
give bit-identical streams on every platform; distinct keys give
independent streams, so concurrent work cannot perturb replayability.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, MissingGoldError

__all__ = [
    "Label",
    "Query",
    "GenerationResult",
    "CapabilityEmbedding",
    "RunSeed",
    "derive_seed",
    "derive_rng",
    "stable_fingerprint",
    "normalize_answer",
    "grade",
]

# A run seed is a plain unsigned 64-bit integer.  Kept as an alias so
# signatures document intent without inventing a wrapper class.
RunSeed = int


class Label(enum.IntEnum):
    """Binary solvability label: 1 iff the short-CoT answer graded correct."""

    UNSOLVED = 0
    SOLVED = 1


@dataclass(frozen=True)
class Query:
    """One benchmark question.

    Attributes:
        id: Opaque identifier, unique within a dataset.
        text: The question text shown to backends. Must be non-empty.
        source: Dataset tag used for stratified sampling (may be empty).
        gold_answer: Reference answer, if known. Stored raw; grading
            normalizes both sides.
    """

    id: str
    text: str
    source: str = ""
    gold_answer: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise DomainError("query id must be non-empty")
        if not self.text:
            raise DomainError("query text must be non-empty")


@dataclass(frozen=True)
class GenerationResult:
    """Output of one backend generation call.

    ``truncated`` is set iff the token budget stopped generation before
    the backend chose to stop on its own.
    """

    text: str
    prompt_tokens: int
    completion_tokens: int
    truncated: bool

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise DomainError("token counts must be >= 0")


@dataclass(frozen=True)
class CapabilityEmbedding:
    """Per-layer last-token hidden vectors from a budget-limited probe.

    ``layers[i]`` is the hidden vector of transformer layer
    ``layer_indices[i]`` (1-based) at the final decoding timestep of the
    probe generation.  All vectors share one dimension ``d`` and are
    stored as float32; router arithmetic upcasts to float64.

    Attributes:
        layers: Tuple of L float32 vectors, one per captured layer.
        layer_indices: 1-based indices of the captured layers, ascending.
        probe_text: The text the probe pass generated.
        probe_tokens: Completion tokens consumed by the probe pass.
        query_id: Id of the query the probe ran on.
        from_prompt_only: True when the probe generated zero tokens and
            the embedding was taken at the last prompt token instead.
    """

    layers: tuple[np.ndarray, ...]
    probe_text: str
    probe_tokens: int
    query_id: str
    layer_indices: tuple[int, ...] = field(default=())
    from_prompt_only: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(np.asarray(v) for v in self.layers))
        if len(self.layers) < 1:
            raise DomainError("embedding must carry at least one layer")
        dims = {v.shape for v in self.layers}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise DomainError("all embedding layers must be 1-D vectors of one dimension")
        for vec in self.layers:
            if not np.all(np.isfinite(vec)):
                raise DomainError("embedding contains non-finite values")
        if not self.layer_indices:
            object.__setattr__(self, "layer_indices", tuple(range(1, len(self.layers) + 1)))
        if len(self.layer_indices) != len(self.layers):
            raise DomainError("layer_indices length must match layers")
        if self.probe_tokens < 0:
            raise DomainError("probe_tokens must be >= 0")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return int(self.layers[0].shape[0])

    def layer_vector(self, layer: int) -> np.ndarray:
        """Return the vector for 1-based transformer layer ``layer``."""
        try:
            pos = self.layer_indices.index(layer)
        except ValueError:
            raise DomainError(
                f"layer {layer} not captured (have layers {list(self.layer_indices)})"
            ) from None
        return self.layers[pos]


# --------------------------------------------------------------------------
# Deterministic seeding
# --------------------------------------------------------------------------

_SEED_MASK = (1 << 64) - 1


def derive_seed(seed: RunSeed, *parts: object) -> int:
    """Hash a root seed plus key parts into a stable 64-bit stream seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed) & _SEED_MASK).encode("utf-8"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def derive_rng(seed: RunSeed, *parts: object) -> np.random.Generator:
    """Independent, replayable generator for the stream keyed by ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *parts)))


def stable_fingerprint(items: object) -> str:
    """Short stable hex digest of a printable object (dataset fingerprints)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(items).encode("utf-8"))
    return h.hexdigest()


# --------------------------------------------------------------------------
# Answer normalization and grading
# --------------------------------------------------------------------------

_BOXED_RE = re.compile(r"\\boxed\s*\{([^{}]*)\}")
_ANSWER_CUE_RE = re.compile(r"(?:final\s+answer|answer)\s*(?:is|:|=)\s*", re.IGNORECASE)
_GROUPED_INT_RE = re.compile(r"^-?\d{1,3}(?:,\d{3})+$")
_FINAL_TOKEN_RE = re.compile(
    r"(-?\d[\d,]*(?:\.\d+)?(?:\s*/\s*-?\d+)?|\b[a-e]\b)\s*$"
)
_EDGE_CHARS = "\"'()[]{}$ \t\n"
_TRAIL_PUNCT = ".,;:!?"


def _strip_edges(text: str) -> str:
    prev = None
    while prev != text:
        prev = text
        text = text.strip(_EDGE_CHARS)
        text = text.rstrip(_TRAIL_PUNCT)
    return text


def normalize_answer(raw: str) -> str:
    """Canonicalize an answer string for exact-match grading.

    Rules, applied in order: unwrap the last ``\\boxed{...}`` if present;
    otherwise cut everything before a final "answer is / answer:" cue;
    lowercase; collapse whitespace; strip wrapping quotes, brackets,
    dollar signs and trailing punctuation; finally, if the remaining text
    still ends in a numeric token or a bare option letter a-e, keep just
    that token.  Empty input yields the empty string.  Idempotent.
    """
    if raw is None:
        return ""
    text = raw.strip()
    if not text:
        return ""

    boxed = _BOXED_RE.findall(text)
    if boxed:
        text = boxed[-1]
    else:
        cues = list(_ANSWER_CUE_RE.finditer(text))
        if cues:
            text = text[cues[-1].end():]

    text = " ".join(text.lower().split())
    text = _strip_edges(text)

    m = _FINAL_TOKEN_RE.search(text)
    if m:
        token = m.group(1).strip()
        if _GROUPED_INT_RE.match(token):
            token = token.replace(",", "")
        # Only shrink to the token; never replace a token-only string
        # with something different (keeps normalization idempotent).
        text = token if token else text
    return text


def grade(candidate: str, gold: str | None) -> Label:
    """Exact-match grading after normalizing both sides.

    Raises:
        MissingGoldError: if ``gold`` is None or normalizes to empty.
    """
    if gold is None or normalize_answer(gold) == "":
        raise MissingGoldError("cannot grade without a gold answer")
    if normalize_answer(candidate) == normalize_answer(gold):
        return Label.SOLVED
    return Label.UNSOLVED
