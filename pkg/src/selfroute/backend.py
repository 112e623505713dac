"""Generation backends: one wire client, one deterministic synthetic stand-in.

Both kinds of backend expose the same three operations:

* ``generate(prompt, max_tokens, seed=None)`` — full answer generation.
* ``probe(prompt, max_tokens, seed=None)`` — budget-limited generation that
  also returns per-layer last-token hidden vectors.
* ``advertise()`` — a stable card: model name, layer count L, hidden dim d,
  and whether the probe route exists.

Wire protocol (shared with the sidecar probe server):
``POST /v1/generate`` {prompt, max_tokens, seed?} →
{text, prompt_tokens, completion_tokens, truncated};
``POST /v1/probe`` same request → the generate response plus
{layers: [[f32; d]; L]}; ``GET /v1/card`` →
{model_name, layers, dim, probe_capable}.

Synthetic backend model
-----------------------
Queries minted by this package embed ``[id=...]`` and ``[level=...]`` tags
in their text; the synthetic backend parses them (untagged prompts hash to
a stable id at level 3).  Per query the backend draws:

* a *canonical* solvability coin ``u`` from the stream
  ``(seed, "solve", query_id)`` — deliberately keyed without the backend
  kind, so a general and a reasoning backend built with the same seed share
  ``u`` and their correctness is comonotone (if the weaker model solves it,
  the stronger one does too).  ``generate`` with ``seed=None`` reports this
  canonical attempt; integer seeds draw independent Bernoulli trials.
* completion length ~ Poisson around the per-level mean for the backend's
  kind, clamped to at least 1 and truncated at ``max_tokens``.
* probe embeddings as class-conditional unit Gaussians: layers listed in
  ``signal_layers`` have their mean shifted by ±class_separation/2 along
  the unit direction (1,...,1)/sqrt(d) according to the canonical coin, so
  the between-class mean distance is exactly ``class_separation`` and the
  Bayes accuracy of a linear probe on a signal layer is
  Φ(class_separation/2).  Non-signal layers are identically distributed
  for both classes.

Every draw comes from a stream keyed by (seed, purpose, query id, ...), so
concurrent calls cannot perturb determinism.
"""

from __future__ import annotations

import abc
import hashlib
import math
import re
from dataclasses import dataclass, field, replace

import httpx
import numpy as np

from .core import GenerationResult, RunSeed, derive_rng, derive_seed
from .errors import (
    CapabilityError,
    ConfigError,
    DomainError,
    ProtocolError,
    TransportError,
)

__all__ = [
    "BackendSpec",
    "BackendCard",
    "ProbeResult",
    "SyntheticBackendConfig",
    "Backend",
    "SyntheticBackend",
    "WireBackend",
    "make_backend",
    "parse_query_tags",
    "synthetic_gold",
    "gaussian_capability_layers",
    "Q7B_SHORT_ACCURACY",
    "Q32B_SHORT_ACCURACY",
    "DEFAULT_LONG_ACCURACY",
    "DEFAULT_SHORT_TOKEN_MEAN",
    "DEFAULT_LONG_TOKEN_MEAN",
    "general_synthetic_config",
    "reasoning_synthetic_config",
]

GENERAL = "general"
REASONING = "reasoning"
SYNTHETIC_ENDPOINT = "synthetic"

GENERATE_PATH = "/v1/generate"
PROBE_PATH = "/v1/probe"
CARD_PATH = "/v1/card"

# Per-level short-CoT accuracies: 1 minus the published per-level mean
# difficulty of each general model.
Q7B_SHORT_ACCURACY = {1: 0.94, 2: 0.80, 3: 0.60, 4: 0.42, 5: 0.10}
Q32B_SHORT_ACCURACY = {1: 0.96, 2: 0.86, 3: 0.70, 4: 0.54, 5: 0.14}
# Long-CoT reference accuracies for the paired reasoning backend; chosen
# to dominate the short model at every level by a wide margin at level 5.
DEFAULT_LONG_ACCURACY = {1: 0.98, 2: 0.96, 3: 0.93, 4: 0.90, 5: 0.78}
# Mean completion tokens per level, shaped like observed short/long CoT
# budgets (hundreds of tokens short, thousands to tens of thousands long).
DEFAULT_SHORT_TOKEN_MEAN = {1: 300.0, 2: 400.0, 3: 700.0, 4: 1200.0, 5: 1500.0}
DEFAULT_LONG_TOKEN_MEAN = {1: 2500.0, 2: 4000.0, 3: 8000.0, 4: 14000.0, 5: 18000.0}
DEFAULT_PROBE_TOKEN_MEAN = 120.0

LEVELS = (1, 2, 3, 4, 5)

_WIRE_RETRIES = 2


@dataclass(frozen=True)
class BackendSpec:
    """Identity and transport settings of one backend.

    ``endpoint`` is either an HTTP base URL or the literal string
    ``"synthetic"``.  ``default_max_tokens`` is the answer budget used by
    the routing policy when dispatching to this backend.
    """

    name: str
    kind: str
    endpoint: str = SYNTHETIC_ENDPOINT
    default_max_tokens: int = 4096
    request_timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.kind not in (GENERAL, REASONING):
            raise ConfigError(f"backend kind must be 'general' or 'reasoning', got {self.kind!r}")
        if self.default_max_tokens < 1:
            raise ConfigError("default_max_tokens must be >= 1")
        if self.request_timeout <= 0:
            raise ConfigError("request_timeout must be positive")


@dataclass(frozen=True)
class BackendCard:
    """What a backend advertises about itself."""

    model_name: str
    layers: int
    dim: int
    probe_capable: bool


@dataclass(frozen=True)
class ProbeResult:
    """A budget-limited generation plus per-layer last-token hidden vectors."""

    generation: GenerationResult
    layers: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class SyntheticBackendConfig:
    """Knobs of the deterministic synthetic backend.

    ``per_level_accuracy`` maps level 1..5 to this backend's own solve
    probability.  Both token-mean maps are carried so one config type can
    describe either kind of backend; the backend's kind selects the map.
    """

    per_level_accuracy: dict[int, float]
    short_token_mean: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_SHORT_TOKEN_MEAN)
    )
    long_token_mean: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_LONG_TOKEN_MEAN)
    )
    probe_token_mean: float = DEFAULT_PROBE_TOKEN_MEAN
    embedding_dim: int = 64
    embedding_layers: int = 8
    signal_layers: tuple[int, ...] = (5, 6)
    class_separation: float = 4.0
    seed: RunSeed = 0

    def __post_init__(self) -> None:
        for name, table in (
            ("per_level_accuracy", self.per_level_accuracy),
            ("short_token_mean", self.short_token_mean),
            ("long_token_mean", self.long_token_mean),
        ):
            if set(table) != set(LEVELS):
                raise ConfigError(f"{name} must cover exactly levels 1..5")
        for level, p in self.per_level_accuracy.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"accuracy for level {level} outside [0,1]: {p}")
        for table in (self.short_token_mean, self.long_token_mean):
            if any(v <= 0 for v in table.values()):
                raise ConfigError("token means must be positive")
        if self.probe_token_mean <= 0:
            raise ConfigError("probe_token_mean must be positive")
        if self.embedding_dim < 1 or self.embedding_layers < 1:
            raise ConfigError("embedding_dim and embedding_layers must be >= 1")
        object.__setattr__(self, "signal_layers", tuple(sorted(set(self.signal_layers))))
        bad = [l for l in self.signal_layers if not 1 <= l <= self.embedding_layers]
        if bad:
            raise ConfigError(f"signal_layers outside 1..L: {bad}")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be nonnegative")


def general_synthetic_config(
    seed: RunSeed = 0, accuracy: dict[int, float] | None = None, **overrides: object
) -> SyntheticBackendConfig:
    """Config for a short-CoT backend (default: the 7B difficulty profile)."""
    acc = dict(accuracy if accuracy is not None else Q7B_SHORT_ACCURACY)
    return SyntheticBackendConfig(per_level_accuracy=acc, seed=seed, **overrides)  # type: ignore[arg-type]


def reasoning_synthetic_config(
    seed: RunSeed = 0, accuracy: dict[int, float] | None = None, **overrides: object
) -> SyntheticBackendConfig:
    """Config for a long-CoT backend (defaults dominate the general model)."""
    acc = dict(accuracy if accuracy is not None else DEFAULT_LONG_ACCURACY)
    return SyntheticBackendConfig(per_level_accuracy=acc, seed=seed, **overrides)  # type: ignore[arg-type]


# --------------------------------------------------------------------------
# Synthetic query plumbing
# --------------------------------------------------------------------------

_TAG_ID_RE = re.compile(r"\[id=([^\]\s]+)\]")
_TAG_LEVEL_RE = re.compile(r"\[level=([1-5])\]")


def parse_query_tags(prompt: str) -> tuple[str, int]:
    """Extract (query_id, level) tags from a prompt.

    Untagged prompts get a stable content-hash id and level 3, so the
    synthetic backend stays deterministic for arbitrary gateway traffic.
    """
    id_match = _TAG_ID_RE.search(prompt)
    level_match = _TAG_LEVEL_RE.search(prompt)
    if id_match:
        qid = id_match.group(1)
    else:
        digest = hashlib.blake2b(prompt.encode("utf-8"), digest_size=6).hexdigest()
        qid = f"anon-{digest}"
    level = int(level_match.group(1)) if level_match else 3
    return qid, level


def synthetic_gold(query_id: str) -> str:
    """Deterministic gold answer for a synthetic query id."""
    return str(100 + derive_seed(0, "gold", query_id) % 900)


def _wrong_answer(gold: str) -> str:
    return str(int(gold) + 1)


def gaussian_capability_layers(
    config: SyntheticBackendConfig, query_id: str, positive: bool
) -> tuple[np.ndarray, ...]:
    """Draw the synthetic per-layer embedding for one query.

    Signal layers are shifted by ±(class_separation/2)/sqrt(d) per
    coordinate (i.e. ±class_separation/2 along the unit all-ones
    direction); other layers are standard normal for both classes.
    """
    d = config.embedding_dim
    offset = (config.class_separation / 2.0) / math.sqrt(d)
    signal = set(config.signal_layers)
    out = []
    for layer in range(1, config.embedding_layers + 1):
        rng = derive_rng(config.seed, "embed", query_id, layer)
        vec = rng.standard_normal(d)
        if layer in signal:
            vec = vec + (offset if positive else -offset)
        out.append(vec.astype(np.float32))
    return tuple(out)


# --------------------------------------------------------------------------
# Backend interface and implementations
# --------------------------------------------------------------------------


class Backend(abc.ABC):
    """Common interface over synthetic and wire backends."""

    spec: BackendSpec

    @abc.abstractmethod
    def advertise(self) -> BackendCard: ...

    @abc.abstractmethod
    def generate(
        self, prompt: str, max_tokens: int, seed: RunSeed | None = None
    ) -> GenerationResult: ...

    @abc.abstractmethod
    def probe(
        self, prompt: str, max_tokens: int, seed: RunSeed | None = None
    ) -> ProbeResult: ...


class SyntheticBackend(Backend):
    """Deterministic in-process backend driven by per-level coin flips."""

    def __init__(self, spec: BackendSpec, config: SyntheticBackendConfig):
        if spec.endpoint != SYNTHETIC_ENDPOINT:
            raise ConfigError("SyntheticBackend requires endpoint 'synthetic'")
        self.spec = spec
        self.config = config

    def advertise(self) -> BackendCard:
        return BackendCard(
            model_name=self.spec.name,
            layers=self.config.embedding_layers,
            dim=self.config.embedding_dim,
            probe_capable=True,
        )

    def _accuracy(self, level: int) -> float:
        return self.config.per_level_accuracy[level]

    def canonical_solvable(self, query_id: str, level: int) -> bool:
        """The canonical solvability coin: shared across backend kinds.

        Backends configured with equal seeds compare one uniform draw per
        query against their own per-level accuracy, which makes outcomes
        comonotone across backends (common random numbers).
        """
        u = derive_rng(self.config.seed, "solve", query_id).random()
        return bool(u < self._accuracy(level))

    def _is_correct(self, query_id: str, level: int, seed: RunSeed | None) -> bool:
        if seed is None:
            return self.canonical_solvable(query_id, level)
        u = derive_rng(self.config.seed, "trial", self.spec.kind, query_id, seed).random()
        return bool(u < self._accuracy(level))

    def _completion_tokens(
        self, query_id: str, mean: float, max_tokens: int, stream: tuple[object, ...]
    ) -> tuple[int, bool]:
        rng = derive_rng(self.config.seed, *stream)
        raw = max(1, int(rng.poisson(mean)))
        return min(raw, max_tokens), raw > max_tokens

    def generate(
        self, prompt: str, max_tokens: int, seed: RunSeed | None = None
    ) -> GenerationResult:
        if max_tokens < 1:
            raise DomainError("max_tokens must be >= 1")
        qid, level = parse_query_tags(prompt)
        correct = self._is_correct(qid, level, seed)
        mean_map = (
            self.config.short_token_mean
            if self.spec.kind == GENERAL
            else self.config.long_token_mean
        )
        completion, truncated = self._completion_tokens(
            qid, mean_map[level], max_tokens, ("tokens", self.spec.kind, qid, seed)
        )
        gold = synthetic_gold(qid)
        answer = gold if correct else _wrong_answer(gold)
        if truncated:
            text = f"Working through {qid} step by step, but the budget ran out"
        else:
            text = f"Reasoning sketch for {qid}. The answer is {answer}."
        return GenerationResult(
            text=text,
            prompt_tokens=max(1, len(prompt) // 4),
            completion_tokens=completion,
            truncated=truncated,
        )

    def probe(
        self, prompt: str, max_tokens: int, seed: RunSeed | None = None
    ) -> ProbeResult:
        if max_tokens < 1:
            raise DomainError("max_tokens must be >= 1")
        qid, level = parse_query_tags(prompt)
        positive = self.canonical_solvable(qid, level)
        completion, truncated = self._completion_tokens(
            qid, self.config.probe_token_mean, max_tokens, ("ptokens", qid)
        )
        generation = GenerationResult(
            text=f"Plan for {qid}: outline the key quantities, then check each step.",
            prompt_tokens=max(1, len(prompt) // 4),
            completion_tokens=completion,
            truncated=truncated,
        )
        layers = gaussian_capability_layers(self.config, qid, positive)
        return ProbeResult(generation=generation, layers=layers)


class WireBackend(Backend):
    """HTTP client for the backend wire protocol.

    A custom ``httpx.Client`` may be injected (tests pass an ASGI-backed
    client); otherwise one is built from ``spec.endpoint`` and
    ``spec.request_timeout``.
    """

    def __init__(self, spec: BackendSpec, client: httpx.Client | None = None):
        if spec.endpoint == SYNTHETIC_ENDPOINT:
            raise ConfigError("WireBackend requires an HTTP endpoint")
        self.spec = spec
        self._client = client or httpx.Client(
            base_url=spec.endpoint, timeout=spec.request_timeout
        )
        self._card: BackendCard | None = None

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, path: str, payload: dict | None = None) -> httpx.Response:
        last_exc: Exception | None = None
        for _ in range(_WIRE_RETRIES + 1):
            try:
                if method == "GET":
                    return self._client.get(path)
                return self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_exc = exc
        raise TransportError(f"backend {self.spec.name}: {path} unreachable: {last_exc}")

    def _json_or_protocol_error(self, response: httpx.Response, path: str) -> dict:
        if response.status_code >= 500:
            raise TransportError(
                f"backend {self.spec.name}: {path} returned {response.status_code}"
            )
        if response.status_code >= 400:
            raise ProtocolError(
                f"backend {self.spec.name}: {path} rejected request "
                f"({response.status_code}): {response.text[:200]}"
            )
        try:
            body = response.json()
        except ValueError as exc:
            raise ProtocolError(
                f"backend {self.spec.name}: {path} returned non-JSON body"
            ) from exc
        if not isinstance(body, dict):
            raise ProtocolError(f"backend {self.spec.name}: {path} returned non-object JSON")
        return body

    @staticmethod
    def _generation_from(body: dict, name: str) -> GenerationResult:
        try:
            return GenerationResult(
                text=str(body["text"]),
                prompt_tokens=int(body["prompt_tokens"]),
                completion_tokens=int(body["completion_tokens"]),
                truncated=bool(body["truncated"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"backend {name}: malformed generation response: {exc}") from exc

    def advertise(self) -> BackendCard:
        if self._card is not None:
            return self._card
        response = self._request("GET", CARD_PATH)
        if response.status_code in (404, 405):
            self._card = BackendCard(
                model_name=self.spec.name, layers=0, dim=0, probe_capable=False
            )
            return self._card
        body = self._json_or_protocol_error(response, CARD_PATH)
        try:
            self._card = BackendCard(
                model_name=str(body["model_name"]),
                layers=int(body["layers"]),
                dim=int(body["dim"]),
                probe_capable=bool(body["probe_capable"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"backend {self.spec.name}: malformed card: {exc}") from exc
        return self._card

    def _payload(self, prompt: str, max_tokens: int, seed: RunSeed | None) -> dict:
        if max_tokens < 1:
            raise DomainError("max_tokens must be >= 1")
        payload: dict = {"prompt": prompt, "max_tokens": int(max_tokens)}
        if seed is not None:
            payload["seed"] = int(seed)
        return payload

    def generate(
        self, prompt: str, max_tokens: int, seed: RunSeed | None = None
    ) -> GenerationResult:
        payload = self._payload(prompt, max_tokens, seed)
        body = self._json_or_protocol_error(
            self._request("POST", GENERATE_PATH, payload), GENERATE_PATH
        )
        return self._generation_from(body, self.spec.name)

    def probe(
        self, prompt: str, max_tokens: int, seed: RunSeed | None = None
    ) -> ProbeResult:
        card = self.advertise()
        if not card.probe_capable:
            raise CapabilityError(f"backend {self.spec.name} does not support probing")
        payload = self._payload(prompt, max_tokens, seed)
        body = self._json_or_protocol_error(
            self._request("POST", PROBE_PATH, payload), PROBE_PATH
        )
        generation = self._generation_from(body, self.spec.name)
        raw_layers = body.get("layers")
        if not isinstance(raw_layers, list) or len(raw_layers) != card.layers:
            raise ProtocolError(
                f"backend {self.spec.name}: probe returned "
                f"{0 if not isinstance(raw_layers, list) else len(raw_layers)} layers, "
                f"card advertises {card.layers}"
            )
        layers = []
        for idx, row in enumerate(raw_layers, start=1):
            vec = np.asarray(row, dtype=np.float32)
            if vec.ndim != 1 or vec.shape[0] != card.dim:
                raise ProtocolError(
                    f"backend {self.spec.name}: probe layer {idx} has dim "
                    f"{vec.shape}, card advertises {card.dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise ProtocolError(f"backend {self.spec.name}: probe layer {idx} non-finite")
            layers.append(vec)
        return ProbeResult(generation=generation, layers=tuple(layers))


def make_backend(
    spec: BackendSpec,
    synthetic_config: SyntheticBackendConfig | None = None,
    client: httpx.Client | None = None,
) -> Backend:
    """Build the right backend for a spec.

    Synthetic endpoints need a config (a kind-appropriate default is used
    when omitted); HTTP endpoints get a wire client.
    """
    if spec.endpoint == SYNTHETIC_ENDPOINT:
        if synthetic_config is None:
            synthetic_config = (
                general_synthetic_config() if spec.kind == GENERAL else reasoning_synthetic_config()
            )
        return SyntheticBackend(spec, synthetic_config)
    return WireBackend(spec, client=client)


def with_seed(config: SyntheticBackendConfig, seed: RunSeed) -> SyntheticBackendConfig:
    """Copy a synthetic config with a different root seed."""
    return replace(config, seed=seed)
