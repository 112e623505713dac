"""Deterministic synthetic worlds for desk-scale policy comparison.

A world is a fixed set of tagged queries with, per query, pre-drawn
correctness tapes for the short and long backends, token tapes, and a
capability embedding.  Tapes are drawn per (query, backend), not per
policy: two policies that pick the same path for a query see the same
outcome (common random numbers), which makes oracle dominance an exact
property instead of a statistical one.

Both synthetic backends share the world seed, so their correctness coins
are comonotone: whenever the short model solves a query, so does the long
model (given long accuracy >= short accuracy per level).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .backend import (
    BackendSpec,
    GENERAL,
    Q32B_SHORT_ACCURACY,
    Q7B_SHORT_ACCURACY,
    REASONING,
    SyntheticBackend,
    SyntheticBackendConfig,
    gaussian_capability_layers,
    general_synthetic_config,
    reasoning_synthetic_config,
    synthetic_gold,
)
from .core import CapabilityEmbedding, Label, Query, RunSeed, derive_rng, derive_seed, grade
from .dataset import LabeledExample
from .errors import ConfigError, DomainError
from .policy import LONG, SHORT, decide, reduction_percent
from .preinference import PreinferenceConfig, collect_embedding
from .router import RouterModel, TrainConfig, TrainResult, predict, train

__all__ = [
    "ALWAYS_SHORT",
    "ALWAYS_LONG",
    "ORACLE_ROUTE",
    "ROUTER_ROUTE",
    "WorldSpec",
    "WorldQuery",
    "World",
    "RouterPolicy",
    "LevelStats",
    "SimOutcome",
    "PolicyRunResult",
    "make_world_spec",
    "q7b_world_spec",
    "q32b_world_spec",
    "reference_metrics_world_spec",
    "hard_mix_accuracy",
    "mint_tagged_query",
    "make_world",
    "world_examples",
    "fit_router_for_world",
    "run_policy",
    "run_comparison",
    "solvable_fraction",
    "sample_gaussian_examples",
    "render_comparison_table",
    "comparison_to_dict",
    "per_level_rows",
]

logger = logging.getLogger(__name__)

ALWAYS_SHORT = "always_short"
ALWAYS_LONG = "always_long"
ORACLE_ROUTE = "oracle_route"
ROUTER_ROUTE = "router_route"


@dataclass(frozen=True)
class WorldSpec:
    """Recipe for one synthetic world.

    Both backend configs are re-seeded with ``seed`` at build time so the
    world is a pure function of this spec and correctness coins are shared
    across backends.
    """

    general: SyntheticBackendConfig
    reasoning: SyntheticBackendConfig
    n_per_level: int = 500
    seed: RunSeed = 0
    allow_weaker_reasoning: bool = False

    def __post_init__(self) -> None:
        if self.n_per_level < 1:
            raise ConfigError("n_per_level must be >= 1")
        if (
            self.general.embedding_dim != self.reasoning.embedding_dim
            or self.general.embedding_layers != self.reasoning.embedding_layers
        ):
            raise ConfigError("general and reasoning embedding shapes must match")
        weaker = [
            level
            for level in (1, 2, 3, 4, 5)
            if self.reasoning.per_level_accuracy[level]
            < self.general.per_level_accuracy[level]
        ]
        if weaker:
            if not self.allow_weaker_reasoning:
                raise ConfigError(
                    f"reasoning accuracy below general at levels {weaker}; "
                    "set allow_weaker_reasoning to permit inversions"
                )
            logger.warning("reasoning backend weaker than general at levels %s", weaker)


def make_world_spec(
    seed: RunSeed = 0,
    n_per_level: int = 500,
    general_accuracy: dict[int, float] | None = None,
    long_accuracy: dict[int, float] | None = None,
    separation: float = 4.0,
    allow_weaker_reasoning: bool = False,
    **config_overrides: object,
) -> WorldSpec:
    """Convenience WorldSpec factory with shared embedding geometry."""
    general = general_synthetic_config(
        seed, accuracy=general_accuracy, class_separation=separation, **config_overrides
    )
    reasoning = reasoning_synthetic_config(
        seed, accuracy=long_accuracy, class_separation=separation, **config_overrides
    )
    return WorldSpec(
        general=general,
        reasoning=reasoning,
        n_per_level=n_per_level,
        seed=seed,
        allow_weaker_reasoning=allow_weaker_reasoning,
    )


def q7b_world_spec(seed: RunSeed = 0, n_per_level: int = 500, **kw: object) -> WorldSpec:
    """Default world: the 7B-profile short model vs a dominant long model."""
    return make_world_spec(seed=seed, n_per_level=n_per_level, **kw)  # type: ignore[arg-type]


def q32b_world_spec(seed: RunSeed = 0, n_per_level: int = 500, **kw: object) -> WorldSpec:
    """Same shape with the stronger 32B-profile short model."""
    return make_world_spec(
        seed=seed,
        n_per_level=n_per_level,
        general_accuracy=dict(Q32B_SHORT_ACCURACY),
        **kw,  # type: ignore[arg-type]
    )


def reference_metrics_world_spec(seed: RunSeed = 0, n_per_level: int = 400) -> WorldSpec:
    """World tuned so a converged router scores near acc 0.81 / f1 0.86.

    With per-level solve rates averaging 0.66 and class separation 1.65,
    the Bayes decision rule has accuracy 0.813, precision 0.837 and
    f1 0.863 in closed form; a well-trained router approaches those.
    """
    accuracy = {1: 0.95, 2: 0.85, 3: 0.65, 4: 0.50, 5: 0.35}
    return make_world_spec(
        seed=seed,
        n_per_level=n_per_level,
        general_accuracy=accuracy,
        separation=1.65,
    )


def hard_mix_accuracy() -> dict[int, float]:
    """Majority-unsolvable mix (mean 0.45): a blind router defaults long."""
    return {1: 0.80, 2: 0.60, 3: 0.45, 4: 0.30, 5: 0.10}


@dataclass(frozen=True)
class WorldQuery:
    query: Query
    level: int
    short_correct: bool
    long_correct: bool
    short_tokens: int
    long_tokens: int
    probe_tokens: int
    embedding: CapabilityEmbedding


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    queries: tuple[WorldQuery, ...]
    general: SyntheticBackend
    reasoning: SyntheticBackend
    preinference: PreinferenceConfig

    @property
    def embedding_dim(self) -> int:
        return self.general.config.embedding_dim

    @property
    def embedding_layers(self) -> int:
        return self.general.config.embedding_layers


def mint_tagged_query(level: int, index: int, id_prefix: str = "L") -> Query:
    """Deterministic tagged query whose id/level the synthetic backend parses."""
    qid = f"{id_prefix}{level}-q{index:05d}"
    text = (
        f"[id={qid}] [level={level}] Work out problem {index} at tier {level} "
        "and give the final number."
    )
    return Query(id=qid, text=text, source=f"tier{level}", gold_answer=synthetic_gold(qid))


def make_world(spec: WorldSpec) -> World:
    """Materialize all queries, tapes, and embeddings for a spec."""
    general_cfg = replace(spec.general, seed=spec.seed)
    reasoning_cfg = replace(spec.reasoning, seed=spec.seed)
    general = SyntheticBackend(
        BackendSpec(name="synthetic-general", kind=GENERAL), general_cfg
    )
    reasoning = SyntheticBackend(
        BackendSpec(name="synthetic-reasoning", kind=REASONING, default_max_tokens=32768),
        reasoning_cfg,
    )
    pre = PreinferenceConfig()

    queries = []
    for level in (1, 2, 3, 4, 5):
        for i in range(spec.n_per_level):
            query = mint_tagged_query(level, i)
            gold = query.gold_answer
            short_res = general.generate(query.text, general.spec.default_max_tokens)
            long_res = reasoning.generate(query.text, reasoning.spec.default_max_tokens)
            embedding = collect_embedding(query, general, pre)
            queries.append(
                WorldQuery(
                    query=query,
                    level=level,
                    short_correct=bool(grade(short_res.text, gold)),
                    long_correct=bool(grade(long_res.text, gold)),
                    short_tokens=short_res.completion_tokens,
                    long_tokens=long_res.completion_tokens,
                    probe_tokens=embedding.probe_tokens,
                    embedding=embedding,
                )
            )
    return World(
        spec=spec,
        queries=tuple(queries),
        general=general,
        reasoning=reasoning,
        preinference=pre,
    )


def world_examples(world: World) -> list[LabeledExample]:
    """Router training pairs straight off the world's tapes."""
    return [
        LabeledExample(
            query_id=wq.query.id,
            embedding=wq.embedding,
            label=Label(int(wq.short_correct)),
        )
        for wq in world.queries
    ]


def fit_router_for_world(
    spec: WorldSpec,
    layer: int | None = None,
    config: TrainConfig | None = None,
) -> TrainResult:
    """Train a router on a companion world derived from ``spec.seed``.

    The training world has the same recipe but an independent seed, so
    evaluation on the original world is held-out.  ``layer`` defaults to
    the deepest signal layer (the 60-80% depth band of the default
    geometry).
    """
    train_spec = replace(spec, seed=derive_seed(spec.seed, "router-train"))
    train_world = make_world(train_spec)
    chosen_layer = layer if layer is not None else spec.general.signal_layers[-1]
    train_config = config or TrainConfig(seed=derive_seed(spec.seed, "router-config"))
    return train(world_examples(train_world), chosen_layer, train_config)


# --------------------------------------------------------------------------
# Policies over a world
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RouterPolicy:
    model: RouterModel
    threshold: float = 0.5
    name: str = ROUTER_ROUTE


@dataclass(frozen=True)
class LevelStats:
    n: int
    accuracy: float
    mean_tokens: float


@dataclass(frozen=True)
class SimOutcome:
    query_id: str
    level: int
    path: str
    probability: float
    correct: bool
    tokens: int


@dataclass(frozen=True)
class PolicyRunResult:
    policy: str
    n: int
    accuracy: float
    mean_tokens: float
    total_tokens: int
    per_level: dict[int, LevelStats]
    outcomes: tuple[SimOutcome, ...]

    @property
    def short_fraction(self) -> float:
        return sum(1 for o in self.outcomes if o.path == SHORT) / self.n


def _world_probability(wq: WorldQuery, policy: str | RouterPolicy) -> float:
    if isinstance(policy, RouterPolicy):
        return predict(policy.model, wq.embedding.layer_vector(policy.model.layer))
    if policy == ALWAYS_SHORT:
        return 1.0
    if policy == ALWAYS_LONG:
        return 0.0
    if policy == ORACLE_ROUTE:
        return 1.0 if wq.short_correct else 0.0
    raise DomainError(f"unknown policy {policy!r}")


def run_policy(world: World, policy: str | RouterPolicy) -> PolicyRunResult:
    """Replay one policy over the world's shared tapes.

    Fixed policies (always short/long) skip the probe and pay no probe
    tokens; routed policies (oracle, router) always pay them.  Token
    counts are completion tokens, matching response-length accounting.
    """
    if isinstance(policy, RouterPolicy):
        if policy.model.dim != world.embedding_dim:
            raise DomainError(
                f"router dim {policy.model.dim} != world dim {world.embedding_dim}"
            )
        if policy.model.layer > world.embedding_layers:
            raise DomainError("router layer exceeds world layer count")
        threshold = policy.threshold
        name = policy.name
        probed = True
    else:
        threshold = 0.5
        name = policy
        probed = policy == ORACLE_ROUTE

    outcomes = []
    for wq in world.queries:
        probability = _world_probability(wq, policy)
        path = decide(probability, threshold)
        correct = wq.short_correct if path == SHORT else wq.long_correct
        tokens = wq.short_tokens if path == SHORT else wq.long_tokens
        if probed:
            tokens += wq.probe_tokens
        outcomes.append(
            SimOutcome(
                query_id=wq.query.id,
                level=wq.level,
                path=path,
                probability=probability,
                correct=correct,
                tokens=tokens,
            )
        )

    n = len(outcomes)
    total_tokens = sum(o.tokens for o in outcomes)
    per_level = {}
    for level in (1, 2, 3, 4, 5):
        level_outcomes = [o for o in outcomes if o.level == level]
        if not level_outcomes:
            continue
        per_level[level] = LevelStats(
            n=len(level_outcomes),
            accuracy=sum(o.correct for o in level_outcomes) / len(level_outcomes),
            mean_tokens=sum(o.tokens for o in level_outcomes) / len(level_outcomes),
        )
    return PolicyRunResult(
        policy=name,
        n=n,
        accuracy=sum(o.correct for o in outcomes) / n,
        mean_tokens=total_tokens / n,
        total_tokens=total_tokens,
        per_level=per_level,
        outcomes=tuple(outcomes),
    )


def run_comparison(
    world: World, router_policy: RouterPolicy | None = None
) -> dict[str, PolicyRunResult]:
    """always_short / always_long / oracle_route (+ router_route) side by side."""
    results = {
        ALWAYS_SHORT: run_policy(world, ALWAYS_SHORT),
        ALWAYS_LONG: run_policy(world, ALWAYS_LONG),
        ORACLE_ROUTE: run_policy(world, ORACLE_ROUTE),
    }
    if router_policy is not None:
        results[router_policy.name] = run_policy(world, router_policy)
    return results


def solvable_fraction(world: World, model: RouterModel, threshold: float) -> float:
    """Fraction of the world the router sends down the short path."""
    short = 0
    for wq in world.queries:
        probability = predict(model, wq.embedding.layer_vector(model.layer))
        if decide(probability, threshold) == SHORT:
            short += 1
    return short / len(world.queries)


def sample_gaussian_examples(
    n: int,
    seed: RunSeed,
    dim: int = 64,
    layers: int = 8,
    signal_layers: Sequence[int] = (5, 6),
    separation: float = 4.0,
    positive_rate: float = 0.5,
) -> list[LabeledExample]:
    """Labeled Gaussian embeddings straight from the synthetic generator.

    Bypasses query plumbing: labels are the class coins themselves.  Used
    for router fixtures where the Bayes rate must be known exactly.
    """
    config = general_synthetic_config(
        seed,
        embedding_dim=dim,
        embedding_layers=layers,
        signal_layers=tuple(signal_layers),
        class_separation=separation,
    )
    examples = []
    for i in range(n):
        qid = f"g{i:06d}"
        positive = derive_rng(seed, "gclass", qid).random() < positive_rate
        embedding = CapabilityEmbedding(
            layers=gaussian_capability_layers(config, qid, positive),
            probe_text="",
            probe_tokens=0,
            query_id=qid,
        )
        examples.append(
            LabeledExample(
                query_id=qid,
                embedding=embedding,
                label=Label.SOLVED if positive else Label.UNSOLVED,
            )
        )
    return examples


# --------------------------------------------------------------------------
# Presentation
# --------------------------------------------------------------------------


def comparison_to_dict(results: dict[str, PolicyRunResult]) -> dict:
    """JSON-ready comparison summary with reductions vs always_long."""
    reference = results.get(ALWAYS_LONG)
    out: dict = {}
    for name, res in results.items():
        entry = {
            "n": res.n,
            "accuracy": res.accuracy,
            "mean_tokens": res.mean_tokens,
            "total_tokens": res.total_tokens,
            "short_fraction": res.short_fraction,
            "per_level": {
                str(level): {
                    "n": stats.n,
                    "accuracy": stats.accuracy,
                    "mean_tokens": stats.mean_tokens,
                }
                for level, stats in sorted(res.per_level.items())
            },
        }
        if reference is not None and reference.mean_tokens > 0:
            entry["reduction_vs_long"] = reduction_percent(
                res.mean_tokens, reference.mean_tokens
            )
        out[name] = entry
    return out


def render_comparison_table(results: dict[str, PolicyRunResult]) -> str:
    headers = ("policy", "acc", "mean_tokens", "short%", "vs_long")
    reference = results.get(ALWAYS_LONG)
    rows = []
    for name, res in results.items():
        reduction = ""
        if reference is not None and reference.mean_tokens > 0:
            reduction = f"-{reduction_percent(res.mean_tokens, reference.mean_tokens)}%"
        rows.append(
            (
                name,
                f"{100 * res.accuracy:.1f}",
                f"{res.mean_tokens:.1f}",
                f"{100 * res.short_fraction:.1f}",
                reduction,
            )
        )
    widths = [
        max(len(headers[i]), *(len(row[i]) for row in rows)) for i in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)


def per_level_rows(results: dict[str, PolicyRunResult]) -> list[dict]:
    """Flat rows (policy, level, n, accuracy, mean_tokens) for CSV export."""
    rows = []
    for name, res in results.items():
        for level, stats in sorted(res.per_level.items()):
            rows.append(
                {
                    "policy": name,
                    "level": level,
                    "n": stats.n,
                    "accuracy": stats.accuracy,
                    "mean_tokens": stats.mean_tokens,
                }
            )
    return rows
