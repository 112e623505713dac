"""Routing decision rule, end-to-end answering, and evaluation arithmetic.

A query is answered in two stages: a budget-limited probe on the general
backend yields a capability embedding; the router scores it, and the
query is dispatched short (general backend) when P >= threshold, long
(reasoning backend) otherwise.  The probe's tokens are always charged to
the routed policy, long path included.

The report arithmetic mirrors the published tables: per-dataset accuracy
averaged unweighted, token means weighted by dataset size, reductions and
probe-overhead ratios rounded half-up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .backend import Backend, GENERAL, REASONING
from .core import Query, grade
from .errors import DomainError, ReportError, SelfRouteError
from .preinference import PreinferenceConfig, collect_embedding
from .router import RouterModel, predict

__all__ = [
    "SHORT",
    "LONG",
    "decide",
    "TokenLedger",
    "RouteOutcome",
    "AnswerResult",
    "RoutePolicyConfig",
    "answer",
    "overhead_ratio",
    "reduction_percent",
    "DatasetResult",
    "EvalReport",
    "report",
    "render_report_table",
    "write_route_results",
]

SHORT = "short"
LONG = "long"


def decide(p: float, threshold: float) -> str:
    """Route short iff P >= threshold (inclusive at the boundary)."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability outside [0,1]: {p}")
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold outside [0,1]: {threshold}")
    return SHORT if p >= threshold else LONG


@dataclass(frozen=True)
class TokenLedger:
    """Token accounting for one routed query."""

    probe_tokens: int
    answer_prompt_tokens: int
    answer_completion_tokens: int
    path: str
    probability: float

    def __post_init__(self) -> None:
        if min(self.probe_tokens, self.answer_prompt_tokens, self.answer_completion_tokens) < 0:
            raise DomainError("token counts must be >= 0")
        if self.path not in (SHORT, LONG):
            raise DomainError(f"path must be short or long, got {self.path!r}")

    @property
    def total_tokens(self) -> int:
        return self.probe_tokens + self.answer_prompt_tokens + self.answer_completion_tokens


@dataclass(frozen=True)
class RouteOutcome:
    query_id: str
    path: str
    probability: float
    router_layer: int
    correct: bool | None


@dataclass(frozen=True)
class AnswerResult:
    text: str
    ledger: TokenLedger
    outcome: RouteOutcome


@dataclass(frozen=True)
class RoutePolicyConfig:
    """Everything answer() needs: router, both backends, probe settings."""

    router: RouterModel
    general: Backend
    reasoning: Backend
    preinference: PreinferenceConfig
    route_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.route_threshold <= 1.0:
            raise DomainError("route_threshold must be in [0,1]")
        if self.general.spec.kind != GENERAL:
            raise DomainError("general backend must have kind 'general'")
        if self.reasoning.spec.kind != REASONING:
            raise DomainError("reasoning backend must have kind 'reasoning'")


def _tag_stage(exc: SelfRouteError, stage: str) -> None:
    if exc.stage is None:
        exc.stage = stage


def answer(
    query: Query, config: RoutePolicyConfig, threshold: float | None = None
) -> AnswerResult:
    """Probe, score, route, and answer one query.

    Router/backend shape mismatches are rejected before any generation;
    backend failures propagate tagged with the stage ("preinference" or
    "answer") that hit them.  ``threshold`` overrides the config's
    route_threshold for this call only.
    """
    active_threshold = config.route_threshold if threshold is None else threshold
    if not 0.0 <= active_threshold <= 1.0:
        raise DomainError("threshold must be in [0,1]")

    try:
        card = config.general.advertise()
        if card.probe_capable:
            if config.router.layer > card.layers:
                raise DomainError(
                    f"router layer {config.router.layer} exceeds backend layers {card.layers}"
                )
            if config.router.dim != card.dim:
                raise DomainError(
                    f"router dim {config.router.dim} != backend dim {card.dim}"
                )
        selection = config.preinference.layer_selection
        if selection is not None and selection != config.router.layer:
            raise DomainError(
                f"preinference captures layer {selection} but router reads {config.router.layer}"
            )
        embedding = collect_embedding(query, config.general, config.preinference)
        probability = predict(config.router, embedding.layer_vector(config.router.layer))
    except SelfRouteError as exc:
        _tag_stage(exc, "preinference")
        raise

    path = decide(probability, active_threshold)
    backend = config.general if path == SHORT else config.reasoning
    try:
        result = backend.generate(query.text, backend.spec.default_max_tokens)
    except SelfRouteError as exc:
        _tag_stage(exc, "answer")
        raise

    correct = None
    if query.gold_answer is not None:
        correct = bool(grade(result.text, query.gold_answer))
    ledger = TokenLedger(
        probe_tokens=embedding.probe_tokens,
        answer_prompt_tokens=result.prompt_tokens,
        answer_completion_tokens=result.completion_tokens,
        path=path,
        probability=probability,
    )
    outcome = RouteOutcome(
        query_id=query.id,
        path=path,
        probability=probability,
        router_layer=config.router.layer,
        correct=correct,
    )
    return AnswerResult(text=result.text, ledger=ledger, outcome=outcome)


# --------------------------------------------------------------------------
# Table arithmetic
# --------------------------------------------------------------------------


def overhead_ratio(mean_probe: float, mean_long: float) -> float:
    """Probe overhead as a percentage of long-path tokens, half-up to 0.1."""
    if mean_long <= 0:
        raise DomainError("mean_long must be positive")
    if mean_probe < 0:
        raise DomainError("mean_probe must be >= 0")
    value = Decimal(100) * Decimal(repr(mean_probe)) / Decimal(repr(mean_long))
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def reduction_percent(avg_tokens: float, reference_avg_tokens: float) -> int:
    """Token reduction vs a reference, as an integer percent (half-up)."""
    if reference_avg_tokens <= 0:
        raise DomainError("reference_avg_tokens must be positive")
    if avg_tokens < 0:
        raise DomainError("avg_tokens must be >= 0")
    value = Decimal(100) * (
        Decimal(1) - Decimal(repr(avg_tokens)) / Decimal(repr(reference_avg_tokens))
    )
    return int(value.quantize(Decimal("1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class DatasetResult:
    """Per-dataset aggregate; accuracy on whatever scale the caller uses."""

    accuracy: float
    mean_tokens: float
    n: int | None = None


@dataclass(frozen=True)
class EvalReport:
    per_dataset: dict[str, DatasetResult]
    avg_accuracy: float
    avg_tokens: float
    reduction_vs_reference: int | None

    def to_dict(self) -> dict:
        return {
            "per_dataset": {
                name: {
                    "accuracy": res.accuracy,
                    "mean_tokens": res.mean_tokens,
                    "n": res.n,
                }
                for name, res in self.per_dataset.items()
            },
            "avg_accuracy": self.avg_accuracy,
            "avg_tokens": self.avg_tokens,
            "reduction_vs_reference": self.reduction_vs_reference,
        }


def report(
    per_dataset: dict[str, DatasetResult],
    sizes: dict[str, int],
    reference: dict[str, float] | None = None,
) -> EvalReport:
    """Aggregate per-dataset results into the published-table shape.

    avg_accuracy is the unweighted mean over datasets; avg_tokens is the
    size-weighted mean.  When per-dataset reference token means are given
    (e.g. the always-long policy), the integer reduction percentage is
    computed against their size-weighted mean.
    """
    if not per_dataset:
        raise ReportError("no datasets to report")
    missing = [name for name in per_dataset if name not in sizes]
    if missing:
        raise ReportError(f"sizes missing for datasets: {missing}")
    bad_sizes = [name for name in per_dataset if sizes[name] < 1]
    if bad_sizes:
        raise ReportError(f"non-positive sizes for datasets: {bad_sizes}")

    total = sum(sizes[name] for name in per_dataset)
    avg_accuracy = sum(res.accuracy for res in per_dataset.values()) / len(per_dataset)
    avg_tokens = (
        sum(res.mean_tokens * sizes[name] for name, res in per_dataset.items()) / total
    )

    reduction = None
    if reference is not None:
        missing_ref = [name for name in per_dataset if name not in reference]
        if missing_ref:
            raise ReportError(f"reference tokens missing for datasets: {missing_ref}")
        reference_avg = sum(reference[name] * sizes[name] for name in per_dataset) / total
        reduction = reduction_percent(avg_tokens, reference_avg)

    resolved = {
        name: DatasetResult(res.accuracy, res.mean_tokens, sizes[name])
        for name, res in per_dataset.items()
    }
    return EvalReport(
        per_dataset=resolved,
        avg_accuracy=avg_accuracy,
        avg_tokens=avg_tokens,
        reduction_vs_reference=reduction,
    )


def render_report_table(rep: EvalReport) -> str:
    """Aligned text table: one row per dataset plus the AVG row."""
    headers = ("dataset", "acc", "tokens", "n")
    rows = [
        (name, f"{res.accuracy:.1f}", f"{res.mean_tokens:.1f}", str(res.n))
        for name, res in rep.per_dataset.items()
    ]
    avg_row = (
        "AVG",
        f"{rep.avg_accuracy:.1f}",
        f"{rep.avg_tokens:.1f}",
        str(sum(res.n or 0 for res in rep.per_dataset.values())),
    )
    rows.append(avg_row)
    widths = [
        max(len(headers[i]), *(len(row[i]) for row in rows)) for i in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    if rep.reduction_vs_reference is not None:
        lines.append(f"token reduction vs reference: {rep.reduction_vs_reference}%")
    return "\n".join(lines)


def write_route_results(path: str | Path, results: list[AnswerResult]) -> None:
    """Per-query JSONL: query_id, path, P, correct, probe/completion tokens."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for res in results:
            fh.write(
                json.dumps(
                    {
                        "query_id": res.outcome.query_id,
                        "path": res.outcome.path,
                        "P": res.outcome.probability,
                        "correct": res.outcome.correct,
                        "probe_tokens": res.ledger.probe_tokens,
                        "completion_tokens": res.ledger.answer_completion_tokens,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")
